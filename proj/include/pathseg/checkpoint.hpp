#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pathseg {

/// Weight container shared by backbone and head checkpoints.
///
/// Layout:
///
///     PATHSEG-CHECKPOINT 1\n
///     key=value\n                      (metadata, any number, keys unique)
///     tensor <name> <d0>x<d1>x...\n     (one line per array, payload order)
///     end_header\n
///     <payload>
///
/// The payload is the concatenation of every array as little-endian IEEE-754
/// float64, in header order, with no padding. Keys and tensor names may not
/// contain whitespace, '=' or newlines.
class Checkpoint {
 public:
  struct Array {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
  };

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  std::optional<std::string> get(const std::string& key) const;
  /// Throws ErrorKind::Validation when the key is missing.
  std::string require_key(const std::string& key) const;
  const std::map<std::string, std::string>& metadata() const { return meta_; }

  void add_array(std::string name, std::vector<std::size_t> shape, std::vector<double> data);
  const Array* find_array(const std::string& name) const;
  /// Throws ErrorKind::Validation on a missing array or wrong element count.
  const Array& require_array(const std::string& name, std::size_t count) const;
  const std::vector<Array>& arrays() const { return arrays_; }

  void save(const std::filesystem::path& path) const;
  /// Throws ErrorKind::Load for missing, truncated or malformed files.
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, std::string> meta_;
  std::vector<Array> arrays_;
};

}  // namespace pathseg
