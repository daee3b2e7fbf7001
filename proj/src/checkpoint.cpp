#include "pathseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pathseg/error.hpp"

namespace pathseg {

namespace {

constexpr const char* kMagic = "PATHSEG-CHECKPOINT 1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host order; big-endian hosts need byte swapping");

bool valid_token(const std::string& s) {
  return !s.empty() && s.find_first_of(" \t\r\n=") == std::string::npos;
}

std::string join_shape(const std::vector<std::size_t>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

}  // namespace

void Checkpoint::set(const std::string& key, const std::string& value) {
  require(valid_token(key), ErrorKind::Parameter, "invalid checkpoint key '" + key + "'");
  require(value.find('\n') == std::string::npos, ErrorKind::Parameter, "checkpoint value contains newline");
  meta_[key] = value;
}

void Checkpoint::set(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  set(key, os.str());
}

void Checkpoint::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

std::optional<std::string> Checkpoint::get(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) return std::nullopt;
  return it->second;
}

std::string Checkpoint::require_key(const std::string& key) const {
  auto v = get(key);
  if (!v) fail(ErrorKind::Validation, "checkpoint is missing required field '" + key + "'");
  return *v;
}

void Checkpoint::add_array(std::string name, std::vector<std::size_t> shape, std::vector<double> data) {
  require(valid_token(name), ErrorKind::Parameter, "invalid array name '" + name + "'");
  const std::size_t count =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  require(count == data.size(), ErrorKind::Shape, "array '" + name + "' shape does not match data size");
  require(find_array(name) == nullptr, ErrorKind::Parameter, "duplicate array '" + name + "'");
  arrays_.push_back({std::move(name), std::move(shape), std::move(data)});
}

const Checkpoint::Array* Checkpoint::find_array(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return &a;
  return nullptr;
}

const Checkpoint::Array& Checkpoint::require_array(const std::string& name, std::size_t count) const {
  const Array* a = find_array(name);
  if (!a) fail(ErrorKind::Validation, "checkpoint is missing array '" + name + "'");
  if (a->data.size() != count) {
    fail(ErrorKind::Validation, "array '" + name + "' has " + std::to_string(a->data.size()) +
                                    " values, expected " + std::to_string(count));
  }
  return *a;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << kMagic << '\n';
  for (const auto& [k, v] : meta_) out << k << '=' << v << '\n';
  for (const auto& a : arrays_) out << "tensor " << a.name << ' ' << join_shape(a.shape) << '\n';
  out << "end_header\n";
  for (const auto& a : arrays_) {
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  }
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Load, "checkpoint not found: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    fail(ErrorKind::Load, "not a checkpoint (bad magic): " + path.string());
  }
  Checkpoint ck;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      ended = true;
      break;
    }
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dims;
      if (!(ls >> name >> dims)) fail(ErrorKind::Load, "malformed tensor line: " + line);
      std::vector<std::size_t> shape;
      std::size_t count = 1;
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, 'x')) {
        try {
          shape.push_back(std::stoull(d));
        } catch (const std::exception&) {
          fail(ErrorKind::Load, "malformed tensor shape: " + line);
        }
        count *= shape.back();
      }
      ck.arrays_.push_back({name, shape, std::vector<double>(count)});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::Load, "malformed header line: " + line);
    ck.meta_[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!ended) fail(ErrorKind::Load, "truncated checkpoint header: " + path.string());
  for (auto& a : ck.arrays_) {
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!in) fail(ErrorKind::Load, "truncated checkpoint payload at '" + a.name + "': " + path.string());
  }
  return ck;
}

}  // namespace pathseg
