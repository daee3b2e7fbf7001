#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pathseg/metrics.hpp"

namespace pathseg {

/// Built-in configuration. "desk" (the default) sizes features and head for a
/// single CPU core; "full" uses full-resolution features and the 256/128/64
/// head. Throws ErrorKind::Config for an unknown preset.
nlohmann::json default_config(const std::string& preset = "desk");

/// Layers, lowest priority first: preset defaults, the JSON file (if any),
/// environment variables (PATHSEG_DATA_ROOT -> dataset.root,
/// PATHSEG_OUTPUT_DIR -> output_dir), then `key.path=value` overrides whose
/// value is parsed as JSON when possible and kept as a string otherwise.
/// Unknown keys are config errors.
nlohmann::json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                              const std::string& preset = "");

/// Structural and range checks; throws ErrorKind::Config.
void validate_config(const nlohmann::json& config);

struct RunOutput {
  std::filesystem::path dir;
  MetricsReport train;
  std::optional<MetricsReport> validation;
  /// Validation report if a validation split exists, else the training report.
  const MetricsReport& headline() const { return validation ? *validation : train; }
};

/// One full run into config["output_dir"]: config.json snapshot, backbone
/// (built and pre-trained when no checkpoint is configured), per-epoch head
/// checkpoints, head.ckpt (last epoch), head_best.ckpt (when validation ran),
/// train_log.jsonl, metrics.json and metrics.csv.
RunOutput run_training(const nlohmann::json& config);

struct EvaluateOptions {
  std::filesystem::path run_dir;
  /// Defaults to <run_dir>/head.ckpt.
  std::filesystem::path head_checkpoint;
  std::string split = "val";
  /// When set, one indexed PNG per image plus palette.json.
  std::filesystem::path mask_dir;
};

/// Aggregate and per-image metrics as JSON. A head whose class count or input
/// width does not match the dataset/backbone is a validation error.
nlohmann::json evaluate(const EvaluateOptions& options);

struct SweepOptions {
  std::filesystem::path out_dir;
  /// Number of runs executed concurrently; 1 runs them in order.
  std::size_t parallel_runs = 1;
};

struct SweepResult {
  std::filesystem::path csv;
  std::filesystem::path plot;
  std::size_t rows = 0;
};

/// Timesteps are validated against [0, T] before any run; duplicates are
/// dropped with a warning. CSV columns: t, accuracy, dice, miou.
SweepResult run_timestep_sweep(const nlohmann::json& config, const std::vector<int>& timesteps,
                               const SweepOptions& options);
/// Non-positive rates are rejected before any run. CSV columns: lr, accuracy,
/// miou, dice.
SweepResult run_lr_sweep(const nlohmann::json& config, const std::vector<double>& rates,
                         const SweepOptions& options);
/// Empty selections or unknown block ids are rejected before any run; an
/// empty list means every singleton plus "all". CSV columns: selection,
/// accuracy, dice, miou, f1.
SweepResult run_block_sweep(const nlohmann::json& config, const std::vector<std::vector<std::string>>& selections,
                            const SweepOptions& options);

/// Renders a sweep CSV as an SVG chart: a line chart when the first column is
/// numeric, a grouped bar chart otherwise.
void plot_csv(const std::filesystem::path& csv, const std::filesystem::path& svg, const std::string& title = "");

}  // namespace pathseg
