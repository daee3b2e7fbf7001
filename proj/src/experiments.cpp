#include "pathseg/experiments.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iomanip>
#include <set>
#include <sstream>

#include "pathseg/backbone.hpp"
#include "pathseg/data.hpp"
#include "pathseg/random.hpp"
#include "pathseg/training.hpp"

namespace pathseg {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

json default_config(const std::string& preset) {
  json c = {
      {"seed", 0},
      {"output_dir", "runs/default"},
      {"dataset",
       {{"name", "synthetic"},
        {"root", "data"},
        {"manifest", ""},
        {"train_split", "train"},
        {"val_split", "val"},
        {"synthetic",
         {{"n", 10},
          {"n_val", 2},
          {"num_classes", 5},
          {"seed", 7},
          {"image_size", 768},
          {"ignore_fraction", 0.05},
          {"cells", 16},
          {"priors", json::array()}}}}},
      {"diffusion", {{"T", 1000}, {"beta_start", 1e-4}, {"beta_end", 0.02}}},
      {"backbone",
       {{"checkpoint", ""},
        {"layout", "toy"},
        {"seed", 1234},
        {"conditioning", kConditionToySsl},
        {"ae_pretrain_steps", 1000},
        {"residual_gain", 0.1}}},
      {"grid", {{"size", 3}, {"patch", 256}}},
      {"features", {{"size", 32}, {"blocks", json::array({"all"})}, {"cache_dir", ""}}},
      {"head", {{"widths", json::array({64, 64, 16})}, {"first_kernel", 3}}},
      {"train",
       {{"learning_rate", 1e-4},
        {"steps", 200},
        {"batch_size", 2},
        {"timestep", 50},
        {"epoch_checkpoints", true}}},
      {"loss", {{"weighting", "auto"}}},
      {"metrics", {{"f1_average", "macro"}, {"dice_exclude", json::array()}}},
  };
  if (preset == "desk" || preset.empty()) return c;
  if (preset == "full") {
    c["features"]["size"] = 0;
    c["head"]["widths"] = json::array({256, 128, 64});
    c["head"]["first_kernel"] = 3;
    return c;
  }
  fail(ErrorKind::Config, "unknown preset '" + preset + "' (desk | full)");
}

namespace {

void check_known_keys(const json& base, const json& layer, const std::string& prefix) {
  if (!layer.is_object()) fail(ErrorKind::Config, "config section '" + prefix + "' must be an object");
  for (const auto& [k, v] : layer.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) fail(ErrorKind::Config, "unknown config key '" + path + "'");
    if (base[k].is_object()) check_known_keys(base[k], v, path);
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void set_path(json& config, const std::string& dotted, const json& value) {
  json* node = &config;
  std::string prefix;
  std::istringstream in(dotted);
  std::vector<std::string> parts;
  for (std::string part; std::getline(in, part, '.');) parts.push_back(part);
  if (parts.empty()) fail(ErrorKind::Config, "empty override key");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      fail(ErrorKind::Config, "unknown config key '" + dotted + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) fail(ErrorKind::Config, "cannot override section '" + dotted + "' with a value");
  *node = value;
}

template <class T>
T get(const json& c, const std::string& dotted) {
  const json* node = &c;
  std::istringstream in(dotted);
  for (std::string part; std::getline(in, part, '.');) {
    if (!node->contains(part)) fail(ErrorKind::Config, "missing config key '" + dotted + "'");
    node = &(*node)[part];
  }
  try {
    return node->get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, "config key '" + dotted + "' has the wrong type: " + e.what());
  }
}

}  // namespace

json resolve_config(const fs::path& file, const std::vector<std::string>& overrides, const std::string& preset) {
  json config = default_config(preset);
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) fail(ErrorKind::Config, "config file not found: " + file.string());
    json layer;
    try {
      in >> layer;
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, "cannot parse " + file.string() + ": " + e.what());
    }
    if (preset.empty() && layer.contains("preset")) {
      config = default_config(layer["preset"].get<std::string>());
      layer.erase("preset");
    }
    check_known_keys(config, layer, "");
    config.merge_patch(layer);
  }
  if (const char* root = std::getenv("PATHSEG_DATA_ROOT"); root && *root) config["dataset"]["root"] = root;
  if (const char* out = std::getenv("PATHSEG_OUTPUT_DIR"); out && *out) config["output_dir"] = out;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, "override '" + o + "' is not key=value");
    set_path(config, o.substr(0, eq), parse_value(o.substr(eq + 1)));
  }
  validate_config(config);
  return config;
}

void validate_config(const json& c) {
  check_known_keys(default_config("desk"), c, "");
  const auto name = get<std::string>(c, "dataset.name");
  if (name != "synthetic" && name != "manifest" && name != "bcss" && name != "glas")
    fail(ErrorKind::Config, "unknown dataset '" + name + "' (synthetic | manifest | bcss | glas)");
  if (get<int>(c, "diffusion.T") < 1) fail(ErrorKind::Config, "diffusion.T must be >= 1");
  const int t = get<int>(c, "train.timestep");
  if (t < 0 || t > get<int>(c, "diffusion.T")) fail(ErrorKind::Config, "train.timestep outside [0, T]");
  if (get<double>(c, "train.learning_rate") < 0.0) fail(ErrorKind::Config, "train.learning_rate must be >= 0");
  if (get<int>(c, "train.steps") < 1) fail(ErrorKind::Config, "train.steps must be >= 1");
  if (get<int>(c, "train.batch_size") < 1) fail(ErrorKind::Config, "train.batch_size must be >= 1");
  if (get<int>(c, "grid.size") < 1 || get<int>(c, "grid.patch") < 8)
    fail(ErrorKind::Config, "grid.size must be >= 1 and grid.patch >= 8");
  if (get<int>(c, "features.size") < 0) fail(ErrorKind::Config, "features.size must be >= 0");
  if (get<std::vector<std::size_t>>(c, "head.widths").size() != 3)
    fail(ErrorKind::Config, "head.widths needs three entries");
  if (get<std::vector<std::string>>(c, "features.blocks").empty())
    fail(ErrorKind::Config, "features.blocks must not be empty");
  const auto weighting = get<std::string>(c, "loss.weighting");
  if (weighting != "auto" && weighting != "frequency" && weighting != "uniform")
    fail(ErrorKind::Config, "loss.weighting must be auto | frequency | uniform");
  if (!(get<double>(c, "backbone.residual_gain") >= 0.0))
    fail(ErrorKind::Config, "backbone.residual_gain must be >= 0");
  const auto layout = get<std::string>(c, "backbone.layout");
  if (layout != "toy" && layout != "full-scale") fail(ErrorKind::Config, "backbone.layout must be toy | full-scale");
  const auto cond = get<std::string>(c, "backbone.conditioning");
  if (cond != kConditionToySsl && cond != kConditionNone)
    fail(ErrorKind::Config, "backbone.conditioning must be toy-ssl | none");
  parse_f1_average(get<std::string>(c, "metrics.f1_average"));
}

// ---------------------------------------------------------------------------
// Run plumbing

namespace {

std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, "cannot parse " + path.string() + ": " + e.what());
  }
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hash_string(bytes);
}

NoiseSchedule schedule_from(const json& c) {
  return build_schedule(get<int>(c, "diffusion.T"), get<double>(c, "diffusion.beta_start"),
                        get<double>(c, "diffusion.beta_end"));
}

Dataset dataset_from(const json& c) {
  const auto name = get<std::string>(c, "dataset.name");
  if (name == "synthetic") {
    const json& s = c["dataset"]["synthetic"];
    SyntheticOptions o;
    o.n = s.at("n").get<std::size_t>();
    o.n_val = s.at("n_val").get<std::size_t>();
    o.num_classes = s.at("num_classes").get<int>();
    o.seed = s.at("seed").get<std::uint64_t>();
    o.image_size = s.at("image_size").get<std::size_t>();
    o.ignore_fraction = s.at("ignore_fraction").get<double>();
    o.cells = s.at("cells").get<std::size_t>();
    o.priors = s.at("priors").get<std::vector<double>>();
    return generate_synthetic_dataset(o);
  }
  fs::path manifest = get<std::string>(c, "dataset.manifest");
  if (manifest.empty()) {
    if (name == "manifest") fail(ErrorKind::Config, "dataset.manifest is required for dataset 'manifest'");
    manifest = fs::path(get<std::string>(c, "dataset.root")) / name / "manifest.json";
  }
  if (!fs::exists(manifest))
    fail(ErrorKind::Config, "dataset manifest not found: " + manifest.string() + " (run prepare-data first)");
  return load_dataset(read_manifest(manifest));
}

std::size_t image_side(const json& c) { return get<std::size_t>(c, "grid.size") * get<std::size_t>(c, "grid.patch"); }

void check_images(const Dataset& ds, std::size_t side) {
  for (const auto& [split, items] : ds.splits)
    for (const auto& it : items)
      require(it.image.h() == side && it.image.w() == side, ErrorKind::Config,
              "image " + it.id + " is " + std::to_string(it.image.h()) + "x" + std::to_string(it.image.w()) +
                  ", expected " + std::to_string(side) + "x" + std::to_string(side));
}

const std::vector<LabeledImage>& split_or_empty(const Dataset& ds, const std::string& s) {
  static const std::vector<LabeledImage> empty;
  auto it = ds.splits.find(s);
  return it == ds.splits.end() ? empty : it->second;
}

Backbone::Options backbone_options(const json& c) {
  Backbone::Options o;
  o.seed = get<std::uint64_t>(c, "backbone.seed");
  o.patch_size = get<std::size_t>(c, "grid.patch");
  o.conditioning = get<std::string>(c, "backbone.conditioning");
  o.residual_gain = get<double>(c, "backbone.residual_gain");
  if (get<std::string>(c, "backbone.layout") == "full-scale") o.unet = full_scale_unet_config();
  return o;
}

/// Loads the configured checkpoint, or builds a toy backbone, pre-trains its
/// autoencoder on the training images and saves it to `fallback`.
Backbone obtain_backbone(const json& c, const Dataset& ds, const fs::path& fallback, fs::path* used) {
  const fs::path ckpt = get<std::string>(c, "backbone.checkpoint");
  if (!ckpt.empty()) {
    if (!fs::exists(ckpt)) fail(ErrorKind::Config, "backbone checkpoint not found: " + ckpt.string());
    Backbone b = Backbone::load(ckpt);
    b.set_conditioning(get<std::string>(c, "backbone.conditioning"));
    if (used) *used = ckpt;
    return b;
  }
  Backbone b = Backbone::create_toy(backbone_options(c));
  std::vector<Tensor> images;
  for (const auto& it : ds.split(get<std::string>(c, "dataset.train_split"))) images.push_back(it.image);
  AePretrainOptions ae;
  ae.steps = get<int>(c, "backbone.ae_pretrain_steps");
  ae.seed = get<std::uint64_t>(c, "backbone.seed");
  if (ae.steps > 0) {
    const auto r = b.pretrain_autoencoder(images, ae);
    spdlog::info("autoencoder pre-training: loss {:.4f} -> {:.4f}", r.initial_loss, r.final_loss);
  }
  b.freeze();
  b.save(fallback);
  if (used) *used = fallback;
  return b;
}

PipelineOptions pipeline_from(const json& c) {
  PipelineOptions p;
  p.grid = {get<std::size_t>(c, "grid.size"), get<std::size_t>(c, "grid.patch")};
  p.feature_size = get<std::size_t>(c, "features.size");
  p.cache_dir = get<std::string>(c, "features.cache_dir");
  return p;
}

TrainConfig train_config_from(const json& c) {
  TrainConfig t;
  t.learning_rate = get<double>(c, "train.learning_rate");
  t.steps = get<int>(c, "train.steps");
  t.batch_size = get<std::size_t>(c, "train.batch_size");
  t.timestep = get<int>(c, "train.timestep");
  t.seed = get<std::uint64_t>(c, "seed");
  t.blocks = get<std::vector<std::string>>(c, "features.blocks");
  return t;
}

MetricsOptions metrics_from(const json& c) {
  MetricsOptions m;
  m.f1 = parse_f1_average(get<std::string>(c, "metrics.f1_average"));
  m.dice_exclude = get<std::vector<int>>(c, "metrics.dice_exclude");
  return m;
}

HeadConfig head_config_from(const json& c, std::size_t in_channels, std::size_t feature_side, int num_classes) {
  HeadConfig h;
  h.in_channels = in_channels;
  h.num_classes = static_cast<std::size_t>(num_classes);
  h.widths = get<std::vector<std::size_t>>(c, "head.widths");
  h.first_kernel = get<std::size_t>(c, "head.first_kernel");
  h.input_size = feature_side;
  h.output_size = image_side(c);
  h.seed = get<std::uint64_t>(c, "seed");
  return h;
}

ClassWeights weights_from(const json& c, const Dataset& ds, const FeatureSet& train) {
  std::string mode = get<std::string>(c, "loss.weighting");
  if (mode == "auto") mode = ds.name == "glas" ? "uniform" : "frequency";
  if (mode == "uniform") return uniform_class_weights(ds.num_classes);
  return compute_class_weights(train.masks, ds.num_classes);
}

std::string metrics_csv(const MetricsReport& train, const std::optional<MetricsReport>& val) {
  std::ostringstream os;
  os << "split,accuracy,dice,miou,f1\n";
  auto row = [&](const char* name, const MetricsReport& r) {
    os << name << ',' << format_number(r.accuracy) << ',' << format_number(r.mean_dice) << ','
       << format_number(r.miou) << ',' << format_number(r.f1) << '\n';
  };
  row("train", train);
  if (val) row("val", *val);
  return os.str();
}

}  // namespace

RunOutput run_training(const json& config) {
  validate_config(config);
  RunOutput out;
  out.dir = get<std::string>(config, "output_dir");
  fs::create_directories(out.dir);
  json snapshot = config;

  const Dataset ds = dataset_from(config);
  check_images(ds, image_side(config));
  const auto& train_items = ds.split(get<std::string>(config, "dataset.train_split"));
  require(!train_items.empty(), ErrorKind::Config, "training split is empty");
  const auto& val_items = split_or_empty(ds, get<std::string>(config, "dataset.val_split"));

  fs::path backbone_path;
  const Backbone backbone = obtain_backbone(config, ds, out.dir / "backbone.ckpt", &backbone_path);
  const std::uint64_t backbone_before = backbone.weight_hash();
  snapshot["backbone"]["checkpoint"] = fs::absolute(backbone_path).string();
  write_text(out.dir / "config.json", snapshot.dump(2) + "\n");

  const NoiseSchedule schedule = schedule_from(config);
  const PipelineOptions pipeline = pipeline_from(config);
  const TrainConfig tc = train_config_from(config);
  const MetricsOptions mo = metrics_from(config);
  spdlog::info("extracting features for {} training / {} validation images", train_items.size(), val_items.size());
  const FeatureSet train = extract_feature_set(backbone, schedule, train_items, pipeline, tc.timestep, tc.blocks, tc.seed);
  std::optional<FeatureSet> val;
  if (!val_items.empty())
    val = extract_feature_set(backbone, schedule, val_items, pipeline, tc.timestep, tc.blocks, tc.seed);

  SegmentationHead head(
      head_config_from(config, train.features.front().c(), train.features.front().h(), ds.num_classes));
  spdlog::info("head: {} parameters, stride plan {}x{}x{}", head.parameter_count(), head.plan().first,
               head.plan().second, head.plan().residual);
  const ClassWeights weights = weights_from(config, ds, train);

  const bool epoch_ckpts = get<bool>(config, "train.epoch_checkpoints");
  TrainHooks hooks;
  int best_saved = 0;
  double best_dice = -1.0;
  hooks.on_epoch_end = [&](int epoch, const SegmentationHead& h) {
    if (epoch_ckpts) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
      h.save(out.dir / "checkpoints" / name.str());
    }
    if (val) {
      const double dice = report(evaluate_head(h, *val), mo).mean_dice;
      if (dice > best_dice) {
        best_dice = dice;
        best_saved = epoch;
        h.save(out.dir / "head_best.ckpt");
      }
    }
  };
  TrainResult result = train_head(head, train, val ? &*val : nullptr, weights, tc, mo, hooks);
  require(backbone.weight_hash() == backbone_before, ErrorKind::Runtime, "backbone weights changed during training");
  head.save(out.dir / "head.ckpt");
  result.log.write(out.dir / "train_log.jsonl");

  out.train = report(evaluate_head(head, train), mo);
  if (val) out.validation = report(evaluate_head(head, *val), mo);
  json metrics;
  metrics["dataset"] = ds.name;
  metrics["selection"] = "last_epoch";
  metrics["last_epoch"] = result.epochs;
  metrics["best_epoch"] = best_saved > 0 ? json(best_saved) : json();
  metrics["final_loss"] = result.step_losses.back();
  metrics["train"] = out.train.to_json();
  metrics["validation"] = out.validation ? out.validation->to_json() : json();
  metrics["best_validation"] = result.best_validation ? result.best_validation->to_json() : json();
  metrics["class_weights"] = weights.weights;
  metrics["head_parameters"] = head.parameter_count();
  write_text(out.dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(out.dir / "metrics.csv", metrics_csv(out.train, out.validation));
  spdlog::info("run {}: train accuracy {:.4f}, mean dice {:.4f}", out.dir.string(), out.train.accuracy,
               out.train.mean_dice);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

json evaluate(const EvaluateOptions& options) {
  const json config = read_json(options.run_dir / "config.json");
  validate_config(config);
  const fs::path head_path = options.head_checkpoint.empty() ? options.run_dir / "head.ckpt" : options.head_checkpoint;
  if (!fs::exists(head_path)) fail(ErrorKind::Config, "head checkpoint not found: " + head_path.string());
  const SegmentationHead head = SegmentationHead::load(head_path);

  const Dataset ds = dataset_from(config);
  check_images(ds, image_side(config));
  const auto& items = ds.split(options.split);
  require(head.config().num_classes == static_cast<std::size_t>(ds.num_classes), ErrorKind::Validation,
          "head predicts " + std::to_string(head.config().num_classes) + " classes, dataset has " +
              std::to_string(ds.num_classes));

  const fs::path ckpt = get<std::string>(config, "backbone.checkpoint");
  if (ckpt.empty() || !fs::exists(ckpt)) fail(ErrorKind::Config, "backbone checkpoint not found: " + ckpt.string());
  Backbone backbone = Backbone::load(ckpt);
  backbone.set_conditioning(get<std::string>(config, "backbone.conditioning"));
  const TrainConfig tc = train_config_from(config);
  const FeatureSet set =
      extract_feature_set(backbone, schedule_from(config), items, pipeline_from(config), tc.timestep, tc.blocks, tc.seed);
  require(!set.features.empty(), ErrorKind::Config, "split '" + options.split + "' is empty");
  require(set.features.front().c() == head.config().in_channels &&
              set.features.front().h() == head.config().input_size,
          ErrorKind::Validation, "head input does not match the backbone's feature layout");

  const MetricsOptions mo = metrics_from(config);
  std::vector<SegmentationMask> preds;
  const ConfusionMatrix cm = evaluate_head(head, set, &preds);
  json out;
  out["split"] = options.split;
  out["checkpoint"] = head_path.string();
  out["aggregate"] = report(cm, mo).to_json();
  out["images"] = json::array();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ConfusionMatrix one(head.config().num_classes);
    accumulate(one, preds[i], set.masks[i]);
    json entry{{"id", set.ids[i]}};
    entry["metrics"] = one.counted() > 0 ? report(one, mo).to_json() : json();
    out["images"].push_back(std::move(entry));
  }
  if (!options.mask_dir.empty()) {
    fs::create_directories(options.mask_dir);
    const auto palette = default_palette(ds.num_classes, ds.ignore_index);
    for (std::size_t i = 0; i < preds.size(); ++i)
      write_png_indexed(options.mask_dir / (set.ids[i] + ".png"), preds[i], palette);
    json pal;
    for (std::size_t k = 0; k < palette.size(); ++k) {
      const bool ignore = static_cast<int>(k) == ds.ignore_index;
      const std::string name = ignore ? "dont_care" : (k < ds.class_names.size() ? ds.class_names[k] : "unused");
      pal["entries"].push_back({{"value", k}, {"name", name}, {"rgb", {palette[k][0], palette[k][1], palette[k][2]}}});
    }
    write_text(options.mask_dir / "palette.json", pal.dump(2) + "\n");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

struct SweepRun {
  std::string label;
  json config;
};

/// Builds (or reuses) the backbone every run shares, executes the runs and
/// checks that the shared checkpoint file is untouched.
std::vector<RunOutput> execute_sweep(const json& base, std::vector<SweepRun>& runs, const SweepOptions& options,
                                     json& sweep_info) {
  fs::create_directories(options.out_dir);
  json shared = base;
  fs::path backbone_path = get<std::string>(base, "backbone.checkpoint");
  if (backbone_path.empty()) {
    const Dataset ds = dataset_from(base);
    check_images(ds, image_side(base));
    obtain_backbone(base, ds, options.out_dir / "backbone.ckpt", &backbone_path);
  }
  backbone_path = fs::absolute(backbone_path);
  const std::uint64_t before = file_hash(backbone_path);
  for (auto& r : runs) r.config["backbone"]["checkpoint"] = backbone_path.string();

  std::vector<RunOutput> outputs(runs.size());
  const std::size_t width = std::max<std::size_t>(options.parallel_runs, 1);
  for (std::size_t start = 0; start < runs.size(); start += width) {
    const std::size_t end = std::min(start + width, runs.size());
    if (width == 1) {
      outputs[start] = run_training(runs[start].config);
      continue;
    }
    std::vector<std::future<RunOutput>> futures;
    for (std::size_t i = start; i < end; ++i)
      futures.push_back(std::async(std::launch::async, [&runs, i] { return run_training(runs[i].config); }));
    for (std::size_t i = start; i < end; ++i) outputs[i] = futures[i - start].get();
  }
  require(file_hash(backbone_path) == before, ErrorKind::Runtime, "a sweep run modified the shared backbone");
  sweep_info["backbone"] = backbone_path.string();
  sweep_info["backbone_file_hash"] = before;
  sweep_info["runs"] = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i)
    sweep_info["runs"].push_back({{"label", runs[i].label}, {"dir", outputs[i].dir.string()}});
  return outputs;
}

json run_config(const json& base, const fs::path& dir) {
  json c = base;
  c["output_dir"] = dir.string();
  return c;
}

std::string selection_label(const std::vector<std::string>& sel) {
  std::string s;
  for (const auto& id : sel) s += (s.empty() ? "" : "+") + id;
  return s;
}

}  // namespace

SweepResult run_timestep_sweep(const json& config, const std::vector<int>& timesteps, const SweepOptions& options) {
  validate_config(config);
  require(!timesteps.empty(), ErrorKind::Parameter, "timestep sweep needs at least one value");
  const int T = get<int>(config, "diffusion.T");
  for (int t : timesteps)
    require(t >= 0 && t <= T, ErrorKind::Timestep,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  std::vector<int> unique;
  for (int t : timesteps) {
    if (std::find(unique.begin(), unique.end(), t) != unique.end()) {
      spdlog::warn("duplicate timestep {} dropped", t);
      continue;
    }
    unique.push_back(t);
  }
  std::vector<SweepRun> runs;
  for (int t : unique) {
    json c = run_config(config, options.out_dir / ("t_" + std::to_string(t)));
    c["train"]["timestep"] = t;
    runs.push_back({std::to_string(t), std::move(c)});
  }
  json info{{"axis", "timestep"}};
  const auto outputs = execute_sweep(config, runs, options, info);

  std::ostringstream csv;
  csv << "t,accuracy,dice,miou\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = outputs[i].headline();
    csv << unique[i] << ',' << format_number(r.accuracy) << ',' << format_number(r.mean_dice) << ','
        << format_number(r.miou) << '\n';
  }
  SweepResult res{options.out_dir / "timestep_sweep.csv", options.out_dir / "timestep_sweep.svg", runs.size()};
  info["metrics_split"] = outputs.front().validation ? "val" : "train";
  write_text(res.csv, csv.str());
  write_text(options.out_dir / "sweep.json", info.dump(2) + "\n");
  plot_csv(res.csv, res.plot, "Metrics over timestep");
  return res;
}

SweepResult run_lr_sweep(const json& config, const std::vector<double>& rates, const SweepOptions& options) {
  validate_config(config);
  require(!rates.empty(), ErrorKind::Parameter, "learning-rate sweep needs at least one value");
  for (double lr : rates)
    require(std::isfinite(lr) && lr > 0.0, ErrorKind::Parameter,
            "learning rate " + format_number(lr) + " must be positive");
  std::vector<SweepRun> runs;
  for (double lr : rates) {
    std::ostringstream name;
    name << "lr_" << std::scientific << std::setprecision(0) << lr;
    json c = run_config(config, options.out_dir / name.str());
    c["train"]["learning_rate"] = lr;
    runs.push_back({format_number(lr), std::move(c)});
  }
  json info{{"axis", "learning_rate"}};
  const auto outputs = execute_sweep(config, runs, options, info);

  std::ostringstream csv;
  csv << "lr,accuracy,miou,dice\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = outputs[i].headline();
    csv << runs[i].label << ',' << format_number(r.accuracy) << ',' << format_number(r.miou) << ','
        << format_number(r.mean_dice) << '\n';
  }
  SweepResult res{options.out_dir / "lr_sweep.csv", options.out_dir / "lr_sweep.svg", runs.size()};
  info["metrics_split"] = outputs.front().validation ? "val" : "train";
  write_text(res.csv, csv.str());
  write_text(options.out_dir / "sweep.json", info.dump(2) + "\n");
  plot_csv(res.csv, res.plot, "Metrics per learning rate");
  return res;
}

SweepResult run_block_sweep(const json& config, const std::vector<std::vector<std::string>>& selections,
                            const SweepOptions& options) {
  validate_config(config);
  const BackboneDescriptor desc =
      BackboneDescriptor::from_unet(backbone_options(config).unet, get<std::size_t>(config, "grid.patch"));
  std::vector<std::vector<std::string>> sels = selections;
  if (sels.empty()) {
    for (const auto& id : desc.block_ids) sels.push_back({id});
    sels.push_back({"all"});
  }
  for (const auto& s : sels) {
    require(!s.empty(), ErrorKind::Parameter, "empty block selection");
    resolve_block_selection(desc, s);
  }
  std::vector<SweepRun> runs;
  for (const auto& s : sels) {
    const std::string label = selection_label(s);
    json c = run_config(config, options.out_dir / ("blocks_" + label));
    c["features"]["blocks"] = s;
    runs.push_back({label, std::move(c)});
  }
  json info{{"axis", "blocks"}};
  const auto outputs = execute_sweep(config, runs, options, info);

  std::ostringstream csv;
  csv << "selection,accuracy,dice,miou,f1\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = outputs[i].headline();
    csv << runs[i].label << ',' << format_number(r.accuracy) << ',' << format_number(r.mean_dice) << ','
        << format_number(r.miou) << ',' << format_number(r.f1) << '\n';
  }
  SweepResult res{options.out_dir / "block_sweep.csv", options.out_dir / "block_sweep.svg", runs.size()};
  info["metrics_split"] = outputs.front().validation ? "val" : "train";
  write_text(res.csv, csv.str());
  write_text(options.out_dir / "sweep.json", info.dump(2) + "\n");
  plot_csv(res.csv, res.plot, "Metrics per block selection");
  return res;
}

// ---------------------------------------------------------------------------
// Plots

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) cells.push_back(cell);
  return cells;
}

std::optional<double> to_number(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

void plot_csv(const fs::path& csv, const fs::path& svg, const std::string& title) {
  std::ifstream in(csv);
  if (!in) fail(ErrorKind::Io, "cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Config, csv.string() + " is empty");
  const auto header = split_csv_line(line);
  require(header.size() >= 2, ErrorKind::Config, csv.string() + " needs an x column and at least one metric");
  std::vector<std::string> labels;
  std::vector<std::vector<double>> cols(header.size() - 1);
  bool numeric_x = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    require(cells.size() == header.size(), ErrorKind::Config, "ragged row in " + csv.string());
    labels.push_back(cells[0]);
    numeric_x = numeric_x && to_number(cells[0]).has_value();
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const auto v = to_number(cells[j]);
      require(v.has_value(), ErrorKind::Config, "non-numeric metric '" + cells[j] + "' in " + csv.string());
      cols[j - 1].push_back(*v);
    }
  }
  require(!labels.empty(), ErrorKind::Config, csv.string() + " has no rows");

  const double W = 640, H = 400, left = 60, right = 130, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  const std::size_t n = labels.size();
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << escape_xml(title.empty() ? csv.stem().string() : title) << "</text>\n";
  auto y_of = [&](double v) { return top + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    os << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y_of(v) << "\" y2=\"" << y_of(v)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << v
       << "</text>\n";
  }
  os << "<line x1=\"" << left << "\" x2=\"" << left << "\" y1=\"" << top << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << top + ph << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";

  std::vector<double> xs(n);
  if (numeric_x) {
    double lo = *to_number(labels.front()), hi = lo;
    for (const auto& l : labels) {
      lo = std::min(lo, *to_number(l));
      hi = std::max(hi, *to_number(l));
    }
    for (std::size_t i = 0; i < n; ++i)
      xs[i] = hi > lo ? left + pw * (*to_number(labels[i]) - lo) / (hi - lo) : left + pw / 2;
  } else {
    for (std::size_t i = 0; i < n; ++i) xs[i] = left + pw * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  }
  for (std::size_t i = 0; i < n; ++i)
    os << "<text x=\"" << xs[i] << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << escape_xml(labels[i]) << "</text>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 16 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << escape_xml(header[0]) << "</text>\n";

  const std::size_t series = cols.size();
  const double slot = pw / static_cast<double>(n);
  const double bar = slot * 0.8 / static_cast<double>(series);
  for (std::size_t j = 0; j < series; ++j) {
    const char* color = colors[j % 5];
    if (numeric_x) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < n; ++i) os << xs[i] << ',' << y_of(cols[j][i]) << ' ';
      os << "\"/>\n";
      for (std::size_t i = 0; i < n; ++i)
        os << "<circle cx=\"" << xs[i] << "\" cy=\"" << y_of(cols[j][i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const double x0 = xs[i] - slot * 0.4 + bar * static_cast<double>(j);
        os << "<rect x=\"" << x0 << "\" y=\"" << y_of(cols[j][i]) << "\" width=\"" << bar << "\" height=\""
           << top + ph - y_of(cols[j][i]) << "\" fill=\"" << color << "\"/>\n";
      }
    }
    const double ly = top + 14 + 18 * static_cast<double>(j);
    os << "<rect x=\"" << left + pw + 14 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color
       << "\"/>\n";
    os << "<text x=\"" << left + pw + 30 << "\" y=\"" << ly << "\" font-size=\"12\">" << escape_xml(header[j + 1])
       << "</text>\n";
  }
  os << "</svg>\n";
  write_text(svg, os.str());
}

}  // namespace pathseg
