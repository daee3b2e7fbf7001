// pathseg command-line tool. Exit codes: 0 success, 1 configuration or input
// error, 2 runtime failure.
#include <pathseg.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

using nlohmann::json;

namespace {

struct Failure {
  psd_status status;
};

void check(psd_status s) {
  if (s != PSD_OK) throw Failure{s};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  psd_string_free(s);
  return out;
}

struct ConfigArgs {
  std::string file;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out;

  void add_to(CLI::App* cmd, const std::string& out_help) {
    cmd->add_option("-c,--config", file, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--preset", preset, "Built-in defaults: desk | full (default desk)");
    cmd->add_option("-s,--set", overrides, "Override a config key, e.g. train.learning_rate=1e-4")
        ->type_name("KEY=VALUE");
    cmd->add_option("-o,--out", out, out_help);
  }

  json resolve() const {
    std::vector<const char*> ov;
    for (const auto& o : overrides) ov.push_back(o.c_str());
    char* text = nullptr;
    check(psd_resolve_config(file.empty() ? nullptr : file.c_str(), ov.data(), ov.size(),
                             preset.empty() ? nullptr : preset.c_str(), &text));
    return json::parse(take(text));
  }
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::istringstream in(s);
  for (std::string p; std::getline(in, p, sep);)
    if (!p.empty()) parts.push_back(p);
  return parts;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates many short-lived tensors of tens of MB. Keep freed
  // blocks in the heap instead of unmapping and faulting them in again.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Diffusion-feature segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace | debug | info | warn | error | off")->capture_default_str();
  app.set_version_flag("--version", std::string(psd_version()));

  // prepare-data
  auto* prep = app.add_subcommand("prepare-data", "Convert a raw corpus (or generate synthetic data) into a manifest");
  std::string prep_dataset = "synthetic", raw_root, prep_out, class_map;
  std::size_t window = 800, stride = 400, crop = 768, target = 768, n = 10, n_val = 2, image_size = 768;
  int classes = 5;
  double dontcare = 0.90;
  std::uint64_t prep_seed = 0, synth_seed = 7;
  prep->add_option("--dataset", prep_dataset, "bcss | glas | synthetic")->capture_default_str();
  prep->add_option("--raw-root", raw_root,
                   "Raw root with <split>/images/*.png and <split>/masks/*.png (default $PATHSEG_DATA_ROOT/<dataset>)");
  prep->add_option("-o,--out", prep_out, "Output directory")->required();
  prep->add_option("--class-map", class_map, "BCSS class-map JSON (default config/bcss_classes.json grouping)");
  prep->add_option("--window", window, "BCSS window size")->capture_default_str();
  prep->add_option("--stride", stride, "BCSS window stride")->capture_default_str();
  prep->add_option("--dontcare-threshold", dontcare, "Drop windows above this don't-care fraction")
      ->capture_default_str();
  prep->add_option("--crop", crop, "Random crop size per window")->capture_default_str();
  prep->add_option("--target", target, "GlaS resize target")->capture_default_str();
  prep->add_option("--seed", prep_seed, "Crop seed")->capture_default_str();
  prep->add_option("--n", n, "Synthetic training images")->capture_default_str();
  prep->add_option("--n-val", n_val, "Synthetic validation images")->capture_default_str();
  prep->add_option("--classes", classes, "Synthetic class count")->capture_default_str();
  prep->add_option("--image-size", image_size, "Synthetic image side")->capture_default_str();
  prep->add_option("--synthetic-seed", synth_seed, "Synthetic generator seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a segmentation head on frozen backbone features");
  ConfigArgs train_args;
  train_args.add_to(train, "Run directory (overrides output_dir)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a trained head on a dataset split");
  std::string run_dir, checkpoint, split_name = "val", mask_dir, eval_out;
  eval->add_option("-r,--run", run_dir, "Run directory written by train")->required();
  eval->add_option("--checkpoint", checkpoint, "Head checkpoint (default <run>/head.ckpt)");
  eval->add_option("--split", split_name, "Dataset split")->capture_default_str();
  eval->add_option("--dump-masks", mask_dir, "Write predicted masks as indexed PNGs here");
  eval->add_option("-o,--out", eval_out, "Write the metrics JSON here as well as to stdout");

  // sweeps
  auto* st = app.add_subcommand("sweep-timestep", "One run per diffusion timestep");
  ConfigArgs st_args;
  st_args.add_to(st, "Sweep directory");
  std::string st_values = "0,10,50,200,1000";
  std::size_t st_par = 1;
  st->add_option("--values", st_values, "Comma-separated timesteps")->capture_default_str();
  st->add_option("--parallel", st_par, "Concurrent runs")->capture_default_str();

  auto* sl = app.add_subcommand("sweep-lr", "One run per learning rate");
  ConfigArgs sl_args;
  sl_args.add_to(sl, "Sweep directory");
  std::string sl_values = "1e-3,1e-4,1e-5";
  std::size_t sl_par = 1;
  sl->add_option("--values", sl_values, "Comma-separated learning rates")->capture_default_str();
  sl->add_option("--parallel", sl_par, "Concurrent runs")->capture_default_str();

  auto* sb = app.add_subcommand("sweep-blocks", "One run per block selection");
  ConfigArgs sb_args;
  sb_args.add_to(sb, "Sweep directory");
  std::vector<std::string> selections;
  std::size_t sb_par = 1;
  sb->add_option("--selection", selections,
                 "Block ids joined by '+', repeatable (default: every single block plus all)");
  sb->add_option("--parallel", sb_par, "Concurrent runs")->capture_default_str();

  // plot
  auto* plot = app.add_subcommand("plot", "Render a sweep CSV as an SVG chart");
  std::string csv, svg, title;
  plot->add_option("--csv", csv, "Sweep CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("-o,--out", svg, "SVG output (default: CSV path with .svg)");
  plot->add_option("--title", title, "Chart title");

  // config
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  ConfigArgs show_args;
  show_args.add_to(show, "Ignored");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    check(psd_set_log_level(log_level.c_str()));
    char* text = nullptr;

    if (*prep) {
      if (raw_root.empty() && prep_dataset != "synthetic") {
        const char* env = std::getenv("PATHSEG_DATA_ROOT");
        if (env && *env) raw_root = std::string(env) + "/" + prep_dataset;
      }
      json o{{"dataset", prep_dataset}, {"raw_root", raw_root}, {"out_dir", prep_out},
             {"class_map", class_map},  {"window", window},     {"stride", stride},
             {"dontcare_threshold", dontcare}, {"crop", crop},  {"target", target},
             {"seed", prep_seed}};
      o["synthetic"] = {{"n", n}, {"n_val", n_val}, {"num_classes", classes}, {"seed", synth_seed},
                        {"image_size", image_size}};
      check(psd_prepare_data(o.dump().c_str(), &text));
      const json m = json::parse(take(text));
      std::cout << m["path"].get<std::string>() << '\n';
    } else if (*train) {
      json config = train_args.resolve();
      if (!train_args.out.empty()) config["output_dir"] = train_args.out;
      check(psd_run_training(config.dump().c_str(), &text));
      std::cout << take(text) << '\n';
    } else if (*eval) {
      json o{{"run_dir", run_dir}, {"checkpoint", checkpoint}, {"split", split_name}, {"mask_dir", mask_dir}};
      check(psd_evaluate(o.dump().c_str(), &text));
      const std::string result = take(text);
      if (!eval_out.empty()) std::ofstream(eval_out) << result << '\n';
      std::cout << result << '\n';
    } else if (*st || *sl || *sb) {
      ConfigArgs& args = *st ? st_args : *sl ? sl_args : sb_args;
      const json config = args.resolve();
      json values = json::array();
      const char* axis = "timestep";
      std::size_t par = 1;
      try {
        if (*st) {
          for (const auto& v : split(st_values, ',')) values.push_back(std::stoi(v));
          par = st_par;
        } else if (*sl) {
          axis = "lr";
          for (const auto& v : split(sl_values, ',')) values.push_back(std::stod(v));
          par = sl_par;
        } else {
          axis = "blocks";
          for (const auto& s : selections) values.push_back(split(s, '+'));
          par = sb_par;
        }
      } catch (const std::logic_error&) {
        std::cerr << "error: sweep values must be numbers\n";
        return 1;
      }
      const std::string out = args.out.empty() ? config["output_dir"].get<std::string>() : args.out;
      check(psd_run_sweep(axis, config.dump().c_str(), values.dump().c_str(), out.c_str(), par, &text));
      std::cout << take(text) << '\n';
    } else if (*plot) {
      if (svg.empty()) svg = csv.substr(0, csv.rfind('.')) + ".svg";
      check(psd_plot(csv.c_str(), svg.c_str(), title.empty() ? nullptr : title.c_str()));
      std::cout << svg << '\n';
    } else if (*show) {
      std::cout << show_args.resolve().dump(2) << '\n';
    }
  } catch (const Failure& f) {
    std::cerr << "error (" << psd_status_name(f.status) << "): " << psd_last_error() << '\n';
    return psd_status_is_config_error(f.status) ? 1 : 2;
  }
  return 0;
}
