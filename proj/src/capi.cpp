#include "pathseg.h"

#include <spdlog/spdlog.h>

#include <cstring>
#include <new>
#include <string>

#include "pathseg/data.hpp"
#include "pathseg/experiments.hpp"
#include "pathseg/head.hpp"
#include "pathseg/patch_grid.hpp"
#include "pathseg/random.hpp"

using nlohmann::json;
using namespace pathseg;

struct psd_backbone {
  Backbone backbone;
};

struct psd_features {
  FeatureMap map;
};

struct psd_head {
  SegmentationHead head;
};

namespace {

thread_local std::string g_last_error;

psd_status to_status(ErrorKind k) {
  switch (k) {
    case ErrorKind::Parameter: return PSD_ERR_PARAMETER;
    case ErrorKind::Timestep: return PSD_ERR_TIMESTEP;
    case ErrorKind::Shape: return PSD_ERR_SHAPE;
    case ErrorKind::Load: return PSD_ERR_LOAD;
    case ErrorKind::Validation: return PSD_ERR_VALIDATION;
    case ErrorKind::Grid: return PSD_ERR_GRID;
    case ErrorKind::Mapping: return PSD_ERR_MAPPING;
    case ErrorKind::DegenerateData: return PSD_ERR_DEGENERATE_DATA;
    case ErrorKind::Undefined: return PSD_ERR_UNDEFINED;
    case ErrorKind::Config: return PSD_ERR_CONFIG;
    case ErrorKind::Runtime: return PSD_ERR_RUNTIME;
    case ErrorKind::Io: return PSD_ERR_IO;
  }
  return PSD_ERR_INTERNAL;
}

template <class F>
psd_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return PSD_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("invalid JSON: ") + e.what();
    return PSD_ERR_CONFIG;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return PSD_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PSD_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PSD_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require_arg(const void* p, const char* name) {
  require(p != nullptr, ErrorKind::Parameter, std::string(name) + " must not be NULL");
}

json parse_or_empty(const char* text) {
  if (!text || !*text) return json::object();
  return json::parse(text);
}

}  // namespace

extern "C" {

const char* psd_version(void) { return "0.1.0"; }

const char* psd_last_error(void) { return g_last_error.c_str(); }

const char* psd_status_name(psd_status s) {
  switch (s) {
    case PSD_OK: return "ok";
    case PSD_ERR_PARAMETER: return "parameter";
    case PSD_ERR_TIMESTEP: return "timestep";
    case PSD_ERR_SHAPE: return "shape";
    case PSD_ERR_LOAD: return "load";
    case PSD_ERR_VALIDATION: return "validation";
    case PSD_ERR_GRID: return "grid";
    case PSD_ERR_MAPPING: return "mapping";
    case PSD_ERR_DEGENERATE_DATA: return "degenerate-data";
    case PSD_ERR_UNDEFINED: return "undefined";
    case PSD_ERR_CONFIG: return "config";
    case PSD_ERR_RUNTIME: return "runtime";
    case PSD_ERR_IO: return "io";
    case PSD_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

int psd_status_is_config_error(psd_status s) {
  switch (s) {
    case PSD_ERR_PARAMETER:
    case PSD_ERR_TIMESTEP:
    case PSD_ERR_VALIDATION:
    case PSD_ERR_MAPPING:
    case PSD_ERR_CONFIG:
      return 1;
    default:
      return 0;
  }
}

psd_status psd_set_log_level(const char* level) {
  return guarded([&] {
    require_arg(level, "level");
    const auto l = spdlog::level::from_str(level);
    require(l != spdlog::level::off || std::string(level) == "off", ErrorKind::Parameter,
            std::string("unknown log level '") + level + "'");
    spdlog::set_level(l);
  });
}

void psd_string_free(char* s) { delete[] s; }

psd_status psd_schedule_alpha_bar(int num_steps, double beta_start, double beta_end, int t, double* out) {
  return guarded([&] {
    require_arg(out, "out");
    *out = build_schedule(num_steps, beta_start, beta_end).alpha_bar(t);
  });
}

psd_status psd_backbone_create_toy(uint64_t seed, const char* conditioning, psd_backbone** out) {
  return guarded([&] {
    require_arg(out, "out");
    Backbone::Options o;
    o.seed = seed;
    if (conditioning) o.conditioning = conditioning;
    *out = new psd_backbone{Backbone::create_toy(o)};
  });
}

psd_status psd_backbone_pretrain(psd_backbone* b, const double* const* images, size_t count, size_t h, size_t w,
                                 int steps, uint64_t seed) {
  return guarded([&] {
    require_arg(b, "backbone");
    require_arg(images, "images");
    std::vector<Tensor> ims;
    for (size_t i = 0; i < count; ++i) {
      require_arg(images[i], "image");
      Tensor t = Tensor::image(h, w, 3);
      std::memcpy(t.values().data(), images[i], h * w * 3 * sizeof(double));
      ims.push_back(std::move(t));
    }
    AePretrainOptions o;
    o.steps = steps;
    o.seed = seed;
    if (steps > 0) b->backbone.pretrain_autoencoder(ims, o);
    b->backbone.freeze();
  });
}

psd_status psd_backbone_load(const char* path, psd_backbone** out) {
  return guarded([&] {
    require_arg(path, "path");
    require_arg(out, "out");
    *out = new psd_backbone{Backbone::load(path)};
  });
}

psd_status psd_backbone_save(const psd_backbone* b, const char* path) {
  return guarded([&] {
    require_arg(b, "backbone");
    require_arg(path, "path");
    b->backbone.save(path);
  });
}

psd_status psd_backbone_weight_hash(const psd_backbone* b, uint64_t* out) {
  return guarded([&] {
    require_arg(b, "backbone");
    require_arg(out, "out");
    *out = b->backbone.weight_hash();
  });
}

psd_status psd_backbone_descriptor_json(const psd_backbone* b, char** out) {
  return guarded([&] {
    require_arg(b, "backbone");
    require_arg(out, "out");
    const auto& d = b->backbone.descriptor();
    json j{{"latent_downsample_factor", d.latent_downsample_factor},
           {"latent_channels", d.latent_channels},
           {"patch_size", d.patch_size},
           {"cond_dim", d.cond_dim},
           {"block_ids", d.block_ids},
           {"block_channels", d.block_channels},
           {"cross_attention", d.cross_attention},
           {"frozen", d.frozen},
           {"conditioning", b->backbone.conditioning()},
           {"parameters", b->backbone.parameter_count()}};
    *out = dup_string(j.dump());
  });
}

void psd_backbone_free(psd_backbone* b) { delete b; }

psd_status psd_extract_features(const psd_backbone* b, const double* image, size_t h, size_t w,
                                const char* options_json, psd_features** out) {
  return guarded([&] {
    require_arg(b, "backbone");
    require_arg(image, "image");
    require_arg(out, "out");
    const json o = parse_or_empty(options_json);
    FeatureOptions fo;
    fo.timestep = o.value("timestep", fo.timestep);
    fo.blocks = o.value("blocks", fo.blocks);
    fo.seed = o.value("seed", fo.seed);
    fo.feature_size = o.value("feature_size", fo.feature_size);
    GridConfig grid;
    grid.size = o.value("grid_size", grid.size);
    grid.patch = o.value("patch", grid.patch);
    const NoiseSchedule schedule =
        build_schedule(o.value("T", 1000), o.value("beta_start", 1e-4), o.value("beta_end", 0.02));
    Tensor t = Tensor::image(h, w, 3);
    std::memcpy(t.values().data(), image, h * w * 3 * sizeof(double));
    *out = new psd_features{
        extract_grid_features(b->backbone, schedule, t, grid, fo, o.value("image_id", std::uint64_t{0}))};
  });
}

psd_status psd_features_shape(const psd_features* f, size_t* h, size_t* w, size_t* c) {
  return guarded([&] {
    require_arg(f, "features");
    if (h) *h = f->map.values.h();
    if (w) *w = f->map.values.w();
    if (c) *c = f->map.values.c();
  });
}

const double* psd_features_data(const psd_features* f) { return f ? f->map.values.values().data() : nullptr; }

psd_status psd_features_block_slices_json(const psd_features* f, char** out) {
  return guarded([&] {
    require_arg(f, "features");
    require_arg(out, "out");
    json j = json::array();
    for (const auto& [id, r] : f->map.block_slices) j.push_back({{"block", id}, {"begin", r.begin}, {"end", r.end}});
    *out = dup_string(j.dump());
  });
}

void psd_features_free(psd_features* f) { delete f; }

psd_status psd_head_load(const char* path, psd_head** out) {
  return guarded([&] {
    require_arg(path, "path");
    require_arg(out, "out");
    *out = new psd_head{SegmentationHead::load(path)};
  });
}

psd_status psd_head_info_json(const psd_head* h, char** out) {
  return guarded([&] {
    require_arg(h, "head");
    require_arg(out, "out");
    const auto& c = h->head.config();
    json j{{"in_channels", c.in_channels}, {"num_classes", c.num_classes}, {"widths", c.widths},
           {"first_kernel", c.first_kernel}, {"input_size", c.input_size}, {"output_size", c.output_size},
           {"parameters", h->head.parameter_count()}};
    *out = dup_string(j.dump());
  });
}

psd_status psd_head_predict(const psd_head* h, const psd_features* f, int32_t* mask, size_t capacity, size_t* out_h,
                            size_t* out_w) {
  return guarded([&] {
    require_arg(h, "head");
    require_arg(f, "features");
    require_arg(mask, "mask");
    const SegmentationMask m = predict_mask(h->head.forward(f->map.values));
    require(capacity >= m.size(), ErrorKind::Shape,
            "mask buffer holds " + std::to_string(capacity) + " values, need " + std::to_string(m.size()));
    std::copy(m.classes.begin(), m.classes.end(), mask);
    if (out_h) *out_h = m.height;
    if (out_w) *out_w = m.width;
  });
}

void psd_head_free(psd_head* h) { delete h; }

psd_status psd_resolve_config(const char* file, const char* const* overrides, size_t n, const char* preset,
                              char** out) {
  return guarded([&] {
    require_arg(out, "out");
    std::vector<std::string> ov;
    for (size_t i = 0; i < n; ++i) ov.emplace_back(overrides[i]);
    *out = dup_string(resolve_config(file ? file : "", ov, preset ? preset : "").dump(2));
  });
}

psd_status psd_prepare_data(const char* options_json, char** out) {
  return guarded([&] {
    const json o = parse_or_empty(options_json);
    PrepareOptions p;
    p.dataset = o.value("dataset", std::string("synthetic"));
    p.raw_root = o.value("raw_root", std::string());
    p.out_dir = o.value("out_dir", std::string());
    p.class_map_file = o.value("class_map", std::string());
    p.policy.window = o.value("window", p.policy.window);
    p.policy.stride = o.value("stride", p.policy.stride);
    p.policy.dontcare_threshold = o.value("dontcare_threshold", p.policy.dontcare_threshold);
    p.policy.crop = o.value("crop", p.policy.crop);
    p.target = o.value("target", p.target);
    p.seed = o.value("seed", p.seed);
    if (o.contains("synthetic")) {
      const json& s = o["synthetic"];
      p.synthetic.n = s.value("n", p.synthetic.n);
      p.synthetic.n_val = s.value("n_val", p.synthetic.n_val);
      p.synthetic.num_classes = s.value("num_classes", p.synthetic.num_classes);
      p.synthetic.seed = s.value("seed", p.synthetic.seed);
      p.synthetic.image_size = s.value("image_size", p.synthetic.image_size);
      p.synthetic.ignore_fraction = s.value("ignore_fraction", p.synthetic.ignore_fraction);
      p.synthetic.cells = s.value("cells", p.synthetic.cells);
    }
    require(!p.out_dir.empty(), ErrorKind::Config, "out_dir is required");
    const DatasetManifest m = prepare_data(p);
    json j = m.to_json();
    j["path"] = (m.root / "manifest.json").string();
    if (out) *out = dup_string(j.dump(2));
  });
}

psd_status psd_run_training(const char* config_json, char** out) {
  return guarded([&] {
    require_arg(config_json, "config_json");
    const RunOutput r = run_training(json::parse(config_json));
    json j{{"run_dir", r.dir.string()}, {"train", r.train.to_json()}};
    j["validation"] = r.validation ? r.validation->to_json() : json();
    if (out) *out = dup_string(j.dump(2));
  });
}

psd_status psd_evaluate(const char* options_json, char** out) {
  return guarded([&] {
    const json o = parse_or_empty(options_json);
    EvaluateOptions e;
    e.run_dir = o.at("run_dir").get<std::string>();
    e.head_checkpoint = o.value("checkpoint", std::string());
    e.split = o.value("split", e.split);
    e.mask_dir = o.value("mask_dir", std::string());
    const json r = evaluate(e);
    if (out) *out = dup_string(r.dump(2));
  });
}

psd_status psd_run_sweep(const char* axis, const char* config_json, const char* values_json, const char* out_dir,
                         size_t parallel_runs, char** out) {
  return guarded([&] {
    require_arg(axis, "axis");
    require_arg(config_json, "config_json");
    require_arg(out_dir, "out_dir");
    const json config = json::parse(config_json);
    const json values = parse_or_empty(values_json);
    SweepOptions so;
    so.out_dir = out_dir;
    so.parallel_runs = parallel_runs;
    const std::string a = axis;
    SweepResult r;
    if (a == "timestep") {
      r = run_timestep_sweep(config, values.get<std::vector<int>>(), so);
    } else if (a == "lr") {
      r = run_lr_sweep(config, values.get<std::vector<double>>(), so);
    } else if (a == "blocks") {
      r = run_block_sweep(config, values.is_object() ? std::vector<std::vector<std::string>>{}
                                                     : values.get<std::vector<std::vector<std::string>>>(),
                          so);
    } else {
      fail(ErrorKind::Config, "unknown sweep axis '" + a + "' (timestep | lr | blocks)");
    }
    json j{{"csv", r.csv.string()}, {"plot", r.plot.string()}, {"rows", r.rows}};
    if (out) *out = dup_string(j.dump(2));
  });
}

psd_status psd_plot(const char* csv_path, const char* svg_path, const char* title) {
  return guarded([&] {
    require_arg(csv_path, "csv_path");
    require_arg(svg_path, "svg_path");
    plot_csv(csv_path, svg_path, title ? title : "");
  });
}

}  // extern "C"
