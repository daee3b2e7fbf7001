/* C interface to libpathseg. All functions return a psd_status; on failure
 * psd_last_error() describes the problem (per thread). Strings returned
 * through char** are owned by the caller and released with psd_string_free. */
#ifndef PATHSEG_H
#define PATHSEG_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define PSD_API __declspec(dllexport)
#else
#define PSD_API __attribute__((visibility("default")))
#endif

typedef enum psd_status {
  PSD_OK = 0,
  PSD_ERR_PARAMETER = 1,
  PSD_ERR_TIMESTEP = 2,
  PSD_ERR_SHAPE = 3,
  PSD_ERR_LOAD = 4,
  PSD_ERR_VALIDATION = 5,
  PSD_ERR_GRID = 6,
  PSD_ERR_MAPPING = 7,
  PSD_ERR_DEGENERATE_DATA = 8,
  PSD_ERR_UNDEFINED = 9,
  PSD_ERR_CONFIG = 10,
  PSD_ERR_RUNTIME = 11,
  PSD_ERR_IO = 12,
  PSD_ERR_INTERNAL = 13
} psd_status;

typedef struct psd_backbone psd_backbone;
typedef struct psd_features psd_features;
typedef struct psd_head psd_head;

PSD_API const char* psd_version(void);
PSD_API const char* psd_last_error(void);
PSD_API const char* psd_status_name(psd_status status);
/* Nonzero for statuses caused by invalid user input or configuration. */
PSD_API int psd_status_is_config_error(psd_status status);
/* trace | debug | info | warn | error | off */
PSD_API psd_status psd_set_log_level(const char* level);
PSD_API void psd_string_free(char* s);

/* Noise schedule: cumulative product alpha_bar_t of a linear beta schedule. */
PSD_API psd_status psd_schedule_alpha_bar(int num_steps, double beta_start, double beta_end, int t, double* out);

/* Backbone. `conditioning` is "toy-ssl" or "none"; NULL keeps the default. */
PSD_API psd_status psd_backbone_create_toy(uint64_t seed, const char* conditioning, psd_backbone** out);
/* Pre-trains the autoencoder on `count` images of h x w x 3 doubles in [0, 1]
 * and freezes the backbone. */
PSD_API psd_status psd_backbone_pretrain(psd_backbone* backbone, const double* const* images, size_t count, size_t h,
                                         size_t w, int steps, uint64_t seed);
PSD_API psd_status psd_backbone_load(const char* path, psd_backbone** out);
PSD_API psd_status psd_backbone_save(const psd_backbone* backbone, const char* path);
PSD_API psd_status psd_backbone_weight_hash(const psd_backbone* backbone, uint64_t* out);
PSD_API psd_status psd_backbone_descriptor_json(const psd_backbone* backbone, char** out_json);
PSD_API void psd_backbone_free(psd_backbone* backbone);

/* Grid feature extraction for one h x w x 3 image in [0, 1]. `options_json`
 * may set timestep, blocks, seed, feature_size, grid_size, patch, T,
 * beta_start, beta_end, image_id; NULL uses defaults. */
PSD_API psd_status psd_extract_features(const psd_backbone* backbone, const double* image, size_t h, size_t w,
                                        const char* options_json, psd_features** out);
PSD_API psd_status psd_features_shape(const psd_features* features, size_t* h, size_t* w, size_t* c);
/* Row-major (h, w, c); valid until psd_features_free. */
PSD_API const double* psd_features_data(const psd_features* features);
PSD_API psd_status psd_features_block_slices_json(const psd_features* features, char** out_json);
PSD_API void psd_features_free(psd_features* features);

/* Segmentation head. */
PSD_API psd_status psd_head_load(const char* path, psd_head** out);
PSD_API psd_status psd_head_info_json(const psd_head* head, char** out_json);
/* Writes output_size^2 class ids into `mask` (capacity in elements). */
PSD_API psd_status psd_head_predict(const psd_head* head, const psd_features* features, int32_t* mask,
                                    size_t capacity, size_t* out_h, size_t* out_w);
PSD_API void psd_head_free(psd_head* head);

/* Experiment layer; configs and results are JSON documents. */
PSD_API psd_status psd_resolve_config(const char* file, const char* const* overrides, size_t override_count,
                                      const char* preset, char** out_json);
PSD_API psd_status psd_prepare_data(const char* options_json, char** out_manifest_json);
PSD_API psd_status psd_run_training(const char* config_json, char** out_summary_json);
PSD_API psd_status psd_evaluate(const char* options_json, char** out_json);
/* axis: "timestep" (values: integers), "lr" (positive reals) or "blocks"
 * (arrays of block ids; empty array = every singleton plus "all"). */
PSD_API psd_status psd_run_sweep(const char* axis, const char* config_json, const char* values_json,
                                 const char* out_dir, size_t parallel_runs, char** out_json);
PSD_API psd_status psd_plot(const char* csv_path, const char* svg_path, const char* title);

#ifdef __cplusplus
}
#endif

#endif
