#ifndef FUSIONREG_H
#define FUSIONREG_H

/*
 * C interface to the fusionreg library.
 *
 * Every function returns an frg_status. On failure the message is available
 * from frg_last_error() on the same thread until the next failing call.
 * Objects returned through out-parameters are owned by the caller and must be
 * released with the matching *_free function (NULL is accepted).
 *
 * Grids are stored x-fastest: index = x + nx * (y + ny * z). Displacement
 * fields hold three planar components (x, y, z) in voxel units.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(FRG_BUILDING_LIBRARY)
#define FRG_API __declspec(dllexport)
#else
#define FRG_API __declspec(dllimport)
#endif
#else
#define FRG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum frg_status {
  FRG_OK = 0,
  FRG_ERR_ARGUMENT = 1, /* null pointer or bad value */
  FRG_ERR_CONTRACT = 2, /* shape or precondition violated */
  FRG_ERR_IO = 3,
  FRG_ERR_CONFIG = 4,
  FRG_ERR_NUMERIC = 5,
  FRG_ERR_INTERNAL = 6
} frg_status;

typedef struct frg_volume frg_volume_t;
typedef struct frg_field frg_field_t;
typedef struct frg_model frg_model_t;

FRG_API const char* frg_version(void);
FRG_API const char* frg_last_error(void);
FRG_API const char* frg_status_name(frg_status status);

/* Volumes. Null data gives zeros, null spacing gives 1 mm. */
FRG_API frg_status frg_volume_create(int nx, int ny, int nz, const float* data, const double spacing[3],
                                     frg_volume_t** out);
/* normalize != 0 applies min-max normalization to [0, 1]. */
FRG_API frg_status frg_volume_load(const char* path, int normalize, frg_volume_t** out);
FRG_API frg_status frg_volume_save(const frg_volume_t* volume, const char* path);
FRG_API frg_status frg_volume_dims(const frg_volume_t* volume, int dims[3]);
FRG_API frg_status frg_volume_spacing(const frg_volume_t* volume, double spacing[3]);
/* Borrowed pointer, valid until the volume is freed. */
FRG_API const float* frg_volume_data(const frg_volume_t* volume);
FRG_API void frg_volume_free(frg_volume_t* volume);

/* Displacement fields, 3 planar components in voxels. Null data gives the identity. */
FRG_API frg_status frg_field_create(int nx, int ny, int nz, const float* data, frg_field_t** out);
FRG_API frg_status frg_field_load(const char* path, frg_field_t** out);
FRG_API frg_status frg_field_save(const frg_field_t* field, const char* path);
FRG_API frg_status frg_field_dims(const frg_field_t* field, int dims[3]);
FRG_API const float* frg_field_data(const frg_field_t* field);
FRG_API void frg_field_free(frg_field_t* field);

FRG_API frg_status frg_warp(const frg_volume_t* volume, const frg_field_t* field, frg_volume_t** out);
FRG_API frg_status frg_ndv(const frg_field_t* field, double* percent);
/* out = {ncc_full, ncc_half, reg, total}; phi_hat at half resolution. */
FRG_API frg_status frg_total_loss(const frg_volume_t* fixed, const frg_volume_t* moving, const frg_field_t* phi,
                                  const frg_field_t* phi_hat, double alpha, double beta, double lambda,
                                  double out[4]);

/* Models */
/* config_text uses the run-config syntax; only model.* keys are read. NULL gives defaults. */
FRG_API frg_status frg_model_create(const char* config_text, frg_model_t** out);
FRG_API frg_status frg_model_load(const char* checkpoint_path, frg_model_t** out);
FRG_API frg_status frg_model_save(const frg_model_t* model, const char* checkpoint_path);
FRG_API frg_status frg_model_parameter_count(const frg_model_t* model, size_t* count);
/* phi_hat may be NULL. */
FRG_API frg_status frg_model_register(const frg_model_t* model, const frg_volume_t* moving,
                                      const frg_volume_t* fixed, frg_field_t** phi, frg_field_t** phi_hat);
FRG_API void frg_model_free(frg_model_t* model);

/* Run-level workflows */
typedef struct frg_train_options {
  const char* config_path;
  /* NULL-terminated "key=value" strings applied after the file; may be NULL. */
  const char* const* overrides;
  int deterministic;
  int verbose; /* progress on stderr */
} frg_train_options;

FRG_API frg_status frg_train(const frg_train_options* options);
FRG_API frg_status frg_register(const char* checkpoint_path, const char* moving_path, const char* fixed_path,
                                const char* out_dir);

typedef struct frg_evaluate_options {
  const char* manifest_path;
  const char* source; /* field directory or checkpoint file */
  const char* out_path;
  const char* split;  /* NULL or "" for every pair */
  const char* save_fields_dir; /* may be NULL */
  int threads;
  int deterministic;
} frg_evaluate_options;

FRG_API frg_status frg_evaluate(const frg_evaluate_options* options);

typedef struct frg_synth_options {
  int shape[3];
  int count;
  int val_count;
  double max_disp;
  double smoothness;
  uint64_t seed;
  const char* out_dir;
} frg_synth_options;

/* Fills the defaults used by the command line. */
FRG_API void frg_synth_options_init(frg_synth_options* options);
FRG_API frg_status frg_synth(const frg_synth_options* options);

#ifdef __cplusplus
}
#endif

#endif /* FUSIONREG_H */
