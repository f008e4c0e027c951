#include "fusionreg/fusionreg.h"

#include <cstring>
#include <iostream>
#include <memory>
#include <new>
#include <string>

#include "fusionreg/config.hpp"
#include "fusionreg/data.hpp"
#include "fusionreg/error.hpp"
#include "fusionreg/losses.hpp"
#include "fusionreg/metrics.hpp"
#include "fusionreg/network.hpp"
#include "fusionreg/nifti.hpp"
#include "fusionreg/pipeline.hpp"

using namespace fusionreg;

struct frg_volume {
  Volume v;
};
struct frg_field {
  DisplacementField f;
};
struct frg_model {
  std::unique_ptr<RegistrationNetwork> net;
};

namespace {

thread_local std::string last_error;

frg_status fail(frg_status s, const std::string& msg) {
  last_error = msg;
  return s;
}

template <typename F>
frg_status guarded(F&& body) {
  try {
    body();
    return FRG_OK;
  } catch (const ContractError& e) {
    return fail(FRG_ERR_CONTRACT, e.what());
  } catch (const IoError& e) {
    return fail(FRG_ERR_IO, e.what());
  } catch (const ConfigError& e) {
    return fail(FRG_ERR_CONFIG, e.what());
  } catch (const NumericError& e) {
    return fail(FRG_ERR_NUMERIC, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(FRG_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(FRG_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(FRG_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(FRG_ERR_INTERNAL, "unknown error");
  }
}

#define FRG_CHECK_ARG(cond, what) \
  if (!(cond)) return fail(FRG_ERR_ARGUMENT, what)

}  // namespace

extern "C" {

FRG_API const char* frg_version(void) { return "0.1.0"; }

FRG_API const char* frg_last_error(void) { return last_error.c_str(); }

FRG_API const char* frg_status_name(frg_status status) {
  switch (status) {
    case FRG_OK: return "ok";
    case FRG_ERR_ARGUMENT: return "invalid argument";
    case FRG_ERR_CONTRACT: return "contract violation";
    case FRG_ERR_IO: return "i/o error";
    case FRG_ERR_CONFIG: return "configuration error";
    case FRG_ERR_NUMERIC: return "numeric error";
    case FRG_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

/* Volumes */

FRG_API frg_status frg_volume_create(int nx, int ny, int nz, const float* data, const double spacing[3],
                                     frg_volume_t** out) {
  FRG_CHECK_ARG(out, "out is null");
  FRG_CHECK_ARG(nx > 0 && ny > 0 && nz > 0, "dimensions must be positive");
  return guarded([&] {
    const Dims d{nx, ny, nz};
    const Spacing s = spacing ? Spacing{spacing[0], spacing[1], spacing[2]} : Spacing{};
    auto h = std::make_unique<frg_volume>();
    h->v = data ? Volume(d, s, std::vector<float>(data, data + d.count())) : Volume(d, s);
    *out = h.release();
  });
}

FRG_API frg_status frg_volume_load(const char* path, int normalize, frg_volume_t** out) {
  FRG_CHECK_ARG(path && out, "null argument");
  return guarded([&] {
    auto h = std::make_unique<frg_volume>();
    h->v = normalize ? load_volume(path) : nifti::read_volume(path);
    *out = h.release();
  });
}

FRG_API frg_status frg_volume_save(const frg_volume_t* volume, const char* path) {
  FRG_CHECK_ARG(volume && path, "null argument");
  return guarded([&] { nifti::write_volume(path, volume->v); });
}

FRG_API frg_status frg_volume_dims(const frg_volume_t* volume, int dims[3]) {
  FRG_CHECK_ARG(volume && dims, "null argument");
  dims[0] = volume->v.dims().x;
  dims[1] = volume->v.dims().y;
  dims[2] = volume->v.dims().z;
  return FRG_OK;
}

FRG_API frg_status frg_volume_spacing(const frg_volume_t* volume, double spacing[3]) {
  FRG_CHECK_ARG(volume && spacing, "null argument");
  for (int a = 0; a < 3; ++a) spacing[a] = volume->v.spacing()[a];
  return FRG_OK;
}

FRG_API const float* frg_volume_data(const frg_volume_t* volume) {
  return volume ? volume->v.values().data() : nullptr;
}

FRG_API void frg_volume_free(frg_volume_t* volume) { delete volume; }

/* Fields */

FRG_API frg_status frg_field_create(int nx, int ny, int nz, const float* data, frg_field_t** out) {
  FRG_CHECK_ARG(out, "out is null");
  FRG_CHECK_ARG(nx > 0 && ny > 0 && nz > 0, "dimensions must be positive");
  return guarded([&] {
    const Dims d{nx, ny, nz};
    auto h = std::make_unique<frg_field>();
    h->f = data ? DisplacementField(d, Spacing{}, std::vector<float>(data, data + 3 * d.count()))
                : DisplacementField(d);
    *out = h.release();
  });
}

FRG_API frg_status frg_field_load(const char* path, frg_field_t** out) {
  FRG_CHECK_ARG(path && out, "null argument");
  return guarded([&] {
    auto h = std::make_unique<frg_field>();
    h->f = nifti::read_field(path);
    *out = h.release();
  });
}

FRG_API frg_status frg_field_save(const frg_field_t* field, const char* path) {
  FRG_CHECK_ARG(field && path, "null argument");
  return guarded([&] { nifti::write_field(path, field->f); });
}

FRG_API frg_status frg_field_dims(const frg_field_t* field, int dims[3]) {
  FRG_CHECK_ARG(field && dims, "null argument");
  dims[0] = field->f.dims().x;
  dims[1] = field->f.dims().y;
  dims[2] = field->f.dims().z;
  return FRG_OK;
}

FRG_API const float* frg_field_data(const frg_field_t* field) { return field ? field->f.values().data() : nullptr; }

FRG_API void frg_field_free(frg_field_t* field) { delete field; }

FRG_API frg_status frg_warp(const frg_volume_t* volume, const frg_field_t* field, frg_volume_t** out) {
  FRG_CHECK_ARG(volume && field && out, "null argument");
  return guarded([&] {
    require(volume->v.dims() == field->f.dims(), "warp: volume " + to_string(volume->v.dims()) +
                                                     " and field " + to_string(field->f.dims()) + " differ");
    auto h = std::make_unique<frg_volume>();
    h->v = warp(volume->v, field->f);
    *out = h.release();
  });
}

FRG_API frg_status frg_ndv(const frg_field_t* field, double* percent) {
  FRG_CHECK_ARG(field && percent, "null argument");
  return guarded([&] { *percent = ndv(field->f); });
}

FRG_API frg_status frg_total_loss(const frg_volume_t* fixed, const frg_volume_t* moving, const frg_field_t* phi,
                                  const frg_field_t* phi_hat, double alpha, double beta, double lambda,
                                  double out[4]) {
  FRG_CHECK_ARG(fixed && moving && phi && phi_hat && out, "null argument");
  return guarded([&] {
    LossWeights w;
    w.alpha = alpha;
    w.beta = beta;
    w.lambda = lambda;
    const LossBreakdown b = total_loss(fixed->v, moving->v, phi->f, phi_hat->f, w);
    out[0] = b.ncc_full;
    out[1] = b.ncc_half;
    out[2] = b.reg;
    out[3] = b.total;
  });
}

/* Models */

FRG_API frg_status frg_model_create(const char* config_text, frg_model_t** out) {
  FRG_CHECK_ARG(out, "out is null");
  return guarded([&] {
    const RunConfig c = config_text ? parse_run_config(config_text) : RunConfig{};
    auto h = std::make_unique<frg_model>();
    h->net = std::make_unique<RegistrationNetwork>(c.model);
    *out = h.release();
  });
}

FRG_API frg_status frg_model_load(const char* checkpoint_path, frg_model_t** out) {
  FRG_CHECK_ARG(checkpoint_path && out, "null argument");
  return guarded([&] {
    auto h = std::make_unique<frg_model>();
    h->net = load_checkpoint(checkpoint_path);
    *out = h.release();
  });
}

FRG_API frg_status frg_model_save(const frg_model_t* model, const char* checkpoint_path) {
  FRG_CHECK_ARG(model && checkpoint_path, "null argument");
  return guarded([&] { save_checkpoint(checkpoint_path, *model->net); });
}

FRG_API frg_status frg_model_parameter_count(const frg_model_t* model, size_t* count) {
  FRG_CHECK_ARG(model && count, "null argument");
  *count = model->net->parameters().scalar_count();
  return FRG_OK;
}

FRG_API frg_status frg_model_register(const frg_model_t* model, const frg_volume_t* moving,
                                      const frg_volume_t* fixed, frg_field_t** phi, frg_field_t** phi_hat) {
  FRG_CHECK_ARG(model && moving && fixed && phi, "null argument");
  return guarded([&] {
    RegistrationOutput r = model->net->register_pair(moving->v, fixed->v);
    auto a = std::make_unique<frg_field>();
    a->f = std::move(r.phi);
    if (phi_hat) {
      auto b = std::make_unique<frg_field>();
      b->f = std::move(r.phi_hat);
      *phi_hat = b.release();
    }
    *phi = a.release();
  });
}

FRG_API void frg_model_free(frg_model_t* model) { delete model; }

/* Runs */

FRG_API frg_status frg_train(const frg_train_options* options) {
  FRG_CHECK_ARG(options && options->config_path, "config path is required");
  if (options->overrides)
    for (const char* const* o = options->overrides; *o; ++o)
      FRG_CHECK_ARG(std::strchr(*o, '=') != nullptr, std::string("override '") + *o + "' is not key=value");
  return guarded([&] {
    RunConfig c = load_run_config(options->config_path);
    if (options->overrides)
      for (const char* const* o = options->overrides; *o; ++o) {
        const std::string kv(*o);
        const auto eq = kv.find('=');
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
      }
    if (options->deterministic) c.deterministic = true;
    TrainOptions t;
    if (options->verbose) t.progress = &std::cerr;
    train(c, t);
  });
}

FRG_API frg_status frg_register(const char* checkpoint_path, const char* moving_path, const char* fixed_path,
                                const char* out_dir) {
  FRG_CHECK_ARG(checkpoint_path && moving_path && fixed_path && out_dir, "null argument");
  return guarded([&] { register_files(checkpoint_path, moving_path, fixed_path, out_dir); });
}

FRG_API frg_status frg_evaluate(const frg_evaluate_options* options) {
  FRG_CHECK_ARG(options && options->manifest_path && options->source && options->out_path,
                "manifest, source and output path are required");
  return guarded([&] {
    EvaluateOptions e;
    if (options->split) e.split = options->split;
    if (options->save_fields_dir) e.save_fields = options->save_fields_dir;
    e.threads = options->threads;
    e.deterministic = options->deterministic != 0;
    evaluate_to_file(options->manifest_path, options->source, options->out_path, e);
  });
}

FRG_API void frg_synth_options_init(frg_synth_options* options) {
  if (!options) return;
  const SynthOptions d;
  options->shape[0] = d.shape.x;
  options->shape[1] = d.shape.y;
  options->shape[2] = d.shape.z;
  options->count = d.count;
  options->val_count = d.val_count;
  options->max_disp = d.max_disp;
  options->smoothness = d.smoothness;
  options->seed = d.seed;
  options->out_dir = nullptr;
}

FRG_API frg_status frg_synth(const frg_synth_options* options) {
  FRG_CHECK_ARG(options && options->out_dir, "output directory is required");
  FRG_CHECK_ARG(options->shape[0] > 0 && options->shape[1] > 0 && options->shape[2] > 0 &&
                    options->shape[0] % 16 == 0 && options->shape[1] % 16 == 0 && options->shape[2] % 16 == 0,
                "shape axes must be positive multiples of 16");
  FRG_CHECK_ARG(options->count > 0 && options->val_count >= 0 && options->val_count <= options->count,
                "count must be positive and val_count within [0, count]");
  return guarded([&] {
    SynthOptions s;
    s.shape = Dims{options->shape[0], options->shape[1], options->shape[2]};
    s.count = options->count;
    s.val_count = options->val_count;
    s.max_disp = options->max_disp;
    s.smoothness = options->smoothness;
    s.seed = options->seed;
    synth(s, options->out_dir);
  });
}

}  // extern "C"
