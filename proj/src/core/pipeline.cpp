#include "fusionreg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "fusionreg/error.hpp"
#include "fusionreg/nifti.hpp"
#include "fusionreg/nn/adam.hpp"
#include "json.hpp"

namespace fusionreg {

namespace fs = std::filesystem;

namespace {

nn::Tensor as_tensor(const Volume& v) {
  return nn::Tensor(1, v.dims(), std::vector<float>(v.values().begin(), v.values().end()));
}

DisplacementField as_field(const nn::Tensor& t, Spacing s) {
  require(t.channels() == 3, "expected a 3-channel field");
  return DisplacementField(t.dims(), s, std::vector<float>(t.values().begin(), t.values().end()));
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string svg_loss_curve(const std::vector<LossBreakdown>& history) {
  const double W = 800, H = 480, L = 70, R = 20, T = 30, B = 50;
  double lo = 1e300, hi = -1e300;
  for (const auto& b : history) {
    lo = std::min(lo, b.total);
    hi = std::max(hi, b.total);
  }
  if (!(hi > lo)) {
    hi = lo + 1.0;
    lo -= 1.0;
  }
  const double n = static_cast<double>(std::max<std::size_t>(history.size(), 2) - 1);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"14\">training loss (total)</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", hi);
  s << "<text x=\"" << L - 5 << "\" y=\"" << T + 5 << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4f", lo);
  s << "<text x=\"" << L - 5 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"11\">" << buf
    << "</text>\n";
  s << "<text x=\"" << W - R << "\" y=\"" << H - B + 20 << "\" text-anchor=\"end\" font-size=\"11\">"
    << history.size() << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
    << "\" text-anchor=\"middle\" font-size=\"12\">iteration</text>\n";
  s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\" points=\"";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const double x = L + (W - L - R) * static_cast<double>(i) / n;
    const double y = T + (H - T - B) * (hi - history[i].total) / (hi - lo);
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x, y);
    s << buf;
  }
  s << "\"/>\n</svg>\n";
  return s.str();
}

std::string iter_name(long long it) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%06lld.frgc", it);
  return buf;
}

}  // namespace

Volume flip(const Volume& v, int axes) {
  if ((axes & 7) == 0) return v;
  const Dims d = v.dims();
  Volume out(d, v.spacing());
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const int si = (axes & 1) ? d.x - 1 - i : i;
        const int sj = (axes & 2) ? d.y - 1 - j : j;
        const int sk = (axes & 4) ? d.z - 1 - k : k;
        out.at(i, j, k) = v.at(si, sj, sk);
      }
  return out;
}

LossBreakdown accumulate_pair_gradient(RegistrationNetwork& net, const Volume& moving, const Volume& fixed,
                                       const LossWeights& weights, float grad_scale) {
  require(moving.dims() == fixed.dims(), "moving and fixed shapes differ");
  net.check_input_dims(fixed.dims());
  nn::Graph g(true);
  const auto out = net.forward(g, g.constant(as_tensor(moving)), g.constant(as_tensor(fixed)));
  const DisplacementField phi = as_field(g.value(out.phi), fixed.spacing());
  const DisplacementField phi_hat = as_field(g.value(out.phi_hat), fixed.spacing());
  const auto lg = total_loss_with_grad<float>(fixed, moving, phi, phi_hat, weights);
  if (!std::isfinite(lg.breakdown.total)) return lg.breakdown;
  auto gp = g.grad(out.phi);
  for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += grad_scale * lg.grad_phi.values()[i];
  auto gh = g.grad(out.phi_hat);
  for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += grad_scale * lg.grad_phi_hat.values()[i];
  g.backward();
  return lg.breakdown;
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  config.validate(true);
  const DatasetIndex index = DatasetIndex::load(config.data.manifest);
  const Dims target = config.data.target_shape;

  std::unique_ptr<RegistrationNetwork> net;
  if (options.init_checkpoint) {
    net = load_checkpoint(*options.init_checkpoint);
    if (!(net->config() == config.model)) throw ConfigError("initial checkpoint does not match model config");
  } else {
    net = std::make_unique<RegistrationNetwork>(config.model);
  }
  net->check_input_dims(target);

  TrainResult result;
  result.run_directory = config.output.directory;
  fs::create_directories(result.run_directory / "checkpoints");
  result.config_snapshot = result.run_directory / "config.cfg";
  RunConfig snapshot = config;
  snapshot.data.manifest = fs::absolute(config.data.manifest);
  snapshot.output.directory = fs::absolute(config.output.directory);
  write_text(result.config_snapshot, to_text(snapshot));

  // Every volume the sampler can reach, loaded once.
  std::vector<std::optional<Volume>> cache(index.entries.size());
  const auto volume = [&](std::size_t i) -> const Volume& {
    if (!cache[i]) {
      Volume v = load_volume(index.entries[i].volume);
      if (!(v.dims() == target) || !(v.spacing() == Spacing{1.0, 1.0, 1.0})) v = preprocess(v, target);
      cache[i] = std::move(v);
    }
    return *cache[i];
  };

  PairSampler sampler(index, config.data.seed, config.data.split);
  std::mt19937_64 aug_rng(config.data.seed ^ 0x9e3779b97f4a7c15ULL);
  nn::Adam adam(net->parameters(), nn::AdamOptions{config.optimizer.learning_rate, config.optimizer.beta1,
                                                   config.optimizer.beta2, config.optimizer.epsilon});
  result.log = result.run_directory / "train_log.jsonl";
  std::ofstream log(result.log);
  if (!log) throw IoError("cannot write " + result.log.string());

  std::vector<LossBreakdown> history;
  const int batch = config.optimizer.batch_size;
  const float scale = 1.0f / static_cast<float>(batch);
  for (long long it = 1; it <= config.optimizer.iterations; ++it) {
    LossBreakdown mean;
    for (int b = 0; b < batch; ++b) {
      const auto draw = sampler.next();
      const Volume* mv = &volume(draw.moving);
      const Volume* fv = &volume(draw.fixed);
      Volume fm, ff;
      if (config.data.augment_flips) {
        const int axes = static_cast<int>(aug_rng() & 7);
        fm = flip(*mv, axes);
        ff = flip(*fv, axes);
        mv = &fm;
        fv = &ff;
      }
      if (config.data.augment_swap && (aug_rng() & 1)) std::swap(mv, fv);
      const LossBreakdown lb = accumulate_pair_gradient(*net, *mv, *fv, config.loss, scale);
      if (!std::isfinite(lb.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << it << " (pair " << index.entries[draw.moving].id << " -> "
            << index.entries[draw.fixed].id << "): ncc_full=" << lb.ncc_full << " ncc_half=" << lb.ncc_half
            << " reg=" << lb.reg;
        throw NumericError(msg.str());
      }
      mean.ncc_full += lb.ncc_full / batch;
      mean.ncc_half += lb.ncc_half / batch;
      mean.reg += lb.reg / batch;
    }
    mean.total = assemble_total(config.loss, mean.ncc_full, mean.ncc_half, mean.reg);
    adam.step();
    history.push_back(mean);
    log << to_json_line(it, mean) << '\n';
    log.flush();
    if (options.progress && (it % options.progress_every == 0 || it == 1 || it == config.optimizer.iterations))
      *options.progress << "iter " << it << " total " << mean.total << " ncc_full " << mean.ncc_full << " reg "
                        << mean.reg << std::endl;
    if (config.optimizer.checkpoint_every > 0 && it % config.optimizer.checkpoint_every == 0 &&
        it != config.optimizer.iterations) {
      nlohmann::json meta = {{"iteration", it}, {"total", mean.total}};
      save_checkpoint(result.run_directory / "checkpoints" / iter_name(it), *net, meta.dump());
    }
  }
  result.iterations = config.optimizer.iterations;
  result.last = history.back();
  nlohmann::json meta = {{"iteration", result.iterations}, {"total", result.last.total}};
  result.checkpoint = result.run_directory / "checkpoint.frgc";
  save_checkpoint(result.checkpoint, *net, meta.dump());
  result.plot = result.run_directory / "loss_curve.svg";
  write_text(result.plot, svg_loss_curve(history));
  return result;
}

RegisterResult register_files(const fs::path& checkpoint, const fs::path& moving, const fs::path& fixed,
                              const fs::path& out_dir) {
  const auto net = load_checkpoint(checkpoint);
  const Volume raw_moving = nifti::read_volume(moving);
  Volume m = raw_moving;
  if (!m.all_finite()) throw IoError(moving.string() + ": volume contains non-finite values");
  normalize_min_max(m);
  const Volume f = load_volume(fixed);
  if (!(m.dims() == f.dims()))
    throw ContractError("moving " + to_string(m.dims()) + " and fixed " + to_string(f.dims()) + " shapes differ");
  net->check_input_dims(f.dims());
  const RegistrationOutput out = net->register_pair(m, f);
  fs::create_directories(out_dir);
  RegisterResult r{out_dir / "warped.nii.gz", out_dir / "field.nii.gz"};
  Volume warped = warp(raw_moving, out.phi);
  warped.set_spacing(f.spacing());
  nifti::write_volume(r.warped, warped);
  nifti::write_field(r.field, out.phi);
  return r;
}

MetricsReport evaluate_pair(const DatasetIndex& index, std::size_t pair, const DisplacementField& phi,
                            int epe_margin) {
  const PairEntry& p = index.pairs.at(pair);
  const DatasetEntry& me = index.entries.at(p.moving);
  const DatasetEntry& fe = index.entries.at(p.fixed);
  MetricsReport r;
  r.pair_id = p.id;
  r.ndv_percent = ndv(phi);
  if (me.labels && fe.labels) {
    const LabelMap ml = nifti::read_labels(*me.labels);
    const LabelMap fl = nifti::read_labels(*fe.labels);
    require(ml.dims() == phi.dims() && fl.dims() == phi.dims(), "pair " + p.id + ": label shape differs from field");
    const LabelMap warped = warp_nearest(ml, phi);
    const DiceResult d = dice(fl, warped);
    r.dice_mean = d.mean;
    r.dice_per_class = d.per_class;
    // Mean over classes present in both maps.
    double sum = 0.0;
    int n = 0;
    for (const auto& [c, _] : d.per_class) {
      std::vector<std::uint8_t> a(fl.values().size()), b(a.size());
      bool any_a = false, any_b = false;
      for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = fl.values()[i] == c;
        b[i] = warped.values()[i] == c;
        any_a = any_a || a[i];
        any_b = any_b || b[i];
      }
      if (!any_a || !any_b) continue;
      sum += hd95(a, b, fl.dims(), fl.spacing());
      ++n;
    }
    if (n > 0) r.hd95_mm = sum / n;
  }
  if (me.landmarks && fe.landmarks) {
    const LandmarkSet ml = read_landmarks(*me.landmarks);
    const LandmarkSet fl = read_landmarks(*fe.landmarks);
    r.tre_mm = tre(fl, ml, phi, phi.spacing());
    r.tre_identity_mm = tre(fl, ml, DisplacementField(phi.dims(), phi.spacing()), phi.spacing());
  }
  if (p.true_field) {
    const DisplacementField truth = nifti::read_field(*p.true_field);
    r.epe_voxels = endpoint_error(phi, truth, epe_margin);
  }
  return r;
}

std::vector<MetricsReport> evaluate(const DatasetIndex& index, const fs::path& source,
                                    const EvaluateOptions& options) {
  std::vector<std::size_t> pairs;
  for (std::size_t i = 0; i < index.pairs.size(); ++i)
    if (options.split.empty() || index.pairs[i].split == options.split) pairs.push_back(i);
  if (pairs.empty()) throw ConfigError("no pairs to evaluate" + (options.split.empty() ? "" : " in split '" + options.split + "'"));

  const bool live = fs::is_regular_file(source);
  if (!live && !fs::is_directory(source)) throw IoError("not a checkpoint or field directory: " + source.string());
  std::unique_ptr<RegistrationNetwork> net;
  if (live) net = load_checkpoint(source);
  if (options.save_fields) fs::create_directories(*options.save_fields);

  const auto field_for = [&](std::size_t pair) {
    const PairEntry& p = index.pairs[pair];
    if (!live) return nifti::read_field(source / (p.id + ".nii.gz"));
    const Volume m = load_volume(index.entries[p.moving].volume);
    const Volume f = load_volume(index.entries[p.fixed].volume);
    DisplacementField phi = net->register_pair(m, f).phi;
    if (options.save_fields) nifti::write_field(*options.save_fields / (p.id + ".nii.gz"), phi);
    return phi;
  };

  std::vector<MetricsReport> reports(pairs.size());
  int threads = options.deterministic ? 1 : options.threads;
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min<int>(threads, static_cast<int>(pairs.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  const auto worker = [&](int w) {
    try {
      for (std::size_t k; (k = next++) < pairs.size();) reports[k] = evaluate_pair(index, pairs[k], field_for(pairs[k]), options.epe_margin);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return reports;
}

std::vector<MetricsReport> evaluate_to_file(const fs::path& manifest, const fs::path& source, const fs::path& out_path,
                                            const EvaluateOptions& options) {
  const DatasetIndex index = DatasetIndex::load(manifest);
  auto reports = evaluate(index, source, options);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text(out_path, aggregate_json(reports) + "\n");
  return reports;
}

fs::path synth(const SynthOptions& o, const fs::path& out_dir) {
  require(o.count >= 1, "synth: count must be >= 1");
  require(o.val_count >= 0 && o.val_count <= o.count, "synth: val_count must lie in [0, count]");
  fs::create_directories(out_dir);
  std::mt19937_64 seeds(o.seed);
  DatasetIndex index;
  for (int c = 0; c < o.count; ++c) {
    SyntheticOptions so;
    so.shape = o.shape;
    so.max_disp = o.max_disp;
    so.smoothness = o.smoothness;
    so.seed = seeds();
    const SyntheticCase sc = make_synthetic(so);
    char name[32];
    std::snprintf(name, sizeof name, "case_%03d", c);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir);
    nifti::write_volume(dir / "moving.nii.gz", sc.moving);
    nifti::write_volume(dir / "fixed.nii.gz", sc.fixed);
    nifti::write_field(dir / "true_field.nii.gz", sc.true_field);
    nifti::write_labels(dir / "moving_labels.nii.gz", sc.moving_labels);
    nifti::write_labels(dir / "fixed_labels.nii.gz", sc.fixed_labels);
    write_landmarks(dir / "moving_landmarks.csv", sc.moving_landmarks);
    write_landmarks(dir / "fixed_landmarks.csv", sc.fixed_landmarks);
    const std::string split = c >= o.count - o.val_count ? "val" : "train";
    const std::size_t mi = index.entries.size();
    index.entries.push_back(DatasetEntry{std::string(name) + "_moving", dir / "moving.nii.gz",
                                         dir / "moving_labels.nii.gz", dir / "moving_landmarks.csv", split});
    index.entries.push_back(DatasetEntry{std::string(name) + "_fixed", dir / "fixed.nii.gz",
                                         dir / "fixed_labels.nii.gz", dir / "fixed_landmarks.csv", split});
    index.pairs.push_back(PairEntry{name, mi, mi + 1, dir / "true_field.nii.gz", split});
  }
  const fs::path manifest = out_dir / "manifest.json";
  index.save(manifest);
  return manifest;
}

}  // namespace fusionreg
