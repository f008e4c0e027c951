#include "fusionreg/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "fusionreg/error.hpp"

namespace fusionreg::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct Range {
  int lo;
  int hi;
};

// Outputs o along one axis whose input position o * stride + delta is inside [0, n_in).
Range valid_range(int n_out, int n_in, int stride, int delta) {
  int lo = 0;
  while (lo < n_out && lo * stride + delta < 0) ++lo;
  int hi = n_out;
  while (hi > lo && (hi - 1) * stride + delta >= n_in) --hi;
  return {lo, hi};
}

// dst[c, o] (+)= src[c, o * stride + delta]; positions with no source are zero
// unless accumulating.
void gather(const float* src, int channels, Dims in, Dims out, int stride, const int delta[3], float* dst,
            bool accumulate) {
  const std::size_t nin = in.count(), nout = out.count();
  if (!accumulate) std::fill(dst, dst + channels * nout, 0.0f);
  const Range rx = valid_range(out.x, in.x, stride, delta[0]);
  const Range ry = valid_range(out.y, in.y, stride, delta[1]);
  const Range rz = valid_range(out.z, in.z, stride, delta[2]);
  if (rx.lo >= rx.hi) return;
  const int len = rx.hi - rx.lo;
  for (int c = 0; c < channels; ++c)
    for (int z = rz.lo; z < rz.hi; ++z)
      for (int y = ry.lo; y < ry.hi; ++y) {
        const float* s = src + c * nin + in.index(rx.lo * stride + delta[0], y * stride + delta[1], z * stride + delta[2]);
        float* d = dst + c * nout + out.index(rx.lo, y, z);
        if (stride == 1) {
          if (accumulate)
            for (int x = 0; x < len; ++x) d[x] += s[x];
          else
            std::copy(s, s + len, d);
        } else {
          if (accumulate)
            for (int x = 0; x < len; ++x) d[x] += s[x * stride];
          else
            for (int x = 0; x < len; ++x) d[x] = s[x * stride];
        }
      }
}

// dst[c, o * stride + delta] += src[c, o]
void scatter_add(const float* src, int channels, Dims in, Dims out, int stride, const int delta[3], float* dst) {
  const std::size_t nin = in.count(), nout = out.count();
  const Range rx = valid_range(out.x, in.x, stride, delta[0]);
  const Range ry = valid_range(out.y, in.y, stride, delta[1]);
  const Range rz = valid_range(out.z, in.z, stride, delta[2]);
  if (rx.lo >= rx.hi) return;
  const int len = rx.hi - rx.lo;
  for (int c = 0; c < channels; ++c)
    for (int z = rz.lo; z < rz.hi; ++z)
      for (int y = ry.lo; y < ry.hi; ++y) {
        float* d = dst + c * nin + in.index(rx.lo * stride + delta[0], y * stride + delta[1], z * stride + delta[2]);
        const float* s = src + c * nout + out.index(rx.lo, y, z);
        for (int x = 0; x < len; ++x) d[x * stride] += s[x];
      }
}

void offset_delta(int offset, int kernel, int delta[3]) {
  const int pad = kernel / 2;
  delta[0] = offset % kernel - pad;
  delta[1] = (offset / kernel) % kernel - pad;
  delta[2] = offset / (kernel * kernel) - pad;
}

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  require(a.dims() == b.dims(), std::string(what) + ": spatial shape mismatch " + to_string(a.dims()) + " vs " +
                                    to_string(b.dims()));
}

}  // namespace

Conv3d make_conv(ParameterStore& store, const std::string& name, ConvSpec spec) {
  require(spec.kernel >= 1 && spec.kernel % 2 == 1, "conv kernel must be odd");
  require(spec.stride == 1 || spec.stride == 2, "conv stride must be 1 or 2");
  require(spec.in_channels >= 1 && spec.out_channels >= 1, "conv channel counts must be >= 1");
  const int k3 = spec.kernel * spec.kernel * spec.kernel;
  Conv3d conv;
  conv.spec = spec;
  conv.weight = &store.create(name + ".weight", {k3, spec.out_channels, spec.in_channels});
  conv.bias = &store.create(name + ".bias", {spec.out_channels});
  return conv;
}

void initialize_conv(Conv3d& conv, ConvInit init, float negative_slope, std::mt19937_64& rng) {
  std::fill(conv.bias->value.begin(), conv.bias->value.end(), 0.0f);
  if (init == ConvInit::Zero) {
    std::fill(conv.weight->value.begin(), conv.weight->value.end(), 0.0f);
    return;
  }
  const int k3 = conv.spec.kernel * conv.spec.kernel * conv.spec.kernel;
  const double fan_in = static_cast<double>(k3) * conv.spec.in_channels;
  const double gain = std::sqrt(2.0 / (1.0 + static_cast<double>(negative_slope) * negative_slope));
  const double bound = gain * std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (float& w : conv.weight->value) w = static_cast<float>(dist(rng));
}

Dims conv_output_dims(const Dims& in, const ConvSpec& spec) {
  const int pad = spec.kernel / 2;
  auto out = [&](int n) { return (n + 2 * pad - spec.kernel) / spec.stride + 1; };
  return {out(in.x), out(in.y), out(in.z)};
}

Var conv3d(Graph& g, Var x, const Conv3d& conv) {
  const ConvSpec spec = conv.spec;
  const Tensor& xin = g.value(x);
  require(xin.channels() == spec.in_channels, "conv3d: expected " + std::to_string(spec.in_channels) +
                                                  " input channels, got " + std::to_string(xin.channels()));
  const Dims in = xin.dims();
  const Dims out = conv_output_dims(in, spec);
  const int cin = spec.in_channels, cout = spec.out_channels, stride = spec.stride;
  const int k3 = spec.kernel * spec.kernel * spec.kernel;
  const auto nin = static_cast<Eigen::Index>(in.count());
  const auto nout = static_cast<Eigen::Index>(out.count());

  Tensor y(cout, out);
  float* yp = y.values().data();
  for (int c = 0; c < cout; ++c) std::fill(yp + c * nout, yp + (c + 1) * nout, conv.bias->value[c]);
  MatMap Y(yp, cout, nout);
  ConstMatMap X(xin.values().data(), cin, nin);
  const float* wp = conv.weight->value.data();

  std::vector<float> buffer;
  for (int off = 0; off < k3; ++off) {
    int delta[3];
    offset_delta(off, spec.kernel, delta);
    ConstMatMap W(wp + static_cast<std::size_t>(off) * cout * cin, cout, cin);
    if (stride == 1 && delta[0] == 0 && delta[1] == 0 && delta[2] == 0) {
      Y.noalias() += W * X;
    } else if (stride == 1 && cout < cin) {
      buffer.resize(static_cast<std::size_t>(cout) * nin);
      MatMap Z(buffer.data(), cout, nin);
      Z.noalias() = W * X;
      gather(buffer.data(), cout, in, out, 1, delta, yp, true);
    } else {
      buffer.resize(static_cast<std::size_t>(cin) * nout);
      gather(xin.values().data(), cin, in, out, stride, delta, buffer.data(), false);
      ConstMatMap G(buffer.data(), cin, nout);
      Y.noalias() += W * G;
    }
  }

  const Conv3d layer = conv;
  return g.push(std::move(y), true, [x, layer](Graph& gr, Var self) {
    const ConvSpec s = layer.spec;
    const Tensor& xv = gr.value(x);
    const Dims din = xv.dims();
    const Dims dout = gr.value(self).dims();
    const int ci = s.in_channels, co = s.out_channels, st = s.stride;
    const int kk = s.kernel * s.kernel * s.kernel;
    const auto ni = static_cast<Eigen::Index>(din.count());
    const auto no = static_cast<Eigen::Index>(dout.count());
    const std::span<float> gy = gr.grad(self);
    const bool want_dx = gr.needs_grad(x);
    float* dxp = want_dx ? gr.grad(x).data() : nullptr;

    ConstMatMap dY(gy.data(), co, no);
    ConstMatMap Xv(xv.values().data(), ci, ni);
    // Plain loop: Eigen's vectorized sum peels by address, which makes the order allocation-dependent.
    for (int c = 0; c < co; ++c) {
      float sum = 0.0f;
      for (const float v : gy.subspan(static_cast<std::size_t>(c) * no, no)) sum += v;
      layer.bias->grad[c] += sum;
    }

    std::vector<float> buf;
    std::vector<float> tmp;
    for (int off = 0; off < kk; ++off) {
      int delta[3];
      offset_delta(off, s.kernel, delta);
      const std::size_t woff = static_cast<std::size_t>(off) * co * ci;
      ConstMatMap W(layer.weight->value.data() + woff, co, ci);
      MatMap dW(layer.weight->grad.data() + woff, co, ci);
      const bool centre = st == 1 && delta[0] == 0 && delta[1] == 0 && delta[2] == 0;
      if (centre) {
        dW.noalias() += dY * Xv.transpose();
        if (want_dx) {
          MatMap dX(dxp, ci, ni);
          dX.noalias() += W.transpose() * dY;
        }
      } else if (st == 1 && ci > co) {
        const int neg[3] = {-delta[0], -delta[1], -delta[2]};
        buf.resize(static_cast<std::size_t>(co) * ni);
        gather(gy.data(), co, dout, din, 1, neg, buf.data(), false);
        ConstMatMap H(buf.data(), co, ni);
        dW.noalias() += H * Xv.transpose();
        if (want_dx) {
          MatMap dX(dxp, ci, ni);
          dX.noalias() += W.transpose() * H;
        }
      } else {
        buf.resize(static_cast<std::size_t>(ci) * no);
        gather(xv.values().data(), ci, din, dout, st, delta, buf.data(), false);
        ConstMatMap G(buf.data(), ci, no);
        dW.noalias() += dY * G.transpose();
        if (want_dx) {
          tmp.resize(static_cast<std::size_t>(ci) * no);
          MatMap T(tmp.data(), ci, no);
          T.noalias() = W.transpose() * dY;
          scatter_add(tmp.data(), ci, din, dout, st, delta, dxp);
        }
      }
    }
  });
}

Var leaky_relu(Graph& g, Var x, float slope) {
  const Tensor& xin = g.value(x);
  Tensor y(xin.channels(), xin.dims());
  auto xs = xin.values();
  auto ys = y.values();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0.0f ? xs[i] : slope * xs[i];
  return g.push(std::move(y), g.needs_grad(x), [x, slope](Graph& gr, Var self) {
    auto xv = gr.value(x).values();
    auto gy = gr.grad(self);
    auto gx = gr.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xv[i] > 0.0f ? gy[i] : slope * gy[i];
  });
}

Var sigmoid(Graph& g, Var x) {
  const Tensor& xin = g.value(x);
  Tensor y(xin.channels(), xin.dims());
  auto xs = xin.values();
  auto ys = y.values();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = 1.0f / (1.0f + std::exp(-xs[i]));
  return g.push(std::move(y), g.needs_grad(x), [x](Graph& gr, Var self) {
    auto yv = gr.value(self).values();
    auto gy = gr.grad(self);
    auto gx = gr.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * yv[i] * (1.0f - yv[i]);
  });
}

Var concat(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat: no inputs");
  const Dims d = g.value(parts.front()).dims();
  int channels = 0;
  bool needs = false;
  for (Var p : parts) {
    require_same_dims(g.value(parts.front()), g.value(p), "concat");
    channels += g.value(p).channels();
    needs = needs || g.needs_grad(p);
  }
  Tensor y(channels, d);
  auto out = y.values();
  std::size_t pos = 0;
  for (Var p : parts) {
    auto v = g.value(p).values();
    std::copy(v.begin(), v.end(), out.begin() + pos);
    pos += v.size();
  }
  return g.push(std::move(y), needs, [parts](Graph& gr, Var self) {
    auto gy = gr.grad(self);
    std::size_t at = 0;
    for (Var p : parts) {
      const std::size_t n = gr.value(p).size();
      if (gr.needs_grad(p)) {
        auto gp = gr.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += gy[at + i];
      }
      at += n;
    }
  });
}

namespace {

Var resample_scaled(Graph& g, Var x, int factor, float scale) {
  require(factor >= 2, "upsampling factor must be >= 2");
  const Tensor& xin = g.value(x);
  const Dims src = xin.dims();
  const Dims dst{src.x * factor, src.y * factor, src.z * factor};
  Tensor y(xin.channels(), dst);
  kernels::resample<float>(xin.values(), xin.channels(), src, dst, y.values());
  if (scale != 1.0f)
    for (float& v : y.values()) v *= scale;
  return g.push(std::move(y), g.needs_grad(x), [x, src, dst, scale](Graph& gr, Var self) {
    const int channels = gr.value(x).channels();
    std::span<const float> gy = gr.grad(self);
    std::vector<float> scaled;
    if (scale != 1.0f) {
      scaled.assign(gy.begin(), gy.end());
      for (float& v : scaled) v *= scale;
      gy = scaled;
    }
    kernels::resample_adjoint<float>(gy, channels, src, dst, gr.grad(x));
  });
}

}  // namespace

Var upsample_features(Graph& g, Var x, int factor) { return resample_scaled(g, x, factor, 1.0f); }

Var upsample_field(Graph& g, Var field, int factor) {
  require(g.value(field).channels() == 3, "upsample_field: expected a 3-channel field");
  return resample_scaled(g, field, factor, static_cast<float>(factor));
}

Var warp(Graph& g, Var x, Var field) {
  const Tensor& xin = g.value(x);
  const Tensor& f = g.value(field);
  require(f.channels() == 3, "warp: field must have 3 channels");
  require_same_dims(xin, f, "warp");
  Tensor y(xin.channels(), xin.dims());
  kernels::warp<float>(xin.values(), xin.channels(), xin.dims(), f.values(), y.values());
  return g.push(std::move(y), g.needs_grad(x) || g.needs_grad(field), [x, field](Graph& gr, Var self) {
    const Tensor& xv = gr.value(x);
    std::span<float> gin = gr.needs_grad(x) ? gr.grad(x) : std::span<float>();
    std::span<float> gf = gr.needs_grad(field) ? gr.grad(field) : std::span<float>();
    kernels::warp_vjp<float>(xv.values(), xv.channels(), xv.dims(), gr.value(field).values(), gr.grad(self), gin,
                             gf);
  });
}

Var compose(Graph& g, Var prev_up, Var delta, CompositionMode mode) {
  const Tensor& p = g.value(prev_up);
  const Tensor& d = g.value(delta);
  require(p.channels() == 3 && d.channels() == 3, "compose: fields must have 3 channels");
  require_same_dims(p, d, "compose");
  Tensor y(3, d.dims());
  auto out = y.values();
  if (mode == CompositionMode::Compose)
    kernels::warp<float>(p.values(), 3, d.dims(), d.values(), out);
  else
    std::copy(p.values().begin(), p.values().end(), out.begin());
  auto dv = d.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dv[i] + out[i];
  const bool needs = g.needs_grad(prev_up) || g.needs_grad(delta);
  return g.push(std::move(y), needs, [prev_up, delta, mode](Graph& gr, Var self) {
    auto gy = gr.grad(self);
    const bool want_p = gr.needs_grad(prev_up), want_d = gr.needs_grad(delta);
    if (want_d) {
      auto gd = gr.grad(delta);
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += gy[i];
    }
    if (mode == CompositionMode::Add) {
      if (want_p) {
        auto gp = gr.grad(prev_up);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[i];
      }
      return;
    }
    const Tensor& pv = gr.value(prev_up);
    kernels::warp_vjp<float>(pv.values(), 3, pv.dims(), gr.value(delta).values(), gy,
                             want_p ? gr.grad(prev_up) : std::span<float>(),
                             want_d ? gr.grad(delta) : std::span<float>());
  });
}

Var global_average(Graph& g, Var x) {
  const Tensor& xin = g.value(x);
  const std::size_t n = xin.dims().count();
  Tensor y(xin.channels(), Dims{1, 1, 1});
  for (int c = 0; c < xin.channels(); ++c) {
    double s = 0.0;
    for (float v : xin.channel(c)) s += v;
    y.values()[c] = static_cast<float>(s / static_cast<double>(n));
  }
  return g.push(std::move(y), g.needs_grad(x), [x](Graph& gr, Var self) {
    const Tensor& xv = gr.value(x);
    const std::size_t nv = xv.dims().count();
    auto gy = gr.grad(self);
    auto gx = gr.grad(x);
    for (int c = 0; c < xv.channels(); ++c) {
      const float share = gy[c] / static_cast<float>(nv);
      for (std::size_t i = 0; i < nv; ++i) gx[c * nv + i] += share;
    }
  });
}

Var channel_statistics(Graph& g, Var x) {
  const Tensor& xin = g.value(x);
  const std::size_t n = xin.dims().count();
  const int channels = xin.channels();
  Tensor y(2, xin.dims());
  auto xs = xin.values();
  auto mean = y.channel(0);
  auto mx = y.channel(1);
  for (std::size_t i = 0; i < n; ++i) {
    mean[i] = 0.0f;
    mx[i] = xs[i];
  }
  for (int c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const float v = xs[c * n + i];
      mean[i] += v;
      mx[i] = std::max(mx[i], v);
    }
  const float inv = 1.0f / static_cast<float>(channels);
  for (std::size_t i = 0; i < n; ++i) mean[i] *= inv;
  return g.push(std::move(y), g.needs_grad(x), [x](Graph& gr, Var self) {
    const Tensor& xv = gr.value(x);
    const std::size_t nv = xv.dims().count();
    const int ch = xv.channels();
    auto xs2 = xv.values();
    auto gy = gr.grad(self);
    auto maxv = gr.value(self).channel(1);
    auto gx = gr.grad(x);
    const float inv2 = 1.0f / static_cast<float>(ch);
    for (std::size_t i = 0; i < nv; ++i) {
      const float gm = gy[i] * inv2;
      for (int c = 0; c < ch; ++c) gx[c * nv + i] += gm;
      for (int c = 0; c < ch; ++c)
        if (xs2[c * nv + i] == maxv[i]) {
          gx[c * nv + i] += gy[nv + i];
          break;
        }
    }
  });
}

Var scale_channels(Graph& g, Var x, Var gates) {
  const Tensor& xin = g.value(x);
  const Tensor& gt = g.value(gates);
  require(gt.channels() == xin.channels() && gt.dims().count() == 1, "scale_channels: gate shape mismatch");
  const std::size_t n = xin.dims().count();
  Tensor y(xin.channels(), xin.dims());
  for (int c = 0; c < xin.channels(); ++c) {
    const float s = gt.values()[c];
    auto src = xin.channel(c);
    auto dst = y.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] * s;
  }
  return g.push(std::move(y), g.needs_grad(x) || g.needs_grad(gates), [x, gates](Graph& gr, Var self) {
    const Tensor& xv = gr.value(x);
    const std::size_t nv = xv.dims().count();
    auto gy = gr.grad(self);
    auto gtv = gr.value(gates).values();
    const bool want_x = gr.needs_grad(x), want_g = gr.needs_grad(gates);
    for (int c = 0; c < xv.channels(); ++c) {
      auto xc = xv.channel(c);
      double acc = 0.0;
      for (std::size_t i = 0; i < nv; ++i) acc += static_cast<double>(gy[c * nv + i]) * xc[i];
      if (want_g) gr.grad(gates)[c] += static_cast<float>(acc);
      if (want_x) {
        auto gx = gr.grad(x);
        for (std::size_t i = 0; i < nv; ++i) gx[c * nv + i] += gy[c * nv + i] * gtv[c];
      }
    }
  });
}

Var scale_spatial(Graph& g, Var x, Var map) {
  const Tensor& xin = g.value(x);
  const Tensor& m = g.value(map);
  require(m.channels() == 1, "scale_spatial: map must have one channel");
  require_same_dims(xin, m, "scale_spatial");
  const std::size_t n = xin.dims().count();
  Tensor y(xin.channels(), xin.dims());
  auto mv = m.values();
  for (int c = 0; c < xin.channels(); ++c) {
    auto src = xin.channel(c);
    auto dst = y.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] * mv[i];
  }
  return g.push(std::move(y), g.needs_grad(x) || g.needs_grad(map), [x, map](Graph& gr, Var self) {
    const Tensor& xv = gr.value(x);
    const std::size_t nv = xv.dims().count();
    auto gy = gr.grad(self);
    auto mv2 = gr.value(map).values();
    const bool want_x = gr.needs_grad(x), want_m = gr.needs_grad(map);
    std::span<float> gm = want_m ? gr.grad(map) : std::span<float>();
    std::span<float> gx = want_x ? gr.grad(x) : std::span<float>();
    for (int c = 0; c < xv.channels(); ++c) {
      auto xc = xv.channel(c);
      for (std::size_t i = 0; i < nv; ++i) {
        const float gyv = gy[c * nv + i];
        if (want_m) gm[i] += gyv * xc[i];
        if (want_x) gx[c * nv + i] += gyv * mv2[i];
      }
    }
  });
}

}  // namespace fusionreg::nn
