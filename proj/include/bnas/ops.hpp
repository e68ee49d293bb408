#pragma once

// Differentiable primitives. Every op validates shapes eagerly, computes the
// forward value, and registers a backward closure on the tape when at least
// one input is attached. Convolution and linear also bump the tape's MAC
// counter so a single forward pass doubles as a cost measurement.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "bnas/tensor.hpp"

namespace bnas {

enum class PoolKind { kMax, kAvg };

namespace detail {

// Output index range [lo, hi] such that o*stride + off stays inside [0, lim).
inline int64_t out_lo(int64_t off, int64_t stride) {
  return off >= 0 ? 0 : (-off + stride - 1) / stride;
}
inline int64_t out_hi(int64_t off, int64_t stride, int64_t lim, int64_t omax) {
  if (lim - 1 < off) return -1;
  return std::min(omax - 1, (lim - 1 - off) / stride);
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad, int64_t dil) {
  return (in + 2 * pad - (dil * (k - 1) + 1)) / stride + 1;
}

struct ConvGeom {
  int64_t N, Cin, H, W, Cout, KH, KW, OH, OW;
  int64_t stride, pad, dil, groups, cpg_in, cpg_out;
};

inline void conv_forward(const float* x, const float* w, float* out, const ConvGeom& g) {
  const int64_t xplane = g.H * g.W, oplane = g.OH * g.OW, kplane = g.KH * g.KW;
  for (int64_t n = 0; n < g.N; ++n)
    for (int64_t oc = 0; oc < g.Cout; ++oc) {
      const int64_t grp = oc / g.cpg_out;
      float* op = out + (n * g.Cout + oc) * oplane;
      for (int64_t icg = 0; icg < g.cpg_in; ++icg) {
        const float* xp = x + (n * g.Cin + grp * g.cpg_in + icg) * xplane;
        const float* wp = w + (oc * g.cpg_in + icg) * kplane;
        for (int64_t kh = 0; kh < g.KH; ++kh) {
          const int64_t hoff = kh * g.dil - g.pad;
          const int64_t oh_lo = out_lo(hoff, g.stride), oh_hi = out_hi(hoff, g.stride, g.H, g.OH);
          for (int64_t kw = 0; kw < g.KW; ++kw) {
            const float wv = wp[kh * g.KW + kw];
            const int64_t woff = kw * g.dil - g.pad;
            const int64_t ow_lo = out_lo(woff, g.stride), ow_hi = out_hi(woff, g.stride, g.W, g.OW);
            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const float* xrow = xp + (oh * g.stride + hoff) * g.W + woff;
              float* orow = op + oh * g.OW;
              for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xrow[ow * g.stride];
            }
          }
        }
      }
    }
}

inline void conv_backward_input(float* dx, const float* w, const float* gout, const ConvGeom& g) {
  const int64_t xplane = g.H * g.W, oplane = g.OH * g.OW, kplane = g.KH * g.KW;
  for (int64_t n = 0; n < g.N; ++n)
    for (int64_t oc = 0; oc < g.Cout; ++oc) {
      const int64_t grp = oc / g.cpg_out;
      const float* gp = gout + (n * g.Cout + oc) * oplane;
      for (int64_t icg = 0; icg < g.cpg_in; ++icg) {
        float* dxp = dx + (n * g.Cin + grp * g.cpg_in + icg) * xplane;
        const float* wp = w + (oc * g.cpg_in + icg) * kplane;
        for (int64_t kh = 0; kh < g.KH; ++kh) {
          const int64_t hoff = kh * g.dil - g.pad;
          const int64_t oh_lo = out_lo(hoff, g.stride), oh_hi = out_hi(hoff, g.stride, g.H, g.OH);
          for (int64_t kw = 0; kw < g.KW; ++kw) {
            const float wv = wp[kh * g.KW + kw];
            const int64_t woff = kw * g.dil - g.pad;
            const int64_t ow_lo = out_lo(woff, g.stride), ow_hi = out_hi(woff, g.stride, g.W, g.OW);
            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              float* dxrow = dxp + (oh * g.stride + hoff) * g.W + woff;
              const float* grow = gp + oh * g.OW;
              for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) dxrow[ow * g.stride] += wv * grow[ow];
            }
          }
        }
      }
    }
}

inline void conv_backward_weight(float* dw, const float* x, const float* gout, const ConvGeom& g) {
  const int64_t xplane = g.H * g.W, oplane = g.OH * g.OW, kplane = g.KH * g.KW;
  for (int64_t n = 0; n < g.N; ++n)
    for (int64_t oc = 0; oc < g.Cout; ++oc) {
      const int64_t grp = oc / g.cpg_out;
      const float* gp = gout + (n * g.Cout + oc) * oplane;
      for (int64_t icg = 0; icg < g.cpg_in; ++icg) {
        const float* xp = x + (n * g.Cin + grp * g.cpg_in + icg) * xplane;
        float* dwp = dw + (oc * g.cpg_in + icg) * kplane;
        for (int64_t kh = 0; kh < g.KH; ++kh) {
          const int64_t hoff = kh * g.dil - g.pad;
          const int64_t oh_lo = out_lo(hoff, g.stride), oh_hi = out_hi(hoff, g.stride, g.H, g.OH);
          for (int64_t kw = 0; kw < g.KW; ++kw) {
            const int64_t woff = kw * g.dil - g.pad;
            const int64_t ow_lo = out_lo(woff, g.stride), ow_hi = out_hi(woff, g.stride, g.W, g.OW);
            float acc = 0.f;
            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const float* xrow = xp + (oh * g.stride + hoff) * g.W + woff;
              const float* grow = gp + oh * g.OW;
              for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) acc += grow[ow] * xrow[ow * g.stride];
            }
            dwp[kh * g.KW + kw] += acc;
          }
        }
      }
    }
}

}  // namespace detail

// Grouped 2d convolution, no bias. Weight layout (out_ch, in_ch/groups, kh, kw).
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, int stride, int padding, int dilation = 1,
                     int groups = 1) {
  if (stride < 1 || dilation < 1 || groups < 1 || padding < 0)
    throw value_error("conv2d: stride/dilation/groups must be >= 1 and padding >= 0");
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.c % groups != 0 || ws.n % groups != 0)
    throw shape_error("conv2d: channels " + std::to_string(xs.c) + "->" + std::to_string(ws.n) +
                      " not divisible by groups=" + std::to_string(groups));
  if (ws.c != xs.c / groups)
    throw shape_error("conv2d: weight expects " + std::to_string(ws.c * groups) + " input channels, got " +
                      to_string(xs));
  const int64_t oh = detail::conv_out_dim(xs.h, ws.h, stride, padding, dilation);
  const int64_t ow = detail::conv_out_dim(xs.w, ws.w, stride, padding, dilation);
  if (oh < 1 || ow < 1)
    throw shape_error("conv2d: kernel " + to_string(ws) + " does not fit padded input " + to_string(xs));

  detail::ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, ws.w, oh, ow,
                     stride, padding, dilation, groups, xs.c / groups, ws.n / groups};
  Tensor out(Shape{xs.n, ws.n, oh, ow});
  detail::conv_forward(x.values().data(), w.values().data(), out.values().data(), g);
  tape.add_macs(static_cast<uint64_t>(g.N * g.Cout * oh * ow) * static_cast<uint64_t>(g.cpg_in * ws.h * ws.w));

  const int xn = x.node(), wn = w.node();
  if (xn < 0 && wn < 0) return out;
  std::vector<int> parents;
  if (xn >= 0) parents.push_back(xn);
  if (wn >= 0) parents.push_back(wn);
  auto xv = x.storage();
  auto wv = w.storage();
  return tape.emit(std::move(out), std::move(parents), [=](Tape& t, const Tape::Grad& gout) {
    if (xn >= 0) detail::conv_backward_input(t.grad_of(xn).data(), wv->data(), gout.data(), g);
    if (wn >= 0) detail::conv_backward_weight(t.grad_of(wn).data(), xv->data(), gout.data(), g);
  });
}

// Max / average pooling. Average excludes padding from the divisor; max
// ignores padded cells and routes gradient to the first maximum found.
inline Tensor pool2d(Tape& tape, const Tensor& x, PoolKind kind, int kernel, int stride, int padding) {
  if (kernel < 1 || stride < 1 || padding < 0) throw value_error("pool2d: kernel/stride must be >= 1, padding >= 0");
  if (padding > kernel / 2) throw value_error("pool2d: padding must be at most kernel/2");
  const Shape xs = x.shape();
  const int64_t oh = (xs.h + 2 * padding - kernel) / stride + 1;
  const int64_t ow = (xs.w + 2 * padding - kernel) / stride + 1;
  if (oh < 1 || ow < 1) throw shape_error("pool2d: window does not fit input " + to_string(xs));

  Tensor out(Shape{xs.n, xs.c, oh, ow});
  const float* xp = x.values().data();
  float* op = out.values().data();
  const int64_t planes = xs.n * xs.c, xplane = xs.h * xs.w, oplane = oh * ow;

  std::vector<int64_t> argmax;
  if (kind == PoolKind::kMax) argmax.assign(static_cast<size_t>(planes * oplane), -1);

  for (int64_t pl = 0; pl < planes; ++pl) {
    const float* xpl = xp + pl * xplane;
    float* opl = op + pl * oplane;
    for (int64_t r = 0; r < oh; ++r)
      for (int64_t q = 0; q < ow; ++q) {
        const int64_t h0 = r * stride - padding, w0 = q * stride - padding;
        if (kind == PoolKind::kMax) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t bi = -1;
          for (int64_t kh = 0; kh < kernel; ++kh) {
            const int64_t ih = h0 + kh;
            if (ih < 0 || ih >= xs.h) continue;
            for (int64_t kw = 0; kw < kernel; ++kw) {
              const int64_t iw = w0 + kw;
              if (iw < 0 || iw >= xs.w) continue;
              const float v = xpl[ih * xs.w + iw];
              if (v > best) {
                best = v;
                bi = ih * xs.w + iw;
              }
            }
          }
          opl[r * ow + q] = best;
          argmax[static_cast<size_t>(pl * oplane + r * ow + q)] = bi;
        } else {
          float sum = 0.f;
          int64_t cnt = 0;
          for (int64_t kh = 0; kh < kernel; ++kh) {
            const int64_t ih = h0 + kh;
            if (ih < 0 || ih >= xs.h) continue;
            for (int64_t kw = 0; kw < kernel; ++kw) {
              const int64_t iw = w0 + kw;
              if (iw < 0 || iw >= xs.w) continue;
              sum += xpl[ih * xs.w + iw];
              ++cnt;
            }
          }
          opl[r * ow + q] = sum / static_cast<float>(cnt);
        }
      }
  }

  const int xn = x.node();
  if (xn < 0) return out;
  if (kind == PoolKind::kMax) {
    return tape.emit(std::move(out), {xn},
                     [xn, planes, xplane, oplane, am = std::move(argmax)](Tape& t, const Tape::Grad& gout) {
                       float* dx = t.grad_of(xn).data();
                       for (int64_t pl = 0; pl < planes; ++pl)
                         for (int64_t i = 0; i < oplane; ++i) {
                           const int64_t bi = am[static_cast<size_t>(pl * oplane + i)];
                           if (bi >= 0) dx[pl * xplane + bi] += gout[static_cast<size_t>(pl * oplane + i)];
                         }
                     });
  }
  const int64_t H = xs.h, W = xs.w;
  return tape.emit(std::move(out), {xn},
                   [xn, planes, xplane, oplane, oh, ow, H, W, kernel, stride, padding](Tape& t, const Tape::Grad& gout) {
                     float* dx = t.grad_of(xn).data();
                     for (int64_t pl = 0; pl < planes; ++pl)
                       for (int64_t r = 0; r < oh; ++r)
                         for (int64_t q = 0; q < ow; ++q) {
                           const int64_t h0 = r * stride - padding, w0 = q * stride - padding;
                           const int64_t hl = std::max<int64_t>(0, h0), hh = std::min<int64_t>(H, h0 + kernel);
                           const int64_t wl = std::max<int64_t>(0, w0), wh = std::min<int64_t>(W, w0 + kernel);
                           const float share = gout[static_cast<size_t>(pl * oplane + r * ow + q)] /
                                               static_cast<float>((hh - hl) * (wh - wl));
                           for (int64_t ih = hl; ih < hh; ++ih)
                             for (int64_t iw = wl; iw < wh; ++iw) dx[pl * xplane + ih * W + iw] += share;
                         }
                   });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.f ? xv[i] : 0.f;
  const int xn = x.node();
  if (xn < 0) return out;
  auto xs = x.storage();
  return tape.emit(std::move(out), {xn}, [xn, xs](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    const auto& v = *xs;
    for (size_t i = 0; i < gout.size(); ++i)
      if (v[i] > 0.f) dx[i] += gout[i];
  });
}

// Batch normalization over (N, H, W) per channel. Training mode uses biased
// batch variance and folds it into the running estimates with the given
// momentum; eval mode normalizes by the running estimates. gamma/beta are
// (1, C, 1, 1) parameter tensors.
inline Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::vector<float>& running_mean, std::vector<float>& running_var, bool training,
                         float momentum = 0.1f, float eps = 1e-5f) {
  const Shape xs = x.shape();
  const int64_t C = xs.c, m = xs.n * xs.h * xs.w;
  if (gamma.numel() != C || beta.numel() != C)
    throw shape_error("batch_norm: gamma/beta must have " + std::to_string(C) + " elements");
  if (static_cast<int64_t>(running_mean.size()) != C || static_cast<int64_t>(running_var.size()) != C)
    throw shape_error("batch_norm: running stats must have " + std::to_string(C) + " elements");
  if (training && m < 2) throw value_error("batch_norm: need at least 2 values per channel in training mode");

  const float* xp = x.values().data();
  const int64_t plane = xs.h * xs.w;

  std::vector<float> mean(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t n = 0; n < xs.n; ++n) {
        const float* p = xp + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double sq = 0.0;
      for (int64_t n = 0; n < xs.n; ++n) {
        const float* p = xp + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean[static_cast<size_t>(c)] = static_cast<float>(mu);
      inv_std[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
      running_mean[static_cast<size_t>(c)] =
          (1.f - momentum) * running_mean[static_cast<size_t>(c)] + momentum * static_cast<float>(mu);
      running_var[static_cast<size_t>(c)] =
          (1.f - momentum) * running_var[static_cast<size_t>(c)] + momentum * static_cast<float>(var);
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = running_mean[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = 1.f / std::sqrt(running_var[static_cast<size_t>(c)] + eps);
    }
  }

  Tensor out(xs);
  std::vector<float> xhat(x.values().size());
  const float* gm = gamma.values().data();
  const float* bt = beta.values().data();
  float* op = out.values().data();
  for (int64_t n = 0; n < xs.n; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float mu = mean[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
      const float gc = gm[c], bc = bt[c];
      const float* p = xp + (n * C + c) * plane;
      float* o = op + (n * C + c) * plane;
      float* h = xhat.data() + (n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        h[i] = (p[i] - mu) * is;
        o[i] = gc * h[i] + bc;
      }
    }

  const int xn = x.node(), gn = gamma.node(), bn = beta.node();
  if (xn < 0 && gn < 0 && bn < 0) return out;
  std::vector<int> parents;
  for (int nid : {xn, gn, bn})
    if (nid >= 0) parents.push_back(nid);
  auto gs = gamma.storage();
  return tape.emit(std::move(out), std::move(parents),
                   [xn, gn, bn, xs, C, m, plane, training, gs, hs = std::move(xhat),
                    is = std::move(inv_std)](Tape& t, const Tape::Grad& gout) {
                     for (int64_t c = 0; c < C; ++c) {
                       double sum_g = 0.0, sum_gh = 0.0;
                       for (int64_t n = 0; n < xs.n; ++n) {
                         const int64_t base = (n * C + c) * plane;
                         for (int64_t i = 0; i < plane; ++i) {
                           const double g = gout[static_cast<size_t>(base + i)];
                           sum_g += g;
                           sum_gh += g * hs[static_cast<size_t>(base + i)];
                         }
                       }
                       if (gn >= 0) t.grad_of(gn)[static_cast<size_t>(c)] += static_cast<float>(sum_gh);
                       if (bn >= 0) t.grad_of(bn)[static_cast<size_t>(c)] += static_cast<float>(sum_g);
                       if (xn >= 0) {
                         float* dx = t.grad_of(xn).data();
                         const float k = (*gs)[static_cast<size_t>(c)] * is[static_cast<size_t>(c)];
                         if (training) {
                           const float mg = static_cast<float>(sum_g / static_cast<double>(m));
                           const float mgh = static_cast<float>(sum_gh / static_cast<double>(m));
                           for (int64_t n = 0; n < xs.n; ++n) {
                             const int64_t base = (n * C + c) * plane;
                             for (int64_t i = 0; i < plane; ++i)
                               dx[base + i] += k * (gout[static_cast<size_t>(base + i)] - mg -
                                                    hs[static_cast<size_t>(base + i)] * mgh);
                           }
                         } else {
                           for (int64_t n = 0; n < xs.n; ++n) {
                             const int64_t base = (n * C + c) * plane;
                             for (int64_t i = 0; i < plane; ++i) dx[base + i] += k * gout[static_cast<size_t>(base + i)];
                           }
                         }
                       }
                     }
                   });
}

// Fully connected layer on flattened (C*H*W) features. Weight (out, in, 1, 1),
// optional bias (1, out, 1, 1). Output (N, out, 1, 1).
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr) {
  const Shape xs = x.shape(), ws = weight.shape();
  const int64_t in = xs.c * xs.h * xs.w, out_dim = ws.n;
  if (ws.c != in || ws.h != 1 || ws.w != 1)
    throw shape_error("linear: weight " + to_string(ws) + " does not match input features " + std::to_string(in));
  if (bias && bias->numel() != out_dim) throw shape_error("linear: bias size mismatch");

  Tensor out(Shape{xs.n, out_dim, 1, 1});
  const float* xp = x.values().data();
  const float* wp = weight.values().data();
  float* op = out.values().data();
  for (int64_t b = 0; b < xs.n; ++b)
    for (int64_t o = 0; o < out_dim; ++o) {
      const float* xr = xp + b * in;
      const float* wr = wp + o * in;
      float acc = bias ? bias->values()[static_cast<size_t>(o)] : 0.f;
      for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      op[b * out_dim + o] = acc;
    }
  tape.add_macs(static_cast<uint64_t>(xs.n * out_dim * in));

  const int xnode = x.node(), wnode = weight.node(), bnode = bias ? bias->node() : -1;
  if (xnode < 0 && wnode < 0 && bnode < 0) return out;
  std::vector<int> parents;
  for (int nid : {xnode, wnode, bnode})
    if (nid >= 0) parents.push_back(nid);
  auto xv = x.storage();
  auto wv = weight.storage();
  const int64_t B = xs.n;
  return tape.emit(std::move(out), std::move(parents),
                   [xnode, wnode, bnode, xv, wv, B, in, out_dim](Tape& t, const Tape::Grad& gout) {
                     if (xnode >= 0) {
                       float* dx = t.grad_of(xnode).data();
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t o = 0; o < out_dim; ++o) {
                           const float g = gout[static_cast<size_t>(b * out_dim + o)];
                           const float* wr = wv->data() + o * in;
                           float* dxr = dx + b * in;
                           for (int64_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
                         }
                     }
                     if (wnode >= 0) {
                       float* dw = t.grad_of(wnode).data();
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t o = 0; o < out_dim; ++o) {
                           const float g = gout[static_cast<size_t>(b * out_dim + o)];
                           const float* xr = xv->data() + b * in;
                           float* dwr = dw + o * in;
                           for (int64_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
                         }
                     }
                     if (bnode >= 0) {
                       float* db = t.grad_of(bnode).data();
                       for (int64_t b = 0; b < B; ++b)
                         for (int64_t o = 0; o < out_dim; ++o) db[o] += gout[static_cast<size_t>(b * out_dim + o)];
                     }
                   });
}

// Concatenates along the channel axis. All parts must agree on batch and
// spatial dimensions.
inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw value_error("concat_channels: empty part list");
  const Shape first = parts[0].shape();
  int64_t total_c = 0;
  for (const Tensor& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw shape_error("concat_channels: part " + to_string(s) + " does not align with " + to_string(first));
    total_c += s.c;
  }
  Tensor out(Shape{first.n, total_c, first.h, first.w});
  const int64_t plane = first.h * first.w;
  float* op = out.values().data();
  int64_t coff = 0;
  std::vector<int> nodes;
  std::vector<int64_t> offs, chans;
  bool any = false;
  for (const Tensor& p : parts) {
    const int64_t pc = p.shape().c;
    const float* pp = p.values().data();
    for (int64_t n = 0; n < first.n; ++n)
      std::copy(pp + n * pc * plane, pp + (n + 1) * pc * plane, op + (n * total_c + coff) * plane);
    nodes.push_back(p.node());
    offs.push_back(coff);
    chans.push_back(pc);
    any = any || p.on_tape();
    coff += pc;
  }
  if (!any) return out;
  std::vector<int> parents;
  for (int nid : nodes)
    if (nid >= 0) parents.push_back(nid);
  const int64_t N = first.n;
  return tape.emit(std::move(out), std::move(parents),
                   [nodes, offs, chans, N, plane, total_c](Tape& t, const Tape::Grad& gout) {
                     for (size_t k = 0; k < nodes.size(); ++k) {
                       if (nodes[k] < 0) continue;
                       float* dp = t.grad_of(nodes[k]).data();
                       const int64_t pc = chans[k], coff = offs[k];
                       for (int64_t n = 0; n < N; ++n) {
                         const float* gsrc = gout.data() + (n * total_c + coff) * plane;
                         float* dst = dp + n * pc * plane;
                         for (int64_t i = 0; i < pc * plane; ++i) dst[i] += gsrc[i];
                       }
                     }
                   });
}

// Copies channels [c0, c1) into a new tensor.
inline Tensor slice_channels(Tape& tape, const Tensor& x, int64_t c0, int64_t c1) {
  const Shape xs = x.shape();
  if (c0 < 0 || c1 <= c0 || c1 > xs.c)
    throw value_error("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") invalid for " + to_string(xs));
  const int64_t pc = c1 - c0, plane = xs.h * xs.w;
  Tensor out(Shape{xs.n, pc, xs.h, xs.w});
  const float* xp = x.values().data();
  float* op = out.values().data();
  for (int64_t n = 0; n < xs.n; ++n)
    std::copy(xp + (n * xs.c + c0) * plane, xp + (n * xs.c + c1) * plane, op + n * pc * plane);
  const int xn = x.node();
  if (xn < 0) return out;
  const int64_t N = xs.n, C = xs.c;
  return tape.emit(std::move(out), {xn}, [xn, N, C, c0, pc, plane](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    for (int64_t n = 0; n < N; ++n) {
      const float* gsrc = gout.data() + n * pc * plane;
      float* dst = dx + (n * C + c0) * plane;
      for (int64_t i = 0; i < pc * plane; ++i) dst[i] += gsrc[i];
    }
  });
}

// Drops the first dh rows and dw columns (the pixel-shift feeding the second
// path of a factorized reduction).
inline Tensor crop_spatial(Tape& tape, const Tensor& x, int64_t dh, int64_t dw) {
  const Shape xs = x.shape();
  if (dh < 0 || dw < 0 || dh >= xs.h || dw >= xs.w)
    throw value_error("crop_spatial: offset (" + std::to_string(dh) + "," + std::to_string(dw) +
                      ") invalid for " + to_string(xs));
  const int64_t oh = xs.h - dh, ow = xs.w - dw, planes = xs.n * xs.c;
  Tensor out(Shape{xs.n, xs.c, oh, ow});
  const float* xp = x.values().data();
  float* op = out.values().data();
  for (int64_t pl = 0; pl < planes; ++pl)
    for (int64_t r = 0; r < oh; ++r)
      std::copy(xp + pl * xs.h * xs.w + (r + dh) * xs.w + dw, xp + pl * xs.h * xs.w + (r + dh) * xs.w + dw + ow,
                op + pl * oh * ow + r * ow);
  const int xn = x.node();
  if (xn < 0) return out;
  const int64_t H = xs.h, W = xs.w;
  return tape.emit(std::move(out), {xn}, [xn, planes, H, W, dh, dw, oh, ow](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    for (int64_t pl = 0; pl < planes; ++pl)
      for (int64_t r = 0; r < oh; ++r) {
        const float* gsrc = gout.data() + pl * oh * ow + r * ow;
        float* dst = dx + pl * H * W + (r + dh) * W + dw;
        for (int64_t q = 0; q < ow; ++q) dst[q] += gsrc[q];
      }
  });
}

inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  const Shape xs = x.shape();
  const int64_t plane = xs.h * xs.w, planes = xs.n * xs.c;
  Tensor out(Shape{xs.n, xs.c, 1, 1});
  const float* xp = x.values().data();
  float* op = out.values().data();
  for (int64_t pl = 0; pl < planes; ++pl) {
    double s = 0.0;
    const float* p = xp + pl * plane;
    for (int64_t i = 0; i < plane; ++i) s += p[i];
    op[pl] = static_cast<float>(s / static_cast<double>(plane));
  }
  const int xn = x.node();
  if (xn < 0) return out;
  return tape.emit(std::move(out), {xn}, [xn, planes, plane](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    for (int64_t pl = 0; pl < planes; ++pl) {
      const float share = gout[static_cast<size_t>(pl)] / static_cast<float>(plane);
      float* p = dx + pl * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] += share;
    }
  });
}

// Softmax over all elements of the tensor (used for architecture weight
// vectors). Max-subtracted for stability.
inline Tensor softmax_all(Tape& tape, const Tensor& x) {
  const auto& xv = x.values();
  if (xv.empty()) throw value_error("softmax_all: empty tensor");
  Tensor out(x.shape());
  auto& ov = out.values();
  float mx = xv[0];
  for (float v : xv) mx = std::max(mx, v);
  double denom = 0.0;
  for (size_t i = 0; i < xv.size(); ++i) {
    const double e = std::exp(static_cast<double>(xv[i]) - mx);
    ov[i] = static_cast<float>(e);
    denom += e;
  }
  for (auto& v : ov) v = static_cast<float>(v / denom);
  const int xn = x.node();
  if (xn < 0) return out;
  auto os = out.storage();
  return tape.emit(std::move(out), {xn}, [xn, os](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    const auto& s = *os;
    double dot = 0.0;
    for (size_t i = 0; i < s.size(); ++i) dot += static_cast<double>(gout[i]) * s[i];
    for (size_t i = 0; i < s.size(); ++i) dx[i] += s[i] * static_cast<float>(gout[i] - dot);
  });
}

// out = sum_j weights[j] * parts[j], with weights a small attached vector
// (numel == parts.size()). The weighted mixture behind both op selection and
// edge aggregation.
inline Tensor weighted_sum(Tape& tape, const std::vector<Tensor>& parts, const Tensor& weights) {
  if (parts.empty()) throw value_error("weighted_sum: empty part list");
  if (weights.numel() != static_cast<int64_t>(parts.size()))
    throw shape_error("weighted_sum: weight count " + std::to_string(weights.numel()) + " != parts " +
                      std::to_string(parts.size()));
  const Shape s = parts[0].shape();
  for (const Tensor& p : parts)
    if (!(p.shape() == s)) throw shape_error("weighted_sum: part shapes differ");

  Tensor out(s);
  auto& ov = out.values();
  const auto& wv = weights.values();
  for (size_t j = 0; j < parts.size(); ++j) {
    const auto& pv = parts[j].values();
    const float w = wv[j];
    for (size_t i = 0; i < ov.size(); ++i) ov[i] += w * pv[i];
  }

  std::vector<int> nodes(parts.size());
  bool any = weights.on_tape();
  std::vector<std::shared_ptr<std::vector<float>>> stor(parts.size());
  for (size_t j = 0; j < parts.size(); ++j) {
    nodes[j] = parts[j].node();
    stor[j] = parts[j].storage();
    any = any || parts[j].on_tape();
  }
  if (!any) return out;
  std::vector<int> parents;
  for (int nid : nodes)
    if (nid >= 0) parents.push_back(nid);
  const int wnode = weights.node();
  if (wnode >= 0) parents.push_back(wnode);
  auto ws = weights.storage();
  return tape.emit(std::move(out), std::move(parents), [nodes, stor, wnode, ws](Tape& t, const Tape::Grad& gout) {
    for (size_t j = 0; j < nodes.size(); ++j) {
      if (nodes[j] >= 0) {
        float* dp = t.grad_of(nodes[j]).data();
        const float w = (*ws)[j];
        for (size_t i = 0; i < gout.size(); ++i) dp[i] += w * gout[i];
      }
      if (wnode >= 0) {
        const auto& pv = *stor[j];
        double dot = 0.0;
        for (size_t i = 0; i < gout.size(); ++i) dot += static_cast<double>(gout[i]) * pv[i];
        t.grad_of(wnode)[j] += static_cast<float>(dot);
      }
    }
  });
}

// out = s[idx] * x; the per-candidate scaling used when differently shaped
// branches are concatenated rather than summed.
inline Tensor scale_by_element(Tape& tape, const Tensor& x, const Tensor& s, int64_t idx) {
  if (idx < 0 || idx >= s.numel()) throw value_error("scale_by_element: index out of range");
  const float w = s.values()[static_cast<size_t>(idx)];
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = w * xv[i];
  const int xn = x.node(), sn = s.node();
  if (xn < 0 && sn < 0) return out;
  std::vector<int> parents;
  if (xn >= 0) parents.push_back(xn);
  if (sn >= 0) parents.push_back(sn);
  auto xs = x.storage();
  return tape.emit(std::move(out), std::move(parents), [xn, sn, w, xs, idx](Tape& t, const Tape::Grad& gout) {
    if (xn >= 0) {
      float* dx = t.grad_of(xn).data();
      for (size_t i = 0; i < gout.size(); ++i) dx[i] += w * gout[i];
    }
    if (sn >= 0) {
      const auto& v = *xs;
      double dot = 0.0;
      for (size_t i = 0; i < gout.size(); ++i) dot += static_cast<double>(gout[i]) * v[i];
      t.grad_of(sn)[static_cast<size_t>(idx)] += static_cast<float>(dot);
    }
  });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw shape_error("add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  const int an = a.node(), bn = b.node();
  if (an < 0 && bn < 0) return out;
  std::vector<int> parents;
  if (an >= 0) parents.push_back(an);
  if (bn >= 0) parents.push_back(bn);
  return tape.emit(std::move(out), std::move(parents), [an, bn](Tape& t, const Tape::Grad& gout) {
    for (int nid : {an, bn}) {
      if (nid < 0) continue;
      float* d = t.grad_of(nid).data();
      for (size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
    }
  });
}

inline Tensor scale_const(Tape& tape, const Tensor& x, float a) {
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = a * xv[i];
  const int xn = x.node();
  if (xn < 0) return out;
  return tape.emit(std::move(out), {xn}, [xn, a](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    for (size_t i = 0; i < gout.size(); ++i) dx[i] += a * gout[i];
  });
}

// Elementwise product with a fixed coefficient vector (no gradient into r).
inline Tensor mul_const(Tape& tape, const Tensor& x, std::vector<float> r) {
  if (static_cast<int64_t>(r.size()) != x.numel()) throw shape_error("mul_const: coefficient size mismatch");
  Tensor out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = r[i] * xv[i];
  const int xn = x.node();
  if (xn < 0) return out;
  return tape.emit(std::move(out), {xn}, [xn, rc = std::move(r)](Tape& t, const Tape::Grad& gout) {
    float* dx = t.grad_of(xn).data();
    for (size_t i = 0; i < gout.size(); ++i) dx[i] += rc[i] * gout[i];
  });
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  Tensor out(Shape{1, 1, 1, 1});
  double s = 0.0;
  for (float v : x.values()) s += v;
  out.values()[0] = static_cast<float>(s);
  const int xn = x.node();
  if (xn < 0) return out;
  return tape.emit(std::move(out), {xn}, [xn](Tape& t, const Tape::Grad& gout) {
    auto& buf = t.grad_of(xn);
    const float g = gout[0];
    for (float& v : buf) v += g;
  });
}

// Mean cross-entropy between logits (N, C, 1, 1) and integer labels.
// Log-sum-exp is max-subtracted so logits up to +/-1e4 stay finite.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  const Shape ls = logits.shape();
  if (ls.h != 1 || ls.w != 1) throw shape_error("softmax_cross_entropy: logits must be (N, C, 1, 1)");
  if (static_cast<int64_t>(labels.size()) != ls.n)
    throw value_error("softmax_cross_entropy: expected " + std::to_string(ls.n) + " labels, got " +
                      std::to_string(labels.size()));
  const int64_t B = ls.n, C = ls.c;
  const float* lp = logits.values().data();
  std::vector<float> probs(static_cast<size_t>(B * C));
  double total = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= C)
      throw value_error("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
    const float* row = lp + b * C;
    float mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = std::log(denom) + mx;
    total += lse - row[y];
    for (int64_t c = 0; c < C; ++c)
      probs[static_cast<size_t>(b * C + c)] = static_cast<float>(std::exp(static_cast<double>(row[c]) - lse));
  }
  Tensor out(Shape{1, 1, 1, 1});
  out.values()[0] = static_cast<float>(total / static_cast<double>(B));
  const int ln = logits.node();
  if (ln < 0) return out;
  return tape.emit(std::move(out), {ln}, [ln, B, C, labels, pr = std::move(probs)](Tape& t, const Tape::Grad& gout) {
    float* dl = t.grad_of(ln).data();
    const float g = gout[0] / static_cast<float>(B);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        float v = pr[static_cast<size_t>(b * C + c)];
        if (c == labels[static_cast<size_t>(b)]) v -= 1.f;
        dl[b * C + c] += g * v;
      }
  });
}

}  // namespace bnas
