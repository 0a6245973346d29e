#pragma once

// Differentiable operations over Tensor. Image-like tensors use NCHW layout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fedalign/tensor.hpp"

namespace fedalign {

namespace detail {

inline std::vector<double>* grad_of(Node& self, std::size_t i) {
    auto& parent = *self.parents[i];
    return parent.requires_grad ? &parent.ensure_grad() : nullptr;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    require(t.rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(t.shape()));
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = detail::grad_of(self, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = detail::grad_of(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        }
        if (auto* g = detail::grad_of(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
    return make_op(a.shape(), std::move(out), {a}, [c](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c * self.grad[i];
        }
    });
}

inline Tensor square(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * av[i] * self.grad[i];
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (av[i] > 0.0) (*g)[i] += self.grad[i];
            }
        }
    });
}

inline Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
            }
        }
    });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_op({1}, {s}, {a}, [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (auto& x : *g) x += self.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& a) {
    require(a.numel() > 0, "mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Weighted sum of scalars, w0*a + w1*b.
inline Tensor combine(const Tensor& a, double wa, const Tensor& b, double wb) {
    return add(scale(a, wa), scale(b, wb));
}

// ---------------------------------------------------------------- shapes

inline Tensor reshape(const Tensor& a, Shape shape) {
    require(numel(shape) == a.numel(), "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

/// Leading `length` entries along `axis` (prefix slice used for width pruning).
inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t length) {
    require(axis < a.rank(), "narrow: axis out of range");
    require(length >= 1 && length <= a.dim(axis),
            "narrow: length " + std::to_string(length) + " invalid for axis of size " + std::to_string(a.dim(axis)));
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::size_t full = a.dim(axis);
    Shape shape = a.shape();
    shape[axis] = length;
    std::vector<double> out(outer * length * inner);
    const auto av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * full * inner), length * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
    }
    return make_op(std::move(shape), std::move(out), {a}, [outer, inner, full, length](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t j = 0; j < length * inner; ++j) {
                    (*g)[o * full * inner + j] += self.grad[o * length * inner + j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
        }
    });
}

/// Concatenate two (B, n) and (B, m) matrices into (B, n + m).
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "concat_cols");
    detail::require_rank(b, 2, "concat_cols");
    require(a.dim(0) == b.dim(0), "concat_cols: row count mismatch");
    const std::size_t rows = a.dim(0), na = a.dim(1), nb = b.dim(1);
    std::vector<double> out(rows * (na + nb));
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < na; ++j) out[r * (na + nb) + j] = a.values()[r * na + j];
        for (std::size_t j = 0; j < nb; ++j) out[r * (na + nb) + na + j] = b.values()[r * nb + j];
    }
    return make_op({rows, na + nb}, std::move(out), {a, b}, [rows, na, nb](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < na; ++j) (*g)[r * na + j] += self.grad[r * (na + nb) + j];
        }
        if (auto* g = detail::grad_of(self, 1)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < nb; ++j) (*g)[r * nb + j] += self.grad[r * (na + nb) + na + j];
        }
    });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    require(a.dim(1) == b.dim(0), "matmul: inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
        }
    detail::mac_counter += m * k * n;
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += self.grad[i * n + j] * bv[p * n + j];
                    (*g)[i * k + p] += acc;
                }
        }
        if (auto* g = detail::grad_of(self, 1)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) (*g)[p * n + j] += x * self.grad[i * n + j];
                }
        }
    });
}

/// Dense layer: x (B, in), weight (out, in), bias (out) -> (B, out).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(weight, 2, "linear");
    require(x.dim(1) == weight.dim(1),
            "linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
    require(bias.numel() == weight.dim(0), "linear: bias size mismatch");
    const std::size_t batch = x.dim(0), in = x.dim(1), outn = weight.dim(0);
    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();
    std::vector<double> out(batch * outn);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < outn; ++o) {
            double acc = bv[o];
            for (std::size_t i = 0; i < in; ++i) acc += wv[o * in + i] * xv[b * in + i];
            out[b * outn + o] = acc;
        }
    detail::mac_counter += batch * in * outn;
    return make_op({batch, outn}, std::move(out), {x, weight, bias}, [batch, in, outn](detail::Node& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        auto* gx = detail::grad_of(self, 0);
        auto* gw = detail::grad_of(self, 1);
        auto* gb = detail::grad_of(self, 2);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < outn; ++o) {
                const double d = self.grad[b * outn + o];
                if (d == 0.0) continue;
                if (gb) (*gb)[o] += d;
                if (gw)
                    for (std::size_t i = 0; i < in; ++i) (*gw)[o * in + i] += d * xv[b * in + i];
                if (gx)
                    for (std::size_t i = 0; i < in; ++i) (*gx)[b * in + i] += d * wv[o * in + i];
            }
    });
}

/// 2-D convolution, x (B, C, H, W), weight (O, C, k, k), bias (O).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    require(stride >= 1, "conv2d: stride must be positive");
    require(x.dim(1) == weight.dim(1),
            "conv2d: input " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
    require(weight.dim(2) == weight.dim(3), "conv2d: square kernels only");
    require(bias.numel() == weight.dim(0), "conv2d: bias size mismatch");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = weight.dim(0), K = weight.dim(2);
    require(H + 2 * pad >= K && W + 2 * pad >= K, "conv2d: kernel larger than padded input");
    const std::size_t OH = (H + 2 * pad - K) / stride + 1;
    const std::size_t OW = (W + 2 * pad - K) / stride + 1;

    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();
    std::vector<double> out(B * O * OH * OW);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
            double* dst = &out[((b * O + o) * OH) * OW];
            std::fill_n(dst, OH * OW, bv[o]);
            for (std::size_t c = 0; c < C; ++c) {
                const double* src = &xv[((b * C + c) * H) * W];
                for (std::size_t ky = 0; ky < K; ++ky)
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const double w = wv[((o * C + c) * K + ky) * K + kx];
                        for (std::size_t oy = 0; oy < OH; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t ox = 0; ox < OW; ++ox) {
                                const auto ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                dst[oy * OW + ox] += w * src[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)];
                            }
                        }
                    }
            }
        }
    detail::mac_counter += B * O * C * K * K * OH * OW;

    return make_op({B, O, OH, OW}, std::move(out), {x, weight, bias},
                   [=](detail::Node& self) {
                       const auto& xv = self.parents[0]->value;
                       const auto& wv = self.parents[1]->value;
                       auto* gx = detail::grad_of(self, 0);
                       auto* gw = detail::grad_of(self, 1);
                       auto* gb = detail::grad_of(self, 2);
                       for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t o = 0; o < O; ++o) {
                               const double* dout = &self.grad[((b * O + o) * OH) * OW];
                               if (gb)
                                   for (std::size_t i = 0; i < OH * OW; ++i) (*gb)[o] += dout[i];
                               for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t xbase = ((b * C + c) * H) * W;
                                   for (std::size_t ky = 0; ky < K; ++ky)
                                       for (std::size_t kx = 0; kx < K; ++kx) {
                                           const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                                           const double w = wv[widx];
                                           double wacc = 0.0;
                                           for (std::size_t oy = 0; oy < OH; ++oy) {
                                               const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                               static_cast<std::ptrdiff_t>(pad);
                                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                               for (std::size_t ox = 0; ox < OW; ++ox) {
                                                   const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                                   static_cast<std::ptrdiff_t>(pad);
                                                   if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                                   const std::size_t xi = xbase + static_cast<std::size_t>(iy) * W +
                                                                          static_cast<std::size_t>(ix);
                                                   const double d = dout[oy * OW + ox];
                                                   wacc += d * xv[xi];
                                                   if (gx) (*gx)[xi] += d * w;
                                               }
                                           }
                                           if (gw) (*gw)[widx] += wacc;
                                       }
                               }
                           }
                   });
}

// ---------------------------------------------------------------- normalization and pooling

/// Per-sample normalization over channel groups with a per-channel affine map.
/// Keeps no running statistics.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                         double eps = 1e-5) {
    detail::require_rank(x, 4, "group_norm");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require(groups >= 1 && C % groups == 0,
            "group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
    require(gamma.numel() == C && beta.numel() == C, "group_norm: affine parameters must have one entry per channel");
    const std::size_t per = (C / groups) * HW;
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(B * groups);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (b * groups + g) * per;
            double mu = 0.0;
            for (std::size_t i = 0; i < per; ++i) mu += xv[base + i];
            mu /= static_cast<double>(per);
            double var = 0.0;
            for (std::size_t i = 0; i < per; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
            var /= static_cast<double>(per);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[b * groups + g] = is;
            for (std::size_t i = 0; i < per; ++i) {
                const std::size_t idx = base + i;
                const std::size_t c = (idx / HW) % C;
                xhat[idx] = (xv[idx] - mu) * is;
                out[idx] = gv[c] * xhat[idx] + bv[c];
            }
        }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [B, C, HW, groups, per, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                       const auto& gv = self.parents[1]->value;
                       auto* gx = detail::grad_of(self, 0);
                       auto* gg = detail::grad_of(self, 1);
                       auto* gb = detail::grad_of(self, 2);
                       std::vector<double> dxhat(per);
                       for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t g = 0; g < groups; ++g) {
                               const std::size_t base = (b * groups + g) * per;
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t i = 0; i < per; ++i) {
                                   const std::size_t idx = base + i;
                                   const std::size_t c = (idx / HW) % C;
                                   const double d = self.grad[idx];
                                   if (gg) (*gg)[c] += d * xhat[idx];
                                   if (gb) (*gb)[c] += d;
                                   dxhat[i] = d * gv[c];
                                   s1 += dxhat[i];
                                   s2 += dxhat[i] * xhat[idx];
                               }
                               if (!gx) continue;
                               const double n = static_cast<double>(per);
                               const double is = inv_std[b * groups + g];
                               for (std::size_t i = 0; i < per; ++i) {
                                   const std::size_t idx = base + i;
                                   (*gx)[idx] += is / n * (n * dxhat[i] - s1 - xhat[idx] * s2);
                               }
                           }
                   });
}

/// Bin boundaries of adaptive average pooling: [floor(i*in/out), ceil((i+1)*in/out)).
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t in, std::size_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

inline Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x, 4, "adaptive_avg_pool2d");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(out_h >= 1 && out_w >= 1 && out_h <= H && out_w <= W, "adaptive_avg_pool2d: output larger than input");
    if (out_h == H && out_w == W) {
        return x;
    }
    const auto xv = x.values();
    std::vector<double> out(B * C * out_h * out_w);
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto [y0, y1] = adaptive_bin(oy, H, out_h);
                const auto [x0, x1] = adaptive_bin(ox, W, out_w);
                double acc = 0.0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx) acc += xv[(bc * H + y) * W + xx];
                out[(bc * out_h + oy) * out_w + ox] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    return make_op({B, C, out_h, out_w}, std::move(out), {x}, [=](detail::Node& self) {
        auto* g = detail::grad_of(self, 0);
        if (!g) return;
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const auto [y0, y1] = adaptive_bin(oy, H, out_h);
                    const auto [x0, x1] = adaptive_bin(ox, W, out_w);
                    const double d =
                        self.grad[(bc * out_h + oy) * out_w + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) (*g)[(bc * H + y) * W + xx] += d;
                }
    });
}

/// Mean over spatial positions: (B, C, H, W) -> (B, C).
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(B * C);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += x.values()[bc * HW + i];
        out[bc] = acc / static_cast<double>(HW);
    }
    return make_op({B, C}, std::move(out), {x}, [B, C, HW](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t i = 0; i < HW; ++i) (*g)[bc * HW + i] += self.grad[bc] / static_cast<double>(HW);
        }
    });
}

/// (B, C, H, W) -> (B*H*W, C): batch and spatial positions become rows.
inline Tensor to_rows(const Tensor& x) {
    detail::require_rank(x, 4, "to_rows");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) out[(b * HW + p) * C + c] = x.values()[(b * C + c) * HW + p];
    return make_op({B * HW, C}, std::move(out), {x}, [B, C, HW](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < HW; ++p) (*g)[(b * C + c) * HW + p] += self.grad[(b * HW + p) * C + c];
        }
    });
}

/// Parameter-free residual shortcut: spatial subsampling by `stride`, then the
/// channel axis truncated or zero-padded to `out_channels`.
inline Tensor identity_shortcut(const Tensor& x, std::size_t out_channels, std::size_t stride) {
    detail::require_rank(x, 4, "identity_shortcut");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_channels == C && stride == 1) {
        return x;
    }
    const std::size_t OH = (H + stride - 1) / stride, OW = (W + stride - 1) / stride;
    const std::size_t keep = std::min(C, out_channels);
    std::vector<double> out(B * out_channels * OH * OW, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < keep; ++c)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t xx = 0; xx < OW; ++xx)
                    out[((b * out_channels + c) * OH + y) * OW + xx] =
                        x.values()[((b * C + c) * H + y * stride) * W + xx * stride];
    return make_op({B, out_channels, OH, OW}, std::move(out), {x}, [=](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < keep; ++c)
                    for (std::size_t y = 0; y < OH; ++y)
                        for (std::size_t xx = 0; xx < OW; ++xx)
                            (*g)[((b * C + c) * H + y * stride) * W + xx * stride] +=
                                self.grad[((b * out_channels + c) * OH + y) * OW + xx];
        }
    });
}

// ---------------------------------------------------------------- losses

/// Row-wise softmax of a (B, K) value array.
inline std::vector<double> softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t cols) {
    std::vector<double> p(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < cols; ++k) mx = std::max(mx, logits[r * cols + k]);
        double z = 0.0;
        for (std::size_t k = 0; k < cols; ++k) {
            p[r * cols + k] = std::exp(logits[r * cols + k] - mx);
            z += p[r * cols + k];
        }
        for (std::size_t k = 0; k < cols; ++k) p[r * cols + k] /= z;
    }
    return p;
}

/// Mean softmax cross-entropy of (B, K) logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    require(labels.size() == B, "cross_entropy: label count does not match batch");
    const auto lv = logits.values();
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        require(labels[b] >= 0 && static_cast<std::size_t>(labels[b]) < K, "cross_entropy: label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv[b * K + k]);
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(lv[b * K + k] - mx);
        loss += mx + std::log(z) - lv[b * K + static_cast<std::size_t>(labels[b])];
    }
    loss /= static_cast<double>(B);
    std::vector<int> y(labels.begin(), labels.end());
    return make_op({1}, {loss}, {logits}, [B, K, y = std::move(y)](detail::Node& self) {
        auto* g = detail::grad_of(self, 0);
        if (!g) return;
        const auto p = softmax_rows(self.parents[0]->value, B, K);
        const double s = self.grad[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                const double target = static_cast<std::size_t>(y[b]) == k ? 1.0 : 0.0;
                (*g)[b * K + k] += s * (p[b * K + k] - target);
            }
    });
}

/// Batch-mean KL(teacher || softmax(student)) against fixed teacher probabilities.
inline Tensor kl_divergence(const Tensor& student_logits, std::span<const double> teacher_probs) {
    detail::require_rank(student_logits, 2, "kl_divergence");
    const std::size_t B = student_logits.dim(0), K = student_logits.dim(1);
    require(teacher_probs.size() == B * K, "kl_divergence: teacher shape mismatch");
    const auto lv = student_logits.values();
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv[b * K + k]);
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(lv[b * K + k] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t k = 0; k < K; ++k) {
            const double t = teacher_probs[b * K + k];
            if (t > 0.0) loss += t * (std::log(t) - (lv[b * K + k] - lse));
        }
    }
    loss /= static_cast<double>(B);
    std::vector<double> t(teacher_probs.begin(), teacher_probs.end());
    return make_op({1}, {loss}, {student_logits}, [B, K, t = std::move(t)](detail::Node& self) {
        auto* g = detail::grad_of(self, 0);
        if (!g) return;
        const auto p = softmax_rows(self.parents[0]->value, B, K);
        const double s = self.grad[0] / static_cast<double>(B);
        for (std::size_t i = 0; i < B * K; ++i) (*g)[i] += s * (p[i] - t[i]);
    });
}

/// Cosine similarity of matching rows, (B, D) x fixed (B, D) -> (B, 1).
/// Gradient flows only into `a`.
inline Tensor row_cosine(const Tensor& a, std::span<const double> b) {
    detail::require_rank(a, 2, "row_cosine");
    const std::size_t B = a.dim(0), D = a.dim(1);
    require(b.size() == B * D, "row_cosine: shape mismatch");
    const auto av = a.values();
    std::vector<double> out(B), na(B), nb(B);
    for (std::size_t r = 0; r < B; ++r) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
            dot += av[r * D + j] * b[r * D + j];
            sa += av[r * D + j] * av[r * D + j];
            sb += b[r * D + j] * b[r * D + j];
        }
        if (sa == 0.0 || sb == 0.0) {
            throw std::domain_error("row_cosine: zero-norm representation in row " + std::to_string(r));
        }
        na[r] = std::sqrt(sa);
        nb[r] = std::sqrt(sb);
        out[r] = dot / (na[r] * nb[r]);
    }
    std::vector<double> bc(b.begin(), b.end());
    return make_op({B, 1}, out, {a}, [B, D, bc = std::move(bc), na, nb, out](detail::Node& self) {
        auto* g = detail::grad_of(self, 0);
        if (!g) return;
        const auto& av = self.parents[0]->value;
        for (std::size_t r = 0; r < B; ++r) {
            const double d = self.grad[r];
            for (std::size_t j = 0; j < D; ++j) {
                (*g)[r * D + j] +=
                    d * (bc[r * D + j] / (na[r] * nb[r]) - out[r] * av[r * D + j] / (na[r] * na[r]));
            }
        }
    });
}

} // namespace fedalign
