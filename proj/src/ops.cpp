#include "phydi/ops.hpp"

#include "gemm.hpp"
#include "phydi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace phydi {

namespace {

constexpr double kMaskedLogit = -1e30;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
    }
}

std::vector<double> copy_of(std::span<const double> s) { return {s.begin(), s.end()}; }

// Lays out (C*k*k) x (N*Ho*Wo) patches; conv2d calls it per sample (N = 1).
void im2col(const double* x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            double* col) {
    const std::size_t cols = N * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t u = 0; u < k; ++u) {
            for (std::size_t v = 0; v < k; ++v) {
                double* row = col + ((c * k + u) * k + v) * cols;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* plane = x + (n * C + c) * H * W;
                    double* dst = row + n * Ho * Wo;
                    for (std::size_t i = 0; i < Ho; ++i) {
                        const long hi = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                        if (hi < 0 || hi >= static_cast<long>(H)) {
                            std::fill(dst + i * Wo, dst + (i + 1) * Wo, 0.0);
                            continue;
                        }
                        const double* src = plane + static_cast<std::size_t>(hi) * W;
                        for (std::size_t j = 0; j < Wo; ++j) {
                            const long wj = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                            dst[i * Wo + j] =
                                (wj < 0 || wj >= static_cast<long>(W)) ? 0.0 : src[wj];
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* col, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            double* dx) {
    const std::size_t cols = N * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t u = 0; u < k; ++u) {
            for (std::size_t v = 0; v < k; ++v) {
                const double* row = col + ((c * k + u) * k + v) * cols;
                for (std::size_t n = 0; n < N; ++n) {
                    double* plane = dx + (n * C + c) * H * W;
                    const double* src = row + n * Ho * Wo;
                    for (std::size_t i = 0; i < Ho; ++i) {
                        const long hi = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                        if (hi < 0 || hi >= static_cast<long>(H)) continue;
                        double* dst = plane + static_cast<std::size_t>(hi) * W;
                        for (std::size_t j = 0; j < Wo; ++j) {
                            const long wj = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                            if (wj >= 0 && wj < static_cast<long>(W)) dst[wj] += src[i * Wo + j];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::make_op("add", a.shape(), std::move(out), {a, b},
                           [](auto g, auto, const GradSinks& s) {
                               for (std::size_t k = 0; k < 2; ++k) {
                                   if (!s.wants(k)) continue;
                                   auto d = s[k];
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                               }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return Tensor::make_op("sub", a.shape(), std::move(out), {a, b},
                           [](auto g, auto, const GradSinks& s) {
                               if (s.wants(0)) {
                                   auto d = s[0];
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                               }
                               if (s.wants(1)) {
                                   auto d = s[1];
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                               }
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return Tensor::make_op("mul", a.shape(), std::move(out), {a, b},
                           [](auto g, auto, const GradSinks& s) {
                               for (std::size_t k = 0; k < 2; ++k) {
                                   if (!s.wants(k)) continue;
                                   auto d = s[k];
                                   const auto other = s.input(1 - k);
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
                               }
                           });
}

Tensor scale(const Tensor& x, const Tensor& alpha) {
    if (alpha.numel() != 1) {
        throw ShapeError("scale: gate must hold a single value, got shape " +
                         shape_str(alpha.shape()));
    }
    const double a = alpha.item();
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * a;
    return Tensor::make_op("scale", x.shape(), std::move(out), {x, alpha},
                           [](auto g, auto, const GradSinks& s) {
                               const double a = s.input(1)[0];
                               if (s.wants(0)) {
                                   auto d = s[0];
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a;
                               }
                               if (s.wants(1)) {
                                   const auto v = s.input(0);
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * v[i];
                                   s[1][0] += acc;
                               }
                           });
}

Tensor mul_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * c;
    return Tensor::make_op("mul_scalar", x.shape(), std::move(out), {x},
                           [c](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
                           });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_rank("add_bias", bias, 1);
    if (x.rank() == 0 || x.shape().back() != bias.numel()) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t d = bias.numel();
    std::vector<double> out = copy_of(x.data());
    const auto b = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % d];
    return Tensor::make_op("add_bias", x.shape(), std::move(out), {x, bias},
                           [d](auto g, auto, const GradSinks& s) {
                               if (s.wants(0)) {
                                   auto dx = s[0];
                                   for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                               }
                               if (s.wants(1)) {
                                   auto db = s[1];
                                   for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                               }
                           });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    require_rank("add_channel_bias", x, 4);
    require_rank("add_channel_bias", bias, 1);
    const std::size_t C = x.dim(1);
    if (bias.numel() != C) {
        throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) +
                         " does not match channels of " + shape_str(x.shape()));
    }
    const std::size_t plane = x.dim(2) * x.dim(3);
    std::vector<double> out = copy_of(x.data());
    const auto b = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[(i / plane) % C];
    return Tensor::make_op("add_channel_bias", x.shape(), std::move(out), {x, bias},
                           [C, plane](auto g, auto, const GradSinks& s) {
                               if (s.wants(0)) {
                                   auto dx = s[0];
                                   for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                               }
                               if (s.wants(1)) {
                                   auto db = s[1];
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       db[(i / plane) % C] += g[i];
                               }
                           });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    std::vector<double> out(m * p);
    detail::gemm(false, false, m, p, k, a.data().data(), b.data().data(), out.data(), false);
    return Tensor::make_op("matmul", {m, p}, std::move(out), {a, b},
                           [m, k, p](auto g, auto, const GradSinks& s) {
                               if (s.wants(0)) {  // dA = dC * B^T
                                   detail::gemm(false, true, m, k, p, g.data(), s.input(1).data(),
                                                s[0].data(), true);
                               }
                               if (s.wants(1)) {  // dB = A^T * dC
                                   detail::gemm(true, false, k, p, m, s.input(0).data(), g.data(),
                                                s[1].data(), true);
                               }
                           });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    const auto v = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
    return Tensor::make_op("transpose", {c, r}, std::move(out), {a},
                           [r, c](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
                           });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    std::vector<double> out(B * m * p);
    const double* A = a.data().data();
    const double* Bm = b.data().data();
    for (std::size_t i = 0; i < B; ++i) {
        detail::gemm(false, false, m, p, k, A + i * m * k, Bm + i * k * p, out.data() + i * m * p,
                     false);
    }
    return Tensor::make_op(
        "bmm", {B, m, p}, std::move(out), {a, b}, [B, m, k, p](auto g, auto, const GradSinks& s) {
            const double* A = s.input(0).data();
            const double* Bm = s.input(1).data();
            for (std::size_t i = 0; i < B; ++i) {
                const double* gi = g.data() + i * m * p;
                if (s.wants(0))
                    detail::gemm(false, true, m, k, p, gi, Bm + i * k * p, s[0].data() + i * m * k,
                                 true);
                if (s.wants(1))
                    detail::gemm(true, false, k, p, m, A + i * m * k, gi, s[1].data() + i * k * p,
                                 true);
            }
        });
}

Tensor transpose_last(const Tensor& a) {
    require_rank("transpose_last", a, 3);
    const std::size_t B = a.dim(0), r = a.dim(1), c = a.dim(2);
    std::vector<double> out(a.numel());
    const auto v = a.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[(b * c + j) * r + i] = v[(b * r + i) * c + j];
    return Tensor::make_op("transpose_last", {B, c, r}, std::move(out), {a},
                           [B, r, c](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           d[(b * r + i) * c + j] += g[(b * c + j) * r + i];
                           });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return Tensor::make_op("reshape", std::move(shape), copy_of(x.data()), {x},
                           [](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return Tensor::make_op("relu", x.shape(), std::move(out), {x},
                           [](auto g, auto y, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   if (y[i] > 0.0) d[i] += g[i];
                           });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() == 0 || x.shape().back() == 0) {
        throw ShapeError("layer_norm: empty normalization axis in " + shape_str(x.shape()));
    }
    if (!(eps > 0.0)) throw ShapeError("layer_norm: eps must be positive");
    const std::size_t D = x.shape().back();
    if (gain.numel() != D || bias.numel() != D) {
        throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(D));
    }
    const std::size_t rows = x.numel() / D;
    const auto v = x.data();
    const auto g = gain.data();
    const auto b = bias.data();
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = v.data() + r * D;
        double mu = 0.0;
        for (std::size_t i = 0; i < D; ++i) mu += row[i];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(D);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t i = 0; i < D; ++i) {
            const double h = (row[i] - mu) * inv;
            xhat[r * D + i] = h;
            out[r * D + i] = g[i] * h + b[i];
        }
    }
    return Tensor::make_op(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto dy, auto,
                                                                         const GradSinks& s) {
            const auto gv = s.input(1);
            if (s.wants(0)) {
                auto dx = s[0];
                std::vector<double> dh(D);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t i = 0; i < D; ++i) {
                        dh[i] = dy[r * D + i] * gv[i];
                        mean_dh += dh[i];
                        mean_dh_h += dh[i] * xhat[r * D + i];
                    }
                    mean_dh /= static_cast<double>(D);
                    mean_dh_h /= static_cast<double>(D);
                    for (std::size_t i = 0; i < D; ++i) {
                        dx[r * D + i] +=
                            inv_std[r] * (dh[i] - mean_dh - xhat[r * D + i] * mean_dh_h);
                    }
                }
            }
            if (s.wants(1)) {
                auto dg = s[1];
                for (std::size_t i = 0; i < dy.size(); ++i) dg[i % D] += dy[i] * xhat[i];
            }
            if (s.wants(2)) {
                auto db = s[2];
                for (std::size_t i = 0; i < dy.size(); ++i) db[i % D] += dy[i];
            }
        });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
    const auto& sh = x.shape();
    const std::size_t len = sh[axis];
    if (len == 0) throw ShapeError("softmax: empty axis");
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    const std::size_t outer = x.numel() / (len * inner);
    const auto v = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, v[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(v[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
        }
    }
    return Tensor::make_op("softmax", sh, std::move(out), {x},
                           [outer, len, inner](auto g, auto y, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t in = 0; in < inner; ++in) {
                                       const std::size_t base = o * len * inner + in;
                                       double dot = 0.0;
                                       for (std::size_t i = 0; i < len; ++i)
                                           dot += g[base + i * inner] * y[base + i * inner];
                                       for (std::size_t i = 0; i < len; ++i) {
                                           const std::size_t at = base + i * inner;
                                           d[at] += y[at] * (g[at] - dot);
                                       }
                                   }
                               }
                           });
}

Tensor causal_mask(const Tensor& scores) {
    if (scores.rank() < 2 || scores.shape().back() != scores.shape()[scores.rank() - 2]) {
        throw ShapeError("causal_mask: trailing axes must be square, got " +
                         shape_str(scores.shape()));
    }
    const std::size_t T = scores.shape().back();
    std::vector<double> out = copy_of(scores.data());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t row = (i / T) % T, col = i % T;
        if (col > row) out[i] = kMaskedLogit;
    }
    return Tensor::make_op("causal_mask", scores.shape(), std::move(out), {scores},
                           [T](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   if (i % T <= (i / T) % T) d[i] += g[i];
                               }
                           });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_rank("cross_entropy", logits, 2);
    const std::size_t N = logits.dim(0), V = logits.dim(1);
    if (targets.size() != N) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(N) + " rows");
    }
    if (N == 0 || V == 0) throw ShapeError("cross_entropy: empty logits");
    const auto v = logits.data();
    std::vector<double> probs(N * V);
    double total = 0.0;
    for (std::size_t r = 0; r < N; ++r) {
        if (targets[r] >= V) {
            throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) +
                             " out of range for " + std::to_string(V) + " classes");
        }
        const double* row = v.data() + r * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            probs[r * V + c] = std::exp(row[c] - mx);
            z += probs[r * V + c];
        }
        for (std::size_t c = 0; c < V; ++c) probs[r * V + c] /= z;
        total += std::log(z) + mx - row[targets[r]];
    }
    std::vector<std::size_t> t(targets.begin(), targets.end());
    return Tensor::make_op("cross_entropy", {}, {total / static_cast<double>(N)}, {logits},
                           [N, V, probs = std::move(probs), t = std::move(t)](
                               auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               const double c = g[0] / static_cast<double>(N);
                               for (std::size_t r = 0; r < N; ++r) {
                                   for (std::size_t k = 0; k < V; ++k)
                                       d[r * V + k] += c * probs[r * V + k];
                                   d[r * V + t[r]] -= c;
                               }
                           });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return Tensor::make_op("sum", {}, {acc}, {x}, [](auto g, auto, const GradSinks& s) {
        auto d = s[0];
        for (auto& e : d) e += g[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor kron(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("kron: both factors must be matrices, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(0), r = b.dim(1);
    const auto av = a.data(), bv = b.data();
    std::vector<double> out(m * q * p * r);
    const std::size_t cols = p * r;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            const double aij = av[i * p + j];
            for (std::size_t k = 0; k < q; ++k) {
                double* dst = out.data() + (i * q + k) * cols + j * r;
                const double* src = bv.data() + k * r;
                for (std::size_t l = 0; l < r; ++l) dst[l] = aij * src[l];
            }
        }
    return Tensor::make_op(
        "kron", {m * q, p * r}, std::move(out), {a, b},
        [m, p, q, r](auto g, auto, const GradSinks& s) {
            const std::size_t cols = p * r;
            const auto av = s.input(0), bv = s.input(1);
            const bool wa = s.wants(0), wb = s.wants(1);
            auto da = wa ? s[0] : std::span<double>{};
            auto db = wb ? s[1] : std::span<double>{};
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < p; ++j) {
                    const double aij = av[i * p + j];
                    double acc = 0.0;
                    for (std::size_t k = 0; k < q; ++k) {
                        const double* gr = g.data() + (i * q + k) * cols + j * r;
                        for (std::size_t l = 0; l < r; ++l) {
                            acc += gr[l] * bv[k * r + l];
                            if (wb) db[k * r + l] += gr[l] * aij;
                        }
                    }
                    if (wa) da[i * p + j] += acc;
                }
        });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    require_rank("conv2d input", x, 4);
    require_rank("conv2d kernel", w, 4);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(2);
    if (w.dim(1) != C || w.dim(3) != k) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be at least 1");
    if (k == 0 || k > H + 2 * padding || k > W + 2 * padding) {
        throw ShapeError("conv2d: kernel size " + std::to_string(k) + " exceeds padded input " +
                         shape_str(x.shape()));
    }
    const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
    const std::size_t rows = C * k * k, plane = Ho * Wo;
    const bool pointwise = k == 1 && stride == 1 && padding == 0;

    // One sample at a time keeps the patch matrix cache-resident and lets
    // each GEMM write straight into that sample's O x Ho*Wo output slab.
    std::vector<double> out(N * O * plane);
    {
        std::vector<double> col(pointwise ? 0 : rows * plane);
        const double* xv = x.data().data();
        for (std::size_t n = 0; n < N; ++n) {
            const double* src = xv + n * C * H * W;
            if (!pointwise) {
                im2col(src, 1, C, H, W, k, stride, padding, Ho, Wo, col.data());
                src = col.data();
            }
            detail::gemm(false, false, O, plane, rows, w.data().data(), src,
                         out.data() + n * O * plane, false);
        }
    }

    return Tensor::make_op(
        "conv2d", {N, O, Ho, Wo}, std::move(out), {x, w},
        [=](auto g, auto, const GradSinks& s) {
            const double* xv = s.input(0).data();
            const double* wv = s.input(1).data();
            const bool want_x = s.wants(0), want_w = s.wants(1);
            double* dw = want_w ? s[1].data() : nullptr;
            double* dx = want_x ? s[0].data() : nullptr;
            std::vector<double> col(pointwise ? 0 : rows * plane);
            std::vector<double> dcol(pointwise || !want_x ? 0 : rows * plane);
            for (std::size_t n = 0; n < N; ++n) {
                const double* gn = g.data() + n * O * plane;
                const double* xn = xv + n * C * H * W;
                if (want_w) {
                    const double* patches = xn;
                    if (!pointwise) {
                        im2col(xn, 1, C, H, W, k, stride, padding, Ho, Wo, col.data());
                        patches = col.data();
                    }
                    detail::gemm(false, true, O, rows, plane, gn, patches, dw, true);
                }
                if (want_x) {
                    if (pointwise) {
                        detail::gemm(true, false, C, plane, O, wv, gn, dx + n * C * H * W, true);
                    } else {
                        detail::gemm(true, false, rows, plane, O, wv, gn, dcol.data(), false);
                        col2im(dcol.data(), 1, C, H, W, k, stride, padding, Ho, Wo,
                               dx + n * C * H * W);
                    }
                }
            }
        });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank("global_avg_pool", x, 4);
    const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (plane == 0) throw ShapeError("global_avg_pool: empty spatial extent");
    const auto v = x.data();
    std::vector<double> out(N * C);
    for (std::size_t i = 0; i < N * C; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < plane; ++j) acc += v[i * plane + j];
        out[i] = acc / static_cast<double>(plane);
    }
    return Tensor::make_op("global_avg_pool", {N, C}, std::move(out), {x},
                           [plane](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               const double inv = 1.0 / static_cast<double>(plane);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   for (std::size_t j = 0; j < plane; ++j)
                                       d[i * plane + j] += g[i] * inv;
                           });
}

Tensor pad_channels(const Tensor& x, std::size_t channels) {
    require_rank("pad_channels", x, 4);
    const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (channels < C) throw ShapeError("pad_channels: cannot shrink channel count");
    if (channels == C) return x;
    std::vector<double> out(N * channels * plane, 0.0);
    const auto v = x.data();
    for (std::size_t n = 0; n < N; ++n)
        std::copy_n(v.data() + n * C * plane, C * plane, out.data() + n * channels * plane);
    return Tensor::make_op("pad_channels", {N, channels, x.dim(2), x.dim(3)}, std::move(out), {x},
                           [N, C, channels, plane](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t i = 0; i < C * plane; ++i)
                                       d[n * C * plane + i] += g[n * channels * plane + i];
                           });
}

Tensor slice_last(const Tensor& x, std::size_t count) {
    if (x.rank() == 0 || count > x.shape().back()) {
        throw ShapeError("slice_last: cannot keep " + std::to_string(count) + " of " +
                         shape_str(x.shape()));
    }
    const std::size_t D = x.shape().back();
    if (count == D) return x;
    const std::size_t rows = x.numel() / D;
    Shape shape = x.shape();
    shape.back() = count;
    std::vector<double> out(rows * count);
    const auto v = x.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.data() + r * D, count, out.data() + r * count);
    return Tensor::make_op("slice_last", std::move(shape), std::move(out), {x},
                           [rows, D, count](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < count; ++i)
                                       d[r * D + i] += g[r * count + i];
                           });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    require_rank("embedding", table, 2);
    const std::size_t V = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    const auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= V) {
            throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for " +
                             std::to_string(V) + " rows");
        }
        std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    return Tensor::make_op("embedding", {ids.size(), d}, std::move(out), {table},
                           [d, idv = std::move(idv)](auto g, auto, const GradSinks& s) {
                               auto dt = s[0];
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                       dt[idv[i] * d + j] += g[i * d + j];
                           });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    require_rank("split_heads", x, 3);
    const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    if (heads == 0 || D % heads != 0) {
        throw ShapeError("split_heads: width " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const std::size_t dh = D / heads;
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(v.data() + (b * T + t) * D + h * dh, dh,
                            out.data() + ((b * heads + h) * T + t) * dh);
    return Tensor::make_op("split_heads", {B * heads, T, dh}, std::move(out), {x},
                           [B, T, D, heads, dh](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t t = 0; t < T; ++t)
                                       for (std::size_t h = 0; h < heads; ++h)
                                           for (std::size_t e = 0; e < dh; ++e)
                                               d[(b * T + t) * D + h * dh + e] +=
                                                   g[((b * heads + h) * T + t) * dh + e];
                           });
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
    require_rank("merge_heads", x, 3);
    if (heads == 0 || x.dim(0) % heads != 0) {
        throw ShapeError("merge_heads: leading axis not divisible by head count");
    }
    const std::size_t B = x.dim(0) / heads, T = x.dim(1), dh = x.dim(2), D = dh * heads;
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(v.data() + ((b * heads + h) * T + t) * dh, dh,
                            out.data() + (b * T + t) * D + h * dh);
    return Tensor::make_op("merge_heads", {B, T, D}, std::move(out), {x},
                           [B, T, D, heads, dh](auto g, auto, const GradSinks& s) {
                               auto d = s[0];
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t t = 0; t < T; ++t)
                                       for (std::size_t h = 0; h < heads; ++h)
                                           for (std::size_t e = 0; e < dh; ++e)
                                               d[((b * heads + h) * T + t) * dh + e] +=
                                                   g[(b * T + t) * D + h * dh + e];
                           });
}

}  // namespace phydi
