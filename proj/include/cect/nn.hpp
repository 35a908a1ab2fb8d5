#pragma once

// Neural-network primitives on top of the tensor core: matrix products,
// convolutions (cross-correlation convention, zero padding), transposed
// convolution as the exact adjoint, nearest upsampling, layer norm
// (population variance), stable softmax and cross-entropy. All reductions
// accumulate in double.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cect/tensor.hpp"

namespace cect {

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<S> out(Shape{m, n});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    std::vector<double> row(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = static_cast<double>(pa[i * k + p]);
            const S* brow = pb + p * n;
            for (std::int64_t j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] += av * brow[j];
        }
        for (std::int64_t j = 0; j < n; ++j) po[i * n + j] = static_cast<S>(row[static_cast<std::size_t>(j)]);
    }
    detail::check_finite(out, "matmul");
    if (detail::any_requires_grad<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach(out, "matmul", {an, bn}, [an, bn, on, m, k, n] {
            const S* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j)
                            acc += static_cast<double>(g[i * n + j]) * bn->value[static_cast<std::size_t>(p * n + j)];
                        an->grad[static_cast<std::size_t>(i * k + p)] += static_cast<S>(acc);
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t p = 0; p < k; ++p)
                    for (std::int64_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < m; ++i)
                            acc += static_cast<double>(an->value[static_cast<std::size_t>(i * k + p)]) * g[i * n + j];
                        bn->grad[static_cast<std::size_t>(p * n + j)] += static_cast<S>(acc);
                    }
            }
        });
    }
    return out;
}

// Batched matmul: [B, m, k] x [B, k, n] -> [B, m, n].
template <typename S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    TensorT<S> out(Shape{B, m, n});
    std::vector<double> row(static_cast<std::size_t>(n));
    for (std::int64_t bb = 0; bb < B; ++bb) {
        const S* pa = a.data() + bb * m * k;
        const S* pb = b.data() + bb * k * n;
        S* po = out.data() + bb * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            std::fill(row.begin(), row.end(), 0.0);
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = static_cast<double>(pa[i * k + p]);
                const S* brow = pb + p * n;
                for (std::int64_t j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] += av * brow[j];
            }
            for (std::int64_t j = 0; j < n; ++j)
                po[i * n + j] = static_cast<S>(row[static_cast<std::size_t>(j)]);
        }
    }
    detail::check_finite(out, "bmm");
    if (detail::any_requires_grad<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach(out, "bmm", {an, bn}, [an, bn, on, B, m, k, n] {
            for (std::int64_t bb = 0; bb < B; ++bb) {
                const S* g = on->grad.data() + bb * m * n;
                const S* pa = an->value.data() + bb * m * k;
                const S* pb = bn->value.data() + bb * k * n;
                if (an->requires_grad) {
                    an->ensure_grad();
                    S* ga = an->grad.data() + bb * m * k;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t p = 0; p < k; ++p) {
                            double acc = 0.0;
                            for (std::int64_t j = 0; j < n; ++j)
                                acc += static_cast<double>(g[i * n + j]) * pb[p * n + j];
                            ga[i * k + p] += static_cast<S>(acc);
                        }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    S* gb = bn->grad.data() + bb * k * n;
                    for (std::int64_t p = 0; p < k; ++p)
                        for (std::int64_t j = 0; j < n; ++j) {
                            double acc = 0.0;
                            for (std::int64_t i = 0; i < m; ++i)
                                acc += static_cast<double>(pa[i * k + p]) * g[i * n + j];
                            gb[p * n + j] += static_cast<S>(acc);
                        }
                }
            }
        });
    }
    return out;
}

// Affine map over the last axis: [..., in] x [in, out] (+ bias[out]).
// Leading axes are treated as a flat batch. Pass an undefined bias to skip it.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
    if (x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0))
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                             shape_str(w.shape()));
    const bool has_bias = bias.defined();
    const std::int64_t in = w.dim(0), outf = w.dim(1);
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != outf))
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " does not match " +
                             std::to_string(outf) + " outputs");
    const std::int64_t rows = x.size() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outf;
    TensorT<S> out(out_shape);
    std::vector<double> row(static_cast<std::size_t>(outf));
    for (std::int64_t r = 0; r < rows; ++r) {
        if (has_bias)
            for (std::int64_t j = 0; j < outf; ++j)
                row[static_cast<std::size_t>(j)] = static_cast<double>(bias.data()[j]);
        else
            std::fill(row.begin(), row.end(), 0.0);
        const S* px = x.data() + r * in;
        for (std::int64_t p = 0; p < in; ++p) {
            const double xv = static_cast<double>(px[p]);
            const S* wrow = w.data() + p * outf;
            for (std::int64_t j = 0; j < outf; ++j) row[static_cast<std::size_t>(j)] += xv * wrow[j];
        }
        S* po = out.data() + r * outf;
        for (std::int64_t j = 0; j < outf; ++j) po[j] = static_cast<S>(row[static_cast<std::size_t>(j)]);
    }
    detail::check_finite(out, "linear");
    const bool track = has_bias ? detail::any_requires_grad<S>({&x, &w, &bias})
                                : detail::any_requires_grad<S>({&x, &w});
    if (track) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = has_bias ? bias.node() : nullptr;
        std::vector<std::shared_ptr<TensorNode<S>>> parents{xn, wn};
        if (bn) parents.push_back(bn);
        detail::attach(out, "linear", std::move(parents), [xn, wn, bn, on, rows, in, outf] {
            const S* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t p = 0; p < in; ++p) {
                        double acc = 0.0;
                        const S* wrow = wn->value.data() + p * outf;
                        for (std::int64_t j = 0; j < outf; ++j)
                            acc += static_cast<double>(g[r * outf + j]) * wrow[j];
                        xn->grad[static_cast<std::size_t>(r * in + p)] += static_cast<S>(acc);
                    }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                std::vector<double> acc(static_cast<std::size_t>(in * outf), 0.0);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* px = xn->value.data() + r * in;
                    for (std::int64_t p = 0; p < in; ++p) {
                        const double xv = static_cast<double>(px[p]);
                        for (std::int64_t j = 0; j < outf; ++j)
                            acc[static_cast<std::size_t>(p * outf + j)] +=
                                xv * static_cast<double>(g[r * outf + j]);
                    }
                }
                detail::accumulate(*wn, acc);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                std::vector<double> acc(static_cast<std::size_t>(outf), 0.0);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < outf; ++j)
                        acc[static_cast<std::size_t>(j)] += static_cast<double>(g[r * outf + j]);
                detail::accumulate(*bn, acc);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w) {
    return linear(x, w, TensorT<S>());
}

namespace detail {

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

} // namespace detail

// 2-d cross-correlation, zero padding: x[N,C,H,W] * w[O,C,kh,kw] -> [N,O,H',W'].
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias, int stride,
                  int padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d: expected rank-4 input and kernel, got " + shape_str(x.shape()) +
                             " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " do not match kernel " +
                             shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    const std::int64_t Ho = detail::conv_out_extent(H, kh, stride, padding);
    const std::int64_t Wo = detail::conv_out_extent(W, kw, stride, padding);
    if (Ho < 1 || Wo < 1)
        throw DimensionError("conv2d: non-positive output extent for input " + shape_str(x.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != O))
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));

    TensorT<S> out(Shape{N, O, Ho, Wo});
    std::vector<double> plane(static_cast<std::size_t>(Ho * Wo));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
            std::fill(plane.begin(), plane.end(),
                      has_bias ? static_cast<double>(bias.data()[o]) : 0.0);
            for (std::int64_t c = 0; c < C; ++c) {
                const S* xp = x.data() + (n * C + c) * H * W;
                const S* wp = w.data() + (o * C + c) * kh * kw;
                for (std::int64_t i = 0; i < kh; ++i)
                    for (std::int64_t j = 0; j < kw; ++j) {
                        const double wv = static_cast<double>(wp[i * kw + j]);
                        if (wv == 0.0) continue;
                        for (std::int64_t oy = 0; oy < Ho; ++oy) {
                            const std::int64_t iy = oy * stride - padding + i;
                            if (iy < 0 || iy >= H) continue;
                            double* prow = plane.data() + oy * Wo;
                            const S* xrow = xp + iy * W;
                            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                const std::int64_t ix = ox * stride - padding + j;
                                if (ix < 0 || ix >= W) continue;
                                prow[ox] += wv * static_cast<double>(xrow[ix]);
                            }
                        }
                    }
            }
            S* po = out.data() + (n * O + o) * Ho * Wo;
            for (std::int64_t i = 0; i < Ho * Wo; ++i) po[i] = static_cast<S>(plane[static_cast<std::size_t>(i)]);
        }
    detail::check_finite(out, "conv2d");

    const bool track = has_bias ? detail::any_requires_grad<S>({&x, &w, &bias})
                                : detail::any_requires_grad<S>({&x, &w});
    if (track) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = has_bias ? bias.node() : nullptr;
        std::vector<std::shared_ptr<TensorNode<S>>> parents{xn, wn};
        if (bn) parents.push_back(bn);
        const std::int64_t st = stride, pd = padding;
        detail::attach(out, "conv2d", std::move(parents),
                       [xn, wn, bn, on, N, C, H, W, O, kh, kw, Ho, Wo, st, pd] {
            const S* g = on->grad.data();
            if (xn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(N * C * H * W), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const S* gp = g + (n * O + o) * Ho * Wo;
                        for (std::int64_t c = 0; c < C; ++c) {
                            double* ap = acc.data() + (n * C + c) * H * W;
                            const S* wp = wn->value.data() + (o * C + c) * kh * kw;
                            for (std::int64_t i = 0; i < kh; ++i)
                                for (std::int64_t j = 0; j < kw; ++j) {
                                    const double wv = static_cast<double>(wp[i * kw + j]);
                                    if (wv == 0.0) continue;
                                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                        const std::int64_t iy = oy * st - pd + i;
                                        if (iy < 0 || iy >= H) continue;
                                        for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                            const std::int64_t ix = ox * st - pd + j;
                                            if (ix < 0 || ix >= W) continue;
                                            ap[iy * W + ix] += wv * static_cast<double>(gp[oy * Wo + ox]);
                                        }
                                    }
                                }
                        }
                    }
                detail::accumulate(*xn, acc);
            }
            if (wn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(O * C * kh * kw), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const S* gp = g + (n * O + o) * Ho * Wo;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const S* xp = xn->value.data() + (n * C + c) * H * W;
                            double* ap = acc.data() + (o * C + c) * kh * kw;
                            for (std::int64_t i = 0; i < kh; ++i)
                                for (std::int64_t j = 0; j < kw; ++j) {
                                    double s = 0.0;
                                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                        const std::int64_t iy = oy * st - pd + i;
                                        if (iy < 0 || iy >= H) continue;
                                        for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                            const std::int64_t ix = ox * st - pd + j;
                                            if (ix < 0 || ix >= W) continue;
                                            s += static_cast<double>(gp[oy * Wo + ox]) *
                                                 static_cast<double>(xp[iy * W + ix]);
                                        }
                                    }
                                    ap[i * kw + j] += s;
                                }
                        }
                    }
                detail::accumulate(*wn, acc);
            }
            if (bn && bn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(O), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const S* gp = g + (n * O + o) * Ho * Wo;
                        double s = 0.0;
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) s += static_cast<double>(gp[i]);
                        acc[static_cast<std::size_t>(o)] += s;
                    }
                detail::accumulate(*bn, acc);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, int stride, int padding) {
    return conv2d(x, w, TensorT<S>(), stride, padding);
}

// Transposed convolution, the adjoint of conv2d under the same (stride,
// padding): x[N,C,H,W] * w[C,O,kh,kw] -> [N,O,(H-1)s-2p+kh, (W-1)s-2p+kw].
template <typename S>
TensorT<S> transposed_conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                             int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("transposed_conv2d: expected rank-4 input and kernel, got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(0))
        throw DimensionError("transposed_conv2d: input channels " + shape_str(x.shape()) +
                             " do not match kernel " + shape_str(w.shape()));
    if (stride < 1 || padding < 0)
        throw ContractError("transposed_conv2d: stride must be >= 1 and padding >= 0");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t Ho = (H - 1) * stride - 2 * padding + kh;
    const std::int64_t Wo = (W - 1) * stride - 2 * padding + kw;
    if (Ho < 1 || Wo < 1)
        throw DimensionError("transposed_conv2d: non-positive output extent for input " +
                             shape_str(x.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != O))
        throw DimensionError("transposed_conv2d: bias shape " + shape_str(bias.shape()));

    TensorT<S> out(Shape{N, O, Ho, Wo});
    std::vector<double> plane(static_cast<std::size_t>(Ho * Wo));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
            std::fill(plane.begin(), plane.end(),
                      has_bias ? static_cast<double>(bias.data()[o]) : 0.0);
            for (std::int64_t c = 0; c < C; ++c) {
                const S* xp = x.data() + (n * C + c) * H * W;
                const S* wp = w.data() + (c * O + o) * kh * kw;
                for (std::int64_t i = 0; i < kh; ++i)
                    for (std::int64_t j = 0; j < kw; ++j) {
                        const double wv = static_cast<double>(wp[i * kw + j]);
                        if (wv == 0.0) continue;
                        for (std::int64_t y = 0; y < H; ++y) {
                            const std::int64_t oy = y * stride - padding + i;
                            if (oy < 0 || oy >= Ho) continue;
                            double* prow = plane.data() + oy * Wo;
                            const S* xrow = xp + y * W;
                            for (std::int64_t xx = 0; xx < W; ++xx) {
                                const std::int64_t ox = xx * stride - padding + j;
                                if (ox < 0 || ox >= Wo) continue;
                                prow[ox] += wv * static_cast<double>(xrow[xx]);
                            }
                        }
                    }
            }
            S* po = out.data() + (n * O + o) * Ho * Wo;
            for (std::int64_t i = 0; i < Ho * Wo; ++i) po[i] = static_cast<S>(plane[static_cast<std::size_t>(i)]);
        }
    detail::check_finite(out, "transposed_conv2d");

    const bool track = has_bias ? detail::any_requires_grad<S>({&x, &w, &bias})
                                : detail::any_requires_grad<S>({&x, &w});
    if (track) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = has_bias ? bias.node() : nullptr;
        std::vector<std::shared_ptr<TensorNode<S>>> parents{xn, wn};
        if (bn) parents.push_back(bn);
        const std::int64_t st = stride, pd = padding;
        detail::attach(out, "transposed_conv2d", std::move(parents),
                       [xn, wn, bn, on, N, C, H, W, O, kh, kw, Ho, Wo, st, pd] {
            const S* g = on->grad.data();
            if (xn->requires_grad) {
                // d in = gather of output grad: the conv2d forward pattern.
                std::vector<double> acc(static_cast<std::size_t>(N * C * H * W), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        double* ap = acc.data() + (n * C + c) * H * W;
                        for (std::int64_t o = 0; o < O; ++o) {
                            const S* gp = g + (n * O + o) * Ho * Wo;
                            const S* wp = wn->value.data() + (c * O + o) * kh * kw;
                            for (std::int64_t y = 0; y < H; ++y)
                                for (std::int64_t xx = 0; xx < W; ++xx) {
                                    double s = 0.0;
                                    for (std::int64_t i = 0; i < kh; ++i) {
                                        const std::int64_t oy = y * st - pd + i;
                                        if (oy < 0 || oy >= Ho) continue;
                                        for (std::int64_t j = 0; j < kw; ++j) {
                                            const std::int64_t ox = xx * st - pd + j;
                                            if (ox < 0 || ox >= Wo) continue;
                                            s += static_cast<double>(wp[i * kw + j]) *
                                                 static_cast<double>(gp[oy * Wo + ox]);
                                        }
                                    }
                                    ap[y * W + xx] += s;
                                }
                        }
                    }
                detail::accumulate(*xn, acc);
            }
            if (wn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(C * O * kh * kw), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const S* xp = xn->value.data() + (n * C + c) * H * W;
                        for (std::int64_t o = 0; o < O; ++o) {
                            const S* gp = g + (n * O + o) * Ho * Wo;
                            double* ap = acc.data() + (c * O + o) * kh * kw;
                            for (std::int64_t i = 0; i < kh; ++i)
                                for (std::int64_t j = 0; j < kw; ++j) {
                                    double s = 0.0;
                                    for (std::int64_t y = 0; y < H; ++y) {
                                        const std::int64_t oy = y * st - pd + i;
                                        if (oy < 0 || oy >= Ho) continue;
                                        for (std::int64_t xx = 0; xx < W; ++xx) {
                                            const std::int64_t ox = xx * st - pd + j;
                                            if (ox < 0 || ox >= Wo) continue;
                                            s += static_cast<double>(xp[y * W + xx]) *
                                                 static_cast<double>(gp[oy * Wo + ox]);
                                        }
                                    }
                                    ap[i * kw + j] += s;
                                }
                        }
                    }
                detail::accumulate(*wn, acc);
            }
            if (bn && bn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(O), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const S* gp = g + (n * O + o) * Ho * Wo;
                        double s = 0.0;
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) s += static_cast<double>(gp[i]);
                        acc[static_cast<std::size_t>(o)] += s;
                    }
                detail::accumulate(*bn, acc);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> transposed_conv2d(const TensorT<S>& x, const TensorT<S>& w, int stride, int padding) {
    return transposed_conv2d(x, w, TensorT<S>(), stride, padding);
}

// Nearest-neighbour upsampling by an integer factor; the gradient sums each
// f x f block.
template <typename S>
TensorT<S> upsample_nearest(const TensorT<S>& x, int factor) {
    if (x.rank() != 4) throw DimensionError("upsample_nearest: expected rank-4, got " + shape_str(x.shape()));
    if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1, got " + std::to_string(factor));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), f = factor;
    TensorT<S> out(Shape{N, C, H * f, W * f});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const S* xp = x.data() + nc * H * W;
        S* po = out.data() + nc * H * f * W * f;
        for (std::int64_t y = 0; y < H * f; ++y)
            for (std::int64_t xx = 0; xx < W * f; ++xx) po[y * W * f + xx] = xp[(y / f) * W + xx / f];
    }
    detail::check_finite(out, "upsample_nearest");
    if (detail::any_requires_grad<S>({&x})) {
        auto xn = x.node(), on = out.node();
        detail::attach(out, "upsample_nearest", {xn}, [xn, on, N, C, H, W, f] {
            xn->ensure_grad();
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                const S* gp = on->grad.data() + nc * H * f * W * f;
                S* ap = xn->grad.data() + nc * H * W;
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t xx = 0; xx < W; ++xx) {
                        double s = 0.0;
                        for (std::int64_t dy = 0; dy < f; ++dy)
                            for (std::int64_t dx = 0; dx < f; ++dx)
                                s += static_cast<double>(gp[(y * f + dy) * W * f + xx * f + dx]);
                        ap[y * W + xx] += static_cast<S>(s);
                    }
            }
        });
    }
    return out;
}

// Layer norm over the last axis with population (1/d) variance, then affine.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                      double eps = 1e-5) {
    if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
    const std::int64_t d = x.dim(x.rank() - 1);
    if (d == 0) throw DimensionError("layer_norm: zero-width last axis in " + shape_str(x.shape()));
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    const std::int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    // Saved for backward: normalized values and per-row 1/sigma.
    auto xhat = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * d;
        double mean = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mean += static_cast<double>(px[i]);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double c = static_cast<double>(px[i]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(r)] = inv;
        S* po = out.data() + r * d;
        S* ph = xhat->data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            const double h = (static_cast<double>(px[i]) - mean) * inv;
            ph[i] = static_cast<S>(h);
            po[i] = static_cast<S>(h * static_cast<double>(gain.data()[i]) +
                                   static_cast<double>(bias.data()[i]));
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::any_requires_grad<S>({&x, &gain, &bias})) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        detail::attach(out, "layer_norm", {xn, gn, bn}, [xn, gn, bn, on, xhat, inv_sigma, rows, d] {
            const S* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* gr = g + r * d;
                    const S* hr = xhat->data() + r * d;
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double gd = static_cast<double>(gr[i]) * static_cast<double>(gn->value[static_cast<std::size_t>(i)]);
                        m1 += gd;
                        m2 += gd * static_cast<double>(hr[i]);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    const double inv = (*inv_sigma)[static_cast<std::size_t>(r)];
                    S* ar = xn->grad.data() + r * d;
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double gd = static_cast<double>(gr[i]) * static_cast<double>(gn->value[static_cast<std::size_t>(i)]);
                        ar[i] += static_cast<S>(inv * (gd - m1 - static_cast<double>(hr[i]) * m2));
                    }
                }
            }
            if (gn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < d; ++i)
                        acc[static_cast<std::size_t>(i)] += static_cast<double>(g[r * d + i]) *
                                                            static_cast<double>((*xhat)[static_cast<std::size_t>(r * d + i)]);
                detail::accumulate(*gn, acc);
            }
            if (bn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < d; ++i)
                        acc[static_cast<std::size_t>(i)] += static_cast<double>(g[r * d + i]);
                detail::accumulate(*bn, acc);
            }
        });
    }
    return out;
}

// Stable softmax over the last axis.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x) {
    if (x.rank() < 1) throw DimensionError("softmax: scalar input");
    const std::int64_t d = x.dim(x.rank() - 1);
    if (d < 1) throw DimensionError("softmax: empty last axis in " + shape_str(x.shape()));
    const std::int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * d;
        double m = static_cast<double>(px[0]);
        for (std::int64_t i = 1; i < d; ++i) m = std::max(m, static_cast<double>(px[i]));
        double sum = 0.0;
        S* po = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            const double e = std::exp(static_cast<double>(px[i]) - m);
            po[i] = static_cast<S>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t i = 0; i < d; ++i) po[i] = static_cast<S>(static_cast<double>(po[i]) * inv);
    }
    detail::check_finite(out, "softmax");
    if (detail::any_requires_grad<S>({&x})) {
        auto xn = x.node(), on = out.node();
        detail::attach(out, "softmax", {xn}, [xn, on, rows, d] {
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* gr = on->grad.data() + r * d;
                const S* yr = on->value.data() + r * d;
                double dot = 0.0;
                for (std::int64_t i = 0; i < d; ++i)
                    dot += static_cast<double>(gr[i]) * static_cast<double>(yr[i]);
                S* ar = xn->grad.data() + r * d;
                for (std::int64_t i = 0; i < d; ++i)
                    ar[i] += static_cast<S>(static_cast<double>(yr[i]) *
                                            (static_cast<double>(gr[i]) - dot));
            }
        });
    }
    return out;
}

// Mean of -log softmax(logits)[label] over the batch, fused for stability.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy: expected [N, K] logits, got " + shape_str(logits.shape()));
    const std::int64_t N = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                            std::to_string(N));
    for (int l : labels)
        if (l < 0 || l >= K)
            throw ContractError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                                std::to_string(K) + ")");
    double total = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        const S* row = logits.data() + n * K;
        double m = static_cast<double>(row[0]);
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(row[k]));
        double se = 0.0;
        for (std::int64_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k]) - m);
        total += m + std::log(se) - static_cast<double>(row[labels[static_cast<std::size_t>(n)]]);
    }
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(N)));
    detail::check_finite(out, "cross_entropy");
    if (detail::any_requires_grad<S>({&logits})) {
        auto ln = logits.node(), on = out.node();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        detail::attach(out, "cross_entropy", {ln}, [ln, on, labels_copy, N, K] {
            ln->ensure_grad();
            const double g = static_cast<double>(on->grad[0]) / static_cast<double>(N);
            for (std::int64_t n = 0; n < N; ++n) {
                const S* row = ln->value.data() + n * K;
                double m = static_cast<double>(row[0]);
                for (std::int64_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(row[k]));
                double se = 0.0;
                for (std::int64_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k]) - m);
                S* ar = ln->grad.data() + n * K;
                const int lbl = (*labels_copy)[static_cast<std::size_t>(n)];
                for (std::int64_t k = 0; k < K; ++k) {
                    const double p = std::exp(static_cast<double>(row[k]) - m) / se;
                    ar[k] += static_cast<S>(g * (p - (k == lbl ? 1.0 : 0.0)));
                }
            }
        });
    }
    return out;
}

// Mean over axis 1 of [N, T, C] -> [N, C].
template <typename S>
TensorT<S> mean_axis1(const TensorT<S>& x) {
    if (x.rank() != 3) throw DimensionError("mean_axis1: expected rank-3, got " + shape_str(x.shape()));
    const std::int64_t N = x.dim(0), T = x.dim(1), C = x.dim(2);
    TensorT<S> out(Shape{N, C});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t t = 0; t < T; ++t) s += static_cast<double>(x.data()[(n * T + t) * C + c]);
            out.data()[n * C + c] = static_cast<S>(s / static_cast<double>(T));
        }
    detail::check_finite(out, "mean_axis1");
    if (detail::any_requires_grad<S>({&x})) {
        auto xn = x.node(), on = out.node();
        detail::attach(out, "mean_axis1", {xn}, [xn, on, N, T, C] {
            xn->ensure_grad();
            const double inv = 1.0 / static_cast<double>(T);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t c = 0; c < C; ++c)
                        xn->grad[static_cast<std::size_t>((n * T + t) * C + c)] +=
                            static_cast<S>(static_cast<double>(on->grad[static_cast<std::size_t>(n * C + c)]) * inv);
        });
    }
    return out;
}

// Expand a per-head relative-position table [h, T] into bias matrices
// [h, m, m] through a fixed index map (idx[i*m+j] in [0, T)). The gradient
// scatter-adds back into the table.
template <typename S>
TensorT<S> gather_bias(const TensorT<S>& table, const std::vector<int>& index, std::int64_t m) {
    if (table.rank() != 2) throw DimensionError("gather_bias: table must be [heads, entries]");
    if (static_cast<std::int64_t>(index.size()) != m * m)
        throw ContractError("gather_bias: index size " + std::to_string(index.size()) +
                            " does not match m^2 = " + std::to_string(m * m));
    const std::int64_t h = table.dim(0), T = table.dim(1);
    for (int id : index)
        if (id < 0 || id >= T) throw ContractError("gather_bias: index entry out of range");
    TensorT<S> out(Shape{h, m, m});
    for (std::int64_t hh = 0; hh < h; ++hh)
        for (std::int64_t ij = 0; ij < m * m; ++ij)
            out.data()[hh * m * m + ij] = table.data()[hh * T + index[static_cast<std::size_t>(ij)]];
    detail::check_finite(out, "gather_bias");
    if (detail::any_requires_grad<S>({&table})) {
        auto tn = table.node(), on = out.node();
        auto idx = std::make_shared<std::vector<int>>(index);
        detail::attach(out, "gather_bias", {tn}, [tn, on, idx, h, T, m] {
            tn->ensure_grad();
            for (std::int64_t hh = 0; hh < h; ++hh)
                for (std::int64_t ij = 0; ij < m * m; ++ij)
                    tn->grad[static_cast<std::size_t>(hh * T + (*idx)[static_cast<std::size_t>(ij)])] +=
                        on->grad[static_cast<std::size_t>(hh * m * m + ij)];
        });
    }
    return out;
}

// scores[B, h, m, m] + bias[h, m, m] broadcast over the batch axis.
template <typename S>
TensorT<S> add_bias_heads(const TensorT<S>& scores, const TensorT<S>& bias) {
    if (scores.rank() != 4 || bias.rank() != 3 || scores.dim(1) != bias.dim(0) ||
        scores.dim(2) != bias.dim(1) || scores.dim(3) != bias.dim(2))
        throw DimensionError("add_bias_heads: shapes " + shape_str(scores.shape()) + " and " +
                             shape_str(bias.shape()));
    const std::int64_t B = scores.dim(0), rest = bias.size();
    TensorT<S> out(scores.shape());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < rest; ++i)
            out.data()[b * rest + i] = scores.data()[b * rest + i] + bias.data()[i];
    detail::check_finite(out, "add_bias_heads");
    if (detail::any_requires_grad<S>({&scores, &bias})) {
        auto sn = scores.node(), bn = bias.node(), on = out.node();
        detail::attach(out, "add_bias_heads", {sn, bn}, [sn, bn, on, B, rest] {
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) sn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                std::vector<double> acc(static_cast<std::size_t>(rest), 0.0);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t i = 0; i < rest; ++i)
                        acc[static_cast<std::size_t>(i)] +=
                            static_cast<double>(on->grad[static_cast<std::size_t>(b * rest + i)]);
                detail::accumulate(*bn, acc);
            }
        });
    }
    return out;
}

// scores[B, h, m, m] + constant mask[nw, m, m] where window index = b % nw.
// The mask carries no gradient.
template <typename S>
TensorT<S> add_window_mask(const TensorT<S>& scores, const std::vector<S>& mask, std::int64_t nw) {
    if (scores.rank() != 4) throw DimensionError("add_window_mask: scores must be [B, h, m, m]");
    const std::int64_t B = scores.dim(0), h = scores.dim(1), m = scores.dim(2);
    if (scores.dim(3) != m || B % nw != 0 ||
        static_cast<std::int64_t>(mask.size()) != nw * m * m)
        throw DimensionError("add_window_mask: mask of " + std::to_string(mask.size()) +
                             " entries does not tile scores " + shape_str(scores.shape()));
    TensorT<S> out(scores.shape());
    for (std::int64_t b = 0; b < B; ++b) {
        const S* mp = mask.data() + (b % nw) * m * m;
        for (std::int64_t hh = 0; hh < h; ++hh) {
            const S* sp = scores.data() + (b * h + hh) * m * m;
            S* op = out.data() + (b * h + hh) * m * m;
            for (std::int64_t i = 0; i < m * m; ++i) op[i] = sp[i] + mp[i];
        }
    }
    detail::check_finite(out, "add_window_mask");
    if (detail::any_requires_grad<S>({&scores})) {
        auto sn = scores.node(), on = out.node();
        detail::attach(out, "add_window_mask", {sn}, [sn, on] {
            sn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) sn->grad[i] += on->grad[i];
        });
    }
    return out;
}

} // namespace cect
