#include "segnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "segnet/gemm.hpp"

namespace segnet::ops {

namespace {

// Row-major strides with broadcast dims (extent 1) zeroed out.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
    const int nd = static_cast<int>(shape.size());
    std::vector<int64_t> strides(static_cast<size_t>(nd), 0);
    int64_t s = 1;
    for (int d = nd - 1; d >= 0; --d) {
        strides[static_cast<size_t>(d)] = (shape[static_cast<size_t>(d)] == 1 && out_shape[static_cast<size_t>(d)] > 1) ? 0 : s;
        s *= shape[static_cast<size_t>(d)];
    }
    return strides;
}

// Odometer walk over out_shape yielding (out_index, a_index, b_index).
template <class Fn>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
    const int nd = static_cast<int>(out_shape.size());
    const int64_t total = shape_numel(out_shape);
    if (total == 0) return;
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t ai = 0, bi = 0;
    for (int64_t oi = 0;; ++oi) {
        fn(oi, ai, bi);
        int d = nd - 1;
        for (; d >= 0; --d) {
            ++idx[static_cast<size_t>(d)];
            ai += sa[static_cast<size_t>(d)];
            bi += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            ai -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            bi -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
        if (d < 0) break;
    }
}

template <class T>
void check_binary_shapes(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!broadcastable(a.shape(), b.shape())) {
        throw shape_error(std::string(op) + ": shapes not broadcastable: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
}

struct ConvGeom {
    int64_t n, c_in, h, w, c_out, kh, kw, h_out, w_out;
    int stride, dilation, padding;
};

template <class T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, int stride, int dilation,
                       int padding) {
    if (x.ndim() != 4 || weight.ndim() != 4) {
        throw shape_error("conv2d expects NCHW input and OIHW weight, got " + shape_str(x.shape()) +
                          " and " + shape_str(weight.shape()));
    }
    ConvGeom g{};
    g.n = x.dim(0);
    g.c_in = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.c_out = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = stride;
    g.dilation = dilation;
    g.padding = padding;
    if (weight.dim(1) != g.c_in) {
        throw shape_error("conv2d channel mismatch: input has " + std::to_string(g.c_in) +
                          " channels, weight expects " + std::to_string(weight.dim(1)));
    }
    g.h_out = (g.h + 2 * padding - static_cast<int64_t>(dilation) * (g.kh - 1) - 1) / stride + 1;
    g.w_out = (g.w + 2 * padding - static_cast<int64_t>(dilation) * (g.kw - 1) - 1) / stride + 1;
    if (g.h_out <= 0 || g.w_out <= 0) {
        throw shape_error("conv2d output dims non-positive for input " + shape_str(x.shape()) +
                          ", kernel " + shape_str(weight.shape()) + ", stride " + std::to_string(stride) +
                          ", dilation " + std::to_string(dilation) + ", pad " + std::to_string(padding));
    }
    return g;
}

// cols is (C_in*Kh*Kw) x (H_out*W_out); out-of-range taps read as zero.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int64_t p_total = g.h_out * g.w_out;
    const int64_t ck = g.c_in * g.kh * g.kw;
    for (int64_t row = 0; row < ck; ++row) {
        const int64_t c = row / (g.kh * g.kw);
        const int64_t k_h = (row / g.kw) % g.kh;
        const int64_t k_w = row % g.kw;
        const T* x_c = x + c * g.h * g.w;
        T* col_row = cols + row * p_total;
        for (int64_t oh = 0; oh < g.h_out; ++oh) {
            const int64_t ih = oh * g.stride - g.padding + g.dilation * k_h;
            T* dst = col_row + oh * g.w_out;
            if (ih < 0 || ih >= g.h) {
                std::fill(dst, dst + g.w_out, T(0));
                continue;
            }
            const T* src = x_c + ih * g.w;
            for (int64_t ow = 0; ow < g.w_out; ++ow) {
                const int64_t iw = ow * g.stride - g.padding + g.dilation * k_w;
                dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
            }
        }
    }
}

template <class T>
void col2im_acc(const T* cols, const ConvGeom& g, T* dx) {
    const int64_t p_total = g.h_out * g.w_out;
    const int64_t ck = g.c_in * g.kh * g.kw;
    for (int64_t row = 0; row < ck; ++row) {
        const int64_t c = row / (g.kh * g.kw);
        const int64_t k_h = (row / g.kw) % g.kh;
        const int64_t k_w = row % g.kw;
        T* dx_c = dx + c * g.h * g.w;
        const T* col_row = cols + row * p_total;
        for (int64_t oh = 0; oh < g.h_out; ++oh) {
            const int64_t ih = oh * g.stride - g.padding + g.dilation * k_h;
            if (ih < 0 || ih >= g.h) continue;
            const T* src = col_row + oh * g.w_out;
            T* dst = dx_c + ih * g.w;
            for (int64_t ow = 0; ow < g.w_out; ++ow) {
                const int64_t iw = ow * g.stride - g.padding + g.dilation * k_w;
                if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
            }
        }
    }
}

}  // namespace

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_binary_shapes("add", a, b);
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(out_shape);
    const bool plain = a.shape() == b.shape();
    if (plain) {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        for_each_broadcast(out_shape, sa, sb,
                           [&](int64_t oi, int64_t ai, int64_t bi) { po[oi] = pa[ai] + pb[bi]; });
    }
    if (tape) {
        tape->record({&a, &b}, out, [a, b, out, out_shape]() {
            const T* go = out.grad();
            if (a.shape() == b.shape()) {
                const int64_t n = out.numel();
                if (a.has_grad()) {
                    T* ga = a.grad();
                    for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
                }
                if (b.has_grad()) {
                    T* gb = b.grad();
                    for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
                }
                return;
            }
            auto sa = broadcast_strides(a.shape(), out_shape);
            auto sb = broadcast_strides(b.shape(), out_shape);
            T* ga = a.has_grad() ? a.grad() : nullptr;
            T* gb = b.has_grad() ? b.grad() : nullptr;
            for_each_broadcast(out_shape, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) {
                if (ga) ga[ai] += go[oi];
                if (gb) gb[bi] += go[oi];
            });
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_binary_shapes("mul", a, b);
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(out_shape);
    if (a.shape() == b.shape()) {
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        for_each_broadcast(out_shape, sa, sb,
                           [&](int64_t oi, int64_t ai, int64_t bi) { po[oi] = pa[ai] * pb[bi]; });
    }
    if (tape) {
        tape->record({&a, &b}, out, [a, b, out, out_shape]() {
            const T* go = out.grad();
            const T* pa = a.data();
            const T* pb = b.data();
            if (a.shape() == b.shape()) {
                const int64_t n = out.numel();
                if (a.has_grad()) {
                    T* ga = a.grad();
                    for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
                }
                if (b.has_grad()) {
                    T* gb = b.grad();
                    for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
                }
                return;
            }
            auto sa = broadcast_strides(a.shape(), out_shape);
            auto sb = broadcast_strides(b.shape(), out_shape);
            T* ga = a.has_grad() ? a.grad() : nullptr;
            T* gb = b.has_grad() ? b.grad() : nullptr;
            for_each_broadcast(out_shape, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) {
                if (ga) ga[ai] += go[oi] * pb[bi];
                if (gb) gb[bi] += go[oi] * pa[ai];
            });
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (tape) {
        tape->record({&x}, out, [x, out]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            const T* po = out.data();
            T* gx = x.grad();
            const int64_t n = out.numel();
            // relu'(r) = 1 for r > 0 else 0; out > 0 iff r > 0.
            for (int64_t i = 0; i < n; ++i) gx[i] += po[i] > T(0) ? go[i] : T(0);
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
    if (tape) {
        tape->record({&x}, out, [x, out]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            const T* s = out.data();
            T* gx = x.grad();
            const int64_t n = out.numel();
            // sigmoid'(s) = s*(1-s) in terms of the output.
            for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * s[i] * (T(1) - s[i]);
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(Shape{1});
    const T* px = x.data();
    T acc = T(0);
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;
    if (tape) {
        tape->record({&x}, out, [x, out]() {
            if (!x.has_grad()) return;
            const T g = out.grad()[0];
            T* gx = x.grad();
            const int64_t n = x.numel();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> matmul_1x1(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
    if (x.ndim() != 4 || w.ndim() != 2) {
        throw shape_error("matmul_1x1 expects NCHW input and 2-d weight, got " +
                          shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int64_t c_out = w.dim(1);
    if (w.dim(0) != c_in) {
        throw shape_error("matmul_1x1 channel mismatch: input has " + std::to_string(c_in) +
                          " channels, weight expects " + std::to_string(w.dim(0)));
    }
    if (bias && bias->numel() != c_out) {
        throw shape_error("matmul_1x1 bias size " + std::to_string(bias->numel()) +
                          " != C_out " + std::to_string(c_out));
    }
    const int64_t p = h * ww;
    Tensor<T> out(Shape{n, c_out, h, ww});
    T* po = out.data();
    if (bias) {
        const T* pb = bias->data();
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t j = 0; j < c_out; ++j)
                std::fill(po + (ni * c_out + j) * p, po + (ni * c_out + j + 1) * p, pb[j]);
    }
    for (int64_t ni = 0; ni < n; ++ni) {
        // out[ni] (C_out x P) += w^T (C_out x C_in) * x[ni] (C_in x P)
        gemm_tn_acc(c_out, p, c_in, w.data(), x.data() + ni * c_in * p, po + ni * c_out * p);
    }
    if (tape) {
        Tensor<T> b = bias ? *bias : Tensor<T>();
        std::vector<const Tensor<T>*> ins{&x, &w};
        if (bias) ins.push_back(bias);
        tape->record(ins, out, [x, w, b, out, n, c_in, c_out, p]() {
            const T* go = out.grad();
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* go_n = go + ni * c_out * p;
                if (x.has_grad()) {
                    // dX[ni] (C_in x P) += w (C_in x C_out) * dY[ni] (C_out x P)
                    gemm_nn_acc(c_in, p, c_out, w.data(), go_n, x.grad() + ni * c_in * p);
                }
                if (w.has_grad()) {
                    // dW (C_in x C_out) += x[ni] (C_in x P) * dY[ni]^T (P x C_out)
                    gemm_nt_acc(c_in, c_out, p, x.data() + ni * c_in * p, go_n, w.grad());
                }
            }
            if (b.defined() && b.has_grad()) {
                T* gb = b.grad();
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t j = 0; j < c_out; ++j) {
                        const T* row = go + (ni * c_out + j) * p;
                        T acc = T(0);
                        for (int64_t k = 0; k < p; ++k) acc += row[k];
                        gb[j] += acc;
                    }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int dilation, int padding) {
    const ConvGeom g = conv_geometry(x, weight, stride, dilation, padding);
    if (bias.numel() != g.c_out) {
        throw shape_error("conv2d bias size " + std::to_string(bias.numel()) + " != C_out " +
                          std::to_string(g.c_out));
    }
    const int64_t p = g.h_out * g.w_out;
    const int64_t ck = g.c_in * g.kh * g.kw;
    Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
    T* po = out.data();
    const T* pb = bias.data();
    for (int64_t ni = 0; ni < g.n; ++ni)
        for (int64_t o = 0; o < g.c_out; ++o)
            std::fill(po + (ni * g.c_out + o) * p, po + (ni * g.c_out + o + 1) * p, pb[o]);

    // Columns are cached for the backward pass only when recording.
    auto cols_all = tape ? std::make_shared<std::vector<T>>(static_cast<size_t>(g.n * ck * p))
                         : nullptr;
    std::vector<T> scratch;
    if (!tape) scratch.resize(static_cast<size_t>(ck * p));
    for (int64_t ni = 0; ni < g.n; ++ni) {
        T* cols = tape ? cols_all->data() + ni * ck * p : scratch.data();
        im2col(x.data() + ni * g.c_in * g.h * g.w, g, cols);
        gemm_nn_acc(g.c_out, p, ck, weight.data(), cols, po + ni * g.c_out * p);
    }

    if (tape) {
        tape->record({&x, &weight, &bias}, out, [x, weight, bias, out, g, cols_all, p, ck]() {
            const T* go = out.grad();
            if (bias.has_grad()) {
                T* gb = bias.grad();
                for (int64_t ni = 0; ni < g.n; ++ni)
                    for (int64_t o = 0; o < g.c_out; ++o) {
                        const T* row = go + (ni * g.c_out + o) * p;
                        T acc = T(0);
                        for (int64_t k = 0; k < p; ++k) acc += row[k];
                        gb[o] += acc;
                    }
            }
            std::vector<T> dcols;
            if (x.has_grad()) dcols.resize(static_cast<size_t>(ck * p));
            for (int64_t ni = 0; ni < g.n; ++ni) {
                const T* go_n = go + ni * g.c_out * p;
                const T* cols = cols_all->data() + ni * ck * p;
                if (weight.has_grad()) {
                    // dW (C_out x CK) += dY[ni] (C_out x P) * cols^T (P x CK)
                    gemm_nt_acc(g.c_out, ck, p, go_n, cols, weight.grad());
                }
                if (x.has_grad()) {
                    std::fill(dcols.begin(), dcols.end(), T(0));
                    // dcols (CK x P) += W^T (CK x C_out) * dY[ni]
                    gemm_tn_acc(ck, p, g.c_out, weight.data(), go_n, dcols.data());
                    col2im_acc(dcols.data(), g, x.grad() + ni * g.c_in * g.h * g.w);
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> maxpool2(Tape<T>* tape, const Tensor<T>& x) {
    if (x.ndim() != 4) throw shape_error("maxpool2 expects NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw shape_error("maxpool2 requires even spatial dims, got " + shape_str(x.shape()));
    }
    const int64_t oh = h / 2, ow = w / 2;
    Tensor<T> out(Shape{n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    const T* px = x.data();
    T* po = out.data();
    int64_t* pam = argmax->data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        for (int64_t i = 0; i < oh; ++i) {
            for (int64_t j = 0; j < ow; ++j) {
                // First-encountered max in row-major window order wins ties.
                int64_t best = (2 * i) * w + 2 * j;
                T best_v = plane[best];
                const int64_t cands[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j,
                                          (2 * i + 1) * w + 2 * j + 1};
                for (int64_t cand : cands) {
                    if (plane[cand] > best_v) {
                        best_v = plane[cand];
                        best = cand;
                    }
                }
                po[(nc * oh + i) * ow + j] = best_v;
                pam[(nc * oh + i) * ow + j] = nc * h * w + best;
            }
        }
    }
    if (tape) {
        tape->record({&x}, out, [x, out, argmax]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            T* gx = x.grad();
            const int64_t m = out.numel();
            const int64_t* pam = argmax->data();
            for (int64_t i = 0; i < m; ++i) gx[pam[i]] += go[i];
        });
    }
    return out;
}

namespace {

struct LerpAxis {
    std::vector<int64_t> i0, i1;
    std::vector<double> f;  // weight on i1
};

// align_corners=false source mapping for a fixed x2 upsample.
LerpAxis lerp_axis(int64_t src_size) {
    LerpAxis ax;
    const int64_t dst = src_size * 2;
    ax.i0.resize(static_cast<size_t>(dst));
    ax.i1.resize(static_cast<size_t>(dst));
    ax.f.resize(static_cast<size_t>(dst));
    for (int64_t d = 0; d < dst; ++d) {
        double src = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
        if (src < 0.0) src = 0.0;
        int64_t lo = static_cast<int64_t>(src);
        if (lo > src_size - 1) lo = src_size - 1;
        int64_t hi = std::min<int64_t>(lo + 1, src_size - 1);
        ax.i0[static_cast<size_t>(d)] = lo;
        ax.i1[static_cast<size_t>(d)] = hi;
        ax.f[static_cast<size_t>(d)] = src - static_cast<double>(lo);
    }
    return ax;
}

}  // namespace

template <class T>
Tensor<T> upsample2(Tape<T>* tape, const Tensor<T>& x, Upsample mode) {
    if (x.ndim() != 4) throw shape_error("upsample2 expects NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h * 2, ow = w * 2;
    Tensor<T> out(Shape{n, c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    if (mode == Upsample::nearest) {
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const T* plane = px + nc * h * w;
            T* oplane = po + nc * oh * ow;
            for (int64_t i = 0; i < oh; ++i)
                for (int64_t j = 0; j < ow; ++j) oplane[i * ow + j] = plane[(i / 2) * w + j / 2];
        }
        if (tape) {
            tape->record({&x}, out, [x, out, n, c, h, w, oh, ow]() {
                if (!x.has_grad()) return;
                const T* go = out.grad();
                T* gx = x.grad();
                for (int64_t nc = 0; nc < n * c; ++nc) {
                    T* gplane = gx + nc * h * w;
                    const T* goplane = go + nc * oh * ow;
                    for (int64_t i = 0; i < oh; ++i)
                        for (int64_t j = 0; j < ow; ++j) gplane[(i / 2) * w + j / 2] += goplane[i * ow + j];
                }
            });
        }
        return out;
    }
    auto ah = std::make_shared<LerpAxis>(lerp_axis(h));
    auto aw = std::make_shared<LerpAxis>(lerp_axis(w));
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        T* oplane = po + nc * oh * ow;
        for (int64_t i = 0; i < oh; ++i) {
            const int64_t r0 = ah->i0[static_cast<size_t>(i)], r1 = ah->i1[static_cast<size_t>(i)];
            const T fy = static_cast<T>(ah->f[static_cast<size_t>(i)]);
            for (int64_t j = 0; j < ow; ++j) {
                const int64_t c0 = aw->i0[static_cast<size_t>(j)], c1 = aw->i1[static_cast<size_t>(j)];
                const T fx = static_cast<T>(aw->f[static_cast<size_t>(j)]);
                const T v00 = plane[r0 * w + c0], v01 = plane[r0 * w + c1];
                const T v10 = plane[r1 * w + c0], v11 = plane[r1 * w + c1];
                oplane[i * ow + j] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                                     fy * ((T(1) - fx) * v10 + fx * v11);
            }
        }
    }
    if (tape) {
        tape->record({&x}, out, [x, out, ah, aw, n, c, h, w, oh, ow]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            T* gx = x.grad();
            for (int64_t nc = 0; nc < n * c; ++nc) {
                T* gplane = gx + nc * h * w;
                const T* goplane = go + nc * oh * ow;
                for (int64_t i = 0; i < oh; ++i) {
                    const int64_t r0 = ah->i0[static_cast<size_t>(i)], r1 = ah->i1[static_cast<size_t>(i)];
                    const T fy = static_cast<T>(ah->f[static_cast<size_t>(i)]);
                    for (int64_t j = 0; j < ow; ++j) {
                        const int64_t c0 = aw->i0[static_cast<size_t>(j)], c1 = aw->i1[static_cast<size_t>(j)];
                        const T fx = static_cast<T>(aw->f[static_cast<size_t>(j)]);
                        const T g = goplane[i * ow + j];
                        gplane[r0 * w + c0] += (T(1) - fy) * (T(1) - fx) * g;
                        gplane[r0 * w + c1] += (T(1) - fy) * fx * g;
                        gplane[r1 * w + c0] += fy * (T(1) - fx) * g;
                        gplane[r1 * w + c1] += fy * fx * g;
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw shape_error("concat_channels: empty input list");
    const int64_t n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    int64_t c_total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != 4 || x.dim(0) != n || x.dim(2) != h || x.dim(3) != w) {
            throw shape_error("concat_channels: incompatible shape " + shape_str(x.shape()));
        }
        c_total += x.dim(1);
    }
    Tensor<T> out(Shape{n, c_total, h, w});
    const int64_t plane = h * w;
    T* po = out.data();
    for (int64_t ni = 0; ni < n; ++ni) {
        int64_t c_off = 0;
        for (const auto& x : xs) {
            const int64_t ci = x.dim(1);
            std::memcpy(po + (ni * c_total + c_off) * plane, x.data() + ni * ci * plane,
                        static_cast<size_t>(ci * plane) * sizeof(T));
            c_off += ci;
        }
    }
    if (tape) {
        std::vector<const Tensor<T>*> ptrs;
        for (const auto& x : xs) ptrs.push_back(&x);
        auto xs_copy = xs;
        Tensor<T> out_copy = out;
        tape->record(ptrs, out, [xs_copy, out_copy, n, c_total, plane]() {
            const T* go = out_copy.grad();
            for (int64_t ni = 0; ni < n; ++ni) {
                int64_t c_off = 0;
                for (auto& x : xs_copy) {
                    const int64_t ci = x.dim(1);
                    if (x.has_grad()) {
                        T* gx = x.grad() + ni * ci * plane;
                        const T* src = go + (ni * c_total + c_off) * plane;
                        for (int64_t k = 0; k < ci * plane; ++k) gx[k] += src[k];
                    }
                    c_off += ci;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> avgpool_to(Tape<T>* tape, const Tensor<T>& x, int out_h, int out_w) {
    if (x.ndim() != 4) throw shape_error("avgpool_to expects NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (out_h <= 0 || out_w <= 0 || h % out_h != 0 || w % out_w != 0) {
        throw shape_error("avgpool_to: input " + shape_str(x.shape()) + " not divisible by grid " +
                          std::to_string(out_h) + "x" + std::to_string(out_w));
    }
    const int64_t kh = h / out_h, kw = w / out_w;
    const T inv = T(1) / static_cast<T>(kh * kw);
    Tensor<T> out(Shape{n, c, out_h, out_w});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        T* oplane = po + nc * out_h * out_w;
        for (int64_t i = 0; i < out_h; ++i) {
            for (int64_t j = 0; j < out_w; ++j) {
                T acc = T(0);
                for (int64_t di = 0; di < kh; ++di) {
                    const T* row = plane + (i * kh + di) * w + j * kw;
                    for (int64_t dj = 0; dj < kw; ++dj) acc += row[dj];
                }
                oplane[i * out_w + j] = acc * inv;
            }
        }
    }
    if (tape) {
        tape->record({&x}, out, [x, out, n, c, h, w, out_h, out_w, kh, kw, inv]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            T* gx = x.grad();
            for (int64_t nc = 0; nc < n * c; ++nc) {
                T* gplane = gx + nc * h * w;
                const T* goplane = go + nc * out_h * out_w;
                for (int64_t i = 0; i < out_h; ++i)
                    for (int64_t j = 0; j < out_w; ++j) {
                        const T g = goplane[i * out_w + j] * inv;
                        for (int64_t di = 0; di < kh; ++di) {
                            T* row = gplane + (i * kh + di) * w + j * kw;
                            for (int64_t dj = 0; dj < kw; ++dj) row[dj] += g;
                        }
                    }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> replicate(Tape<T>* tape, const Tensor<T>& x, int factor_h, int factor_w) {
    if (x.ndim() != 4) throw shape_error("replicate expects NCHW, got " + shape_str(x.shape()));
    if (factor_h < 1 || factor_w < 1) throw shape_error("replicate factors must be >= 1");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h * factor_h, ow = w * factor_w;
    Tensor<T> out(Shape{n, c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        T* oplane = po + nc * oh * ow;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j) oplane[i * ow + j] = plane[(i / factor_h) * w + j / factor_w];
    }
    if (tape) {
        tape->record({&x}, out, [x, out, n, c, h, w, oh, ow, factor_h, factor_w]() {
            if (!x.has_grad()) return;
            const T* go = out.grad();
            T* gx = x.grad();
            for (int64_t nc = 0; nc < n * c; ++nc) {
                T* gplane = gx + nc * h * w;
                const T* goplane = go + nc * oh * ow;
                for (int64_t i = 0; i < oh; ++i)
                    for (int64_t j = 0; j < ow; ++j)
                        gplane[(i / factor_h) * w + j / factor_w] += goplane[i * ow + j];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> batchnorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum, T eps) {
    if (x.ndim() != 4) throw shape_error("batchnorm expects NCHW, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (scale.numel() != c || shift.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c) {
        throw shape_error("batchnorm parameter size mismatch for " + std::to_string(c) + " channels");
    }
    const int64_t m = n * h * w;
    if (training && m < 2) {
        throw shape_error("batchnorm train mode needs at least 2 values per channel, got " +
                          std::to_string(m));
    }
    const int64_t plane = h * w;
    Tensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    const T* px = x.data();
    const T* pg = scale.data();
    const T* pb = shift.data();
    T* po = out.data();

    for (int64_t ci = 0; ci < c; ++ci) {
        T mean, var;
        if (training) {
            double acc = 0.0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* p = px + (ni * c + ci) * plane;
                for (int64_t k = 0; k < plane; ++k) acc += static_cast<double>(p[k]);
            }
            mean = static_cast<T>(acc / static_cast<double>(m));
            double vacc = 0.0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* p = px + (ni * c + ci) * plane;
                for (int64_t k = 0; k < plane; ++k) {
                    const double d = static_cast<double>(p[k]) - static_cast<double>(mean);
                    vacc += d * d;
                }
            }
            var = static_cast<T>(vacc / static_cast<double>(m));
            // Unbiased variance feeds the running estimate.
            running_mean.data()[ci] = (T(1) - momentum) * running_mean.data()[ci] + momentum * mean;
            running_var.data()[ci] =
                (T(1) - momentum) * running_var.data()[ci] +
                momentum * static_cast<T>(vacc / static_cast<double>(m - 1));
        } else {
            mean = running_mean.data()[ci];
            var = running_var.data()[ci];
        }
        const T istd = T(1) / std::sqrt(var + eps);
        (*invstd)[static_cast<size_t>(ci)] = istd;
        for (int64_t ni = 0; ni < n; ++ni) {
            const T* p = px + (ni * c + ci) * plane;
            T* ph = xhat->data() + (ni * c + ci) * plane;
            T* q = po + (ni * c + ci) * plane;
            for (int64_t k = 0; k < plane; ++k) {
                const T xh = (p[k] - mean) * istd;
                ph[k] = xh;
                q[k] = pg[ci] * xh + pb[ci];
            }
        }
    }

    if (tape) {
        tape->record({&x, &scale, &shift}, out,
                     [x, scale, shift, out, xhat, invstd, n, c, plane, m, training]() {
            const T* go = out.grad();
            const T* ph = xhat->data();
            const T* pg = scale.data();
            for (int64_t ci = 0; ci < c; ++ci) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const T* gy = go + (ni * c + ci) * plane;
                    const T* xh = ph + (ni * c + ci) * plane;
                    for (int64_t k = 0; k < plane; ++k) {
                        sum_dy += static_cast<double>(gy[k]);
                        sum_dy_xhat += static_cast<double>(gy[k]) * static_cast<double>(xh[k]);
                    }
                }
                if (shift.has_grad()) shift.grad()[ci] += static_cast<T>(sum_dy);
                if (scale.has_grad()) scale.grad()[ci] += static_cast<T>(sum_dy_xhat);
                if (x.has_grad()) {
                    const T istd = (*invstd)[static_cast<size_t>(ci)];
                    const T k1 = pg[ci] * istd;
                    T* gx = x.grad();
                    if (training) {
                        const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
                        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const T* gy = go + (ni * c + ci) * plane;
                            const T* xh = ph + (ni * c + ci) * plane;
                            T* gxp = gx + (ni * c + ci) * plane;
                            for (int64_t k = 0; k < plane; ++k)
                                gxp[k] += k1 * (gy[k] - mean_dy - xh[k] * mean_dy_xhat);
                        }
                    } else {
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const T* gy = go + (ni * c + ci) * plane;
                            T* gxp = gx + (ni * c + ci) * plane;
                            for (int64_t k = 0; k < plane; ++k) gxp[k] += k1 * gy[k];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> dice_bce_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) {
        throw shape_error("dice_bce_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                          shape_str(target.shape()));
    }
    const int64_t m = pred.numel();
    if (m == 0) throw shape_error("dice_bce_loss on empty tensor");
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    const T* pp = pred.data();
    const T* pt = target.data();
    double bce = 0.0, s_p = 0.0, s_t = 0.0, s_pt = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const double p = static_cast<double>(pp[i]);
        const double t = static_cast<double>(pt[i]);
        const double pc = std::min(std::max(p, lo), hi);
        bce += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
        s_p += p;
        s_t += t;
        s_pt += p * t;
    }
    bce /= static_cast<double>(m);
    const double num = 2.0 * s_pt + 1.0;
    const double den = s_p + s_t + 1.0;
    const double soft_dice = num / den;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(0.5 * bce + 0.5 * (1.0 - soft_dice)));
    if (tape) {
        tape->record({&pred, &target}, out, [pred, target, out, m, num, den, lo, hi]() {
            if (!pred.has_grad()) return;
            const T g = out.grad()[0];
            const T* pp = pred.data();
            const T* pt = target.data();
            T* gp = pred.grad();
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t i = 0; i < m; ++i) {
                const double p = static_cast<double>(pp[i]);
                const double t = static_cast<double>(pt[i]);
                double dbce = 0.0;
                if (p > lo && p < hi) dbce = inv_m * (p - t) / (p * (1.0 - p));
                const double dsoft = (2.0 * t * den - num) / (den * den);
                gp[i] += g * static_cast<T>(0.5 * dbce - 0.5 * dsoft);
            }
        });
    }
    return out;
}

#define SEGNET_INSTANTIATE_OPS(T)                                                                  \
    template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> relu<T>(Tape<T>*, const Tensor<T>&);                                        \
    template Tensor<T> sigmoid<T>(Tape<T>*, const Tensor<T>&);                                     \
    template Tensor<T> sum<T>(Tape<T>*, const Tensor<T>&);                                         \
    template Tensor<T> matmul_1x1<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,                 \
                                     const Tensor<T>*);                                            \
    template Tensor<T> conv2d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                 int, int, int);                                                   \
    template Tensor<T> maxpool2<T>(Tape<T>*, const Tensor<T>&);                                    \
    template Tensor<T> upsample2<T>(Tape<T>*, const Tensor<T>&, Upsample);                         \
    template Tensor<T> concat_channels<T>(Tape<T>*, const std::vector<Tensor<T>>&);                \
    template Tensor<T> avgpool_to<T>(Tape<T>*, const Tensor<T>&, int, int);                        \
    template Tensor<T> replicate<T>(Tape<T>*, const Tensor<T>&, int, int);                         \
    template Tensor<T> batchnorm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,                  \
                                    const Tensor<T>&, Tensor<T>&, Tensor<T>&, bool, T, T);         \
    template Tensor<T> dice_bce_loss<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);

SEGNET_INSTANTIATE_OPS(float)
SEGNET_INSTANTIATE_OPS(double)

}  // namespace segnet::ops
