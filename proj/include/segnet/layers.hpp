#pragma once

#include <utility>
#include <vector>

#include "segnet/ops.hpp"
#include "segnet/rng.hpp"

namespace segnet {

// Kaiming fan-in normal init: N(0, sqrt(2/fan_in)).
template <class T>
void init_kaiming(Tensor<T>& w, int64_t fan_in, Pcg32& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std_dev);
}

template <class T>
struct Conv2d {
    Tensor<T> weight;  // C_out x C_in x K_h x K_w
    Tensor<T> bias;    // C_out
    int stride = 1;
    int dilation = 1;
    int padding = 0;

    static Conv2d make(int64_t c_in, int64_t c_out, int64_t k, int stride, int dilation, int padding,
                       Pcg32& rng) {
        Conv2d c;
        c.weight = Tensor<T>(Shape{c_out, c_in, k, k});
        c.bias = Tensor<T>(Shape{c_out});
        c.stride = stride;
        c.dilation = dilation;
        c.padding = padding;
        init_kaiming(c.weight, c_in * k * k, rng);
        return c;
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
        return ops::conv2d(tape, x, weight, bias, stride, dilation, padding);
    }
};

template <class T>
struct BatchNorm2d {
    Tensor<T> scale, shift;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNorm2d make(int64_t channels) {
        BatchNorm2d bn;
        bn.scale = Tensor<T>::full({channels}, T(1));
        bn.shift = Tensor<T>(Shape{channels});
        bn.running_mean = Tensor<T>(Shape{channels});
        bn.running_var = Tensor<T>::full({channels}, T(1));
        return bn;
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training) {
        return ops::batchnorm(tape, x, scale, shift, running_mean, running_var, training, momentum,
                              eps);
    }
};

// conv -> batchnorm -> relu
template <class T>
struct ConvBnRelu {
    Conv2d<T> conv;
    BatchNorm2d<T> norm;

    static ConvBnRelu make(int64_t c_in, int64_t c_out, int64_t k, int dilation, int padding,
                           Pcg32& rng) {
        return {Conv2d<T>::make(c_in, c_out, k, 1, dilation, padding, rng), BatchNorm2d<T>::make(c_out)};
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training) {
        return ops::relu(tape, norm.forward(tape, conv.forward(tape, x), training));
    }
};

// Additive attention gate:
//   q     = psi^T relu(W_x^T x + W_g^T g + b_g) + b_psi
//   alpha = sigmoid(q)                (one channel, in [0,1])
//   x_hat = x * alpha                 (alpha broadcast over the F_l channels)
// The gating signal g must already be resampled to x's grid by the caller.
template <class T>
struct AttentionGate {
    Tensor<T> w_x;    // F_l x F_int
    Tensor<T> w_g;    // F_g x F_int
    Tensor<T> b_g;    // F_int
    Tensor<T> psi;    // F_int x 1
    Tensor<T> b_psi;  // 1

    struct Result {
        Tensor<T> x_hat;
        Tensor<T> alpha;
    };

    // psi and b_psi start at zero so an untrained gate passes 0.5*x through.
    static AttentionGate make(int64_t f_l, int64_t f_g, int64_t f_int, Pcg32& rng) {
        AttentionGate gate;
        gate.w_x = Tensor<T>(Shape{f_l, f_int});
        gate.w_g = Tensor<T>(Shape{f_g, f_int});
        gate.b_g = Tensor<T>(Shape{f_int});
        gate.psi = Tensor<T>(Shape{f_int, 1});
        gate.b_psi = Tensor<T>(Shape{1});
        init_kaiming(gate.w_x, f_l, rng);
        init_kaiming(gate.w_g, f_g, rng);
        return gate;
    }

    Result forward(Tape<T>* tape, const Tensor<T>& x_l, const Tensor<T>& g) const {
        if (x_l.dim(0) != g.dim(0) || x_l.dim(2) != g.dim(2) || x_l.dim(3) != g.dim(3)) {
            throw shape_error("attention_gate: spatial mismatch between x " + shape_str(x_l.shape()) +
                              " and g " + shape_str(g.shape()));
        }
        Tensor<T> ax = ops::matmul_1x1(tape, x_l, w_x);
        Tensor<T> ag = ops::matmul_1x1(tape, g, w_g, &b_g);
        Tensor<T> s = ops::relu(tape, ops::add(tape, ax, ag));
        Tensor<T> q = ops::matmul_1x1(tape, s, psi, &b_psi);
        Tensor<T> alpha = ops::sigmoid(tape, q);
        Tensor<T> x_hat = ops::mul(tape, x_l, alpha);
        return {x_hat, alpha};
    }
};

// Parallel dilated-conv branches fused back to the input width. The rate-1
// branch is a 1x1 conv; rate-r branches are 3x3 convs with pad = dilation = r,
// so every branch preserves H x W.
template <class T>
struct AsppBlock {
    std::vector<int> rates;
    std::vector<ConvBnRelu<T>> branches;
    ConvBnRelu<T> fuse;  // 1x1 over the concatenated branches

    static AsppBlock make(int64_t channels, const std::vector<int>& rates, Pcg32& rng) {
        if (rates.empty()) throw config_error("aspp_block needs at least one rate");
        AsppBlock block;
        block.rates = rates;
        for (int r : rates) {
            if (r == 1)
                block.branches.push_back(ConvBnRelu<T>::make(channels, channels, 1, 1, 0, rng));
            else
                block.branches.push_back(ConvBnRelu<T>::make(channels, channels, 3, r, r, rng));
        }
        block.fuse = ConvBnRelu<T>::make(channels * static_cast<int64_t>(rates.size()), channels, 1,
                                         1, 0, rng);
        return block;
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training) {
        std::vector<Tensor<T>> outs;
        outs.reserve(branches.size());
        for (auto& b : branches) outs.push_back(b.forward(tape, x, training));
        return fuse.forward(tape, ops::concat_channels(tape, outs), training);
    }
};

// Pyramid pooling: per scale s, average-pool to s x s, 1x1 conv + BN + ReLU,
// replicate back to H x W; concatenate with the input and fuse by 1x1 conv.
template <class T>
struct SppBlock {
    std::vector<int> scales;
    std::vector<ConvBnRelu<T>> projections;
    ConvBnRelu<T> fuse;

    static SppBlock make(int64_t channels, const std::vector<int>& scales, Pcg32& rng) {
        if (scales.empty()) throw config_error("spp_block needs at least one scale");
        SppBlock block;
        block.scales = scales;
        for (size_t i = 0; i < scales.size(); ++i)
            block.projections.push_back(ConvBnRelu<T>::make(channels, channels, 1, 1, 0, rng));
        block.fuse = ConvBnRelu<T>::make(channels * static_cast<int64_t>(scales.size() + 1), channels,
                                         1, 1, 0, rng);
        return block;
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training) {
        const int64_t h = x.dim(2), w = x.dim(3);
        std::vector<Tensor<T>> outs{x};
        for (size_t i = 0; i < scales.size(); ++i) {
            const int s = scales[i];
            if (s <= 0 || h % s != 0 || w % s != 0) {
                throw shape_error("spp_block: input " + shape_str(x.shape()) +
                                  " not divisible by grid scale " + std::to_string(s));
            }
            Tensor<T> pooled = ops::avgpool_to(tape, x, s, s);
            Tensor<T> proj = projections[i].forward(tape, pooled, training);
            outs.push_back(ops::replicate(tape, proj, static_cast<int>(h / s), static_cast<int>(w / s)));
        }
        return fuse.forward(tape, ops::concat_channels(tape, outs), training);
    }
};

}  // namespace segnet
