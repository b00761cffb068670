#pragma once

#include <vector>

#include "segnet/tape.hpp"
#include "segnet/tensor.hpp"

namespace segnet::ops {

enum class Upsample { nearest, bilinear };

// All ops run a plain forward when tape == nullptr and record a backward rule
// otherwise. Binary elementwise ops broadcast by singleton-dimension expansion
// (equal rank, each dim equal or 1).

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x);

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x);

// Full reduction to a {1}-shaped scalar.
template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x);

// Per-pixel channel mix: out[n,j,h,w] = sum_i x[n,i,h,w] * w[i,j] + b[j].
// w is C_in x C_out; bias may be null.
template <class T>
Tensor<T> matmul_1x1(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);

template <class T>
Tensor<T> matmul_1x1(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w) {
    return matmul_1x1(tape, x, w, static_cast<const Tensor<T>*>(nullptr));
}

// Dilated 2-D convolution, zero padding. weight is C_out x C_in x K_h x K_w.
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int dilation, int padding);

// 2x2 max pool, stride 2; gradient routes to the first max in row-major window order.
template <class T>
Tensor<T> maxpool2(Tape<T>* tape, const Tensor<T>& x);

// Doubles H and W. Bilinear uses the align_corners=false mapping
// src = (dst + 0.5)/2 - 0.5, clamped to the source grid.
template <class T>
Tensor<T> upsample2(Tape<T>* tape, const Tensor<T>& x, Upsample mode);

// Channel-axis concatenation of NCHW tensors with equal N,H,W.
template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& xs);

// Average pool to an out_h x out_w grid; H,W must be divisible by the grid.
template <class T>
Tensor<T> avgpool_to(Tape<T>* tape, const Tensor<T>& x, int out_h, int out_w);

// Nearest-neighbour upscale by integer factors (each cell repeated fh x fw).
template <class T>
Tensor<T> replicate(Tape<T>* tape, const Tensor<T>& x, int factor_h, int factor_w);

// Batch normalization over N,H,W per channel. Train mode uses batch statistics
// and updates running stats in place (momentum convention
// running = (1-m)*running + m*batch, unbiased variance for the running update).
template <class T>
Tensor<T> batchnorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum, T eps);

// 0.5*BCE + 0.5*(1 - softDice) with softDice = (2*sum(p*t)+1)/(sum(p)+sum(t)+1).
// Predictions are clamped to [1e-7, 1-1e-7] inside the BCE logs.
template <class T>
Tensor<T> dice_bce_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace segnet::ops
