#pragma once

#include "m2mil/common.hpp"

#include <cstdint>
#include <string>

namespace m2mil::numerics {

// ---------------------------------------------------------------------------
// Affine map: out = x * W + b, with b replicated across rows.
// x: L x Din, W: Din x Dout, b: 1 x Dout.
// ---------------------------------------------------------------------------

Matrix linear_forward(const CRef& x, const CRef& w, const CRef& b);

// Single-use record of the inputs a backward pass needs.
struct LinearTape {
  Matrix x;
  Matrix w;
  bool used = false;
};

Matrix linear_forward(const CRef& x, const CRef& w, const CRef& b, LinearTape& tape);

struct LinearGrads {
  Matrix dx;
  Matrix dw;
  Matrix db;  // 1 x Dout
};

LinearGrads linear_backward(LinearTape& tape, const CRef& dout);

// ---------------------------------------------------------------------------
// Depthwise causal 1-D convolution over the sequence axis.
// x: L x D, kernel: K x D (tap k weights x[t - K + 1 + k]), bias: 1 x D.
// Positions before the sequence start are treated as zero.
// ---------------------------------------------------------------------------

Matrix causal_conv1d_forward(const CRef& x, const CRef& kernel, const CRef& bias);

struct ConvGrads {
  Matrix dx;
  Matrix dkernel;
  Matrix dbias;
};

ConvGrads causal_conv1d_backward(const CRef& x, const CRef& kernel, const CRef& dout);

// ---------------------------------------------------------------------------
// Elementwise activations. Backward signatures take whichever value the
// adjoint needs (output for tanh, input for silu/softplus).
// ---------------------------------------------------------------------------

Matrix tanh_forward(const CRef& x);
Matrix tanh_backward(const CRef& y, const CRef& dout);

Matrix silu_forward(const CRef& x);
Matrix silu_backward(const CRef& x, const CRef& dout);

Matrix softplus_forward(const CRef& x);
Matrix softplus_backward(const CRef& x, const CRef& dout);

double sigmoid(double x);

// ---------------------------------------------------------------------------
// Softmax along a caller-specified axis. axis = 0 normalizes each column over
// the rows; axis = 1 normalizes each row over the columns.
// ---------------------------------------------------------------------------

Matrix softmax_forward(const CRef& x, int axis);
Matrix softmax_backward(const CRef& y, const CRef& dout, int axis);

// ---------------------------------------------------------------------------
// Layer normalization over the feature (column) axis of each row, epsilon
// 1e-5, with learnable per-feature scale and shift (1 x D each).
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormTape {
  Matrix xhat;
  Vector inv_std;
  Matrix gamma;
  bool used = false;
};

Matrix layernorm_forward(const CRef& x, const CRef& gamma, const CRef& beta,
                         LayerNormTape* tape = nullptr);

struct LayerNormGrads {
  Matrix dx;
  Matrix dgamma;
  Matrix dbeta;
};

LayerNormGrads layernorm_backward(LayerNormTape& tape, const CRef& dout);

// ---------------------------------------------------------------------------
// Adam update with bias correction, applied in place. t is the 1-based step
// count. A non-finite gradient aborts the step, naming the parameter.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(Matrix& param, const CRef& grad, Matrix& m, Matrix& v, std::int64_t t,
               const AdamConfig& cfg, const std::string& name);

}  // namespace m2mil::numerics
