#include "m2mil/numerics.hpp"

#include <cmath>

namespace m2mil::numerics {

namespace {

void check_linear_shapes(const CRef& x, const CRef& w, const CRef& b) {
  if (x.cols() != w.rows()) {
    throw DimensionError("linear_forward: x is " + shape_str(x) + " but W is " + shape_str(w));
  }
  if (b.rows() != 1 || b.cols() != w.cols()) {
    throw DimensionError("linear_forward: b is " + shape_str(b) + " but W is " + shape_str(w));
  }
}

}  // namespace

Matrix linear_forward(const CRef& x, const CRef& w, const CRef& b) {
  check_linear_shapes(x, w, b);
  Matrix out = x * w;
  out.rowwise() += b.row(0);
  return out;
}

Matrix linear_forward(const CRef& x, const CRef& w, const CRef& b, LinearTape& tape) {
  Matrix out = linear_forward(x, w, b);
  tape.x = x;
  tape.w = w;
  tape.used = false;
  return out;
}

LinearGrads linear_backward(LinearTape& tape, const CRef& dout) {
  if (tape.used) {
    throw ContractError("linear_backward: tape already consumed");
  }
  if (dout.rows() != tape.x.rows() || dout.cols() != tape.w.cols()) {
    throw ContractError("linear_backward: dout is " + shape_str(dout) +
                        " but forward produced " + shape_str(tape.x.rows(), tape.w.cols()));
  }
  tape.used = true;
  LinearGrads g;
  g.dx = dout * tape.w.transpose();
  g.dw = tape.x.transpose() * dout;
  g.db = dout.colwise().sum();
  return g;
}

Matrix causal_conv1d_forward(const CRef& x, const CRef& kernel, const CRef& bias) {
  const Index len = x.rows();
  const Index dim = x.cols();
  const Index taps = kernel.rows();
  if (taps < 1) {
    throw DimensionError("causal_conv1d: kernel needs at least one tap");
  }
  if (kernel.cols() != dim || bias.cols() != dim || bias.rows() != 1) {
    throw DimensionError("causal_conv1d: x is " + shape_str(x) + ", kernel " + shape_str(kernel) +
                         ", bias " + shape_str(bias));
  }
  require_finite(kernel, "causal_conv1d: kernel");
  Matrix out(len, dim);
  for (Index t = 0; t < len; ++t) {
    out.row(t) = bias.row(0);
    const Index k0 = std::max<Index>(0, taps - 1 - t);
    for (Index k = k0; k < taps; ++k) {
      out.row(t).array() += kernel.row(k).array() * x.row(t - taps + 1 + k).array();
    }
  }
  return out;
}

ConvGrads causal_conv1d_backward(const CRef& x, const CRef& kernel, const CRef& dout) {
  const Index len = x.rows();
  const Index dim = x.cols();
  const Index taps = kernel.rows();
  if (dout.rows() != len || dout.cols() != dim) {
    throw DimensionError("causal_conv1d backward: dout is " + shape_str(dout) + " but x is " +
                         shape_str(x));
  }
  ConvGrads g;
  g.dx = Matrix::Zero(len, dim);
  g.dkernel = Matrix::Zero(taps, dim);
  g.dbias = dout.colwise().sum();
  for (Index t = 0; t < len; ++t) {
    const Index k0 = std::max<Index>(0, taps - 1 - t);
    for (Index k = k0; k < taps; ++k) {
      const Index s = t - taps + 1 + k;
      g.dkernel.row(k).array() += dout.row(t).array() * x.row(s).array();
      g.dx.row(s).array() += dout.row(t).array() * kernel.row(k).array();
    }
  }
  return g;
}

Matrix tanh_forward(const CRef& x) { return x.array().tanh(); }

Matrix tanh_backward(const CRef& y, const CRef& dout) {
  return dout.array() * (1.0 - y.array().square());
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix silu_forward(const CRef& x) {
  return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

Matrix silu_backward(const CRef& x, const CRef& dout) {
  Matrix d = x.unaryExpr([](double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
  });
  return dout.array() * d.array();
}

Matrix softplus_forward(const CRef& x) {
  // log(1 + e^x) evaluated without overflow for large |x|.
  return x.unaryExpr([](double v) {
    if (v > 30.0) return v;
    if (v < -30.0) return std::exp(v);
    return std::log1p(std::exp(v));
  });
}

Matrix softplus_backward(const CRef& x, const CRef& dout) {
  Matrix d = x.unaryExpr([](double v) { return sigmoid(v); });
  return dout.array() * d.array();
}

Matrix softmax_forward(const CRef& x, int axis) {
  if (axis != 0 && axis != 1) {
    throw ContractError("softmax: axis must be 0 or 1");
  }
  const Index n = axis == 0 ? x.rows() : x.cols();
  if (n == 0) {
    throw ContractError("softmax: empty axis");
  }
  Matrix y(x.rows(), x.cols());
  if (axis == 1) {
    for (Index i = 0; i < x.rows(); ++i) {
      const double m = x.row(i).maxCoeff();
      Eigen::ArrayXd e = (x.row(i).array() - m).exp();
      y.row(i) = (e / e.sum()).matrix();
    }
  } else {
    for (Index j = 0; j < x.cols(); ++j) {
      const double m = x.col(j).maxCoeff();
      Eigen::ArrayXd e = (x.col(j).array() - m).exp();
      y.col(j) = (e / e.sum()).matrix();
    }
  }
  return y;
}

Matrix softmax_backward(const CRef& y, const CRef& dout, int axis) {
  if (axis != 0 && axis != 1) {
    throw ContractError("softmax: axis must be 0 or 1");
  }
  if (y.rows() != dout.rows() || y.cols() != dout.cols()) {
    throw ContractError("softmax backward: y is " + shape_str(y) + " but dout is " +
                        shape_str(dout));
  }
  Matrix dx(y.rows(), y.cols());
  if (axis == 1) {
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = (dout.row(i).array() * y.row(i).array()).sum();
      dx.row(i) = ((dout.row(i).array() - dot) * y.row(i).array()).matrix();
    }
  } else {
    for (Index j = 0; j < y.cols(); ++j) {
      const double dot = (dout.col(j).array() * y.col(j).array()).sum();
      dx.col(j) = ((dout.col(j).array() - dot) * y.col(j).array()).matrix();
    }
  }
  return dx;
}

Matrix layernorm_forward(const CRef& x, const CRef& gamma, const CRef& beta, LayerNormTape* tape) {
  const Index dim = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != dim || beta.rows() != 1 || beta.cols() != dim) {
    throw DimensionError("layernorm: x is " + shape_str(x) + ", gamma " + shape_str(gamma) +
                         ", beta " + shape_str(beta));
  }
  Matrix xhat(x.rows(), dim);
  Vector inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = ((x.row(i).array() - mean) * is).matrix();
    inv_std[i] = is;
  }
  Matrix out = xhat.array().rowwise() * gamma.row(0).array();
  out.rowwise() += beta.row(0);
  if (tape != nullptr) {
    tape->xhat = xhat;
    tape->inv_std = inv_std;
    tape->gamma = gamma;
    tape->used = false;
  }
  return out;
}

LayerNormGrads layernorm_backward(LayerNormTape& tape, const CRef& dout) {
  if (tape.used) {
    throw ContractError("layernorm_backward: tape already consumed");
  }
  if (dout.rows() != tape.xhat.rows() || dout.cols() != tape.xhat.cols()) {
    throw ContractError("layernorm_backward: dout is " + shape_str(dout) +
                        " but forward produced " + shape_str(tape.xhat));
  }
  tape.used = true;
  LayerNormGrads g;
  g.dgamma = (dout.array() * tape.xhat.array()).colwise().sum();
  g.dbeta = dout.colwise().sum();
  Matrix dxhat = dout.array().rowwise() * tape.gamma.row(0).array();
  g.dx.resize(dout.rows(), dout.cols());
  for (Index i = 0; i < dout.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * tape.xhat.row(i).array()).mean();
    g.dx.row(i) =
        ((dxhat.row(i).array() - m1 - tape.xhat.row(i).array() * m2) * tape.inv_std[i]).matrix();
  }
  return g;
}

void adam_step(Matrix& param, const CRef& grad, Matrix& m, Matrix& v, std::int64_t t,
               const AdamConfig& cfg, const std::string& name) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() || m.rows() != param.rows() ||
      m.cols() != param.cols() || v.rows() != param.rows() || v.cols() != param.cols()) {
    throw DimensionError("adam_step(" + name + "): param " + shape_str(param.rows(), param.cols()) +
                         " vs grad " + shape_str(grad));
  }
  if (t < 1) {
    throw ContractError("adam_step(" + name + "): step count must be >= 1");
  }
  if (!grad.allFinite()) {
    throw NumericError("adam_step: non-finite gradient for parameter '" + name + "'");
  }
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  param.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
}

}  // namespace m2mil::numerics
