#include "m2mil/ssd.hpp"

#include <cmath>

namespace m2mil::ssd {

namespace {

void check_scan_inputs(const CRef& x, const Vector& a, const CRef& b, const CRef& c) {
  const Index t_len = x.rows();
  if (a.size() != t_len || b.rows() != t_len || c.rows() != t_len || b.cols() != c.cols()) {
    throw DimensionError("ssd scan: x " + shape_str(x) + ", a " + std::to_string(a.size()) +
                         ", b " + shape_str(b) + ", c " + shape_str(c));
  }
  require_finite(x, "ssd scan: x");
  require_finite(b, "ssd scan: b");
  require_finite(c, "ssd scan: c");
  for (Index t = 0; t < t_len; ++t) {
    if (!(a[t] >= 0.0 && a[t] <= 1.0)) {
      throw ContractError("ssd scan: decay a[" + std::to_string(t) + "] = " +
                          std::to_string(a[t]) + " outside [0, 1]");
    }
  }
}

}  // namespace

Matrix recurrence(const CRef& x, const Vector& a, const CRef& b, const CRef& c, Matrix* states) {
  check_scan_inputs(x, a, b, c);
  const Index t_len = x.rows();
  const Index p_dim = x.cols();
  const Index n_dim = b.cols();
  Matrix y(t_len, p_dim);
  Matrix h = Matrix::Zero(n_dim, p_dim);
  if (states != nullptr) states->resize(t_len, n_dim * p_dim);
  for (Index t = 0; t < t_len; ++t) {
    h *= a[t];
    h.noalias() += b.row(t).transpose() * x.row(t);
    y.row(t).noalias() = c.row(t) * h;
    if (states != nullptr) {
      states->row(t) = Eigen::Map<const RowVector>(h.data(), n_dim * p_dim);
    }
  }
  return y;
}

Matrix dual_quadratic(const CRef& x, const Vector& a, const CRef& b, const CRef& c) {
  check_scan_inputs(x, a, b, c);
  const Index t_len = x.rows();
  const Index p_dim = x.cols();
  Matrix y(t_len, p_dim);
  RowVector acc(p_dim);
  for (Index t = 0; t < t_len; ++t) {
    // Running product keeps the decay mask exact without cumulative ratios.
    double prod = 1.0;
    acc.setZero();
    for (Index j = t; j >= 0; --j) {
      const double w = c.row(t).dot(b.row(j)) * prod;
      acc.noalias() += w * x.row(j);
      prod *= a[j];
    }
    y.row(t) = acc;
  }
  return y;
}

Matrix chunked_scan(const CRef& x, const Vector& a, const CRef& b, const CRef& c, Index chunk) {
  if (chunk < 1) {
    throw ContractError("chunked_scan: chunk size must be >= 1");
  }
  check_scan_inputs(x, a, b, c);
  const Index t_len = x.rows();
  const Index p_dim = x.cols();
  const Index n_dim = b.cols();
  Matrix y(t_len, p_dim);
  Matrix carry = Matrix::Zero(n_dim, p_dim);  // state entering the chunk
  RowVector acc(p_dim);
  for (Index s = 0; s < t_len; s += chunk) {
    const Index e = std::min(t_len, s + chunk);
    double cum = 1.0;  // prod_{k=s..t} a_k while t sweeps the chunk
    for (Index t = s; t < e; ++t) {
      double prod = 1.0;
      acc.setZero();
      for (Index j = t; j >= s; --j) {
        const double w = c.row(t).dot(b.row(j)) * prod;
        acc.noalias() += w * x.row(j);
        prod *= a[j];
      }
      cum *= a[t];
      acc.noalias() += cum * (c.row(t) * carry);
      y.row(t) = acc;
    }
    Matrix next = cum * carry;
    double prod = 1.0;
    for (Index j = e - 1; j >= s; --j) {
      next.noalias() += prod * (b.row(j).transpose() * x.row(j));
      prod *= a[j];
    }
    carry = std::move(next);
  }
  return y;
}

ScanGrads recurrence_backward(const CRef& x, const Vector& a, const CRef& b, const CRef& c,
                              const CRef& states, const CRef& dy) {
  const Index t_len = x.rows();
  const Index p_dim = x.cols();
  const Index n_dim = b.cols();
  if (states.rows() != t_len || states.cols() != n_dim * p_dim || dy.rows() != t_len ||
      dy.cols() != p_dim) {
    throw ContractError("recurrence_backward: states " + shape_str(states) + ", dy " +
                        shape_str(dy) + " do not match the forward shapes");
  }
  ScanGrads g;
  g.dx = Matrix::Zero(t_len, p_dim);
  g.da = Vector::Zero(t_len);
  g.db = Matrix::Zero(t_len, n_dim);
  g.dc = Matrix::Zero(t_len, n_dim);
  Matrix gh = Matrix::Zero(n_dim, p_dim);  // dL/dh_t, accumulated backwards in time
  for (Index t = t_len - 1; t >= 0; --t) {
    gh.noalias() += c.row(t).transpose() * dy.row(t);
    Eigen::Map<const Matrix> h_t(states.row(t).data(), n_dim, p_dim);
    g.dc.row(t).noalias() = (h_t * dy.row(t).transpose()).transpose();
    if (t > 0) {
      Eigen::Map<const Matrix> h_prev(states.row(t - 1).data(), n_dim, p_dim);
      g.da[t] = (gh.array() * h_prev.array()).sum();
    }
    g.db.row(t).noalias() = (gh * x.row(t).transpose()).transpose();
    g.dx.row(t).noalias() = b.row(t) * gh;
    gh *= a[t];
  }
  return g;
}

Index SsdBlockConfig::resolved_head_dim(Index model_dim) const {
  if (head_dim > 0) return head_dim;
  if (heads < 1 || model_dim % heads != 0) {
    throw ConfigError("ssd block: heads (" + std::to_string(heads) +
                      ") must divide the model dim (" + std::to_string(model_dim) + ")");
  }
  return model_dim / heads;
}

void SsdBlockConfig::validate(Index model_dim) const {
  if (depth < 1) throw ConfigError("ssd block: depth must be >= 1");
  if (heads < 1) throw ConfigError("ssd block: heads must be >= 1");
  if (state_dim < 1) throw ConfigError("ssd block: state_dim must be >= 1");
  if (conv_kernel < 1) throw ConfigError("ssd block: conv_kernel must be >= 1");
  (void)resolved_head_dim(model_dim);
}

namespace {

Matrix xavier(Index rows, Index cols, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix w(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      w(i, j) = rng.uniform(-s, s);
    }
  }
  return w;
}

Index in_proj_cols(Index inner, Index state_dim, const SsdBlockConfig& cfg) {
  return inner + 2 * state_dim + cfg.heads + (cfg.use_gate ? inner : 0);
}

}  // namespace

SsdBlockParams make_block_params(Index model_dim, const SsdBlockConfig& cfg, Rng& rng) {
  cfg.validate(model_dim);
  const Index inner = cfg.inner_dim(model_dim);
  const Index conv_dim = inner + 2 * cfg.state_dim;
  const Index zdim = in_proj_cols(inner, cfg.state_dim, cfg);
  SsdBlockParams p;
  p.in_proj_w = xavier(model_dim, zdim, rng);
  p.in_proj_b = Matrix::Zero(1, zdim);
  const double conv_scale = std::sqrt(1.0 / static_cast<double>(cfg.conv_kernel));
  p.conv_w.resize(cfg.conv_kernel, conv_dim);
  for (Index k = 0; k < cfg.conv_kernel; ++k) {
    for (Index d = 0; d < conv_dim; ++d) {
      p.conv_w(k, d) = rng.uniform(-conv_scale, conv_scale);
    }
  }
  p.conv_b = Matrix::Zero(1, conv_dim);
  // dt starts log-uniform in [1e-3, 1e-1]; stored through the softplus inverse.
  p.dt_bias.resize(1, cfg.heads);
  for (Index h = 0; h < cfg.heads; ++h) {
    const double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.dt_bias(0, h) = std::log(std::expm1(dt0));
  }
  p.a_log.resize(1, cfg.heads);
  for (Index h = 0; h < cfg.heads; ++h) {
    p.a_log(0, h) = std::log(rng.uniform(1.0, 16.0));
  }
  p.out_proj_w = xavier(inner, model_dim, rng);
  p.out_proj_b = Matrix::Zero(1, model_dim);
  if (cfg.needs_norm()) {
    p.ln_gamma = Matrix::Ones(1, model_dim);
    p.ln_beta = Matrix::Zero(1, model_dim);
  }
  return p;
}

SsdBlockParams block_zeros_like(const SsdBlockParams& p) {
  SsdBlockParams z;
  z.in_proj_w = Matrix::Zero(p.in_proj_w.rows(), p.in_proj_w.cols());
  z.in_proj_b = Matrix::Zero(p.in_proj_b.rows(), p.in_proj_b.cols());
  z.conv_w = Matrix::Zero(p.conv_w.rows(), p.conv_w.cols());
  z.conv_b = Matrix::Zero(p.conv_b.rows(), p.conv_b.cols());
  z.dt_bias = Matrix::Zero(p.dt_bias.rows(), p.dt_bias.cols());
  z.a_log = Matrix::Zero(p.a_log.rows(), p.a_log.cols());
  z.out_proj_w = Matrix::Zero(p.out_proj_w.rows(), p.out_proj_w.cols());
  z.out_proj_b = Matrix::Zero(p.out_proj_b.rows(), p.out_proj_b.cols());
  if (p.ln_gamma.size() > 0) {
    z.ln_gamma = Matrix::Zero(p.ln_gamma.rows(), p.ln_gamma.cols());
    z.ln_beta = Matrix::Zero(p.ln_beta.rows(), p.ln_beta.cols());
  }
  return z;
}

Index block_param_count(Index model_dim, const SsdBlockConfig& cfg) {
  const Index inner = cfg.inner_dim(model_dim);
  const Index conv_dim = inner + 2 * cfg.state_dim;
  const Index zdim = in_proj_cols(inner, cfg.state_dim, cfg);
  Index count = model_dim * zdim + zdim;             // in_proj
  count += cfg.conv_kernel * conv_dim + conv_dim;    // conv
  count += 2 * cfg.heads;                            // dt_bias + a_log
  count += inner * model_dim + model_dim;            // out_proj
  if (cfg.needs_norm()) count += 2 * model_dim;
  return count;
}

Matrix block_forward(const CRef& input, const SsdBlockParams& p, const SsdBlockConfig& cfg,
                     SsdBlockTape* tape) {
  const Index model_dim = input.cols();
  const Index len = input.rows();
  cfg.validate(model_dim);
  require_finite(input, "ssd block: input");
  const Index heads = cfg.heads;
  const Index head_dim = cfg.resolved_head_dim(model_dim);
  const Index state_dim = cfg.state_dim;
  const Index inner = heads * head_dim;
  const Index conv_dim = inner + 2 * state_dim;
  const Index zdim = in_proj_cols(inner, state_dim, cfg);
  if (p.in_proj_w.rows() != model_dim || p.in_proj_w.cols() != zdim ||
      p.out_proj_w.rows() != inner || p.out_proj_w.cols() != model_dim ||
      p.conv_w.cols() != conv_dim || p.conv_w.rows() != cfg.conv_kernel) {
    throw DimensionError("ssd block: parameter shapes do not match config (input " +
                         shape_str(input) + ", in_proj " + shape_str(p.in_proj_w) + ")");
  }

  numerics::LayerNormTape lnt;
  Matrix norm_in;
  if (cfg.needs_norm()) {
    norm_in = numerics::layernorm_forward(input, p.ln_gamma, p.ln_beta,
                                          tape != nullptr ? &lnt : nullptr);
  } else {
    norm_in = input;
  }
  Matrix z = numerics::linear_forward(norm_in, p.in_proj_w, p.in_proj_b);
  Matrix conv_out = numerics::causal_conv1d_forward(z.leftCols(conv_dim), p.conv_w, p.conv_b);
  Matrix dt_pre = z.middleCols(conv_dim, heads);
  dt_pre.rowwise() += p.dt_bias.row(0);
  Matrix dt = numerics::softplus_forward(dt_pre);
  Matrix decay(len, heads);
  for (Index h = 0; h < heads; ++h) {
    const double rate = std::exp(p.a_log(0, h));
    decay.col(h) = (-dt.col(h).array() * rate).exp();
  }

  Matrix y_scan(len, inner);
  std::vector<Matrix> states(tape != nullptr ? static_cast<std::size_t>(heads) : 0);
  for (Index h = 0; h < heads; ++h) {
    Matrix xbar =
        conv_out.middleCols(h * head_dim, head_dim).array().colwise() * dt.col(h).array();
    const Vector a_h = decay.col(h);
    Matrix y_h = recurrence(xbar, a_h, conv_out.middleCols(inner, state_dim),
                            conv_out.middleCols(inner + state_dim, state_dim),
                            tape != nullptr ? &states[static_cast<std::size_t>(h)] : nullptr);
    y_scan.middleCols(h * head_dim, head_dim) = y_h;
  }

  Matrix y_gated;
  if (cfg.use_gate) {
    y_gated = y_scan.array() * numerics::silu_forward(z.rightCols(inner)).array();
  } else {
    y_gated = y_scan;
  }
  Matrix out = numerics::linear_forward(y_gated, p.out_proj_w, p.out_proj_b);
  if (cfg.use_residual_wrapping) {
    out += input;
  }

  if (tape != nullptr) {
    tape->input = input;
    tape->norm_in = std::move(norm_in);
    tape->ln = std::move(lnt);
    tape->z = std::move(z);
    tape->conv_out = std::move(conv_out);
    tape->dt = std::move(dt);
    tape->decay = std::move(decay);
    tape->states = std::move(states);
    tape->y_scan = std::move(y_scan);
    tape->y_gated = std::move(y_gated);
    tape->used = false;
  }
  return out;
}

SsdBlockGrads block_backward(SsdBlockTape& tape, const SsdBlockParams& p,
                             const SsdBlockConfig& cfg, const CRef& dout) {
  if (tape.used) {
    throw ContractError("ssd block backward: tape already consumed");
  }
  tape.used = true;
  const Index model_dim = tape.input.cols();
  const Index len = tape.input.rows();
  const Index heads = cfg.heads;
  const Index head_dim = cfg.resolved_head_dim(model_dim);
  const Index state_dim = cfg.state_dim;
  const Index inner = heads * head_dim;
  const Index conv_dim = inner + 2 * state_dim;
  if (dout.rows() != len || dout.cols() != model_dim) {
    throw ContractError("ssd block backward: dout is " + shape_str(dout) +
                        " but forward produced " + shape_str(len, model_dim));
  }

  SsdBlockGrads g;
  g.dparams = block_zeros_like(p);

  // out_proj
  Matrix dy_gated = dout * p.out_proj_w.transpose();
  g.dparams.out_proj_w = tape.y_gated.transpose() * dout;
  g.dparams.out_proj_b = dout.colwise().sum();

  // gate
  Matrix dy_scan;
  Matrix dgate;
  if (cfg.use_gate) {
    const auto gate_in = tape.z.rightCols(inner);
    Matrix gate_act = numerics::silu_forward(gate_in);
    dy_scan = dy_gated.array() * gate_act.array();
    Matrix dact = dy_gated.array() * tape.y_scan.array();
    dgate = numerics::silu_backward(gate_in, dact);
  } else {
    dy_scan = dy_gated;
  }

  // per-head scan adjoints
  Matrix du(len, inner);
  Matrix ddt = Matrix::Zero(len, heads);
  Matrix db_sum = Matrix::Zero(len, state_dim);
  Matrix dc_sum = Matrix::Zero(len, state_dim);
  for (Index h = 0; h < heads; ++h) {
    const auto u_h = tape.conv_out.middleCols(h * head_dim, head_dim);
    Matrix xbar = u_h.array().colwise() * tape.dt.col(h).array();
    const Vector a_h = tape.decay.col(h);
    ScanGrads sg = recurrence_backward(
        xbar, a_h, tape.conv_out.middleCols(inner, state_dim),
        tape.conv_out.middleCols(inner + state_dim, state_dim),
        tape.states[static_cast<std::size_t>(h)], dy_scan.middleCols(h * head_dim, head_dim));
    du.middleCols(h * head_dim, head_dim) = sg.dx.array().colwise() * tape.dt.col(h).array();
    ddt.col(h) += (sg.dx.array() * u_h.array()).rowwise().sum().matrix();
    db_sum += sg.db;
    dc_sum += sg.dc;
    // decay = exp(-dt * exp(a_log))
    const double rate = std::exp(p.a_log(0, h));
    ddt.col(h) += (sg.da.array() * (-rate) * tape.decay.col(h).array()).matrix();
    g.dparams.a_log(0, h) =
        (sg.da.array() * (-rate) * tape.dt.col(h).array() * tape.decay.col(h).array()).sum();
  }

  // dt = softplus(z-slice + dt_bias)
  Matrix dt_pre = tape.z.middleCols(conv_dim, heads);
  dt_pre.rowwise() += p.dt_bias.row(0);
  Matrix ddt_pre = numerics::softplus_backward(dt_pre, ddt);
  g.dparams.dt_bias = ddt_pre.colwise().sum();

  // conv
  Matrix dconv_out(len, conv_dim);
  dconv_out.leftCols(inner) = du;
  dconv_out.middleCols(inner, state_dim) = db_sum;
  dconv_out.middleCols(inner + state_dim, state_dim) = dc_sum;
  numerics::ConvGrads cg =
      numerics::causal_conv1d_backward(tape.z.leftCols(conv_dim), p.conv_w, dconv_out);
  g.dparams.conv_w = cg.dkernel;
  g.dparams.conv_b = cg.dbias;

  // in_proj
  Matrix dz(len, tape.z.cols());
  dz.leftCols(conv_dim) = cg.dx;
  dz.middleCols(conv_dim, heads) = ddt_pre;
  if (cfg.use_gate) {
    dz.rightCols(inner) = dgate;
  }
  Matrix dnorm_in = dz * p.in_proj_w.transpose();
  g.dparams.in_proj_w = tape.norm_in.transpose() * dz;
  g.dparams.in_proj_b = dz.colwise().sum();

  if (cfg.needs_norm()) {
    numerics::LayerNormGrads lng = numerics::layernorm_backward(tape.ln, dnorm_in);
    g.dinput = std::move(lng.dx);
    g.dparams.ln_gamma = std::move(lng.dgamma);
    g.dparams.ln_beta = std::move(lng.dbeta);
  } else {
    g.dinput = std::move(dnorm_in);
  }
  if (cfg.use_residual_wrapping) {
    g.dinput += dout;
  }
  return g;
}

Matrix stack_forward(const CRef& input, const std::vector<SsdBlockParams>& layers,
                     const SsdBlockConfig& cfg, SsdStackTape* tape) {
  if (layers.size() != static_cast<std::size_t>(cfg.depth)) {
    throw DimensionError("ssd stack: " + std::to_string(layers.size()) + " layers but depth " +
                         std::to_string(cfg.depth));
  }
  Matrix h = input;
  if (tape != nullptr) {
    tape->blocks.resize(layers.size());
    tape->used = false;
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = block_forward(h, layers[i], cfg, tape != nullptr ? &tape->blocks[i] : nullptr);
  }
  return h;
}

SsdStackGrads stack_backward(SsdStackTape& tape, const std::vector<SsdBlockParams>& layers,
                             const SsdBlockConfig& cfg, const CRef& dout) {
  if (tape.used) {
    throw ContractError("ssd stack backward: tape already consumed");
  }
  tape.used = true;
  SsdStackGrads g;
  g.dlayers.resize(layers.size());
  Matrix d = dout;
  for (std::size_t i = layers.size(); i-- > 0;) {
    SsdBlockGrads bg = block_backward(tape.blocks[i], layers[i], cfg, d);
    g.dlayers[i] = std::move(bg.dparams);
    d = std::move(bg.dinput);
  }
  g.dinput = std::move(d);
  return g;
}

}  // namespace m2mil::ssd
