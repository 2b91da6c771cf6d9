#pragma once

#include "m2mil/common.hpp"
#include "m2mil/numerics.hpp"

#include <string>
#include <vector>

namespace m2mil::ssd {

// ---------------------------------------------------------------------------
// Scalar-decay state-space scan. Per head the state h is N x P and evolves as
//
//   h_t = a_t * h_{t-1} + b_t x_t^T,    y_t = h_t^T c_t,    h_{-1} = 0,
//
// with x: T x P, a: T (each in [0, 1]), b, c: T x N. The same map has three
// algebraically equivalent evaluations: the linear-time recurrence, the
// quadratic masked form y_t = sum_{j<=t} (c_t . b_j) (prod_{k=j+1..t} a_k) x_j,
// and a chunked scan (intra-chunk quadratic + carried state).
// ---------------------------------------------------------------------------

// `states`, when given, receives h_t flattened row-major into row t (T x N*P);
// backward consumes it.
Matrix recurrence(const CRef& x, const Vector& a, const CRef& b, const CRef& c,
                  Matrix* states = nullptr);

Matrix dual_quadratic(const CRef& x, const Vector& a, const CRef& b, const CRef& c);

Matrix chunked_scan(const CRef& x, const Vector& a, const CRef& b, const CRef& c, Index chunk);

struct ScanGrads {
  Matrix dx;
  Vector da;
  Matrix db;
  Matrix dc;
};

ScanGrads recurrence_backward(const CRef& x, const Vector& a, const CRef& b, const CRef& c,
                              const CRef& states, const CRef& dy);

// ---------------------------------------------------------------------------
// Sequence block: out_proj(scan(conv(in_proj(S)))) with selective decay and an
// optional silu gate, stacked `depth` times.
// ---------------------------------------------------------------------------

struct SsdBlockConfig {
  Index depth = 2;
  Index heads = 4;
  Index head_dim = 0;  // 0 derives model_dim / heads
  Index state_dim = 64;
  Index conv_kernel = 4;
  bool use_gate = true;
  bool use_layernorm = false;
  bool use_residual_wrapping = false;

  Index resolved_head_dim(Index model_dim) const;
  Index inner_dim(Index model_dim) const { return heads * resolved_head_dim(model_dim); }
  bool needs_norm() const { return use_layernorm || use_residual_wrapping; }
  void validate(Index model_dim) const;
};

struct SsdBlockParams {
  // in_proj emits [x-inner | b | c | dt-logit | gate?] per position.
  Matrix in_proj_w, in_proj_b;
  Matrix conv_w, conv_b;  // depthwise over the [x-inner | b | c] channels
  Matrix dt_bias;         // 1 x H, added to the dt logits before softplus
  Matrix a_log;           // 1 x H, per-head decay rate stored as log
  Matrix out_proj_w, out_proj_b;
  Matrix ln_gamma, ln_beta;  // allocated only when the block normalizes
};

SsdBlockParams make_block_params(Index model_dim, const SsdBlockConfig& cfg, Rng& rng);
SsdBlockParams block_zeros_like(const SsdBlockParams& p);
Index block_param_count(Index model_dim, const SsdBlockConfig& cfg);

template <class Params, class Fn>
void for_each_block_tensor(Params& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "in_proj_w", p.in_proj_w);
  fn(prefix + "in_proj_b", p.in_proj_b);
  fn(prefix + "conv_w", p.conv_w);
  fn(prefix + "conv_b", p.conv_b);
  fn(prefix + "dt_bias", p.dt_bias);
  fn(prefix + "a_log", p.a_log);
  fn(prefix + "out_proj_w", p.out_proj_w);
  fn(prefix + "out_proj_b", p.out_proj_b);
  if (p.ln_gamma.size() > 0) {
    fn(prefix + "ln_gamma", p.ln_gamma);
    fn(prefix + "ln_beta", p.ln_beta);
  }
}

struct SsdBlockTape {
  Matrix input;      // block input S (residual path)
  Matrix norm_in;    // in_proj input (= layernorm(S) when the block normalizes)
  numerics::LayerNormTape ln;
  Matrix z;          // in_proj output
  Matrix conv_out;   // [u | b | c]
  Matrix dt;         // L x H, softplus of the biased dt logits
  Matrix decay;      // L x H, exp(-dt * exp(a_log))
  std::vector<Matrix> states;  // per head, T x N*P
  Matrix y_scan;     // L x inner, concatenated head outputs
  Matrix y_gated;    // out_proj input
  bool used = false;
};

Matrix block_forward(const CRef& input, const SsdBlockParams& p, const SsdBlockConfig& cfg,
                     SsdBlockTape* tape = nullptr);

struct SsdBlockGrads {
  Matrix dinput;
  SsdBlockParams dparams;
};

SsdBlockGrads block_backward(SsdBlockTape& tape, const SsdBlockParams& p,
                             const SsdBlockConfig& cfg, const CRef& dout);

// Depth-stacked blocks with independent parameters per layer.

struct SsdStackTape {
  std::vector<SsdBlockTape> blocks;
  bool used = false;
};

Matrix stack_forward(const CRef& input, const std::vector<SsdBlockParams>& layers,
                     const SsdBlockConfig& cfg, SsdStackTape* tape = nullptr);

struct SsdStackGrads {
  Matrix dinput;
  std::vector<SsdBlockParams> dlayers;
};

SsdStackGrads stack_backward(SsdStackTape& tape, const std::vector<SsdBlockParams>& layers,
                             const SsdBlockConfig& cfg, const CRef& dout);

}  // namespace m2mil::ssd
