#include "m2mil/seq_transform.hpp"

#include <cmath>
#include <numeric>

namespace m2mil::seqt {

SquaredSequence square(const CRef& seq) {
  const Index n = seq.rows();
  if (n < 1) {
    throw ContractError("square: empty bag");
  }
  Index side = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n))));
  // Guard against floating-point rounding of the square root.
  while (side * side < n) ++side;
  while ((side - 1) * (side - 1) >= n) --side;
  const Index len = side * side;
  SquaredSequence sq;
  sq.original_len = n;
  sq.side = side;
  sq.pad_len = len - n;
  sq.data.resize(len, seq.cols());
  sq.data.topRows(n) = seq;
  for (Index i = 0; i < sq.pad_len; ++i) {
    sq.data.row(n + i) = seq.row(i % n);
  }
  return sq;
}

std::string OrderingKind::name() const {
  switch (kind) {
    case Ordering::kOriginal:
      return "original";
    case Ordering::kFlipped:
      return "flipped";
    case Ordering::kTransposed:
      return "transposed";
    case Ordering::kRandom:
      return "random:" + std::to_string(seed);
    case Ordering::kStrideInterleave:
      return "stride:" + std::to_string(stride);
  }
  return "?";
}

OrderingKind OrderingKind::parse(const std::string& token) {
  if (token == "original") return original();
  if (token == "flipped") return flipped();
  if (token == "transposed") return transposed();
  const auto colon = token.find(':');
  const std::string head = token.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : token.substr(colon + 1);
  if (head == "random") {
    return random(arg.empty() ? 0 : std::stoull(arg));
  }
  if (head == "stride") {
    const Index r = arg.empty() ? 2 : static_cast<Index>(std::stoll(arg));
    if (r < 1) throw ConfigError("ordering: stride must be >= 1");
    return stride_interleave(r);
  }
  throw ConfigError("ordering: unknown kind '" + token + "'");
}

std::vector<Index> permutation(const OrderingKind& kind, Index len) {
  std::vector<Index> perm(static_cast<std::size_t>(len));
  std::iota(perm.begin(), perm.end(), Index{0});
  switch (kind.kind) {
    case Ordering::kOriginal:
      break;
    case Ordering::kFlipped:
      for (Index i = 0; i < len; ++i) perm[i] = len - 1 - i;
      break;
    case Ordering::kTransposed: {
      const Index side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(len))));
      if (side * side != len) {
        throw ContractError("reorder: transposed ordering needs a perfect-square length, got " +
                            std::to_string(len));
      }
      for (Index i = 0; i < side; ++i) {
        for (Index j = 0; j < side; ++j) {
          perm[i * side + j] = j * side + i;
        }
      }
      break;
    }
    case Ordering::kRandom: {
      Rng rng(kind.seed);
      rng.shuffle(perm);
      break;
    }
    case Ordering::kStrideInterleave: {
      if (kind.stride < 1) {
        throw ContractError("reorder: stride must be >= 1");
      }
      Index pos = 0;
      for (Index r = 0; r < kind.stride && pos < len; ++r) {
        for (Index j = r; j < len; j += kind.stride) {
          perm[pos++] = j;
        }
      }
      break;
    }
  }
  return perm;
}

Matrix apply_permutation(const CRef& x, const std::vector<Index>& perm) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    out.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

Matrix apply_permutation_inverse(const CRef& x, const std::vector<Index>& perm) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    out.row(perm[static_cast<std::size_t>(i)]) = x.row(i);
  }
  return out;
}

Matrix reorder_rows(const CRef& x, const OrderingKind& kind) {
  return apply_permutation(x, permutation(kind, x.rows()));
}

Matrix reorder(const SquaredSequence& sq, const OrderingKind& kind) {
  return reorder_rows(sq.data, kind);
}

Matrix inverse_reorder(const CRef& x, const OrderingKind& kind) {
  return apply_permutation_inverse(x, permutation(kind, x.rows()));
}

}  // namespace m2mil::seqt
