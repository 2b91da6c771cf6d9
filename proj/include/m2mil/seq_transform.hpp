#pragma once

#include "m2mil/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace m2mil::seqt {

// A length-N sequence padded up to the next perfect square L = ceil(sqrt(N))^2
// by repeating its leading rows, so it can be read as a side x side grid.
struct SquaredSequence {
  Matrix data;         // L x D
  Index original_len;  // N
  Index side;          // ceil(sqrt(N))
  Index pad_len;       // L - N
};

SquaredSequence square(const CRef& seq);

enum class Ordering { kOriginal, kFlipped, kTransposed, kRandom, kStrideInterleave };

struct OrderingKind {
  Ordering kind = Ordering::kOriginal;
  std::uint64_t seed = 0;  // random orderings carry an explicit seed
  Index stride = 1;        // stride-interleave pass count R >= 1

  static OrderingKind original() { return {Ordering::kOriginal, 0, 1}; }
  static OrderingKind flipped() { return {Ordering::kFlipped, 0, 1}; }
  static OrderingKind transposed() { return {Ordering::kTransposed, 0, 1}; }
  static OrderingKind random(std::uint64_t seed) { return {Ordering::kRandom, seed, 1}; }
  static OrderingKind stride_interleave(Index r) { return {Ordering::kStrideInterleave, 0, r}; }

  std::string name() const;
  // Parses "original", "flipped", "transposed", "random:SEED", "stride:R".
  static OrderingKind parse(const std::string& token);

  bool operator==(const OrderingKind& o) const {
    return kind == o.kind && seed == o.seed && stride == o.stride;
  }
};

// Row permutation realizing an ordering: output row i reads input row perm[i].
std::vector<Index> permutation(const OrderingKind& kind, Index len);

Matrix reorder(const SquaredSequence& sq, const OrderingKind& kind);
Matrix reorder_rows(const CRef& x, const OrderingKind& kind);

// Exact inverse of reorder for the same kind; a mismatched kind is
// undetectable and yields garbage alignment (caller contract).
Matrix inverse_reorder(const CRef& x, const OrderingKind& kind);

// Permutation application helpers shared with backward passes.
Matrix apply_permutation(const CRef& x, const std::vector<Index>& perm);
Matrix apply_permutation_inverse(const CRef& x, const std::vector<Index>& perm);

}  // namespace m2mil::seqt
