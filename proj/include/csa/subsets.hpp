#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "csa/errors.hpp"
#include "csa/rng.hpp"

namespace csa {

// A subset of excluded-instrument column indices: sorted ascending, distinct,
// each in [0, K).  Exogenous columns are appended later by the design builder
// and are never part of a SubsetIndex.
using SubsetIndex = std::vector<int>;

// Subset counts overflow 64 bits near K ~ 68, and uniform unranked draws need
// the exact count, so counts are arbitrary-precision.
using BigUint = boost::multiprecision::cpp_int;

inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;
inline constexpr std::size_t kDefaultSubsetDraws = 1000;

// Exact C(K, k).  Multiplicative form; every intermediate division is exact.
inline BigUint binomial_count(int K, int k) {
  if (K < 0 || k < 0 || k > K)
    throw ConfigError("binomial_count requires 0 <= k <= K, got k=" +
                      std::to_string(k) + ", K=" + std::to_string(K));
  k = std::min(k, K - k);
  BigUint c = 1;
  for (int i = 1; i <= k; ++i) {
    c *= K - k + i;
    c /= i;
  }
  return c;
}

// Visit all k-subsets of {0..K-1} in lexicographic order without
// materializing them.  Callback receives a reference valid during the call.
template <typename F>
inline void for_each_subset(int K, int k, F&& fn) {
  assert(0 <= k && k <= K);
  SubsetIndex cur(k);
  for (int i = 0; i < k; ++i) cur[i] = i;
  if (k == 0) {
    fn(static_cast<const SubsetIndex&>(cur));
    return;
  }
  while (true) {
    fn(static_cast<const SubsetIndex&>(cur));
    // advance to the next combination
    int i = k - 1;
    while (i >= 0 && cur[i] == K - k + i) --i;
    if (i < 0) break;
    ++cur[i];
    for (int j = i + 1; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
}

inline std::vector<SubsetIndex> enumerate_subsets(
    int K, int k, std::size_t cap = kDefaultEnumerationCap) {
  const BigUint total = binomial_count(K, k);
  if (total > cap)
    throw ConfigError("enumerating C(" + std::to_string(K) + "," +
                      std::to_string(k) + ") = " + total.str() +
                      " subsets exceeds the cap of " + std::to_string(cap) +
                      "; use sampled mode instead");
  std::vector<SubsetIndex> out;
  out.reserve(static_cast<std::size_t>(total));
  for_each_subset(K, k, [&](const SubsetIndex& s) { out.push_back(s); });
  return out;
}

// C(n, j) lookups for unranking, n <= K and j <= k, built once per stream.
class PascalTable {
 public:
  PascalTable(int K, int k) : K_(K), k_(k), c_((K + 1) * (k + 1)) {
    for (int n = 0; n <= K; ++n)
      for (int j = 0; j <= k; ++j) {
        BigUint& v = c_[idx(n, j)];
        if (j == 0)
          v = 1;
        else if (j > n)
          v = 0;
        else
          v = c_[idx(n - 1, j - 1)] + c_[idx(n - 1, j)];
      }
  }
  const BigUint& at(int n, int j) const {
    assert(0 <= n && n <= K_ && 0 <= j && j <= k_);
    return c_[idx(n, j)];
  }

 private:
  std::size_t idx(int n, int j) const {
    return static_cast<std::size_t>(n) * (k_ + 1) + j;
  }
  int K_, k_;
  std::vector<BigUint> c_;
};

// Combinatorial number system: rank (lexicographic, 0-based) -> members.
inline SubsetIndex unrank_subset(int K, int k, BigUint rank,
                                 const PascalTable& tbl) {
  assert(rank >= 0 && rank < binomial_count(K, k));
  SubsetIndex out(k);
  int c = 0;
  for (int i = 0; i < k; ++i) {
    while (true) {
      // combinations with member i fixed at c: choose the rest above c
      const BigUint& block = tbl.at(K - 1 - c, k - 1 - i);
      if (rank < block) {
        out[i] = c++;
        break;
      }
      rank -= block;
      ++c;
    }
  }
  return out;
}

namespace detail {

// Uniform big integer in [0, n) by top-bit masking + rejection.
inline BigUint uniform_big_below(Rng& rng, const BigUint& n) {
  assert(n > 0);
  if (n <= UINT64_MAX)
    return BigUint(rng.uniform_below(n.convert_to<std::uint64_t>()));
  const unsigned bits = boost::multiprecision::msb(n) + 1;
  const unsigned words = (bits + 63) / 64;
  const BigUint mask = (BigUint(1) << bits) - 1;
  while (true) {
    BigUint x = 0;
    for (unsigned w = 0; w < words; ++w) x = (x << 64) | rng.next_u64();
    x &= mask;
    if (x < n) return x;
  }
}

struct SubsetHash {
  std::size_t operator()(const SubsetIndex& s) const noexcept {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over members
    for (int v : s) {
      h ^= static_cast<std::uint64_t>(v) + 1;
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

// R distinct subsets drawn uniformly without replacement: uniform ranks are
// unranked so nothing is enumerated, duplicates rejected on the member hash.
// If R covers the whole population the full enumeration is returned.
inline std::vector<SubsetIndex> sample_subsets(int K, int k, std::size_t R,
                                               std::uint64_t seed) {
  const BigUint total = binomial_count(K, k);
  if (total <= R) return enumerate_subsets(K, k, std::max<std::size_t>(R, 1));
  Rng rng(seed);
  PascalTable tbl(K, k);
  std::vector<SubsetIndex> out;
  out.reserve(R);
  std::unordered_set<SubsetIndex, detail::SubsetHash> seen(2 * R);
  while (out.size() < R) {
    SubsetIndex s = unrank_subset(K, k, detail::uniform_big_below(rng, total), tbl);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

enum class SubsetMode { Exact, Sampled };

// How the size-k collection is produced: exact enumeration when the
// population fits the draw budget (ties exact), uniform sampling otherwise.
struct SubsetPlan {
  int K = 0;
  int k = 0;
  SubsetMode mode = SubsetMode::Exact;
  std::size_t R = kDefaultSubsetDraws;  // draws in sampled mode
  std::uint64_t seed = 0;
  BigUint total;  // M(K,k)

  // Number of subsets the plan will produce (before any singular drops).
  std::size_t collection_size() const {
    return mode == SubsetMode::Exact ? total.convert_to<std::size_t>() : R;
  }

  static SubsetPlan automatic(int K, int k, std::size_t R, std::uint64_t seed,
                              std::size_t cap = kDefaultEnumerationCap) {
    SubsetPlan p;
    p.K = K;
    p.k = k;
    p.R = R;
    p.seed = seed;
    p.total = binomial_count(K, k);
    p.mode = (p.total <= R) ? SubsetMode::Exact : SubsetMode::Sampled;
    if (p.mode == SubsetMode::Exact && p.total > cap)
      throw ConfigError("exact subset collection for k=" + std::to_string(k) +
                        " has " + p.total.str() + " members, above the cap of " +
                        std::to_string(cap) + "; use sampled mode");
    return p;
  }

  static SubsetPlan exact(int K, int k, std::size_t cap = kDefaultEnumerationCap) {
    SubsetPlan p;
    p.K = K;
    p.k = k;
    p.total = binomial_count(K, k);
    p.mode = SubsetMode::Exact;
    if (p.total > cap)
      throw ConfigError("exact subset collection for k=" + std::to_string(k) +
                        " has " + p.total.str() + " members, above the cap of " +
                        std::to_string(cap) + "; use sampled mode");
    return p;
  }
};

}  // namespace csa
