#pragma once

// Test-only oracles. These deliberately avoid the library code paths they check.

#include "saelab/common.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>
#include <vector>

namespace saelab::oracle {

/// Greedy one-to-one matching on the cosine matrix between true atoms and
/// learned decoder rows: repeatedly take the best remaining pair. Returns the
/// mean cosine over true atoms.
inline double greedy_matched_cosine(const MatrixF& atoms, const MatrixF& decoder) {
  const Index a = atoms.rows(), n = decoder.rows();
  std::vector<std::tuple<double, Index, Index>> pairs;
  pairs.reserve(static_cast<std::size_t>(a * n));
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < n; ++j) {
      const double dot = atoms.row(i).cast<double>().dot(decoder.row(j).cast<double>());
      const double cos = dot / (atoms.row(i).cast<double>().norm() * decoder.row(j).cast<double>().norm());
      pairs.emplace_back(cos, i, j);
    }
  std::sort(pairs.begin(), pairs.end(), [](const auto& l, const auto& r) { return std::get<0>(l) > std::get<0>(r); });
  std::vector<bool> used_a(static_cast<std::size_t>(a)), used_n(static_cast<std::size_t>(n));
  double sum = 0;
  Index matched = 0;
  for (const auto& [c, i, j] : pairs) {
    if (used_a[static_cast<std::size_t>(i)] || used_n[static_cast<std::size_t>(j)]) continue;
    used_a[static_cast<std::size_t>(i)] = used_n[static_cast<std::size_t>(j)] = true;
    sum += c;
    if (++matched == std::min(a, n)) break;
  }
  return sum / static_cast<double>(a);
}

/// Reference TopK: full sort by (value desc, index asc), keep the first k positive entries.
inline std::vector<float> topk_reference(const std::vector<float>& pre, int k) {
  std::vector<std::size_t> order(pre.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return pre[l] > pre[r]; });
  std::vector<float> out(pre.size(), 0.0f);
  int kept = 0;
  for (auto i : order) {
    if (kept == k || pre[i] <= 0.0f) break;
    out[i] = pre[i];
    ++kept;
  }
  return out;
}

}  // namespace saelab::oracle
