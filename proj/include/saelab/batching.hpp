#pragma once

#include "saelab/shard.hpp"

#include <numeric>

namespace saelab {

enum class TokenFilter { all, cls_only, spatial_only };

inline bool token_selected(TokenFilter f, Index token) {
  switch (f) {
    case TokenFilter::all: return true;
    case TokenFilter::cls_only: return token == 0;
    case TokenFilter::spatial_only: return token != 0;
  }
  return false;
}

/// Flat row ids (sample * n_tokens + token) passing the filter, in storage order.
inline std::vector<Index> selected_rows(const ActivationDataset& ds, TokenFilter filter) {
  std::vector<Index> rows;
  for (Index s = 0; s < ds.n_samples(); ++s)
    for (Index t = 0; t < ds.n_tokens(); ++t)
      if (token_selected(filter, t)) rows.push_back(s * ds.n_tokens() + t);
  return rows;
}

/// Copies the given flat rows into a dense [rows, d_model] matrix.
inline MatrixF gather_rows(const ActivationDataset& ds, std::span<const Index> rows) {
  MatrixF out(static_cast<Index>(rows.size()), ds.d_model());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Index>(i)) =
        Eigen::Map<const RowVecF>(ds.activations.data() + rows[i] * ds.d_model(), ds.d_model());
  return out;
}

/// All filtered token rows as one matrix.
inline MatrixF token_matrix(const ActivationDataset& ds, TokenFilter filter = TokenFilter::all) {
  const auto rows = selected_rows(ds, filter);
  return gather_rows(ds, rows);
}

/// Deterministic shuffled mini-batches over the filtered token rows. Each
/// epoch visits every selected row once; epoch e is ordered by a permutation
/// seeded from (shuffle_seed, e). The last batch of an epoch may be partial.
class BatchIterator {
 public:
  BatchIterator(const ActivationDataset& ds, Index batch_size, std::uint64_t shuffle_seed,
                TokenFilter filter)
      : ds_(&ds), batch_size_(batch_size), seed_(shuffle_seed), rows_(selected_rows(ds, filter)) {
    require(batch_size >= 1, "batch_size must be positive");
    if (rows_.empty()) throw InvalidArgument("token filter selects no rows");
    start_epoch(0);
  }

  /// Fills `out` with the next batch of the current epoch; false once the epoch is exhausted.
  bool next(MatrixF& out) {
    if (cursor_ >= order_.size()) return false;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size_), order_.size() - cursor_);
    out = gather_rows(*ds_, std::span<const Index>(order_.data() + cursor_, n));
    cursor_ += n;
    return true;
  }

  /// Like next(), but rolls over into the following epoch instead of stopping.
  void next_cycling(MatrixF& out) {
    if (!next(out)) {
      start_epoch(epoch_ + 1);
      next(out);
    }
  }

  void start_epoch(std::uint64_t epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    order_ = rows_;
    Rng rng(mix_seed(seed_, epoch));
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t rows_per_epoch() const { return rows_.size(); }

 private:
  const ActivationDataset* ds_;
  Index batch_size_;
  std::uint64_t seed_;
  std::vector<Index> rows_;
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
};

inline BatchIterator iterate_batches(const ActivationDataset& ds, Index batch_size,
                                     std::uint64_t shuffle_seed, TokenFilter filter) {
  return BatchIterator(ds, batch_size, shuffle_seed, filter);
}

}  // namespace saelab
