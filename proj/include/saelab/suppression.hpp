#pragma once

// Attribute-aligned feature selection, zero ablation with group accuracy,
// tau grid search, random / base-neuron controls and cosine expansion.

#include "saelab/eval.hpp"

#include <map>
#include <set>
#include <variant>

namespace saelab {

struct ThresholdProv {
  double tau = 0;
};
struct ExpandedProv {
  double tau = 0;
  double lambda = 0;
};
struct RandomProv {
  std::uint64_t seed = 0;
  std::size_t size = 0;
};
struct BaseNeuronProv {
  double tau = 0;
};
using Provenance = std::variant<ThresholdProv, ExpandedProv, RandomProv, BaseNeuronProv>;

struct FeatureSet {
  int layer = 0;
  std::vector<Index> indices;  // sorted, unique
  Provenance provenance = ThresholdProv{};

  std::size_t size() const { return indices.size(); }
  bool contains(Index j) const { return std::binary_search(indices.begin(), indices.end(), j); }
};

inline void validate(const FeatureSet& fs, Index dimension) {
  require(std::is_sorted(fs.indices.begin(), fs.indices.end()) &&
              std::adjacent_find(fs.indices.begin(), fs.indices.end()) == fs.indices.end(),
          "feature set must be sorted and unique");
  for (Index j : fs.indices)
    if (j < 0 || j >= dimension) throw InvalidArgument("feature id " + std::to_string(j) + " out of range");
}

enum class Pooling { all_tokens, cls };

/// Mean activation per feature, over all selected tokens of all samples.
template <Dictionary D>
RowVecD mean_activations(const D& dict, const ActivationDataset& ds, Pooling pooling = Pooling::all_tokens) {
  require(ds.n_samples() > 0, "empty dataset");
  RowVecD sum = RowVecD::Zero(feature_count(dict));
  Index n = 0;
  const auto filter = pooling == Pooling::cls ? TokenFilter::cls_only : TokenFilter::all;
  detail::for_each_chunk(dict, ds, filter, [&](auto, const MatrixF&, const MatrixF& f) {
    sum += f.cast<double>().colwise().sum();
    n += f.rows();
  });
  return sum / static_cast<double>(n);
}

/// { j : mean_A(f_j) > mean_Abar(f_j) + tau }
inline std::vector<Index> threshold_select(const RowVecD& mean_a, const RowVecD& mean_abar, double tau) {
  std::vector<Index> out;
  for (Index j = 0; j < mean_a.size(); ++j)
    if (mean_a(j) > mean_abar(j) + tau) out.push_back(j);
  return out;
}

template <Dictionary D>
FeatureSet select_features(const D& dict, const ActivationDataset& d_a, const ActivationDataset& d_abar, double tau,
                           Pooling pooling = Pooling::all_tokens) {
  require(d_a.header.layer_id == d_abar.header.layer_id, "D_A and D_Abar come from different layers");
  FeatureSet fs;
  fs.layer = static_cast<int>(d_a.header.layer_id);
  fs.indices = threshold_select(mean_activations(dict, d_a, pooling), mean_activations(dict, d_abar, pooling), tau);
  fs.provenance = ThresholdProv{tau};
  return fs;
}

/// Same threshold rule, applied to raw residual coordinates.
inline FeatureSet select_neurons(const ActivationDataset& d_a, const ActivationDataset& d_abar, double tau,
                                 Pooling pooling = Pooling::all_tokens) {
  auto fs = select_features(LinearDictionary::identity(d_a.d_model()), d_a, d_abar, tau, pooling);
  fs.provenance = BaseNeuronProv{tau};
  return fs;
}

struct GroupAccuracy {
  double overall = 0;
  std::map<std::pair<std::int64_t, bool>, double> per_group;  // (Y, A) -> accuracy
  double worst = 0;
};

inline GroupAccuracy group_accuracy(std::span<const SampleMeta> meta, std::span<const std::int64_t> predictions) {
  require(meta.size() == predictions.size() && !meta.empty(), "prediction count mismatch");
  std::map<std::pair<std::int64_t, bool>, std::pair<std::size_t, std::size_t>> tally;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < meta.size(); ++i) {
    const bool ok = predictions[i] == meta[i].class_label;
    correct += ok;
    auto& t = tally[{meta[i].class_label, meta[i].attribute_flag}];
    t.first += ok;
    t.second += 1;
  }
  GroupAccuracy g;
  g.overall = static_cast<double>(correct) / static_cast<double>(meta.size());
  g.worst = 1.0;
  for (const auto& [k, t] : tally) {
    const double a = static_cast<double>(t.first) / static_cast<double>(t.second);
    g.per_group[k] = a;
    g.worst = std::min(g.worst, a);
  }
  return g;
}

/// Classifies every sample after applying `edit` to its layer activations.
template <class Edit>
GroupAccuracy evaluate_edit(const ToyVit& m, const ActivationDataset& acts, const VocabularyHead& class_vocab,
                            Edit&& edit, int threads = 1) {
  const int layer = static_cast<int>(acts.header.layer_id);
  std::vector<std::int64_t> pred(static_cast<std::size_t>(acts.n_samples()));
  parallel_for(pred.size(), threads, [&](std::size_t s) {
    const MatrixF x = acts.sample(static_cast<Index>(s));
    Index best = 0;
    head_logits(class_vocab, forward_from_layer(m, edit(x), layer)).maxCoeff(&best);
    pred[s] = best;
  });
  return group_accuracy(acts.meta, pred);
}

inline GroupAccuracy baseline_accuracy(const ToyVit& m, const ActivationDataset& acts, const VocabularyHead& class_vocab,
                                       int threads = 1) {
  return evaluate_edit(m, acts, class_vocab, [](const MatrixF& x) { return x; }, threads);
}

/// Zero-ablates SAE features: x - sum_{j in F} f_j d_j, which equals
/// decode(f with F zeroed) + (x - x_hat) and leaves x untouched for empty F.
template <Dictionary D>
MatrixF ablate_features_edit(const D& dict, const FeatureSet& fs, const MatrixF& x) {
  if (fs.indices.empty()) return x;
  const MatrixF f = encode(dict, x);
  MatrixF out = x;
  for (Index j : fs.indices) {
    const RowVecF d = decoder_direction(dict, j);
    for (Index t = 0; t < x.rows(); ++t)
      if (f(t, j) != 0.0f) out.row(t) -= f(t, j) * d;
  }
  return out;
}

inline MatrixF ablate_neurons_edit(const FeatureSet& fs, const MatrixF& x) {
  MatrixF out = x;
  for (Index j : fs.indices) out.col(j).setZero();
  return out;
}

template <Dictionary D>
GroupAccuracy ablate_and_eval(const ToyVit& m, const D& dict, const FeatureSet& fs, const ActivationDataset& acts,
                              const VocabularyHead& class_vocab, int threads = 1) {
  validate(fs, feature_count(dict));
  require(model_dim(dict) == acts.d_model(), "dictionary d_model does not match dataset");
  return evaluate_edit(m, acts, class_vocab, [&](const MatrixF& x) { return ablate_features_edit(dict, fs, x); }, threads);
}

inline GroupAccuracy ablate_neurons_and_eval(const ToyVit& m, const FeatureSet& fs, const ActivationDataset& acts,
                                             const VocabularyHead& class_vocab, int threads = 1) {
  validate(fs, acts.d_model());
  return evaluate_edit(m, acts, class_vocab, [&](const MatrixF& x) { return ablate_neurons_edit(fs, x); }, threads);
}

inline std::vector<double> default_tau_grid(std::size_t points = 25, double lo = 1e-6, double hi = 1.0) {
  require(points >= 2 && lo > 0 && hi > lo, "bad tau grid");
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i)
    g.push_back(std::pow(10.0, std::log10(lo) + (std::log10(hi) - std::log10(lo)) * double(i) / double(points - 1)));
  return g;
}

enum class SelectionMode { strict, relaxed };

struct TauCell {
  double tau = 0;
  std::size_t n_features = 0;
  GroupAccuracy val;
};

struct TauSearch {
  bool improved = false;          // false: baseline kept (empty set)
  double tau = 0;
  FeatureSet features;
  GroupAccuracy val;
  GroupAccuracy val_baseline;
  std::vector<TauCell> cells;
};

/// Ranks a candidate against the current best; returns true if it should replace it.
inline bool better_candidate(SelectionMode mode, const GroupAccuracy& cand, std::size_t cand_size, double cand_tau,
                             const GroupAccuracy& best, std::size_t best_size, double best_tau) {
  const auto key = [&](const GroupAccuracy& g) {
    return mode == SelectionMode::strict ? std::pair{g.overall, g.worst} : std::pair{g.worst, 0.0};
  };
  if (key(cand) != key(best)) return key(cand) > key(best);
  if (cand_size != best_size) return cand_size < best_size;
  return cand_tau < best_tau;
}

/// Relaxed constraint: each group other than the baseline's worst loses at most `max_drop` (absolute).
inline bool within_relaxed_budget(const GroupAccuracy& cand, const GroupAccuracy& base, double max_drop) {
  std::pair<std::int64_t, bool> worst_key{};
  double w = 2.0;
  for (const auto& [k, a] : base.per_group)
    if (a < w) {
      w = a;
      worst_key = k;
    }
  for (const auto& [k, a] : base.per_group) {
    if (k == worst_key) continue;
    const auto it = cand.per_group.find(k);
    const double c = it == cand.per_group.end() ? 0.0 : it->second;
    if (base.per_group.at(k) - c > max_drop + 1e-12) return false;
  }
  return true;
}

/// `ablate(fs, acts)` evaluates one candidate set; `select(tau)` produces the set for a tau.
template <class Select, class Ablate>
TauSearch grid_search(std::span<const double> tau_grid, SelectionMode mode, const GroupAccuracy& val_baseline,
                      Select&& select, Ablate&& ablate, double relaxed_drop = 0.04) {
  require(!tau_grid.empty() && std::is_sorted(tau_grid.begin(), tau_grid.end()), "tau grid must be non-empty ascending");
  TauSearch r;
  r.val_baseline = val_baseline;
  r.val = val_baseline;
  std::size_t best_size = 0;
  double best_tau = -1;  // baseline sorts first on ties
  for (double tau : tau_grid) {
    FeatureSet fs = select(tau);
    const GroupAccuracy acc = fs.indices.empty() ? val_baseline : ablate(fs);
    r.cells.push_back({tau, fs.size(), acc});
    if (fs.indices.empty()) continue;
    if (mode == SelectionMode::relaxed && !within_relaxed_budget(acc, val_baseline, relaxed_drop)) continue;
    if (better_candidate(mode, acc, fs.size(), tau, r.val, best_size, best_tau)) {
      r.improved = true;
      r.tau = tau;
      r.features = fs;
      r.val = acc;
      best_size = fs.size();
      best_tau = tau;
    }
  }
  return r;
}

/// Grid search for SAE features: selection on (D_A, D_Abar), scoring on the validation set.
template <Dictionary D>
TauSearch grid_search_tau(const ToyVit& m, const D& dict, const ActivationDataset& d_a, const ActivationDataset& d_abar,
                          const ActivationDataset& val, const VocabularyHead& class_vocab, std::span<const double> tau_grid,
                          SelectionMode mode, Pooling pooling = Pooling::all_tokens, int threads = 1) {
  const RowVecD ma = mean_activations(dict, d_a, pooling), mb = mean_activations(dict, d_abar, pooling);
  const int layer = static_cast<int>(val.header.layer_id);
  return grid_search(
      tau_grid, mode, baseline_accuracy(m, val, class_vocab, threads),
      [&](double tau) { return FeatureSet{layer, threshold_select(ma, mb, tau), ThresholdProv{tau}}; },
      [&](const FeatureSet& fs) { return ablate_and_eval(m, dict, fs, val, class_vocab, threads); });
}

inline TauSearch grid_search_tau_neurons(const ToyVit& m, const ActivationDataset& d_a, const ActivationDataset& d_abar,
                                         const ActivationDataset& val, const VocabularyHead& class_vocab,
                                         std::span<const double> tau_grid, SelectionMode mode,
                                         Pooling pooling = Pooling::all_tokens, int threads = 1) {
  const auto id = LinearDictionary::identity(d_a.d_model());
  const RowVecD ma = mean_activations(id, d_a, pooling), mb = mean_activations(id, d_abar, pooling);
  const int layer = static_cast<int>(val.header.layer_id);
  return grid_search(
      tau_grid, mode, baseline_accuracy(m, val, class_vocab, threads),
      [&](double tau) { return FeatureSet{layer, threshold_select(ma, mb, tau), BaseNeuronProv{tau}}; },
      [&](const FeatureSet& fs) { return ablate_neurons_and_eval(m, fs, val, class_vocab, threads); });
}

inline FeatureSet random_control(Index dimension, std::size_t size, std::uint64_t seed, int layer = 0) {
  if (size > static_cast<std::size_t>(dimension))
    throw InvalidArgument("random control size " + std::to_string(size) + " exceeds dimension " + std::to_string(dimension));
  std::vector<Index> all(static_cast<std::size_t>(dimension));
  std::iota(all.begin(), all.end(), Index{0});
  Rng rng(mix_seed(seed, 0xAB1A7E));
  // partial Fisher-Yates
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  FeatureSet fs{layer, std::vector<Index>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(size)),
                RandomProv{seed, size}};
  std::sort(fs.indices.begin(), fs.indices.end());
  return fs;
}

/// base U { j : max_{m in base, m != j} cos(d_j, d_m) > lambda }
template <Dictionary D>
FeatureSet expand_feature_set(const D& dict, const FeatureSet& base, double lambda) {
  validate(base, feature_count(dict));
  const double tau = std::visit(
      [](const auto& p) -> double {
        if constexpr (requires { p.tau; }) return p.tau;
        return 0.0;
      },
      base.provenance);
  FeatureSet out{base.layer, {}, ExpandedProv{tau, lambda}};
  if (base.indices.empty()) return out;
  const Index n = feature_count(dict);
  MatrixD dirs(n, model_dim(dict));
  for (Index j = 0; j < n; ++j) {
    const RowVecD d = decoder_direction(dict, j).template cast<double>();
    const double norm = d.norm();
    dirs.row(j) = norm > 0 ? RowVecD(d / norm) : d;
  }
  MatrixD base_dirs(static_cast<Index>(base.size()), dirs.cols());
  for (std::size_t i = 0; i < base.size(); ++i) base_dirs.row(static_cast<Index>(i)) = dirs.row(base.indices[i]);
  const MatrixD cos = dirs * base_dirs.transpose();  // [n, |base|]
  for (Index j = 0; j < n; ++j) {
    if (base.contains(j)) {
      out.indices.push_back(j);
      continue;
    }
    if (cos.row(j).maxCoeff() > lambda) out.indices.push_back(j);
  }
  return out;
}

struct TypographicResult {
  FeatureSet base;
  FeatureSet expanded;
  GroupAccuracy attacked_before, attacked_after;
  GroupAccuracy clean_before, clean_after;
  double recovery_points() const { return 100.0 * (attacked_after.overall - attacked_before.overall); }
  double clean_drop_points() const { return 100.0 * (clean_before.overall - clean_after.overall); }
};

/// Selects on (select_attacked, select_clean), expands, then evaluates on (eval_clean, eval_attacked).
template <Dictionary D>
TypographicResult typographic_pipeline(const ToyVit& m, const D& dict, const ActivationDataset& select_clean,
                                       const ActivationDataset& select_attacked, const ActivationDataset& eval_clean,
                                       const ActivationDataset& eval_attacked, const VocabularyHead& class_vocab,
                                       double tau = 1.0, double lambda = 0.2, Pooling pooling = Pooling::all_tokens,
                                       int threads = 1) {
  TypographicResult r;
  r.base = select_features(dict, select_attacked, select_clean, tau, pooling);
  r.expanded = expand_feature_set(dict, r.base, lambda);
  r.attacked_before = baseline_accuracy(m, eval_attacked, class_vocab, threads);
  r.clean_before = baseline_accuracy(m, eval_clean, class_vocab, threads);
  r.attacked_after = ablate_and_eval(m, dict, r.expanded, eval_attacked, class_vocab, threads);
  r.clean_after = ablate_and_eval(m, dict, r.expanded, eval_clean, class_vocab, threads);
  return r;
}

}  // namespace saelab
