#pragma once

// Steering a single SAE feature (or residual coordinate) at a fixed strength
// on every token, and the steerability metrics computed from the resulting
// output-distribution shift.

#include "saelab/eval.hpp"

#include <numeric>
#include <set>
#include <variant>

namespace saelab {

struct SaeFeature {
  int layer = 0;
  Index id = 0;
};
struct Neuron {
  int layer = 0;
  Index id = 0;
};
using SteerTarget = std::variant<SaeFeature, Neuron>;

inline std::vector<double> default_strengths() { return {0, 1, 2, 5, 10, 20, 35, 50, 75, 100, 125, 150}; }

struct SteerConfig {
  std::vector<double> strengths = default_strengths();
  double gamma = 0.10;
  double beta = 0.5;
  std::size_t top_k_concepts = 3;
  int threads = 1;

  void validate() const {
    require(!strengths.empty(), "strength list is empty");
    require(strengths.front() == 0.0, "strengths must start at 0");
    require(std::is_sorted(strengths.begin(), strengths.end()), "strengths must be ascending");
    require(gamma > 0 && gamma <= 1, "gamma must be in (0, 1]");
    require(beta > 0 && beta <= 1, "beta must be in (0, 1]");
  }
};

/// Clean layer activations and clean head distributions for a fixed image set.
struct SteerBench {
  const ToyVit* model = nullptr;
  VocabularyHead head;
  int layer = 0;
  std::vector<MatrixF> clean_acts;  // per image, [n_tokens, d]
  MatrixD clean_probs;              // [images, |V|]
};

inline SteerBench make_steer_bench(const ToyVit& m, const VocabularyHead& head, const ActivationDataset& layer_acts,
                                   int threads = 1) {
  require(layer_acts.n_samples() > 0, "steering image set is empty");
  SteerBench b;
  b.model = &m;
  b.head = head;
  b.layer = static_cast<int>(layer_acts.header.layer_id);
  require(b.layer < m.config.n_layers, "layer beyond model depth");
  for (Index s = 0; s < layer_acts.n_samples(); ++s) b.clean_acts.emplace_back(layer_acts.sample(s));
  b.clean_probs.resize(layer_acts.n_samples(), head.size());
  parallel_for(b.clean_acts.size(), threads, [&](std::size_t i) {
    b.clean_probs.row(static_cast<Index>(i)) = zero_shot_probs(head, forward_from_layer(m, b.clean_acts[i], b.layer));
  });
  return b;
}

/// Resumes the forward pass from edited activations for every image.
template <class Edit>
MatrixD steered_probs(const SteerBench& b, Edit&& edit, int threads = 1) {
  MatrixD out(static_cast<Index>(b.clean_acts.size()), b.head.size());
  parallel_for(b.clean_acts.size(), threads, [&](std::size_t i) {
    const MatrixF x = edit(b.clean_acts[i]);
    out.row(static_cast<Index>(i)) = zero_shot_probs(b.head, forward_from_layer(*b.model, x, b.layer));
  });
  return out;
}

/// Feature edit: x + decode(f with f_j := s) - decode(f), i.e. the reconstruction
/// error is carried through unchanged.
template <Dictionary D>
MatrixF steer_feature_edit(const D& dict, const MatrixF& x, Index feature, double strength) {
  MatrixF f = encode(dict, x);
  const MatrixF x_hat = decode(dict, f);
  f.col(feature).setConstant(static_cast<float>(strength));
  return decode(dict, f) + (x - x_hat);
}

inline MatrixF steer_neuron_edit(const MatrixF& x, Index dim, double strength) {
  MatrixF out = x;
  out.col(dim).setConstant(static_cast<float>(strength));
  return out;
}

template <Dictionary D>
MatrixD steer_forward(const SteerBench& b, const D& dict, Index feature, double strength, int threads = 1) {
  if (feature < 0 || feature >= feature_count(dict))
    throw InvalidArgument("feature id " + std::to_string(feature) + " out of range");
  require(model_dim(dict) == b.model->config.d_model, "dictionary d_model does not match model");
  return steered_probs(b, [&](const MatrixF& x) { return steer_feature_edit(dict, x, feature, strength); }, threads);
}

inline MatrixD steer_neuron_forward(const SteerBench& b, Index dim, double strength, int threads = 1) {
  if (dim < 0 || dim >= b.model->config.d_model) throw InvalidArgument("neuron id " + std::to_string(dim) + " out of range");
  return steered_probs(b, [&](const MatrixF& x) { return steer_neuron_edit(x, dim, strength); }, threads);
}

inline RowVecD mean_shift(const MatrixD& clean, const MatrixD& steered) {
  require(clean.rows() == steered.rows() && clean.cols() == steered.cols() && clean.rows() > 0,
          "distribution lists differ in shape");
  return (steered - clean).colwise().mean();
}

/// Total variation of the image-averaged shift.
inline double delta_p(const MatrixD& clean, const MatrixD& steered) {
  return 0.5 * mean_shift(clean, steered).cwiseAbs().sum();
}

/// Squared L2 norm of the image-averaged shift.
inline double steerability(const MatrixD& clean, const MatrixD& steered) {
  return mean_shift(clean, steered).squaredNorm();
}

/// Sum_v P(v) * ||t_v - mean_V||.
inline double concept_distance(const VocabularyHead& head, const RowVecD& dist) {
  require(dist.size() == head.size(), "distribution length does not match vocabulary");
  const MatrixD t = head.embeddings.cast<double>();
  const RowVecD mu = t.colwise().mean();
  double d = 0;
  for (Index v = 0; v < t.rows(); ++v) d += dist(v) * (t.row(v) - mu).norm();
  return d;
}

struct RankedConcept {
  std::string name;
  Index index = 0;
  double prob = 0;
};

struct SteerPoint {
  double strength = 0;
  double delta_p = 0;
  double steerability = 0;
  double d_f = 0;
  RowVecD shift;  // mean_i(P~_i - P_i)
  std::vector<RankedConcept> top_concepts;  // by mean steered probability
  Index promoted = 0;                       // argmax of the mean shift
};

struct SweepReport {
  SteerTarget target;
  std::vector<SteerPoint> points;
};

inline SteerPoint summarize_point(const SteerBench& b, double strength, const MatrixD& steered, std::size_t top_k) {
  SteerPoint p;
  p.strength = strength;
  p.shift = mean_shift(b.clean_probs, steered);
  p.delta_p = 0.5 * p.shift.cwiseAbs().sum();
  p.steerability = p.shift.squaredNorm();
  const RowVecD mean_p = steered.colwise().mean();
  p.d_f = concept_distance(b.head, mean_p);
  p.shift.maxCoeff(&p.promoted);
  std::vector<Index> order(static_cast<std::size_t>(mean_p.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto k = std::min<std::size_t>(top_k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](Index l, Index r) { return mean_p(l) != mean_p(r) ? mean_p(l) > mean_p(r) : l < r; });
  for (std::size_t i = 0; i < k; ++i)
    p.top_concepts.push_back({b.head.names[static_cast<std::size_t>(order[i])], order[i], mean_p(order[i])});
  return p;
}

template <Dictionary D>
SweepReport asymptotic_sweep(const SteerBench& b, const D& dict, Index feature, const SteerConfig& cfg) {
  cfg.validate();
  SweepReport r{SaeFeature{b.layer, feature}, {}};
  for (double s : cfg.strengths)
    r.points.push_back(summarize_point(b, s, steer_forward(b, dict, feature, s, cfg.threads), cfg.top_k_concepts));
  return r;
}

inline SweepReport neuron_sweep(const SteerBench& b, Index dim, const SteerConfig& cfg) {
  cfg.validate();
  SweepReport r{Neuron{b.layer, dim}, {}};
  for (double s : cfg.strengths)
    r.points.push_back(summarize_point(b, s, steer_neuron_forward(b, dim, s, cfg.threads), cfg.top_k_concepts));
  return r;
}

struct LayerMetrics {
  double average = 0;  // mean S_f
  std::size_t steerable_count = 0;
  double steerable_proportion = 0;
  std::size_t concept_count = 0;     // features with S_f > beta
  std::size_t distinct_concepts = 0;  // distinct promoted concepts among those
};

/// `promoted` may be empty when only the counts are needed.
inline LayerMetrics layer_metrics(std::span<const double> s_f, std::span<const Index> promoted, double gamma, double beta) {
  require(!s_f.empty(), "no steerability values");
  require(promoted.empty() || promoted.size() == s_f.size(), "promoted list length mismatch");
  LayerMetrics m;
  std::set<Index> concepts;
  double sum = 0;
  for (std::size_t i = 0; i < s_f.size(); ++i) {
    sum += s_f[i];
    if (s_f[i] > gamma) ++m.steerable_count;
    if (s_f[i] > beta) {
      ++m.concept_count;
      if (!promoted.empty()) concepts.insert(promoted[i]);
    }
  }
  m.average = sum / static_cast<double>(s_f.size());
  m.steerable_proportion = static_cast<double>(m.steerable_count) / static_cast<double>(s_f.size());
  m.distinct_concepts = concepts.size();
  return m;
}

/// Steerability at a single strength for many targets, parallel over targets.
struct ScanResult {
  std::vector<double> s_f;
  std::vector<Index> promoted;
  LayerMetrics metrics;
};

template <class ProbsFn>
ScanResult scan_targets(const SteerBench& b, Index n_targets, ProbsFn&& probs_for, const SteerConfig& cfg) {
  ScanResult r;
  r.s_f.resize(static_cast<std::size_t>(n_targets));
  r.promoted.resize(static_cast<std::size_t>(n_targets));
  parallel_for(static_cast<std::size_t>(n_targets), cfg.threads, [&](std::size_t j) {
    const RowVecD shift = mean_shift(b.clean_probs, probs_for(static_cast<Index>(j)));
    r.s_f[j] = shift.squaredNorm();
    shift.maxCoeff(&r.promoted[j]);
  });
  r.metrics = layer_metrics(r.s_f, r.promoted, cfg.gamma, cfg.beta);
  return r;
}

template <Dictionary D>
ScanResult feature_scan(const SteerBench& b, const D& dict, std::span<const Index> features, double strength,
                        const SteerConfig& cfg) {
  return scan_targets(
      b, static_cast<Index>(features.size()),
      [&](Index j) { return steer_forward(b, dict, features[static_cast<std::size_t>(j)], strength); }, cfg);
}

inline ScanResult neuron_scan(const SteerBench& b, double strength, const SteerConfig& cfg) {
  return scan_targets(
      b, b.model->config.d_model, [&](Index j) { return steer_neuron_forward(b, j, strength); }, cfg);
}

struct HistogramBin {
  double lo = 0, hi = 0;
  std::size_t count = 0;
};

/// First bin holds values <= min_edge (zeros included); the rest are log-spaced up to max_edge.
inline std::vector<HistogramBin> log_histogram(std::span<const double> values, std::size_t n_bins = 24,
                                               double min_edge = 1e-6, double max_edge = 2.0) {
  require(n_bins >= 1 && min_edge > 0 && max_edge > min_edge, "bad histogram spec");
  std::vector<HistogramBin> bins;
  bins.push_back({0.0, min_edge, 0});
  const double l0 = std::log10(min_edge), l1 = std::log10(max_edge);
  for (std::size_t i = 0; i < n_bins; ++i)
    bins.push_back({std::pow(10.0, l0 + (l1 - l0) * double(i) / double(n_bins)),
                    std::pow(10.0, l0 + (l1 - l0) * double(i + 1) / double(n_bins)), 0});
  for (double v : values) {
    if (v <= min_edge) {
      ++bins[0].count;
      continue;
    }
    auto idx = static_cast<std::size_t>(std::floor((std::log10(v) - l0) / (l1 - l0) * double(n_bins)));
    bins[1 + std::min(idx, n_bins - 1)].count++;
  }
  return bins;
}

inline void write_sweep_csv_header(std::ostream& out, std::size_t top_k = 3) {
  out << "target_kind,layer,id,strength,delta_p,steerability,d_f";
  for (std::size_t i = 1; i <= top_k; ++i) out << ",top" << i << "_concept,top" << i << "_prob";
  out << "\n";
}

inline void write_sweep_csv_rows(std::ostream& out, const SweepReport& r, std::size_t top_k = 3) {
  const bool feature = std::holds_alternative<SaeFeature>(r.target);
  const int layer = feature ? std::get<SaeFeature>(r.target).layer : std::get<Neuron>(r.target).layer;
  const Index id = feature ? std::get<SaeFeature>(r.target).id : std::get<Neuron>(r.target).id;
  out.precision(10);
  for (const auto& p : r.points) {
    out << (feature ? "feature" : "neuron") << "," << layer << "," << id << "," << p.strength << "," << p.delta_p << ","
        << p.steerability << "," << p.d_f;
    for (std::size_t i = 0; i < top_k; ++i) {
      if (i < p.top_concepts.size())
        out << "," << p.top_concepts[i].name << "," << p.top_concepts[i].prob;
      else
        out << ",,";
    }
    out << "\n";
  }
}

/// Per-concept mean shift vectors, one row per (target, strength), for alternative reductions.
inline void write_shift_csv(std::ostream& out, const VocabularyHead& head, std::span<const SweepReport> reports) {
  out << "target_kind,id,strength";
  for (const auto& n : head.names) out << "," << n;
  out << "\n";
  out.precision(10);
  for (const auto& r : reports) {
    const bool feature = std::holds_alternative<SaeFeature>(r.target);
    const Index id = feature ? std::get<SaeFeature>(r.target).id : std::get<Neuron>(r.target).id;
    for (const auto& p : r.points) {
      out << (feature ? "feature" : "neuron") << "," << id << "," << p.strength;
      for (Index v = 0; v < p.shift.size(); ++v) out << "," << p.shift(v);
      out << "\n";
    }
  }
}

inline void write_histogram_csv(std::ostream& out, std::span<const HistogramBin> bins) {
  out << "bin_lo,bin_hi,count\n";
  out.precision(10);
  for (const auto& b : bins) out << b.lo << "," << b.hi << "," << b.count << "\n";
}

}  // namespace saelab
