#pragma once

// Reconstruction and sparsity metrics over activation datasets, plus the
// splice-in cross-entropy suite against a toy model and vocabulary head.

#include "saelab/batching.hpp"
#include "saelab/sae.hpp"
#include "saelab/vocab.hpp"

#include <optional>
#include <ostream>

namespace saelab {

namespace detail {

/// Encodes and decodes the dataset in chunks so large shards do not need one giant matrix.
template <Dictionary D, class Fn>
void for_each_chunk(const D& dict, const ActivationDataset& ds, TokenFilter filter, Fn&& fn, Index chunk = 4096) {
  require(ds.d_model() == model_dim(dict), "dictionary d_model does not match dataset");
  const auto rows = selected_rows(ds, filter);
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(chunk)) {
    const auto n = std::min(rows.size() - start, static_cast<std::size_t>(chunk));
    const std::span<const Index> ids(rows.data() + start, n);
    const MatrixF x = gather_rows(ds, ids);
    const MatrixF f = encode(dict, x);
    fn(ids, x, f);
  }
}

}  // namespace detail

template <Dictionary D>
double explained_variance(const ActivationDataset& ds, const D& dict, TokenFilter filter = TokenFilter::all) {
  const MatrixD x_all = token_matrix(ds, filter).template cast<double>();
  require(x_all.rows() > 0, "no tokens selected");
  const RowVecD mean = x_all.colwise().mean();
  const double var = (x_all.rowwise() - mean).squaredNorm();
  if (!(var > 0)) throw InvalidArgument("dataset has zero variance");
  double err = 0;
  detail::for_each_chunk(dict, ds, filter, [&](auto, const MatrixF& x, const MatrixF& f) {
    err += (x.cast<double>() - decode(dict, f).template cast<double>()).squaredNorm();
  });
  return 1.0 - err / var;
}

struct Summary {
  double mean = 0, q1 = 0, median = 0, q3 = 0;
};

inline Summary summarize(std::vector<double> v) {
  Summary s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  const auto q = [&](double p) {
    // linear interpolation between closest ranks
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  s.q1 = q(0.25);
  s.median = q(0.5);
  s.q3 = q(0.75);
  return s;
}

struct L0Report {
  MatrixD per_patch_mean;  // [grid_rows, grid_cols]
  Summary cls;
  Summary spatial;
  double avg_img_l0 = 0;  // sum of spatial-token L0 per image, averaged over images
  double avg_cls_l0 = 0;
};

template <Dictionary D>
L0Report l0_stats(const ActivationDataset& ds, const D& dict, double activation_threshold = 0.0) {
  require(ds.n_samples() > 0, "empty dataset");
  const int rows = ds.meta[0].grid_rows, cols = ds.meta[0].grid_cols;
  require(Index{rows} * cols + 1 == ds.n_tokens(), "dataset has no usable grid metadata");
  L0Report r;
  r.per_patch_mean = MatrixD::Zero(rows, cols);
  std::vector<double> cls_l0, spatial_l0;
  std::vector<double> img_sum(static_cast<std::size_t>(ds.n_samples()), 0.0);
  detail::for_each_chunk(dict, ds, TokenFilter::all, [&](std::span<const Index> ids, const MatrixF&, const MatrixF& f) {
    for (Index i = 0; i < f.rows(); ++i) {
      const double l0 = static_cast<double>((f.row(i).array().template cast<double>() > activation_threshold).count());
      const Index s = ids[static_cast<std::size_t>(i)] / ds.n_tokens();
      const Index t = ids[static_cast<std::size_t>(i)] % ds.n_tokens();
      if (t == 0) {
        cls_l0.push_back(l0);
      } else {
        spatial_l0.push_back(l0);
        img_sum[static_cast<std::size_t>(s)] += l0;
        r.per_patch_mean((t - 1) / cols, (t - 1) % cols) += l0;
      }
    }
  });
  r.per_patch_mean /= static_cast<double>(ds.n_samples());
  r.cls = summarize(cls_l0);
  r.spatial = summarize(spatial_l0);
  r.avg_cls_l0 = r.cls.mean;
  r.avg_img_l0 = summarize(img_sum).mean;
  return r;
}

/// Mean L0 over a set of patch indices (row-major, excluding CLS).
inline double mean_over_patches(const L0Report& r, std::span<const Index> patches) {
  double s = 0;
  for (Index p : patches) s += r.per_patch_mean(p / r.per_patch_mean.cols(), p % r.per_patch_mean.cols());
  return s / static_cast<double>(patches.size());
}

struct CosineMetrics {
  double token_cos = 0;  // mean over tokens of cos(x, x_hat)
  double image_cos = 0;  // mean over images of cos(mean-pooled x, mean-pooled x_hat)
  Index skipped_tokens = 0;
  Index skipped_images = 0;
};

template <Dictionary D>
CosineMetrics cosine_metrics(const ActivationDataset& ds, const D& dict) {
  CosineMetrics m;
  const Index nt = ds.n_tokens();
  MatrixD pooled_x = MatrixD::Zero(ds.n_samples(), ds.d_model());
  MatrixD pooled_h = pooled_x;
  double sum = 0;
  Index counted = 0;
  detail::for_each_chunk(dict, ds, TokenFilter::all, [&](std::span<const Index> ids, const MatrixF& x, const MatrixF& f) {
    const MatrixD xd = x.cast<double>(), hd = decode(dict, f).template cast<double>();
    for (Index i = 0; i < xd.rows(); ++i) {
      const Index s = ids[static_cast<std::size_t>(i)] / nt;
      pooled_x.row(s) += xd.row(i);
      pooled_h.row(s) += hd.row(i);
      const double den = xd.row(i).norm() * hd.row(i).norm();
      if (den == 0) {
        ++m.skipped_tokens;
        continue;
      }
      sum += xd.row(i).dot(hd.row(i)) / den;
      ++counted;
    }
  });
  if (counted == 0) throw InvalidArgument("every token has zero norm");
  m.token_cos = sum / static_cast<double>(counted);
  double isum = 0;
  Index icount = 0;
  for (Index s = 0; s < ds.n_samples(); ++s) {
    const double den = pooled_x.row(s).norm() * pooled_h.row(s).norm();
    if (den == 0) {
      ++m.skipped_images;
      continue;
    }
    isum += pooled_x.row(s).dot(pooled_h.row(s)) / den;
    ++icount;
  }
  m.image_cos = icount ? isum / static_cast<double>(icount) : 0.0;
  return m;
}

struct ActivatingToken {
  std::uint64_t sample_id = 0;
  Index token = 0;
  double activation = 0;
};

template <Dictionary D>
std::vector<ActivatingToken> max_activating_samples(const ActivationDataset& ds, const D& dict, Index feature,
                                                    std::size_t top_n) {
  if (feature < 0 || feature >= feature_count(dict))
    throw InvalidArgument("feature id " + std::to_string(feature) + " out of range");
  std::vector<ActivatingToken> all;
  detail::for_each_chunk(dict, ds, TokenFilter::all, [&](std::span<const Index> ids, const MatrixF&, const MatrixF& f) {
    for (Index i = 0; i < f.rows(); ++i) {
      const float a = f(i, feature);
      if (a <= 0) continue;
      const Index flat = ids[static_cast<std::size_t>(i)];
      all.push_back({ds.meta[static_cast<std::size_t>(flat / ds.n_tokens())].sample_id, flat % ds.n_tokens(), a});
    }
  });
  const auto order = [](const ActivatingToken& l, const ActivatingToken& r) {
    if (l.activation != r.activation) return l.activation > r.activation;
    if (l.sample_id != r.sample_id) return l.sample_id < r.sample_id;
    return l.token < r.token;
  };
  const auto n = std::min(top_n, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), order);
  all.resize(n);
  return all;
}

/// 100 * (zero - recon) / (zero - clean); empty when the denominator is not above 1e-9.
inline std::optional<double> ce_recovered(double ce_clean, double ce_recon, double ce_zero_abl) {
  const double den = ce_zero_abl - ce_clean;
  if (!(den > 1e-9)) return std::nullopt;
  return 100.0 * (ce_zero_abl - ce_recon) / den;
}

struct CeReport {
  double ce_clean = 0;
  double ce_recon = 0;
  double ce_zero_abl = 0;
  std::optional<double> ce_recovered_pct;
  bool degenerate = false;
  double embedding_cos = 0;  // mean cos(clean embedding, spliced embedding)
};

/// Mean cross-entropy of the class head over samples, with a per-sample splice applied to layer activations.
template <class Splice>
double spliced_cross_entropy(const ToyVit& m, const ActivationDataset& layer_acts, const VocabularyHead& class_vocab,
                             Splice&& splice, std::vector<RowVecF>* embeddings = nullptr, int threads = 1) {
  const int layer = static_cast<int>(layer_acts.header.layer_id);
  std::vector<double> ce(static_cast<std::size_t>(layer_acts.n_samples()));
  if (embeddings) embeddings->resize(ce.size());
  parallel_for(ce.size(), threads, [&](std::size_t s) {
    const MatrixF x = layer_acts.sample(static_cast<Index>(s));
    const RowVecF e = forward_from_layer(m, splice(x), layer);
    const auto label = layer_acts.meta[s].class_label;
    require(label >= 0 && label < class_vocab.size(), "label not covered by the head");
    ce[s] = -std::log(std::max(zero_shot_probs(class_vocab, e)(label), 1e-300));
    if (embeddings) (*embeddings)[s] = e;
  });
  double sum = 0;
  for (double v : ce) sum += v;
  return sum / static_cast<double>(ce.size());
}

template <Dictionary D>
CeReport ce_suite(const ToyVit& m, const D& dict, const ActivationDataset& layer_acts, const VocabularyHead& class_vocab,
                  int threads = 1) {
  require(layer_acts.n_samples() > 0, "empty dataset");
  require(static_cast<int>(layer_acts.header.layer_id) < m.config.n_layers, "layer beyond model depth");
  require(layer_acts.d_model() == model_dim(dict), "dictionary d_model does not match dataset");
  CeReport r;
  std::vector<RowVecF> clean_e, recon_e;
  r.ce_clean = spliced_cross_entropy(m, layer_acts, class_vocab, [](const MatrixF& x) { return x; }, &clean_e, threads);
  r.ce_recon = spliced_cross_entropy(
      m, layer_acts, class_vocab, [&](const MatrixF& x) { return MatrixF(decode(dict, encode(dict, x))); }, &recon_e,
      threads);
  r.ce_zero_abl = spliced_cross_entropy(
      m, layer_acts, class_vocab, [](const MatrixF& x) { return MatrixF(MatrixF::Zero(x.rows(), x.cols())); }, nullptr,
      threads);
  r.ce_recovered_pct = ce_recovered(r.ce_clean, r.ce_recon, r.ce_zero_abl);
  r.degenerate = !r.ce_recovered_pct.has_value();
  double cs = 0;
  for (std::size_t i = 0; i < clean_e.size(); ++i)
    cs += clean_e[i].cast<double>().dot(recon_e[i].cast<double>()) /
          (clean_e[i].cast<double>().norm() * recon_e[i].cast<double>().norm());
  r.embedding_cos = cs / static_cast<double>(clean_e.size());
  return r;
}

struct EvalSummary {
  double explained_variance = 0;
  L0Report l0;
  CosineMetrics cosine;
  std::optional<CeReport> ce;
};

inline nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json j;
  j["explained_variance"] = s.explained_variance;
  j["avg_img_l0"] = s.l0.avg_img_l0;
  j["avg_cls_l0"] = s.l0.avg_cls_l0;
  j["spatial_l0_mean"] = s.l0.spatial.mean;
  j["spatial_l0_quartiles"] = {s.l0.spatial.q1, s.l0.spatial.median, s.l0.spatial.q3};
  j["cls_l0_quartiles"] = {s.l0.cls.q1, s.l0.cls.median, s.l0.cls.q3};
  j["cos_sim"] = s.cosine.token_cos;
  j["recon_cos_sim"] = s.cosine.image_cos;
  j["skipped_zero_norm_tokens"] = s.cosine.skipped_tokens;
  if (s.ce) {
    j["ce"] = s.ce->ce_clean;
    j["recon_ce"] = s.ce->ce_recon;
    j["zero_abl_ce"] = s.ce->ce_zero_abl;
    j["ce_recovered"] = s.ce->ce_recovered_pct ? nlohmann::json(*s.ce->ce_recovered_pct) : nlohmann::json(nullptr);
    j["ce_degenerate"] = s.ce->degenerate;
    j["embedding_cos"] = s.ce->embedding_cos;
  }
  return j;
}

/// One row per metric: metric,value. Undefined values are written as "nan".
inline void write_metrics_csv(std::ostream& out, const EvalSummary& s) {
  out << "metric,value\n";
  const auto j = to_json(s);
  for (const auto& [k, v] : j.items()) {
    if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i) out << k << "_" << i << "," << v[i].dump() << "\n";
    } else {
      out << k << "," << (v.is_null() ? std::string("nan") : v.dump()) << "\n";
    }
  }
}

inline void write_grid_csv(std::ostream& out, const MatrixD& grid) {
  out.precision(10);
  for (Index r = 0; r < grid.rows(); ++r) {
    for (Index c = 0; c < grid.cols(); ++c) out << (c ? "," : "") << grid(r, c);
    out << "\n";
  }
}

}  // namespace saelab
