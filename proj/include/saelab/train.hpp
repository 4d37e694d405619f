#pragma once

#include "saelab/batching.hpp"
#include "saelab/optim.hpp"
#include "saelab/sae.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>

namespace saelab {

struct TrainConfig {
  Index expansion_factor = 64;
  double learning_rate = 1e-3;
  std::int64_t warmup_steps = 200;
  std::int64_t total_steps = 1000;
  Index batch_size = 4096;
  SaeVariant variant = TopK{64};
  bool ghost_grads = true;
  /// A feature is dead once it has not exceeded kFiredThreshold for this many tokens.
  std::int64_t ghost_window_tokens = 200'000;
  std::uint64_t seed = 0;
  TokenFilter token_filter = TokenFilter::all;
  AdamConfig adam;

  void validate() const {
    require(expansion_factor >= 1, "expansion_factor must be positive");
    require(learning_rate > 0, "learning_rate must be positive");
    require(warmup_steps >= 0 && warmup_steps < total_steps, "need 0 <= warmup_steps < total_steps");
    require(batch_size >= 1, "batch_size must be positive");
    require(ghost_window_tokens >= 1, "ghost_window_tokens must be positive");
    if (const auto* v = std::get_if<Vanilla>(&variant)) require(v->l1_coeff >= 0, "l1_coeff must be >= 0");
    if (const auto* tk = std::get_if<TopK>(&variant)) require(tk->k >= 1, "k must be positive");
  }
};

inline constexpr float kFiredThreshold = 1e-6f;

struct TrainRecord {
  std::int64_t step = 0;
  double learning_rate = 0;
  double mse = 0, l1 = 0, ghost = 0, total = 0;
  Index live_features = 0;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "step,learning_rate,mse,l1,ghost,total,live_features\n";
    out.precision(9);
    for (const auto& r : records)
      out << r.step << ',' << r.learning_rate << ',' << r.mse << ',' << r.l1 << ',' << r.ghost << ','
          << r.total << ',' << r.live_features << '\n';
  }
};

inline SaeModel init_sae(Index d_model, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return init_sae(d_model, cfg.expansion_factor * d_model, cfg.variant, seed);
}

/// Projects each decoder-row gradient onto the tangent space of the unit sphere at that row.
template <class S>
void project_decoder_grad(const Mat<S>& w_dec, Mat<S>& grad) {
  for (Index j = 0; j < w_dec.rows(); ++j) grad.row(j) -= grad.row(j).dot(w_dec.row(j)) * w_dec.row(j);
}

struct TrainResult {
  SaeModel sae;
  TrainLog log;
};

/// Adam with warmup + cosine schedule, unit-norm decoder maintained by
/// tangent projection and renormalization after every step. Single-threaded,
/// so identical (dataset, config) gives identical weights.
inline TrainResult train(const ActivationDataset& ds, const TrainConfig& cfg,
                         const std::function<void(const TrainRecord&, const SaeModel&)>& on_step = {}) {
  cfg.validate();
  require(ds.n_samples() > 0, "training dataset is empty");
  TrainResult result{init_sae(ds.d_model(), cfg, cfg.seed), {}};
  auto& sae = result.sae;
  const WarmupCosineSchedule schedule{cfg.learning_rate, cfg.warmup_steps, cfg.total_steps};

  AdamSlot<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> s_wenc(sae.w_enc), s_wdec(sae.w_dec);
  AdamSlot<float, 1, Eigen::Dynamic, Eigen::RowMajor> s_benc(sae.b_enc), s_bdec(sae.b_dec);

  BatchIterator batches(ds, cfg.batch_size, mix_seed(cfg.seed, 0xBA7C), cfg.token_filter);
  std::vector<std::int64_t> since_fired(static_cast<std::size_t>(sae.d_sae()), 0);
  std::unique_ptr<bool[]> dead(new bool[since_fired.size()]);

  MatrixF x, f;
  SaeGrads<float> grads;
  result.log.records.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    batches.next_cycling(x);
    bool any_dead = false;
    for (std::size_t j = 0; j < since_fired.size(); ++j) {
      dead[j] = cfg.ghost_grads && since_fired[j] >= cfg.ghost_window_tokens;
      any_dead = any_dead || dead[j];
    }
    const std::span<const bool> dead_mask =
        any_dead ? std::span<const bool>(dead.get(), since_fired.size()) : std::span<const bool>();
    const auto terms = loss_and_grad(sae, x, dead_mask, &grads, &f);
    if (!std::isfinite(terms.total))
      throw DivergenceError("loss became non-finite at step " + std::to_string(step));

    const double lr = schedule.at(step);
    project_decoder_grad(sae.w_dec, grads.w_dec);
    const auto t = step + 1;
    s_wenc.step(sae.w_enc, grads.w_enc, lr, t, cfg.adam);
    s_benc.step(sae.b_enc, grads.b_enc, lr, t, cfg.adam);
    s_wdec.step(sae.w_dec, grads.w_dec, lr, t, cfg.adam);
    s_bdec.step(sae.b_dec, grads.b_dec, lr, t, cfg.adam);
    normalize_rows(sae.w_dec);

    const RowVecF fired = f.colwise().maxCoeff();
    Index live = 0;
    for (std::size_t j = 0; j < since_fired.size(); ++j) {
      if (fired(static_cast<Index>(j)) > kFiredThreshold) since_fired[j] = 0;
      else since_fired[j] += x.rows();
      if (since_fired[j] < cfg.ghost_window_tokens) ++live;
    }
    TrainRecord rec{step, lr, terms.mse, terms.l1, terms.ghost, terms.total, live};
    result.log.records.push_back(rec);
    if (on_step) on_step(rec, sae);
  }
  return result;
}

}  // namespace saelab
