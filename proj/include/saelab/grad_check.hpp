#pragma once

// Central finite differences against the analytic SAE gradients, in double precision.

#include "saelab/sae.hpp"

namespace saelab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped_unstable = 0;  // parameters whose +-eps probe changed the active set
};

namespace detail {

enum class ParamTensor { w_enc, b_enc, w_dec, b_dec };

inline double& param_ref(BasicSae<double>& sae, ParamTensor t, Index i, Index j) {
  switch (t) {
    case ParamTensor::w_enc: return sae.w_enc(i, j);
    case ParamTensor::b_enc: return sae.b_enc(j);
    case ParamTensor::w_dec: return sae.w_dec(i, j);
    case ParamTensor::b_dec: return sae.b_dec(j);
  }
  throw InvalidArgument("bad tensor");
}

inline double grad_ref(const SaeGrads<double>& g, ParamTensor t, Index i, Index j) {
  switch (t) {
    case ParamTensor::w_enc: return g.w_enc(i, j);
    case ParamTensor::b_enc: return g.b_enc(j);
    case ParamTensor::w_dec: return g.w_dec(i, j);
    case ParamTensor::b_dec: return g.b_dec(j);
  }
  throw InvalidArgument("bad tensor");
}

inline Mat<bool> active_set(const BasicSae<double>& sae, const MatrixD& x) {
  return encode(sae, x).array() > 0.0;
}

}  // namespace detail

/// Compares analytic and finite-difference gradients of the total loss on a
/// random subsample of parameters. Parameters whose perturbation flips the
/// active set are skipped (the loss has a kink there) and counted separately.
/// With a dead mask, the ghost term's stop-gradient constants are frozen at
/// the base point on both sides of the comparison.
inline GradCheckResult grad_check(const SaeModel& model, const MatrixF& x_in, double epsilon,
                                  std::uint64_t seed = 0, std::span<const bool> dead_mask = {},
                                  int n_params = 50) {
  require(epsilon > 0, "epsilon must be positive");
  using detail::ParamTensor;
  BasicSae<double> sae = model.cast<double>();
  const MatrixD x = x_in.cast<double>();

  SaeGrads<double> analytic;
  loss_and_grad(sae, x, dead_mask, &analytic);
  GhostContext<double> ghost_ctx;
  {
    const MatrixD x_hat = decode(sae, encode(sae, x));
    const double mse = (x - x_hat).squaredNorm() / static_cast<double>(x.rows());
    if (!dead_mask.empty()) ghost_ctx = make_ghost_context(sae, x, x_hat, mse, dead_mask);
  }
  const auto objective = [&](const BasicSae<double>& s) {
    const MatrixD f = encode(s, x);
    const auto terms = loss(s, x, decode(s, f), f);
    return terms.mse + terms.l1 + ghost_loss<double>(s, ghost_ctx, nullptr);
  };
  const Mat<bool> base_active = detail::active_set(sae, x);

  const Index d = sae.d_model(), n = sae.d_sae();
  const Index sizes[4] = {d * n, n, n * d, d};
  const Index total = sizes[0] + sizes[1] + sizes[2] + sizes[3];
  Rng rng(mix_seed(seed, 0x6C));
  std::uniform_int_distribution<Index> pick(0, total - 1);

  GradCheckResult result;
  for (int attempt = 0; attempt < n_params * 50 && result.checked < n_params; ++attempt) {
    Index flat = pick(rng);
    int t = 0;
    while (flat >= sizes[t]) flat -= sizes[t++];
    const auto tensor = static_cast<ParamTensor>(t);
    Index i = 0, j = flat;
    if (tensor == ParamTensor::w_enc) { i = flat / n; j = flat % n; }
    if (tensor == ParamTensor::w_dec) { i = flat / d; j = flat % d; }

    double& p = detail::param_ref(sae, tensor, i, j);
    const double orig = p;
    p = orig + epsilon;
    const bool stable_plus = (detail::active_set(sae, x) == base_active);
    const double up = objective(sae);
    p = orig - epsilon;
    const bool stable_minus = (detail::active_set(sae, x) == base_active);
    const double down = objective(sae);
    p = orig;
    if (!stable_plus || !stable_minus) {
      ++result.skipped_unstable;
      continue;
    }
    const double numeric = (up - down) / (2.0 * epsilon);
    const double exact = detail::grad_ref(analytic, tensor, i, j);
    const double diff = std::abs(numeric - exact);
    const double scale = std::max(std::abs(numeric), std::abs(exact));
    const double rel = diff < 1e-10 ? 0.0 : diff / scale;
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace saelab
