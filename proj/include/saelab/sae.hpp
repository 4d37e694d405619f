#pragma once

// Sparse autoencoder: x_hat = f(x) W_dec + b_dec with unit-norm decoder rows,
// f(x) = act((x - b_dec) W_enc + b_enc), act = ReLU (Vanilla) or TopK.

#include "saelab/common.hpp"

#include <concepts>
#include <numeric>
#include <optional>
#include <span>
#include <variant>

namespace saelab {

struct Vanilla {
  double l1_coeff = 0.0;
};
struct TopK {
  int k = 1;
};
using SaeVariant = std::variant<Vanilla, TopK>;

inline double l1_coeff_of(const SaeVariant& v) {
  if (const auto* van = std::get_if<Vanilla>(&v)) return van->l1_coeff;
  return 0.0;
}

template <class S>
struct BasicSae {
  Mat<S> w_enc;     // [d_model, d_sae]
  RowVec<S> b_enc;  // [d_sae]
  Mat<S> w_dec;     // [d_sae, d_model]; rows are the feature directions
  RowVec<S> b_dec;  // [d_model]
  SaeVariant variant = Vanilla{};

  Index d_model() const { return w_dec.cols(); }
  Index d_sae() const { return w_dec.rows(); }

  template <class T>
  BasicSae<T> cast() const {
    return {w_enc.template cast<T>(), b_enc.template cast<T>(), w_dec.template cast<T>(),
            b_dec.template cast<T>(), variant};
  }
};

using SaeModel = BasicSae<float>;

/// Zero-initialized SAE of the given shape.
template <class S = float>
BasicSae<S> zero_sae(Index d_model, Index d_sae, SaeVariant variant = Vanilla{}) {
  return {Mat<S>::Zero(d_model, d_sae), RowVec<S>::Zero(d_sae), Mat<S>::Zero(d_sae, d_model),
          RowVec<S>::Zero(d_model), variant};
}

/// Gaussian decoder rows normalized to unit length, encoder = decoder transpose, zero biases.
inline SaeModel init_sae(Index d_model, Index d_sae, SaeVariant variant, std::uint64_t seed) {
  require(d_model > 0 && d_sae > 0, "SAE dimensions must be positive");
  if (const auto* tk = std::get_if<TopK>(&variant))
    require(tk->k >= 1 && tk->k <= d_sae, "TopK k must be in [1, d_sae]");
  Rng rng(mix_seed(seed, 0x5AE));
  SaeModel sae;
  sae.w_dec = gaussian_matrix<float>(d_sae, d_model, 1.0f, rng);
  normalize_rows(sae.w_dec);
  sae.w_enc = sae.w_dec.transpose();
  sae.b_enc = RowVecF::Zero(d_sae);
  sae.b_dec = RowVecF::Zero(d_model);
  sae.variant = variant;
  return sae;
}

template <class S>
Mat<S> pre_activations(const BasicSae<S>& sae, const Mat<S>& x) {
  require(x.cols() == sae.d_model(), "input width does not match d_model");
  Mat<S> pre = (x.rowwise() - sae.b_dec) * sae.w_enc;
  pre.rowwise() += sae.b_enc;
  return pre;
}

namespace detail {

/// Keeps the k largest positive entries of each row; ties go to the lower index.
template <class S>
void topk_rows(Mat<S>& m, int k) {
  std::vector<Index> idx;
  for (Index r = 0; r < m.rows(); ++r) {
    idx.clear();
    for (Index c = 0; c < m.cols(); ++c)
      if (m(r, c) > S(0)) idx.push_back(c);
      else m(r, c) = S(0);
    if (static_cast<int>(idx.size()) <= k) continue;
    auto row = m.row(r);
    const auto before = [&row](Index a, Index b) {
      return row(a) > row(b) || (row(a) == row(b) && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), before);
    for (auto it = idx.begin() + k; it != idx.end(); ++it) row(*it) = S(0);
  }
}

}  // namespace detail

template <class S>
Mat<S> activate(const SaeVariant& variant, Mat<S> pre) {
  if (const auto* tk = std::get_if<TopK>(&variant)) {
    detail::topk_rows(pre, tk->k);
    return pre;
  }
  return pre.cwiseMax(S(0));
}

template <class S>
Mat<S> encode(const BasicSae<S>& sae, const Mat<S>& x) {
  if (!x.allFinite()) throw InvalidArgument("encode: non-finite input");
  return activate(sae.variant, pre_activations(sae, x));
}

template <class S>
Mat<S> decode(const BasicSae<S>& sae, const Mat<S>& f) {
  require(f.cols() == sae.d_sae(), "decode: feature width does not match d_sae");
  Mat<S> out = f * sae.w_dec;
  out.rowwise() += sae.b_dec;
  return out;
}

template <class S>
Index feature_count(const BasicSae<S>& sae) {
  return sae.d_sae();
}
template <class S>
Index model_dim(const BasicSae<S>& sae) {
  return sae.d_model();
}
template <class S>
RowVec<S> decoder_direction(const BasicSae<S>& sae, Index j) {
  return sae.w_dec.row(j);
}

/// Affine dictionary without a nonlinearity. The identity instance stands in
/// for the raw neuron basis: encode(x) == x and decode(f) == f exactly.
struct LinearDictionary {
  MatrixF w_enc;
  RowVecF b_enc;
  MatrixF w_dec;
  RowVecF b_dec;

  static LinearDictionary identity(Index d) {
    return {MatrixF::Identity(d, d), RowVecF::Zero(d), MatrixF::Identity(d, d), RowVecF::Zero(d)};
  }
};

inline MatrixF encode(const LinearDictionary& dict, const MatrixF& x) {
  require(x.cols() == dict.w_enc.rows(), "input width does not match dictionary");
  MatrixF f = (x.rowwise() - dict.b_dec) * dict.w_enc;
  f.rowwise() += dict.b_enc;
  return f;
}
inline MatrixF decode(const LinearDictionary& dict, const MatrixF& f) {
  require(f.cols() == dict.w_dec.rows(), "feature width does not match dictionary");
  MatrixF out = f * dict.w_dec;
  out.rowwise() += dict.b_dec;
  return out;
}
inline Index feature_count(const LinearDictionary& d) { return d.w_dec.rows(); }
inline Index model_dim(const LinearDictionary& d) { return d.w_dec.cols(); }
inline RowVecF decoder_direction(const LinearDictionary& d, Index j) { return d.w_dec.row(j); }

/// Anything that maps residual rows to feature rows and back.
template <class D>
concept Dictionary = requires(const D& d, const MatrixF& m, Index j) {
  { encode(d, m) } -> std::convertible_to<MatrixF>;
  { decode(d, m) } -> std::convertible_to<MatrixF>;
  { feature_count(d) } -> std::convertible_to<Index>;
  { model_dim(d) } -> std::convertible_to<Index>;
  { decoder_direction(d, j) } -> std::convertible_to<RowVecF>;
};

static_assert(Dictionary<SaeModel>);
static_assert(Dictionary<LinearDictionary>);

// ---------------------------------------------------------------------------
// Losses and analytic gradients

template <class S>
struct LossTerms {
  S total = 0, mse = 0, l1 = 0, ghost = 0;
};

template <class S>
struct SaeGrads {
  Mat<S> w_enc;
  RowVec<S> b_enc;
  Mat<S> w_dec;
  RowVec<S> b_dec;

  static SaeGrads zeros_like(const BasicSae<S>& sae) {
    return {Mat<S>::Zero(sae.w_enc.rows(), sae.w_enc.cols()), RowVec<S>::Zero(sae.d_sae()),
            Mat<S>::Zero(sae.w_dec.rows(), sae.w_dec.cols()), RowVec<S>::Zero(sae.d_model())};
  }
};

/// mse = mean_b ||x - x_hat||^2, l1 = l1_coeff * mean_b ||f||_1 (Vanilla only).
template <class S>
LossTerms<S> loss(const BasicSae<S>& sae, const Mat<S>& x, const Mat<S>& x_hat, const Mat<S>& f) {
  require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols() && f.rows() == x.rows(),
          "loss: shape mismatch");
  const auto batch = static_cast<S>(x.rows());
  LossTerms<S> t;
  t.mse = (x - x_hat).squaredNorm() / batch;
  t.l1 = static_cast<S>(l1_coeff_of(sae.variant)) * f.cwiseAbs().sum() / batch;
  t.total = t.mse + t.l1;
  return t;
}

/// Quantities the ghost term treats as constants (stop-gradient): the
/// centered input, the residual target, the per-row norm scale and the
/// rescale factor that matches the ghost term to the current mse.
template <class S>
struct GhostContext {
  std::vector<Index> dead;
  Mat<S> x_centered;  // x - b_dec
  Mat<S> residual;    // x - x_hat
  ColVec<S> scale;    // per-row
  S rescale = 0;
  bool active() const { return !dead.empty(); }
};

inline constexpr double kGhostExpClamp = 30.0;

namespace detail {

template <class S>
Mat<S> gather_cols(const Mat<S>& m, std::span<const Index> cols) {
  Mat<S> out(m.rows(), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Index>(i)) = m.col(cols[i]);
  return out;
}
template <class S>
Mat<S> gather_rows(const Mat<S>& m, std::span<const Index> rows) {
  Mat<S> out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

/// exp(h) with h clamped from above; the clamp mask marks where the gradient is cut.
template <class S>
Mat<S> ghost_activation(const Mat<S>& h) {
  return h.unaryExpr([](S v) { return std::exp(std::min(v, static_cast<S>(kGhostExpClamp))); });
}

}  // namespace detail

/// Dead features predict the residual through exp(pre-activation); the output
/// is scaled to half the residual norm and the loss rescaled to the current mse.
template <class S>
GhostContext<S> make_ghost_context(const BasicSae<S>& sae, const Mat<S>& x, const Mat<S>& x_hat,
                                   S mse, std::span<const bool> dead_mask) {
  GhostContext<S> ctx;
  for (std::size_t j = 0; j < dead_mask.size(); ++j)
    if (dead_mask[j]) ctx.dead.push_back(static_cast<Index>(j));
  if (ctx.dead.empty()) return ctx;
  ctx.x_centered = x.rowwise() - sae.b_dec;
  ctx.residual = x - x_hat;
  const Mat<S> enc = detail::gather_cols(sae.w_enc, ctx.dead);
  const Mat<S> dec = detail::gather_rows(sae.w_dec, ctx.dead);
  Mat<S> h = ctx.x_centered * enc;
  for (std::size_t i = 0; i < ctx.dead.size(); ++i) h.col(static_cast<Index>(i)).array() += sae.b_enc(ctx.dead[i]);
  const Mat<S> out = detail::ghost_activation(h) * dec;
  ctx.scale.resize(x.rows());
  for (Index b = 0; b < x.rows(); ++b)
    ctx.scale(b) = ctx.residual.row(b).norm() / (S(2) * out.row(b).norm() + S(1e-6));
  const S raw = ((out.array().colwise() * ctx.scale.array()).matrix() - ctx.residual).squaredNorm() /
                static_cast<S>(x.rows());
  ctx.rescale = mse / (raw + S(1e-6));
  return ctx;
}

/// Ghost loss under fixed context; accumulates gradients into the dead
/// features' encoder columns, encoder biases and decoder rows only.
template <class S>
S ghost_loss(const BasicSae<S>& sae, const GhostContext<S>& ctx, SaeGrads<S>* grads) {
  if (!ctx.active()) return S(0);
  const auto batch = static_cast<S>(ctx.residual.rows());
  const Mat<S> enc = detail::gather_cols(sae.w_enc, ctx.dead);
  const Mat<S> dec = detail::gather_rows(sae.w_dec, ctx.dead);
  Mat<S> h = ctx.x_centered * enc;
  for (std::size_t i = 0; i < ctx.dead.size(); ++i) h.col(static_cast<Index>(i)).array() += sae.b_enc(ctx.dead[i]);
  const Mat<S> g = detail::ghost_activation(h);
  const Mat<S> gs = g.array().colwise() * ctx.scale.array();  // scaled activations
  const Mat<S> diff = gs * dec - ctx.residual;
  const S value = ctx.rescale * diff.squaredNorm() / batch;
  if (grads) {
    const Mat<S> d_out = (S(2) * ctx.rescale / batch) * diff;
    const Mat<S> d_dec = gs.transpose() * d_out;
    Mat<S> dh = ((d_out * dec.transpose()).array().colwise() * ctx.scale.array()).matrix();
    dh = dh.cwiseProduct(g);
    for (Index b = 0; b < h.rows(); ++b)
      for (Index i = 0; i < h.cols(); ++i)
        if (h(b, i) > static_cast<S>(kGhostExpClamp)) dh(b, i) = S(0);
    const Mat<S> d_enc = ctx.x_centered.transpose() * dh;
    const RowVec<S> d_benc = dh.colwise().sum();
    for (std::size_t i = 0; i < ctx.dead.size(); ++i) {
      const auto j = ctx.dead[i];
      const auto ii = static_cast<Index>(i);
      grads->w_enc.col(j) += d_enc.col(ii);
      grads->b_enc(j) += d_benc(ii);
      grads->w_dec.row(j) += d_dec.row(ii);
    }
  }
  return value;
}

/// Forward pass, loss terms and (optionally) gradients for one batch. When
/// `dead_mask` is non-empty the ghost term is included with its constants
/// taken from the current parameters.
template <class S>
LossTerms<S> loss_and_grad(const BasicSae<S>& sae, const Mat<S>& x, std::span<const bool> dead_mask,
                           SaeGrads<S>* grads, Mat<S>* f_out = nullptr) {
  const Mat<S> f = encode(sae, x);
  const Mat<S> x_hat = decode(sae, f);
  LossTerms<S> terms = loss(sae, x, x_hat, f);
  const auto batch = static_cast<S>(x.rows());
  if (grads) {
    *grads = SaeGrads<S>::zeros_like(sae);
    const Mat<S> d_xhat = (S(2) / batch) * (x_hat - x);
    grads->w_dec = f.transpose() * d_xhat;
    grads->b_dec = d_xhat.colwise().sum();
    Mat<S> d_pre = d_xhat * sae.w_dec.transpose();
    const auto l1 = static_cast<S>(l1_coeff_of(sae.variant)) / batch;
    for (Index b = 0; b < d_pre.rows(); ++b)
      for (Index j = 0; j < d_pre.cols(); ++j)
        d_pre(b, j) = f(b, j) > S(0) ? d_pre(b, j) + l1 : S(0);
    const Mat<S> x_centered = x.rowwise() - sae.b_dec;
    grads->w_enc = x_centered.transpose() * d_pre;
    const RowVec<S> d_benc = d_pre.colwise().sum();
    grads->b_enc = d_benc;
    grads->b_dec -= d_benc * sae.w_enc.transpose();
  }
  if (!dead_mask.empty()) {
    const auto ctx = make_ghost_context(sae, x, x_hat, terms.mse, dead_mask);
    terms.ghost = ghost_loss(sae, ctx, grads);
  }
  terms.total = terms.mse + terms.l1 + terms.ghost;
  if (f_out) *f_out = f;
  return terms;
}

}  // namespace saelab
