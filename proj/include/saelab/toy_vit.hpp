#pragma once

// Small fixed (never trained) ViT-like encoder with planted structure.
//
// Patch pixels live in a tiny channel space; the patch embedding maps each
// channel to a planted residual direction. Attention is close to uniform and
// its value/output product is close to a scaled identity, so token content is
// pooled into CLS without being scrambled. The final projection P is edited so
// that the attribute channel and the text channels push the pooled output
// towards particular classes; those are the planted spurious routes.

#include "saelab/common.hpp"

#include <Eigen/QR>

namespace saelab {

struct ToyVitConfig {
  int n_layers = 4;
  Index d_model = 64;
  int n_heads = 4;
  int grid_rows = 4;
  int grid_cols = 4;
  Index patch_dim = 16;
  Index d_mlp = 128;
  Index d_out = 64;
  int n_classes = 4;
  int n_parts = 3;
  int n_concepts = 128;
  float embed_gain = 3.0f;
  float pos_scale = 0.15f;
  float attn_gain = 0.5f;
  float qk_std = 0.02f;
  float mlp_std = 0.03f;
  float final_beta_std = 0.05f;
  // strength of the planted routes through P, relative to a class direction
  float attribute_push = 0.25f;
  float text_push = 1.5f;
  std::uint64_t seed = 0;

  Index n_patches() const { return Index{grid_rows} * grid_cols; }
  Index n_tokens() const { return n_patches() + 1; }
  Index d_head() const { return d_model / n_heads; }

  // pixel channel layout
  Index class_channel(int c) const { return c; }
  Index attribute_channel() const { return n_classes; }
  Index text_channel(int k) const { return n_classes + 1 + k; }
  Index part_channel(int p) const { return 2 * n_classes + 1 + p; }
  Index first_noise_channel() const { return 2 * n_classes + 1 + n_parts; }

  void validate() const {
    require(n_layers >= 1, "n_layers must be >= 1");
    require(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(grid_rows >= 1 && grid_cols >= 1, "grid must be non-empty");
    require(n_classes >= 2, "need at least two classes");
    require(n_parts >= 0 && n_concepts >= 0, "negative part/concept count");
    require(patch_dim > first_noise_channel(), "patch_dim too small for the channel layout");
    // orthonormal planted set: 1, cls, positions, classes, attribute, text (shared + per class), parts, clutter
    require(1 + n_tokens() + n_classes + 2 + n_classes + n_parts + (patch_dim - first_noise_channel()) <= d_model,
            "d_model too small for the planted directions");
    require(d_out >= 2 && d_mlp >= 1, "bad output/mlp width");
  }
};

/// Planted residual-stream directions, all unit length.
struct PlantedDirections {
  MatrixF classes;      // [n_classes, d]
  RowVecF attribute;
  RowVecF text_shared;  // w
  MatrixF text;         // [n_classes, d], rows r_k
  MatrixF parts;        // [n_parts, d]
  MatrixF noise;        // [noise channels, d]
  MatrixF concepts;     // [n_concepts, d]

  /// Residual direction written by text pattern k.
  RowVecF text_direction(int k) const { return (text_shared + text.row(k)) / std::sqrt(2.0f); }
};

struct ToyBlock {
  MatrixF wq, wk, wv, wo;  // [d, d]; heads are contiguous column blocks
  MatrixF w1;              // [d, d_mlp]
  RowVecF b1;
  MatrixF w2;  // [d_mlp, d]
  RowVecF b2;
};

struct ToyVit {
  ToyVitConfig config;
  MatrixF patch_embed;  // [patch_dim, d]
  RowVecF cls;
  MatrixF pos;  // [n_patches, d]
  std::vector<ToyBlock> blocks;
  RowVecF final_beta;
  MatrixF proj;  // [d_out, d]
  PlantedDirections planted;
};

struct ToyForward {
  std::vector<MatrixF> resid;  // resid_post per layer, [n_tokens, d]
  RowVecF embedding;           // [d_out]
};

namespace detail {

inline constexpr float kLnEps = 1e-5f;

inline MatrixF layer_norm(const MatrixF& x) {
  MatrixF y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const float mu = x.row(i).mean();
    const RowVecF c = x.row(i).array() - mu;
    const float var = c.squaredNorm() / static_cast<float>(x.cols());
    y.row(i) = c / std::sqrt(var + kLnEps);
  }
  return y;
}

inline MatrixF gelu(const MatrixF& x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return x.unaryExpr([](float v) { return 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v))); });
}

inline void softmax_rows(MatrixF& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    m.row(i).array() -= m.row(i).maxCoeff();
    m.row(i) = m.row(i).array().exp();
    m.row(i) /= m.row(i).sum();
  }
}

/// Gram-Schmidt of `candidate` against the rows of `basis`; returns a unit vector.
inline RowVecD orthonormal_to(const std::vector<RowVecD>& basis, RowVecD candidate) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) candidate -= candidate.dot(b) * b;
  const double n = candidate.norm();
  require(n > 1e-8, "degenerate planted direction");
  return candidate / n;
}

inline RowVecD random_row(Index d, Rng& rng) { return gaussian_matrix<double>(1, d, 1.0, rng); }

inline MatrixF random_orthogonal(Index d, Rng& rng) {
  const MatrixD g = gaussian_matrix<double>(d, d, 1.0, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  // fix column signs so the draw is a deterministic function of g
  const Eigen::VectorXd diag = qr.matrixQR().diagonal();
  for (Index j = 0; j < d; ++j)
    if (diag(j) < 0) q.col(j) *= -1.0;
  return q.cast<float>();
}

}  // namespace detail

inline ToyVit make_toy_vit(const ToyVitConfig& cfg) {
  cfg.validate();
  const Index d = cfg.d_model;
  ToyVit m;
  m.config = cfg;
  Rng rng(mix_seed(cfg.seed, 0x70F));

  // cls and positions: random, centered per token
  const auto centered = [&](Index rows, double scale) {
    MatrixD g = gaussian_matrix<double>(rows, d, scale, rng);
    for (Index i = 0; i < rows; ++i) g.row(i).array() -= g.row(i).mean();
    return g;
  };
  const MatrixD cls = centered(1, 1.0 / std::sqrt(double(d)));
  const MatrixD pos = centered(cfg.n_patches(), cfg.pos_scale);
  m.cls = cls.cast<float>();
  m.pos = pos.cast<float>();

  // orthonormal frame for everything P must not read: the all-ones direction, cls and positions
  std::vector<RowVecD> hidden;
  hidden.push_back(RowVecD::Ones(d) / std::sqrt(double(d)));
  hidden.push_back(detail::orthonormal_to(hidden, cls.row(0)));
  for (Index i = 0; i < cfg.n_patches(); ++i) hidden.push_back(detail::orthonormal_to(hidden, pos.row(i)));

  std::vector<RowVecD> taken = hidden;
  const auto plant = [&] {
    auto v = detail::orthonormal_to(taken, detail::random_row(d, rng));
    taken.push_back(v);
    return v;
  };
  auto& pl = m.planted;
  pl.classes.resize(cfg.n_classes, d);
  for (int c = 0; c < cfg.n_classes; ++c) pl.classes.row(c) = plant().cast<float>();
  pl.attribute = plant().cast<float>();
  pl.text_shared = plant().cast<float>();
  pl.text.resize(cfg.n_classes, d);
  for (int k = 0; k < cfg.n_classes; ++k) pl.text.row(k) = plant().cast<float>();
  pl.parts.resize(cfg.n_parts, d);
  for (int p = 0; p < cfg.n_parts; ++p) pl.parts.row(p) = plant().cast<float>();

  const Index n_noise = cfg.patch_dim - cfg.first_noise_channel();
  pl.noise.resize(n_noise, d);
  for (Index i = 0; i < n_noise; ++i) pl.noise.row(i) = plant().cast<float>();

  // concept bank: random unit directions outside the hidden frame, free to overlap the planted ones
  const auto free_direction = [&]() -> RowVecF {
    return detail::orthonormal_to(hidden, detail::random_row(d, rng)).cast<float>();
  };
  pl.concepts.resize(cfg.n_concepts, d);
  for (int k = 0; k < cfg.n_concepts; ++k) pl.concepts.row(k) = free_direction();

  m.patch_embed = MatrixF::Zero(cfg.patch_dim, d);
  for (int c = 0; c < cfg.n_classes; ++c) m.patch_embed.row(cfg.class_channel(c)) = pl.classes.row(c);
  m.patch_embed.row(cfg.attribute_channel()) = pl.attribute;
  for (int k = 0; k < cfg.n_classes; ++k) m.patch_embed.row(cfg.text_channel(k)) = pl.text_direction(k);
  for (int p = 0; p < cfg.n_parts; ++p) m.patch_embed.row(cfg.part_channel(p)) = pl.parts.row(p);
  for (Index i = 0; i < n_noise; ++i) m.patch_embed.row(cfg.first_noise_channel() + i) = pl.noise.row(i);
  m.patch_embed *= cfg.embed_gain;

  const float qk = cfg.qk_std, ms = cfg.mlp_std;
  for (int l = 0; l < cfg.n_layers; ++l) {
    ToyBlock b;
    b.wq = gaussian_matrix<float>(d, d, qk, rng);
    b.wk = gaussian_matrix<float>(d, d, qk, rng);
    b.wv = detail::random_orthogonal(d, rng);
    b.wo = cfg.attn_gain * b.wv.transpose() + gaussian_matrix<float>(d, d, 0.005f, rng);
    b.w1 = gaussian_matrix<float>(d, cfg.d_mlp, ms, rng);
    b.b1 = gaussian_matrix<float>(1, cfg.d_mlp, ms, rng);
    b.w2 = gaussian_matrix<float>(cfg.d_mlp, d, ms, rng);
    b.b2 = gaussian_matrix<float>(1, d, ms, rng);
    m.blocks.push_back(std::move(b));
  }
  m.final_beta = gaussian_matrix<float>(1, d, cfg.final_beta_std, rng);

  // P: random map that ignores the hidden frame, then the planted routes
  MatrixD p = gaussian_matrix<double>(cfg.d_out, d, 1.0 / std::sqrt(double(d)), rng);
  for (const auto& h : hidden) p -= (p * h.transpose()) * h;
  const auto map = [&](const RowVecF& v) -> Eigen::VectorXd { return p * v.cast<double>().transpose(); };
  const Eigen::VectorXd o0 = map(pl.classes.row(0)), o1 = map(pl.classes.row(1));
  const double class_norm = 0.5 * (o0.norm() + o1.norm());
  const auto set_image = [&](const RowVecF& v, const Eigen::VectorXd& target) {
    const RowVecD vd = v.cast<double>();
    p += (target - p * vd.transpose()) * vd;
  };
  const Eigen::VectorXd push = (o1 - o0).normalized() * class_norm * cfg.attribute_push;
  std::vector<Eigen::VectorXd> text_targets;
  for (int k = 0; k < cfg.n_classes; ++k)
    text_targets.push_back(map(pl.classes.row(k)).normalized() * class_norm * cfg.text_push * std::sqrt(2.0));
  set_image(pl.attribute, push);
  set_image(pl.text_shared, Eigen::VectorXd::Zero(cfg.d_out));
  // clutter is visible to every layer but not to the output head
  for (Index i = 0; i < n_noise; ++i) set_image(pl.noise.row(i), Eigen::VectorXd::Zero(cfg.d_out));
  for (int k = 0; k < cfg.n_classes; ++k) set_image(pl.text.row(k), text_targets[static_cast<std::size_t>(k)]);
  m.proj = p.cast<float>();
  return m;
}

/// Tokens entering the first block: CLS followed by embedded patches.
inline MatrixF embed_image(const ToyVit& m, const MatrixF& image) {
  const auto& cfg = m.config;
  if (image.rows() != cfg.n_patches() || image.cols() != cfg.patch_dim)
    throw InvalidArgument("image must be [" + std::to_string(cfg.n_patches()) + " x " +
                          std::to_string(cfg.patch_dim) + "]");
  MatrixF x(cfg.n_tokens(), cfg.d_model);
  x.row(0) = m.cls;
  x.bottomRows(cfg.n_patches()) = image * m.patch_embed + m.pos;
  return x;
}

inline void apply_block(const ToyVit& m, int layer, MatrixF& x) {
  const auto& b = m.blocks[static_cast<std::size_t>(layer)];
  const Index dh = m.config.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  const MatrixF h = detail::layer_norm(x);
  const MatrixF q = h * b.wq, k = h * b.wk, v = h * b.wv;
  MatrixF heads(x.rows(), x.cols());
  for (int hd = 0; hd < m.config.n_heads; ++hd) {
    const Index c0 = hd * dh;
    MatrixF att = scale * q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose();
    detail::softmax_rows(att);
    heads.middleCols(c0, dh) = att * v.middleCols(c0, dh);
  }
  x += heads * b.wo;

  MatrixF u = detail::layer_norm(x) * b.w1;
  u.rowwise() += b.b1;
  MatrixF out = detail::gelu(u) * b.w2;
  out.rowwise() += b.b2;
  x += out;
}

/// Final LayerNorm on the CLS row followed by the projection P.
inline RowVecF project_cls(const ToyVit& m, const MatrixF& x) {
  const MatrixF h = detail::layer_norm(x.topRows(1));
  const RowVecF z = h.row(0) + m.final_beta;
  return z * m.proj.transpose();
}

inline ToyForward forward(const ToyVit& m, const MatrixF& image) {
  ToyForward out;
  MatrixF x = embed_image(m, image);
  for (int l = 0; l < m.config.n_layers; ++l) {
    apply_block(m, l, x);
    out.resid.push_back(x);
  }
  out.embedding = project_cls(m, x);
  return out;
}

/// Resumes from resid_post activations of `layer` and returns the final embedding.
inline RowVecF forward_from_layer(const ToyVit& m, const MatrixF& acts, int layer) {
  if (layer < 0 || layer >= m.config.n_layers)
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  if (acts.rows() != m.config.n_tokens() || acts.cols() != m.config.d_model)
    throw InvalidArgument("activations must be [n_tokens x d_model]");
  MatrixF x = acts;
  for (int l = layer + 1; l < m.config.n_layers; ++l) apply_block(m, l, x);
  return project_cls(m, x);
}

/// Embedding that a residual stream saturated by direction v would produce:
/// P(LN(v) + beta). Scale-free, which is what large steering strengths approach.
inline RowVecF asymptotic_embedding(const ToyVit& m, const RowVecF& v) {
  MatrixF x(1, v.size());
  x.row(0) = v;
  return project_cls(m, x);
}

}  // namespace saelab
