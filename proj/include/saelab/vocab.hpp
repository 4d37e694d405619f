#pragma once

// Vocabulary head: unit text embeddings plus a logit scale. Zero-shot
// probabilities are softmax(scale * cos(embedding, t_v)).
//
// Head file ("SAEVOCAB"): magic, u32 version, u32 n_rows, u32 dim,
// f32 logit_scale, u64 meta_len, JSON meta {"names": [...], "template": "..."},
// then n_rows*dim little-endian f32.

#include "saelab/shard.hpp"
#include "saelab/toy_vit.hpp"

#include <unordered_set>

namespace saelab {

inline constexpr std::array<char, 8> kHeadMagic = {'S', 'A', 'E', 'V', 'O', 'C', 'A', 'B'};
inline constexpr std::uint32_t kHeadVersion = 1;
inline constexpr double kHeadNormTolerance = 1e-4;

class HeadFormatError : public Error {
 public:
  using Error::Error;
};

struct VocabularyHead {
  MatrixF embeddings;  // [|V|, d_out], unit rows
  float logit_scale = 100.0f;
  std::vector<std::string> names;
  std::string prompt_template = "{}";

  Index size() const { return embeddings.rows(); }
  Index dim() const { return embeddings.cols(); }

  Index index_of(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw InvalidArgument("vocabulary has no entry '" + name + "'");
    return static_cast<Index>(it - names.begin());
  }
};

inline void validate(const VocabularyHead& h) {
  if (h.size() < 2) throw HeadFormatError("vocabulary needs at least 2 rows");
  if (static_cast<Index>(h.names.size()) != h.size()) throw HeadFormatError("names/rows count mismatch");
  if (!std::isfinite(h.logit_scale) || h.logit_scale < 0) throw HeadFormatError("bad logit_scale");
  std::unordered_set<std::string> seen;
  for (const auto& n : h.names)
    if (!seen.insert(n).second) throw HeadFormatError("duplicate vocabulary name '" + n + "'");
  for (Index i = 0; i < h.size(); ++i) {
    if (!h.embeddings.row(i).allFinite()) throw HeadFormatError("non-finite embedding row " + std::to_string(i));
    if (std::abs(h.embeddings.row(i).cast<double>().norm() - 1.0) > kHeadNormTolerance)
      throw HeadFormatError("embedding row " + std::to_string(i) + " is not unit norm");
  }
}

/// Restricts the head to the given rows, in the given order.
inline VocabularyHead subset(const VocabularyHead& h, std::span<const Index> rows) {
  VocabularyHead out;
  out.logit_scale = h.logit_scale;
  out.prompt_template = h.prompt_template;
  out.embeddings.resize(static_cast<Index>(rows.size()), h.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < h.size(), "vocabulary row out of range");
    out.embeddings.row(static_cast<Index>(i)) = h.embeddings.row(rows[i]);
    out.names.push_back(h.names[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

inline VocabularyHead class_head(const VocabularyHead& h, int n_classes) {
  std::vector<Index> rows;
  for (int c = 0; c < n_classes; ++c) rows.push_back(h.index_of("class_" + std::to_string(c)));
  return subset(h, rows);
}

/// Cosine logits, computed in double.
inline RowVecD head_logits(const VocabularyHead& h, const RowVecF& embedding) {
  require(embedding.size() == h.dim(), "embedding width does not match vocabulary");
  const RowVecD e = embedding.cast<double>();
  const double n = e.norm();
  if (!(n > 0) || !std::isfinite(n)) throw InvalidArgument("zero-shot head needs a nonzero finite embedding");
  return double{h.logit_scale} * (e / n) * h.embeddings.cast<double>().transpose();
}

inline RowVecD zero_shot_probs(const VocabularyHead& h, const RowVecF& embedding) {
  RowVecD z = head_logits(h, embedding);
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

inline std::string encode_head(const VocabularyHead& h) {
  validate(h);
  const std::string meta =
      nlohmann::json{{"names", h.names}, {"template", h.prompt_template}}.dump();
  std::string out(kHeadMagic.begin(), kHeadMagic.end());
  detail::put_u32(out, kHeadVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(h.dim()));
  detail::put_u32(out, std::bit_cast<std::uint32_t>(h.logit_scale));
  detail::put_u64(out, meta.size());
  out += meta;
  detail::put_f32_block(out, std::span<const float>(h.embeddings.data(), static_cast<std::size_t>(h.embeddings.size())));
  return out;
}

inline VocabularyHead decode_head(std::string_view bytes) {
  constexpr std::size_t fixed = 8 + 4 * 4 + 8;
  if (bytes.size() < fixed) throw HeadFormatError("truncated head header");
  if (!std::equal(kHeadMagic.begin(), kHeadMagic.end(), bytes.begin())) throw HeadFormatError("bad head magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (detail::get_u32(p + 8) != kHeadVersion) throw HeadFormatError("unsupported head version");
  const std::uint32_t rows = detail::get_u32(p + 12), dim = detail::get_u32(p + 16);
  VocabularyHead h;
  h.logit_scale = std::bit_cast<float>(detail::get_u32(p + 20));
  const std::uint64_t meta_len = detail::get_u64(p + 24);
  if (bytes.size() - fixed < meta_len) throw HeadFormatError("truncated head metadata");
  try {
    const auto meta = nlohmann::json::parse(bytes.substr(fixed, meta_len));
    h.names = meta.at("names").get<std::vector<std::string>>();
    h.prompt_template = meta.value("template", std::string("{}"));
  } catch (const nlohmann::json::exception& e) {
    throw HeadFormatError(std::string("bad head metadata: ") + e.what());
  }
  const std::uint64_t payload = std::uint64_t{rows} * dim * 4;
  if (bytes.size() - fixed - meta_len != payload) throw HeadFormatError("head payload size mismatch");
  h.embeddings.resize(rows, dim);
  detail::get_f32_block(p + fixed + meta_len, std::span<float>(h.embeddings.data(), std::size_t{rows} * dim));
  validate(h);
  return h;
}

inline void write_head(const VocabularyHead& h, const std::filesystem::path& path) {
  detail::write_file(path, encode_head(h));
}

inline VocabularyHead read_head(const std::filesystem::path& path) { return decode_head(detail::read_file(path)); }

/// Toy vocabulary: class rows, then one row per planted concept, then random filler words.
/// A row for direction v is the normalized embedding the model produces when
/// the residual stream is saturated by v.
inline VocabularyHead make_toy_vocabulary(const ToyVit& m, Index size = 512, float logit_scale = 100.0f) {
  const auto& cfg = m.config;
  require(size >= cfg.n_classes + cfg.n_concepts + 2, "vocabulary too small for classes and concepts");
  VocabularyHead h;
  h.logit_scale = logit_scale;
  h.prompt_template = "a photo of a {}";
  h.embeddings.resize(size, cfg.d_out);
  Index row = 0;
  for (int c = 0; c < cfg.n_classes; ++c) {
    h.embeddings.row(row++) = asymptotic_embedding(m, m.planted.classes.row(c)).normalized();
    h.names.push_back("class_" + std::to_string(c));
  }
  for (int k = 0; k < cfg.n_concepts; ++k) {
    h.embeddings.row(row++) = asymptotic_embedding(m, m.planted.concepts.row(k)).normalized();
    h.names.push_back("concept_" + std::to_string(k));
  }
  Rng rng(mix_seed(cfg.seed, 0x70CAB));
  for (Index i = 0; row < size; ++i) {
    h.embeddings.row(row++) = gaussian_matrix<float>(1, cfg.d_out, 1.0f, rng).normalized();
    h.names.push_back("word_" + std::to_string(i));
  }
  return h;
}

}  // namespace saelab
