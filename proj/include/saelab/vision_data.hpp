#pragma once

// Synthetic "images" for the toy ViT: [n_patches, patch_dim] pixel matrices
// built from the channel layout in ToyVitConfig, with a planted spurious
// attribute (border texture) and an optional typographic overlay.

#include "saelab/shard.hpp"
#include "saelab/toy_vit.hpp"

#include <numeric>

namespace saelab {

struct SynthVisionSpec {
  int n_classes = 2;
  double rho = 0.9;  // P(A = [Y == 1]) on the train split; val/test use rho_eval
  double rho_eval = 0.5;
  bool center_bias = true;
  int n_train = 1000;
  int n_val = 500;
  int n_test = 1000;
  float class_amp_lo = 0.2f;
  float class_amp_hi = 1.2f;
  float part_prob = 0.6f;
  float part_amp = 0.8f;
  float attribute_amp = 0.8f;
  float pixel_noise = 0.05f;
  float clutter_prob = 0.15f;  // per patch and clutter channel
  float clutter_amp = 1.0f;
  std::uint64_t seed = 0;

  void validate(const ToyVitConfig& model) const {
    require(rho >= 0 && rho <= 1 && rho_eval >= 0 && rho_eval <= 1, "rho must be a probability");
    require(n_classes >= 2 && n_classes <= model.n_classes, "n_classes must be in [2, model classes]");
    require(n_train >= 0 && n_val >= 0 && n_test >= 0, "negative split size");
    require(class_amp_lo <= class_amp_hi, "class amplitude range reversed");
    require(part_prob >= 0 && part_prob <= 1 && clutter_prob >= 0 && clutter_prob <= 1, "probabilities out of range");
  }
};

struct TypographicSpec {
  float text_amp = 3.0f;
  std::vector<std::pair<int, int>> region;  // (row, col) patches; empty means the whole top row
  std::uint64_t seed = 0;
};

struct VisionDataset {
  int grid_rows = 0;
  int grid_cols = 0;
  Index patch_dim = 0;
  std::vector<MatrixF> images;
  std::vector<SampleMeta> meta;

  std::size_t size() const { return images.size(); }
};

/// Central patches: the middle 2x2 block (or the middle row/col on odd sides).
inline std::vector<Index> center_patches(int rows, int cols) {
  std::vector<Index> out;
  const auto mids = [](int n) {
    return n % 2 == 0 ? std::vector<int>{n / 2 - 1, n / 2} : std::vector<int>{n / 2};
  };
  for (int r : mids(rows))
    for (int c : mids(cols)) out.push_back(Index{r} * cols + c);
  return out;
}

inline std::vector<Index> corner_patches(int rows, int cols) {
  std::vector<Index> out = {0, Index{cols} - 1, Index{rows - 1} * cols, Index{rows} * cols - 1};
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline bool is_border_patch(int rows, int cols, Index p) {
  const Index r = p / cols, c = p % cols;
  return r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
}

inline VisionDataset synth_vision_dataset(const SynthVisionSpec& spec, const ToyVitConfig& model) {
  spec.validate(model);
  VisionDataset ds;
  ds.grid_rows = model.grid_rows;
  ds.grid_cols = model.grid_cols;
  ds.patch_dim = model.patch_dim;
  const Index n_patches = model.n_patches();
  const auto center = center_patches(model.grid_rows, model.grid_cols);

  const std::array<std::pair<Split, int>, 3> splits = {
      {{Split::train, spec.n_train}, {Split::val, spec.n_val}, {Split::test, spec.n_test}}};
  std::uint64_t next_id = 0;
  for (const auto& [split, count] : splits) {
    Rng rng(mix_seed(spec.seed, 0x5A11 + static_cast<std::uint64_t>(split)));
    std::uniform_int_distribution<int> label(0, spec.n_classes - 1);
    std::uniform_real_distribution<float> amp(spec.class_amp_lo, spec.class_amp_hi);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    const double rho = split == Split::train ? spec.rho : spec.rho_eval;
    for (int i = 0; i < count; ++i) {
      SampleMeta meta;
      meta.sample_id = next_id++;
      meta.split = split;
      meta.grid_rows = static_cast<std::uint16_t>(model.grid_rows);
      meta.grid_cols = static_cast<std::uint16_t>(model.grid_cols);
      meta.class_label = label(rng);
      const bool aligned = u01(rng) < rho;
      meta.attribute_flag = (meta.class_label == 1) == aligned;

      MatrixF img(n_patches, model.patch_dim);
      for (Index p = 0; p < n_patches; ++p)
        for (Index c = 0; c < model.patch_dim; ++c) {
          img(p, c) = gauss(rng) * spec.pixel_noise;
          if (c >= model.first_noise_channel() && u01(rng) < spec.clutter_prob)
            img(p, c) += spec.clutter_amp * static_cast<float>(0.5 + u01(rng));
        }

      std::vector<Index> where = center;
      if (!spec.center_bias) {
        where.clear();
        std::vector<Index> all(static_cast<std::size_t>(n_patches));
        std::iota(all.begin(), all.end(), Index{0});
        std::shuffle(all.begin(), all.end(), rng);
        where.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(center.size()));
      }
      const float a = amp(rng);
      for (Index p : where) {
        img(p, model.class_channel(static_cast<int>(meta.class_label))) += a;
        if (model.n_parts > 0 && u01(rng) < spec.part_prob) {
          const int part = std::uniform_int_distribution<int>(0, model.n_parts - 1)(rng);
          img(p, model.part_channel(part)) += spec.part_amp;
        }
      }
      if (meta.attribute_flag)
        for (Index p = 0; p < n_patches; ++p)
          if (is_border_patch(model.grid_rows, model.grid_cols, p)) img(p, model.attribute_channel()) += spec.attribute_amp;

      ds.images.push_back(std::move(img));
      ds.meta.push_back(meta);
    }
  }
  return ds;
}

template <class Pred>
VisionDataset filter_samples(const VisionDataset& ds, Pred&& pred) {
  VisionDataset out;
  out.grid_rows = ds.grid_rows;
  out.grid_cols = ds.grid_cols;
  out.patch_dim = ds.patch_dim;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!pred(ds.meta[i])) continue;
    out.images.push_back(ds.images[i]);
    out.meta.push_back(ds.meta[i]);
  }
  return out;
}

inline VisionDataset filter_split(const VisionDataset& ds, Split split) {
  return filter_samples(ds, [split](const SampleMeta& m) { return m.split == split; });
}

/// Adds text pattern k (a random class other than the label) over the text
/// region and marks attribute_flag. Labels and ids are unchanged.
inline VisionDataset apply_typographic_attack(const VisionDataset& ds, int n_classes, const ToyVitConfig& model,
                                              const TypographicSpec& spec) {
  require(n_classes >= 2 && n_classes <= model.n_classes, "bad class count for the attack");
  VisionDataset out = ds;
  Rng rng(mix_seed(spec.seed, 0x7E47));
  std::uniform_int_distribution<int> other(1, n_classes - 1);
  auto region = spec.region;
  if (region.empty())
    for (int c = 0; c < ds.grid_cols; ++c) region.emplace_back(0, c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int y = static_cast<int>(out.meta[i].class_label);
    const int k = (y + other(rng)) % n_classes;
    for (const auto& [r, c] : region) {
      require(r >= 0 && r < ds.grid_rows && c >= 0 && c < ds.grid_cols, "text region outside the grid");
      out.images[i](Index{r} * ds.grid_cols + c, model.text_channel(k)) += spec.text_amp;
    }
    out.meta[i].attribute_flag = true;
  }
  return out;
}

/// Runs the model on every image; returns one resid_post dataset per layer plus
/// the final embeddings.
struct CollectedActivations {
  std::vector<ActivationDataset> layers;
  MatrixF embeddings;  // [n_samples, d_out]
};

inline CollectedActivations collect_activations(const ToyVit& m, const VisionDataset& ds, int threads = 1) {
  const auto& cfg = m.config;
  require(ds.grid_rows == cfg.grid_rows && ds.grid_cols == cfg.grid_cols, "dataset grid does not match model");
  CollectedActivations out;
  const auto n = static_cast<std::uint32_t>(ds.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto layer = make_dataset(n, static_cast<std::uint16_t>(cfg.grid_rows), static_cast<std::uint16_t>(cfg.grid_cols),
                              static_cast<std::uint32_t>(cfg.d_model), static_cast<std::uint32_t>(l));
    layer.meta = ds.meta;
    out.layers.push_back(std::move(layer));
  }
  out.embeddings.resize(n, cfg.d_out);
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    const auto fw = forward(m, ds.images[i]);
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& layer = out.layers[static_cast<std::size_t>(l)];
      const auto stride = cfg.n_tokens() * cfg.d_model;
      std::copy(fw.resid[static_cast<std::size_t>(l)].data(), fw.resid[static_cast<std::size_t>(l)].data() + stride,
                layer.activations.data() + static_cast<Index>(i) * stride);
    }
    out.embeddings.row(static_cast<Index>(i)) = fw.embedding;
  });
  return out;
}

}  // namespace saelab
