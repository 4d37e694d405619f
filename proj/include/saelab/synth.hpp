#pragma once

// Synthetic activations drawn from a known sparse dictionary, used as the
// ground-truth oracle for SAE training.

#include "saelab/shard.hpp"

#include <numeric>

namespace saelab {

struct SparseCode {
  std::uint32_t atom = 0;
  float coeff = 0.0f;
};

struct GroundTruthDictionary {
  MatrixF atoms;                              // [n_true_features, d_model], unit rows
  std::vector<std::vector<SparseCode>> codes;  // one list per generated token (flat row order)
  float noise_sigma = 0.0f;
};

struct SynthDictionaryResult {
  ActivationDataset dataset;
  GroundTruthDictionary truth;
};

inline SynthDictionaryResult synth_dictionary_dataset(Index n_true_features, Index d_model,
                                                      Index tokens_per_sample, Index n_samples,
                                                      Index active_per_token, float noise_sigma,
                                                      std::uint64_t seed) {
  require(d_model >= 2, "d_model must be >= 2");
  require(n_true_features >= 1, "need at least one atom");
  require(active_per_token >= 0 && active_per_token <= n_true_features,
          "active_per_token must be <= n_true_features");
  require(tokens_per_sample >= 1 && n_samples >= 0, "bad sample geometry");
  require(noise_sigma >= 0.0f, "noise_sigma must be non-negative");

  Rng atom_rng(mix_seed(seed, 1));
  GroundTruthDictionary truth;
  truth.noise_sigma = noise_sigma;
  truth.atoms = gaussian_matrix<float>(n_true_features, d_model, 1.0f, atom_rng);
  normalize_rows(truth.atoms);

  // Spatial tokens form a single row so the CLS + grid invariant holds.
  const auto cols = static_cast<std::uint16_t>(tokens_per_sample - 1);
  auto ds = make_dataset(static_cast<std::uint32_t>(n_samples), cols == 0 ? 0 : 1, cols,
                         static_cast<std::uint32_t>(d_model));
  ds.attrs = {{"generator", "synth_dictionary"},
              {"seed", seed},
              {"n_true_features", n_true_features},
              {"active_per_token", active_per_token},
              {"noise_sigma", noise_sigma}};

  Rng rng(mix_seed(seed, 2));
  std::uniform_real_distribution<float> coeff_dist(0.5f, 1.5f);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::vector<std::uint32_t> pool(static_cast<std::size_t>(n_true_features));
  const auto n_rows = n_samples * tokens_per_sample;
  truth.codes.resize(static_cast<std::size_t>(n_rows));
  for (Index r = 0; r < n_rows; ++r) {
    std::iota(pool.begin(), pool.end(), 0u);
    auto row = Eigen::Map<RowVecF>(ds.activations.data() + r * d_model, d_model);
    row.setZero();
    auto& code = truth.codes[static_cast<std::size_t>(r)];
    // partial Fisher-Yates: first active_per_token entries are a uniform draw without replacement
    for (Index a = 0; a < active_per_token; ++a) {
      std::uniform_int_distribution<Index> pick(a, n_true_features - 1);
      std::swap(pool[static_cast<std::size_t>(a)], pool[static_cast<std::size_t>(pick(rng))]);
      const auto atom = pool[static_cast<std::size_t>(a)];
      const float c = coeff_dist(rng);
      code.push_back({atom, c});
      row += c * truth.atoms.row(atom);
    }
    if (noise_sigma > 0.0f)
      for (Index d = 0; d < d_model; ++d) row(d) += noise_sigma * noise(rng);
  }
  return {std::move(ds), std::move(truth)};
}

}  // namespace saelab
