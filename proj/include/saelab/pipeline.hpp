#pragma once

// Desk-scale toy experiments wired end to end: presets, the SAE training mix,
// the planted concept dictionary, and per-layer suppression / typographic runs.
// The CLI and the acceptance suite both go through here.

#include "saelab/steering.hpp"
#include "saelab/suppression.hpp"
#include "saelab/train.hpp"
#include "saelab/vision_data.hpp"

namespace saelab {

/// SAE recipe used for the toy suppression and typographic experiments.
inline TrainConfig toy_sae_config() {
  TrainConfig tc;
  tc.expansion_factor = 4;
  tc.variant = Vanilla{0.3};
  tc.total_steps = 1500;
  tc.warmup_steps = 100;
  tc.batch_size = 512;
  tc.learning_rate = 3e-3;
  tc.ghost_window_tokens = 50'000;
  tc.seed = 1;
  return tc;
}

/// 4-way classification without the spurious attribute; the attack is the only nuisance.
inline SynthVisionSpec typographic_data_spec(std::uint64_t seed) {
  SynthVisionSpec sp;
  sp.seed = seed;
  sp.n_classes = 4;
  sp.rho = 0.5;
  sp.attribute_amp = 0.0f;
  sp.class_amp_lo = 0.6f;
  sp.class_amp_hi = 1.4f;
  return sp;
}

/// Stacks two datasets with the same layout. Sample ids of `b` are shifted by
/// `id_offset` so the result keeps unique ids.
inline ActivationDataset concat_datasets(const ActivationDataset& a, const ActivationDataset& b,
                                         std::uint64_t id_offset) {
  require(a.n_tokens() == b.n_tokens() && a.d_model() == b.d_model() && a.header.layer_id == b.header.layer_id,
          "datasets have different layouts");
  ActivationDataset out = a;
  out.activations.insert(out.activations.end(), b.activations.begin(), b.activations.end());
  for (auto m : b.meta) {
    m.sample_id += id_offset;
    out.meta.push_back(m);
  }
  out.header.n_samples = static_cast<std::uint32_t>(out.meta.size());
  return out;
}

/// Clean train samples plus the even-id half of the attacked train samples.
inline ActivationDataset typographic_training_mix(const ActivationDataset& clean, const ActivationDataset& attacked) {
  const auto half = filter_samples(attacked, [](const SampleMeta& s) { return s.sample_id % 2 == 0; });
  return concat_datasets(clean, half, 1'000'000);
}

/// Vanilla SAE whose decoder is the model's concept bank and whose encoder is its transpose.
inline SaeModel planted_concept_sae(const ToyVit& m) {
  SaeModel sae = init_sae(m.config.d_model, m.config.n_concepts, Vanilla{0.0}, 0);
  sae.w_dec = m.planted.concepts;
  sae.w_enc = sae.w_dec.transpose();
  sae.b_enc.setZero();
  sae.b_dec.setZero();
  return sae;
}

/// Exact identity as an SAE: features [relu(x), relu(-x)], decoder [I; -I].
inline SaeModel identity_sae(Index d_model) {
  SaeModel sae = init_sae(d_model, 2 * d_model, Vanilla{0.0}, 0);
  sae.w_dec.setZero();
  sae.w_dec.topRows(d_model).setIdentity();
  sae.w_dec.bottomRows(d_model) = -MatrixF::Identity(d_model, d_model);
  sae.w_enc = sae.w_dec.transpose();
  sae.b_enc.setZero();
  sae.b_dec.setZero();
  return sae;
}

inline std::pair<ActivationDataset, ActivationDataset> attribute_split(const ActivationDataset& train) {
  return {filter_samples(train, [](const SampleMeta& s) { return s.attribute_flag; }),
          filter_samples(train, [](const SampleMeta& s) { return !s.attribute_flag; })};
}

struct SuppressionLayerResult {
  int layer = 0;
  GroupAccuracy test_baseline;
  TauSearch strict, relaxed, neuron;
  GroupAccuracy strict_test, relaxed_test, neuron_test;
  std::vector<GroupAccuracy> random_test;  // one per control seed, size |F_strict|

  double random_mean_worst() const {
    double s = 0;
    for (const auto& g : random_test) s += g.worst;
    return random_test.empty() ? 0.0 : s / static_cast<double>(random_test.size());
  }
  double random_mean_overall() const {
    double s = 0;
    for (const auto& g : random_test) s += g.overall;
    return random_test.empty() ? 0.0 : s / static_cast<double>(random_test.size());
  }
};

struct SuppressionOptions {
  std::vector<double> tau_grid = default_tau_grid();
  int random_seeds = 10;
  Pooling pooling = Pooling::all_tokens;
  double relaxed_drop = 0.04;
  int threads = 1;
};

/// Strict, relaxed, base-neuron and random-control runs for one layer.
/// Selection uses train (D_A vs D_Abar), tau is picked on val, everything is reported on test.
template <Dictionary D>
SuppressionLayerResult run_suppression_layer(const ToyVit& m, const D& dict, const ActivationDataset& train,
                                             const ActivationDataset& val, const ActivationDataset& test,
                                             const VocabularyHead& class_vocab, const SuppressionOptions& opt) {
  require(train.header.layer_id == val.header.layer_id && val.header.layer_id == test.header.layer_id,
          "splits come from different layers");
  SuppressionLayerResult r;
  r.layer = static_cast<int>(test.header.layer_id);
  const auto [d_a, d_abar] = attribute_split(train);
  require(d_a.n_samples() > 0 && d_abar.n_samples() > 0, "train split needs samples with and without the attribute");
  const RowVecD ma = mean_activations(dict, d_a, opt.pooling), mb = mean_activations(dict, d_abar, opt.pooling);
  const auto id = LinearDictionary::identity(train.d_model());
  const RowVecD na = mean_activations(id, d_a, opt.pooling), nb = mean_activations(id, d_abar, opt.pooling);
  const GroupAccuracy val_base = baseline_accuracy(m, val, class_vocab, opt.threads);
  r.test_baseline = baseline_accuracy(m, test, class_vocab, opt.threads);

  const auto select_sae = [&](double tau) { return FeatureSet{r.layer, threshold_select(ma, mb, tau), ThresholdProv{tau}}; };
  const auto ablate_sae = [&](const FeatureSet& fs) { return ablate_and_eval(m, dict, fs, val, class_vocab, opt.threads); };
  r.strict = grid_search(opt.tau_grid, SelectionMode::strict, val_base, select_sae, ablate_sae, opt.relaxed_drop);
  r.relaxed = grid_search(opt.tau_grid, SelectionMode::relaxed, val_base, select_sae, ablate_sae, opt.relaxed_drop);
  r.neuron = grid_search(
      opt.tau_grid, SelectionMode::strict, val_base,
      [&](double tau) { return FeatureSet{r.layer, threshold_select(na, nb, tau), BaseNeuronProv{tau}}; },
      [&](const FeatureSet& fs) { return ablate_neurons_and_eval(m, fs, val, class_vocab, opt.threads); },
      opt.relaxed_drop);

  r.strict_test = ablate_and_eval(m, dict, r.strict.features, test, class_vocab, opt.threads);
  r.relaxed_test = ablate_and_eval(m, dict, r.relaxed.features, test, class_vocab, opt.threads);
  r.neuron_test = ablate_neurons_and_eval(m, r.neuron.features, test, class_vocab, opt.threads);
  for (int s = 0; s < opt.random_seeds; ++s) {
    const auto fs = random_control(feature_count(dict), r.strict.features.size(), static_cast<std::uint64_t>(s), r.layer);
    r.random_test.push_back(ablate_and_eval(m, dict, fs, test, class_vocab, opt.threads));
  }
  return r;
}

/// Activations of one toy task: per-layer datasets for each split.
struct ToyTask {
  ToyVit model;
  VocabularyHead vocab;
  VocabularyHead class_vocab;
  CollectedActivations train, val, test;
};

inline ToyTask make_spurious_task(const ToyVitConfig& mc, const SynthVisionSpec& spec, int threads = 1) {
  ToyTask t{make_toy_vit(mc), {}, {}, {}, {}, {}};
  t.vocab = make_toy_vocabulary(t.model);
  t.class_vocab = class_head(t.vocab, spec.n_classes);
  const auto vd = synth_vision_dataset(spec, mc);
  t.train = collect_activations(t.model, filter_split(vd, Split::train), threads);
  t.val = collect_activations(t.model, filter_split(vd, Split::val), threads);
  t.test = collect_activations(t.model, filter_split(vd, Split::test), threads);
  return t;
}

struct TypographicTask {
  ToyVit model;
  VocabularyHead class_vocab;
  CollectedActivations clean_train, attacked_train, clean_test, attacked_test;
};

inline TypographicTask make_typographic_task(const ToyVitConfig& mc, const SynthVisionSpec& spec,
                                             const TypographicSpec& attack, int threads = 1) {
  TypographicTask t{make_toy_vit(mc), {}, {}, {}, {}, {}};
  t.class_vocab = class_head(make_toy_vocabulary(t.model), spec.n_classes);
  const auto clean = synth_vision_dataset(spec, mc);
  const auto attacked = apply_typographic_attack(clean, spec.n_classes, mc, attack);
  t.clean_train = collect_activations(t.model, filter_split(clean, Split::train), threads);
  t.attacked_train = collect_activations(t.model, filter_split(attacked, Split::train), threads);
  t.clean_test = collect_activations(t.model, filter_split(clean, Split::test), threads);
  t.attacked_test = collect_activations(t.model, filter_split(attacked, Split::test), threads);
  return t;
}

}  // namespace saelab
