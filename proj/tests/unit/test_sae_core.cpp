#include "saelab/checkpoint.hpp"
#include "saelab/grad_check.hpp"
#include "saelab/synth.hpp"
#include "saelab/train.hpp"

#include "../support/oracles.hpp"

#include <gtest/gtest.h>

namespace saelab {
namespace {

SaeModel identity_sae(Index d, SaeVariant variant = Vanilla{}) {
  auto sae = zero_sae<float>(d, d, variant);
  sae.w_enc.setIdentity();
  sae.w_dec.setIdentity();
  return sae;
}

MatrixF row(std::initializer_list<float> values) {
  MatrixF m(1, static_cast<Index>(values.size()));
  Index i = 0;
  for (float v : values) m(0, i++) = v;
  return m;
}

TEST(SaeInit, UnitDecoderTiedEncoderZeroBias) {
  const auto sae = init_sae(12, 48, TopK{4}, 5);
  for (Index j = 0; j < sae.d_sae(); ++j) EXPECT_LT(std::abs(sae.w_dec.row(j).norm() - 1.0f), 1e-6f);
  for (Index i = 0; i < sae.d_model(); ++i)
    for (Index j = 0; j < sae.d_sae(); ++j) EXPECT_EQ(sae.w_enc(i, j), sae.w_dec(j, i));
  EXPECT_TRUE(sae.b_enc.isZero());
  EXPECT_TRUE(sae.b_dec.isZero());
  const auto again = init_sae(12, 48, TopK{4}, 5);
  EXPECT_EQ(sae.w_dec, again.w_dec);
}

TEST(SaeInit, ExpansionFactorFromConfig) {
  TrainConfig cfg;
  cfg.expansion_factor = 64;
  for (int k : {64, 128, 256}) {
    cfg.variant = TopK{k};
    EXPECT_EQ(init_sae(8, cfg, 1).d_sae(), 512);
  }
}

TEST(Encode, VanillaRelu) {
  const auto f = encode(identity_sae(3), row({1, -2, 3}));
  EXPECT_EQ(f, row({1, 0, 3}));
}

TEST(Encode, TopKKeepsLargest) {
  const auto f = encode(identity_sae(4, TopK{2}), row({0.5f, 0.1f, 0.9f, 0.2f}));
  EXPECT_EQ(f, row({0.5f, 0, 0.9f, 0}));
}

TEST(Encode, TopKTiesGoToLowerIndex) {
  const auto f = encode(identity_sae(4, TopK{2}), row({0.3f, 0.7f, 0.3f, 0.3f}));
  EXPECT_EQ(f, row({0.3f, 0.7f, 0, 0}));
}

TEST(Encode, TopKMatchesBruteForceAndNeverResurrectsNegatives) {
  Rng rng(17);
  std::uniform_int_distribution<int> level(-3, 3);  // coarse grid forces ties
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<float> pre(4);
    for (auto& v : pre) v = 0.25f * static_cast<float>(level(rng));
    const auto f = encode(identity_sae(4, TopK{2}), row({pre[0], pre[1], pre[2], pre[3]}));
    const auto expect = oracle::topk_reference(pre, 2);
    const int positives = static_cast<int>(std::count_if(pre.begin(), pre.end(), [](float v) { return v > 0; }));
    int nonzero = 0;
    for (int j = 0; j < 4; ++j) {
      EXPECT_EQ(f(0, j), expect[static_cast<std::size_t>(j)]);
      nonzero += f(0, j) != 0.0f;
    }
    EXPECT_EQ(nonzero, std::min(positives, 2));
  }
}

TEST(Encode, RejectsNonFinite) {
  EXPECT_THROW(encode(identity_sae(2), row({1.0f, std::numeric_limits<float>::infinity()})), InvalidArgument);
}

TEST(Decode, ZeroAndOneHot) {
  auto sae = init_sae(5, 7, Vanilla{0.0}, 3);
  sae.b_dec = RowVecF::LinSpaced(5, -1, 1);
  EXPECT_EQ(decode(sae, MatrixF(MatrixF::Zero(2, 7))).row(1), sae.b_dec);
  MatrixF f = MatrixF::Zero(1, 7);
  f(0, 4) = 2.5f;
  const RowVecF expect = 2.5f * sae.w_dec.row(4) + sae.b_dec;
  EXPECT_TRUE(decode(sae, f).row(0).isApprox(expect, 1e-6f));
  EXPECT_THROW(decode(sae, MatrixF(MatrixF::Zero(1, 6))), InvalidArgument);
}

TEST(Decode, TiedBiasFixedPoint) {
  auto sae = init_sae(4, 8, Vanilla{0.0}, 2);
  sae.b_dec = row({0.3f, -1.0f, 2.0f, 0.5f});
  // b_enc = 0 and input b_dec => zero pre-activation => reconstruction is b_dec
  const MatrixF x = sae.b_dec;
  EXPECT_EQ(decode(sae, encode(sae, x)), x);
}

TEST(Loss, ZeroWhenPerfect) {
  const auto sae = identity_sae(3, Vanilla{0.5});
  const MatrixF x = MatrixF::Random(4, 3);
  const auto t = loss(sae, x, x, MatrixF(MatrixF::Zero(4, 3)));
  EXPECT_EQ(t.total, 0.0f);
}

TEST(Loss, VanillaWithoutL1IsMse) {
  const auto sae = init_sae(6, 12, Vanilla{0.0}, 1);
  const MatrixF x = MatrixF::Random(5, 6);
  const MatrixF f = encode(sae, x);
  const MatrixF xh = decode(sae, f);
  const auto t = loss(sae, x, xh, f);
  EXPECT_EQ(t.l1, 0.0f);
  EXPECT_FLOAT_EQ(t.total, (x - xh).squaredNorm() / 5.0f);
}

TEST(Loss, L1IsMeanRowSum) {
  const auto sae = identity_sae(2, Vanilla{0.1});
  const MatrixF f = (MatrixF(2, 2) << 1, 2, 3, 0).finished();
  EXPECT_FLOAT_EQ(loss(sae, f, f, f).l1, 0.1f * 6.0f / 2.0f);
}

TEST(GradCheck, VanillaRandomInit) {
  auto sae = init_sae(8, 16, Vanilla{0.3}, 21);
  Rng rng(4);
  sae.b_enc = gaussian_matrix<float>(1, 16, 0.1f, rng);
  sae.b_dec = gaussian_matrix<float>(1, 8, 0.1f, rng);
  const MatrixF x = gaussian_matrix<float>(6, 8, 1.0f, rng);
  const auto r = grad_check(sae, x, 1e-3, 9);
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, TopKStableSupport) {
  auto sae = init_sae(8, 16, TopK{3}, 22);
  Rng rng(5);
  const MatrixF x = gaussian_matrix<float>(6, 8, 1.0f, rng);
  const auto r = grad_check(sae, x, 1e-3, 10);
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, GhostTermWithFrozenConstants) {
  auto sae = init_sae(8, 16, Vanilla{0.01}, 23);
  Rng rng(6);
  const MatrixF x = gaussian_matrix<float>(6, 8, 1.0f, rng);
  bool dead[16] = {};
  for (int j = 0; j < 16; j += 3) dead[j] = true;
  const auto r = grad_check(sae, x, 1e-4, 11, std::span<const bool>(dead, 16));
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gradients, VanishWithoutLearningSignal) {
  auto sae = zero_sae<double>(4, 6);
  const MatrixD x = (MatrixD(3, 4) << 1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4).finished();
  sae.b_dec = x.row(0);
  SaeGrads<double> g;
  const auto t = loss_and_grad(sae, x, {}, &g);
  EXPECT_EQ(t.mse, 0.0);
  EXPECT_TRUE(g.w_enc.isZero());
  EXPECT_TRUE(g.w_dec.isZero());
  EXPECT_TRUE(g.b_enc.isZero());
  EXPECT_TRUE(g.b_dec.isZero());
}

TEST(GhostContext, TermMatchesMseMagnitude) {
  auto sae = init_sae(8, 16, Vanilla{0.0}, 24);
  Rng rng(7);
  const MatrixD x = gaussian_matrix<double>(32, 8, 1.0, rng);
  const auto sd = sae.cast<double>();
  bool dead[16] = {};
  dead[2] = dead[5] = true;
  const auto t = loss_and_grad(sd, x, std::span<const bool>(dead, 16), static_cast<SaeGrads<double>*>(nullptr));
  EXPECT_NEAR(t.ghost, t.mse, 1e-6 * t.mse + 1e-9);
}

TEST(Schedule, WarmupThenCosine) {
  const WarmupCosineSchedule s{0.01, 200, 1000};
  EXPECT_DOUBLE_EQ(s.at(200), 0.01);
  EXPECT_DOUBLE_EQ(s.at(199), 0.01);
  EXPECT_NEAR(s.at(1000), 0.0, 1e-15);
  EXPECT_NEAR(s.at(999), 0.0, 1e-6);
  EXPECT_LT(s.at(0), s.at(100));
  EXPECT_NEAR(s.at(600), 0.005, 1e-12);
  for (int t = 201; t < 1000; ++t) EXPECT_LE(s.at(t), s.at(t - 1));
}

TEST(Adam, FirstStepIsSignTimesLr) {
  MatrixF p = MatrixF::Zero(1, 3);
  const MatrixF g = (MatrixF(1, 3) << 2.0f, -0.5f, 0.0f).finished();
  AdamSlot<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> slot(p);
  slot.step(p, g, 0.1, 1, {});
  EXPECT_NEAR(p(0, 0), -0.1f, 1e-6f);
  EXPECT_NEAR(p(0, 1), 0.1f, 1e-6f);
  EXPECT_EQ(p(0, 2), 0.0f);
}

TrainConfig small_topk_config(std::int64_t steps) {
  TrainConfig cfg;
  cfg.expansion_factor = 4;
  cfg.variant = TopK{4};
  cfg.total_steps = steps;
  cfg.warmup_steps = std::min<std::int64_t>(50, steps - 1);
  cfg.batch_size = 256;
  cfg.learning_rate = 3e-3;
  cfg.ghost_window_tokens = 20'000;
  cfg.seed = 3;
  return cfg;
}

TEST(Train, DecoderStaysUnitNormEveryStep) {
  const auto [ds, truth] = synth_dictionary_dataset(32, 16, 4, 100, 3, 0.01f, 1);
  auto cfg = small_topk_config(60);
  cfg.ghost_window_tokens = 512;  // force ghost steps too
  double worst = 0;
  std::int64_t ghost_steps = 0;
  const auto res = train(ds, cfg, [&](const TrainRecord& r, const SaeModel& sae) {
    for (Index j = 0; j < sae.d_sae(); ++j) worst = std::max(worst, double(std::abs(sae.w_dec.row(j).norm() - 1.0f)));
    ghost_steps += r.ghost > 0;
  });
  EXPECT_LT(worst, 1e-5);
  EXPECT_EQ(res.log.records.size(), 60u);
  EXPECT_GT(ghost_steps, 0);
}

TEST(Train, DeterministicGivenSeed) {
  const auto [ds, truth] = synth_dictionary_dataset(32, 16, 4, 50, 3, 0.01f, 2);
  const auto cfg = small_topk_config(40);
  const auto a = train(ds, cfg);
  const auto b = train(ds, cfg);
  EXPECT_EQ(a.sae.w_enc, b.sae.w_enc);
  EXPECT_EQ(a.sae.w_dec, b.sae.w_dec);
  EXPECT_EQ(a.sae.b_dec, b.sae.b_dec);
}

TEST(Train, DivergenceGuard) {
  auto ds = make_dataset(4, 1, 1, 4);
  for (auto& v : ds.activations) v = 1e20f;
  auto cfg = small_topk_config(5);
  cfg.variant = TopK{1};
  EXPECT_THROW(train(ds, cfg), DivergenceError);
}

TEST(Train, RejectsBadConfig) {
  const auto [ds, truth] = synth_dictionary_dataset(8, 4, 2, 4, 1, 0.0f, 1);
  auto cfg = small_topk_config(10);
  cfg.warmup_steps = 10;
  EXPECT_THROW(train(ds, cfg), InvalidArgument);
  cfg = small_topk_config(10);
  cfg.learning_rate = 0;
  EXPECT_THROW(train(ds, cfg), InvalidArgument);
}

TEST(Train, NoiseFreeOvercompleteFitsWell) {
  const auto [ds, truth] = synth_dictionary_dataset(32, 16, 4, 250, 2, 0.0f, 8);
  auto cfg = small_topk_config(1500);
  cfg.variant = TopK{2};
  const auto res = train(ds, cfg);
  const auto x = token_matrix(ds);
  const MatrixF xh = decode(res.sae, encode(res.sae, x));
  const double mse = (x - xh).squaredNorm() / double(x.rows());
  const double var = (x.rowwise() - x.colwise().mean()).squaredNorm() / double(x.rows());
  EXPECT_LT(mse, 0.05 * var);
}

double mean_l0(const SaeModel& sae, const MatrixF& x) {
  const MatrixF f = encode(sae, x);
  return double((f.array() > 0.0f).count()) / double(x.rows());
}

TEST(Train, L1SweepGivesNonIncreasingL0) {
  const auto [ds, truth] = synth_dictionary_dataset(32, 16, 4, 200, 3, 0.01f, 12);
  const auto x = token_matrix(ds);
  double prev = std::numeric_limits<double>::infinity();
  for (double l1 : {1e-12, 1e-3, 3e-2, 1.0}) {
    auto cfg = small_topk_config(600);
    cfg.variant = Vanilla{l1};
    cfg.learning_rate = 1e-3;
    const double l0 = mean_l0(train(ds, cfg).sae, x);
    EXPECT_LE(l0, prev) << "l1=" << l1;
    prev = l0;
  }
}

TEST(Checkpoint, RoundtripBothVariants) {
  for (SaeVariant v : {SaeVariant{Vanilla{1e-4}}, SaeVariant{TopK{64}}}) {
    auto sae = init_sae(6, 128, v, 4);
    sae.b_enc.setRandom();
    sae.b_dec.setRandom();
    const auto back = decode_checkpoint(encode_checkpoint(sae));
    EXPECT_EQ(back.w_enc, sae.w_enc);
    EXPECT_EQ(back.w_dec, sae.w_dec);
    EXPECT_EQ(back.b_enc, sae.b_enc);
    EXPECT_EQ(back.b_dec, sae.b_dec);
    EXPECT_EQ(back.variant.index(), sae.variant.index());
    EXPECT_EQ(l1_coeff_of(back.variant), l1_coeff_of(sae.variant));
  }
}

TEST(Checkpoint, Errors) {
  const auto bytes = encode_checkpoint(init_sae(3, 6, TopK{2}, 1));
  EXPECT_THROW(decode_checkpoint("SAESHARD" + bytes.substr(8)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 10)), CheckpointError);
}

TEST(Recovery, ShortRunRecoversMostAtoms) {
  const auto [ds, truth] = synth_dictionary_dataset(32, 16, 8, 200, 3, 0.01f, 5);
  auto cfg = small_topk_config(1200);
  cfg.variant = TopK{3};
  const auto res = train(ds, cfg);
  EXPECT_GE(oracle::greedy_matched_cosine(truth.atoms, res.sae.w_dec), 0.85);
}

}  // namespace
}  // namespace saelab
