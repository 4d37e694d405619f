#include "saelab/batching.hpp"
#include "saelab/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

namespace saelab {
namespace {

ActivationDataset random_dataset(std::uint32_t n, std::uint16_t rows, std::uint16_t cols,
                                 std::uint32_t d, std::uint64_t seed) {
  auto ds = make_dataset(n, rows, cols, d, 3, Sublayer::mlp_out);
  Rng rng(seed);
  std::normal_distribution<float> g(0.0f, 2.0f);
  for (auto& v : ds.activations) v = g(rng);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.meta[i].sample_id = 1000 + i;
    ds.meta[i].class_label = i % 3;
    ds.meta[i].attribute_flag = (i % 2) == 1;
    ds.meta[i].split = static_cast<Split>(i % 3);
  }
  return ds;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("saelab_" + name);
}

TEST(Shard, PayloadSizeArithmetic) {
  const auto ds = random_dataset(2, 2, 2, 4, 1);  // 5 tokens
  const auto bytes = encode_shard(ds);
  const auto meta_len = meta_to_json(ds).dump().size();
  EXPECT_EQ(bytes.size() - kShardFixedHeaderBytes - meta_len, 160u);
}

TEST(Shard, Grid7x7Width768Header) {
  auto ds = make_dataset(1, 7, 7, 768);
  const auto back = decode_shard(encode_shard(ds));
  EXPECT_EQ(back.header.d_model, 768u);
  EXPECT_EQ(back.header.n_tokens, 50u);
}

TEST(Shard, FileRoundtripIsBitExact) {
  auto ds = random_dataset(4, 3, 2, 5, 7);
  ds.attrs = {{"note", "unit"}};
  const auto path = temp_path("roundtrip.saeshard");
  const auto written = write_shard(ds, path);
  EXPECT_EQ(written, std::filesystem::file_size(path));
  const auto back = read_shard(path);
  EXPECT_EQ(back, ds);
  std::filesystem::remove(path);
}

TEST(Shard, ErrorCasesAreDistinct) {
  const auto ds = random_dataset(2, 2, 2, 4, 3);
  const auto good = encode_shard(ds);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_shard(bad_magic), BadMagicError);

  auto bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(decode_shard(bad_version), VersionMismatchError);

  EXPECT_THROW(decode_shard(good.substr(0, good.size() - 4)), TruncatedPayloadError);
  EXPECT_THROW(decode_shard(good.substr(0, 20)), TruncatedHeaderError);
  EXPECT_THROW(decode_shard(good.substr(0, kShardFixedHeaderBytes + 3)), TruncatedMetaError);
  EXPECT_THROW(decode_shard(good + "xx"), TrailingBytesError);

  auto wrong_tokens = good;
  wrong_tokens[16] = 6;  // n_tokens 5 -> 6 disagrees with the 2x2 grid
  EXPECT_THROW(decode_shard(wrong_tokens), ShardError);

  auto nan_ds = ds;
  nan_ds.activations[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(encode_shard(nan_ds), NonFiniteError);

  auto dup = ds;
  dup.meta[1].sample_id = dup.meta[0].sample_id;
  EXPECT_THROW(encode_shard(dup), MetaMismatchError);

  EXPECT_THROW(read_shard("/nonexistent/dir/x.saeshard"), ShardIoError);
}

TEST(Shard, ErrorKindsMatchClasses) {
  try {
    decode_shard("NOTASHARD-------------------------------------");
    FAIL();
  } catch (const ShardError& e) {
    EXPECT_EQ(e.kind(), ShardErrorKind::bad_magic);
  }
}

TEST(Batching, PartialFinalBatch) {
  const auto ds = random_dataset(10, 2, 2, 3, 4);  // 10 x 5 tokens
  auto it = iterate_batches(ds, 16, 42, TokenFilter::all);
  std::vector<Index> sizes;
  MatrixF b;
  while (it.next(b)) sizes.push_back(b.rows());
  EXPECT_EQ(sizes, (std::vector<Index>{16, 16, 16, 2}));
}

TEST(Batching, ClsOnlyAndSpatialOnly) {
  const auto ds = random_dataset(10, 2, 2, 3, 4);
  auto cls = iterate_batches(ds, 100, 1, TokenFilter::cls_only);
  EXPECT_EQ(cls.rows_per_epoch(), 10u);
  auto spatial = iterate_batches(ds, 100, 1, TokenFilter::spatial_only);
  EXPECT_EQ(spatial.rows_per_epoch(), 40u);
  const auto cls_only_ds = make_dataset(3, 0, 0, 2);
  EXPECT_THROW(iterate_batches(cls_only_ds, 4, 1, TokenFilter::spatial_only), InvalidArgument);
  EXPECT_THROW(iterate_batches(ds, 0, 1, TokenFilter::all), InvalidArgument);
}

TEST(Batching, DeterministicAndCoversEpoch) {
  const auto ds = random_dataset(7, 2, 3, 4, 9);
  auto a = iterate_batches(ds, 5, 123, TokenFilter::all);
  auto b = iterate_batches(ds, 5, 123, TokenFilter::all);
  std::multiset<std::vector<float>> seen;
  MatrixF ba, bb;
  while (a.next(ba)) {
    ASSERT_TRUE(b.next(bb));
    EXPECT_EQ(ba, bb);
    for (Index r = 0; r < ba.rows(); ++r) seen.insert({ba.row(r).data(), ba.row(r).data() + ba.cols()});
  }
  EXPECT_FALSE(b.next(bb));
  std::multiset<std::vector<float>> expected;
  const auto all = token_matrix(ds);
  for (Index r = 0; r < all.rows(); ++r) expected.insert({all.row(r).data(), all.row(r).data() + all.cols()});
  EXPECT_EQ(seen, expected);
}

TEST(Batching, CyclingAdvancesEpochs) {
  const auto ds = random_dataset(2, 1, 1, 2, 9);  // 4 rows
  auto it = iterate_batches(ds, 3, 5, TokenFilter::all);
  MatrixF b;
  it.next_cycling(b);
  it.next_cycling(b);
  EXPECT_EQ(b.rows(), 1);
  it.next_cycling(b);
  EXPECT_EQ(it.epoch(), 1u);
  EXPECT_EQ(b.rows(), 3);
}

TEST(Synth, NoiseFreeSingleAtomTokensLieOnAtoms) {
  const auto [ds, truth] = synth_dictionary_dataset(16, 8, 3, 20, 1, 0.0f, 11);
  const auto x = token_matrix(ds);
  for (Index r = 0; r < x.rows(); ++r) {
    const RowVecF cos = (truth.atoms * x.row(r).transpose()).transpose() / x.row(r).norm();
    EXPECT_NEAR(cos.maxCoeff(), 1.0f, 1e-6f);
    const auto& code = truth.codes[static_cast<std::size_t>(r)];
    ASSERT_EQ(code.size(), 1u);
    EXPECT_GE(code[0].coeff, 0.5f);
    EXPECT_LE(code[0].coeff, 1.5f);
  }
}

TEST(Synth, AtomsUnitNormAndCodesNonNegative) {
  const auto [ds, truth] = synth_dictionary_dataset(64, 32, 4, 10, 4, 0.01f, 3);
  for (Index j = 0; j < truth.atoms.rows(); ++j) EXPECT_NEAR(truth.atoms.row(j).norm(), 1.0f, 1e-6f);
  for (const auto& code : truth.codes) {
    ASSERT_EQ(code.size(), 4u);
    std::set<std::uint32_t> distinct;
    for (const auto& c : code) {
      EXPECT_GT(c.coeff, 0.0f);
      distinct.insert(c.atom);
    }
    EXPECT_EQ(distinct.size(), 4u);
  }
  validate(ds);
}

TEST(Synth, SameSeedSameBytes) {
  const auto a = synth_dictionary_dataset(32, 16, 5, 8, 3, 0.05f, 77);
  const auto b = synth_dictionary_dataset(32, 16, 5, 8, 3, 0.05f, 77);
  EXPECT_EQ(encode_shard(a.dataset), encode_shard(b.dataset));
  const auto c = synth_dictionary_dataset(32, 16, 5, 8, 3, 0.05f, 78);
  EXPECT_NE(encode_shard(a.dataset), encode_shard(c.dataset));
}

TEST(Synth, Preconditions) {
  EXPECT_THROW(synth_dictionary_dataset(4, 8, 2, 2, 5, 0.0f, 1), InvalidArgument);
  EXPECT_THROW(synth_dictionary_dataset(4, 1, 2, 2, 1, 0.0f, 1), InvalidArgument);
}

}  // namespace
}  // namespace saelab
