#include "saelab/config.hpp"
#include "saelab/manifest.hpp"
#include "saelab/checkpoint.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <regex>

#ifndef SAELAB_CLI
#error "SAELAB_CLI must point at the saelab binary"
#endif

namespace saelab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config, in process

TEST(Config, DefaultsAreValid) {
  const auto c = parse_config(json::object());
  EXPECT_EQ(c.schema_version, 1);
  EXPECT_EQ(c.sae_layers(), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(c.steer.strengths, default_strengths());
  EXPECT_EQ(c.suppression_options(1).tau_grid.size(), 25u);
  EXPECT_TRUE(std::holds_alternative<Vanilla>(c.train_config(0).variant));
}

TEST(Config, UnknownKeysNamedAtEveryLevel) {
  const auto message = [](const json& j) {
    try {
      parse_config(j);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message({{"sede", 1}}).find("'sede'"), std::string::npos);
  EXPECT_NE(message({{"train", {{"lr", 1.0}}}}).find("'train.lr'"), std::string::npos);
  EXPECT_NE(message({{"steer", {{"strenghts", {0, 1}}}}}).find("'steer.strenghts'"), std::string::npos);
  EXPECT_NE(message({{"report", {{"plots", true}}}}).find("'report.plots'"), std::string::npos);
}

TEST(Config, TypeAndValueErrors) {
  EXPECT_THROW(parse_config({{"seed", "seven"}}), ConfigError);
  EXPECT_THROW(parse_config({{"data", 3}}), ConfigError);
  EXPECT_THROW(parse_config({{"schema_version", 2}}), ConfigError);
  EXPECT_THROW(parse_config({{"steer", {{"strengths", json::array()}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"steer", {{"strengths", {0, 5, 2}}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"sae", {{"variant", "gated"}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"sae", {{"layers", {4}}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"sae", {{"variant", "topk"}, {"k", 1000}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"train", {{"warmup_steps", 5000}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"data", {{"text_region", {{9, 0}}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json::array()), ConfigError);
}

TEST(Config, TypographicTaskStartsFromItsOwnDefaults) {
  const auto c = parse_config({{"data", {{"task", "typographic"}, {"n_test", 7}}}});
  EXPECT_EQ(c.data.spec.n_classes, 4);
  EXPECT_EQ(c.data.spec.attribute_amp, 0.0f);
  EXPECT_EQ(c.data.spec.n_test, 7);
  EXPECT_TRUE(c.typographic());
}

TEST(Config, RoundTripsThroughJson) {
  auto c = parse_config({{"seed", 11},
                         {"model", {{"embed_gain", 2.5}}},
                         {"sae", {{"variant", "topk"}, {"k", 16}, {"layers", {1, 2}}}},
                         {"steer", {{"features", {3, 4}}, {"strengths", {0, 10}}}},
                         {"data", {{"text_region", {{0, 1}, {0, 2}}}}}});
  const json j = to_json(c);
  EXPECT_EQ(j["data"]["class_amp_lo"], 0.2);  // printed as the short decimal
  const auto back = parse_config(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.attack_spec().region.size(), 2u);
  EXPECT_EQ(std::get<TopK>(back.train_config(1).variant).k, 16);
  EXPECT_NE(back.train_config(1).seed, back.train_config(2).seed);
}

TEST(Manifest, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto p = fs::temp_directory_path() / "saelab_sha_probe.bin";
  std::string big(200'000, 'x');
  { std::ofstream(p, std::ios::binary) << big; }
  EXPECT_EQ(sha256_file(p), sha256_hex(big));
  fs::remove(p);
}

// ---------------------------------------------------------------- the binary

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(SAELAB_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json small_config(const fs::path& out) {
  return {{"schema_version", 1},
          {"seed", 3},
          {"out_dir", out.string()},
          {"data", {{"n_train", 160}, {"n_val", 80}, {"n_test", 80}}},
          {"sae", {{"layers", {0}}}},
          {"train", {{"total_steps", 60}, {"warmup_steps", 5}, {"batch_size", 256}}},
          {"steer", {{"n_images", 4}, {"max_features", 6}, {"strengths", {0, 50, 150}}}},
          {"suppress", {{"tau_points", 5}, {"tau_lo", 1e-3}, {"random_seeds", 2}}}};
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  const auto s = read(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = new fs::path(fs::temp_directory_path() / ("saelab_cli_" + std::to_string(::getpid())));
    fs::remove_all(*root);
    fs::create_directories(*root);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root);
    delete root;
  }
  static fs::path write_config(const std::string& name, const json& j) {
    const auto p = *root / (name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
  }
  static inline fs::path* root = nullptr;
};

TEST_F(Cli, GenDataOneShardPerLayerAndSplitAndRepeatable) {
  const auto a = *root / "gen_a", b = *root / "gen_b";
  const auto cfg_a = write_config("gen_a", small_config(a));
  const auto r1 = run("gen-data --config " + cfg_a.string());
  ASSERT_EQ(r1.code, 0) << r1.output;
  for (int l = 0; l < 4; ++l)
    for (const char* split : {"train", "val", "test"})
      EXPECT_TRUE(fs::exists(a / "data" / ("L" + std::to_string(l) + "_" + split + ".shard"))) << l << split;
  EXPECT_EQ(read_shard(a / "data" / "L2_val.shard").n_samples(), 80);
  const auto manifest_1 = read(a / "manifests" / "gen-data.json");

  // same config, same bytes; the manifest has no timestamps
  ASSERT_EQ(run("gen-data --config " + cfg_a.string()).code, 0);
  EXPECT_EQ(read(a / "manifests" / "gen-data.json"), manifest_1);

  // another out_dir and thread count: identical output hashes
  ASSERT_EQ(run("gen-data --config " + cfg_a.string() + " --out-dir " + b.string() + " --threads 3").code, 0);
  const auto ja = json::parse(manifest_1), jb = json::parse(read(b / "manifests" / "gen-data.json"));
  EXPECT_EQ(ja["outputs"], jb["outputs"]);
  EXPECT_EQ(ja["outputs"].size(), 13u);  // 12 shards + head
  EXPECT_EQ(ja["outputs"]["data/L0_train.shard"], sha256_file(a / "data" / "L0_train.shard"));
  EXPECT_TRUE(ja["config"].contains("seed"));
  EXPECT_FALSE(ja["config"].contains("out_dir"));

  // a different seed changes the data
  ASSERT_EQ(run("gen-data --config " + cfg_a.string() + " --out-dir " + b.string() + " --seed 4").code, 0);
  EXPECT_NE(json::parse(read(b / "manifests" / "gen-data.json"))["outputs"]["data/L0_train.shard"],
            ja["outputs"]["data/L0_train.shard"]);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  auto j = small_config(*root / "bad");
  j["model"] = {{"d_modle", 32}};
  const auto r = run("gen-data --config " + write_config("bad_key", j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("model.d_modle"), std::string::npos) << r.output;

  const auto garbage = *root / "garbage.json";
  std::ofstream(garbage) << "{ not json";
  EXPECT_EQ(run("gen-data --config " + garbage.string()).code, 2);
  EXPECT_EQ(run("gen-data --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);  // a subcommand is required
  EXPECT_EQ(run("gen-data --config " + write_config("ok", small_config(*root / "env")).string(),
                "SAE_LAB_THREADS=zero")
                .code,
            2);
  EXPECT_EQ(run("gen-data --threads 0 --out-dir " + (*root / "t0").string()).code, 2);
}

TEST_F(Cli, DataErrorsExitThree) {
  const auto r = run("train-sae --out-dir " + (*root / "empty").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("layer 0 train shard"), std::string::npos) << r.output;
}

TEST_F(Cli, TrainEvalSteerSuppressPipeline) {
  const auto out = *root / "pipe";
  const auto cfg = write_config("pipe", small_config(out)).string();
  ASSERT_EQ(run("gen-data --config " + cfg).code, 0);

  // suppress before any training names the missing checkpoint
  const auto missing = run("suppress --config " + cfg);
  EXPECT_EQ(missing.code, 3);
  EXPECT_NE(missing.output.find("missing SAE checkpoint for layer 0"), std::string::npos) << missing.output;

  const auto resume = run("train-sae --resume --config " + cfg);
  EXPECT_EQ(resume.code, 2);
  EXPECT_NE(resume.output.find("--resume is not supported"), std::string::npos);

  const auto tr = run("train-sae --config " + cfg);
  ASSERT_EQ(tr.code, 0) << tr.output;
  EXPECT_TRUE(std::regex_search(tr.output, std::regex("layer 0: vanilla, 60 steps, final EV [0-9.]+, mean L0 [0-9.]+")))
      << tr.output;
  EXPECT_EQ(count_lines(out / "sae" / "L0_log.csv"), 1u + 60u);  // header + one row per step
  const auto ckpt_hash = sha256_file(out / "sae" / "L0.ckpt");
  ASSERT_EQ(run("train-sae --deterministic --config " + cfg).code, 0);
  EXPECT_EQ(sha256_file(out / "sae" / "L0.ckpt"), ckpt_hash);

  const auto ev = run("eval --self-check --config " + cfg);
  ASSERT_EQ(ev.code, 0) << ev.output;
  const auto metrics = json::parse(read(out / "eval" / "L0_metrics.json"));
  EXPECT_GT(metrics["explained_variance"].get<double>(), 0.5);
  EXPECT_EQ(count_lines(out / "eval" / "L0_l0_grid.csv"), 4u);
  const auto grid = read(out / "eval" / "L0_l0_grid.csv");
  EXPECT_EQ(std::count(grid.begin(), grid.end(), ',') + 4, 16);  // 4 x 4 cells

  const auto id = run("eval --dictionary identity --config " + cfg);
  ASSERT_EQ(id.code, 0) << id.output;
  const auto idm = json::parse(read(out / "eval" / "L0_metrics.json"));
  EXPECT_EQ(idm["explained_variance"].get<double>(), 1.0);
  EXPECT_NEAR(idm["ce_recovered"].get<double>(), 100.0, 1e-9);
  EXPECT_NE(id.output.find("CE rec 100.000"), std::string::npos) << id.output;

  const auto st = run("steer --features 1,3 --config " + cfg);
  ASSERT_EQ(st.code, 0) << st.output;
  EXPECT_EQ(count_lines(out / "steer" / "L0_sweep.csv"), 1u + 2u * 3u);
  EXPECT_EQ(count_lines(out / "steer" / "L0_neuron_sweep.csv"), 1u + 64u * 3u);
  EXPECT_EQ(count_lines(out / "steer" / "L0_histogram.csv"), 1u + 25u);
  const auto capped = run("steer --config " + cfg);
  ASSERT_EQ(capped.code, 0);
  EXPECT_EQ(count_lines(out / "steer" / "L0_sweep.csv"), 1u + 6u * 3u);  // steer.max_features
  const auto bad_id = run("steer --features 5000 --config " + cfg);
  EXPECT_EQ(bad_id.code, 2);
  EXPECT_NE(bad_id.output.find("feature id 5000"), std::string::npos);
  auto no_strengths = small_config(out);
  no_strengths["steer"]["strengths"] = json::array();
  EXPECT_EQ(run("steer --config " + write_config("nostr", no_strengths).string()).code, 2);

  const auto sup = run("suppress --config " + cfg);
  ASSERT_EQ(sup.code, 0) << sup.output;
  const auto md = read(out / "suppress" / "table.md");
  EXPECT_NE(md.find("| - | Baseline | 0 |"), std::string::npos) << md;
  EXPECT_NE(md.find("| 0 | SAE strict |"), std::string::npos);
  EXPECT_NE(md.find("Random control (2 seeds per layer"), std::string::npos);
  EXPECT_EQ(count_lines(out / "suppress" / "random_control.csv"), 1u + 2u);

  for (const char* m : {"gen-data", "train-sae", "eval", "steer", "suppress"}) {
    const auto j = json::parse(read(out / "manifests" / (std::string(m) + ".json")));
    EXPECT_EQ(j["command"], m);
    for (const auto& [path, hash] : j["outputs"].items()) EXPECT_EQ(hash, sha256_file(out / path)) << path;
    for (const auto& [path, hash] : j["inputs"].items()) EXPECT_EQ(hash.get<std::string>().size(), 64u) << path;
  }
  EXPECT_TRUE(json::parse(read(out / "manifests" / "suppress.json"))["inputs"].contains("sae/L0.ckpt"));
}

TEST_F(Cli, TopKFlagAndSelfCheck) {
  const auto out = *root / "topk";
  auto j = small_config(out);
  j["sae"]["k"] = 8;
  const auto cfg = write_config("topk", j).string();
  ASSERT_EQ(run("gen-data --config " + cfg).code, 0);
  ASSERT_EQ(run("train-sae --variant topk --config " + cfg).code, 0);
  EXPECT_TRUE(std::holds_alternative<TopK>(read_checkpoint(out / "sae" / "L0.ckpt").variant));
  const auto ev = run("eval --self-check --variant topk --config " + cfg);
  EXPECT_EQ(ev.code, 2);  // --variant belongs to train-sae
  const auto ok = run("eval --self-check --config " + cfg);
  ASSERT_EQ(ok.code, 0) << ok.output;
  EXPECT_TRUE(std::regex_search(ok.output, std::regex("max token L0 [0-8] <= 8 passed"))) << ok.output;
  EXPECT_EQ(run("train-sae --variant gated --config " + cfg).code, 2);
}

TEST_F(Cli, DivergenceExitsFour) {
  const auto out = *root / "diverge";
  auto j = small_config(out);
  j["train"]["learning_rate"] = 1e38;
  const auto cfg = write_config("diverge", j).string();
  ASSERT_EQ(run("gen-data --config " + cfg).code, 0);
  const auto r = run("train-sae --config " + cfg);
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("non-finite"), std::string::npos);
}

TEST_F(Cli, TypographicTask) {
  const auto out = *root / "typo";
  json j = {{"out_dir", out.string()},
            {"data", {{"task", "typographic"}, {"n_train", 160}, {"n_val", 0}, {"n_test", 80}}},
            {"sae", {{"layers", {2}}}},
            {"train", {{"total_steps", 60}, {"warmup_steps", 5}, {"batch_size", 256}}}};
  const auto cfg = write_config("typo", j).string();
  ASSERT_EQ(run("gen-data --config " + cfg).code, 0);
  EXPECT_TRUE(fs::exists(out / "data" / "L2_attacked_test.shard"));
  EXPECT_FALSE(fs::exists(out / "data" / "L2_val.shard"));
  ASSERT_EQ(run("train-sae --config " + cfg).code, 0);
  const auto sup = run("suppress --config " + cfg);
  ASSERT_EQ(sup.code, 0) << sup.output;
  const auto md = read(out / "suppress" / "typographic.md");
  EXPECT_NE(md.find("| 2 |"), std::string::npos) << md;
  EXPECT_EQ(count_lines(out / "suppress" / "typographic.csv"), 2u);
}

}  // namespace
}  // namespace saelab
