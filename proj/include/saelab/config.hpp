#pragma once

// JSON run configuration for the CLI. One struct per section, read and written
// through the same field list so the resolved config can be echoed into manifests.
// Unknown keys are an error at every level.

#include "saelab/pipeline.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <cstdio>
#include <set>

namespace saelab {

/// Bad or unknown configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kConfigSchemaVersion = 1;

struct DataSection {
  std::string task = "spurious";  // spurious | typographic
  SynthVisionSpec spec;
  float text_amp = TypographicSpec{}.text_amp;
  std::vector<std::array<int, 2>> text_region;  // empty: top row
};

struct ModelSection {
  ToyVitConfig toy;
  Index vocab_size = 512;
  float logit_scale = 100.0f;
};

struct SaeSection {
  std::string variant = "vanilla";  // vanilla | topk
  double l1_coeff = std::get<Vanilla>(toy_sae_config().variant).l1_coeff;
  int k = 64;
  Index expansion_factor = toy_sae_config().expansion_factor;
  std::string token_filter = "all";  // all | cls_only | spatial_only
  std::vector<int> layers;           // empty: every model layer
};

struct TrainSection {
  double learning_rate = toy_sae_config().learning_rate;
  std::int64_t warmup_steps = toy_sae_config().warmup_steps;
  std::int64_t total_steps = toy_sae_config().total_steps;
  Index batch_size = toy_sae_config().batch_size;
  bool ghost_grads = true;
  std::int64_t ghost_window_tokens = toy_sae_config().ghost_window_tokens;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
};

struct SteerSection {
  std::vector<int> layers;  // empty: sae.layers
  std::vector<double> strengths = default_strengths();
  double gamma = 0.10;
  double beta = 0.5;
  std::size_t top_k_concepts = 3;
  int n_images = 32;
  std::vector<Index> features;  // empty: all
  Index max_features = 0;       // 0: no cap
  std::string dictionary = "trained";  // trained | planted
  bool neurons = true;
};

struct SuppressSection {
  std::vector<int> layers;  // empty: sae.layers
  std::size_t tau_points = 25;
  double tau_lo = 1e-6, tau_hi = 1.0;
  int random_seeds = 10;
  double relaxed_drop = 0.04;
  std::string pooling = "all_tokens";  // all_tokens | cls
  double typographic_tau = 1.0;
  double typographic_lambda = 0.2;
};

struct ReportSection {
  std::string eval_split = "test";
  double l0_threshold = 0.0;
  int decimals = 1;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string out_dir = "saelab_run";
  int threads = 1;
  DataSection data;
  ModelSection model;
  SaeSection sae;
  TrainSection train;
  SteerSection steer;
  SuppressSection suppress;
  ReportSection report;

  bool typographic() const { return data.task == "typographic"; }

  ToyVitConfig model_config() const {
    ToyVitConfig c = model.toy;
    c.seed = seed;
    return c;
  }
  SynthVisionSpec data_spec() const {
    SynthVisionSpec s = data.spec;
    s.seed = mix_seed(seed, 1);
    return s;
  }
  TypographicSpec attack_spec() const {
    TypographicSpec a;
    a.text_amp = data.text_amp;
    for (const auto& rc : data.text_region) a.region.emplace_back(rc[0], rc[1]);
    a.seed = mix_seed(seed, 2);
    return a;
  }
  TrainConfig train_config(int layer) const {
    TrainConfig tc;
    tc.expansion_factor = sae.expansion_factor;
    if (sae.variant == "topk")
      tc.variant = TopK{sae.k};
    else
      tc.variant = Vanilla{sae.l1_coeff};
    tc.token_filter = sae.token_filter == "cls_only"       ? TokenFilter::cls_only
                      : sae.token_filter == "spatial_only" ? TokenFilter::spatial_only
                                                           : TokenFilter::all;
    tc.learning_rate = train.learning_rate;
    tc.warmup_steps = train.warmup_steps;
    tc.total_steps = train.total_steps;
    tc.batch_size = train.batch_size;
    tc.ghost_grads = train.ghost_grads;
    tc.ghost_window_tokens = train.ghost_window_tokens;
    tc.adam = {train.adam_beta1, train.adam_beta2, train.adam_eps};
    tc.seed = mix_seed(seed, 100 + static_cast<std::uint64_t>(layer));
    return tc;
  }
  std::vector<int> sae_layers() const {
    if (!sae.layers.empty()) return sae.layers;
    std::vector<int> all(static_cast<std::size_t>(model.toy.n_layers));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<int> steer_layers() const { return steer.layers.empty() ? sae_layers() : steer.layers; }
  std::vector<int> suppress_layers() const { return suppress.layers.empty() ? sae_layers() : suppress.layers; }
  SteerConfig steer_config(int threads_) const {
    SteerConfig c;
    c.strengths = steer.strengths;
    c.gamma = steer.gamma;
    c.beta = steer.beta;
    c.top_k_concepts = steer.top_k_concepts;
    c.threads = threads_;
    return c;
  }
  SuppressionOptions suppression_options(int threads_) const {
    SuppressionOptions o;
    o.tau_grid = default_tau_grid(suppress.tau_points, suppress.tau_lo, suppress.tau_hi);
    o.random_seeds = suppress.random_seeds;
    o.pooling = suppress.pooling == "cls" ? Pooling::cls : Pooling::all_tokens;
    o.relaxed_drop = suppress.relaxed_drop;
    o.threads = threads_;
    return o;
  }

  void validate() const;
};

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + (path_.empty() ? std::string("<root>") : path_) + "' must be an object");
  }

  template <class T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + prefix() + key + "': " + e.what());
    }
  }

  template <class Fn>
  void section(const char* key, Fn&& fn) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    ConfigReader sub(*it, prefix() + key);
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + prefix() + k + "'");
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class ConfigWriter {
 public:
  explicit ConfigWriter(nlohmann::json& j) : j_(j) { j_ = nlohmann::json::object(); }
  template <class T>
  void operator()(const char* key, const T& v) {
    if constexpr (std::is_same_v<T, float>) {
      // shortest decimal that reads back as the same float, so 0.8f prints as 0.8
      char buf[32];
      for (int digits = 6; digits <= 9; ++digits) {
        std::snprintf(buf, sizeof buf, "%.*g", digits, static_cast<double>(v));
        if (std::stof(buf) == v) break;
      }
      j_[key] = std::stod(buf);
    } else {
      j_[key] = v;
    }
  }
  template <class Fn>
  void section(const char* key, Fn&& fn) {
    ConfigWriter sub(j_[key]);
    fn(sub);
  }

 private:
  nlohmann::json& j_;
};

// The single field list. `C` is RunConfig or const RunConfig.
template <class V, class C>
void config_fields(V& v, C& c) {
  v("schema_version", c.schema_version);
  v("seed", c.seed);
  v("out_dir", c.out_dir);
  v("threads", c.threads);
  v.section("data", [&](auto& s) {
    auto& d = c.data;
    s("task", d.task);
    s("n_classes", d.spec.n_classes);
    s("rho", d.spec.rho);
    s("rho_eval", d.spec.rho_eval);
    s("center_bias", d.spec.center_bias);
    s("n_train", d.spec.n_train);
    s("n_val", d.spec.n_val);
    s("n_test", d.spec.n_test);
    s("class_amp_lo", d.spec.class_amp_lo);
    s("class_amp_hi", d.spec.class_amp_hi);
    s("part_prob", d.spec.part_prob);
    s("part_amp", d.spec.part_amp);
    s("attribute_amp", d.spec.attribute_amp);
    s("pixel_noise", d.spec.pixel_noise);
    s("clutter_prob", d.spec.clutter_prob);
    s("clutter_amp", d.spec.clutter_amp);
    s("text_amp", d.text_amp);
    s("text_region", d.text_region);
  });
  v.section("model", [&](auto& s) {
    auto& m = c.model.toy;
    s("n_layers", m.n_layers);
    s("d_model", m.d_model);
    s("n_heads", m.n_heads);
    s("grid_rows", m.grid_rows);
    s("grid_cols", m.grid_cols);
    s("patch_dim", m.patch_dim);
    s("d_mlp", m.d_mlp);
    s("d_out", m.d_out);
    s("n_classes", m.n_classes);
    s("n_parts", m.n_parts);
    s("n_concepts", m.n_concepts);
    s("embed_gain", m.embed_gain);
    s("pos_scale", m.pos_scale);
    s("attn_gain", m.attn_gain);
    s("qk_std", m.qk_std);
    s("mlp_std", m.mlp_std);
    s("final_beta_std", m.final_beta_std);
    s("attribute_push", m.attribute_push);
    s("text_push", m.text_push);
    s("vocab_size", c.model.vocab_size);
    s("logit_scale", c.model.logit_scale);
  });
  v.section("sae", [&](auto& s) {
    s("variant", c.sae.variant);
    s("l1_coeff", c.sae.l1_coeff);
    s("k", c.sae.k);
    s("expansion_factor", c.sae.expansion_factor);
    s("token_filter", c.sae.token_filter);
    s("layers", c.sae.layers);
  });
  v.section("train", [&](auto& s) {
    s("learning_rate", c.train.learning_rate);
    s("warmup_steps", c.train.warmup_steps);
    s("total_steps", c.train.total_steps);
    s("batch_size", c.train.batch_size);
    s("ghost_grads", c.train.ghost_grads);
    s("ghost_window_tokens", c.train.ghost_window_tokens);
    s("adam_beta1", c.train.adam_beta1);
    s("adam_beta2", c.train.adam_beta2);
    s("adam_eps", c.train.adam_eps);
  });
  v.section("steer", [&](auto& s) {
    s("layers", c.steer.layers);
    s("strengths", c.steer.strengths);
    s("gamma", c.steer.gamma);
    s("beta", c.steer.beta);
    s("top_k_concepts", c.steer.top_k_concepts);
    s("n_images", c.steer.n_images);
    s("features", c.steer.features);
    s("max_features", c.steer.max_features);
    s("dictionary", c.steer.dictionary);
    s("neurons", c.steer.neurons);
  });
  v.section("suppress", [&](auto& s) {
    s("layers", c.suppress.layers);
    s("tau_points", c.suppress.tau_points);
    s("tau_lo", c.suppress.tau_lo);
    s("tau_hi", c.suppress.tau_hi);
    s("random_seeds", c.suppress.random_seeds);
    s("relaxed_drop", c.suppress.relaxed_drop);
    s("pooling", c.suppress.pooling);
    s("typographic_tau", c.suppress.typographic_tau);
    s("typographic_lambda", c.suppress.typographic_lambda);
  });
  v.section("report", [&](auto& s) {
    s("eval_split", c.report.eval_split);
    s("l0_threshold", c.report.l0_threshold);
    s("decimals", c.report.decimals);
  });
}

inline void one_of(const std::string& key, const std::string& value, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed)
    if (value == a) return;
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
  throw ConfigError("'" + key + "' must be one of {" + list + "}, got '" + value + "'");
}

}  // namespace detail

inline void RunConfig::validate() const {
  const auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  check(schema_version == kConfigSchemaVersion,
        "schema_version " + std::to_string(schema_version) + " is not supported (expected " +
            std::to_string(kConfigSchemaVersion) + ")");
  check(!out_dir.empty(), "out_dir is empty");
  check(threads >= 1, "threads must be >= 1");
  detail::one_of("data.task", data.task, {"spurious", "typographic"});
  detail::one_of("sae.variant", sae.variant, {"vanilla", "topk"});
  detail::one_of("sae.token_filter", sae.token_filter, {"all", "cls_only", "spatial_only"});
  detail::one_of("steer.dictionary", steer.dictionary, {"trained", "planted"});
  detail::one_of("suppress.pooling", suppress.pooling, {"all_tokens", "cls"});
  detail::one_of("report.eval_split", report.eval_split, {"train", "val", "test"});
  for (const auto& rc : data.text_region)
    check(rc[0] >= 0 && rc[0] < model.toy.grid_rows && rc[1] >= 0 && rc[1] < model.toy.grid_cols,
          "data.text_region patch outside the grid");
  const auto layers_ok = [&](const std::vector<int>& ls, const char* key) {
    for (int l : ls)
      check(l >= 0 && l < model.toy.n_layers,
            std::string(key) + " has layer " + std::to_string(l) + " outside [0, " + std::to_string(model.toy.n_layers) + ")");
  };
  layers_ok(sae.layers, "sae.layers");
  layers_ok(steer.layers, "steer.layers");
  layers_ok(suppress.layers, "suppress.layers");
  check(steer.n_images >= 1, "steer.n_images must be >= 1");
  check(steer.max_features >= 0, "steer.max_features must be >= 0");
  check(report.decimals >= 0 && report.decimals <= 6, "report.decimals must be in [0, 6]");
  check(suppress.random_seeds >= 0, "suppress.random_seeds must be >= 0");
  check(suppress.relaxed_drop >= 0, "suppress.relaxed_drop must be >= 0");
  // module-level checks, rethrown as config errors
  try {
    model.toy.validate();
    data.spec.validate(model.toy);
    train_config(0).validate();
    steer_config(1).validate();
    default_tau_grid(suppress.tau_points, suppress.tau_lo, suppress.tau_hi);
    require(model.vocab_size >= model.toy.n_classes + model.toy.n_concepts + 2,
            "model.vocab_size too small for classes and concepts");
    require(model.logit_scale > 0, "model.logit_scale must be positive");
    if (sae.variant == "topk")
      require(sae.k <= sae.expansion_factor * model.toy.d_model, "sae.k exceeds the dictionary size");
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

/// Parses a config document. Missing keys keep their defaults; the typographic
/// task starts from its own data defaults before the document is applied.
inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig c;
  if (j.is_object() && j.contains("data") && j["data"].is_object() && j["data"].contains("task") &&
      j["data"]["task"] == "typographic")
    c.data.spec = typographic_data_spec(0);
  detail::ConfigReader r(j, "");
  detail::config_fields(r, c);
  r.finish();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  detail::ConfigWriter w(j);
  detail::config_fields(w, c);
  return j;
}

}  // namespace saelab
