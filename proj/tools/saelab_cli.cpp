// saelab: one binary, one subcommand per stage. All state lives under out_dir:
//   data/      shards L<layer>_<split>.shard, vocab.head
//   sae/       L<layer>.ckpt, L<layer>_log.csv
//   eval/ steer/ suppress/   CSV, JSON and Markdown reports
//   manifests/<command>.json

#include "saelab/config.hpp"
#include "saelab/manifest.hpp"
#include "saelab/shard.hpp"
#include "saelab/checkpoint.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace saelab;

namespace {

constexpr int kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitDivergence = 4;

/// Missing or unreadable stage outputs.
class DataError : public Error {
 public:
  using Error::Error;
};

struct Run {
  RunConfig cfg;
  int threads = 1;
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path shard(int layer, const std::string& split) const {
    return data_dir() / ("L" + std::to_string(layer) + "_" + split + ".shard");
  }
  fs::path vocab() const { return data_dir() / "vocab.head"; }
  fs::path checkpoint(int layer) const { return root / "sae" / ("L" + std::to_string(layer) + ".ckpt"); }
  fs::path train_log(int layer) const { return root / "sae" / ("L" + std::to_string(layer) + "_log.csv"); }

  Manifest manifest(const std::string& command) const {
    Manifest m(command, root);
    auto c = to_json(cfg);
    c.erase("out_dir");
    m.set("config", c);
    m.set("schema_version", kConfigSchemaVersion);
    return m;
  }
};

fs::path need(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw DataError("missing " + what + ": " + p.string() + " (run the earlier stage first)");
  return p;
}

ActivationDataset load_shard(const Run& r, Manifest& man, int layer, const std::string& split) {
  const auto p = need(r.shard(layer, split), "layer " + std::to_string(layer) + " " + split + " shard");
  man.add_input(p);
  return read_shard(p);
}

VocabularyHead load_vocab(const Run& r, Manifest& man) {
  const auto p = need(r.vocab(), "vocabulary head");
  man.add_input(p);
  return read_head(p);
}

SaeModel load_sae(const Run& r, Manifest& man, int layer) {
  const auto p = r.checkpoint(layer);
  if (!fs::exists(p))
    throw DataError("missing SAE checkpoint for layer " + std::to_string(layer) + ": " + p.string());
  man.add_input(p);
  return read_checkpoint(p);
}

template <class Fn>
void write_text(const fs::path& p, Manifest& man, Fn&& fill) {
  fs::create_directories(p.parent_path());
  {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    fill(out);
  }
  man.add_output(p);
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const Run& r) {
  auto man = r.manifest("gen-data");
  const auto mc = r.cfg.model_config();
  const auto model = make_toy_vit(mc);
  const auto vocab = make_toy_vocabulary(model, r.cfg.model.vocab_size, r.cfg.model.logit_scale);
  fs::create_directories(r.data_dir());
  write_head(vocab, r.vocab());
  man.add_output(r.vocab());

  const auto spec = r.cfg.data_spec();
  const auto clean = synth_vision_dataset(spec, mc);
  std::vector<std::pair<std::string, VisionDataset>> sets;
  for (Split s : {Split::train, Split::val, Split::test}) sets.emplace_back(std::string(to_string(s)), filter_split(clean, s));
  if (r.cfg.typographic()) {
    const auto attacked = apply_typographic_attack(clean, spec.n_classes, mc, r.cfg.attack_spec());
    for (Split s : {Split::train, Split::val, Split::test})
      sets.emplace_back("attacked_" + std::string(to_string(s)), filter_split(attacked, s));
  }
  int written = 0;
  for (const auto& [name, vd] : sets) {
    if (vd.size() == 0) continue;
    const auto acts = collect_activations(model, vd, r.threads);
    for (int l = 0; l < mc.n_layers; ++l) {
      write_shard(acts.layers[std::size_t(l)], r.shard(l, name));
      man.add_output(r.shard(l, name));
      ++written;
    }
  }
  man.set("seeds", {{"model", mc.seed}, {"data", spec.seed}, {"attack", r.cfg.attack_spec().seed}});
  man.write();
  std::printf("gen-data: %d shards (%d layers) and a %ld-row vocabulary in %s\n", written, mc.n_layers,
              static_cast<long>(vocab.size()), r.data_dir().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- train-sae

int cmd_train_sae(const Run& r) {
  auto man = r.manifest("train-sae");
  nlohmann::json summary = nlohmann::json::array();
  for (int layer : r.cfg.sae_layers()) {
    auto ds = load_shard(r, man, layer, "train");
    if (r.cfg.typographic()) ds = typographic_training_mix(ds, load_shard(r, man, layer, "attacked_train"));
    const auto tc = r.cfg.train_config(layer);
    const auto result = train(ds, tc);
    fs::create_directories(r.checkpoint(layer).parent_path());
    write_checkpoint(result.sae, r.checkpoint(layer));
    man.add_output(r.checkpoint(layer));
    result.log.write_csv(r.train_log(layer));
    man.add_output(r.train_log(layer));

    const double ev = explained_variance(ds, result.sae);
    const auto l0 = l0_stats(ds, result.sae);
    const double mean_l0 = (l0.avg_cls_l0 + l0.avg_img_l0) / static_cast<double>(ds.n_tokens());
    std::printf("train-sae layer %d: %s, %lld steps, final EV %.4f, mean L0 %.2f, live %ld/%ld\n", layer,
                r.cfg.sae.variant.c_str(), static_cast<long long>(tc.total_steps), ev, mean_l0,
                static_cast<long>(result.log.records.back().live_features), static_cast<long>(result.sae.d_sae()));
    summary.push_back({{"layer", layer}, {"explained_variance", ev}, {"mean_l0", mean_l0}});
  }
  man.set("summary", summary);
  man.write();
  return kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const Run& r, const std::string& dictionary, bool self_check) {
  auto man = r.manifest("eval");
  man.set("dictionary", dictionary);
  const auto model = make_toy_vit(r.cfg.model_config());
  const auto head = class_head(load_vocab(r, man), r.cfg.data.spec.n_classes);
  const fs::path dir = r.root / "eval";
  const int dec = std::max(r.cfg.report.decimals, 3);
  std::ostringstream table;
  table << "layer,explained_variance,avg_img_l0,avg_cls_l0,cos_sim,recon_cos_sim,ce,recon_ce,zero_abl_ce,ce_recovered\n";
  bool checks_ok = true;
  for (int layer : r.cfg.sae_layers()) {
    const auto ds = load_shard(r, man, layer, r.cfg.report.eval_split);
    const auto run = [&](const auto& dict) {
      EvalSummary s;
      s.explained_variance = explained_variance(ds, dict);
      s.l0 = l0_stats(ds, dict, r.cfg.report.l0_threshold);
      s.cosine = cosine_metrics(ds, dict);
      s.ce = ce_suite(model, dict, ds, head, r.threads);
      return s;
    };
    EvalSummary s;
    std::optional<Index> topk;
    if (dictionary == "identity") {
      s = run(identity_sae(ds.d_model()));
    } else if (dictionary == "planted") {
      s = run(planted_concept_sae(model));
    } else {
      const auto sae = load_sae(r, man, layer);
      if (const auto* tk = std::get_if<TopK>(&sae.variant)) topk = tk->k;
      s = run(sae);
      if (self_check) {
        Index max_l0 = 0;
        for (Index i = 0; i < ds.n_samples(); ++i)
          max_l0 = std::max<Index>(max_l0, (encode(sae, MatrixF(ds.sample(i))).array() > 0).rowwise().count().maxCoeff());
        if (topk) {
          const bool ok = max_l0 <= *topk;
          checks_ok = checks_ok && ok;
          std::printf("self-check layer %d: max token L0 %ld <= %ld %s\n", layer, static_cast<long>(max_l0),
                      static_cast<long>(*topk), ok ? "passed" : "FAILED");
        } else {
          std::printf("self-check layer %d: vanilla SAE, max token L0 %ld (no bound)\n", layer, static_cast<long>(max_l0));
        }
      }
    }
    const std::string stem = "L" + std::to_string(layer);
    write_text(dir / (stem + "_metrics.json"), man, [&](std::ostream& o) { o << to_json(s).dump(2) << "\n"; });
    write_text(dir / (stem + "_metrics.csv"), man, [&](std::ostream& o) { write_metrics_csv(o, s); });
    write_text(dir / (stem + "_l0_grid.csv"), man, [&](std::ostream& o) { write_grid_csv(o, s.l0.per_patch_mean); });
    const auto& ce = *s.ce;
    const std::string rec = ce.ce_recovered_pct ? fixed(*ce.ce_recovered_pct, dec) : "nan";
    table << layer << "," << fixed(s.explained_variance, 6) << "," << fixed(s.l0.avg_img_l0, dec) << ","
          << fixed(s.l0.avg_cls_l0, dec) << "," << fixed(s.cosine.token_cos, 6) << "," << fixed(s.cosine.image_cos, 6)
          << "," << fixed(ce.ce_clean, 6) << "," << fixed(ce.ce_recon, 6) << "," << fixed(ce.ce_zero_abl, 6) << ","
          << rec << "\n";
    std::printf("eval layer %d (%s): EV %.4f, img L0 %.2f, cls L0 %.2f, cos %.4f, CE rec %s\n", layer,
                dictionary.c_str(), s.explained_variance, s.l0.avg_img_l0, s.l0.avg_cls_l0, s.cosine.token_cos,
                rec.c_str());
  }
  write_text(dir / "summary.csv", man, [&](std::ostream& o) { o << table.str(); });
  man.write();
  if (!checks_ok) {
    std::fprintf(stderr, "error: self-check failed\n");
    return kExitData;
  }
  return kExitOk;
}

// ---------------------------------------------------------------- steer

int cmd_steer(const Run& r, const std::vector<Index>& feature_flag, const std::string& dictionary) {
  auto man = r.manifest("steer");
  man.set("dictionary", dictionary);
  const auto model = make_toy_vit(r.cfg.model_config());
  const auto vocab = load_vocab(r, man);
  const auto sc = r.cfg.steer_config(r.threads);
  const fs::path dir = r.root / "steer";
  std::ostringstream summary;
  summary << "layer,kind,targets,strength,average,steerable_count,steerable_proportion,concept_count,distinct_concepts\n";
  const auto summarize_row = [&](int layer, const char* kind, const std::vector<SweepReport>& sweeps,
                                 const std::string& hist_name) {
    std::vector<double> s_f;
    std::vector<Index> promoted;
    for (const auto& sw : sweeps) {
      s_f.push_back(sw.points.back().steerability);
      Index best = 0;
      sw.points.back().shift.maxCoeff(&best);
      promoted.push_back(best);
    }
    const auto lm = layer_metrics(s_f, promoted, sc.gamma, sc.beta);
    summary << layer << "," << kind << "," << sweeps.size() << "," << sc.strengths.back() << "," << lm.average << ","
            << lm.steerable_count << "," << lm.steerable_proportion << "," << lm.concept_count << ","
            << lm.distinct_concepts << "\n";
    const auto bins = log_histogram(s_f);
    write_text(dir / hist_name, man, [&](std::ostream& o) { write_histogram_csv(o, bins); });
    std::printf("steer layer %d %s: %zu targets, mean S_f %.4f, steerable %zu (%.1f%%), concepts %zu (%zu distinct)\n",
                layer, kind, sweeps.size(), lm.average, lm.steerable_count, 100.0 * lm.steerable_proportion,
                lm.concept_count, lm.distinct_concepts);
  };

  for (int layer : r.cfg.steer_layers()) {
    const auto all = load_shard(r, man, layer, "test");
    const auto images = filter_samples(all, [&, n = 0](const SampleMeta&) mutable { return n++ < r.cfg.steer.n_images; });
    const auto bench = make_steer_bench(model, vocab, images, r.threads);
    const auto sweep_features = [&](const auto& dict) {
      std::vector<Index> ids = feature_flag.empty() ? r.cfg.steer.features : feature_flag;
      if (ids.empty()) {
        ids.resize(static_cast<std::size_t>(feature_count(dict)));
        std::iota(ids.begin(), ids.end(), Index{0});
      }
      if (r.cfg.steer.max_features > 0 && static_cast<Index>(ids.size()) > r.cfg.steer.max_features)
        ids.resize(static_cast<std::size_t>(r.cfg.steer.max_features));
      for (Index j : ids)
        if (j < 0 || j >= feature_count(dict))
          throw ConfigError("feature id " + std::to_string(j) + " out of range for layer " + std::to_string(layer) +
                            " (dictionary has " + std::to_string(feature_count(dict)) + " features)");
      std::vector<SweepReport> out;
      for (Index j : ids) out.push_back(asymptotic_sweep(bench, dict, j, sc));
      for (auto& sw : out) sw.target = SaeFeature{layer, std::get<SaeFeature>(sw.target).id};
      return out;
    };
    const auto sweeps = dictionary == "planted" ? sweep_features(planted_concept_sae(model))
                                                : sweep_features(load_sae(r, man, layer));
    const std::string stem = "L" + std::to_string(layer);
    write_text(dir / (stem + "_sweep.csv"), man, [&](std::ostream& o) {
      write_sweep_csv_header(o, sc.top_k_concepts);
      for (const auto& sw : sweeps) write_sweep_csv_rows(o, sw, sc.top_k_concepts);
    });
    summarize_row(layer, "feature", sweeps, stem + "_histogram.csv");
    if (r.cfg.steer.neurons) {
      std::vector<SweepReport> ns;
      for (Index d = 0; d < model.config.d_model; ++d) ns.push_back(neuron_sweep(bench, d, sc));
      write_text(dir / (stem + "_neuron_sweep.csv"), man, [&](std::ostream& o) {
        write_sweep_csv_header(o, sc.top_k_concepts);
        for (const auto& sw : ns) write_sweep_csv_rows(o, sw, sc.top_k_concepts);
      });
      summarize_row(layer, "neuron", ns, stem + "_neuron_histogram.csv");
    }
  }
  write_text(dir / "summary.csv", man, [&](std::ostream& o) { o << summary.str(); });
  man.write();
  return kExitOk;
}

// ---------------------------------------------------------------- suppress

struct Cell {
  double value;
  double baseline;
};

std::string md_cell(const Cell& c, int decimals) {
  const std::string v = fixed(100.0 * c.value, decimals);
  // compare what is printed so a bold value never looks equal to the baseline
  const bool better = std::stod(v) > std::stod(fixed(100.0 * c.baseline, decimals));
  return better ? "**" + v + "**" : v;
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = 0, s = 0;
  for (double x : v) m += x / double(v.size());
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

int suppress_spurious(const Run& r, Manifest& man) {
  const auto model = make_toy_vit(r.cfg.model_config());
  const auto head = class_head(load_vocab(r, man), r.cfg.data.spec.n_classes);
  const auto opt = r.cfg.suppression_options(r.threads);
  const int dec = r.cfg.report.decimals;
  std::vector<SuppressionLayerResult> results;
  for (int layer : r.cfg.suppress_layers()) {
    const auto sae = load_sae(r, man, layer);
    results.push_back(run_suppression_layer(model, sae, load_shard(r, man, layer, "train"),
                                            load_shard(r, man, layer, "val"), load_shard(r, man, layer, "test"),
                                            head, opt));
  }
  const auto& base = results.front().test_baseline;
  const fs::path dir = r.root / "suppress";
  write_text(dir / "results.csv", man, [&](std::ostream& o) {
    o << "layer,method,n_features,tau,val_overall,val_worst,test_overall,test_worst\n";
    o.precision(10);
    o << "-1,baseline,0,," << results.front().strict.val_baseline.overall << ","
      << results.front().strict.val_baseline.worst << "," << base.overall << "," << base.worst << "\n";
    for (const auto& lr : results) {
      const auto row = [&](const char* name, const TauSearch& ts, const GroupAccuracy& test) {
        o << lr.layer << "," << name << "," << ts.features.size() << "," << (ts.improved ? ts.tau : 0.0) << ","
          << ts.val.overall << "," << ts.val.worst << "," << test.overall << "," << test.worst << "\n";
      };
      row("sae_strict", lr.strict, lr.strict_test);
      row("sae_relaxed", lr.relaxed, lr.relaxed_test);
      row("neuron_strict", lr.neuron, lr.neuron_test);
    }
  });
  write_text(dir / "random_control.csv", man, [&](std::ostream& o) {
    o << "layer,seed,n_features,test_overall,test_worst\n";
    o.precision(10);
    for (const auto& lr : results)
      for (std::size_t s = 0; s < lr.random_test.size(); ++s)
        o << lr.layer << "," << s << "," << lr.strict.features.size() << "," << lr.random_test[s].overall << ","
          << lr.random_test[s].worst << "\n";
  });
  write_text(dir / "table.md", man, [&](std::ostream& o) {
    o << "## Spurious attribute suppression (test split, %)\n\n"
      << "Bold: strictly above the baseline.\n\n"
      << "| Layer | Method | \\|F\\| | Overall | Worst group |\n|---|---|---|---|---|\n"
      << "| - | Baseline | 0 | " << fixed(100 * base.overall, dec) << " | " << fixed(100 * base.worst, dec) << " |\n";
    for (const auto& lr : results) {
      const auto row = [&](const char* name, const TauSearch& ts, const GroupAccuracy& g) {
        o << "| " << lr.layer << " | " << name << " | " << ts.features.size() << " | "
          << md_cell({g.overall, base.overall}, dec) << " | " << md_cell({g.worst, base.worst}, dec) << " |\n";
      };
      row("SAE strict", lr.strict, lr.strict_test);
      row("SAE relaxed", lr.relaxed, lr.relaxed_test);
      row("Neuron", lr.neuron, lr.neuron_test);
    }
    o << "\n## Random control (" << opt.random_seeds << " seeds per layer, |F| = strict SAE set size)\n\n"
      << "| Layer | Seeds | \\|F\\| | Overall mean | Overall sd | Worst mean | Worst sd |\n|---|---|---|---|---|---|---|\n";
    for (const auto& lr : results) {
      std::vector<double> ov, wo;
      for (const auto& g : lr.random_test) {
        ov.push_back(100 * g.overall);
        wo.push_back(100 * g.worst);
      }
      o << "| " << lr.layer << " | " << lr.random_test.size() << " | " << lr.strict.features.size() << " | "
        << fixed(100 * lr.random_mean_overall(), dec) << " | " << fixed(stddev(ov), dec) << " | "
        << fixed(100 * lr.random_mean_worst(), dec) << " | " << fixed(stddev(wo), dec) << " |\n";
    }
  });
  std::printf("suppress: baseline overall %.1f%%, worst %.1f%%\n", 100 * base.overall, 100 * base.worst);
  for (const auto& lr : results)
    std::printf("  layer %d: strict |F|=%zu worst %.1f%%, relaxed |F|=%zu worst %.1f%%, neuron |F|=%zu worst %.1f%%, "
                "random worst %.1f%%\n",
                lr.layer, lr.strict.features.size(), 100 * lr.strict_test.worst, lr.relaxed.features.size(),
                100 * lr.relaxed_test.worst, lr.neuron.features.size(), 100 * lr.neuron_test.worst,
                100 * lr.random_mean_worst());
  return kExitOk;
}

int suppress_typographic(const Run& r, Manifest& man) {
  const auto model = make_toy_vit(r.cfg.model_config());
  const auto head = class_head(load_vocab(r, man), r.cfg.data.spec.n_classes);
  const auto pooling = r.cfg.suppression_options(r.threads).pooling;
  const int dec = r.cfg.report.decimals;
  std::vector<std::pair<int, TypographicResult>> results;
  for (int layer : r.cfg.suppress_layers()) {
    const auto sae = load_sae(r, man, layer);
    results.emplace_back(layer, typographic_pipeline(model, sae, load_shard(r, man, layer, "train"),
                                                     load_shard(r, man, layer, "attacked_train"),
                                                     load_shard(r, man, layer, "test"),
                                                     load_shard(r, man, layer, "attacked_test"), head,
                                                     r.cfg.suppress.typographic_tau, r.cfg.suppress.typographic_lambda,
                                                     pooling, r.threads));
  }
  const fs::path dir = r.root / "suppress";
  write_text(dir / "typographic.csv", man, [&](std::ostream& o) {
    o << "layer,base_features,expanded_features,attacked_before,attacked_after,clean_before,clean_after\n";
    o.precision(10);
    for (const auto& [layer, t] : results)
      o << layer << "," << t.base.size() << "," << t.expanded.size() << "," << t.attacked_before.overall << ","
        << t.attacked_after.overall << "," << t.clean_before.overall << "," << t.clean_after.overall << "\n";
  });
  write_text(dir / "typographic.md", man, [&](std::ostream& o) {
    o << "## Typographic attack suppression (test split accuracy, %)\n\n"
      << "tau = " << r.cfg.suppress.typographic_tau << ", lambda = " << r.cfg.suppress.typographic_lambda
      << ". Bold: strictly above the unedited model on the same data.\n\n"
      << "| Layer | \\|F\\| | \\|F expanded\\| | Attacked before | Attacked after | Clean before | Clean after |\n"
      << "|---|---|---|---|---|---|---|\n";
    for (const auto& [layer, t] : results)
      o << "| " << layer << " | " << t.base.size() << " | " << t.expanded.size() << " | "
        << fixed(100 * t.attacked_before.overall, dec) << " | "
        << md_cell({t.attacked_after.overall, t.attacked_before.overall}, dec) << " | "
        << fixed(100 * t.clean_before.overall, dec) << " | "
        << md_cell({t.clean_after.overall, t.clean_before.overall}, dec) << " |\n";
  });
  for (const auto& [layer, t] : results)
    std::printf("suppress layer %d: |F| %zu -> %zu, attacked %.1f%% -> %.1f%%, clean %.1f%% -> %.1f%%\n", layer,
                t.base.size(), t.expanded.size(), 100 * t.attacked_before.overall, 100 * t.attacked_after.overall,
                100 * t.clean_before.overall, 100 * t.clean_after.overall);
  return kExitOk;
}

int cmd_suppress(const Run& r) {
  auto man = r.manifest("suppress");
  const int rc = r.cfg.typographic() ? suppress_typographic(r, man) : suppress_spurious(r, man);
  man.write();
  return rc;
}

// ---------------------------------------------------------------- main

int resolve_threads(int flag, bool flag_set, const RunConfig& cfg, bool deterministic) {
  if (deterministic) return 1;
  int t = cfg.threads;
  if (flag_set) {
    t = flag;
  } else if (const char* env = std::getenv("SAE_LAB_THREADS"); env && *env) {
    try {
      std::size_t used = 0;
      t = std::stoi(env, &used);
      if (used != std::strlen(env)) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("SAE_LAB_THREADS is not an integer: '") + env + "'");
    }
  }
  if (t < 1) throw ConfigError("thread count must be >= 1, got " + std::to_string(t));
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saelab: sparse autoencoders on a toy vision transformer"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = false;
  app.add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  auto* out_opt = app.add_option("--out-dir", out_dir, "override the config out_dir");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (fallback: SAE_LAB_THREADS)");
  app.add_flag("--deterministic", deterministic, "single-threaded, overrides --threads");

  auto* gen = app.add_subcommand("gen-data", "run the toy model and write activation shards + vocabulary head");
  auto* trn = app.add_subcommand("train-sae", "train one SAE per configured layer");
  std::string variant;
  bool resume = false;
  trn->add_option("--variant", variant, "vanilla or topk")->check(CLI::IsMember({"vanilla", "topk"}));
  trn->add_flag("--resume", resume, "resume from an existing checkpoint (not supported)");
  auto* ev = app.add_subcommand("eval", "explained variance, L0, cosine and CE metrics");
  std::string eval_dict = "trained";
  bool self_check = false;
  ev->add_option("--dictionary", eval_dict, "trained, identity or planted")
      ->check(CLI::IsMember({"trained", "identity", "planted"}));
  ev->add_flag("--self-check", self_check, "fail if a TopK SAE ever exceeds k active features");
  auto* st = app.add_subcommand("steer", "asymptotic steering sweeps for features and neurons");
  std::vector<Index> features;
  std::string steer_dict;
  st->add_option("--features", features, "comma separated feature ids (overrides steer.features)")->delimiter(',');
  st->add_option("--dictionary", steer_dict, "trained or planted")->check(CLI::IsMember({"trained", "planted"}));
  auto* sup = app.add_subcommand("suppress", "feature suppression tables (spurious or typographic task)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    Run r;
    r.cfg = config_path.empty() ? parse_config(nlohmann::json::object()) : load_config(config_path);
    if (seed_opt->count()) r.cfg.seed = seed;
    if (out_opt->count()) r.cfg.out_dir = out_dir;
    if (!variant.empty()) r.cfg.sae.variant = variant;
    if (!steer_dict.empty()) r.cfg.steer.dictionary = steer_dict;
    r.cfg.validate();
    r.threads = resolve_threads(threads, threads_opt->count() > 0, r.cfg, deterministic);
    r.root = r.cfg.out_dir;

    if (gen->parsed()) return cmd_gen_data(r);
    if (trn->parsed()) {
      if (resume)
        throw ConfigError("--resume is not supported: SAE training always starts from a fresh initialisation; "
                          "remove the flag to retrain");
      return cmd_train_sae(r);
    }
    if (ev->parsed()) return cmd_eval(r, eval_dict, self_check);
    if (st->parsed()) return cmd_steer(r, features, r.cfg.steer.dictionary);
    if (sup->parsed()) return cmd_suppress(r);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitOk;
}
