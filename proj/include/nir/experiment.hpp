#pragma once

// Experiment orchestration: the flat dotted-key config schema with defaults,
// dataset-driven model construction, full runs emitting self-reproducing
// run records plus checkpoints, and Cartesian ablation sweeps with CSV output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nir/checkpoint.hpp"
#include "nir/metrics.hpp"
#include "nir/model.hpp"
#include "nir/synthetic.hpp"
#include "nir/trainer.hpp"

namespace nir {

struct ExperimentConfig {
  std::string train_path = "train.txt";
  std::string test_path = "test.txt";
  int embed_dim = 16;
  int hidden = 64;
  FlowConfig flow{.dim = 16, .depth = 8, .width = 64};
  TrainConfig train;
  std::uint64_t nmi_seed = 0;
  std::string tag = "run";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  require(end && *end == '\0' && !v.empty(), ErrorCode::ConfigError,
          "config key '" + key + "': not a number: " + v);
  return x;
}

inline int parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long x = std::strtol(v.c_str(), &end, 10);
  require(end && *end == '\0' && !v.empty(), ErrorCode::ConfigError,
          "config key '" + key + "': not an integer: " + v);
  return static_cast<int>(x);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  require(end && *end == '\0' && !v.empty(), ErrorCode::ConfigError,
          "config key '" + key + "': not an unsigned integer: " + v);
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  fail(ErrorCode::ConfigError, "config key '" + key + "': not a boolean: " + v);
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

}  // namespace detail

struct ConfigEntry {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<ConfigEntry>& config_schema() {
  using detail::fmt;
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  using detail::parse_u64;
  static const std::vector<ConfigEntry> schema = [] {
    std::vector<ConfigEntry> s;
    auto add = [&s](const std::string& key, auto setter, auto getter) {
      s.push_back({key,
                   [key, setter](ExperimentConfig& c, const std::string& v) {
                     setter(c, key, v);
                   },
                   getter});
    };
    add("data.train",
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.train_path = v; },
        [](const ExperimentConfig& c) { return c.train_path; });
    add("data.test",
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.test_path = v; },
        [](const ExperimentConfig& c) { return c.test_path; });
    add("model.embed_dim",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.embed_dim = parse_int(k, v);
          c.flow.dim = c.embed_dim;
        },
        [](const ExperimentConfig& c) { return fmt(c.embed_dim); });
    add("model.hidden",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.hidden = parse_int(k, v); },
        [](const ExperimentConfig& c) { return fmt(c.hidden); });
    add("flow.depth",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.flow.depth = parse_int(k, v); },
        [](const ExperimentConfig& c) { return fmt(c.flow.depth); });
    add("flow.width",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.flow.width = parse_int(k, v); },
        [](const ExperimentConfig& c) { return fmt(c.flow.width); });
    add("flow.placement",
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.flow.placement = placement_from_string(v);
        },
        [](const ExperimentConfig& c) { return to_string(c.flow.placement); });
    add("flow.clamp_scale",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.flow.clamp_scale = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.flow.clamp_scale); });
    add("flow.perm_seed",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.flow.perm_seed = parse_u64(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.flow.perm_seed); });
    add("flow.final_init_scale",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.flow.final_init_scale = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.flow.final_init_scale); });
    add("loss.kind",
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.train.loss.kind = loss_kind_from_string(v);
        },
        [](const ExperimentConfig& c) { return to_string(c.train.loss.kind); });
    add("loss.alpha",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.loss.anchor.alpha = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.loss.anchor.alpha); });
    add("loss.delta",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.loss.anchor.delta = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.loss.anchor.delta); });
    add("nir.enabled",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.enabled = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.enabled); });
    add("nir.omega",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.omega = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.omega); });
    add("nir.scaling",
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.train.nir.scaling = scaling_from_string(v);
        },
        [](const ExperimentConfig& c) { return to_string(c.train.nir.scaling); });
    add("nir.temperature",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.temperature = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.temperature); });
    add("nir.clamp",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.nir_exponent_clamp = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.nir_exponent_clamp); });
    add("nir.proxy_backprop",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.proxy_backprop = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.proxy_backprop); });
    add("nir.negative_pairs",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.negative_pairs = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.negative_pairs); });
    add("nir.lambda_neg",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.lambda_neg = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.lambda_neg); });
    add("nir.grad_clip",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.grad_clip = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.grad_clip); });
    add("nir.self_reg",
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.train.nir.self_reg = self_reg_from_string(v);
        },
        [](const ExperimentConfig& c) { return to_string(c.train.nir.self_reg); });
    add("nir.self_reg_per_class",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.nir.self_reg_per_class = parse_int(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.nir.self_reg_per_class); });
    add("train.epochs",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.epochs = parse_int(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.epochs); });
    add("train.classes_per_batch",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.classes_per_batch = parse_int(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.classes_per_batch); });
    add("train.samples_per_class",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.samples_per_class = parse_int(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.samples_per_class); });
    add("train.warmup_epochs",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.warmup_epochs = parse_int(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.warmup_epochs); });
    add("train.seed",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.seed = parse_u64(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.seed); });
    add("train.eval_every_epoch",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.eval_every_epoch = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.eval_every_epoch); });
    add("train.base_lr",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.adam.base_lr = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.adam.base_lr); });
    add("train.weight_decay",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.adam.weight_decay = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.adam.weight_decay); });
    add("train.beta1",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.adam.beta1 = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.adam.beta1); });
    add("train.beta2",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.adam.beta2 = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.adam.beta2); });
    add("train.eps",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.adam.eps = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.adam.eps); });
    add("train.proxy_lr_mult",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.proxy_lr_mult = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.proxy_lr_mult); });
    add("train.flow_lr_mult",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.flow_lr_mult = parse_double(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.flow_lr_mult); });
    add("train.weight_decay_proxies",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.weight_decay_proxies = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.weight_decay_proxies); });
    add("train.weight_decay_flow",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.train.weight_decay_flow = parse_bool(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.train.weight_decay_flow); });
    add("eval.nmi_seed",
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.nmi_seed = parse_u64(k, v);
        },
        [](const ExperimentConfig& c) { return fmt(c.nmi_seed); });
    add("out.tag",
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.tag = v; },
        [](const ExperimentConfig& c) { return c.tag; });
    return s;
  }();
  return schema;
}

// Applies key/value pairs over the current config; unknown keys are hard
// errors. Call once with the file contents, then again with CLI overrides.
inline void apply_config(ExperimentConfig& cfg,
                         const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    const auto& schema = config_schema();
    const auto it = std::find_if(schema.begin(), schema.end(),
                                 [&](const ConfigEntry& e) { return e.key == key; });
    require(it != schema.end(), ErrorCode::ConfigError,
            "unknown config key: " + key);
    it->set(cfg, value);
  }
}

inline std::vector<std::pair<std::string, std::string>> dump_config(
    const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : config_schema()) out.emplace_back(e.key, e.get(cfg));
  return out;
}

// `key = value` lines; '#' lines and blank lines are skipped.
inline std::map<std::string, std::string> parse_config_text(
    const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = text.substr(
        pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::ConfigError,
            origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), ErrorCode::ConfigError,
            origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

inline std::map<std::string, std::string> parse_config_file(
    const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, ErrorCode::IoError, "cannot open config: " + path);
  std::string text;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, n);
  std::fclose(f);
  return parse_config_text(text, path);
}

// Remaps arbitrary integer labels onto 0..C-1 by ascending value.
inline void compact_dataset_labels(RawDataset& ds) {
  std::set<int> uniq(ds.labels.begin(), ds.labels.end());
  std::map<int, int> remap;
  for (int v : uniq) remap.emplace(v, static_cast<int>(remap.size()));
  for (auto& y : ds.labels) y = remap.at(y);
}

inline Model build_model(const ExperimentConfig& cfg, int feature_dim,
                         int num_classes) {
  Model model;
  Rng embed_rng(cfg.train.seed + 101);
  model.embedder = Embedder(feature_dim, cfg.hidden, cfg.embed_dim, embed_rng);
  model.proxies = ProxySet::random(num_classes, cfg.embed_dim,
                                   cfg.train.seed + 202);
  FlowConfig fc = cfg.flow;
  fc.dim = cfg.embed_dim;
  Rng flow_rng(cfg.train.seed + 303);
  model.flow = ConditionalFlow(fc, flow_rng);
  return model;
}

struct RunRecord {
  std::vector<std::pair<std::string, std::string>> config;
  TrainLog log;
  MetricsReport final_train, final_test;
  std::string checkpoint_file;
  std::uint64_t checkpoint_checksum = 0;
  double total_seconds = 0.0;
};

namespace detail {

inline void append_metrics(std::string& out, const std::string& prefix,
                           const MetricsReport& m) {
  for (const auto& [k, v] : m.recall_at)
    out += prefix + ".r" + std::to_string(k) + " = " + fmt(v) + "\n";
  out += prefix + ".nmi = " + fmt(m.nmi) + "\n";
  out += prefix + ".map = " + fmt(m.map_at_1000) + "\n";
  out += prefix + ".rho = " + fmt(m.spectral_decay) + "\n";
  out += prefix + ".pi = " + fmt(m.pi_density) + "\n";
  out += prefix + ".g2 = " + fmt(m.uniformity_g2) + "\n";
  out += prefix + ".var = " + fmt(m.concentration_variance) + "\n";
}

}  // namespace detail

inline std::string format_run_record(const RunRecord& rec) {
  using detail::fmt;
  std::string out = "nir-run-record v1\n";
  for (const auto& [k, v] : rec.config) out += "config." + k + " = " + v + "\n";
  for (const auto& e : rec.log.epochs) {
    out += "epoch " + std::to_string(e.epoch) + " value=" + fmt(e.mean_value) +
           " nir=" + fmt(e.mean_nir) + " fnir=" + fmt(e.mean_scaled_nir) +
           " dml=" + fmt(e.mean_dml) + " neg=" + fmt(e.mean_neg_pair) +
           " selfreg=" + fmt(e.mean_self_reg) + " gnorm=" + fmt(e.mean_grad_norm);
    if (e.has_test) {
      out += " test_r1=" + fmt(e.test.recall_at.count(1) ? e.test.recall_at.at(1) : 0.0);
      out += " test_rho=" + fmt(e.test.spectral_decay);
      out += " test_nmi=" + fmt(e.test.nmi);
    }
    out += "\n";
    out += "time.epoch." + std::to_string(e.epoch) + " = " +
           fmt(e.wall_seconds) + "\n";
  }
  out += "steps = " + std::to_string(rec.log.total_steps) + "\n";
  detail::append_metrics(out, "final.train", rec.final_train);
  detail::append_metrics(out, "final.test", rec.final_test);
  out += "artifact.checkpoint = " + rec.checkpoint_file + "\n";
  out += "artifact.checksum = " + std::to_string(rec.checkpoint_checksum) + "\n";
  out += "time.total = " + fmt(rec.total_seconds) + "\n";
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, ErrorCode::IoError, "cannot open for writing: " + path);
  const std::size_t n = std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
  require(n == text.size(), ErrorCode::IoError, "short write: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, ErrorCode::IoError, "cannot open for reading: " + path);
  std::string text;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, n);
  std::fclose(f);
  return text;
}

// The embedded `config.*` lines of a stored run record, ready to re-apply.
inline std::map<std::string, std::string> config_from_run_record(
    const std::string& path) {
  const std::string text = read_text_file(path);
  std::map<std::string, std::string> kv;
  for (const auto& [key, value] : parse_config_text(
           [&] {
             std::string filtered;
             std::size_t pos = 0;
             while (pos < text.size()) {
               const auto nl = text.find('\n', pos);
               const std::string line =
                   text.substr(pos, nl == std::string::npos ? std::string::npos
                                                            : nl - pos);
               pos = nl == std::string::npos ? text.size() : nl + 1;
               if (line.rfind("config.", 0) == 0)
                 filtered += line.substr(7) + "\n";
             }
             return filtered;
           }(),
           path))
    kv[key] = value;
  return kv;
}

// Trains per the config, checkpoints the model (parameters rounded to the
// stored 32-bit precision first so re-evaluation reproduces the final
// metrics exactly), and evaluates both splits from the reloaded model.
inline RunRecord run_experiment(const ExperimentConfig& cfg,
                                const std::string& outdir) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(outdir);

  RawDataset train_set = read_table(cfg.train_path);
  RawDataset test_set = read_table(cfg.test_path);
  compact_dataset_labels(train_set);
  compact_dataset_labels(test_set);
  const int num_classes =
      1 + *std::max_element(train_set.labels.begin(), train_set.labels.end());

  Model model = build_model(cfg, train_set.dim(), num_classes);

  RunRecord rec;
  rec.config = dump_config(cfg);
  rec.log = train(train_set, &test_set, model, cfg.train);

  const std::vector<unsigned char> blob = [&] {
    round_trip_f32(model);
    return serialize_model(model);
  }();
  rec.checkpoint_file = cfg.tag + "_model.ckpt";
  write_blob(outdir + "/" + rec.checkpoint_file, blob);
  rec.checkpoint_checksum = fnv1a64(blob.data(), blob.size());

  const EmbeddingBatch tr{model.embedder.embed(train_set.features),
                          train_set.labels};
  const EmbeddingBatch te{model.embedder.embed(test_set.features),
                          test_set.labels};
  rec.final_train = evaluate_all(tr, {1, 2, 4, 8}, cfg.nmi_seed);
  rec.final_test = evaluate_all(te, {1, 2, 4, 8}, cfg.nmi_seed);

  rec.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rec;
}

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

struct AblationRun {
  std::map<std::string, std::string> overrides;
  RunRecord record;
  std::string record_file;
};

struct AblationResult {
  std::vector<SweepAxis> axes;
  std::vector<AblationRun> runs;
  std::string metrics_csv;
  std::string summary_csv;
};

namespace detail {

inline double final_r1(const RunRecord& r) {
  return r.final_test.recall_at.count(1) ? r.final_test.recall_at.at(1) : 0.0;
}

}  // namespace detail

// Cartesian sweep over the axes applied on top of the base overrides. Each
// point becomes its own run record; metrics.csv has one row per run and
// summary.csv aggregates (mean, sample std) over train.seed within each
// combination of the remaining axes.
inline AblationResult run_ablation(
    const std::map<std::string, std::string>& base,
    const std::vector<SweepAxis>& axes, const std::string& outdir,
    const std::string& tag) {
  require(!axes.empty(), ErrorCode::ConfigError, "ablation needs sweep axes");
  for (const auto& ax : axes)
    require(!ax.values.empty(), ErrorCode::ConfigError,
            "sweep axis '" + ax.key + "' has no values");
  std::filesystem::create_directories(outdir);

  AblationResult result;
  result.axes = axes;

  std::vector<std::size_t> idx(axes.size(), 0);
  int run_no = 0;
  for (;;) {
    AblationRun run;
    run.overrides = base;
    for (std::size_t a = 0; a < axes.size(); ++a)
      run.overrides[axes[a].key] = axes[a].values[idx[a]];

    ExperimentConfig cfg;
    apply_config(cfg, run.overrides);
    cfg.tag = tag + "_" + std::to_string(run_no);
    run.overrides["out.tag"] = cfg.tag;
    run.record = run_experiment(cfg, outdir);
    run.record_file = cfg.tag + "_record.txt";
    write_text_file(outdir + "/" + run.record_file,
                    format_run_record(run.record));
    result.runs.push_back(std::move(run));
    ++run_no;

    std::size_t a = 0;
    for (; a < axes.size(); ++a) {
      if (++idx[a] < axes[a].values.size()) break;
      idx[a] = 0;
    }
    if (a == axes.size()) break;
  }

  // per-run metrics table
  std::string csv = "run";
  for (const auto& ax : axes) csv += "," + ax.key;
  csv += ",test_r1,test_nmi,test_map,test_rho,test_pi,test_g2,test_var,train_r1\n";
  for (std::size_t r = 0; r < result.runs.size(); ++r) {
    const auto& run = result.runs[r];
    csv += std::to_string(r);
    for (const auto& ax : axes) csv += "," + run.overrides.at(ax.key);
    const auto& m = run.record.final_test;
    csv += "," + detail::fmt(detail::final_r1(run.record));
    csv += "," + detail::fmt(m.nmi);
    csv += "," + detail::fmt(m.map_at_1000);
    csv += "," + detail::fmt(m.spectral_decay);
    csv += "," + detail::fmt(m.pi_density);
    csv += "," + detail::fmt(m.uniformity_g2);
    csv += "," + detail::fmt(m.concentration_variance);
    csv += "," + detail::fmt(run.record.final_train.recall_at.count(1)
                                 ? run.record.final_train.recall_at.at(1)
                                 : 0.0);
    csv += "\n";
  }
  result.metrics_csv = tag + "_metrics.csv";
  write_text_file(outdir + "/" + result.metrics_csv, csv);

  // summary over seeds: group by every axis except train.seed
  std::map<std::string, std::vector<const AblationRun*>> groups;
  for (const auto& run : result.runs) {
    std::string key;
    for (const auto& ax : axes)
      if (ax.key != "train.seed") key += ax.key + "=" + run.overrides.at(ax.key) + ";";
    groups[key].push_back(&run);
  }
  std::string summary = "group,n,mean_test_r1,std_test_r1,mean_test_rho,std_test_rho\n";
  for (const auto& [key, runs] : groups) {
    const int n = static_cast<int>(runs.size());
    double mr = 0.0, mrho = 0.0;
    for (const auto* run : runs) {
      mr += detail::final_r1(run->record);
      mrho += run->record.final_test.spectral_decay;
    }
    mr /= n;
    mrho /= n;
    double vr = 0.0, vrho = 0.0;
    for (const auto* run : runs) {
      vr += std::pow(detail::final_r1(run->record) - mr, 2);
      vrho += std::pow(run->record.final_test.spectral_decay - mrho, 2);
    }
    const double sr = n > 1 ? std::sqrt(vr / (n - 1)) : 0.0;
    const double srho = n > 1 ? std::sqrt(vrho / (n - 1)) : 0.0;
    summary += (key.empty() ? "all" : key) + "," + std::to_string(n) + "," +
               detail::fmt(mr) + "," + detail::fmt(sr) + "," +
               detail::fmt(mrho) + "," + detail::fmt(srho) + "\n";
  }
  result.summary_csv = tag + "_summary.csv";
  write_text_file(outdir + "/" + result.summary_csv, summary);
  return result;
}

}  // namespace nir
