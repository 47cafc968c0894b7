// Command-line front end: dataset generation, training, evaluation,
// ablation sweeps, and a finite-difference gradient check.

#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nir/experiment.hpp"

namespace {

int exit_code_for(nir::ErrorCode code) {
  switch (code) {
    case nir::ErrorCode::ConfigError:
    case nir::ErrorCode::InvalidSpec:
      return 2;
    case nir::ErrorCode::IoError:
    case nir::ErrorCode::VersionMismatch:
      return 3;
    case nir::ErrorCode::NonFiniteGradient:
    case nir::ErrorCode::NonFiniteLoss:
    case nir::ErrorCode::DegenerateSpectrum:
      return 5;
    default:
      return 4;
  }
}

std::string default_outdir() {
  const char* env = std::getenv("NIR_OUTDIR");
  return env && *env ? env : ".";
}

std::map<std::string, std::string> overrides_from_sets(
    const std::vector<std::string>& sets) {
  std::map<std::string, std::string> kv;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    nir::require(eq != std::string::npos, nir::ErrorCode::ConfigError,
                 "--set expects key=value, got: " + s);
    kv[nir::detail::trim(s.substr(0, eq))] = nir::detail::trim(s.substr(eq + 1));
  }
  return kv;
}

nir::ExperimentConfig resolve_config(const std::string& config_path,
                                     const std::map<std::string, std::string>& cli) {
  nir::ExperimentConfig cfg;
  if (!config_path.empty()) nir::apply_config(cfg, nir::parse_config_file(config_path));
  nir::apply_config(cfg, cli);
  return cfg;
}

void print_metrics(const char* split, const nir::MetricsReport& m) {
  for (const auto& [k, v] : m.recall_at)
    std::printf("%s.r%d = %.6f\n", split, k, v);
  std::printf("%s.nmi = %.6f\n", split, m.nmi);
  std::printf("%s.map = %.6f\n", split, m.map_at_1000);
  std::printf("%s.rho = %.6f\n", split, m.spectral_decay);
  std::printf("%s.pi = %.6f\n", split, m.pi_density);
  std::printf("%s.g2 = %.6f\n", split, m.uniformity_g2);
  std::printf("%s.var = %.6f\n", split, m.concentration_variance);
}

int cmd_gen_data(const nir::SyntheticSpec& spec, const std::string& outdir,
                 const std::string& train_file, const std::string& test_file) {
  nir::Benchmark bench = nir::make_benchmark(spec);
  std::filesystem::create_directories(outdir);
  nir::write_table(outdir + "/" + train_file, bench.train, "train");
  nir::write_table(outdir + "/" + test_file, bench.test, "test");
  std::printf("wrote %s/%s (%d rows) and %s/%s (%d rows), dim %d\n",
              outdir.c_str(), train_file.c_str(), bench.train.size(),
              outdir.c_str(), test_file.c_str(), bench.test.size(),
              bench.train.dim());
  return 0;
}

int cmd_train(const nir::ExperimentConfig& cfg, const std::string& outdir) {
  const nir::RunRecord rec = nir::run_experiment(cfg, outdir);
  const std::string record_path = outdir + "/" + cfg.tag + "_record.txt";
  nir::write_text_file(record_path, nir::format_run_record(rec));
  std::printf("record: %s\ncheckpoint: %s/%s\n", record_path.c_str(),
              outdir.c_str(), rec.checkpoint_file.c_str());
  print_metrics("final.test", rec.final_test);
  std::printf("time.total = %.2fs\n", rec.total_seconds);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             const std::string& out_path, std::uint64_t nmi_seed) {
  const nir::Model model = nir::deserialize_model(nir::read_blob(checkpoint));
  nir::RawDataset ds = nir::read_table(data_path);
  nir::compact_dataset_labels(ds);
  const nir::EmbeddingBatch batch{model.embedder.embed(ds.features), ds.labels};
  const nir::MetricsReport m = nir::evaluate_all(batch, {1, 2, 4, 8}, nmi_seed);
  print_metrics("eval", m);
  if (!out_path.empty()) {
    std::string text;
    nir::detail::append_metrics(text, "eval", m);
    nir::write_text_file(out_path, text);
  }
  return 0;
}

int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& sets,
               const std::vector<std::string>& sweeps,
               const std::string& outdir, const std::string& tag) {
  std::map<std::string, std::string> base;
  if (!config_path.empty()) base = nir::parse_config_file(config_path);
  for (const auto& [k, v] : overrides_from_sets(sets)) base[k] = v;
  {
    nir::ExperimentConfig probe;  // validate keys before launching runs
    nir::apply_config(probe, base);
  }
  std::vector<nir::SweepAxis> axes;
  for (const auto& s : sweeps) {
    const auto eq = s.find('=');
    nir::require(eq != std::string::npos, nir::ErrorCode::ConfigError,
                 "--sweep expects key=v1,v2,..., got: " + s);
    nir::SweepAxis ax;
    ax.key = nir::detail::trim(s.substr(0, eq));
    std::string rest = s.substr(eq + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto comma = rest.find(',', pos);
      ax.values.push_back(nir::detail::trim(rest.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    axes.push_back(std::move(ax));
  }
  const nir::AblationResult result = nir::run_ablation(base, axes, outdir, tag);
  std::printf("%zu runs -> %s/%s and %s/%s\n", result.runs.size(),
              outdir.c_str(), result.metrics_csv.c_str(), outdir.c_str(),
              result.summary_csv.c_str());
  std::printf("%s", nir::read_text_file(outdir + "/" + result.summary_csv).c_str());
  return 0;
}

int cmd_gradcheck(const nir::ExperimentConfig& cfg, int n, int feature_dim,
                  int num_classes, double step, int coords, double threshold,
                  std::uint64_t seed) {
  nir::Rng rng(seed);
  const nir::Matrix features = nir::gaussian_matrix(n, feature_dim, rng);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % num_classes;

  nir::ExperimentConfig gc = cfg;
  if (gc.flow.final_init_scale == 0.0) gc.flow.final_init_scale = 0.1;
  nir::Model model = nir::build_model(gc, feature_dim, num_classes);
  const double rel = nir::model_grad_check(model, features, labels,
                                           gc.train.loss, gc.train.nir,
                                           /*neg_seed=*/1, /*synth_seed=*/2,
                                           step, coords, seed);
  std::printf("max relative gradient error: %.3e (threshold %.3e)\n", rel,
              threshold);
  if (!(rel < threshold)) {
    std::fprintf(stderr, "error [numeric]: gradient check failed\n");
    return 5;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"non-isotropy regularized proxy metric learning"};
  app.require_subcommand(1);

  std::string outdir = default_outdir();
  app.add_option("--outdir", outdir, "output directory (default $NIR_OUTDIR or .)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  nir::SyntheticSpec spec;
  std::string train_file = "train.txt", test_file = "test.txt";
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--per-class", spec.samples_per_class);
  gen->add_option("--ambient-dim", spec.ambient_dim);
  gen->add_option("--sphere-dim", spec.sphere_dim);
  gen->add_option("--submodes", spec.submodes_per_class);
  gen->add_option("--kappa", spec.within_submode_kappa);
  gen->add_option("--spread", spec.submode_spread);
  gen->add_option("--noise", spec.noise);
  gen->add_option("--split", spec.split);
  gen->add_option("--seed", spec.seed);
  gen->add_option("--train-file", train_file);
  gen->add_option("--test-file", test_file);

  // train
  auto* tr = app.add_subcommand("train", "train a model and write a run record");
  std::string config_path;
  std::vector<std::string> sets;
  tr->add_option("--config", config_path, "config file (key = value lines)");
  tr->add_option("--set", sets, "override, key=value (repeatable)")->take_all();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ckpt_path, data_path, metrics_out;
  std::uint64_t nmi_seed = 0;
  ev->add_option("--checkpoint", ckpt_path)->required();
  ev->add_option("--data", data_path)->required();
  ev->add_option("--out", metrics_out, "also write metrics to this file");
  ev->add_option("--nmi-seed", nmi_seed);

  // ablate
  auto* ab = app.add_subcommand("ablate", "sweep config values and aggregate");
  std::string ab_config, ab_tag = "ablate";
  std::vector<std::string> ab_sets, ab_sweeps;
  ab->add_option("--config", ab_config);
  ab->add_option("--set", ab_sets)->take_all();
  ab->add_option("--sweep", ab_sweeps, "key=v1,v2,... (repeatable)")->take_all();
  ab->add_option("--tag", ab_tag);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference check of the full objective");
  std::string gc_config;
  std::vector<std::string> gc_sets;
  int gc_n = 8, gc_feature_dim = 12, gc_classes = 4, gc_coords = 200;
  double gc_step = 1e-5, gc_threshold = 1e-4;
  std::uint64_t gc_seed = 0;
  gc->add_option("--config", gc_config);
  gc->add_option("--set", gc_sets)->take_all();
  gc->add_option("--n", gc_n, "batch size");
  gc->add_option("--feature-dim", gc_feature_dim);
  gc->add_option("--classes", gc_classes);
  gc->add_option("--step", gc_step);
  gc->add_option("--coords", gc_coords, "sampled coordinates per group");
  gc->add_option("--threshold", gc_threshold);
  gc->add_option("--seed", gc_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(spec, outdir, train_file, test_file);
    if (tr->parsed())
      return cmd_train(resolve_config(config_path, overrides_from_sets(sets)),
                       outdir);
    if (ev->parsed()) return cmd_eval(ckpt_path, data_path, metrics_out, nmi_seed);
    if (ab->parsed()) return cmd_ablate(ab_config, ab_sets, ab_sweeps, outdir, ab_tag);
    if (gc->parsed()) {
      nir::ExperimentConfig cfg =
          resolve_config(gc_config, overrides_from_sets(gc_sets));
      cfg.embed_dim = std::min(cfg.embed_dim, 8);
      cfg.flow.dim = cfg.embed_dim;
      cfg.flow.depth = std::min(cfg.flow.depth, 2);
      cfg.flow.width = std::min(cfg.flow.width, 16);
      return cmd_gradcheck(cfg, gc_n, gc_feature_dim, gc_classes, gc_step,
                           gc_coords, gc_threshold, gc_seed);
    }
  } catch (const nir::Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", nir::error_name(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error [internal]: %s\n", e.what());
    return 1;
  }
  return 1;
}
