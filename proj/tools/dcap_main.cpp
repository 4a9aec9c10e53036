// dcap: command-line entry point.
//
//   dcap <verb> [--config FILE] [--set section.key=value]... [--seed N] [--out DIR] ...
//
// Exit status: 0 success, 1 runtime failure, 2 configuration error,
// 3 selftest failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dcap/analysis.hpp"
#include "dcap/errors.hpp"
#include "dcap/pipeline.hpp"
#include "dcap/selftest.hpp"

#ifndef DCAP_VERSION
#define DCAP_VERSION "unknown"
#endif

using namespace dcap;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct SelftestFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string init;
  std::string cache;
  std::string target_dir;
  std::string split = "meta-test";
  std::size_t per_class = 5;
  std::size_t extent = 64;
  bool quick = false;
};

/// Owns one command's output directory and records what it writes.
class Run {
 public:
  Run(std::string verb, RunConfig cfg, const Options& opt) : verb_(std::move(verb)), cfg_(std::move(cfg)), opt_(opt) {}

  const RunConfig& cfg() const { return cfg_; }
  fs::path dir() const { return cfg_.output_dir; }

  void begin() { fs::create_directories(dir()); }

  fs::path write(const std::string& name, const std::string& bytes) {
    const fs::path p = dir() / name;
    std::ofstream out(p, std::ios::binary);
    out << bytes;
    if (!out) throw IngestError(p.string(), "cannot write");
    track(name);
    return p;
  }

  void track(const std::string& name) { outputs_.push_back(name); }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void finish() {
    json m;
    m["verb"] = verb_;
    m["version"] = DCAP_VERSION;
    m["config_file"] = opt_.config_path;
    m["overrides"] = opt_.overrides;
    m["seed"] = cfg_.seed;
    m["threads"] = cfg_.threads;
    m["config_digest"] = cfg_.digest();
    m["config"] = cfg_.serialize();
    json outs = json::object();
    for (const std::string& name : outputs_) outs[name] = hex64(fnv1a(read_file(dir() / name)));
    m["outputs"] = outs;
    for (auto& [k, v] : extra_.items()) m[k] = v;
    std::ofstream(dir() / "manifest.json") << m.dump(2) << '\n';
  }

 private:
  std::string verb_;
  RunConfig cfg_;
  const Options& opt_;
  std::vector<std::string> outputs_;
  json extra_ = json::object();
};

ProgressFn stderr_progress() {
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = opt.config_path.empty() ? RunConfig{} : load_config_file(opt.config_path);
  for (const std::string& o : opt.overrides) cfg.apply_override(o);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  cfg.threads = env_threads();
  cfg.validate();
  return cfg;
}

Checkpoint load_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  return Checkpoint::load(path);
}

void cmd_synth_data(Run& run) {
  const Dataset ds = load_dataset(run.cfg());
  const fs::path root = run.dir() / "images";
  export_image_dir(ds, root.string());
  run.note("dataset_digest", hex64(ds.digest()));
  run.note("images", ds.size());
  std::cout << "wrote " << ds.size() << " images to " << root.string() << '\n';
}

void cmd_pretrain(Run& run) {
  const Dataset ds = load_dataset(run.cfg());
  const Checkpoint ck = pretrain(run.cfg(), ds, stderr_progress());
  ck.save((run.dir() / "pretrained.ckpt").string());
  run.track("pretrained.ckpt");
  std::string csv = "metric,step,value\n";
  for (const MetricRecord& m : ck.history) csv += m.name + "," + std::to_string(m.step) + "," + std::to_string(m.value) + "\n";
  run.write("pretrain_history.csv", csv);
  run.note("dataset_digest", hex64(ds.digest()));
}

void cmd_metatrain(Run& run, const Options& opt) {
  const Dataset ds = load_dataset(run.cfg());
  std::optional<Checkpoint> init;
  if (!opt.init.empty()) {
    init = Checkpoint::load(opt.init);
  } else if (run.cfg().pretrain != PretrainMode::none) {
    init = pretrain(run.cfg(), ds, stderr_progress());
    init->save((run.dir() / "pretrained.ckpt").string());
    run.track("pretrained.ckpt");
  }
  const Checkpoint ck = meta_finetune(run.cfg(), ds, init ? &*init : nullptr, stderr_progress());
  ck.save((run.dir() / "metatrained.ckpt").string());
  run.track("metatrained.ckpt");
  std::string csv = "metric,step,value\n";
  for (const MetricRecord& m : ck.history) csv += m.name + "," + std::to_string(m.step) + "," + std::to_string(m.value) + "\n";
  run.write("meta_history.csv", csv);
  run.note("dataset_digest", hex64(ds.digest()));
}

void cmd_eval(Run& run, const Options& opt) {
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(run.cfg());
  const std::vector<Episode> eps = eval_episodes(run.cfg(), ds, parse_split(opt.split));
  const EvalReport r = evaluate(ck, ds, eps, run.cfg().threads);
  run.write("eval.csv", EvalReport::csv_header() + "\n" + r.csv_row() + "\n");
  run.write("eval_manifest.txt", episode_manifest(eps));
  run.note("checkpoint", opt.checkpoint);
  std::printf("%s %.4f +- %.4f over %zu tasks\n", r.variant.c_str(), r.mean, r.half_width, r.count);
}

void cmd_ablate(Run& run, const Options& opt) {
  const Dataset ds = load_dataset(run.cfg());
  std::optional<CheckpointCache> cache;
  if (!opt.cache.empty()) cache.emplace(opt.cache);
  const AblationResult res = ablate(run.cfg(), ds, stderr_progress(), cache ? &*cache : nullptr);
  run.write("ablation.csv", res.csv());
  run.write("ablation_grid.txt", res.grid_text());
  run.write("eval_manifest.txt", res.manifest);
  json audit = json::object();
  for (const AblationCell& c : res.cells) audit[c.name] = c.classifier_frozen_ok;
  run.note("classifier_frozen", audit);
  std::cout << res.grid_text();
}

void cmd_xdomain(Run& run, const Options& opt) {
  if (opt.target_dir.empty()) throw ConfigError("--target-dir is required");
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset target = load_image_dir(opt.target_dir);
  const EvalReport r = cross_domain_eval(ck, target, run.cfg());
  run.write("xdomain.csv", EvalReport::csv_header() + "\n" + r.csv_row() + "\n");
  run.note("target_digest", hex64(target.digest()));
  std::printf("%s on %s: %.4f +- %.4f\n", r.variant.c_str(), opt.target_dir.c_str(), r.mean, r.half_width);
}

void cmd_analyze(Run& run, const Options& opt) {
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(run.cfg());
  Learner learner = learner_from(ck);
  const std::vector<std::size_t> images = analysis_images(ds, opt.per_class);
  const std::vector<FeatureMap> maps = feature_maps(learner, ds, images);
  const ConsistencySummary s = summarize_consistency(maps);

  std::string csv = "image,neighbor_consistency,norm_mean,norm_std\n";
  for (std::size_t i = 0; i < images.size(); ++i)
    csv += std::to_string(images[i]) + "," + std::to_string(s.per_image_consistency[i]) + "," +
           std::to_string(s.per_image_norms[i].mean) + "," + std::to_string(s.per_image_norms[i].stddev) + "\n";
  run.write("consistency.csv", csv);
  fs::create_directories(run.dir() / "similarity");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string name = "similarity/image" + std::to_string(images[i]) + ".csv";
    run.write(name, descriptor_cosine_matrix(maps[i]).csv());
  }
  if (learner.regressor) {
    fs::create_directories(run.dir() / "attention");
    const std::vector<AttentionMap> att = attention_maps(learner, ds, images);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::string name = "attention/image" + std::to_string(images[i]) + ".pgm";
      export_attention_map(att[i], opt.extent, (run.dir() / name).string());
      run.track(name);
      run.track(name + ".csv");
    }
  }
  run.note("neighbor_consistency", s.neighbor_consistency);
  run.note("norm_cv", s.norm_cv);
  std::printf("%zu images: neighbor consistency %.4f, norm std/mean %.4f\n", s.images, s.neighbor_consistency, s.norm_cv);
}

void cmd_selftest(Run& run, const Options& opt) {
  const std::vector<std::uint64_t> seeds = opt.quick ? std::vector<std::uint64_t>{0}
                                                     : std::vector<std::uint64_t>{0, 1, 2, 3, 4};
  std::vector<CheckResult> all = primitive_gradient_checks(seeds);
  for (auto&& r : objective_gradient_checks(seeds)) all.push_back(std::move(r));
  for (auto&& r : identity_checks(seeds)) all.push_back(std::move(r));
  SynthSpec small = run.cfg().data.synth;
  small.images_per_class = std::min<std::size_t>(small.images_per_class, 20);
  for (auto&& r : episode_protocol_checks(synth_generate(small), run.cfg().eval.seed, opt.quick ? 100 : 1000))
    all.push_back(std::move(r));
  std::string report;
  std::size_t failed = 0;
  for (const CheckResult& r : all) {
    report += format_check(r) + "\n";
    failed += !r.passed;
  }
  run.write("selftest.txt", report);
  run.note("checks", all.size());
  run.note("failed", failed);
  std::printf("selftest: %zu checks, %zu failed\n", all.size(), failed);
  if (failed) {
    for (const CheckResult& r : all)
      if (!r.passed) std::cerr << format_check(r) << '\n';
    throw SelftestFailure(std::to_string(failed) + " selftest checks failed");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DCAP few-shot learning: pre-training, meta-finetuning, evaluation and analysis"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "run file with [section] headers and key = value lines")
        ->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "override, e.g. meta.batches=100 (repeatable)");
    sub->add_option("--seed", opt.seed, "run seed");
    sub->add_option("--out", opt.out, "output directory (run.output_dir)");
  };
  struct Verb {
    const char* name;
    const char* help;
  };
  const Verb verbs[] = {{"synth-data", "generate the synthetic dataset as an image directory"},
                        {"pretrain", "supervised pre-training (dense or GAP)"},
                        {"metatrain", "episodic meta-finetuning, pre-training first unless --init is given"},
                        {"eval", "evaluate a checkpoint on the consistent episode set"},
                        {"ablate", "six-cell pre-training x pooling grid"},
                        {"xdomain", "evaluate a checkpoint on another image directory"},
                        {"analyze", "feature-map consistency, norms and attention maps"},
                        {"selftest", "gradient, identity and episode protocol checks"}};
  std::map<std::string, CLI::App*> subs;
  for (const Verb& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    common(sub);
    subs[v.name] = sub;
  }
  subs["metatrain"]->add_option("--init", opt.init, "pretrained checkpoint")->check(CLI::ExistingFile);
  for (const char* v : {"eval", "xdomain", "analyze"})
    subs[v]->add_option("--checkpoint", opt.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  subs["eval"]->add_option("--split", opt.split, "meta-train | meta-val | meta-test");
  subs["ablate"]->add_option("--cache", opt.cache, "checkpoint cache directory");
  subs["xdomain"]->add_option("--target-dir", opt.target_dir, "image directory: one subdirectory per class")->required();
  subs["analyze"]->add_option("--per-class", opt.per_class, "images per meta-test class");
  subs["analyze"]->add_option("--extent", opt.extent, "attention map image size");
  subs["selftest"]->add_flag("--quick", opt.quick, "one seed and 100 episodes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string verb;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) verb = name;

  std::optional<Run> run;
  try {
    run.emplace(verb, resolve_config(opt), opt);
    parse_split(opt.split);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  configure_allocator();
  try {
    run->begin();
    if (verb == "synth-data") cmd_synth_data(*run);
    else if (verb == "pretrain") cmd_pretrain(*run);
    else if (verb == "metatrain") cmd_metatrain(*run, opt);
    else if (verb == "eval") cmd_eval(*run, opt);
    else if (verb == "ablate") cmd_ablate(*run, opt);
    else if (verb == "xdomain") cmd_xdomain(*run, opt);
    else if (verb == "analyze") cmd_analyze(*run, opt);
    else if (verb == "selftest") cmd_selftest(*run, opt);
    run->finish();
  } catch (const SelftestFailure& e) {
    run->finish();
    std::cerr << "selftest failed: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
