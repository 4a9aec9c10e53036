// Acceptance gate: one PASS/FAIL line per criterion.
//
//   dcap_acceptance [--criterion N] [--work-dir DIR]
//
// Checkpoints are cached in DIR/cache by configuration digest so the
// multi-seed criteria share pre-training runs. Criterion 4 always times a
// fresh run; criterion 9 repeats it and compares the CSV bytes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "dcap/analysis.hpp"
#include "dcap/pipeline.hpp"
#include "dcap/selftest.hpp"

using namespace dcap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string summary;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Gate {
 public:
  explicit Gate(fs::path work) : work_(std::move(work)), cache_((work_ / "cache").string()) {
    fs::create_directories(work_);
    base_.threads = env_threads();
  }

  Outcome run(int n) {
    switch (n) {
      case 1: return gradients();
      case 2: return identities();
      case 3: return protocol();
      case 4: return desk_run();
      case 5: return pretraining_benefit();
      case 6: return consistency();
      case 7: return no_finetune();
      case 8: return ablation();
      case 9: return reproducibility();
      default: throw std::invalid_argument("criterion must be 1..9");
    }
  }

 private:
  static constexpr std::uint64_t kSeeds[] = {0, 1, 2};

  const Dataset& data() {
    if (!ds_) ds_ = load_dataset(base_);
    return *ds_;
  }

  const std::vector<Episode>& test_episodes() {
    if (episodes_.empty()) episodes_ = eval_episodes(base_, data(), Split::meta_test);
    return episodes_;
  }

  RunConfig seeded(std::uint64_t seed, PretrainMode p, Pooling q) const {
    RunConfig c = base_;
    c.seed = seed;
    c.pretrain = p;
    c.pooling = q;
    return c;
  }

  static ProgressFn progress() {
    return [](const std::string& line) { std::cerr << "    " << line << '\n'; };
  }

  static void detail(const std::string& line) { std::cout << "    " << line << '\n' << std::flush; }

  static Outcome from_checks(const std::vector<CheckResult>& all, const std::string& what, double secs, double limit) {
    double worst = 0;
    std::size_t failed = 0;
    for (const CheckResult& r : all) {
      if (!r.passed) {
        ++failed;
        detail(format_check(r));
      }
      worst = std::max(worst, r.value);
    }
    const bool in_time = secs < limit;
    return {failed == 0 && in_time,
            fmt("%s: %zu checks, %zu failed, worst %.3g, %.1f s (limit %.0f s)", what.c_str(), all.size(), failed, worst, secs,
                limit)};
  }

  Outcome gradients() {
    const auto t0 = Clock::now();
    std::vector<CheckResult> all = primitive_gradient_checks(kFiveSeeds);
    const std::size_t prims = all.size();
    for (CheckResult& r : objective_gradient_checks(kFiveSeeds)) all.push_back(std::move(r));
    double worst_obj = 0;
    for (std::size_t i = prims; i < all.size(); ++i) worst_obj = std::max(worst_obj, all[i].value);
    detail(fmt("%zu primitive checks, %zu objective checks (worst objective error %.3g)", prims, all.size() - prims,
               worst_obj));
    std::string csv = "name,seed,max_rel_error,checked,passed\n";
    for (const CheckResult& r : all)
      csv += fmt("%s,%llu,%.6e,%zu,%d\n", r.name.c_str(), static_cast<unsigned long long>(r.seed), r.value, r.checked,
                 r.passed ? 1 : 0);
    write_file(work_ / "criterion1.csv", csv);
    return from_checks(all, "gradient suite, 5 seeds, tol 1e-4", seconds_since(t0), 60);
  }

  Outcome identities() {
    const auto t0 = Clock::now();
    const std::vector<CheckResult> all = identity_checks(kFiveSeeds);
    std::string csv = "name,seed,error,passed\n";
    for (const CheckResult& r : all)
      csv += fmt("%s,%llu,%.6e,%d\n", r.name.c_str(), static_cast<unsigned long long>(r.seed), r.value, r.passed ? 1 : 0);
    write_file(work_ / "criterion2.csv", csv);
    return from_checks(all, "algebraic identities, tol 1e-6", seconds_since(t0), 600);
  }

  Outcome protocol() {
    const auto t0 = Clock::now();
    const std::vector<CheckResult> all = episode_protocol_checks(data(), base_.eval.seed, 1000);
    for (const CheckResult& r : all) detail(format_check(r));
    write_file(work_ / "criterion3_manifest.txt", episode_manifest(test_episodes()));
    return from_checks(all, "episode protocol over 1000 episodes", seconds_since(t0), 60);
  }

  // Full desk pipeline on an empty cache; returns the CSV and wall time.
  std::pair<std::string, double> fresh_desk_run(const fs::path& scratch) {
    fs::remove_all(scratch);
    const auto t0 = Clock::now();
    const Dataset ds = load_dataset(base_);
    CheckpointCache fresh(scratch.string());
    const RunConfig cfg = seeded(0, PretrainMode::dc, Pooling::attpool);
    const Checkpoint ck = fresh.metatrained(cfg, ds, progress());
    const EvalReport r = evaluate(ck, ds, eval_episodes(cfg, ds, Split::meta_test), cfg.threads);
    const double secs = seconds_since(t0);
    return {EvalReport::csv_header() + "\n" + r.csv_row() + "\n", secs};
  }

  Outcome desk_run() {
    const fs::path scratch = work_ / "fresh-c4";
    const auto [csv, secs] = fresh_desk_run(scratch);
    for (const auto& entry : fs::directory_iterator(scratch))
      fs::copy_file(entry.path(), work_ / "cache" / entry.path().filename(), fs::copy_options::overwrite_existing);
    fs::remove_all(scratch);
    write_file(work_ / "criterion4.csv", csv);
    write_file(work_ / "criterion4_seconds.txt", fmt("%.1f\n", secs));
    const EvalReport r = parse_row(csv);
    const bool ok = r.mean >= 0.60 && secs <= 1800 && r.count == 1000;
    return {ok, fmt("DC-AttPool 5-way 1-shot %.4f +- %.4f over %zu tasks (need >= 0.60), %.0f s (limit 1800 s)", r.mean,
                    r.half_width, r.count, secs)};
  }

  static EvalReport parse_row(const std::string& csv) {
    const std::string row = csv.substr(csv.find('\n') + 1);
    EvalReport r;
    char name[128];
    unsigned long long seed = 0;
    if (std::sscanf(row.c_str(), "%127[^,],%lf,%lf,%zu,%llu", name, &r.mean, &r.half_width, &r.count, &seed) != 5)
      throw std::runtime_error("unparseable CSV row: " + row);
    r.variant = name;
    r.seed = seed;
    return r;
  }

  EvalReport eval_cell(std::uint64_t seed, PretrainMode p, Pooling q) {
    const RunConfig cfg = seeded(seed, p, q);
    const Checkpoint ck = cache_.metatrained(cfg, data(), progress());
    EvalReport r = evaluate(ck, data(), test_episodes(), cfg.threads);
    r.variant = variant_name(p, q);
    r.seed = seed;
    return r;
  }

  Outcome pretraining_benefit() {
    std::string csv = EvalReport::csv_header() + "\n";
    int wins = 0;
    for (std::uint64_t s : kSeeds) {
      const EvalReport dc = eval_cell(s, PretrainMode::dc, Pooling::attpool);
      const EvalReport zero = eval_cell(s, PretrainMode::none, Pooling::attpool);
      csv += dc.csv_row() + "\n" + zero.csv_row() + "\n";
      const double margin = dc.mean - zero.mean, needed = dc.half_width + zero.half_width;
      const bool win = margin > needed;
      wins += win;
      detail(fmt("seed %llu: DC-AttPool %.4f +- %.4f, Zero-AttPool %.4f +- %.4f, margin %.4f vs %.4f %s",
                 static_cast<unsigned long long>(s), dc.mean, dc.half_width, zero.mean, zero.half_width, margin, needed,
                 win ? "win" : "no"));
    }
    write_file(work_ / "criterion5.csv", csv);
    return {wins >= 2, fmt("DC-AttPool beats Zero-AttPool beyond summed CIs in %d of 3 seeds (need 2)", wins)};
  }

  ConsistencySummary pretrained_summary(std::uint64_t seed, PretrainMode p) {
    const Checkpoint ck = cache_.pretrained(seeded(seed, p, Pooling::attpool), data(), progress());
    Learner learner = learner_from(ck);
    const std::vector<std::size_t> images = analysis_images(data(), 20);
    const std::vector<FeatureMap> maps = feature_maps(learner, data(), images);
    return summarize_consistency(maps);
  }

  Outcome consistency() {
    std::string csv = "seed,pretrain,images,neighbor_consistency,norm_cv\n";
    int nc_wins = 0, cv_wins = 0;
    for (std::uint64_t s : kSeeds) {
      const ConsistencySummary dc = pretrained_summary(s, PretrainMode::dc);
      const ConsistencySummary gp = pretrained_summary(s, PretrainMode::gap);
      for (const auto& [name, sum] : {std::pair{"dc", &dc}, std::pair{"gap", &gp}})
        csv += fmt("%llu,%s,%zu,%.6f,%.6f\n", static_cast<unsigned long long>(s), name, sum->images,
                   sum->neighbor_consistency, sum->norm_cv);
      nc_wins += dc.neighbor_consistency > gp.neighbor_consistency;
      cv_wins += dc.norm_cv < gp.norm_cv;
      detail(fmt("seed %llu: neighbor consistency DC %.4f vs GAP %.4f; norm std/mean DC %.4f vs GAP %.4f",
                 static_cast<unsigned long long>(s), dc.neighbor_consistency, gp.neighbor_consistency, dc.norm_cv,
                 gp.norm_cv));
    }
    write_file(work_ / "criterion6.csv", csv);
    return {nc_wins >= 2 && cv_wins >= 2,
            fmt("DC consistency higher in %d of 3 seeds, DC norm std/mean lower in %d of 3 (need 2 each)", nc_wins, cv_wins)};
  }

  Outcome no_finetune() {
    std::string csv = EvalReport::csv_header() + "\n";
    std::string summary = "report only:";
    for (PretrainMode p : {PretrainMode::dc, PretrainMode::gap}) {
      const Checkpoint ck = cache_.pretrained(seeded(0, p, Pooling::attpool), data(), progress());
      const EvalReport r = evaluate(ck, data(), test_episodes(), base_.threads);
      csv += r.csv_row() + "\n";
      summary += fmt(" %s %.4f +- %.4f;", r.variant.c_str(), r.mean, r.half_width);
    }
    write_file(work_ / "criterion7.csv", csv);
    summary += " chance 0.20";
    return {true, summary};
  }

  Outcome ablation() {
    RunConfig cfg = base_;
    cfg.seed = 0;
    const AblationResult res = ablate(cfg, data(), progress(), &cache_);
    write_file(work_ / "criterion8.csv", res.csv());
    write_file(work_ / "criterion8_manifest.txt", res.manifest);
    std::istringstream grid(res.grid_text());
    for (std::string line; std::getline(grid, line);) detail(line);
    const bool shared = res.manifest == episode_manifest(test_episodes());
    bool frozen = true, counts = res.cells.size() == 6;
    for (const AblationCell& c : res.cells) {
      frozen = frozen && c.classifier_frozen_ok;
      counts = counts && c.report.count == base_.eval.tasks;
    }
    return {shared && frozen && counts,
            fmt("%zu cells, shared manifest %s, frozen W/b audit %s, CSV %s", res.cells.size(), shared ? "yes" : "no",
                frozen ? "bitwise equal" : "CHANGED", (work_ / "criterion8.csv").c_str())};
  }

  Outcome reproducibility() {
    if (!fs::exists(work_ / "criterion4.csv")) {
      detail("criterion 4 output missing; running it first");
      desk_run();
    }
    const std::string first = read_file(work_ / "criterion4.csv");
    const fs::path scratch = work_ / "fresh-c9";
    const auto [again, secs] = fresh_desk_run(scratch);
    fs::remove_all(scratch);
    write_file(work_ / "criterion9.csv", again);
    const bool same = again == first;
    if (!same) detail("first:  " + first + "    second: " + again);
    return {same, fmt("fresh same-seed rerun of the desk pipeline (%.0f s): CSV %s", secs,
                      same ? "byte-identical" : "DIFFERS")};
  }

  static constexpr std::uint64_t kFiveSeeds[] = {0, 1, 2, 3, 4};

  fs::path work_;
  CheckpointCache cache_;
  RunConfig base_;
  std::optional<Dataset> ds_;
  std::vector<Episode> episodes_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  int criterion = 0;
  std::string work = "acceptance-work";
  app.add_option("--criterion", criterion, "criterion 1..9 (default: all)")->check(CLI::Range(0, 9));
  app.add_option("--work-dir", work, "cache and CSV output directory");
  CLI11_PARSE(app, argc, argv);

  Gate gate{fs::path(work)};
  std::vector<int> which;
  if (criterion) {
    which.push_back(criterion);
  } else {
    for (int n = 1; n <= 9; ++n) which.push_back(n);
  }
  int failures = 0;
  for (int n : which) {
    Outcome o;
    try {
      o = gate.run(n);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.passed;
    const std::string line = fmt("criterion %d: %s  %s", n, o.passed ? "PASS" : "FAIL", o.summary.c_str());
    std::cout << line << '\n' << std::flush;
    write_file(fs::path(work) / fmt("criterion%d.result", n), line + "\n");
  }
  return failures ? 1 : 0;
}
