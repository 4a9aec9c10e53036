#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "dcap/errors.hpp"
#include "dcap/optim.hpp"
#include "dcap/pipeline.hpp"

namespace dcap {

using nk::Sgd;
using nk::SgdOptions;
using nk::multistep_lr;

void configure_allocator() {
  static std::once_flag once;
  std::call_once(once, [] {
    // Activations of the first block run to tens of megabytes; serving them
    // from the heap avoids fresh page faults on every allocation.
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "dir") return load_image_dir(cfg.data.path);
  return synth_generate(cfg.data.synth);
}

EvalReport EvalReport::from_accuracies(std::string variant, std::vector<double> acc, std::uint64_t seed) {
  EvalReport r;
  r.variant = std::move(variant);
  r.seed = seed;
  r.count = acc.size();
  if (!acc.empty()) {
    double s = 0;
    for (double a : acc) s += a;
    r.mean = s / static_cast<double>(acc.size());
    if (acc.size() > 1) {
      double ss = 0;
      for (double a : acc) ss += (a - r.mean) * (a - r.mean);
      const double sd = std::sqrt(ss / static_cast<double>(acc.size() - 1));
      r.half_width = 1.96 * sd / std::sqrt(static_cast<double>(acc.size()));
    }
  }
  r.accuracies = std::move(acc);
  return r;
}

std::string EvalReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%zu,%llu", variant.c_str(), mean, half_width, count,
                static_cast<unsigned long long>(seed));
  return buf;
}

namespace {

void check_geometry(const RunConfig& cfg, const Dataset& ds) {
  if (ds.extent() != cfg.backbone.input_size || ds.channels() != cfg.backbone.channels_in) {
    throw ConfigError("dataset images are " + std::to_string(ds.channels()) + "x" + std::to_string(ds.extent()) +
                      " but the backbone expects " + std::to_string(cfg.backbone.channels_in) + "x" +
                      std::to_string(cfg.backbone.input_size));
  }
}

void report(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

constexpr std::size_t kEmbedChunk = 50;

std::vector<std::size_t> argmax_rows(const std::vector<std::vector<double>>& logits) {
  std::vector<std::size_t> out;
  for (const auto& row : logits) out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  return out;
}

/// Image-level top-1 of the global classifier (W^T gap + b) in eval mode.
double holdout_top1(Learner& L, const Dataset& ds, std::span<const std::size_t> images) {
  const Tensor<float>& W = L.classifier.weight.value;
  const Tensor<float>& b = L.classifier.bias.value;
  const std::size_t d = W.dim(0), C = W.dim(1);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < images.size(); start += kEmbedChunk) {
    const auto chunk = images.subspan(start, std::min(kEmbedChunk, images.size() - start));
    const Tensor<float> maps = L.backbone.embed_eval(ds.batch<float>(chunk));
    const std::size_t r = maps.dim(2) * maps.dim(3);
    std::vector<std::vector<double>> logits(chunk.size(), std::vector<double>(C));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        double g = 0;
        for (std::size_t j = 0; j < r; ++j) g += maps[(i * d + k) * r + j];
        g /= static_cast<double>(r);
        for (std::size_t c = 0; c < C; ++c) logits[i][c] += g * W[k * C + c];
      }
      for (std::size_t c = 0; c < C; ++c) logits[i][c] += b[c];
    }
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (pred[i] == ds.base_label(ds.label(chunk[i]))) ++correct;
  }
  return images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
}

EpisodeInput<float> episode_input(const Dataset& ds, const Episode& ep, bool flip, CounterRng flip_rng) {
  EpisodeInput<float> in;
  std::vector<std::size_t> idx;
  for (const EpisodeItem& it : ep.support) {
    idx.push_back(it.image);
    in.support_labels.push_back(it.label);
  }
  bool base_ok = true;
  for (const EpisodeItem& it : ep.queries) {
    idx.push_back(it.image);
    in.query_labels.push_back(it.label);
    in.query_base_labels.push_back(it.base_label);
    base_ok = base_ok && it.base_label != kNoBaseLabel;
  }
  if (!base_ok) in.query_base_labels.clear();
  std::vector<std::uint8_t> flips;
  if (flip) {
    flips.resize(idx.size());
    for (auto& f : flips) f = flip_rng.bernoulli(0.5) ? 1 : 0;
  }
  in.images = ds.batch<float>(idx, flips);
  in.way = ep.shape.way;
  return in;
}

}  // namespace

Checkpoint pretrain(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress) {
  configure_allocator();
  cfg.validate();
  if (cfg.pretrain == PretrainMode::none) throw ConfigError("pretrain: mode 'none' has no pre-training stage");
  check_geometry(cfg, ds);
  const std::vector<std::size_t> base = ds.classes_in(Split::meta_train);
  if (base.empty()) throw SamplingError("pretrain: the meta-train split has no classes");
  Learner L(cfg.backbone, base.size(), false, cfg.seed);
  const CounterRng root(cfg.seed);
  const HorizontalSplit hs = horizontal_split(ds, base, cfg.pre.holdout_rate, root.child(4).key());

  const double base_lr = cfg.pretrain == PretrainMode::dc ? cfg.pre.dc_lr : cfg.pre.lr;
  Sgd<float> opt(SgdOptions{base_lr, cfg.pre.momentum, true, cfg.pre.weight_decay});
  opt.add_group(L.backbone.parameters());
  opt.add_group(L.classifier.parameters());

  std::vector<MetricRecord> history;
  double best_acc = -1;
  Checkpoint best;
  for (std::size_t epoch = 0; epoch < cfg.pre.epochs; ++epoch) {
    opt.set_lr(multistep_lr(base_lr, cfg.pre.milestones, cfg.pre.lr_decay, epoch));
    std::vector<std::size_t> order = hs.fit;
    CounterRng shuffle_rng = root.child(5).child(epoch);
    shuffle_rng.shuffle(order.begin(), order.end());
    CounterRng flip_rng = root.child(7).child(epoch);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += cfg.pre.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.pre.batch_size, order.size() - start));
      if (idx.size() < 2) break;
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(ds.base_label(ds.label(i)));
      std::vector<std::uint8_t> flips;
      if (cfg.pre.flip) {
        flips.resize(idx.size());
        for (auto& f : flips) f = flip_rng.bernoulli(0.5) ? 1 : 0;
      }
      Graph<float> g;
      Var maps = L.backbone.embed(g, g.constant(ds.batch<float>(idx, flips)), Mode::train);
      Var W = g.param(L.classifier.weight), b = g.param(L.classifier.bias);
      Var loss = cfg.pretrain == PretrainMode::dc ? pretrain_loss_dc(g, maps, labels, W, b, cfg.pre.smoothing)
                                                  : pretrain_loss_gap(g, maps, labels, W, b, cfg.pre.smoothing);
      const double lv = g.value(loss).item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                              std::to_string(batches + 1) + " (lr " + std::to_string(opt.lr()) + ")");
      }
      opt.zero_grad();
      g.backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
    }
    const double acc = holdout_top1(L, ds, hs.holdout);
    const double mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    history.push_back({"pretrain.loss", epoch + 1, mean_loss});
    history.push_back({"pretrain.holdout_top1", epoch + 1, acc});
    char buf[160];
    std::snprintf(buf, sizeof buf, "pretrain[%s] epoch %zu/%zu loss %.4f holdout top-1 %.4f", std::string(to_string(cfg.pretrain)).c_str(),
                  epoch + 1, cfg.pre.epochs, mean_loss, acc);
    report(progress, buf);
    if (acc >= best_acc) {
      best_acc = acc;
      best = make_checkpoint(Stage::pretrained, cfg, L);
    }
  }
  if (cfg.pre.epochs == 0) best = make_checkpoint(Stage::pretrained, cfg, L);
  best.history = std::move(history);
  return best;
}

Checkpoint meta_finetune(const RunConfig& cfg, const Dataset& ds, const Checkpoint* init, const ProgressFn& progress) {
  configure_allocator();
  cfg.validate();
  check_geometry(cfg, ds);
  const std::size_t base_classes = ds.base_class_count();
  const bool attpool = cfg.pooling == Pooling::attpool;
  Learner L(cfg.backbone, base_classes, attpool, cfg.seed);
  if (init) {
    if (init->config.backbone != cfg.backbone) {
      throw nk::ShapeError("meta_finetune", "checkpoint backbone configuration differs from the run configuration");
    }
    load_state(L, *init, false);
    L.classifier.frozen = true;
    for (Parameter<float>* p : L.classifier.parameters()) p->requires_grad = false;
  }
  const CounterRng root(cfg.seed);
  Sgd<float> opt(SgdOptions{1.0, cfg.meta.momentum, true, cfg.meta.weight_decay});
  opt.add_group(L.backbone.parameters(), init ? cfg.meta.backbone_lr : cfg.meta.scratch_lr);
  if (attpool) opt.add_group(L.regressor->parameters(), cfg.meta.regressor_lr);
  if (!init && cfg.weights.gamma > 0) opt.add_group(L.classifier.parameters(), cfg.meta.scratch_lr);

  MetaModel<float> model{&L.backbone, attpool ? &*L.regressor : nullptr, &L.classifier};
  ObjectiveOptions oo;
  oo.weights = cfg.weights;
  oo.pooling = cfg.pooling;
  oo.mode = Mode::train;
  oo.ce_divide_by_r = cfg.ce_divide_by_r;
  oo.gap_smoothing = cfg.gap_smoothing;

  const std::vector<Episode> val =
      consistent_eval_set(ds, Split::meta_val, cfg.eval.shape, root.child(8).key(), cfg.meta.val_tasks, cfg.threads);

  std::vector<MetricRecord> history;
  double best_acc = -1;
  Checkpoint best;
  double loss_window = 0;
  std::size_t window = 0;
  const std::size_t B = cfg.meta.tasks_per_batch;
  for (std::size_t step = 0; step < cfg.meta.batches; ++step) {
    const std::size_t units = cfg.meta.milestone_unit == MilestoneUnit::tasks ? step * B : step;
    opt.set_lr(multistep_lr(1.0, cfg.meta.milestones, cfg.meta.lr_decay, units));
    opt.zero_grad();
    double batch_loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::uint64_t task = step * B + b;
      const Episode ep = sample_episode(ds, Split::meta_train, cfg.meta.shape, root.child(6).child(task), task);
      const EpisodeInput<float> in = episode_input(ds, ep, cfg.meta.flip, root.child(7).child(task));
      Graph<float> g;
      const EpisodeTerms terms = episode_objective(g, model, in, oo);
      Var loss = nk::scale(g, terms.total, 1.0f / static_cast<float>(B));
      const double lv = g.value(terms.total).item();
      if (!std::isfinite(lv)) throw DivergenceError("meta_finetune: non-finite loss at step " + std::to_string(step + 1));
      g.backward(loss);
      batch_loss += lv / static_cast<double>(B);
    }
    opt.step();
    loss_window += batch_loss;
    ++window;
    if ((step + 1) % cfg.meta.val_every == 0 || step + 1 == cfg.meta.batches) {
      double acc = 0;
      try {
        acc = evaluate(L, ds, val, cfg.pooling, {}, cfg.threads).mean;
      } catch (const DegenerateCentroidError& e) {
        // Dead features early in from-scratch runs; the step cannot win selection.
        report(progress, std::string("metatrain: validation skipped, ") + e.what());
      }
      history.push_back({"metatrain.loss", step + 1, loss_window / static_cast<double>(window)});
      history.push_back({"metatrain.val_acc", step + 1, acc});
      char buf[160];
      std::snprintf(buf, sizeof buf, "metatrain[%s] step %zu/%zu loss %.4f val acc %.4f", cfg.variant_name().c_str(), step + 1,
                    cfg.meta.batches, loss_window / static_cast<double>(window), acc);
      report(progress, buf);
      loss_window = 0;
      window = 0;
      if (acc >= best_acc) {
        best_acc = acc;
        best = make_checkpoint(Stage::metatrained, cfg, L);
      }
    }
  }
  if (cfg.meta.batches == 0) best = make_checkpoint(Stage::metatrained, cfg, L);
  best.history = std::move(history);
  return best;
}

std::vector<std::vector<float>> pooled_embeddings(Learner& L, const Dataset& ds, std::span<const std::size_t> images,
                                                  Pooling pooling, std::size_t threads) {
  if (pooling == Pooling::attpool && !L.regressor) throw ConfigError("attentive pooling needs a trained regressor");
  configure_allocator();
  std::vector<std::vector<float>> out(images.size());
  const std::size_t chunks = (images.size() + kEmbedChunk - 1) / kEmbedChunk;
  auto run_chunk = [&](std::size_t k) {
    const std::size_t start = k * kEmbedChunk, n = std::min(kEmbedChunk, images.size() - start);
    Graph<float> g;
    Var maps = L.backbone.embed(g, g.constant(ds.batch<float>(images.subspan(start, n))), Mode::eval);
    Var emb = pooling == Pooling::gap ? gap(g, maps) : att_pool(g, maps, attention_scores(g, maps, *L.regressor).normalized);
    const Tensor<float>& e = g.value(emb);
    const std::size_t d = e.dim(1);
    for (std::size_t i = 0; i < n; ++i) out[start + i].assign(e.data() + i * d, e.data() + (i + 1) * d);
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t k = 0; k < chunks; ++k) run_chunk(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t k = t; k < chunks; k += threads) run_chunk(k);
      });
    for (std::thread& th : pool) th.join();
  }
  return out;
}

EvalReport evaluate(Learner& L, const Dataset& ds, std::span<const Episode> episodes, Pooling pooling, std::string variant,
                    std::size_t threads) {
  std::vector<std::size_t> images;
  for (const Episode& ep : episodes) {
    for (const EpisodeItem& it : ep.support) images.push_back(it.image);
    for (const EpisodeItem& it : ep.queries) images.push_back(it.image);
  }
  std::sort(images.begin(), images.end());
  images.erase(std::unique(images.begin(), images.end()), images.end());
  const std::vector<std::vector<float>> emb = pooled_embeddings(L, ds, images, pooling, threads);
  auto row = [&](std::size_t image) -> const std::vector<float>& {
    return emb[static_cast<std::size_t>(std::lower_bound(images.begin(), images.end(), image) - images.begin())];
  };

  std::vector<double> acc;
  acc.reserve(episodes.size());
  for (const Episode& ep : episodes) {
    const std::size_t way = ep.shape.way;
    const std::size_t d = emb.empty() ? 0 : emb[0].size();
    std::vector<std::vector<double>> cent(way, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(way, 0);
    for (const EpisodeItem& it : ep.support) {
      const auto& f = row(it.image);
      for (std::size_t k = 0; k < d; ++k) cent[it.label][k] += f[k];
      ++counts[it.label];
    }
    for (std::size_t t = 0; t < way; ++t) {
      double norm = 0;
      for (std::size_t k = 0; k < d; ++k) {
        cent[t][k] /= static_cast<double>(counts[t]);
        norm += cent[t][k] * cent[t][k];
      }
      norm = std::sqrt(norm);
      if (!(norm > 0)) throw DegenerateCentroidError("evaluate: zero-norm centroid in task " + std::to_string(ep.task_id));
      for (double& v : cent[t]) v /= norm;
    }
    std::size_t correct = 0;
    for (const EpisodeItem& it : ep.queries) {
      const auto& f = row(it.image);
      std::size_t pred = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < way; ++t) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += f[k] * cent[t][k];
        if (s > best) {
          best = s;
          pred = t;
        }
      }
      if (pred == it.label) ++correct;
    }
    acc.push_back(ep.queries.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ep.queries.size()));
  }
  return EvalReport::from_accuracies(std::move(variant), std::move(acc));
}

EvalReport evaluate(const Checkpoint& ckpt, const Dataset& ds, std::span<const Episode> episodes, std::size_t threads) {
  Learner L = learner_from(ckpt);
  const Pooling pooling = L.regressor ? Pooling::attpool : Pooling::gap;
  std::string name = ckpt.stage == Stage::pretrained ? std::string(to_string(ckpt.config.pretrain)) + "-pretrained/no-finetune"
                                                     : ckpt.config.variant_name();
  EvalReport r = evaluate(L, ds, episodes, pooling, std::move(name), threads);
  r.seed = ckpt.config.seed;
  return r;
}

std::vector<Episode> eval_episodes(const RunConfig& cfg, const Dataset& ds, Split split) {
  return consistent_eval_set(ds, split, cfg.eval.shape, cfg.eval.seed, cfg.eval.tasks, cfg.threads);
}

EvalReport cross_domain_eval(const Checkpoint& ckpt, const Dataset& target, const RunConfig& cfg) {
  check_geometry(ckpt.config, target);
  const std::vector<Episode> eps = eval_episodes(cfg, target, Split::meta_test);
  EvalReport r = evaluate(ckpt, target, eps, cfg.threads);
  r.variant += "/cross-domain";
  return r;
}

std::string AblationResult::csv() const {
  std::string s = EvalReport::csv_header() + "\n";
  for (const AblationCell& c : cells) s += c.report.csv_row() + "\n";
  return s;
}

const AblationCell& AblationResult::cell(PretrainMode p, Pooling q) const {
  for (const AblationCell& c : cells)
    if (c.pretrain == p && c.pooling == q) return c;
  throw std::out_of_range("ablation cell " + variant_name(p, q) + " missing");
}

std::string AblationResult::grid_text() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s | %-20s | %-20s\n", "pre-train", "GAP", "AttPool");
  os << buf << std::string(58, '-') << "\n";
  for (PretrainMode p : {PretrainMode::none, PretrainMode::gap, PretrainMode::dc}) {
    const char* row = p == PretrainMode::none ? "Zero" : p == PretrainMode::gap ? "GAP" : "DC";
    std::string cols[2];
    for (int k = 0; k < 2; ++k) {
      const Pooling q = k == 0 ? Pooling::gap : Pooling::attpool;
      bool found = false;
      for (const AblationCell& c : cells)
        if (c.pretrain == p && c.pooling == q) {
          std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100 * c.report.mean, 100 * c.report.half_width);
          cols[k] = buf;
          found = true;
        }
      if (!found) cols[k] = "-";
    }
    std::snprintf(buf, sizeof buf, "%-12s | %-20s | %-20s\n", row, cols[0].c_str(), cols[1].c_str());
    os << buf;
  }
  return os.str();
}

namespace {

bool bitwise_equal(const Tensor<float>* a, const Tensor<float>* b) {
  return a && b && a->shape() == b->shape() && std::memcmp(a->data(), b->data(), a->size() * sizeof(float)) == 0;
}

}  // namespace

AblationResult ablate(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress, CheckpointCache* cache) {
  cfg.validate();
  AblationResult res;
  const std::vector<Episode> eps = eval_episodes(cfg, ds, Split::meta_test);
  res.manifest = episode_manifest(eps);
  for (PretrainMode p : {PretrainMode::none, PretrainMode::gap, PretrainMode::dc}) {
    std::optional<Checkpoint> pre;
    if (p != PretrainMode::none) {
      RunConfig c = cfg;
      c.pretrain = p;
      pre = cache ? cache->pretrained(c, ds, progress) : pretrain(c, ds, progress);
    }
    for (Pooling q : {Pooling::gap, Pooling::attpool}) {
      RunConfig c = cfg;
      c.pretrain = p;
      c.pooling = q;
      const Checkpoint ck =
          cache ? cache->metatrained(c, ds, progress) : meta_finetune(c, ds, pre ? &*pre : nullptr, progress);
      AblationCell cell;
      cell.pretrain = p;
      cell.pooling = q;
      cell.name = variant_name(p, q);
      cell.report = evaluate(ck, ds, eps, cfg.threads);
      cell.report.variant = cell.name;
      if (pre) {
        cell.classifier_frozen_ok = bitwise_equal(ck.find("classifier.weight"), pre->find("classifier.weight")) &&
                                    bitwise_equal(ck.find("classifier.bias"), pre->find("classifier.bias"));
      }
      report(progress, "ablate " + cell.report.csv_row());
      res.cells.push_back(std::move(cell));
    }
  }
  return res;
}

CheckpointCache::CheckpointCache(std::string dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

namespace {

std::string keyed(const RunConfig& normalized, const Dataset& ds, std::string_view stage) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ds.digest()));
  return std::string(stage) + "-" + normalized.digest() + "-" + buf;
}

RunConfig without_run_plumbing(RunConfig c) {
  c.eval = EvalConfig{};
  c.threads = 1;
  c.output_dir.clear();
  return c;
}

std::optional<Checkpoint> try_load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    return Checkpoint::load(path.string());
  } catch (const std::exception&) {
    return std::nullopt;  // stale or truncated entry; recompute
  }
}

void store(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  ck.save(tmp.string());
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::string CheckpointCache::pretrain_key(const RunConfig& cfg, const Dataset& ds) const {
  RunConfig c = without_run_plumbing(cfg);
  c.pooling = Pooling::attpool;
  c.meta = MetaConfig{};
  c.weights = LossWeights{};
  c.ce_divide_by_r = false;
  c.gap_smoothing = 0.1;
  return keyed(c, ds, "pre");
}

std::string CheckpointCache::meta_key(const RunConfig& cfg, const Dataset& ds) const {
  RunConfig c = without_run_plumbing(cfg);
  if (c.pretrain == PretrainMode::none) c.pre = PretrainConfig{};
  return keyed(c, ds, "meta");
}

Checkpoint CheckpointCache::pretrained(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress) {
  const std::filesystem::path path = std::filesystem::path(dir_) / (pretrain_key(cfg, ds) + ".ckpt");
  if (auto hit = try_load(path)) {
    ++hits_;
    report(progress, "cache hit " + path.filename().string());
    return std::move(*hit);
  }
  Checkpoint ck = pretrain(cfg, ds, progress);
  store(ck, path);
  return ck;
}

Checkpoint CheckpointCache::metatrained(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress) {
  const std::filesystem::path path = std::filesystem::path(dir_) / (meta_key(cfg, ds) + ".ckpt");
  if (auto hit = try_load(path)) {
    ++hits_;
    report(progress, "cache hit " + path.filename().string());
    return std::move(*hit);
  }
  std::optional<Checkpoint> pre;
  if (cfg.pretrain != PretrainMode::none) pre = pretrained(cfg, ds, progress);
  Checkpoint ck = meta_finetune(cfg, ds, pre ? &*pre : nullptr, progress);
  store(ck, path);
  return ck;
}

}  // namespace dcap
