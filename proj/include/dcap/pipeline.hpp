#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dcap/episodes.hpp"
#include "dcap/objectives.hpp"

namespace dcap {

enum class PretrainMode { none, gap, dc };
enum class MilestoneUnit { tasks, steps };

std::string_view to_string(PretrainMode m);
PretrainMode parse_pretrain_mode(std::string_view s);
std::string_view to_string(MilestoneUnit u);

struct PretrainConfig {
  std::size_t epochs = 30;
  std::vector<std::size_t> milestones{24};  // epochs
  double lr = 0.1;
  /// Rate for the dense objective, whose per-image loss sums r site terms.
  double dc_lr = 0.01;
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t batch_size = 64;
  double smoothing = 0.1;
  double holdout_rate = 0.1;
  bool flip = false;
};

struct MetaConfig {
  std::size_t batches = 200;  // optimizer steps
  std::size_t tasks_per_batch = 4;
  std::vector<std::size_t> milestones{640};
  MilestoneUnit milestone_unit = MilestoneUnit::tasks;
  double backbone_lr = 0.001;
  double regressor_lr = 0.01;
  /// Backbone and classifier rate when meta-training from scratch.
  double scratch_lr = 0.01;
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  EpisodeShape shape{5, 1, 15};
  std::size_t val_every = 50;
  std::size_t val_tasks = 500;
  bool flip = false;
};

struct EvalConfig {
  EpisodeShape shape{5, 1, 15};
  std::size_t tasks = 1000;
  std::uint64_t seed = 1;
};

struct DataConfig {
  std::string source = "synth";  // synth | dir
  std::string path;
  SynthSpec synth;
};

/// Everything a run needs. Text form: "[section]" headers followed by
/// "key = value" lines; see serialize() for the full schema.
struct RunConfig {
  BackboneConfig backbone;
  Pooling pooling = Pooling::attpool;
  PretrainMode pretrain = PretrainMode::dc;
  PretrainConfig pre;
  MetaConfig meta;
  EvalConfig eval;
  LossWeights weights;
  bool ce_divide_by_r = false;
  double gap_smoothing = 0.1;
  DataConfig data;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "runs/default";

  /// Throws ConfigError.
  void validate() const;
  /// Canonical text form; parse(serialize()) reproduces the config.
  std::string serialize() const;
  /// Throws ConfigError with the offending line.
  static RunConfig parse(std::string_view text);
  /// Applies "section.key=value". Throws ConfigError for unknown keys.
  void apply_override(std::string_view assignment);
  void set(std::string_view section, std::string_view key, std::string_view value);
  /// FNV-1a of serialize(), as 16 hex digits.
  std::string digest() const;
  /// Ablation-style name, e.g. "DC-AttPool".
  std::string variant_name() const;
};

RunConfig load_config_file(const std::string& path);

/// Worker count from DCAP_THREADS (default 1).
std::size_t env_threads();

/// Backbone, optional attention regressor and the base-class classifier.
struct Learner {
  Backbone<float> backbone;
  std::optional<AttentionRegressor<float>> regressor;
  GlobalClassifier<float> classifier;

  Learner(const BackboneConfig& cfg, std::size_t base_classes, bool with_regressor, std::uint64_t seed);

  /// Trainable tensors then batchnorm buffers, with stable names.
  std::vector<std::pair<std::string, Tensor<float>*>> state();
};

enum class Stage { pretrained, metatrained };
std::string_view to_string(Stage s);

struct MetricRecord {
  std::string name;
  std::size_t step = 0;
  double value = 0;
  bool operator==(const MetricRecord&) const = default;
};

/// Serialized learner. File layout: UTF-8 "key=value" header lines ended by
/// an empty line, then each tensor as little-endian float32 in header order.
struct Checkpoint {
  Stage stage = Stage::pretrained;
  RunConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::uint64_t rng_key = 0, rng_counter = 0;
  std::vector<MetricRecord> history;

  std::string to_bytes() const;
  static Checkpoint from_bytes(std::string_view bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const Tensor<float>* find(std::string_view name) const;
  bool has_regressor() const { return find("regressor.layer1.weight") != nullptr; }
};

/// Snapshot of a learner's state.
Checkpoint make_checkpoint(Stage stage, const RunConfig& cfg, Learner& learner, std::vector<MetricRecord> history = {});
/// Rebuilds the learner; shapes are taken from the checkpoint.
Learner learner_from(const Checkpoint& ckpt);
/// Copies matching tensors into learner. Throws ShapeError on mismatch.
void load_state(Learner& learner, const Checkpoint& ckpt, bool include_regressor);

struct EvalReport {
  std::string variant;
  std::vector<double> accuracies;
  double mean = 0;
  double half_width = 0;  // 1.96 * sample stddev / sqrt(count)
  std::size_t count = 0;
  std::uint64_t seed = 0;

  static EvalReport from_accuracies(std::string variant, std::vector<double> acc, std::uint64_t seed = 0);
  static std::string csv_header() { return "variant,mean,ci,count,seed"; }
  std::string csv_row() const;
};

/// Progress sink; the default writes nothing.
using ProgressFn = std::function<void(const std::string&)>;

/// Dense (dc) or image-level (gap) supervised pre-training on the fit part
/// of a horizontal split of the meta-training classes. Returns the state at
/// the best holdout top-1 accuracy. Throws DivergenceError.
Checkpoint pretrain(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress = {});

/// Episodic meta-finetuning of the combined objective. With a checkpoint the
/// backbone and classifier start from it and the classifier stays frozen;
/// without one everything is fresh and trainable. Returns the state at the
/// best meta-validation accuracy.
Checkpoint meta_finetune(const RunConfig& cfg, const Dataset& ds, const Checkpoint* init, const ProgressFn& progress = {});

/// Per-image pooled embeddings in eval mode, computed in fixed chunks so
/// results do not depend on the worker count.
std::vector<std::vector<float>> pooled_embeddings(Learner& learner, const Dataset& ds, std::span<const std::size_t> images,
                                                  Pooling pooling, std::size_t threads = 1);

/// Query accuracy per episode with the normalized nearest-centroid classifier.
EvalReport evaluate(Learner& learner, const Dataset& ds, std::span<const Episode> episodes, Pooling pooling,
                    std::string variant = {}, std::size_t threads = 1);
/// Builds the learner from ckpt and evaluates with the checkpoint's pooling,
/// or GAP pooling when the checkpoint has no regressor.
EvalReport evaluate(const Checkpoint& ckpt, const Dataset& ds, std::span<const Episode> episodes,
                    std::size_t threads = 1);

/// The evaluation episodes a config prescribes for a split.
std::vector<Episode> eval_episodes(const RunConfig& cfg, const Dataset& ds, Split split);

struct AblationCell {
  PretrainMode pretrain = PretrainMode::none;
  Pooling pooling = Pooling::gap;
  std::string name;
  EvalReport report;
  bool classifier_frozen_ok = true;  // W, b bitwise unchanged (pretrained cells)
};

struct AblationResult {
  std::vector<AblationCell> cells;  // Zero, GAP, DC rows; GAP then AttPool columns
  std::string manifest;             // shared evaluation episodes

  std::string csv() const;
  /// Plain-text grid: rows = pre-training, columns = meta-learning pooling.
  std::string grid_text() const;
  const AblationCell& cell(PretrainMode p, Pooling q) const;
};

/// Directory of checkpoints keyed by the settings each stage reads plus the
/// dataset digest. The pretrained key ignores pooling, meta-training and
/// evaluation settings, so one pre-training serves every cell of a row.
class CheckpointCache {
 public:
  explicit CheckpointCache(std::string dir);
  const std::string& dir() const noexcept { return dir_; }
  std::string pretrain_key(const RunConfig& cfg, const Dataset& ds) const;
  std::string meta_key(const RunConfig& cfg, const Dataset& ds) const;
  /// Loads the checkpoint for cfg or runs pretrain() and stores it.
  Checkpoint pretrained(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress = {});
  /// Same for meta_finetune(), pre-training first (also cached) unless
  /// cfg.pretrain is none.
  Checkpoint metatrained(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress = {});
  std::size_t hits() const noexcept { return hits_; }

 private:
  std::string dir_;
  std::size_t hits_ = 0;
};

/// Runs the six {none, gap, dc} x {gap, attpool} cells with the config's
/// seeds and one shared meta-test evaluation set. Pre-trained checkpoints
/// are shared between the two pooling cells of a row.
AblationResult ablate(const RunConfig& cfg, const Dataset& ds, const ProgressFn& progress = {},
                      CheckpointCache* cache = nullptr);

/// Evaluates on the target's meta-test consistent set without updates.
EvalReport cross_domain_eval(const Checkpoint& ckpt, const Dataset& target, const RunConfig& cfg);

/// Name for a {pretrain, pooling} pair, e.g. "GAP-AttPool".
std::string variant_name(PretrainMode p, Pooling q);

/// Dataset described by cfg.data (generated or loaded).
Dataset load_dataset(const RunConfig& cfg);

/// Reuses freed heap memory for large tensors instead of fresh mappings.
void configure_allocator();

}  // namespace dcap
