#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "dcap/errors.hpp"
#include "dcap/pipeline.hpp"
#include "support.hpp"

using namespace dcap;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.backbone.input_size = 32;
  cfg.backbone.filters = {4, 4, 4, 4};
  cfg.data.synth.train_classes = 6;
  cfg.data.synth.val_classes = 5;
  cfg.data.synth.test_classes = 5;
  cfg.data.synth.images_per_class = 20;
  cfg.data.synth.extent = 32;
  cfg.pre.epochs = 2;
  cfg.pre.milestones = {1};
  cfg.pre.batch_size = 16;
  cfg.meta.batches = 3;
  cfg.meta.tasks_per_batch = 2;
  cfg.meta.milestones = {4};
  cfg.meta.shape = {5, 1, 3};
  cfg.meta.val_every = 2;
  cfg.meta.val_tasks = 10;
  cfg.eval.shape = {5, 1, 5};
  cfg.eval.tasks = 20;
  return cfg;
}

const Dataset& tiny_data() {
  static const Dataset ds = load_dataset(tiny_config());
  return ds;
}

const Checkpoint& tiny_pretrained() {
  static const Checkpoint ck = pretrain(tiny_config(), tiny_data());
  return ck;
}

const Tensor<float>& tensor_of(const Checkpoint& ck, std::string_view name) {
  const Tensor<float>* t = ck.find(name);
  if (!t) throw std::runtime_error("missing tensor " + std::string(name));
  return *t;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Config, SerializeParseRoundTrip) {
  RunConfig cfg = tiny_config();
  cfg.seed = 77;
  cfg.pooling = Pooling::gap;
  cfg.pretrain = PretrainMode::gap;
  cfg.meta.milestone_unit = MilestoneUnit::steps;
  cfg.weights.beta = 0.25;
  cfg.data.synth.regime_weights = {0.2, 0.3, 0.5};
  const RunConfig back = RunConfig::parse(cfg.serialize());
  EXPECT_EQ(back.serialize(), cfg.serialize());
  EXPECT_EQ(back.digest(), cfg.digest());
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.meta.milestone_unit, MilestoneUnit::steps);
  EXPECT_EQ(cfg.digest().size(), 16u);
}

TEST(Config, DefaultsMatchTheDeskSchedule) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.weights.beta, 0.1);
  EXPECT_EQ(cfg.weights.gamma, 0.5);
  EXPECT_EQ(cfg.meta.tasks_per_batch, 4u);
  EXPECT_EQ(cfg.pre.momentum, 0.9);
  EXPECT_EQ(cfg.pre.weight_decay, 0.0005);
  EXPECT_EQ(cfg.pre.holdout_rate, 0.1);
  EXPECT_EQ(cfg.eval.tasks, 1000u);
  EXPECT_EQ(cfg.variant_name(), "DC-AttPool");
  EXPECT_NE(cfg.serialize().find("beta = 0.1"), std::string::npos);
  EXPECT_NE(cfg.serialize().find("gamma = 0.5"), std::string::npos);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, OverridesApplyAndChangeTheDigest) {
  RunConfig cfg;
  const std::string before = cfg.digest();
  cfg.apply_override("pretrain.dc_lr=0.02");
  cfg.apply_override("run.pretrain=gap");
  cfg.apply_override("data.images_per_class=120");
  cfg.apply_override("backbone.filters=64,64,64,64");
  EXPECT_EQ(cfg.pre.dc_lr, 0.02);
  EXPECT_EQ(cfg.pretrain, PretrainMode::gap);
  EXPECT_EQ(cfg.data.synth.images_per_class, 120u);
  EXPECT_EQ(cfg.backbone.filters[0], 64u);
  EXPECT_NE(cfg.digest(), before);
}

TEST(Config, BadInputIsConfigError) {
  RunConfig cfg;
  EXPECT_THROW(cfg.apply_override("pretrain.nonsense=1"), ConfigError);
  EXPECT_THROW(cfg.apply_override("pretrain.lr"), ConfigError);
  EXPECT_THROW(cfg.apply_override("pretrain.epochs=many"), ConfigError);
  EXPECT_THROW(cfg.apply_override("run.pooling=max"), ConfigError);
  EXPECT_THROW(RunConfig::parse("[pretrain]\nlr 0.1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("[mystery]\nx = 1\n"), ConfigError);
  cfg = RunConfig{};
  cfg.weights.beta = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.backbone.input_size = 48;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, VariantNames) {
  EXPECT_EQ(variant_name(PretrainMode::none, Pooling::gap), "Zero-GAP");
  EXPECT_EQ(variant_name(PretrainMode::gap, Pooling::attpool), "GAP-AttPool");
  EXPECT_EQ(variant_name(PretrainMode::dc, Pooling::gap), "DC-GAP");
}

TEST(EvalReport, MeanAndConfidenceFormula) {
  const EvalReport r = EvalReport::from_accuracies("x", {0.2, 0.4, 0.6, 0.8}, 3);
  EXPECT_NEAR(r.mean, 0.5, 1e-12);
  const double sd = std::sqrt((0.09 + 0.01 + 0.01 + 0.09) / 3.0);
  EXPECT_NEAR(r.half_width, 1.96 * sd / 2.0, 1e-12);
  EXPECT_EQ(r.count, 4u);
  EXPECT_EQ(r.csv_row(), "x,0.500000," + [&] {
    char b[32];
    std::snprintf(b, sizeof b, "%.6f", r.half_width);
    return std::string(b);
  }() + ",4,3");
  EXPECT_EQ(EvalReport::from_accuracies("c", {0.7, 0.7}).half_width, 0.0);
}

TEST(Checkpoint, BytesRoundTrip) {
  RunConfig cfg = tiny_config();
  Learner learner(cfg.backbone, 6, true, 3);
  Checkpoint ck = make_checkpoint(Stage::metatrained, cfg, learner, {{"metatrain.val_acc", 10, 0.5}});
  ck.rng_key = 123;
  ck.rng_counter = 9;
  const Checkpoint back = Checkpoint::from_bytes(ck.to_bytes());
  EXPECT_EQ(back.stage, Stage::metatrained);
  EXPECT_EQ(back.config.serialize(), cfg.serialize());
  EXPECT_EQ(back.history, ck.history);
  EXPECT_EQ(back.rng_key, 123u);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_TRUE(bitwise_equal(back.tensors[i].second, ck.tensors[i].second)) << ck.tensors[i].first;
  }
  EXPECT_TRUE(back.has_regressor());
  EXPECT_EQ(back.to_bytes(), ck.to_bytes());
}

TEST(Checkpoint, TruncatedBytesAreRejected) {
  RunConfig cfg = tiny_config();
  Learner learner(cfg.backbone, 6, false, 3);
  const std::string bytes = make_checkpoint(Stage::pretrained, cfg, learner).to_bytes();
  EXPECT_ANY_THROW(Checkpoint::from_bytes(bytes.substr(0, bytes.size() - 5)));
  EXPECT_ANY_THROW(Checkpoint::from_bytes("garbage"));
}

TEST(Checkpoint, LearnerRebuildIsExact) {
  RunConfig cfg = tiny_config();
  Learner learner(cfg.backbone, 6, true, 8);
  const Checkpoint ck = make_checkpoint(Stage::metatrained, cfg, learner);
  Learner rebuilt = learner_from(ck);
  const auto a = learner.state(), b = rebuilt.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(*a[i].second, *b[i].second)) << a[i].first;
}

TEST(Checkpoint, MismatchedShapesAreShapeError) {
  RunConfig cfg = tiny_config();
  Learner small(cfg.backbone, 6, false, 1);
  cfg.backbone.filters = {8, 8, 8, 8};
  Learner wide(cfg.backbone, 6, false, 1);
  EXPECT_THROW(load_state(wide, make_checkpoint(Stage::pretrained, tiny_config(), small), false), nk::ShapeError);
}

TEST(Pretrain, TinyRunLearnsAndRecordsHistory) {
  const Checkpoint& ck = tiny_pretrained();
  EXPECT_EQ(ck.stage, Stage::pretrained);
  EXPECT_FALSE(ck.has_regressor());
  std::size_t losses = 0, holdouts = 0;
  for (const MetricRecord& m : ck.history) {
    losses += m.name == "pretrain.loss";
    holdouts += m.name == "pretrain.holdout_top1";
    EXPECT_TRUE(std::isfinite(m.value));
  }
  EXPECT_EQ(losses, 2u);
  EXPECT_EQ(holdouts, 2u);
  EXPECT_EQ(tensor_of(ck, "classifier.weight").dim(1), 6u);
}

TEST(Pretrain, SameSeedSameBytes) {
  const Checkpoint again = pretrain(tiny_config(), tiny_data());
  EXPECT_EQ(again.to_bytes(), tiny_pretrained().to_bytes());
}

TEST(Pretrain, ModeNoneIsRejected) {
  RunConfig cfg = tiny_config();
  cfg.pretrain = PretrainMode::none;
  EXPECT_ANY_THROW(pretrain(cfg, tiny_data()));
}

TEST(MetaFinetune, KeepsTheClassifierBitwiseFrozen) {
  const Checkpoint& init = tiny_pretrained();
  const Checkpoint out = meta_finetune(tiny_config(), tiny_data(), &init);
  EXPECT_EQ(out.stage, Stage::metatrained);
  EXPECT_TRUE(out.has_regressor());
  EXPECT_TRUE(bitwise_equal(tensor_of(out, "classifier.weight"), tensor_of(init, "classifier.weight")));
  EXPECT_TRUE(bitwise_equal(tensor_of(out, "classifier.bias"), tensor_of(init, "classifier.bias")));
  std::size_t vals = 0;
  for (const MetricRecord& m : out.history) vals += m.name == "metatrain.val_acc";
  EXPECT_GE(vals, 2u);
}

TEST(MetaFinetune, ZeroGammaLeavesFreshClassifierUntouched) {
  // Weight decay alone would move a trainable classifier; gamma = 0 never adds it to the optimizer.
  RunConfig cfg = tiny_config();
  cfg.pretrain = PretrainMode::none;
  cfg.weights.gamma = 0.0;
  const Checkpoint out = meta_finetune(cfg, tiny_data(), nullptr);
  Learner fresh(cfg.backbone, tiny_data().base_class_count(), true, cfg.seed);
  const Checkpoint start = make_checkpoint(Stage::metatrained, cfg, fresh);
  EXPECT_TRUE(bitwise_equal(tensor_of(out, "classifier.weight"), tensor_of(start, "classifier.weight")));
  EXPECT_FALSE(bitwise_equal(tensor_of(out, "regressor.layer1.weight"), tensor_of(start, "regressor.layer1.weight")));
}

TEST(MetaFinetune, SameSeedSameBytes) {
  const Checkpoint& init = tiny_pretrained();
  const Checkpoint a = meta_finetune(tiny_config(), tiny_data(), &init);
  const Checkpoint b = meta_finetune(tiny_config(), tiny_data(), &init);
  EXPECT_EQ(a.to_bytes(), b.to_bytes());
}

TEST(Evaluate, IndependentOfThreadCount) {
  const RunConfig cfg = tiny_config();
  const auto episodes = eval_episodes(cfg, tiny_data(), Split::meta_test);
  ASSERT_EQ(episodes.size(), 20u);
  const EvalReport one = evaluate(tiny_pretrained(), tiny_data(), episodes, 1);
  const EvalReport four = evaluate(tiny_pretrained(), tiny_data(), episodes, 4);
  EXPECT_EQ(one.accuracies, four.accuracies);
  EXPECT_EQ(one.variant, "dc-pretrained/no-finetune");
  for (double a : one.accuracies) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Evaluate, PoolingEmbeddingsAreChunkInvariant) {
  RunConfig cfg = tiny_config();
  Learner learner(cfg.backbone, 6, true, 2);
  std::vector<std::size_t> imgs(70);
  for (std::size_t i = 0; i < imgs.size(); ++i) imgs[i] = i;
  const auto all = pooled_embeddings(learner, tiny_data(), imgs, Pooling::attpool);
  const std::vector<std::size_t> tail(imgs.begin() + 60, imgs.end());
  const auto part = pooled_embeddings(learner, tiny_data(), tail, Pooling::attpool);
  for (std::size_t i = 0; i < tail.size(); ++i)
    for (std::size_t k = 0; k < part[i].size(); ++k) EXPECT_NEAR(part[i][k], all[60 + i][k], 1e-5);
}

TEST(Ablation, SixCellsShareOneManifest) {
  RunConfig cfg = tiny_config();
  cfg.pre.epochs = 1;
  cfg.pre.milestones = {};
  cfg.meta.batches = 2;
  cfg.meta.val_every = 2;
  cfg.eval.tasks = 10;
  const AblationResult res = ablate(cfg, tiny_data());
  ASSERT_EQ(res.cells.size(), 6u);
  EXPECT_EQ(std::count(res.manifest.begin(), res.manifest.end(), '\n'), 10);
  for (const AblationCell& c : res.cells) {
    EXPECT_TRUE(c.classifier_frozen_ok) << c.name;
    EXPECT_EQ(c.report.count, 10u);
  }
  EXPECT_EQ(res.cell(PretrainMode::dc, Pooling::attpool).name, "DC-AttPool");
  const std::string csv = res.csv();
  EXPECT_EQ(csv.rfind(EvalReport::csv_header(), 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_NE(res.grid_text().find("AttPool"), std::string::npos);
  EXPECT_EQ(ablate(cfg, tiny_data()).csv(), csv);
}

TEST(CrossDomain, NamesTheVariant) {
  SynthSpec target_spec = tiny_config().data.synth;
  target_spec.style = GlyphStyle::blocks;
  target_spec.seed = 5;
  const Dataset target = synth_generate(target_spec);
  const EvalReport r = cross_domain_eval(tiny_pretrained(), target, tiny_config());
  EXPECT_NE(r.variant.find("/cross-domain"), std::string::npos);
  EXPECT_EQ(r.count, 20u);
}

TEST(CheckpointCache, SecondRequestIsAByteIdenticalHit) {
  const fs::path dir = fs::temp_directory_path() / ("dcap_cache_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  CheckpointCache cache(dir.string());
  RunConfig cfg = tiny_config();
  const Checkpoint first = cache.metatrained(cfg, tiny_data());
  EXPECT_EQ(cache.hits(), 0u);
  const Checkpoint second = cache.metatrained(cfg, tiny_data());
  EXPECT_EQ(cache.hits(), 1u);
  EXPECT_EQ(first.to_bytes(), second.to_bytes());
  EXPECT_EQ(cache.pretrained(cfg, tiny_data()).to_bytes(), tiny_pretrained().to_bytes());

  // Pooling and evaluation settings do not touch the pre-training key.
  RunConfig other = cfg;
  other.pooling = Pooling::gap;
  other.eval.tasks = 7;
  other.threads = 3;
  EXPECT_EQ(cache.pretrain_key(other, tiny_data()), cache.pretrain_key(cfg, tiny_data()));
  EXPECT_NE(cache.meta_key(other, tiny_data()), cache.meta_key(cfg, tiny_data()));
  other.pre.epochs = 3;
  EXPECT_NE(cache.pretrain_key(other, tiny_data()), cache.pretrain_key(cfg, tiny_data()));
  fs::remove_all(dir);
}
