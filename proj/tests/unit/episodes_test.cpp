#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <unistd.h>

#include "dcap/episodes.hpp"
#include "dcap/errors.hpp"
#include "dcap/selftest.hpp"
#include "support.hpp"

using namespace dcap;
using dcap::tsup::tiny_dataset;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("dcap_ep_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.train_classes = 6;
  s.val_classes = 2;
  s.test_classes = 3;
  s.images_per_class = 20;
  s.extent = 32;
  s.seed = seed;
  return s;
}

// Centre of the best zero-mean normalized cross-correlation match of tmpl
// (side t) inside an e x e image.
std::pair<double, double> template_match(std::span<const std::uint8_t> img, std::size_t e, const std::vector<float>& tmpl,
                                         std::size_t t) {
  double tmean = 0;
  for (float v : tmpl) tmean += v;
  tmean /= static_cast<double>(tmpl.size());
  double best = -2, bx = 0, by = 0;
  for (std::size_t y0 = 0; y0 + t <= e; ++y0)
    for (std::size_t x0 = 0; x0 + t <= e; ++x0) {
      double imean = 0;
      for (std::size_t y = 0; y < t; ++y)
        for (std::size_t x = 0; x < t; ++x) imean += img[(y0 + y) * e + x0 + x];
      imean /= static_cast<double>(t * t);
      double num = 0, ni = 0, nt = 0;
      for (std::size_t y = 0; y < t; ++y)
        for (std::size_t x = 0; x < t; ++x) {
          const double a = img[(y0 + y) * e + x0 + x] - imean, b = tmpl[y * t + x] - tmean;
          num += a * b;
          ni += a * a;
          nt += b * b;
        }
      const double score = num / std::sqrt(ni * nt + 1e-12);
      if (score > best) {
        best = score;
        bx = x0 + t / 2.0;
        by = y0 + t / 2.0;
      }
    }
  return {bx, by};
}

}  // namespace

TEST(HorizontalSplit, ThousandImagesAtTenPercent) {
  const Dataset ds = tiny_dataset(1, 1, 1, 1000);
  const auto classes = ds.classes_in(Split::meta_train);
  const HorizontalSplit hs = horizontal_split(ds, classes, 0.1, 7);
  EXPECT_EQ(hs.holdout.size(), 100u);
  EXPECT_EQ(hs.fit.size(), 900u);
}

TEST(HorizontalSplit, HalfOfTen) {
  const Dataset ds = tiny_dataset(2, 1, 1, 10);
  const auto classes = ds.classes_in(Split::meta_train);
  const HorizontalSplit hs = horizontal_split(ds, classes, 0.5, 1);
  EXPECT_EQ(hs.holdout.size(), 10u);
  EXPECT_EQ(hs.fit.size(), 10u);
  for (std::size_t c : classes) {
    std::size_t held = 0;
    for (std::size_t i : hs.holdout) held += ds.label(i) == c;
    EXPECT_EQ(held, 5u);
  }
}

TEST(HorizontalSplit, PartitionIsDeterministicAndDisjoint) {
  const Dataset ds = tiny_dataset(4, 1, 1, 30);
  const auto classes = ds.classes_in(Split::meta_train);
  const HorizontalSplit a = horizontal_split(ds, classes, 0.2, 11), b = horizontal_split(ds, classes, 0.2, 11);
  EXPECT_EQ(a.fit, b.fit);
  EXPECT_EQ(a.holdout, b.holdout);
  EXPECT_NE(a.holdout, horizontal_split(ds, classes, 0.2, 12).holdout);
  std::set<std::size_t> all(a.fit.begin(), a.fit.end());
  for (std::size_t i : a.holdout) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 120u);
}

TEST(HorizontalSplit, RejectsBadRateAndTinyClasses) {
  const Dataset ds = tiny_dataset(1, 1, 1, 3);
  const auto classes = ds.classes_in(Split::meta_train);
  EXPECT_THROW(horizontal_split(ds, classes, 0.0, 1), ConfigError);
  EXPECT_THROW(horizontal_split(ds, classes, 1.0, 1), ConfigError);
  EXPECT_THROW(horizontal_split(ds, classes, 0.1, 1), SamplingError);
}

TEST(SampleEpisode, FiveWayOneShotHasEightyImages) {
  const Dataset ds = tiny_dataset(8, 1, 1, 20);
  const Episode ep = sample_episode(ds, Split::meta_train, EpisodeShape{5, 1, 15}, CounterRng(1));
  EXPECT_EQ(ep.support.size() + ep.queries.size(), 80u);
  EXPECT_NO_THROW(ep.check_invariants());
}

TEST(SampleEpisode, FiveWayFiveShotSplitsTwentyFiveAndFifty) {
  const Dataset ds = tiny_dataset(8, 1, 1, 20);
  const Episode ep = sample_episode(ds, Split::meta_train, EpisodeShape{5, 5, 10}, CounterRng(2));
  EXPECT_EQ(ep.support.size(), 25u);
  EXPECT_EQ(ep.queries.size(), 50u);
}

TEST(SampleEpisode, DrawingEveryClassUsesEachOnce) {
  const Dataset ds = tiny_dataset(2, 1, 5, 6);
  const Episode ep = sample_episode(ds, Split::meta_test, EpisodeShape{5, 1, 2}, CounterRng(3));
  std::vector<std::size_t> cls = ep.classes;
  std::sort(cls.begin(), cls.end());
  EXPECT_EQ(cls, ds.classes_in(Split::meta_test));
}

TEST(SampleEpisode, DeficitsAreNamed) {
  const Dataset ds = tiny_dataset(3, 1, 1, 4);
  try {
    sample_episode(ds, Split::meta_train, EpisodeShape{5, 1, 1}, CounterRng(0));
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find('5'), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos) << e.what();
  }
  EXPECT_THROW(sample_episode(ds, Split::meta_train, EpisodeShape{2, 2, 3}, CounterRng(0)), SamplingError);
}

TEST(SampleEpisode, RandomShapesSatisfyInvariants) {
  const Dataset ds = tiny_dataset(12, 4, 6, 9);
  CounterRng gen(99);
  for (std::uint64_t t = 0; t < 1000; ++t) {
    const Split split = kAllSplits[gen.below(3)];
    const std::size_t classes = ds.classes_in(split).size();
    EpisodeShape shape;
    shape.way = 2 + gen.below(classes - 1);
    shape.shot = 1 + gen.below(4);
    shape.query = 1 + gen.below(9 - shape.shot);
    const Episode ep = sample_episode(ds, split, shape, gen.child(t), t);
    ASSERT_NO_THROW(ep.check_invariants()) << ep.manifest_line();

    // label remap is a bijection onto 0..N-1 and agrees with the class list
    std::set<std::size_t> seen;
    for (const auto* items : {&ep.support, &ep.queries})
      for (const EpisodeItem& it : *items) {
        ASSERT_LT(it.label, shape.way);
        ASSERT_EQ(ds.label(it.image), ep.classes[it.label]);
        ASSERT_EQ(ds.split_of_image(it.image), split);
        ASSERT_TRUE(seen.insert(it.image).second) << "image drawn twice";
        if (split == Split::meta_train) {
          ASSERT_EQ(it.base_label, ds.base_label(ds.label(it.image)));
        } else {
          ASSERT_EQ(it.base_label, kNoBaseLabel);
        }
      }
    ASSERT_EQ(std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size(), shape.way);
  }
}

TEST(SampleEpisode, ExhaustiveClassDrawKeepsSupportAndQueryDisjoint) {
  const Dataset ds = tiny_dataset(5, 1, 1, 6);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Episode ep = sample_episode(ds, Split::meta_train, EpisodeShape{5, 2, 4}, CounterRng(s));
    std::set<std::size_t> support;
    for (const EpisodeItem& it : ep.support) support.insert(it.image);
    for (const EpisodeItem& it : ep.queries) ASSERT_EQ(support.count(it.image), 0u);
  }
}

TEST(SampleEpisode, InvariantCheckCatchesTampering) {
  const Dataset ds = tiny_dataset(5, 1, 1, 6);
  Episode ep = sample_episode(ds, Split::meta_train, EpisodeShape{3, 1, 2}, CounterRng(4));
  ep.queries[0].image = ep.support[0].image;
  EXPECT_THROW(ep.check_invariants(), InvariantViolation);
}

TEST(ConsistentEvalSet, ReproducibleAcrossRunsAndThreads) {
  const Dataset ds = tiny_dataset(2, 2, 6, 20);
  const EpisodeShape shape{5, 1, 15};
  const auto a = consistent_eval_set(ds, Split::meta_test, shape, 42, 200, 1);
  const auto b = consistent_eval_set(ds, Split::meta_test, shape, 42, 200, 1);
  const auto c = consistent_eval_set(ds, Split::meta_test, shape, 42, 200, 4);
  EXPECT_EQ(episode_manifest(a), episode_manifest(b));
  EXPECT_EQ(episode_manifest(a), episode_manifest(c));
  ASSERT_EQ(a.size(), 200u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].task_id, i);
}

TEST(ConsistentEvalSet, DefaultCountIsOneThousand) {
  const Dataset ds = tiny_dataset(2, 2, 5, 16);
  EXPECT_EQ(consistent_eval_set(ds, Split::meta_test, EpisodeShape{}, 1).size(), 1000u);
}

TEST(ConsistentEvalSet, SeedsGiveDifferentFirstEpisodes) {
  const Dataset ds = tiny_dataset(2, 2, 8, 30);
  std::set<std::string> firsts;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    firsts.insert(consistent_eval_set(ds, Split::meta_test, EpisodeShape{}, seed, 1)[0].manifest_line().substr(7));
  EXPECT_EQ(firsts.size(), 5u);
}

TEST(ConsistentEvalSet, ManifestLineFormat) {
  const Dataset ds = tiny_dataset(2, 1, 1, 4);
  const Episode ep = sample_episode(ds, Split::meta_train, EpisodeShape{2, 1, 1}, CounterRng(0), 17);
  const std::string line = ep.manifest_line();
  EXPECT_EQ(line.rfind("task=17 classes=", 0), 0u) << line;
  EXPECT_NE(line.find(" support="), std::string::npos);
  EXPECT_NE(line.find(" query="), std::string::npos);
}

TEST(EpisodeProtocol, LibraryChecksPass) {
  SynthSpec spec = small_spec();
  spec.val_classes = spec.test_classes = 5;
  const Dataset ds = synth_generate(spec);
  for (const CheckResult& r : episode_protocol_checks(ds, 5, 300)) EXPECT_TRUE(r.passed) << format_check(r);
}

TEST(Dataset, SplitsAreDisjointAndAuditPasses) {
  const Dataset ds = synth_generate(small_spec());
  EXPECT_NO_THROW(ds.audit());
  EXPECT_NO_THROW(ds.validate(16));
  EXPECT_EQ(ds.base_class_count(), 6u);
  for (std::size_t c : ds.classes_in(Split::meta_val)) EXPECT_EQ(ds.base_label(c), kNoBaseLabel);
  std::set<std::string> names;
  for (std::size_t c = 0; c < ds.class_count(); ++c) EXPECT_TRUE(names.insert(ds.class_info(c).name).second);
}

TEST(Dataset, ClassesMustArriveInSplitOrder) {
  Dataset ds(1, 16);
  ds.add_class("a", Split::meta_val);
  EXPECT_ANY_THROW(ds.add_class("b", Split::meta_train));
}

TEST(Dataset, BatchScalesToUnitRangeAndFlips) {
  Dataset ds(1, 16);
  const std::size_t c = ds.add_class("a", Split::meta_train);
  std::vector<std::uint8_t> px(256, 0);
  px[0] = 255;
  ds.add_image(c, px);
  const std::vector<std::size_t> idx{0};
  const std::vector<std::uint8_t> flip{1};
  const Tensor<float> plain = ds.batch<float>(idx), mirrored = ds.batch<float>(idx, flip);
  EXPECT_FLOAT_EQ(plain[0], 1.0f);
  EXPECT_FLOAT_EQ(plain[1], -1.0f);
  EXPECT_FLOAT_EQ(mirrored[15], 1.0f);
  EXPECT_FLOAT_EQ(mirrored[0], -1.0f);
}

TEST(Synth, SameSpecSameBytes) {
  const Dataset a = synth_generate(small_spec(8)), b = synth_generate(small_spec(8));
  EXPECT_EQ(a.pixels(), b.pixels());
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), synth_generate(small_spec(9)).digest());
}

TEST(Synth, SalientGlyphIsFoundAtTheCentre) {
  SynthSpec spec = small_spec();
  spec.regime_weights = {1.0, 0.0, 0.0};
  spec.noise = 0.0;
  spec.extent = 64;
  spec.images_per_class = 3;
  const Dataset ds = synth_generate(spec);
  for (std::size_t cls = 0; cls < ds.class_count(); ++cls) {
    for (std::size_t i : ds.class_info(cls).images) {
      const ImageMeta& m = ds.meta(i);
      ASSERT_EQ(m.regime, Regime::salient_centered);
      const std::size_t t = static_cast<std::size_t>(std::lround(m.glyph_size));
      const auto [x, y] = template_match(ds.image(i), 64, synth_glyph(spec, cls, t), t);
      EXPECT_LE(std::hypot(x - 32.0, y - 32.0), 6.0) << "class " << cls << " image " << i;
    }
  }
}

TEST(Synth, DistractorRegimeAlwaysAddsClutter) {
  SynthSpec spec = small_spec();
  spec.regime_weights = {0.0, 0.0, 1.0};
  const Dataset ds = synth_generate(spec);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.meta(i).regime, Regime::small_distractors);
    EXPECT_GE(ds.meta(i).distractors, 1u);
  }
}

TEST(Synth, RegimeMixFollowsWeights) {
  SynthSpec spec = small_spec();
  spec.images_per_class = 100;
  const Dataset ds = synth_generate(spec);
  std::array<double, 3> counts{};
  for (std::size_t i = 0; i < ds.size(); ++i) counts[static_cast<int>(ds.meta(i).regime)] += 1;
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(counts[k] / ds.size(), spec.regime_weights[k], 0.05);
}

TEST(Synth, RejectsInvalidSpecs) {
  SynthSpec spec = small_spec();
  spec.extent = 16;
  EXPECT_THROW(synth_generate(spec), ConfigError);
  spec = small_spec();
  spec.extent = 40;
  EXPECT_THROW(synth_generate(spec), ConfigError);
  spec = small_spec();
  spec.regime_weights = {0.5, 0.5, 0.5};
  EXPECT_THROW(synth_generate(spec), ConfigError);
}

TEST(ImageDir, EmptyClassDirectoryIsNamed) {
  TempDir tmp;
  fs::create_directories(tmp.path() / "meta-train" / "zebra");
  try {
    load_image_dir(tmp.path().string());
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos) << e.what();
  }
}

TEST(ImageDir, TwoSplitsThreeClassesFourImages) {
  TempDir tmp;
  RasterImage img{16, 16, 1, std::vector<std::uint8_t>(256, 7)};
  for (const char* split : {"meta-train", "meta-test"})
    for (const char* cls : {"a", "b", "c"}) {
      fs::create_directories(tmp.path() / split / cls);
      for (int i = 0; i < 4; ++i) write_pnm((tmp.path() / split / cls / (std::to_string(i) + ".pgm")).string(), img);
    }
  const Dataset ds = load_image_dir(tmp.path().string());
  EXPECT_EQ(ds.size(), 24u);
  EXPECT_EQ(ds.class_count(), 6u);
  EXPECT_EQ(ds.classes_in(Split::meta_val).size(), 0u);
}

TEST(ImageDir, InconsistentExtentsAndBadLayoutAreErrors) {
  TempDir tmp;
  fs::create_directories(tmp.path() / "meta-train" / "a");
  write_pnm((tmp.path() / "meta-train" / "a" / "0.pgm").string(), RasterImage{16, 16, 1, std::vector<std::uint8_t>(256)});
  write_pnm((tmp.path() / "meta-train" / "a" / "1.pgm").string(), RasterImage{32, 32, 1, std::vector<std::uint8_t>(1024)});
  EXPECT_THROW(load_image_dir(tmp.path().string()), IngestError);
  TempDir other;
  fs::create_directories(other.path() / "training");
  EXPECT_THROW(load_image_dir(other.path().string()), IngestError);
  EXPECT_THROW(load_image_dir((other.path() / "missing").string()), IngestError);
}

TEST(ImageDir, SynthRoundTripIsExact) {
  TempDir tmp;
  const Dataset ds = synth_generate(small_spec(4));
  export_image_dir(ds, tmp.path().string());
  const Dataset back = load_image_dir(tmp.path().string());
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.pixels(), ds.pixels());
  for (std::size_t c = 0; c < ds.class_count(); ++c) {
    EXPECT_EQ(back.class_info(c).name, ds.class_info(c).name);
    EXPECT_EQ(back.class_info(c).split, ds.class_info(c).split);
  }
  const std::vector<std::size_t> idx{0, 5, 17};
  EXPECT_EQ(back.batch<float>(idx), ds.batch<float>(idx));
}

TEST(ImageDir, ColourPnmRoundTrip) {
  TempDir tmp;
  RasterImage img{4, 4, 3, {}};
  for (std::size_t i = 0; i < 48; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 5));
  const std::string path = (tmp.path() / "x.ppm").string();
  write_pnm(path, img, "note");
  const RasterImage back = read_pnm(path);
  EXPECT_EQ(back.channels, 3u);
  EXPECT_EQ(back.pixels, img.pixels);
}
