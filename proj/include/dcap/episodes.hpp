#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcap/rng.hpp"
#include "dcap/tensor.hpp"

namespace dcap {

using nk::Shape;
using nk::Tensor;

enum class Split { meta_train, meta_val, meta_test };

inline constexpr std::array<Split, 3> kAllSplits{Split::meta_train, Split::meta_val, Split::meta_test};

/// "meta-train", "meta-val", "meta-test" (also the directory names on disk).
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

/// Base label carried by images outside the meta-training split.
inline constexpr std::size_t kNoBaseLabel = std::numeric_limits<std::size_t>::max();

enum class Regime { salient_centered, small_clean, small_distractors };
std::string_view to_string(Regime r);

/// Generator bookkeeping for one synthetic image (absent for loaded data).
struct ImageMeta {
  Regime regime = Regime::salient_centered;
  double center_x = 0, center_y = 0;  // target glyph center, pixels
  double glyph_size = 0;              // target glyph side, pixels
  std::size_t distractors = 0;
};

struct ClassInfo {
  std::string name;
  Split split = Split::meta_train;
  std::vector<std::size_t> images;  // dataset image indices
};

/// In-memory image collection. Images are 8-bit, row-major [C, S, S], stored
/// back to back. Classes are ordered meta-train, meta-val, meta-test; within a
/// split by registration order.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t channels, std::size_t extent);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t extent() const noexcept { return extent_; }
  std::size_t image_bytes() const noexcept { return channels_ * extent_ * extent_; }
  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t class_count() const noexcept { return classes_.size(); }

  /// Registers a class; classes must be added in split order.
  std::size_t add_class(std::string name, Split split);
  std::size_t add_image(std::size_t cls, std::span<const std::uint8_t> pixels, const ImageMeta* meta = nullptr);

  const ClassInfo& class_info(std::size_t cls) const { return classes_.at(cls); }
  std::size_t label(std::size_t image) const { return labels_.at(image); }
  Split split_of_image(std::size_t image) const { return classes_[labels_.at(image)].split; }
  std::span<const std::uint8_t> image(std::size_t i) const;
  const std::vector<std::uint8_t>& pixels() const noexcept { return pixels_; }
  bool has_meta() const noexcept { return !meta_.empty(); }
  const ImageMeta& meta(std::size_t image) const { return meta_.at(image); }

  /// Class ids belonging to a split, ascending.
  std::vector<std::size_t> classes_in(Split s) const;
  /// Index of cls among the meta-training classes, kNoBaseLabel otherwise.
  std::size_t base_label(std::size_t cls) const;
  std::size_t base_class_count() const { return classes_in(Split::meta_train).size(); }

  /// Checks structural invariants and that every class has at least
  /// min_per_class images. Throws InvariantViolation or SamplingError.
  void validate(std::size_t min_per_class = 1) const;
  /// Global leakage audit: every image belongs to exactly one class and
  /// one split, and class lists agree with per-image labels.
  void audit() const;

  /// Images as floats in [-1, 1], shape [n, C, S, S]; flip[i] mirrors image i
  /// horizontally. flip may be empty.
  template <typename T = float>
  Tensor<T> batch(std::span<const std::size_t> images, std::span<const std::uint8_t> flip = {}) const;

  /// FNV-1a digest over extents, class registry, labels and pixels.
  std::uint64_t digest() const;

 private:
  std::size_t channels_ = 1, extent_ = 0;
  std::vector<std::uint8_t> pixels_;
  std::vector<std::size_t> labels_;
  std::vector<ClassInfo> classes_;
  std::vector<ImageMeta> meta_;
};

struct EpisodeShape {
  std::size_t way = 5, shot = 1, query = 15;

  std::size_t support_count() const noexcept { return way * shot; }
  std::size_t query_count() const noexcept { return way * query; }
  std::size_t total() const noexcept { return way * (shot + query); }
  void validate() const;  // ConfigError
};

struct EpisodeItem {
  std::size_t image = 0;
  std::size_t label = 0;       // episode label in [0, way)
  std::size_t base_label = 0;  // kNoBaseLabel outside meta-train
};

/// One N-way K-shot task. Support and query lists are class-major: all
/// items of episode label 0 first.
struct Episode {
  std::uint64_t task_id = 0;
  EpisodeShape shape;
  std::vector<std::size_t> classes;  // dataset class id of episode label t
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> queries;

  /// "task=<id> classes=a,b support=i,j query=k,l"
  std::string manifest_line() const;
  /// Throws InvariantViolation when an Episode invariant fails.
  void check_invariants() const;
};

/// Samples N classes of the split without replacement, then K+Q images
/// per class without replacement. Throws SamplingError naming the deficit.
Episode sample_episode(const Dataset& ds, Split split, const EpisodeShape& shape, CounterRng rng,
                       std::uint64_t task_id = 0);

/// Episode i is drawn from CounterRng(seed).child(i), so the list does not
/// depend on the number of worker threads.
std::vector<Episode> consistent_eval_set(const Dataset& ds, Split split, const EpisodeShape& shape, std::uint64_t seed,
                                         std::size_t count = 1000, std::size_t threads = 1);

/// One manifest line per episode, newline terminated.
std::string episode_manifest(std::span<const Episode> episodes);

struct HorizontalSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> holdout;
};

/// Per-class random partition of the given classes' images with
/// round(rate * n) images held out. Throws ConfigError for rate outside
/// (0, 1) and SamplingError when a class would get an empty part.
HorizontalSplit horizontal_split(const Dataset& ds, std::span<const std::size_t> classes, double rate,
                                 std::uint64_t seed);

enum class GlyphStyle { strokes, blocks };
std::string_view to_string(GlyphStyle s);
GlyphStyle parse_glyph_style(std::string_view s);

/// Procedural dataset description. Each class owns one glyph; images place
/// it according to a regime drawn from the mix weights.
struct SynthSpec {
  std::size_t train_classes = 20, val_classes = 5, test_classes = 5;
  std::size_t images_per_class = 60;
  std::size_t extent = 64;
  std::size_t channels = 1;
  /// salient-centered, small-object-clean, small-object-with-distractors.
  std::array<double, 3> regime_weights{0.4, 0.3, 0.3};
  /// Standard deviation of additive Gaussian pixel noise, in [0, 1] units.
  double noise = 0.08;
  GlyphStyle style = GlyphStyle::strokes;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
  bool operator==(const SynthSpec&) const = default;
};

Dataset synth_generate(const SynthSpec& spec);

/// Renders the glyph of class index `glyph` (over all splits, in class
/// order) for the SynthSpec's vocabulary: a size x size intensity mask in [0, 1].
std::vector<float> synth_glyph(const SynthSpec& spec, std::size_t glyph, std::size_t size);

struct RasterImage {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

/// Binary PGM (P5, one channel) or PPM (P6, three channels), maxval 255.
/// An optional single comment line is written after the magic number.
void write_pnm(const std::string& path, const RasterImage& img, std::string_view comment = {});
RasterImage read_pnm(const std::string& path);

/// Writes root/<split>/<class>/<NNNN>.pgm|ppm.
void export_image_dir(const Dataset& ds, const std::string& root);
/// Reads root/<split>/<class>/<image>; splits in meta-train, meta-val,
/// meta-test order, classes and files lexicographic. Throws IngestError.
Dataset load_image_dir(const std::string& root);

}  // namespace dcap
