#pragma once

#include <span>
#include <string>
#include <vector>

#include "dcap/pipeline.hpp"

namespace dcap {

/// Descriptors of one image, channel-major [d, h, w] like a slice of a
/// backbone output.
struct FeatureMap {
  std::size_t d = 0, h = 0, w = 0;
  std::vector<double> values;

  std::size_t sites() const noexcept { return h * w; }
  /// Descriptor at site j = y * w + x.
  std::vector<double> descriptor(std::size_t j) const;

  static FeatureMap from_batch(const Tensor<float>& maps, std::size_t image);
  /// Builds a map from per-site descriptors (row-major sites).
  static FeatureMap from_descriptors(std::size_t h, std::size_t w, const std::vector<std::vector<double>>& desc);
};

/// Pairwise cosine similarities between the r descriptors of one map.
struct SimilarityMatrix {
  std::size_t r = 0;
  std::vector<double> values;       // r x r, row-major
  std::vector<bool> zero_descriptor;  // rows and columns forced to 0

  double at(std::size_t i, std::size_t j) const { return values[i * r + j]; }
  bool has_zero() const;
  /// Symmetric, unit diagonal for nonzero descriptors, entries in [-1, 1].
  /// Throws InvariantViolation.
  void check_invariants(double tol = 1e-9) const;
  std::string csv() const;
};

SimilarityMatrix descriptor_cosine_matrix(const FeatureMap& map);

/// Mean cosine over all unordered 8-connected neighbor pairs of the grid.
/// Pairs involving a zero descriptor count as 0. Throws
/// std::invalid_argument when the map has fewer than 4 sites.
double neighbor_consistency(const FeatureMap& map);

struct NormStats {
  double mean = 0;
  double stddev = 0;  // population
  double cv() const { return mean > 0 ? stddev / mean : 0.0; }
};

NormStats descriptor_norm_stats(const FeatureMap& map);

/// Writes the normalized grid, nearest-upsampled to extent x extent, as a
/// PGM whose brightest pixel is the largest alpha, plus "<path>.csv" with
/// columns y,x,raw,normalized. Throws IngestError when unwritable.
void export_attention_map(const AttentionMap& att, std::size_t extent, const std::string& path);
/// Parses a CSV written by export_attention_map.
AttentionMap read_attention_csv(const std::string& path, std::size_t h, std::size_t w);

/// Eval-mode feature maps of the given images, in order.
std::vector<FeatureMap> feature_maps(Learner& learner, const Dataset& ds, std::span<const std::size_t> images);
/// Eval-mode attention maps; the learner must carry a regressor.
std::vector<AttentionMap> attention_maps(Learner& learner, const Dataset& ds, std::span<const std::size_t> images);

struct ConsistencySummary {
  std::size_t images = 0;
  double neighbor_consistency = 0;  // dataset mean
  double norm_cv = 0;               // mean of per-image stddev/mean
  std::vector<double> per_image_consistency;
  std::vector<NormStats> per_image_norms;
};

ConsistencySummary summarize_consistency(std::span<const FeatureMap> maps);

/// The first `per_class` images of every meta-test class.
std::vector<std::size_t> analysis_images(const Dataset& ds, std::size_t per_class);

}  // namespace dcap
