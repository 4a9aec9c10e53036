#include "dcap/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dcap/errors.hpp"

namespace dcap {

std::vector<double> FeatureMap::descriptor(std::size_t j) const {
  const std::size_t r = sites();
  std::vector<double> out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = values[k * r + j];
  return out;
}

FeatureMap FeatureMap::from_batch(const Tensor<float>& maps, std::size_t image) {
  if (maps.rank() != 4 || image >= maps.dim(0)) {
    throw nk::ShapeError("FeatureMap::from_batch", "image " + std::to_string(image) + " of " + nk::shape_str(maps.shape()));
  }
  FeatureMap m;
  m.d = maps.dim(1);
  m.h = maps.dim(2);
  m.w = maps.dim(3);
  const std::size_t n = m.d * m.h * m.w;
  m.values.assign(maps.data() + image * n, maps.data() + (image + 1) * n);
  return m;
}

FeatureMap FeatureMap::from_descriptors(std::size_t h, std::size_t w, const std::vector<std::vector<double>>& desc) {
  if (desc.size() != h * w || desc.empty()) throw std::invalid_argument("from_descriptors: need h*w descriptors");
  FeatureMap m;
  m.d = desc[0].size();
  m.h = h;
  m.w = w;
  m.values.assign(m.d * h * w, 0.0);
  for (std::size_t j = 0; j < desc.size(); ++j) {
    if (desc[j].size() != m.d) throw std::invalid_argument("from_descriptors: ragged descriptors");
    for (std::size_t k = 0; k < m.d; ++k) m.values[k * h * w + j] = desc[j][k];
  }
  return m;
}

namespace {

std::vector<double> site_norms(const FeatureMap& m) {
  const std::size_t r = m.sites();
  std::vector<double> n(r, 0.0);
  for (std::size_t k = 0; k < m.d; ++k)
    for (std::size_t j = 0; j < r; ++j) n[j] += m.values[k * r + j] * m.values[k * r + j];
  for (double& v : n) v = std::sqrt(v);
  return n;
}

double cosine(const FeatureMap& m, const std::vector<double>& norms, std::size_t a, std::size_t b) {
  if (norms[a] == 0 || norms[b] == 0) return 0.0;
  const std::size_t r = m.sites();
  double s = 0;
  for (std::size_t k = 0; k < m.d; ++k) s += m.values[k * r + a] * m.values[k * r + b];
  return std::clamp(s / (norms[a] * norms[b]), -1.0, 1.0);
}

}  // namespace

bool SimilarityMatrix::has_zero() const { return std::find(zero_descriptor.begin(), zero_descriptor.end(), true) != zero_descriptor.end(); }

void SimilarityMatrix::check_invariants(double tol) const {
  if (values.size() != r * r || zero_descriptor.size() != r) throw InvariantViolation("similarity matrix: size mismatch");
  for (std::size_t i = 0; i < r; ++i) {
    if (!zero_descriptor[i] && std::abs(at(i, i) - 1.0) > tol) throw InvariantViolation("similarity matrix: diagonal is not 1");
    for (std::size_t j = 0; j < r; ++j) {
      const double v = at(i, j);
      if (!(v >= -1.0 - tol && v <= 1.0 + tol)) throw InvariantViolation("similarity matrix: entry outside [-1, 1]");
      if (std::abs(v - at(j, i)) > tol) throw InvariantViolation("similarity matrix: not symmetric");
    }
  }
}

std::string SimilarityMatrix::csv() const {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      std::snprintf(buf, sizeof buf, "%s%.6f", j ? "," : "", at(i, j));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

SimilarityMatrix descriptor_cosine_matrix(const FeatureMap& map) {
  const std::size_t r = map.sites();
  const std::vector<double> norms = site_norms(map);
  SimilarityMatrix s;
  s.r = r;
  s.values.assign(r * r, 0.0);
  s.zero_descriptor.resize(r);
  for (std::size_t i = 0; i < r; ++i) s.zero_descriptor[i] = norms[i] == 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (!s.zero_descriptor[i]) s.values[i * r + i] = 1.0;
    for (std::size_t j = i + 1; j < r; ++j) s.values[i * r + j] = s.values[j * r + i] = cosine(map, norms, i, j);
  }
  return s;
}

double neighbor_consistency(const FeatureMap& map) {
  if (map.sites() < 4) throw std::invalid_argument("neighbor_consistency: need at least 4 sites");
  const std::vector<double> norms = site_norms(map);
  double sum = 0;
  std::size_t pairs = 0;
  // Forward half of the 8-neighborhood visits each unordered pair once.
  const int offsets[4][2] = {{0, 1}, {1, -1}, {1, 0}, {1, 1}};
  const auto h = static_cast<long>(map.h), w = static_cast<long>(map.w);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (const auto& o : offsets) {
        const long y2 = y + o[0], x2 = x + o[1];
        if (y2 < 0 || y2 >= h || x2 < 0 || x2 >= w) continue;
        sum += cosine(map, norms, static_cast<std::size_t>(y * w + x), static_cast<std::size_t>(y2 * w + x2));
        ++pairs;
      }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

NormStats descriptor_norm_stats(const FeatureMap& map) {
  const std::vector<double> n = site_norms(map);
  NormStats s;
  if (n.empty()) return s;
  for (double v : n) s.mean += v;
  s.mean /= static_cast<double>(n.size());
  double ss = 0;
  for (double v : n) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(n.size()));
  return s;
}

void export_attention_map(const AttentionMap& att, std::size_t extent, const std::string& path) {
  const std::size_t r = att.h * att.w;
  if (r == 0 || att.normalized.size() != r || att.raw.size() != r) {
    throw std::invalid_argument("export_attention_map: map size does not match its grid");
  }
  const double peak = *std::max_element(att.normalized.begin(), att.normalized.end());
  RasterImage img;
  img.width = img.height = extent;
  img.pixels.resize(extent * extent);
  for (std::size_t y = 0; y < extent; ++y)
    for (std::size_t x = 0; x < extent; ++x) {
      const std::size_t gy = y * att.h / extent, gx = x * att.w / extent;
      const double a = att.normalized[gy * att.w + gx];
      img.pixels[y * extent + x] = static_cast<std::uint8_t>(peak > 0 ? std::lround(255.0 * a / peak) : 0);
    }
  char comment[96];
  std::snprintf(comment, sizeof comment, "attention %zux%zu, scaled per map: 255 = alpha %.6g", att.h, att.w, peak);
  write_pnm(path, img, comment);

  std::ofstream csv(path + ".csv");
  if (!csv) throw IngestError(path + ".csv", "cannot open for writing");
  csv << "y,x,raw,normalized\n";
  char buf[128];
  for (std::size_t j = 0; j < r; ++j) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", j / att.w, j % att.w, att.raw[j], att.normalized[j]);
    csv << buf;
  }
  if (!csv) throw IngestError(path + ".csv", "write failed");
}

AttentionMap read_attention_csv(const std::string& path, std::size_t h, std::size_t w) {
  std::ifstream in(path);
  if (!in) throw IngestError(path, "cannot open");
  AttentionMap m;
  m.h = h;
  m.w = w;
  m.raw.assign(h * w, 0.0);
  m.normalized.assign(h * w, 0.0);
  std::string line;
  std::getline(in, line);
  if (line != "y,x,raw,normalized") throw IngestError(path, "unexpected header '" + line + "'");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t y = 0, x = 0;
    double raw = 0, norm = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &y, &x, &raw, &norm) != 4 || y >= h || x >= w) {
      throw IngestError(path, "malformed row '" + line + "'");
    }
    m.raw[y * w + x] = raw;
    m.normalized[y * w + x] = norm;
    ++rows;
  }
  if (rows != h * w) throw IngestError(path, "expected " + std::to_string(h * w) + " rows");
  return m;
}

std::vector<FeatureMap> feature_maps(Learner& learner, const Dataset& ds, std::span<const std::size_t> images) {
  configure_allocator();
  std::vector<FeatureMap> out;
  out.reserve(images.size());
  constexpr std::size_t chunk = 50;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    const auto part = images.subspan(s, std::min(chunk, images.size() - s));
    const Tensor<float> maps = learner.backbone.embed_eval(ds.batch<float>(part));
    for (std::size_t i = 0; i < part.size(); ++i) out.push_back(FeatureMap::from_batch(maps, i));
  }
  return out;
}

std::vector<AttentionMap> attention_maps(Learner& learner, const Dataset& ds, std::span<const std::size_t> images) {
  if (!learner.regressor) throw ConfigError("attention maps need a learner with an attention regressor");
  configure_allocator();
  std::vector<AttentionMap> out;
  constexpr std::size_t chunk = 50;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    const auto part = images.subspan(s, std::min(chunk, images.size() - s));
    Graph<float> g;
    Var maps = learner.backbone.embed(g, g.constant(ds.batch<float>(part)), Mode::eval);
    const AttentionVars att = attention_scores(g, maps, *learner.regressor);
    const Tensor<float>& mv = g.value(maps);
    for (std::size_t i = 0; i < part.size(); ++i) out.push_back(attention_map_of(g, att, i, mv.dim(2), mv.dim(3)));
  }
  return out;
}

ConsistencySummary summarize_consistency(std::span<const FeatureMap> maps) {
  ConsistencySummary s;
  s.images = maps.size();
  for (const FeatureMap& m : maps) {
    s.per_image_consistency.push_back(neighbor_consistency(m));
    s.per_image_norms.push_back(descriptor_norm_stats(m));
    s.neighbor_consistency += s.per_image_consistency.back();
    s.norm_cv += s.per_image_norms.back().cv();
  }
  if (s.images) {
    s.neighbor_consistency /= static_cast<double>(s.images);
    s.norm_cv /= static_cast<double>(s.images);
  }
  return s;
}

std::vector<std::size_t> analysis_images(const Dataset& ds, std::size_t per_class) {
  std::vector<std::size_t> out;
  for (std::size_t c : ds.classes_in(Split::meta_test)) {
    const auto& imgs = ds.class_info(c).images;
    for (std::size_t i = 0; i < std::min(per_class, imgs.size()); ++i) out.push_back(imgs[i]);
  }
  return out;
}

}  // namespace dcap
