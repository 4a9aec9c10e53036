#include "dcap/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "dcap/errors.hpp"

namespace dcap {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::meta_train: return "meta-train";
    case Split::meta_val: return "meta-val";
    case Split::meta_test: return "meta-test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  for (Split sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected meta-train, meta-val or meta-test)");
}

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::salient_centered: return "salient-centered";
    case Regime::small_clean: return "small-object-clean";
    case Regime::small_distractors: return "small-object-with-distractors";
  }
  return "?";
}

Dataset::Dataset(std::size_t channels, std::size_t extent) : channels_(channels), extent_(extent) {
  if (channels == 0 || extent == 0) throw ConfigError("dataset needs positive channel count and extent");
}

std::size_t Dataset::add_class(std::string name, Split split) {
  if (!classes_.empty() && static_cast<int>(split) < static_cast<int>(classes_.back().split)) {
    throw InvariantViolation("classes must be registered in split order (class '" + name + "')");
  }
  for (const ClassInfo& c : classes_)
    if (c.name == name && c.split == split) throw InvariantViolation("duplicate class '" + name + "'");
  classes_.push_back(ClassInfo{std::move(name), split, {}});
  return classes_.size() - 1;
}

std::size_t Dataset::add_image(std::size_t cls, std::span<const std::uint8_t> pixels, const ImageMeta* meta) {
  if (cls >= classes_.size()) throw std::out_of_range("add_image: unknown class " + std::to_string(cls));
  if (pixels.size() != image_bytes()) {
    throw InvariantViolation("add_image: expected " + std::to_string(image_bytes()) + " bytes, got " +
                             std::to_string(pixels.size()));
  }
  if (meta == nullptr && !meta_.empty()) throw InvariantViolation("add_image: generator metadata must cover every image");
  if (meta != nullptr && meta_.size() != labels_.size()) {
    throw InvariantViolation("add_image: generator metadata must cover every image");
  }
  const std::size_t idx = labels_.size();
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(cls);
  classes_[cls].images.push_back(idx);
  if (meta) meta_.push_back(*meta);
  return idx;
}

std::span<const std::uint8_t> Dataset::image(std::size_t i) const {
  if (i >= labels_.size()) throw std::out_of_range("image index " + std::to_string(i));
  return {pixels_.data() + i * image_bytes(), image_bytes()};
}

std::vector<std::size_t> Dataset::classes_in(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes_.size(); ++c)
    if (classes_[c].split == s) out.push_back(c);
  return out;
}

std::size_t Dataset::base_label(std::size_t cls) const {
  if (classes_.at(cls).split != Split::meta_train) return kNoBaseLabel;
  // meta-train classes come first, so the class id is the base label
  return cls;
}

void Dataset::validate(std::size_t min_per_class) const {
  audit();
  for (const ClassInfo& c : classes_) {
    if (c.images.size() < min_per_class) {
      throw SamplingError("class '" + c.name + "' in " + std::string(to_string(c.split)) + " has " +
                          std::to_string(c.images.size()) + " images, needs " + std::to_string(min_per_class));
    }
  }
}

void Dataset::audit() const {
  if (pixels_.size() != labels_.size() * image_bytes()) throw InvariantViolation("pixel buffer does not match image count");
  std::vector<int> owner(labels_.size(), -1);
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    if (c > 0 && static_cast<int>(classes_[c].split) < static_cast<int>(classes_[c - 1].split)) {
      throw InvariantViolation("class registry is not in split order");
    }
    for (std::size_t i : classes_[c].images) {
      if (i >= labels_.size()) throw InvariantViolation("class '" + classes_[c].name + "' lists unknown image");
      if (owner[i] != -1) {
        throw InvariantViolation("image " + std::to_string(i) + " appears in classes '" + classes_[owner[i]].name +
                                 "' and '" + classes_[c].name + "'");
      }
      if (labels_[i] != c) throw InvariantViolation("image " + std::to_string(i) + " label disagrees with its class list");
      owner[i] = static_cast<int>(c);
    }
  }
  for (std::size_t i = 0; i < owner.size(); ++i)
    if (owner[i] == -1) throw InvariantViolation("image " + std::to_string(i) + " belongs to no class");
}

template <typename T>
Tensor<T> Dataset::batch(std::span<const std::size_t> images, std::span<const std::uint8_t> flip) const {
  if (!flip.empty() && flip.size() != images.size()) throw std::invalid_argument("batch: flip mask length mismatch");
  const std::size_t s = extent_, plane = s * s, bytes = image_bytes();
  Tensor<T> out(Shape{images.size(), channels_, s, s});
  T* dst = out.data();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const std::uint8_t* src = image(images[n]).data();
    const bool mirror = !flip.empty() && flip[n] != 0;
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t y = 0; y < s; ++y) {
        const std::uint8_t* row = src + c * plane + y * s;
        T* drow = dst + n * bytes + c * plane + y * s;
        for (std::size_t x = 0; x < s; ++x) {
          const std::uint8_t v = mirror ? row[s - 1 - x] : row[x];
          drow[x] = static_cast<T>(v) / T{127.5} - T{1};
        }
      }
    }
  }
  return out;
}

template Tensor<float> Dataset::batch<float>(std::span<const std::size_t>, std::span<const std::uint8_t>) const;
template Tensor<double> Dataset::batch<double>(std::span<const std::size_t>, std::span<const std::uint8_t>) const;

namespace {

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
};

}  // namespace

std::uint64_t Dataset::digest() const {
  Fnv f;
  f.u64(channels_);
  f.u64(extent_);
  f.u64(classes_.size());
  for (const ClassInfo& c : classes_) {
    f.bytes(c.name.data(), c.name.size());
    f.u64(static_cast<std::uint64_t>(c.split));
    f.u64(c.images.size());
  }
  for (std::size_t l : labels_) f.u64(l);
  f.bytes(pixels_.data(), pixels_.size());
  return f.h;
}

void EpisodeShape::validate() const {
  if (way < 2) throw ConfigError("episode way must be at least 2");
  if (shot < 1) throw ConfigError("episode shot must be at least 1");
  if (query < 1) throw ConfigError("episode query count must be at least 1");
}

namespace {

void join(std::ostringstream& os, const std::vector<std::size_t>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
}

}  // namespace

std::string Episode::manifest_line() const {
  std::ostringstream os;
  std::vector<std::size_t> s, q;
  for (const EpisodeItem& it : support) s.push_back(it.image);
  for (const EpisodeItem& it : queries) q.push_back(it.image);
  os << "task=" << task_id << " classes=";
  join(os, classes);
  os << " support=";
  join(os, s);
  os << " query=";
  join(os, q);
  return os.str();
}

void Episode::check_invariants() const {
  const auto fail = [&](const std::string& what) {
    throw InvariantViolation("episode " + std::to_string(task_id) + ": " + what);
  };
  if (classes.size() != shape.way) fail("class count differs from way");
  std::vector<std::size_t> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("repeated class");
  if (support.size() != shape.support_count()) fail("support count differs from N*K");
  if (queries.size() != shape.query_count()) fail("query count differs from N*Q");
  std::vector<std::size_t> per_label_s(shape.way, 0), per_label_q(shape.way, 0), images;
  for (const EpisodeItem& it : support) {
    if (it.label >= shape.way) fail("support label out of range");
    ++per_label_s[it.label];
    images.push_back(it.image);
  }
  for (const EpisodeItem& it : queries) {
    if (it.label >= shape.way) fail("query label out of range");
    ++per_label_q[it.label];
    images.push_back(it.image);
  }
  for (std::size_t t = 0; t < shape.way; ++t) {
    if (per_label_s[t] != shape.shot) fail("label " + std::to_string(t) + " lacks K support items");
    if (per_label_q[t] != shape.query) fail("label " + std::to_string(t) + " lacks Q query items");
  }
  std::sort(images.begin(), images.end());
  if (std::adjacent_find(images.begin(), images.end()) != images.end()) fail("support and query overlap or repeat");
}

Episode sample_episode(const Dataset& ds, Split split, const EpisodeShape& shape, CounterRng rng, std::uint64_t task_id) {
  shape.validate();
  const std::vector<std::size_t> pool = ds.classes_in(split);
  if (pool.size() < shape.way) {
    throw SamplingError(std::string(to_string(split)) + " has " + std::to_string(pool.size()) + " classes, " +
                        std::to_string(shape.way) + "-way episodes need " + std::to_string(shape.way - pool.size()) +
                        " more");
  }
  const std::size_t per_class = shape.shot + shape.query;
  for (std::size_t c : pool) {
    const std::size_t have = ds.class_info(c).images.size();
    if (have < per_class) {
      throw SamplingError("class '" + ds.class_info(c).name + "' has " + std::to_string(have) + " images, episodes need " +
                          std::to_string(per_class) + " (short by " + std::to_string(per_class - have) + ")");
    }
  }
  Episode ep;
  ep.task_id = task_id;
  ep.shape = shape;
  for (std::size_t k : rng.sample_without_replacement(pool.size(), shape.way)) ep.classes.push_back(pool[k]);
  ep.support.reserve(shape.support_count());
  ep.queries.reserve(shape.query_count());
  std::vector<std::vector<std::size_t>> drawn(shape.way);
  for (std::size_t t = 0; t < shape.way; ++t) {
    const std::vector<std::size_t>& imgs = ds.class_info(ep.classes[t]).images;
    for (std::size_t k : rng.sample_without_replacement(imgs.size(), per_class)) drawn[t].push_back(imgs[k]);
  }
  for (std::size_t t = 0; t < shape.way; ++t) {
    const std::size_t base = ds.base_label(ep.classes[t]);
    for (std::size_t k = 0; k < shape.shot; ++k) ep.support.push_back({drawn[t][k], t, base});
  }
  for (std::size_t t = 0; t < shape.way; ++t) {
    const std::size_t base = ds.base_label(ep.classes[t]);
    for (std::size_t k = shape.shot; k < per_class; ++k) ep.queries.push_back({drawn[t][k], t, base});
  }
  return ep;
}

std::vector<Episode> consistent_eval_set(const Dataset& ds, Split split, const EpisodeShape& shape, std::uint64_t seed,
                                         std::size_t count, std::size_t threads) {
  std::vector<Episode> out(count);
  const CounterRng root(seed);
  // Validate once up front so errors surface on the calling thread.
  if (count > 0) out[0] = sample_episode(ds, split, shape, root.child(0), 0);
  threads = std::max<std::size_t>(1, std::min(threads, count));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = std::max<std::size_t>(begin, 1); i < end; ++i) out[i] = sample_episode(ds, split, shape, root.child(i), i);
  };
  if (threads == 1) {
    work(0, count);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (count + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(count, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (std::thread& th : pool) th.join();
  }
  return out;
}

std::string episode_manifest(std::span<const Episode> episodes) {
  std::string s;
  for (const Episode& e : episodes) {
    s += e.manifest_line();
    s += '\n';
  }
  return s;
}

HorizontalSplit horizontal_split(const Dataset& ds, std::span<const std::size_t> classes, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("horizontal split rate must lie in (0, 1)");
  HorizontalSplit hs;
  const CounterRng root(seed);
  for (std::size_t c : classes) {
    std::vector<std::size_t> imgs = ds.class_info(c).images;
    const std::size_t n = imgs.size();
    const auto hold = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    if (hold == 0 || hold == n) {
      throw SamplingError("class '" + ds.class_info(c).name + "' with " + std::to_string(n) +
                          " images cannot be split at rate " + std::to_string(rate));
    }
    CounterRng rng = root.child(c);
    rng.shuffle(imgs.begin(), imgs.end());
    std::vector<std::size_t> h(imgs.begin(), imgs.begin() + static_cast<std::ptrdiff_t>(hold));
    std::vector<std::size_t> f(imgs.begin() + static_cast<std::ptrdiff_t>(hold), imgs.end());
    std::sort(h.begin(), h.end());
    std::sort(f.begin(), f.end());
    hs.holdout.insert(hs.holdout.end(), h.begin(), h.end());
    hs.fit.insert(hs.fit.end(), f.begin(), f.end());
  }
  return hs;
}

}  // namespace dcap
