#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcap/errors.hpp"
#include "dcap/pipeline.hpp"

namespace dcap {

std::string_view to_string(Stage s) { return s == Stage::pretrained ? "pretrained" : "metatrained"; }

Learner::Learner(const BackboneConfig& cfg, std::size_t base_classes, bool with_regressor, std::uint64_t seed)
    : backbone(cfg, CounterRng(seed).child(1).key()),
      classifier(cfg.out_channels(), base_classes, CounterRng(seed).child(3).key()) {
  if (with_regressor) regressor.emplace(cfg.out_channels(), CounterRng(seed).child(2).key());
}

std::vector<std::pair<std::string, Tensor<float>*>> Learner::state() {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (Parameter<float>* p : backbone.parameters()) out.emplace_back(p->name, &p->value);
  for (auto& b : backbone.buffers()) out.push_back(b);
  for (Parameter<float>* p : classifier.parameters()) out.emplace_back(p->name, &p->value);
  if (regressor)
    for (Parameter<float>* p : regressor->parameters()) out.emplace_back(p->name, &p->value);
  return out;
}

namespace {

constexpr std::string_view kFormat = "dcap-checkpoint/1";

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string shape_text(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

[[noreturn]] void bad(const std::string& what) { throw IngestError("checkpoint", what); }

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad("bad integer '" + std::string(s) + "'");
  return v;
}

Shape parse_shape(std::string_view s) {
  Shape out;
  if (s == "-") return out;
  std::size_t start = 0;
  while (true) {
    const auto x = s.find('x', start);
    out.push_back(parse_u64(s.substr(start, x == std::string_view::npos ? std::string_view::npos : x - start)));
    if (x == std::string_view::npos) break;
    start = x + 1;
  }
  return out;
}

}  // namespace

std::string Checkpoint::to_bytes() const {
  std::string out;
  out += "format=" + std::string(kFormat) + "\n";
  out += "stage=" + std::string(to_string(stage)) + "\n";
  out += "config_digest=" + config.digest() + "\n";
  out += "rng=" + std::to_string(rng_key) + " " + std::to_string(rng_counter) + "\n";
  std::istringstream cfg(config.serialize());
  for (std::string line; std::getline(cfg, line);)
    if (!line.empty()) out += "config=" + line + "\n";
  for (const MetricRecord& m : history) out += "metric=" + m.name + " " + std::to_string(m.step) + " " + fmt(m.value) + "\n";
  for (const auto& [name, t] : tensors) out += "tensor=" + name + " " + shape_text(t.shape()) + "\n";
  out += "\n";
  for (const auto& [name, t] : tensors) {
    for (float v : t.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
    }
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(std::string_view bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  std::string cfg_text;
  std::vector<std::pair<std::string, Shape>> decl;
  bool have_format = false, have_stage = false;
  std::string digest;
  while (true) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) bad("header is not terminated by an empty line");
    const std::string_view line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) bad("malformed header line '" + std::string(line) + "'");
    const std::string_view key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "format") {
      if (val != kFormat) bad("unsupported format '" + std::string(val) + "'");
      have_format = true;
    } else if (key == "stage") {
      if (val == "pretrained") ck.stage = Stage::pretrained;
      else if (val == "metatrained") ck.stage = Stage::metatrained;
      else bad("unknown stage '" + std::string(val) + "'");
      have_stage = true;
    } else if (key == "config_digest") {
      digest = val;
    } else if (key == "rng") {
      const auto sp = val.find(' ');
      if (sp == std::string_view::npos) bad("malformed rng line");
      ck.rng_key = parse_u64(val.substr(0, sp));
      ck.rng_counter = parse_u64(val.substr(sp + 1));
    } else if (key == "config") {
      cfg_text += std::string(val) + "\n";
    } else if (key == "metric") {
      const auto a = val.find(' '), b = val.rfind(' ');
      if (a == std::string_view::npos || a == b) bad("malformed metric line");
      MetricRecord m;
      m.name = val.substr(0, a);
      m.step = parse_u64(val.substr(a + 1, b - a - 1));
      const std::string_view num = val.substr(b + 1);
      auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), m.value);
      if (ec != std::errc() || p != num.data() + num.size()) bad("bad metric value '" + std::string(num) + "'");
      ck.history.push_back(std::move(m));
    } else if (key == "tensor") {
      const auto sp = val.rfind(' ');
      if (sp == std::string_view::npos) bad("malformed tensor line");
      decl.emplace_back(std::string(val.substr(0, sp)), parse_shape(val.substr(sp + 1)));
    } else {
      bad("unknown header key '" + std::string(key) + "'");
    }
  }
  if (!have_format || !have_stage) bad("missing format or stage");
  try {
    ck.config = RunConfig::parse(cfg_text);
  } catch (const ConfigError& e) {
    bad(std::string("embedded config: ") + e.what());
  }
  if (ck.config.digest() != digest) bad("config digest mismatch");
  for (auto& [name, shape] : decl) {
    const std::size_t n = nk::numel(shape);
    if (bytes.size() - pos < 4 * n) bad("truncated tensor data for '" + name + "'");
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 4 * i + k])) << (8 * k);
      t[i] = std::bit_cast<float>(bits);
    }
    pos += 4 * n;
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) bad("trailing bytes after tensor data");
  if (ck.stage == Stage::pretrained && ck.has_regressor()) bad("pretrained checkpoint carries regressor weights");
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError(path, "cannot open for writing");
  const std::string b = to_bytes();
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw IngestError(path, "write failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path, "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return from_bytes(ss.str());
  } catch (const IngestError& e) {
    throw IngestError(path, e.what());
  }
}

const Tensor<float>* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

Checkpoint make_checkpoint(Stage stage, const RunConfig& cfg, Learner& learner, std::vector<MetricRecord> history) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config = cfg;
  ck.history = std::move(history);
  for (auto& [name, t] : learner.state()) {
    if (stage == Stage::pretrained && name.rfind("regressor.", 0) == 0) continue;
    ck.tensors.emplace_back(name, *t);
  }
  const CounterRng rng(cfg.seed);
  ck.rng_key = rng.key();
  ck.rng_counter = rng.counter();
  return ck;
}

void load_state(Learner& learner, const Checkpoint& ckpt, bool include_regressor) {
  for (auto& [name, t] : learner.state()) {
    const bool is_reg = name.rfind("regressor.", 0) == 0;
    if (is_reg && !include_regressor) continue;
    const Tensor<float>* src = ckpt.find(name);
    if (!src) throw nk::ShapeError("load_state", "checkpoint lacks tensor '" + name + "'");
    if (src->shape() != t->shape()) {
      throw nk::ShapeError("load_state", "tensor '" + name + "' has shape " + nk::shape_str(src->shape()) +
                                             " in the checkpoint but " + nk::shape_str(t->shape()) + " in the model");
    }
    *t = *src;
  }
}

Learner learner_from(const Checkpoint& ckpt) {
  const Tensor<float>* w = ckpt.find("classifier.weight");
  if (!w || w->rank() != 2) throw nk::ShapeError("learner_from", "checkpoint lacks a classifier");
  Learner l(ckpt.config.backbone, w->dim(1), ckpt.has_regressor(), ckpt.config.seed);
  load_state(l, ckpt, ckpt.has_regressor());
  return l;
}

}  // namespace dcap
