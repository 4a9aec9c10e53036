#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dcap/errors.hpp"
#include "dcap/pipeline.hpp"

namespace dcap {

std::string_view to_string(PretrainMode m) {
  switch (m) {
    case PretrainMode::none: return "none";
    case PretrainMode::gap: return "gap";
    case PretrainMode::dc: return "dc";
  }
  return "?";
}

PretrainMode parse_pretrain_mode(std::string_view s) {
  if (s == "none") return PretrainMode::none;
  if (s == "gap") return PretrainMode::gap;
  if (s == "dc") return PretrainMode::dc;
  throw ConfigError("unknown pretrain mode '" + std::string(s) + "' (expected none, gap or dc)");
}

std::string_view to_string(MilestoneUnit u) { return u == MilestoneUnit::tasks ? "tasks" : "steps"; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string where(std::string_view section, std::string_view key) {
  return std::string(section) + "." + std::string(key);
}

double to_double(std::string_view section, std::string_view key, std::string_view v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(where(section, key) + ": expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::uint64_t to_u64(std::string_view section, std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(where(section, key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

bool to_bool(std::string_view section, std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(where(section, key) + ": expected true or false, got '" + std::string(v) + "'");
}

std::vector<std::string> split_commas(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto pos = v.find(',', start);
    const auto part = trim(v.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!part.empty()) out.push_back(part);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::size_t> to_list(std::string_view section, std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (const std::string& p : split_commas(v)) out.push_back(to_u64(section, key, p));
  return out;
}

}  // namespace

void RunConfig::set(std::string_view section, std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  auto unknown = [&]() { return ConfigError("unknown key '" + where(section, key) + "'"); };
  auto sz = [&]() { return static_cast<std::size_t>(to_u64(section, key, v)); };
  auto dbl = [&]() { return to_double(section, key, v); };
  auto bl = [&]() { return to_bool(section, key, v); };
  if (section == "run") {
    if (key == "seed") seed = to_u64(section, key, v);
    else if (key == "output_dir") output_dir = v;
    else if (key == "pooling") pooling = parse_pooling(v);
    else if (key == "pretrain") pretrain = parse_pretrain_mode(v);
    else if (key == "threads") threads = sz();
    else throw unknown();
  } else if (section == "backbone") {
    if (key == "family") backbone.family = parse_backbone_family(v);
    else if (key == "filters") {
      const auto f = to_list(section, key, v);
      if (f.size() != 4) throw ConfigError("backbone.filters: expected four comma-separated widths");
      std::copy(f.begin(), f.end(), backbone.filters.begin());
    } else if (key == "input_size") backbone.input_size = sz();
    else if (key == "channels") backbone.channels_in = sz();
    else if (key == "floor_pooling") backbone.floor_pooling = bl();
    else throw unknown();
  } else if (section == "data") {
    SynthSpec& s = data.synth;
    if (key == "source") {
      if (v != "synth" && v != "dir") throw ConfigError("data.source: expected synth or dir, got '" + v + "'");
      data.source = v;
    } else if (key == "path") data.path = v;
    else if (key == "train_classes") s.train_classes = sz();
    else if (key == "val_classes") s.val_classes = sz();
    else if (key == "test_classes") s.test_classes = sz();
    else if (key == "images_per_class") s.images_per_class = sz();
    else if (key == "extent") s.extent = sz();
    else if (key == "channels") s.channels = sz();
    else if (key == "regime_weights") {
      const auto parts = split_commas(v);
      if (parts.size() != 3) throw ConfigError("data.regime_weights: expected three comma-separated weights");
      for (std::size_t i = 0; i < 3; ++i) s.regime_weights[i] = to_double(section, key, parts[i]);
    } else if (key == "noise") s.noise = dbl();
    else if (key == "style") s.style = parse_glyph_style(v);
    else if (key == "seed") s.seed = to_u64(section, key, v);
    else throw unknown();
  } else if (section == "pretrain") {
    if (key == "epochs") pre.epochs = sz();
    else if (key == "milestones") pre.milestones = to_list(section, key, v);
    else if (key == "lr") pre.lr = dbl();
    else if (key == "dc_lr") pre.dc_lr = dbl();
    else if (key == "lr_decay") pre.lr_decay = dbl();
    else if (key == "momentum") pre.momentum = dbl();
    else if (key == "weight_decay") pre.weight_decay = dbl();
    else if (key == "batch_size") pre.batch_size = sz();
    else if (key == "smoothing") pre.smoothing = dbl();
    else if (key == "holdout_rate") pre.holdout_rate = dbl();
    else if (key == "flip") pre.flip = bl();
    else throw unknown();
  } else if (section == "metatrain") {
    if (key == "batches") meta.batches = sz();
    else if (key == "tasks_per_batch") meta.tasks_per_batch = sz();
    else if (key == "milestones") meta.milestones = to_list(section, key, v);
    else if (key == "milestone_unit") {
      if (v == "tasks") meta.milestone_unit = MilestoneUnit::tasks;
      else if (v == "steps") meta.milestone_unit = MilestoneUnit::steps;
      else throw ConfigError("metatrain.milestone_unit: expected tasks or steps, got '" + v + "'");
    } else if (key == "backbone_lr") meta.backbone_lr = dbl();
    else if (key == "regressor_lr") meta.regressor_lr = dbl();
    else if (key == "scratch_lr") meta.scratch_lr = dbl();
    else if (key == "lr_decay") meta.lr_decay = dbl();
    else if (key == "momentum") meta.momentum = dbl();
    else if (key == "weight_decay") meta.weight_decay = dbl();
    else if (key == "way") meta.shape.way = sz();
    else if (key == "shot") meta.shape.shot = sz();
    else if (key == "query") meta.shape.query = sz();
    else if (key == "val_every") meta.val_every = sz();
    else if (key == "val_tasks") meta.val_tasks = sz();
    else if (key == "flip") meta.flip = bl();
    else throw unknown();
  } else if (section == "loss") {
    if (key == "beta") weights.beta = dbl();
    else if (key == "gamma") weights.gamma = dbl();
    else if (key == "ce_divide_by_r") ce_divide_by_r = bl();
    else if (key == "gap_smoothing") gap_smoothing = dbl();
    else throw unknown();
  } else if (section == "eval") {
    if (key == "way") eval.shape.way = sz();
    else if (key == "shot") eval.shape.shot = sz();
    else if (key == "query") eval.shape.query = sz();
    else if (key == "tasks") eval.tasks = sz();
    else if (key == "seed") eval.seed = to_u64(section, key, v);
    else throw unknown();
  } else {
    throw ConfigError("unknown section '" + std::string(section) + "'");
  }
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key = trim(assignment.substr(0, eq));
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError("override key '" + key + "' needs a section prefix (section.key)");
  set(key.substr(0, dot), key.substr(dot + 1), assignment.substr(eq + 1));
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::string section;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = trim(raw);
    if (const auto hash = line.find('#'); hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("unterminated section header");
        section = trim(std::string_view(line).substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      if (section.empty()) throw ConfigError("key outside of any [section]");
      cfg.set(section, trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  const SynthSpec& s = data.synth;
  os << "[run]\n"
     << "seed = " << seed << "\n"
     << "pretrain = " << to_string(pretrain) << "\n"
     << "pooling = " << to_string(pooling) << "\n"
     << "threads = " << threads << "\n"
     << "output_dir = " << output_dir << "\n\n";
  os << "[backbone]\n"
     << "family = " << to_string(backbone.family) << "\n"
     << "filters = " << backbone.filters[0] << "," << backbone.filters[1] << "," << backbone.filters[2] << ","
     << backbone.filters[3] << "\n"
     << "input_size = " << backbone.input_size << "\n"
     << "channels = " << backbone.channels_in << "\n"
     << "floor_pooling = " << (backbone.floor_pooling ? "true" : "false") << "\n\n";
  os << "[data]\n"
     << "source = " << data.source << "\n"
     << "path = " << data.path << "\n"
     << "train_classes = " << s.train_classes << "\n"
     << "val_classes = " << s.val_classes << "\n"
     << "test_classes = " << s.test_classes << "\n"
     << "images_per_class = " << s.images_per_class << "\n"
     << "extent = " << s.extent << "\n"
     << "channels = " << s.channels << "\n"
     << "regime_weights = " << fmt(s.regime_weights[0]) << "," << fmt(s.regime_weights[1]) << ","
     << fmt(s.regime_weights[2]) << "\n"
     << "noise = " << fmt(s.noise) << "\n"
     << "style = " << to_string(s.style) << "\n"
     << "seed = " << s.seed << "\n\n";
  os << "[pretrain]\n"
     << "epochs = " << pre.epochs << "\n"
     << "milestones = " << fmt_list(pre.milestones) << "\n"
     << "lr = " << fmt(pre.lr) << "\n"
     << "dc_lr = " << fmt(pre.dc_lr) << "\n"
     << "lr_decay = " << fmt(pre.lr_decay) << "\n"
     << "momentum = " << fmt(pre.momentum) << "\n"
     << "weight_decay = " << fmt(pre.weight_decay) << "\n"
     << "batch_size = " << pre.batch_size << "\n"
     << "smoothing = " << fmt(pre.smoothing) << "\n"
     << "holdout_rate = " << fmt(pre.holdout_rate) << "\n"
     << "flip = " << (pre.flip ? "true" : "false") << "\n\n";
  os << "[metatrain]\n"
     << "batches = " << meta.batches << "\n"
     << "tasks_per_batch = " << meta.tasks_per_batch << "\n"
     << "milestones = " << fmt_list(meta.milestones) << "\n"
     << "milestone_unit = " << to_string(meta.milestone_unit) << "\n"
     << "backbone_lr = " << fmt(meta.backbone_lr) << "\n"
     << "regressor_lr = " << fmt(meta.regressor_lr) << "\n"
     << "scratch_lr = " << fmt(meta.scratch_lr) << "\n"
     << "lr_decay = " << fmt(meta.lr_decay) << "\n"
     << "momentum = " << fmt(meta.momentum) << "\n"
     << "weight_decay = " << fmt(meta.weight_decay) << "\n"
     << "way = " << meta.shape.way << "\n"
     << "shot = " << meta.shape.shot << "\n"
     << "query = " << meta.shape.query << "\n"
     << "val_every = " << meta.val_every << "\n"
     << "val_tasks = " << meta.val_tasks << "\n"
     << "flip = " << (meta.flip ? "true" : "false") << "\n\n";
  os << "[loss]\n"
     << "beta = " << fmt(weights.beta) << "\n"
     << "gamma = " << fmt(weights.gamma) << "\n"
     << "ce_divide_by_r = " << (ce_divide_by_r ? "true" : "false") << "\n"
     << "gap_smoothing = " << fmt(gap_smoothing) << "\n\n";
  os << "[eval]\n"
     << "way = " << eval.shape.way << "\n"
     << "shot = " << eval.shape.shot << "\n"
     << "query = " << eval.shape.query << "\n"
     << "tasks = " << eval.tasks << "\n"
     << "seed = " << eval.seed << "\n";
  return os.str();
}

void RunConfig::validate() const {
  backbone.validate();
  meta.shape.validate();
  eval.shape.validate();
  auto increasing = [](const std::vector<std::size_t>& m) {
    for (std::size_t i = 1; i < m.size(); ++i)
      if (m[i] <= m[i - 1]) return false;
    return true;
  };
  if (!increasing(pre.milestones)) throw ConfigError("pretrain.milestones must be strictly increasing");
  if (!increasing(meta.milestones)) throw ConfigError("metatrain.milestones must be strictly increasing");
  if (pre.batch_size < 2) throw ConfigError("pretrain.batch_size must be at least 2");
  if (meta.tasks_per_batch == 0) throw ConfigError("metatrain.tasks_per_batch must be positive");
  if (meta.val_every == 0) throw ConfigError("metatrain.val_every must be positive");
  if (eval.tasks == 0) throw ConfigError("eval.tasks must be positive");
  for (double lr : {pre.lr, pre.dc_lr, meta.backbone_lr, meta.regressor_lr, meta.scratch_lr})
    if (!(lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(pre.smoothing >= 0 && pre.smoothing < 1)) throw ConfigError("pretrain.smoothing must lie in [0, 1)");
  if (!(gap_smoothing >= 0 && gap_smoothing < 1)) throw ConfigError("loss.gap_smoothing must lie in [0, 1)");
  if (!(pre.holdout_rate > 0 && pre.holdout_rate < 1)) throw ConfigError("pretrain.holdout_rate must lie in (0, 1)");
  if (!(weights.beta >= 0) || !(weights.gamma >= 0)) throw ConfigError("loss weights must be non-negative");
  if (data.source == "synth") {
    data.synth.validate();
    if (data.synth.extent != backbone.input_size || data.synth.channels != backbone.channels_in) {
      throw ConfigError("data extent/channels (" + std::to_string(data.synth.extent) + "/" +
                        std::to_string(data.synth.channels) + ") differ from backbone input (" +
                        std::to_string(backbone.input_size) + "/" + std::to_string(backbone.channels_in) + ")");
    }
  } else if (data.path.empty()) {
    throw ConfigError("data.path is required when data.source = dir");
  }
  if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
}

std::string RunConfig::digest() const {
  const std::string s = serialize();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string variant_name(PretrainMode p, Pooling q) {
  const char* row = p == PretrainMode::none ? "Zero" : p == PretrainMode::gap ? "GAP" : "DC";
  return std::string(row) + (q == Pooling::gap ? "-GAP" : "-AttPool");
}

std::string RunConfig::variant_name() const { return dcap::variant_name(pretrain, pooling); }

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return RunConfig::parse(ss.str());
}

std::size_t env_threads() {
  const char* v = std::getenv("DCAP_THREADS");
  if (!v || !*v) return 1;
  std::size_t n = 0;
  auto [p, ec] = std::from_chars(v, v + std::char_traits<char>::length(v), n);
  if (ec != std::errc() || *p != '\0' || n == 0) throw ConfigError("DCAP_THREADS must be a positive integer");
  return n;
}

}  // namespace dcap
