#include "rfm/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace rfm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

int to_positive(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x <= 0) throw ConfigError("config: " + key + " must be positive, got " + v);
  return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: " + key + " expects a boolean, got '" + v + "'");
}

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d{
      {"seed", "0"},
      {"data.root", "data"},
      {"data.image_size", "64"},
      {"data.categories", "8"},
      {"data.train_per_category", "40"},
      {"data.test_per_category", "16"},
      {"data.refs_per_category", "5"},
      {"data.sentences", "4"},
      {"data.strength", "0.85"},
      {"data.decoys", "1"},
      {"model.stem_channels", "8"},
      {"model.channels", "16,32,64,128"},
      {"decoder.width", "32"},
      {"fusion.kind", "image"},
      {"fusion.layers", "2,3,4"},
      {"fusion.windows", "auto"},
      {"fusion.num_refs", "3"},
      {"fusion.heads", "4"},
      {"train.steps", "300"},
      {"train.epochs", "0"},
      {"train.batch_size", "8"},
      {"train.lr_init", "1.5e-4"},
      {"train.poly_power", "0.9"},
      {"train.adam_beta1", "0.9"},
      {"train.adam_beta2", "0.999"},
      {"train.augment", "1"},
      {"loss.pool", "31"},
      {"loss.gain", "5"},
  };
  return d;
}

}  // namespace

std::uint64_t default_seed() {
  const char* env = std::getenv("RFK_SEED");
  if (env == nullptr || *env == '\0') return 0;
  return to_u64("RFK_SEED", env);
}

RunConfig::RunConfig() : values_(defaults()) { values_["seed"] = std::to_string(default_seed()); }

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  const std::string old = it->second;
  it->second = trim(value);
  try {
    // Validate by resolving everything that depends on the key.
    (void)seed();
    (void)model();
    (void)train();
    (void)dataset();
  } catch (...) {
    it->second = old;
    throw;
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected key=value, got '" + line + "'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  merge_text(ss.str(), path);
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  c.merge_text(text);
  return c;
}

std::uint64_t RunConfig::seed() const { return to_u64("seed", get("seed")); }

model::ModelConfig RunConfig::model() const {
  model::ModelConfig m;
  m.input_size = to_positive("data.image_size", get("data.image_size"));
  if (m.input_size % 32 != 0) throw ConfigError("config: data.image_size must be divisible by 32");
  m.stem_channels = to_positive("model.stem_channels", get("model.stem_channels"));
  const auto chans = split_list(get("model.channels"));
  if (chans.size() != kLevels) throw ConfigError("config: model.channels needs four values");
  for (std::size_t i = 0; i < kLevels; ++i) m.channels[i] = to_positive("model.channels", chans[i]);
  m.decoder_width = to_positive("decoder.width", get("decoder.width"));

  auto& f = m.fusion;
  try {
    f.kind = rif::parse_fusion_kind(get("fusion.kind"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: fusion.kind: ") + e.what());
  }
  f.layers.clear();
  const std::string layers = get("fusion.layers");
  if (layers != "none") {
    for (const auto& s : split_list(layers)) {
      const int l = static_cast<int>(to_int("fusion.layers", s));
      if (l < 2 || l > kLevels) throw ConfigError("config: fusion.layers entries must be 2, 3 or 4");
      if (std::find(f.layers.begin(), f.layers.end(), l) != f.layers.end()) {
        throw ConfigError("config: fusion.layers lists level " + s + " twice");
      }
      f.layers.push_back(l);
    }
    std::sort(f.layers.begin(), f.layers.end());
  }
  const std::string windows = get("fusion.windows");
  f.windows = {0, 0, 0};
  if (windows != "auto") {
    const auto w = split_list(windows);
    if (w.size() != 3) throw ConfigError("config: fusion.windows needs 'auto' or three values for levels 2,3,4");
    for (std::size_t i = 0; i < 3; ++i) {
      if (w[i] == "auto") continue;
      f.windows[i] = to_positive("fusion.windows", w[i]);
    }
  }
  f.num_refs = static_cast<int>(to_int("fusion.num_refs", get("fusion.num_refs")));
  if (f.num_refs < 0) throw ConfigError("config: fusion.num_refs must be non-negative");
  // Zero references leave nothing to fuse: the baseline network.
  if (f.kind == rif::FusionKind::kImage && f.num_refs == 0) f.kind = rif::FusionKind::kNone;
  f.heads = to_positive("fusion.heads", get("fusion.heads"));
  f.text_dim = synth::kTextDim;
  for (int level = 2; level <= kLevels; ++level) {
    if (f.kind != rif::FusionKind::kImage || !f.fuses(level)) continue;
    const auto c = m.channels[static_cast<std::size_t>(level - 1)];
    if (c % f.heads != 0) throw ConfigError("config: fusion.heads must divide the channels of every fused level");
    try {
      rif::resolve_window(f, level, m.input_size >> (level + 1));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: fusion.windows: ") + e.what());
    }
  }
  if (f.kind == rif::FusionKind::kImage) {
    const int available = to_positive("data.refs_per_category", get("data.refs_per_category"));
    if (f.num_refs > available) {
      throw ConfigError("config: fusion.num_refs exceeds data.refs_per_category");
    }
  }
  return m;
}

model::TrainConfig RunConfig::train() const {
  model::TrainConfig t;
  t.steps = static_cast<int>(to_int("train.steps", get("train.steps")));
  t.epochs = static_cast<int>(to_int("train.epochs", get("train.epochs")));
  if (t.steps < 0 || t.epochs < 0 || (t.steps == 0 && t.epochs == 0)) {
    throw ConfigError("config: need train.steps > 0 or train.epochs > 0");
  }
  t.batch_size = to_positive("train.batch_size", get("train.batch_size"));
  t.lr_init = to_double("train.lr_init", get("train.lr_init"));
  t.poly_power = to_double("train.poly_power", get("train.poly_power"));
  t.adam_beta1 = to_double("train.adam_beta1", get("train.adam_beta1"));
  t.adam_beta2 = to_double("train.adam_beta2", get("train.adam_beta2"));
  if (!(t.lr_init > 0.0) || t.poly_power < 0.0) throw ConfigError("config: learning-rate settings out of range");
  if (!(t.adam_beta1 >= 0.0 && t.adam_beta1 < 1.0 && t.adam_beta2 >= 0.0 && t.adam_beta2 < 1.0)) {
    throw ConfigError("config: Adam betas must lie in [0, 1)");
  }
  t.seed = seed();
  t.augment = to_bool("train.augment", get("train.augment"));
  t.loss.pool_kernel = to_positive("loss.pool", get("loss.pool"));
  if (t.loss.pool_kernel % 2 == 0) throw ConfigError("config: loss.pool must be odd");
  t.loss.boundary_gain = to_double("loss.gain", get("loss.gain"));
  return t;
}

synth::DatasetSpec RunConfig::dataset() const {
  synth::DatasetSpec d;
  d.seed = seed();
  d.categories = to_positive("data.categories", get("data.categories"));
  d.train_per_category = static_cast<int>(to_int("data.train_per_category", get("data.train_per_category")));
  d.test_per_category = static_cast<int>(to_int("data.test_per_category", get("data.test_per_category")));
  if (d.train_per_category < 0 || d.test_per_category < 0) throw ConfigError("config: split sizes must be >= 0");
  d.refs_per_category = to_positive("data.refs_per_category", get("data.refs_per_category"));
  d.sentences = to_positive("data.sentences", get("data.sentences"));
  d.image_size = to_positive("data.image_size", get("data.image_size"));
  d.strength = to_double("data.strength", get("data.strength"));
  if (!(d.strength >= 0.0 && d.strength <= 1.0)) throw ConfigError("config: data.strength must lie in [0, 1]");
  d.decoys = to_bool("data.decoys", get("data.decoys"));
  return d;
}

}  // namespace rfm
