#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "rfm/model.hpp"
#include "rfm/synthdata.hpp"

namespace rfm {

/// Flat key=value run configuration. Every key has a default; setting an
/// unknown key or a malformed value throws ConfigError.
class RunConfig {
 public:
  RunConfig();

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Applies `key=value` lines; '#' starts a comment.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::string& path);

  /// All keys, sorted, one `key=value` per line.
  std::string resolved() const;

  std::uint64_t seed() const;
  model::ModelConfig model() const;
  model::TrainConfig train() const;
  synth::DatasetSpec dataset() const;

  static RunConfig parse(const std::string& text);

 private:
  std::map<std::string, std::string> values_;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Default seed: RFK_SEED when set, 0 otherwise.
std::uint64_t default_seed();

}  // namespace rfm
