#pragma once

// Flat `key = value` configuration files with [section] headers.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mop/eval.hpp"
#include "mop/model.hpp"

namespace mop {

class ConfigFile {
 public:
  /// Lines are `[section]`, `key = value`, blank, or comments starting with
  /// '#' or ';'. Keys before the first header belong to section "".
  static ConfigFile parse(const std::string& text);
  static ConfigFile load(const std::filesystem::path& path);
  std::string serialize() const;

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const noexcept { return data_; }

  friend bool operator==(const ConfigFile&, const ConfigFile&) = default;

 private:
  std::map<std::string, std::map<std::string, std::string>> data_;
};

struct OverlapSource {
  int domain_a = 0;
  int domain_b = 1;
  std::filesystem::path path;
  friend bool operator==(const OverlapSource&, const OverlapSource&) = default;
};

struct SplitConfig {
  double cold_fraction = 0.4;       // of overlapped users, per target domain
  std::size_t min_interactions = 3;  // warm users below this keep everything for training
};

struct EvalConfig {
  ProtocolSpec protocol{Protocol::sampled, 99};
  ProtocolSpec val_protocol{Protocol::sampled, 99};
};

struct PipelineConfig {
  std::vector<std::filesystem::path> domains;  // interaction file per domain id 0, 1, ...
  std::vector<OverlapSource> overlaps;
  std::filesystem::path out = "mop_out";
  TrainConfig train;
  SplitConfig split;
  EvalConfig eval;

  /// Requires [run] seed; every other key has a default.
  static PipelineConfig from_config(const ConfigFile& file);
  ConfigFile to_config() const;
  /// Reads a file and resolves relative paths against its directory.
  static PipelineConfig load(const std::filesystem::path& path);
};

std::string format_double(double v);

}  // namespace mop
