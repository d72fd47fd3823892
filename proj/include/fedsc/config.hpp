#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedsc/data.hpp"
#include "fedsc/federation.hpp"

namespace fedsc {

struct DataGenConfig {
  int num_classes = 10;
  std::size_t per_class = 500;
  std::size_t dim = 16;
  double separation = 4.0;
  double test_fraction = 0.1;
};

/// Everything a `generate` or `run` invocation needs.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "fedsc_out";
  std::filesystem::path data_dir;  // empty: same as output_dir
  DataGenConfig data;
  PartitionConfig partition;
  FederationConfig federation;

  std::filesystem::path resolved_data_dir() const {
    return data_dir.empty() ? output_dir : data_dir;
  }
  /// Copies the shared seed and client count into the nested configs and
  /// validates them. Throws kInvalidConfig.
  void resolve();
};

/// One settable field: `section.key` in config files, `--key-with-dashes`
/// on the command line.
struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string qualified() const { return section.empty() ? key : section + "." + key; }
  std::string flag() const;
};

const std::vector<ConfigField>& config_fields();

/// Named presets: "full" (the defaults) and "desk" (30 rounds, 5 epochs).
RunConfig preset(const std::string& name);

/// Applies a flat key=value text with optional [section] headers. Unknown
/// keys and malformed lines raise kInvalidConfig.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
void set_config_value(RunConfig& config, const std::string& qualified_key, const std::string& value);

/// Resolved configuration as `section.key=value` lines.
std::string dump_config(const RunConfig& config);

/// Plain key=value parsing (no sections) used for theory constant files.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace fedsc
