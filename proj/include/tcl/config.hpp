#pragma once

// Flat `key = value` config files. One key per TrainConfig field; `#` starts a
// comment; blank lines are ignored. Later assignments override earlier ones.

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tcl/training.hpp"

namespace tcl::config {

using Assignment = std::pair<std::string, std::string>;

struct KeyInfo {
  std::string key;
  std::string doc;
};

// All recognised keys in schema order.
const std::vector<KeyInfo>& schema();

// Throws ConfigError on a line without '='.
std::vector<Assignment> parse_text(std::string_view text);
// Throws ConfigError("config not found: ...") for a missing file.
std::vector<Assignment> read_file(const std::filesystem::path& path);
// "key=value" from --set; throws ConfigError when malformed.
Assignment parse_override(std::string_view kv);

// Throws ConfigError naming the key for unknown keys (listing the valid ones)
// and for unparsable values.
void apply(training::TrainConfig& cfg, const std::string& key, const std::string& value);
void apply_all(training::TrainConfig& cfg, const std::vector<Assignment>& assignments);

std::string get(const training::TrainConfig& cfg, const std::string& key);

// Every key with its current value; parse_text of the result reproduces cfg.
std::string to_text(const training::TrainConfig& cfg);
training::TrainConfig from_text(std::string_view text);

// Full-scale schedule constants (warmup 2000, 1e-5 -> 1e-4 -> 1e-5).
training::TrainConfig full_scale_schedule();

}  // namespace tcl::config
