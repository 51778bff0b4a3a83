#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "segcal/harness.hpp"

namespace segcal::cli {

// Flat TOML subset: `key = value` lines, `[section]` headers (one level),
// `#` comments; values are basic strings, integers, floats, booleans and
// single-line arrays of those. Anything else is a ConfigError naming the line.
nlohmann::json parse_toml_subset(std::string_view text);

// ".json" files are parsed as JSON, everything else as the TOML subset.
nlohmann::json load_config_document(const std::filesystem::path& path);

// Settings of a `train-demo` run.
struct DemoConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};  // each sets both data and init seed
  bool temperature_scaling = true;      // fit T on validation, report on test
};

// Unknown keys are rejected.
DemoConfig demo_config_from_json(const nlohmann::json& doc);
nlohmann::json demo_config_to_json(const DemoConfig& config);

}  // namespace segcal::cli
