#pragma once

#include <filesystem>
#include <string>

#include "realcompo/pipeline.hpp"

namespace realcompo::cli {

// Reads a YAML run config. Unknown keys are errors; relative paths resolve
// against the config file's directory. Minimal form:
//
//   testbed: blobworld
//   prompt: a red cube and a blue ball
//   condition: stub
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& yaml_text, const std::filesystem::path& base_dir = {});

// Every field with its effective value (t0 resolved), in a stable order.
std::string resolved_config_yaml(const RunConfig& cfg);

// 16 hex digits identifying the run: hash of the resolved config without
// the output directory.
std::string run_hash(const RunConfig& cfg);

}  // namespace realcompo::cli
