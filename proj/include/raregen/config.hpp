#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

namespace raregen {

// Loads a structured config file as JSON. ".json" is parsed directly;
// ".toml" goes through a small TOML-subset reader (tables, arrays of tables,
// scalars, nested arrays) sufficient for world and experiment files.
nlohmann::json load_structured(const std::filesystem::path& path);

nlohmann::json toml_subset_to_json(const std::string& text);

}  // namespace raregen
