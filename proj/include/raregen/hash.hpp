#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace raregen {

// FNV-1a 64-bit content hashes; used by run manifests to tie outputs to the
// exact input artifacts.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_string(std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

}  // namespace raregen
