#include "raregen/hash.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "raregen/errors.hpp"

namespace raregen {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::string hash_string(std::string_view bytes) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::string hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("hash_file: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return hash_string(buffer.str());
}

}  // namespace raregen
