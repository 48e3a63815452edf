#include "raregen/feature_set.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "raregen/binio.hpp"
#include "raregen/errors.hpp"

namespace raregen::knn {

namespace {
constexpr std::uint8_t kFsetVersion = 1;

void require_finite(std::span<const double> point) {
  for (double v : point) {
    if (!std::isfinite(v)) throw ContractViolation("feature point has non-finite coordinates");
  }
}
}  // namespace

FeatureSet::FeatureSet(std::size_t dim, std::vector<double> data, SetLabel label)
    : dim_(dim), data_(std::move(data)), label_(label) {
  if (dim_ == 0 || data_.size() % dim_ != 0) {
    throw ContractViolation("feature data size is not a multiple of the dimension");
  }
  require_finite(data_);
}

void FeatureSet::push(std::span<const double> point) {
  if (dim_ == 0) dim_ = point.size();
  if (point.size() != dim_) throw ContractViolation("feature point dimension mismatch");
  require_finite(point);
  data_.insert(data_.end(), point.begin(), point.end());
}

numerics::Tensor FeatureSet::point_tensor(std::size_t i) const {
  auto p = point(i);
  return numerics::Tensor({dim_}, std::vector<double>(p.begin(), p.end()));
}

FeatureSet FeatureSet::subset(std::span<const std::size_t> indices) const {
  FeatureSet out(dim_, label_);
  for (std::size_t i : indices) out.push(point(i));
  return out;
}

void save_csv(const FeatureSet& set, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t d = 0; d < set.dim(); ++d) {
    os << (d ? "," : "") << "dim" << d;
  }
  os << "\n";
  char buf[64];
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto p = set.point(i);
    for (std::size_t d = 0; d < set.dim(); ++d) {
      std::snprintf(buf, sizeof(buf), "%.17g", p[d]);
      os << (d ? "," : "") << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
}

FeatureSet load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty csv: " + path.string());
  std::size_t dim = 0;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) {
      const std::string expected = "dim" + std::to_string(dim);
      if (cell != expected) {
        throw IoError(path.string() + ": expected header column " + expected + ", got " + cell);
      }
      ++dim;
    }
  }
  FeatureSet set(dim);
  std::vector<double> point(dim);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::size_t d = 0;
    while (std::getline(row, cell, ',')) {
      if (d >= dim) throw IoError(path.string() + ": too many columns in row");
      point[d++] = std::stod(cell);
    }
    if (d != dim) throw IoError(path.string() + ": too few columns in row");
    set.push(point);
  }
  return set;
}

void save_fset(const FeatureSet& set, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  detail::write_magic(os, "FSET");
  detail::write_u8(os, kFsetVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(set.size()));
  detail::write_u32(os, static_cast<std::uint32_t>(set.dim()));
  for (double v : set.data()) detail::write_f64(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

FeatureSet load_fset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  detail::expect_magic(is, "FSET", path.string());
  const std::uint8_t version = detail::read_u8(is);
  if (version != kFsetVersion) {
    throw IoError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = detail::read_u32(is);
  const std::uint32_t dim = detail::read_u32(is);
  if (dim == 0) throw IoError(path.string() + ": zero dimension");
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(count) * dim);
  for (std::size_t i = 0; i < static_cast<std::size_t>(count) * dim; ++i) {
    data.push_back(detail::read_f64(is));
  }
  return FeatureSet(dim, std::move(data));
}

}  // namespace raregen::knn
