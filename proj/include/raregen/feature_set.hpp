#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "raregen/tensor.hpp"

namespace raregen::knn {

enum class SetLabel { kUnlabeled, kReal, kFake };

// A set of same-dimension points in feature space, stored row-major.
class FeatureSet {
 public:
  FeatureSet() = default;
  explicit FeatureSet(std::size_t dim, SetLabel label = SetLabel::kUnlabeled)
      : dim_(dim), label_(label) {}
  FeatureSet(std::size_t dim, std::vector<double> data, SetLabel label = SetLabel::kUnlabeled);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return dim_ == 0 ? 0 : data_.size() / dim_; }
  SetLabel label() const { return label_; }
  void set_label(SetLabel label) { label_ = label; }

  std::span<const double> point(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * dim_, dim_);
  }
  const std::vector<double>& data() const { return data_; }

  void push(std::span<const double> point);
  void push(const numerics::Tensor& point) { push(point.data()); }
  numerics::Tensor point_tensor(std::size_t i) const;

  FeatureSet subset(std::span<const std::size_t> indices) const;

  bool operator==(const FeatureSet& other) const {
    return dim_ == other.dim_ && data_ == other.data_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<double> data_;
  SetLabel label_ = SetLabel::kUnlabeled;
};

// CSV form: header "dim0,...,dim{n-1}", one row per point, full round-trip
// precision.
void save_csv(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet load_csv(const std::filesystem::path& path);

// Binary form: magic "FSET", version byte, u32 count, u32 dim, then count*dim
// f64 values, all little-endian.
void save_fset(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet load_fset(const std::filesystem::path& path);

}  // namespace raregen::knn
