#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "starformer/numkernel.hpp"

namespace starformer {

// One subject's ROI x time BOLD matrix.
class TimeSeriesMatrix {
 public:
  TimeSeriesMatrix() = default;
  // `values` is [rois, timepoints]. Empty `roi_ids` get "R<i>" defaults.
  TimeSeriesMatrix(Tensor values, std::vector<std::string> roi_ids = {});

  std::size_t rois() const noexcept { return values_.empty() ? 0 : values_.rows(); }
  std::size_t timepoints() const noexcept { return values_.cols(); }
  const Tensor& values() const noexcept { return values_; }
  Tensor& values() noexcept { return values_; }
  std::span<const double> series(std::size_t roi) const { return values_.row(roi); }
  const std::vector<std::string>& roi_ids() const noexcept { return roi_ids_; }

  // n >= 2, finite cells, and enough timepoints for a lag-`lag` F-test.
  void validate(std::size_t lag) const;

  friend bool operator==(const TimeSeriesMatrix&, const TimeSeriesMatrix&) = default;

 private:
  Tensor values_;
  std::vector<std::string> roi_ids_;
};

}  // namespace starformer
