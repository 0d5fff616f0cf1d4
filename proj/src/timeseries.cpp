#include "starformer/timeseries.hpp"

#include <cmath>

#include "starformer/errors.hpp"

namespace starformer {

TimeSeriesMatrix::TimeSeriesMatrix(Tensor values, std::vector<std::string> roi_ids)
    : values_(std::move(values)), roi_ids_(std::move(roi_ids)) {
  if (values_.rank() != 2) throw DimensionError("time series must be a [rois, timepoints] matrix");
  if (roi_ids_.empty()) {
    roi_ids_.reserve(values_.rows());
    for (std::size_t i = 0; i < values_.rows(); ++i) roi_ids_.push_back("R" + std::to_string(i));
  }
  if (roi_ids_.size() != values_.rows())
    throw DimensionError(std::to_string(roi_ids_.size()) + " roi ids for " + std::to_string(values_.rows()) + " rows");
}

void TimeSeriesMatrix::validate(std::size_t lag) const {
  if (rois() < 2) throw DataError("time series needs at least 2 ROIs, got " + std::to_string(rois()));
  if (timepoints() <= 2 * lag + 2)
    throw DataError("time series of length " + std::to_string(timepoints()) + " too short for lag " +
                    std::to_string(lag));
  for (std::size_t r = 0; r < rois(); ++r)
    for (std::size_t t = 0; t < timepoints(); ++t)
      if (!std::isfinite(values_.at(r, t)))
        throw DataError("non-finite value at roi " + std::to_string(r) + " timepoint " + std::to_string(t));
}

}  // namespace starformer
