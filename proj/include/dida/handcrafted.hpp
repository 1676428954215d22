#pragma once

#include <string>
#include <vector>

#include "dida/dataset.hpp"
#include "dida/io.hpp"
#include "dida/types.hpp"

namespace dida::meta {

struct SummaryStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double stdev = 0.0;
  double skew = 0.0;
  double kurtosis = 0.0;
  double q1 = 0.0;
  double q2 = 0.0;
  double q3 = 0.0;
};

/// Population moments, excess kurtosis, linearly interpolated quartiles.
/// Skew and kurtosis of a constant sequence are 0. Empty input is all zeros.
SummaryStats summarize(std::vector<double> values);

/// Quantile by linear interpolation between order statistics of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double q);

struct HandcraftedVector {
  Vector values;

  /// Fixed ordering of the meta-feature names.
  static const std::vector<std::string>& names();
  static Index size() { return static_cast<Index>(names().size()); }

  double at(const std::string& name) const;
  io::Json to_json() const;
};

HandcraftedVector extract_handcrafted(const LabeledDataset& z);

}  // namespace dida::meta
