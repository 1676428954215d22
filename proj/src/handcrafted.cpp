#include "dida/handcrafted.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace dida::meta {
namespace {

const char* const kStatNames[] = {"Min", "Max", "Mean", "Stdev", "Skew", "Kurtosis", "Quartile1", "Quartile2",
                                  "Quartile3"};

void push_stats(std::vector<double>& out, const SummaryStats& s) {
  for (double v : {s.min, s.max, s.mean, s.stdev, s.skew, s.kurtosis, s.q1, s.q2, s.q3}) out.push_back(v);
}

std::vector<std::string> build_names() {
  std::vector<std::string> names{"NumberOfInstances", "NumberOfFeatures", "NumberOfClasses", "Dimensionality"};
  for (const char* s : kStatNames) names.push_back(std::string(s) + "ClassProbability");
  for (const char* s : kStatNames) names.push_back(std::string(s) + "CardinalityOfNumericFeatures");
  names.push_back("MajorityClassSize");
  names.push_back("MinorityClassSize");
  return names;
}

}  // namespace

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

SummaryStats summarize(std::vector<double> values) {
  SummaryStats s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  s.min = values.front();
  s.max = values.back();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : values) {
    const double d = v - s.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.stdev = std::sqrt(m2);
  // relative threshold so rounding noise on constant data stays degenerate
  const double scale = std::max(1.0, std::abs(s.mean));
  if (m2 > 1e-24 * scale * scale) {
    s.skew = m3 / std::pow(m2, 1.5);
    s.kurtosis = m4 / (m2 * m2) - 3.0;
  }
  s.q1 = quantile_sorted(values, 0.25);
  s.q2 = quantile_sorted(values, 0.5);
  s.q3 = quantile_sorted(values, 0.75);
  return s;
}

const std::vector<std::string>& HandcraftedVector::names() {
  static const std::vector<std::string> names = build_names();
  return names;
}

double HandcraftedVector::at(const std::string& name) const {
  const auto& list = names();
  const auto it = std::find(list.begin(), list.end(), name);
  require(it != list.end(), ErrorKind::contract, "unknown meta-feature '" + name + "'");
  return values[it - list.begin()];
}

io::Json HandcraftedVector::to_json() const {
  io::Json out = io::Json::object();
  const auto& list = names();
  for (std::size_t k = 0; k < list.size(); ++k) out[list[k]] = values[static_cast<Index>(k)];
  return out;
}

HandcraftedVector extract_handcrafted(const LabeledDataset& z) {
  require(z.n() >= 1, ErrorKind::contract, "handcrafted meta-features need n >= 1");
  const double n = static_cast<double>(z.n());
  const double d = static_cast<double>(z.dx());

  std::map<int, Index> counts;
  for (int y : z.labels) ++counts[y];
  std::vector<double> probs;
  Index majority = 0, minority = z.n();
  for (const auto& [label, c] : counts) {
    probs.push_back(static_cast<double>(c) / n);
    majority = std::max(majority, c);
    minority = std::min(minority, c);
  }

  std::vector<double> cardinality;
  for (Index k = 0; k < z.dx(); ++k) {
    std::set<double> distinct;
    for (Index i = 0; i < z.n(); ++i) distinct.insert(z.features(i, k));
    cardinality.push_back(static_cast<double>(distinct.size()));
  }

  std::vector<double> out{n, d, static_cast<double>(counts.size()), d / n};
  push_stats(out, summarize(probs));
  push_stats(out, summarize(cardinality));
  out.push_back(static_cast<double>(majority));
  out.push_back(static_cast<double>(minority));

  HandcraftedVector v;
  v.values = Eigen::Map<Vector>(out.data(), static_cast<Index>(out.size()));
  return v;
}

}  // namespace dida::meta
