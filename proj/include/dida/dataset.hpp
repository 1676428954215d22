#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dida/error.hpp"
#include "dida/types.hpp"

namespace dida {

/// n labelled samples: an n x dX feature matrix and one categorical label per
/// row, read as the uniform discrete distribution over its rows.
struct LabeledDataset {
  std::string id;
  Matrix features;
  std::vector<int> labels;
  int num_classes = 2;

  Index n() const { return features.rows(); }
  Index dx() const { return features.cols(); }

  /// Throws a contract error when an invariant does not hold.
  void validate() const;
  bool operator==(const LabeledDataset& other) const;
};

LabeledDataset make_dataset(std::string id, Matrix features, std::vector<int> labels, int num_classes);

/// Class counts, indexed by label.
std::vector<Index> class_counts(const LabeledDataset& z);

// ---- group action -------------------------------------------------------------

/// sigma = (sigma_X, sigma_Y): a feature permutation and a class relabeling.
struct PermutationPair {
  std::vector<int> features;
  std::vector<int> labels;

  static PermutationPair identity(int dx, int classes);
  static PermutationPair random(int dx, int classes, std::uint64_t seed);

  PermutationPair inverse() const;
  void validate() const;
};

/// (outer o inner)(k) = outer(inner(k)), acting as `inner` first.
PermutationPair compose(const PermutationPair& outer, const PermutationPair& inner);

/// Column k of the result is column sigma_X^-1(k) of `z`; labels map through
/// sigma_Y; row order is untouched.
LabeledDataset apply_permutation(const LabeledDataset& z, const PermutationPair& sigma);

// ---- patches ------------------------------------------------------------------

struct PatchSpec {
  std::vector<int> rows;
  std::vector<int> features;
  std::string source_id;
};

/// Uniform draw of `n_rows` rows and `n_features` columns without
/// replacement, kept in sampling order. The patch inherits the source id and
/// its labels are re-indexed densely (sorted by original class id).
std::pair<LabeledDataset, PatchSpec> sample_patch(const LabeledDataset& z, int n_rows, int n_features,
                                                  std::uint64_t seed);

LabeledDataset extract_patch(const LabeledDataset& z, const PatchSpec& spec);

// ---- synthetic generators --------------------------------------------------------

enum class ToyKind { gaussian_mixture, moons, rings };

ToyKind parse_toy_kind(const std::string& name);
std::string to_string(ToyKind kind);

struct ToyGenConfig {
  ToyKind kind = ToyKind::gaussian_mixture;
  int n = 100;
  int classes = 2;
  std::uint64_t seed = 0;
  double noise = 0.05;
  /// Ambient dimension; the base families live in 2-D and extra coordinates
  /// carry isotropic noise (rings become spherical shells, blobs stay blobs).
  int dims = 2;
  /// Fraction of labels reassigned uniformly to another class.
  double label_noise = 0.0;
  /// Linear distortion of the first two coordinates before noise: stretch
  /// along the first axis, then rotate by `rotation` radians.
  double rotation = 0.0;
  double stretch = 1.0;
  std::string id;

  void validate() const;
};

/// Draws for a family of toy datasets. Every parameter is sampled
/// independently per dataset from child seeds of `seed`.
struct ToyBenchmarkConfig {
  int count = 100;
  std::uint64_t seed = 0;
  int n_min = 400;
  int n_max = 800;
  int min_classes = 2;
  int max_classes = 7;
  int dims_min = 2;
  int dims_max = 2;
  double noise_min = 0.02;
  double noise_max = 0.15;
  double label_noise_max = 0.0;
  /// Random rotation and stretch in [1, max_stretch].
  bool vary_geometry = true;
  double max_stretch = 3.0;

  void validate() const;
};

std::vector<ToyGenConfig> toy_benchmark_configs(const ToyBenchmarkConfig& cfg);
std::vector<LabeledDataset> generate_toy_benchmark(const ToyBenchmarkConfig& cfg);

/// Radius of class `c` in the rings family.
double ring_radius(int c, int classes);

LabeledDataset generate_toy(const ToyGenConfig& cfg);

/// Per-feature min-max scaling into [0, 1]; constant columns map to 0.5.
LabeledDataset normalize_features(const LabeledDataset& z);

// ---- CSV ---------------------------------------------------------------------------

struct CsvLoadResult {
  LabeledDataset dataset;
  std::size_t dropped_rows = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> ignored_columns;
};

/// Comma-separated, header row, '.' decimal point. Numeric columns become
/// features, the label column is re-indexed densely, rows with a missing cell
/// (empty, NA, NaN, ?) are dropped and counted.
CsvLoadResult load_csv(const std::filesystem::path& path, const std::string& label_column);

/// Header `x0,...,x{d-1},label`; values printed with 17 significant digits.
void write_csv(const std::filesystem::path& path, const LabeledDataset& z);
std::string to_csv(const LabeledDataset& z);

struct ManifestEntry {
  std::string id;
  std::string path;
  std::string label_column;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Loads every manifest entry (paths relative to the manifest directory) and
/// min-max normalizes it.
std::vector<LabeledDataset> load_manifest_datasets(const std::filesystem::path& manifest_path);

}  // namespace dida
