#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dida/autodiff.hpp"
#include "dida/dataset.hpp"
#include "dida/invariant_net.hpp"
#include "dida/io.hpp"

namespace dida::tasks {

using ad::Tape;
using ad::Tensor;

// ---- k-NN target algorithm ------------------------------------------------------

enum class KnnWeights { uniform, distance };

KnnWeights parse_knn_weights(const std::string& name);
std::string to_string(KnnWeights w);

inline constexpr int kMaxNeighbors = 100;
inline constexpr Index kThetaDim = 3;

struct HyperConfigKnn {
  int n_neighbors = 5;
  int p = 2;
  KnnWeights weights = KnnWeights::uniform;

  /// (log k / log 100, p - 1, weights as 0/1).
  Vector encode() const;
  void validate() const;
  bool operator==(const HyperConfigKnn&) const = default;

  /// k log-uniform on [1, 100], p uniform on {1, 2}, weights uniform.
  static HyperConfigKnn sample(Rng& rng);
};

io::Json to_json(const HyperConfigKnn& theta);
HyperConfigKnn knn_from_json(const io::Json& doc);

/// Fraction of test rows whose k-NN vote matches their label.
double knn_accuracy(const LabeledDataset& train, const LabeledDataset& test, const HyperConfigKnn& theta);

/// 50/50 split, stratified by class unless some class has fewer than 2 rows.
std::pair<LabeledDataset, LabeledDataset> stratified_halves(const LabeledDataset& z, std::uint64_t seed);

double knn_performance_oracle(const LabeledDataset& patch, const HyperConfigKnn& theta, std::uint64_t seed);

// ---- patch identification ----------------------------------------------------------

struct PatchPair {
  LabeledDataset a;
  LabeledDataset b;
  int label = 0;
};

struct PatchSampling {
  int rows_min = 100;
  int rows_max = 300;
  int feats_min = 2;
  int feats_max = 2;

  void validate() const;
};

/// count/2 positive pairs (two patches of one dataset) and the rest negative
/// (patches of two distinct datasets), in shuffled order.
std::vector<PatchPair> build_patch_pairs(const std::vector<LabeledDataset>& datasets, int count,
                                         const PatchSampling& sampling, std::uint64_t seed);

inline constexpr double kSimilarityClamp = 1e-7;

/// exp(-|F_a - F_b|) clamped to [1e-7, 1 - 1e-7].
double patch_similarity(const Vector& fa, const Vector& fb);

/// Binary cross-entropy of the clamped similarity against `label`.
Tensor patch_id_loss(Tape& tape, const Tensor& fa, const Tensor& fb, double label);
double patch_id_loss_value(double similarity, double label);

// ---- ranking ------------------------------------------------------------------------

struct RankTriplet {
  std::shared_ptr<const LabeledDataset> patch;
  HyperConfigKnn theta1;
  HyperConfigKnn theta2;
  int label = 0;
  double perf1 = 0.0;
  double perf2 = 0.0;
  /// Seed of the oracle's train/test split of `patch`.
  std::uint64_t split_seed = 0;
};

struct RankSampling {
  int rows_min = 700;
  int rows_max = 900;
  int feats_min = 3;
  int feats_max = 10;

  void validate() const;
  /// Row range multiplied by `factor` (logged).
  RankSampling scaled(double factor) const;
};

/// One patch of `source` and `count` theta pairs with distinct oracle
/// accuracies. Theta pairs are redrawn until the accuracies differ.
std::vector<RankTriplet> make_rank_group(const LabeledDataset& source, int count, const RankSampling& sampling,
                                         std::uint64_t seed);

/// `count` triplets in groups of `per_patch` sharing a patch; sources drawn
/// uniformly. Groups are evaluated on up to `jobs` threads.
std::vector<RankTriplet> build_rank_triplets(const std::vector<LabeledDataset>& datasets, int count,
                                             const RankSampling& sampling, std::uint64_t seed, int per_patch = 1,
                                             int jobs = 1);

/// Per-class weights N / (2 N_c); a missing class gets weight 1.
std::pair<double, double> inverse_frequency_weights(const std::vector<int>& labels);

Tensor ranking_loss(Tape& tape, const Tensor& logit, int label, const std::pair<double, double>& class_weights);

/// Two affine layers on (meta; theta1; theta2); the second outputs the logit.
struct RankerHead {
  net::DenseLayer hidden;
  net::DenseLayer out;

  static RankerHead init(Index meta_dim, Index width, std::uint64_t seed);
  Index meta_dim() const { return hidden.W.cols() - 2 * kThetaDim; }

  Tensor forward(Tape& tape, const Tensor& meta, const HyperConfigKnn& t1, const HyperConfigKnn& t2) const;
  double logit(const Vector& meta, const HyperConfigKnn& t1, const HyperConfigKnn& t2) const;
  std::vector<Tensor> parameters() const;
  RankerHead clone() const;
};

io::Json to_json(const RankerHead& head);
RankerHead ranker_head_from_json(const io::Json& doc);

/// Column-wise z-scoring fitted on training rows; zero-spread columns keep
/// scale 1.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& rows);
  Vector apply(const Vector& x) const;
};

io::Json to_json(const Standardizer& s);
Standardizer standardizer_from_json(const io::Json& doc);

// ---- meta extractors ---------------------------------------------------------------

struct MetaExtractor {
  std::string name;
  std::function<Vector(const LabeledDataset&)> extract;
};

/// Frozen copy of `model`.
MetaExtractor model_extractor(const net::Model& model, std::string name);
MetaExtractor handcrafted_extractor();

// ---- training -----------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

io::Json to_json(const EpochMetrics& m);
std::string metrics_jsonl(const std::vector<EpochMetrics>& history);

/// State handed to a training hook after every epoch. `head` is null for
/// patch identification.
struct EpochSnapshot {
  int epoch = 0;
  const net::Model* model = nullptr;
  const RankerHead* head = nullptr;
  const std::vector<EpochMetrics>* history = nullptr;
  /// The epoch improved the best test accuracy.
  bool best = false;
};

using EpochHook = std::function<void(const EpochSnapshot&)>;

/// Shuffled train/test index split of `count` datasets.
std::pair<std::vector<int>, std::vector<int>> split_indices(int count, double train_fraction, std::uint64_t seed);

struct PatchIdConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  int train_pairs = 2000;
  int test_pairs = 600;
  PatchSampling sampling;
  int jobs = 1;

  void validate() const;
};

io::Json to_json(const PatchIdConfig& cfg);
PatchIdConfig patch_id_config_from_json(const io::Json& doc);

struct PatchIdResult {
  std::unique_ptr<net::Model> best_model;
  int best_epoch = 0;
  double best_test_accuracy = 0.0;
  std::vector<EpochMetrics> history;
};

struct PatchIdSplit {
  std::vector<int> train_datasets;
  std::vector<int> test_datasets;
  std::vector<PatchPair> test_pairs;
};

/// Dataset split and fixed test pairs used by train_patch_id.
PatchIdSplit make_patch_id_split(const std::vector<LabeledDataset>& datasets, const PatchIdConfig& cfg);

/// Mean loss and thresholded accuracy (similarity > 0.5) of `model` on pairs.
std::pair<double, double> evaluate_patch_pairs(const net::Model& model, const std::vector<PatchPair>& pairs,
                                               int jobs = 1);

/// Siamese training: both patches go through the same model. Fresh training
/// pairs are drawn every epoch, test pairs are fixed. Returns the model of the
/// epoch with the best test accuracy.
PatchIdResult train_patch_id(net::Model& model, const std::vector<LabeledDataset>& datasets,
                             const PatchIdConfig& cfg, const EpochHook& hook = {});

struct RankerConfig {
  int epochs = 10;
  /// Triplets per optimizer step.
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  int triplets_per_patch = 4;
  /// Patches drawn per training dataset and epoch.
  int patches_per_dataset = 1;
  int test_patches_per_dataset = 2;
  int head_width = 32;
  RankSampling sampling;
  int jobs = 1;

  void validate() const;
};

io::Json to_json(const RankerConfig& cfg);
RankerConfig ranker_config_from_json(const io::Json& doc);

struct RankerResult {
  /// Null for the handcrafted ranker.
  std::unique_ptr<net::Model> best_model;
  RankerHead best_head;
  /// Only set for the handcrafted ranker.
  Standardizer standardizer;
  int best_epoch = 0;
  double best_test_accuracy = 0.0;
  std::vector<EpochMetrics> history;
};

/// Train/test triplet sets for one seed.
struct RankingSplit {
  std::vector<int> train_datasets;
  std::vector<int> test_datasets;
  std::vector<RankTriplet> test_triplets;
};

RankingSplit make_ranking_split(const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg);

/// Accuracy of sign(logit) against the labels. With `swapped` every triplet is
/// evaluated as (theta2, theta1) against the flipped label.
double ranking_accuracy(const net::Model* model, const RankerHead& head, const Standardizer* standardizer,
                        const std::vector<RankTriplet>& triplets, bool swapped = false, int jobs = 1);

/// Joint training of `model` and a fresh head on ranking_loss.
RankerResult train_ranker(net::Model& model, const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg,
                          const EpochHook& hook = {});

/// Head-only ranker on standardized handcrafted meta-features, same split.
RankerResult train_handcrafted_ranker(const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg,
                                      const EpochHook& hook = {});

// ---- performance regression --------------------------------------------------------

struct RegressorConfig {
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int width = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ScatterPoint {
  double true_perf = 0.0;
  double pred_perf = 0.0;
};

struct RegressorResult {
  std::string extractor;
  double train_mse = 0.0;
  double test_mse = 0.0;
  /// MSE of predicting the training mean on the test samples.
  double baseline_mse = 0.0;
  std::vector<ScatterPoint> scatter;
};

/// (patch, theta, accuracy) samples: both configurations of every triplet.
struct PerfSample {
  std::shared_ptr<const LabeledDataset> patch;
  HyperConfigKnn theta;
  double perf = 0.0;
};

std::vector<PerfSample> perf_samples(const std::vector<RankTriplet>& triplets);

/// 2-layer regressor with sigmoid output on (standardized meta; theta),
/// squared error. The extractor is evaluated once per distinct patch.
RegressorResult train_regressor(const MetaExtractor& extractor, const std::vector<PerfSample>& train,
                                const std::vector<PerfSample>& test, const RegressorConfig& cfg);

std::string scatter_csv(const std::vector<RegressorResult>& results);

}  // namespace dida::tasks
