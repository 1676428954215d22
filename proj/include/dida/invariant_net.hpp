#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dida/autodiff.hpp"
#include "dida/dataset.hpp"
#include "dida/io.hpp"
#include "dida/random.hpp"

namespace dida::net {

using ad::Activation;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

enum class Aggregation { sum, mean };

Aggregation parse_aggregation(const std::string& name);
std::string to_string(Aggregation agg);

/// phi_1((x,y),(x',y')) = rho(A_v e + b_v) with
/// e = (agg_k rho(A_u (x[k]; x'[k]) + b_u), 1{y != y'}).
struct FirstLayerParams {
  Tensor A_u;  // t x 2
  Tensor b_u;  // t
  Tensor A_v;  // r x (t + 1)
  Tensor b_v;  // r
  Activation activation = Activation::relu;
  Aggregation aggregation = Aggregation::sum;

  Index t() const { return A_u.rows(); }
  Index r() const { return A_v.rows(); }
  void validate() const;
};

/// phi_k(p, p') = rho(A (p; p') + b), A of size d_out x (2 d_in).
struct MidLayerParams {
  Tensor A;
  Tensor b;
  Activation activation = Activation::relu;

  Index d_in() const { return A.cols() / 2; }
  Index d_out() const { return A.rows(); }
  void validate() const;
};

struct DenseLayer {
  Tensor W;
  Tensor b;
  Activation activation = Activation::relu;
};

// ---- layer operations (recorded on the tape) -----------------------------------

/// Invariant first layer: row i = (1/n) sum_j phi_1(z_i, z_j). Returns n x r.
Tensor first_layer(Tape& tape, const LabeledDataset& z, const FirstLayerParams& p);

/// Row i = (1/n) sum_j rho(A (p_i; p_j) + b).
Tensor pairwise_layer(Tape& tape, const Tensor& points, const MidLayerParams& p);

/// Row i averages phi over the k Euclidean-nearest points of p_i (itself
/// included, ties broken by index). Neighbour selection is not differentiated.
Tensor localized_pairwise_layer(Tape& tape, const Tensor& points, const MidLayerParams& p, int k_neighbors);

/// Column-wise mean of an n x d point set.
Tensor moment_pool(Tape& tape, const Tensor& points);

Tensor dense_forward(Tape& tape, const DenseLayer& layer, const Tensor& x);

/// Plain-value conveniences (no gradient tracking).
Matrix first_layer_forward(const LabeledDataset& z, const FirstLayerParams& p);
Matrix pairwise_layer_forward(const Matrix& points, const MidLayerParams& p);
Matrix localized_pairwise_forward(const Matrix& points, const MidLayerParams& p, int k_neighbors);
Vector moment_pool(const Matrix& points);

/// Indices of the k nearest rows of `points` to row i, sorted by index.
std::vector<std::vector<int>> nearest_neighbors(const Matrix& points, int k);

// ---- models ------------------------------------------------------------------------

enum class ModelKind { dida, dss_linear, dss_nonlinear, dss_equivariant };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);

struct ArchConfig {
  ModelKind kind = ModelKind::dida;
  Activation activation = Activation::relu;
  // DIDA
  int t = 16;
  int r = 64;
  int d3 = 64;
  Aggregation aggregation = Aggregation::sum;
  /// 0 keeps the full pairwise mid layer; k > 0 uses the localized variant.
  int local_k = 0;
  // DSS: width of the inner networks; 0 sizes it to match `param_budget`.
  int hidden = 0;
  long param_budget = 0;
  /// Output sizes of the three FC layers; the last one is the meta-feature dimension.
  std::vector<int> head{64, 32, 16};

  int meta_dim() const { return head.back(); }
  void validate() const;
};

io::Json to_json(const ArchConfig& cfg);
/// Rejects unknown keys.
ArchConfig arch_from_json(const io::Json& doc);

class Model {
 public:
  virtual ~Model() = default;

  /// Meta-feature vector F(z), a rank-1 tensor of size meta_dim.
  virtual Tensor forward(Tape& tape, const LabeledDataset& z) const = 0;

  const ArchConfig& arch() const { return arch_; }
  int meta_dim() const { return arch_.meta_dim(); }

  /// Ordered (name, tensor) pairs; tensors alias the model storage.
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;
  long parameter_count() const;
  Tensor parameter(const std::string& name) const;

  Vector extract(const LabeledDataset& z) const;

  /// Deep copy with independent storage.
  std::unique_ptr<Model> clone() const;

 protected:
  explicit Model(ArchConfig arch) : arch_(std::move(arch)) {}
  Tensor add_parameter(const std::string& name, Matrix value, const Shape& shape);

  ArchConfig arch_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

class DidaModel final : public Model {
 public:
  DidaModel(const ArchConfig& arch, std::uint64_t seed);
  Tensor forward(Tape& tape, const LabeledDataset& z) const override;

  const FirstLayerParams& first() const { return first_; }
  const MidLayerParams& mid() const { return mid_; }
  const std::vector<DenseLayer>& head() const { return head_; }

 private:
  FirstLayerParams first_;
  MidLayerParams mid_;
  std::vector<DenseLayer> head_;
};

/// Deep-Sets style baseline. Feature branch: rho(sum_k phi(s_k)) on the
/// per-feature sample means s (linear / nonlinear), or an equivariant layer
/// over (sample, feature) cells followed by mean pooling (equivariant). Label
/// branch: rho(sum_c phi(pi_c)) on the class proportions. Branch outputs are
/// concatenated and passed through the FC head.
class DssModel final : public Model {
 public:
  DssModel(const ArchConfig& arch, std::uint64_t seed);
  Tensor forward(Tape& tape, const LabeledDataset& z) const override;

  int hidden() const { return hidden_; }

 private:
  std::vector<DenseLayer> make_stack(const std::string& prefix, const std::vector<int>& dims, Activation last,
                                     std::uint64_t seed);
  Tensor run_stack(Tape& tape, const std::vector<DenseLayer>& stack, Tensor x) const;

  int hidden_ = 0;
  std::vector<DenseLayer> feature_phi_;
  std::vector<DenseLayer> feature_rho_;
  std::vector<DenseLayer> label_phi_;
  std::vector<DenseLayer> label_rho_;
  std::vector<DenseLayer> head_;
};

/// Parameter count of the given architecture without building it.
long count_parameters(const ArchConfig& arch);

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
std::unique_ptr<Model> init_model(const ArchConfig& arch, std::uint64_t seed);

Matrix glorot_uniform(Index fan_out, Index fan_in, Rng& rng);

// ---- checkpoints ---------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

io::Json checkpoint_json(const Model& model, const io::Json& extra = io::Json::object());
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const io::Json& extra = io::Json::object());

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  io::Json extra;
};

LoadedCheckpoint checkpoint_from_json(const io::Json& doc);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dida::net
