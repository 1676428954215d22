#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dida/autodiff.hpp"
#include "dida/dataset.hpp"
#include "dida/invariant_net.hpp"
#include "dida/types.hpp"

namespace dida::ot {

struct DiscreteMeasure {
  Matrix points;   // m x d
  Vector weights;  // m, nonnegative, sums to 1

  Index size() const { return points.rows(); }
  Index dim() const { return points.cols(); }
  void validate() const;

  static DiscreteMeasure uniform(Matrix points);
};

struct TransportPlan {
  Matrix coupling;  // m x m'
  double cost = 0.0;
};

/// Euclidean ground cost between the rows of x and y.
Matrix distance_matrix(const Matrix& x, const Matrix& y);

/// Exact transportation LP by network simplex on the complete bipartite graph.
/// `supply` and `demand` must be nonnegative with equal totals (within 1e-9).
TransportPlan solve_transport(const Vector& supply, const Vector& demand, const Matrix& cost);

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Entry i is the column assigned to row i.
std::vector<int> solve_assignment(const Matrix& cost);

/// Exact W1 with Euclidean ground cost. Equal-size uniform measures go through
/// the assignment solver, everything else through the network simplex.
std::pair<double, TransportPlan> wasserstein1(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

/// Image of mu under sigma: the first dx coordinates are feature coordinates,
/// the next dy are label coordinates. Column sigma(k) of the result is column k.
DiscreteMeasure permute_measure(const DiscreteMeasure& mu, const PermutationPair& sigma, int dx, int dy);

struct QuotientResult {
  double distance = 0.0;
  PermutationPair sigma;
};

inline constexpr long kDefaultPermutationBudget = 5040;

/// min over sigma in S_dx x S_dy of W1(sigma#mu, nu), by exhaustive enumeration.
/// Throws a capacity error when dx! dy! exceeds `budget`.
QuotientResult quotiented_wasserstein1(const DiscreteMeasure& mu, const DiscreteMeasure& nu, int dx, int dy,
                                       long budget = kDefaultPermutationBudget);

long permutation_count(int dx, int dy);

// ---- Lipschitz bounds ----------------------------------------------------------

/// Largest singular value by power iteration on W^T W.
double spectral_norm(const Matrix& W, int max_iterations = 200, double tolerance = 1e-10);

/// A Lipschitz map built from affine layers. With `per_coordinate` the layers
/// describe a scalar map R -> R applied to every coordinate (so the map
/// commutes with coordinate permutations). With `residual` the map is
/// x + net(x).
struct TransformSpec {
  struct Layer {
    Matrix W;
    Vector b;
    ad::Activation activation = ad::Activation::identity;
  };
  std::vector<Layer> layers;
  bool per_coordinate = false;
  bool residual = false;

  Vector apply(const Vector& x) const;
  /// Row-wise application.
  Matrix apply_rows(const Matrix& x) const;
  void validate() const;

  static TransformSpec identity(Index dim);
  /// Per-coordinate translation x + c.
  static TransformSpec translation(double c);
};

/// Product of per-layer spectral norms and activation constants (plus one for
/// residual maps).
double lipschitz_upper_bound(const TransformSpec& net);

/// Certified C_phi for the unlabeled first-layer interaction functional on
/// R^dx: bound on the Lipschitz constant of phi in each argument separately.
double lipschitz_upper_bound(const net::FirstLayerParams& phi, int dx);

/// Rows (1/n) sum_j phi(x_i, x_j) of the invariant layer on unlabeled points.
Matrix invariant_layer(const net::FirstLayerParams& phi, const Matrix& points);

// ---- verification of the stability statements ---------------------------------

struct TrialRecord {
  int trial_id = 0;
  int inequality = 1;
  double lhs = 0.0;
  double rhs = 0.0;
  double ratio = 0.0;
  bool violated = false;
};

io::Json to_json(const TrialRecord& record);

struct VerificationReport {
  std::vector<TrialRecord> records;
  int violations = 0;
  double max_ratio = 0.0;

  void add(const TrialRecord& record);
  std::string to_jsonl() const;
};

inline constexpr double kInequalityTolerance = 1e-8;

/// lhs = W1bar(f(z), f(z')) (quotient over output coordinates), rhs =
/// 2 r C_phi W1bar(z, z'), ratio = lhs / W1bar(z, z').
TrialRecord check_prop1(const net::FirstLayerParams& phi, const Matrix& z, const Matrix& z_prime, int trial_id = 0,
                        long budget = kDefaultPermutationBudget);

/// Both stability inequalities under an input map tau and an output map xi.
/// Suprema are taken over the finite supports. The second inequality is only
/// checked when tau is per-coordinate.
std::vector<TrialRecord> check_prop2(const net::FirstLayerParams& phi, const TransformSpec& tau,
                                     const TransformSpec& xi, const Matrix& z, const Matrix& z_prime,
                                     int trial_id = 0, long budget = kDefaultPermutationBudget);

struct StabilitySuiteConfig {
  int trials = 100;
  int max_n = 6;
  int max_dx = 4;
  int max_r = 3;
  int max_t = 4;
  std::uint64_t seed = 0;
  int jobs = 1;
  long budget = kDefaultPermutationBudget;
};

net::FirstLayerParams random_interaction(int t, int r, ad::Activation act, Rng& rng);

VerificationReport verify_prop1(const StabilitySuiteConfig& cfg);
VerificationReport verify_prop2(const StabilitySuiteConfig& cfg);

// ---- universality ingredients ---------------------------------------------------

/// (e_1(x), ..., e_d(x)) per row, optionally divided by binomial(d, i).
/// Coordinates are sorted before the recurrence so the result is bit-identical
/// under coordinate permutations.
Matrix elementary_symmetric_embed(const Matrix& points, bool normalize = true);

/// Real parts of the roots of X^d - e1 X^(d-1) + e2 X^(d-2) - ..., sorted.
Vector roots_from_coefficients(const Vector& e);

struct GridDiscretization {
  int dim = 0;
  int cells_per_axis = 0;
  Matrix nodes;  // (c+1)^d x d
  Vector alpha;  // hat-function masses, sum to 1
  double delta_max = 0.0;

  /// Nodes carrying positive mass.
  DiscreteMeasure measure() const;
};

/// P1 hat functions on the Kuhn triangulation of the regular grid over [0,1]^d.
GridDiscretization grid_discretize(const DiscreteMeasure& mu, int cells_per_axis);

using VectorMap = std::function<Vector(const Vector&)>;

/// max over pairs of |f(x) - f(y)| / |x - y|^(1/p); coincident pairs skipped.
double holder_estimate(const VectorMap& f, const std::vector<std::pair<Vector, Vector>>& pairs, double p);

}  // namespace dida::ot
