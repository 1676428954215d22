#include "dida/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dida/io.hpp"
#include "dida/log.hpp"
#include "dida/parallel.hpp"

namespace dida::ot {
namespace {

long factorial(int k) {
  long f = 1;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

bool is_uniform(const Vector& w) {
  const double target = 1.0 / static_cast<double>(w.size());
  for (Index i = 0; i < w.size(); ++i) {
    if (std::abs(w[i] - target) > 1e-15) return false;
  }
  return true;
}

// Basic cell of the transportation tableau; the basis is a spanning tree of
// the bipartite graph rows + columns.
struct Cell {
  int i;
  int j;
  double flow;
};

class TransportSimplex {
 public:
  TransportSimplex(const Vector& a, const Vector& b, const Matrix& C)
      : m_(static_cast<int>(a.size())), n_(static_cast<int>(b.size())), a_(a), b_(b), C_(C) {}

  std::vector<Cell> solve() {
    northwest_corner();
    const int nodes = m_ + n_;
    std::vector<double> pot(static_cast<std::size_t>(nodes));
    std::vector<int> parent_cell(static_cast<std::size_t>(nodes));
    std::vector<int> parent_node(static_cast<std::size_t>(nodes));
    const double tol = 1e-12 * (1.0 + C_.cwiseAbs().maxCoeff());
    const long max_iter = 50L * m_ * n_ + 1000;
    int degenerate_run = 0;
    bool bland = false;
    for (long iter = 0;; ++iter) {
      if (iter > max_iter) fail(ErrorKind::numeric, "network simplex did not converge");
      potentials(pot);
      // pricing
      int ei = -1, ej = -1;
      double best = -tol;
      for (int i = 0; i < m_ && !(bland && ei >= 0); ++i) {
        const double ui = pot[static_cast<std::size_t>(i)];
        const double* c = C_.row(i).data();
        for (int j = 0; j < n_; ++j) {
          const double rc = c[j] - ui - pot[static_cast<std::size_t>(m_ + j)];
          if (rc < best) {
            ei = i;
            ej = j;
            if (bland) break;
            best = rc;
          }
        }
      }
      if (ei < 0) break;

      // tree path from column node back to the row node
      tree_search(ei, parent_cell, parent_node);
      std::vector<int> path;
      for (int v = m_ + ej; v != ei; v = parent_node[static_cast<std::size_t>(v)]) {
        path.push_back(parent_cell[static_cast<std::size_t>(v)]);
      }
      double theta = std::numeric_limits<double>::infinity();
      int leave = -1;
      for (std::size_t s = 0; s < path.size(); s += 2) {
        const Cell& c = cells_[static_cast<std::size_t>(path[s])];
        const bool better = c.flow < theta ||
                            (bland && c.flow == theta && key(c) < key(cells_[static_cast<std::size_t>(leave)]));
        if (better) {
          theta = c.flow;
          leave = path[s];
        }
      }
      for (std::size_t s = 0; s < path.size(); ++s) {
        Cell& c = cells_[static_cast<std::size_t>(path[s])];
        c.flow += (s % 2 == 0) ? -theta : theta;
      }
      degenerate_run = theta > 0.0 ? 0 : degenerate_run + 1;
      if (!bland && degenerate_run > 2 * nodes) bland = true;

      Cell& out = cells_[static_cast<std::size_t>(leave)];
      detach(leave, out.i);
      detach(leave, m_ + out.j);
      out = Cell{ei, ej, theta};
      adj_[static_cast<std::size_t>(ei)].push_back(leave);
      adj_[static_cast<std::size_t>(m_ + ej)].push_back(leave);
    }
    recompute_flows();
    return cells_;
  }

 private:
  long key(const Cell& c) const { return static_cast<long>(c.i) * n_ + c.j; }

  void northwest_corner() {
    adj_.assign(static_cast<std::size_t>(m_ + n_), {});
    int i = 0, j = 0;
    double ra = a_[0], rb = b_[0];
    for (;;) {
      const double x = std::min(ra, rb);
      add_cell(i, j, x);
      ra -= x;
      rb -= x;
      if (i == m_ - 1 && j == n_ - 1) break;
      if (i == m_ - 1) {
        rb = b_[++j];
      } else if (j == n_ - 1) {
        ra = a_[++i];
      } else if (ra <= rb) {
        ra = a_[++i];
      } else {
        rb = b_[++j];
      }
    }
  }

  void add_cell(int i, int j, double flow) {
    const int id = static_cast<int>(cells_.size());
    cells_.push_back({i, j, flow});
    adj_[static_cast<std::size_t>(i)].push_back(id);
    adj_[static_cast<std::size_t>(m_ + j)].push_back(id);
  }

  void detach(int cell, int node) {
    auto& list = adj_[static_cast<std::size_t>(node)];
    auto it = std::find(list.begin(), list.end(), cell);
    *it = list.back();
    list.pop_back();
  }

  int other(const Cell& c, int node) const { return node < m_ ? m_ + c.j : c.i; }

  void potentials(std::vector<double>& pot) {
    std::vector<char> seen(pot.size(), 0);
    std::vector<int> stack{0};
    pot[0] = 0.0;
    seen[0] = 1;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int id : adj_[static_cast<std::size_t>(v)]) {
        const Cell& c = cells_[static_cast<std::size_t>(id)];
        const int w = other(c, v);
        if (seen[static_cast<std::size_t>(w)]) continue;
        seen[static_cast<std::size_t>(w)] = 1;
        // u_i + v_j = C_ij on basic cells
        pot[static_cast<std::size_t>(w)] = C_(c.i, c.j) - pot[static_cast<std::size_t>(v)];
        stack.push_back(w);
      }
    }
  }

  void tree_search(int root, std::vector<int>& parent_cell, std::vector<int>& parent_node) {
    std::fill(parent_node.begin(), parent_node.end(), -1);
    parent_node[static_cast<std::size_t>(root)] = root;
    std::vector<int> stack{root};
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int id : adj_[static_cast<std::size_t>(v)]) {
        const int w = other(cells_[static_cast<std::size_t>(id)], v);
        if (parent_node[static_cast<std::size_t>(w)] != -1) continue;
        parent_node[static_cast<std::size_t>(w)] = v;
        parent_cell[static_cast<std::size_t>(w)] = id;
        stack.push_back(w);
      }
    }
  }

  // Flows of a basis are fixed by the marginals; peel leaves to clear drift.
  void recompute_flows() {
    const int nodes = m_ + n_;
    std::vector<double> residual(static_cast<std::size_t>(nodes));
    for (int i = 0; i < m_; ++i) residual[static_cast<std::size_t>(i)] = a_[i];
    for (int j = 0; j < n_; ++j) residual[static_cast<std::size_t>(m_ + j)] = b_[j];
    std::vector<int> degree(static_cast<std::size_t>(nodes));
    for (int v = 0; v < nodes; ++v) degree[static_cast<std::size_t>(v)] = static_cast<int>(adj_[static_cast<std::size_t>(v)].size());
    std::vector<char> done(cells_.size(), 0);
    std::vector<int> leaves;
    for (int v = 0; v < nodes; ++v) {
      if (degree[static_cast<std::size_t>(v)] == 1) leaves.push_back(v);
    }
    while (!leaves.empty()) {
      const int v = leaves.back();
      leaves.pop_back();
      if (degree[static_cast<std::size_t>(v)] != 1) continue;
      int id = -1;
      for (int c : adj_[static_cast<std::size_t>(v)]) {
        if (!done[static_cast<std::size_t>(c)]) id = c;
      }
      Cell& c = cells_[static_cast<std::size_t>(id)];
      c.flow = std::max(0.0, residual[static_cast<std::size_t>(v)]);
      done[static_cast<std::size_t>(id)] = 1;
      const int w = other(c, v);
      residual[static_cast<std::size_t>(w)] -= c.flow;
      degree[static_cast<std::size_t>(v)] = 0;
      if (--degree[static_cast<std::size_t>(w)] == 1) leaves.push_back(w);
    }
  }

  int m_, n_;
  Vector a_, b_;
  const Matrix& C_;
  std::vector<Cell> cells_;
  std::vector<std::vector<int>> adj_;
};

Matrix apply_layers(const std::vector<TransformSpec::Layer>& layers, const Matrix& x) {
  Matrix h = x;
  for (const auto& layer : layers) {
    Matrix next = h * layer.W.transpose();
    next.rowwise() += layer.b.transpose();
    for (Index k = 0; k < next.size(); ++k) next.data()[k] = ad::apply_activation(layer.activation, next.data()[k]);
    h = std::move(next);
  }
  return h;
}

double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

double max_row_shift(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (Index i = 0; i < a.rows(); ++i) s = std::max(s, (a.row(i) - b.row(i)).norm());
  return s;
}

Matrix random_points(Index n, Index d, Rng& rng) {
  Matrix x(n, d);
  for (Index k = 0; k < x.size(); ++k) x.data()[k] = rng.uniform();
  return x;
}

ad::Activation random_activation(Rng& rng) {
  static constexpr ad::Activation kinds[] = {ad::Activation::relu, ad::Activation::tanh, ad::Activation::sigmoid,
                                             ad::Activation::identity};
  return kinds[rng.uniform_int(0, 3)];
}

// Second measure of a trial: independent, or a perturbed permuted copy.
Matrix partner_points(const Matrix& z, int max_n, Rng& rng) {
  if (rng.bernoulli(0.5)) {
    return random_points(rng.uniform_int(1, max_n), z.cols(), rng);
  }
  const auto perm = rng.permutation(static_cast<int>(z.cols()));
  Matrix out(z.rows(), z.cols());
  const double noise = rng.uniform(0.0, 0.1);
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index k = 0; k < z.cols(); ++k) {
      out(i, perm[static_cast<std::size_t>(k)]) = std::clamp(z(i, k) + noise * rng.normal(), 0.0, 1.0);
    }
  }
  return out;
}

TransformSpec random_transform(Index dim, bool per_coordinate, Rng& rng) {
  TransformSpec spec;
  spec.per_coordinate = per_coordinate;
  const Index io = per_coordinate ? 1 : dim;
  const int style = static_cast<int>(rng.uniform_int(0, 2));
  if (style == 0) {
    // small residual perturbation
    const Index h = rng.uniform_int(2, 6);
    const double eps = rng.uniform(0.0, 0.3);
    Matrix W1(h, io), W2(io, h);
    for (Index k = 0; k < W1.size(); ++k) W1.data()[k] = rng.normal();
    for (Index k = 0; k < W2.size(); ++k) W2.data()[k] = eps * rng.normal() / std::sqrt(static_cast<double>(h));
    Vector b1(h), b2 = Vector::Zero(io);
    for (Index k = 0; k < h; ++k) b1[k] = rng.normal();
    spec.residual = true;
    spec.layers.push_back({W1, b1, random_activation(rng)});
    spec.layers.push_back({W2, b2, ad::Activation::identity});
  } else if (style == 1) {
    Matrix W(io, io);
    for (Index k = 0; k < W.size(); ++k) W.data()[k] = rng.normal() / std::sqrt(static_cast<double>(io));
    Vector b(io);
    for (Index k = 0; k < io; ++k) b[k] = rng.uniform(-0.5, 0.5);
    spec.layers.push_back({W, b, random_activation(rng)});
  } else {
    Matrix W = Matrix::Identity(io, io);
    Vector b(io);
    for (Index k = 0; k < io; ++k) b[k] = rng.uniform(-0.5, 0.5);
    spec.layers.push_back({W, b, ad::Activation::identity});
  }
  return spec;
}

}  // namespace

// ---- measures ---------------------------------------------------------------------

void DiscreteMeasure::validate() const {
  require(points.rows() >= 1, ErrorKind::contract, "measure has no atoms");
  require(weights.size() == points.rows(), ErrorKind::contract, "measure weights do not match atom count");
  require(points.allFinite(), ErrorKind::contract, "measure atoms must be finite");
  for (Index i = 0; i < weights.size(); ++i) {
    require(std::isfinite(weights[i]) && weights[i] >= 0.0, ErrorKind::contract, "measure weights must be >= 0");
  }
  require(std::abs(weights.sum() - 1.0) <= 1e-12, ErrorKind::contract, "measure weights must sum to 1");
}

DiscreteMeasure DiscreteMeasure::uniform(Matrix points) {
  const Index m = points.rows();
  require(m >= 1, ErrorKind::contract, "measure has no atoms");
  DiscreteMeasure mu{std::move(points), Vector::Constant(m, 1.0 / static_cast<double>(m))};
  return mu;
}

Matrix distance_matrix(const Matrix& x, const Matrix& y) {
  require(x.cols() == y.cols(), ErrorKind::contract, "distance matrix: dimension mismatch");
  Matrix D(x.rows(), y.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < y.rows(); ++j) D(i, j) = (x.row(i) - y.row(j)).norm();
  }
  return D;
}

TransportPlan solve_transport(const Vector& supply, const Vector& demand, const Matrix& cost) {
  require(supply.size() >= 1 && demand.size() >= 1, ErrorKind::contract, "transport: empty marginal");
  require(cost.rows() == supply.size() && cost.cols() == demand.size(), ErrorKind::contract,
          "transport: cost matrix does not match marginals");
  require(cost.allFinite(), ErrorKind::contract, "transport: cost must be finite");
  require(supply.minCoeff() >= 0.0 && demand.minCoeff() >= 0.0, ErrorKind::contract,
          "transport: marginals must be nonnegative");
  const double sa = supply.sum(), sb = demand.sum();
  require(std::abs(sa - sb) <= 1e-9 * std::max(1.0, sa), ErrorKind::contract, "transport: unbalanced marginals");
  Vector b = demand;
  if (sb > 0.0) b *= sa / sb;
  TransportSimplex solver(supply, b, cost);
  const auto cells = solver.solve();
  TransportPlan plan;
  plan.coupling = Matrix::Zero(supply.size(), demand.size());
  for (const auto& c : cells) plan.coupling(c.i, c.j) += c.flow;
  plan.cost = (plan.coupling.array() * cost.array()).sum();
  return plan;
}

std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  require(cost.cols() == cost.rows(), ErrorKind::contract, "assignment needs a square cost matrix");
  require(cost.allFinite(), ErrorKind::contract, "assignment: cost must be finite");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      if (j1 == 0) fail(ErrorKind::numeric, "assignment solver found no augmenting column");
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> match(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) match[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return match;
}

std::pair<double, TransportPlan> wasserstein1(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  mu.validate();
  nu.validate();
  if (mu.dim() != nu.dim()) {
    fail(ErrorKind::contract, "wasserstein1: dimensions " + std::to_string(mu.dim()) + " and " +
                                  std::to_string(nu.dim()) + " differ");
  }
  const Matrix D = distance_matrix(mu.points, nu.points);
  if (mu.size() == nu.size() && is_uniform(mu.weights) && is_uniform(nu.weights)) {
    const auto match = solve_assignment(D);
    const double w = 1.0 / static_cast<double>(mu.size());
    TransportPlan plan;
    plan.coupling = Matrix::Zero(mu.size(), nu.size());
    double cost = 0.0;
    for (Index i = 0; i < mu.size(); ++i) {
      plan.coupling(i, match[static_cast<std::size_t>(i)]) = w;
      cost += D(i, match[static_cast<std::size_t>(i)]);
    }
    plan.cost = cost * w;
    return {plan.cost, std::move(plan)};
  }
  TransportPlan plan = solve_transport(mu.weights, nu.weights, D);
  return {plan.cost, std::move(plan)};
}

DiscreteMeasure permute_measure(const DiscreteMeasure& mu, const PermutationPair& sigma, int dx, int dy) {
  require(mu.dim() == dx + dy, ErrorKind::contract, "permute_measure: dimension is not dx + dy");
  require(static_cast<int>(sigma.features.size()) == dx && static_cast<int>(sigma.labels.size()) == dy,
          ErrorKind::contract, "permute_measure: permutation sizes do not match");
  DiscreteMeasure out{Matrix(mu.size(), mu.dim()), mu.weights};
  for (int k = 0; k < dx; ++k) out.points.col(sigma.features[static_cast<std::size_t>(k)]) = mu.points.col(k);
  for (int c = 0; c < dy; ++c) out.points.col(dx + sigma.labels[static_cast<std::size_t>(c)]) = mu.points.col(dx + c);
  return out;
}

long permutation_count(int dx, int dy) {
  // saturate well past any sane budget
  if (dx > 20 || dy > 20) return std::numeric_limits<long>::max();
  const long a = factorial(dx), b = factorial(dy);
  if (b != 0 && a > std::numeric_limits<long>::max() / b) return std::numeric_limits<long>::max();
  return a * b;
}

QuotientResult quotiented_wasserstein1(const DiscreteMeasure& mu, const DiscreteMeasure& nu, int dx, int dy,
                                       long budget) {
  require(dx >= 0 && dy >= 0, ErrorKind::contract, "quotiented W1: negative block size");
  require(mu.dim() == dx + dy && nu.dim() == dx + dy, ErrorKind::contract,
          "quotiented W1: measure dimension is not dx + dy");
  const long required = permutation_count(dx, dy);
  if (required > budget) {
    fail(ErrorKind::capacity, "quotiented W1 needs " + std::to_string(required) +
                                  " permutations, budget is " + std::to_string(budget));
  }
  QuotientResult best;
  best.distance = std::numeric_limits<double>::infinity();
  PermutationPair sigma;
  sigma.features.resize(static_cast<std::size_t>(dx));
  sigma.labels.resize(static_cast<std::size_t>(dy));
  std::iota(sigma.features.begin(), sigma.features.end(), 0);
  do {
    std::iota(sigma.labels.begin(), sigma.labels.end(), 0);
    do {
      const double d = wasserstein1(permute_measure(mu, sigma, dx, dy), nu).first;
      if (d < best.distance) {
        best.distance = d;
        best.sigma = sigma;
      }
    } while (std::next_permutation(sigma.labels.begin(), sigma.labels.end()));
  } while (std::next_permutation(sigma.features.begin(), sigma.features.end()));
  return best;
}

// ---- Lipschitz bounds --------------------------------------------------------------

double spectral_norm(const Matrix& W, int max_iterations, double tolerance) {
  require(W.size() > 0, ErrorKind::contract, "spectral norm of an empty matrix");
  require(W.allFinite(), ErrorKind::numeric, "spectral norm of a non-finite matrix");
  if (W.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  Rng rng(0x5eed);
  Vector v(W.cols());
  for (Index k = 0; k < v.size(); ++k) v[k] = 1.0 + 0.5 * rng.uniform();
  v.normalize();
  double sigma = 0.0;
  bool converged = false;
  for (int it = 0; it < max_iterations; ++it) {
    const Vector wv = W * v;
    Vector next = W.transpose() * wv;
    const double norm = next.norm();
    if (norm == 0.0) {
      // v fell in the null space; restart along a coordinate axis
      v = Vector::Unit(W.cols(), it % W.cols());
      continue;
    }
    const double estimate = std::sqrt(norm);
    v = next / norm;
    if (std::abs(estimate - sigma) <= tolerance * estimate) {
      sigma = estimate;
      converged = true;
      break;
    }
    sigma = estimate;
  }
  if (!converged) fail(ErrorKind::numeric, "power iteration did not converge");
  // power iteration approaches from below; the SVD value keeps the bound certified
  const double exact = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues()(0);
  return std::max(sigma, exact);
}

Vector TransformSpec::apply(const Vector& x) const {
  Matrix row = x.transpose();
  return apply_rows(row).row(0).transpose();
}

Matrix TransformSpec::apply_rows(const Matrix& x) const {
  validate();
  if (per_coordinate) {
    Matrix flat = Eigen::Map<const Matrix>(x.data(), x.size(), 1);
    Matrix y = apply_layers(layers, flat);
    if (residual) y += flat;
    return Eigen::Map<const Matrix>(y.data(), x.rows(), x.cols());
  }
  Matrix y = apply_layers(layers, x);
  require(y.cols() == x.cols() || !residual, ErrorKind::contract, "residual transform changes dimension");
  if (residual) y += x;
  return y;
}

void TransformSpec::validate() const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    require(layers[l].b.size() == layers[l].W.rows(), ErrorKind::contract, "transform layer bias size mismatch");
    if (l > 0) {
      require(layers[l].W.cols() == layers[l - 1].W.rows(), ErrorKind::contract, "transform layers do not chain");
    }
  }
  if (per_coordinate && !layers.empty()) {
    require(layers.front().W.cols() == 1 && layers.back().W.rows() == 1, ErrorKind::contract,
            "per-coordinate transform must map R to R");
  }
}

TransformSpec TransformSpec::identity(Index dim) {
  TransformSpec spec;
  spec.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim), ad::Activation::identity});
  return spec;
}

TransformSpec TransformSpec::translation(double c) {
  TransformSpec spec;
  spec.per_coordinate = true;
  spec.layers.push_back({Matrix::Identity(1, 1), Vector::Constant(1, c), ad::Activation::identity});
  return spec;
}

double lipschitz_upper_bound(const TransformSpec& net) {
  net.validate();
  double c = 1.0;
  for (const auto& layer : net.layers) c *= spectral_norm(layer.W) * ad::activation_lipschitz(layer.activation);
  if (net.layers.empty()) c = net.residual ? 0.0 : 1.0;
  return net.residual ? 1.0 + c : c;
}

double lipschitz_upper_bound(const net::FirstLayerParams& phi, int dx) {
  phi.validate();
  require(dx >= 1, ErrorKind::contract, "interaction bound needs dx >= 1");
  const Matrix& Au = phi.A_u.value();
  const Index t = phi.t();
  const double lr = ad::activation_lipschitz(phi.activation);
  // per-argument map: blockdiag(a) -> rho -> sum over k -> A_v -> rho
  const double a = std::max(spectral_norm(Au.col(0)), spectral_norm(Au.col(1)));
  const double agg = phi.aggregation == net::Aggregation::mean ? 1.0 / dx : 1.0;
  const double sum_norm = std::sqrt(static_cast<double>(dx)) * agg;
  const double av = spectral_norm(phi.A_v.value().leftCols(t));
  return lr * a * sum_norm * av * lr;
}

Matrix invariant_layer(const net::FirstLayerParams& phi, const Matrix& points) {
  const auto z = make_dataset("measure", points, std::vector<int>(static_cast<std::size_t>(points.rows()), 0), 2);
  return net::first_layer_forward(z, phi);
}

// ---- verification ---------------------------------------------------------------

io::Json to_json(const TrialRecord& record) {
  return io::Json{{"trial_id", record.trial_id}, {"inequality", record.inequality}, {"lhs", record.lhs},
                  {"rhs", record.rhs},           {"ratio", record.ratio},           {"violated", record.violated}};
}

void VerificationReport::add(const TrialRecord& record) {
  records.push_back(record);
  if (record.violated) ++violations;
  max_ratio = std::max(max_ratio, record.ratio);
}

std::string VerificationReport::to_jsonl() const {
  std::vector<io::Json> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(to_json(r));
  return io::to_jsonl(lines);
}

TrialRecord check_prop1(const net::FirstLayerParams& phi, const Matrix& z, const Matrix& z_prime, int trial_id,
                        long budget) {
  require(z.cols() == z_prime.cols(), ErrorKind::contract, "prop1: inputs differ in dimension");
  const int dx = static_cast<int>(z.cols());
  const int r = static_cast<int>(phi.r());
  const double w_in =
      quotiented_wasserstein1(DiscreteMeasure::uniform(z), DiscreteMeasure::uniform(z_prime), dx, 0, budget).distance;
  const Matrix fz = invariant_layer(phi, z);
  const Matrix fzp = invariant_layer(phi, z_prime);
  const double w_out =
      quotiented_wasserstein1(DiscreteMeasure::uniform(fz), DiscreteMeasure::uniform(fzp), r, 0, budget).distance;
  TrialRecord rec;
  rec.trial_id = trial_id;
  rec.lhs = w_out;
  rec.rhs = 2.0 * r * lipschitz_upper_bound(phi, dx) * w_in;
  rec.ratio = w_in > 0.0 ? w_out / w_in : 0.0;
  rec.violated = rec.lhs > rec.rhs + kInequalityTolerance;
  return rec;
}

std::vector<TrialRecord> check_prop2(const net::FirstLayerParams& phi, const TransformSpec& tau,
                                     const TransformSpec& xi, const Matrix& z, const Matrix& z_prime, int trial_id,
                                     long budget) {
  require(z.cols() == z_prime.cols(), ErrorKind::contract, "prop2: inputs differ in dimension");
  const int dx = static_cast<int>(z.cols());
  const int r = static_cast<int>(phi.r());
  const double c_phi = lipschitz_upper_bound(phi, dx);
  std::vector<TrialRecord> out;

  const Matrix tz = tau.apply_rows(z);
  require(tz.cols() == dx, ErrorKind::contract, "prop2: tau must map R^d to R^d");
  const Matrix f_tz = invariant_layer(phi, tz);
  const Matrix xi_f_tz = xi.apply_rows(f_tz);
  require(xi_f_tz.cols() == r, ErrorKind::contract, "prop2: xi must map R^r to R^r");
  const Matrix fz = invariant_layer(phi, z);

  TrialRecord first;
  first.trial_id = trial_id;
  first.inequality = 1;
  first.lhs =
      quotiented_wasserstein1(DiscreteMeasure::uniform(xi_f_tz), DiscreteMeasure::uniform(fz), r, 0, budget).distance;
  first.rhs = max_row_shift(xi_f_tz, f_tz) + 2.0 * r * c_phi * max_row_shift(tz, z);
  first.ratio = first.rhs > 0.0 ? first.lhs / first.rhs : 0.0;
  first.violated = first.lhs > first.rhs + kInequalityTolerance;
  out.push_back(first);

  if (tau.per_coordinate) {
    const Matrix tzp = tau.apply_rows(z_prime);
    const Matrix xi_f_tzp = xi.apply_rows(invariant_layer(phi, tzp));
    const double w_in =
        quotiented_wasserstein1(DiscreteMeasure::uniform(z), DiscreteMeasure::uniform(z_prime), dx, 0, budget)
            .distance;
    TrialRecord second;
    second.trial_id = trial_id;
    second.inequality = 2;
    second.lhs = quotiented_wasserstein1(DiscreteMeasure::uniform(xi_f_tz), DiscreteMeasure::uniform(xi_f_tzp), r, 0,
                                         budget)
                     .distance;
    second.rhs = 2.0 * r * c_phi * lipschitz_upper_bound(tau) * lipschitz_upper_bound(xi) * w_in;
    second.ratio = second.rhs > 0.0 ? second.lhs / second.rhs : 0.0;
    second.violated = second.lhs > second.rhs + kInequalityTolerance;
    out.push_back(second);
  }
  return out;
}

net::FirstLayerParams random_interaction(int t, int r, ad::Activation act, Rng& rng) {
  auto tensor = [&](Index rows, Index cols, double scale) {
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = scale * rng.normal();
    return m;
  };
  net::FirstLayerParams p;
  p.A_u = ad::Tensor::from_shape({t, 2}, tensor(t, 2, 1.0), false);
  p.b_u = ad::Tensor::from_shape({t}, tensor(t, 1, 0.5), false);
  p.A_v = ad::Tensor::from_shape({r, t + 1}, tensor(r, t + 1, 1.0 / std::sqrt(static_cast<double>(t))), false);
  p.b_v = ad::Tensor::from_shape({r}, tensor(r, 1, 0.5), false);
  p.activation = act;
  p.aggregation = rng.bernoulli(0.5) ? net::Aggregation::sum : net::Aggregation::mean;
  return p;
}

VerificationReport verify_prop1(const StabilitySuiteConfig& cfg) {
  require(cfg.trials >= 1, ErrorKind::configuration, "prop1 suite needs at least one trial");
  std::vector<TrialRecord> records(static_cast<std::size_t>(cfg.trials));
  parallel_for(cfg.trials, cfg.jobs, [&](long trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    const int dx = static_cast<int>(rng.uniform_int(1, cfg.max_dx));
    const int r = static_cast<int>(rng.uniform_int(1, cfg.max_r));
    const int t = static_cast<int>(rng.uniform_int(1, cfg.max_t));
    const auto phi = random_interaction(t, r, random_activation(rng), rng);
    const Matrix z = random_points(rng.uniform_int(1, cfg.max_n), dx, rng);
    const Matrix zp = trial == 0 ? z : partner_points(z, cfg.max_n, rng);
    records[static_cast<std::size_t>(trial)] = check_prop1(phi, z, zp, static_cast<int>(trial), cfg.budget);
  });
  VerificationReport report;
  for (const auto& r : records) report.add(r);
  return report;
}

VerificationReport verify_prop2(const StabilitySuiteConfig& cfg) {
  require(cfg.trials >= 1, ErrorKind::configuration, "prop2 suite needs at least one trial");
  std::vector<std::vector<TrialRecord>> records(static_cast<std::size_t>(cfg.trials));
  parallel_for(cfg.trials, cfg.jobs, [&](long trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    const int dx = static_cast<int>(rng.uniform_int(1, cfg.max_dx));
    const int r = static_cast<int>(rng.uniform_int(1, cfg.max_r));
    const int t = static_cast<int>(rng.uniform_int(1, cfg.max_t));
    const auto phi = random_interaction(t, r, random_activation(rng), rng);
    const Matrix z = random_points(rng.uniform_int(1, cfg.max_n), dx, rng);
    const Matrix zp = partner_points(z, cfg.max_n, rng);
    // a quarter of the trials use a non-equivariant tau (first inequality only)
    const bool per_coordinate = trial % 4 != 3;
    const TransformSpec tau = trial == 0 ? TransformSpec::identity(dx) : random_transform(dx, per_coordinate, rng);
    const TransformSpec xi = trial == 0 ? TransformSpec::identity(r) : random_transform(r, false, rng);
    records[static_cast<std::size_t>(trial)] = check_prop2(phi, tau, xi, z, zp, static_cast<int>(trial), cfg.budget);
  });
  VerificationReport report;
  for (const auto& rs : records) {
    for (const auto& r : rs) report.add(r);
  }
  return report;
}

// ---- universality ingredients -----------------------------------------------------

Matrix elementary_symmetric_embed(const Matrix& points, bool normalize) {
  const Index d = points.cols();
  if (d > 12) fail(ErrorKind::capacity, "symmetric embedding supports d <= 12, got " + std::to_string(d));
  require(points.allFinite(), ErrorKind::domain, "symmetric embedding needs finite points");
  Matrix out(points.rows(), d);
  std::vector<double> x(static_cast<std::size_t>(d)), e(static_cast<std::size_t>(d + 1));
  for (Index row = 0; row < points.rows(); ++row) {
    for (Index k = 0; k < d; ++k) x[static_cast<std::size_t>(k)] = points(row, k);
    std::sort(x.begin(), x.end());
    std::fill(e.begin(), e.end(), 0.0);
    e[0] = 1.0;
    for (Index k = 0; k < d; ++k) {
      for (Index i = k + 1; i >= 1; --i) {
        e[static_cast<std::size_t>(i)] += x[static_cast<std::size_t>(k)] * e[static_cast<std::size_t>(i - 1)];
      }
    }
    for (Index i = 1; i <= d; ++i) {
      double v = e[static_cast<std::size_t>(i)];
      if (normalize) v /= binomial(static_cast<int>(d), static_cast<int>(i));
      out(row, i - 1) = v;
    }
  }
  return out;
}

Vector roots_from_coefficients(const Vector& e) {
  const Index d = e.size();
  require(d >= 1, ErrorKind::contract, "roots need at least one coefficient");
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(d, d);
  for (Index i = 1; i < d; ++i) companion(i, i - 1) = 1.0;
  // X^d + sum_k a_k X^k with a_{d-i} = (-1)^i e_i
  for (Index i = 1; i <= d; ++i) {
    const double a = (i % 2 == 0 ? 1.0 : -1.0) * e[i - 1];
    companion(d - i, d - 1) = -a;
  }
  Eigen::EigenSolver<Eigen::MatrixXd> solver(companion, false);
  require(solver.info() == Eigen::Success, ErrorKind::numeric, "root finding did not converge");
  Vector roots = solver.eigenvalues().real();
  std::sort(roots.data(), roots.data() + roots.size());
  return roots;
}

DiscreteMeasure GridDiscretization::measure() const {
  std::vector<Index> keep;
  for (Index j = 0; j < alpha.size(); ++j) {
    if (alpha[j] > 0.0) keep.push_back(j);
  }
  DiscreteMeasure mu{Matrix(static_cast<Index>(keep.size()), dim), Vector(static_cast<Index>(keep.size()))};
  for (std::size_t s = 0; s < keep.size(); ++s) {
    mu.points.row(static_cast<Index>(s)) = nodes.row(keep[s]);
    mu.weights[static_cast<Index>(s)] = alpha[keep[s]];
  }
  return mu;
}

GridDiscretization grid_discretize(const DiscreteMeasure& mu, int cells_per_axis) {
  mu.validate();
  require(cells_per_axis >= 1, ErrorKind::contract, "grid needs at least one cell per axis");
  const int d = static_cast<int>(mu.dim());
  require(d >= 1, ErrorKind::contract, "grid needs d >= 1");
  const Index side = cells_per_axis + 1;
  double total = 1.0;
  for (int k = 0; k < d; ++k) total *= static_cast<double>(side);
  if (total > 1e6) fail(ErrorKind::capacity, "grid has more than 1e6 nodes");
  if (mu.points.minCoeff() < 0.0 || mu.points.maxCoeff() > 1.0) {
    fail(ErrorKind::domain, "grid discretization needs support inside the unit cube");
  }
  const Index count = static_cast<Index>(total);
  const double h = 1.0 / cells_per_axis;

  GridDiscretization g;
  g.dim = d;
  g.cells_per_axis = cells_per_axis;
  g.nodes.resize(count, d);
  for (Index j = 0; j < count; ++j) {
    Index rest = j;
    for (int k = d - 1; k >= 0; --k) {
      g.nodes(j, k) = static_cast<double>(rest % side) * h;
      rest /= side;
    }
  }
  g.alpha = Vector::Zero(count);
  g.delta_max = std::sqrt(static_cast<double>(d)) * h;

  std::vector<Index> base(static_cast<std::size_t>(d));
  std::vector<double> frac(static_cast<std::size_t>(d));
  std::vector<int> order(static_cast<std::size_t>(d));
  for (Index i = 0; i < mu.size(); ++i) {
    for (int k = 0; k < d; ++k) {
      const double s = mu.points(i, k) * cells_per_axis;
      const Index b = std::min<Index>(static_cast<Index>(std::floor(s)), cells_per_axis - 1);
      base[static_cast<std::size_t>(k)] = b;
      frac[static_cast<std::size_t>(k)] = std::clamp(s - static_cast<double>(b), 0.0, 1.0);
    }
    // Kuhn simplex: walk from the base corner along coordinates by decreasing fraction
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
    });
    auto node_index = [&]() {
      Index j = 0;
      for (int k = 0; k < d; ++k) j = j * side + base[static_cast<std::size_t>(k)];
      return j;
    };
    const double w = mu.weights[i];
    double prev = 1.0;
    for (int s = 0; s <= d; ++s) {
      const double f = s < d ? frac[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])] : 0.0;
      const double lambda = prev - f;
      if (lambda > 0.0) g.alpha[node_index()] += w * lambda;
      if (s < d) ++base[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
      prev = f;
    }
  }
  return g;
}

double holder_estimate(const VectorMap& f, const std::vector<std::pair<Vector, Vector>>& pairs, double p) {
  require(p >= 1.0, ErrorKind::contract, "Holder exponent needs p >= 1");
  double best = 0.0;
  for (const auto& [x, y] : pairs) {
    const double dist = (x - y).norm();
    if (dist == 0.0) continue;
    const double num = (f(x) - f(y)).norm();
    best = std::max(best, num / std::pow(dist, 1.0 / p));
  }
  return best;
}

}  // namespace dida::ot
