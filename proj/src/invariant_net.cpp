#include "dida/invariant_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dida/log.hpp"

namespace dida::net {
namespace {

struct ReluFn {
  static double f(double x) { return x > 0.0 ? x : 0.0; }
  static double df(double x) { return x > 0.0 ? 1.0 : 0.0; }
  static double bp(double x, double g) { return x > 0.0 ? g : 0.0; }
};
struct TanhFn {
  static double f(double x) { return std::tanh(x); }
  static double df(double x) {
    const double t = std::tanh(x);
    return 1.0 - t * t;
  }
  static double bp(double x, double g) { return g * df(x); }
};
struct SigmoidFn {
  static double f(double x) { return ad::apply_activation(Activation::sigmoid, x); }
  static double df(double x) { return ad::activation_derivative(Activation::sigmoid, x); }
  static double bp(double x, double g) { return g * df(x); }
};
struct IdentityFn {
  static double f(double x) { return x; }
  static double df(double) { return 1.0; }
  static double bp(double x, double g) { return g * df(x); }
};

template <typename Body>
void with_activation(Activation kind, Body&& body) {
  switch (kind) {
    case Activation::relu: body(ReluFn{}); break;
    case Activation::tanh: body(TanhFn{}); break;
    case Activation::sigmoid: body(SigmoidFn{}); break;
    case Activation::identity: body(IdentityFn{}); break;
  }
}

// Cached intermediates are kept only while they stay under this many doubles;
// larger inputs are recomputed block by block during the backward pass.
constexpr Index kCacheLimit = Index{1} << 24;
constexpr Index kBlockLimit = Index{1} << 21;

struct FirstLayerData {
  Index n = 0;
  Index dx = 0;
  Index t = 0;
  Index r = 0;
  Activation act = Activation::relu;
  double agg_scale = 1.0;
  Matrix x;  // n x dx
  std::vector<int> y;
  Matrix Au, bu, Av, bv;
  // For feature k: P[k] row i = A_u[:,0] x_ik + b_u, Q[k] row j = A_u[:,1] x_jk.
  std::vector<Matrix> P, Q;

  void prepare() {
    P.assign(static_cast<std::size_t>(dx), Matrix(n, t));
    Q.assign(static_cast<std::size_t>(dx), Matrix(n, t));
    for (Index k = 0; k < dx; ++k) {
      auto& Pk = P[static_cast<std::size_t>(k)];
      auto& Qk = Q[static_cast<std::size_t>(k)];
      for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < t; ++c) {
          Pk(i, c) = Au(c, 0) * x(i, k) + bu(c, 0);
          Qk(i, c) = Au(c, 1) * x(i, k);
        }
      }
    }
  }

  /// E rows (i, j) for i in [i0, i1): aggregated u terms then the label bit.
  void fill_e(Index i0, Index i1, Matrix& E) const {
    E.resize((i1 - i0) * n, t + 1);
    with_activation(act, [&](auto fn) {
      using Fn = decltype(fn);
      for (Index i = i0; i < i1; ++i) {
        for (Index j = 0; j < n; ++j) {
          double* e = E.row((i - i0) * n + j).data();
          std::fill(e, e + t, 0.0);
          for (Index k = 0; k < dx; ++k) {
            const double* p = P[static_cast<std::size_t>(k)].row(i).data();
            const double* q = Q[static_cast<std::size_t>(k)].row(j).data();
            for (Index c = 0; c < t; ++c) e[c] += Fn::f(p[c] + q[c]);
          }
          if (agg_scale != 1.0) {
            for (Index c = 0; c < t; ++c) e[c] *= agg_scale;
          }
          e[t] = y[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
        }
      }
    });
  }

  void fill_h(const Matrix& E, Matrix& H) const {
    H.noalias() = E * Av.transpose();
    H.rowwise() += bv.col(0).transpose();
  }

  Index block_rows() const {
    const Index per_row = n * (t + 1 + r);
    return std::clamp<Index>(kBlockLimit / std::max<Index>(per_row, 1), 1, n);
  }
};

void accumulate_rows_mean(const Matrix& H, Activation act, Index i0, Index i1, Index n, Matrix& out) {
  with_activation(act, [&](auto fn) {
    using Fn = decltype(fn);
    const Index r = H.cols();
    for (Index i = i0; i < i1; ++i) {
      double* o = out.row(i).data();
      std::fill(o, o + r, 0.0);
      for (Index j = 0; j < n; ++j) {
        const double* h = H.row((i - i0) * n + j).data();
        for (Index c = 0; c < r; ++c) o[c] += Fn::f(h[c]);
      }
      for (Index c = 0; c < r; ++c) o[c] /= static_cast<double>(n);
    }
  });
}

// Shared kernel of the full and the localized pairwise layer: row i is the
// mean over the neighbour list of rho(U_i + V_j), summed in index order.
struct PairwiseData {
  Index n = 0;
  Index d_in = 0;
  Index d_out = 0;
  Activation act = Activation::relu;
  Matrix points;
  Matrix A, b;
  Matrix U, V;
  std::vector<std::vector<int>> neighbors;  // empty => all rows

  void prepare() {
    const auto A1 = A.leftCols(d_in);
    const auto A2 = A.rightCols(d_in);
    U.noalias() = points * A1.transpose();
    U.rowwise() += b.col(0).transpose();
    V.noalias() = points * A2.transpose();
  }

  template <typename Visit>
  void for_each_neighbor(Index i, Visit&& visit) const {
    if (neighbors.empty()) {
      for (Index j = 0; j < n; ++j) visit(j);
    } else {
      for (int j : neighbors[static_cast<std::size_t>(i)]) visit(static_cast<Index>(j));
    }
  }

  Index count(Index i) const {
    return neighbors.empty() ? n : static_cast<Index>(neighbors[static_cast<std::size_t>(i)].size());
  }

  Matrix forward() const {
    Matrix out(n, d_out);
    with_activation(act, [&](auto fn) {
      using Fn = decltype(fn);
      std::vector<double> acc(static_cast<std::size_t>(d_out));
      for (Index i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const double* u = U.row(i).data();
        for_each_neighbor(i, [&](Index j) {
          const double* v = V.row(j).data();
          for (Index c = 0; c < d_out; ++c) acc[static_cast<std::size_t>(c)] += Fn::f(u[c] + v[c]);
        });
        const double denom = static_cast<double>(count(i));
        for (Index c = 0; c < d_out; ++c) out(i, c) = acc[static_cast<std::size_t>(c)] / denom;
      }
    });
    return out;
  }

  /// Returns (dU, dV) given the output gradient.
  std::pair<Matrix, Matrix> backward(const Matrix& g) const {
    Matrix dU = Matrix::Zero(n, d_out);
    Matrix dV = Matrix::Zero(n, d_out);
    with_activation(act, [&](auto fn) {
      using Fn = decltype(fn);
      std::vector<double> gs(static_cast<std::size_t>(d_out));
      for (Index i = 0; i < n; ++i) {
        const double scale = 1.0 / static_cast<double>(count(i));
        const double* u = U.row(i).data();
        const double* gi = g.row(i).data();
        double* __restrict du = dU.row(i).data();
        for (Index c = 0; c < d_out; ++c) gs[static_cast<std::size_t>(c)] = gi[c] * scale;
        const double* __restrict gsp = gs.data();
        for_each_neighbor(i, [&](Index j) {
          const double* __restrict v = V.row(j).data();
          double* __restrict dv = dV.row(j).data();
          for (Index c = 0; c < d_out; ++c) {
            const double d = Fn::bp(u[c] + v[c], gsp[c]);
            du[c] += d;
            dv[c] += d;
          }
        });
      }
    });
    return {std::move(dU), std::move(dV)};
  }
};

Tensor pairwise_impl(Tape& tape, const Tensor& points, const MidLayerParams& p,
                     std::vector<std::vector<int>> neighbors) {
  p.validate();
  if (points.rank() != 2 || points.cols() != p.d_in()) {
    fail(ErrorKind::contract, "pairwise layer expects points with " + std::to_string(p.d_in()) + " columns, got " +
                                  ad::shape_string(points.shape()));
  }
  require(points.rows() >= 1, ErrorKind::contract, "pairwise layer on an empty point set");
  auto data = std::make_shared<PairwiseData>();
  data->n = points.rows();
  data->d_in = p.d_in();
  data->d_out = p.d_out();
  data->act = p.activation;
  data->points = points.value();
  data->A = p.A.value();
  data->b = p.b.value();
  data->neighbors = std::move(neighbors);
  data->prepare();
  Matrix out = data->forward();
  Tensor P = points;
  Tensor A = p.A;
  Tensor b = p.b;
  return tape.record({data->n, data->d_out}, std::move(out), {points, p.A, p.b},
                     [data, P, A, b](const Matrix& g) {
                       auto [dU, dV] = data->backward(g);
                       const Index d = data->d_in;
                       if (A.requires_grad()) {
                         Matrix gA(data->d_out, 2 * d);
                         gA.leftCols(d).noalias() = dU.transpose() * data->points;
                         gA.rightCols(d).noalias() = dV.transpose() * data->points;
                         A.accumulate_grad(gA);
                       }
                       if (b.requires_grad()) b.accumulate_grad(dU.colwise().sum().transpose());
                       if (P.requires_grad()) {
                         Matrix gP = dU * data->A.leftCols(d) + dV * data->A.rightCols(d);
                         P.accumulate_grad(gP);
                       }
                     });
}

}  // namespace

Aggregation parse_aggregation(const std::string& name) {
  if (name == "sum") return Aggregation::sum;
  if (name == "mean") return Aggregation::mean;
  fail(ErrorKind::configuration, "unknown aggregation '" + name + "'");
}

std::string to_string(Aggregation agg) { return agg == Aggregation::sum ? "sum" : "mean"; }

void FirstLayerParams::validate() const {
  require(A_u.defined() && b_u.defined() && A_v.defined() && b_v.defined(), ErrorKind::contract,
          "first layer parameters missing");
  require(A_u.cols() == 2 && A_u.rows() >= 1, ErrorKind::contract, "A_u must be t x 2");
  require(b_u.size() == A_u.rows(), ErrorKind::contract, "b_u must have t entries");
  require(A_v.cols() == A_u.rows() + 1 && A_v.rows() >= 1, ErrorKind::contract, "A_v must be r x (t + 1)");
  require(b_v.size() == A_v.rows(), ErrorKind::contract, "b_v must have r entries");
}

void MidLayerParams::validate() const {
  require(A.defined() && b.defined(), ErrorKind::contract, "mid layer parameters missing");
  require(A.cols() >= 2 && A.cols() % 2 == 0 && A.rows() >= 1, ErrorKind::contract,
          "A_k must be d_out x (2 d_in)");
  require(b.size() == A.rows(), ErrorKind::contract, "b_k must have d_out entries");
}

Tensor first_layer(Tape& tape, const LabeledDataset& z, const FirstLayerParams& p) {
  p.validate();
  require(z.n() >= 1 && z.dx() >= 1, ErrorKind::contract, "first layer on an empty dataset");
  require(static_cast<Index>(z.labels.size()) == z.n(), ErrorKind::contract, "label count differs from rows");
  auto data = std::make_shared<FirstLayerData>();
  data->n = z.n();
  data->dx = z.dx();
  data->t = p.t();
  data->r = p.r();
  data->act = p.activation;
  data->agg_scale = p.aggregation == Aggregation::mean ? 1.0 / static_cast<double>(z.dx()) : 1.0;
  data->x = z.features;
  data->y = z.labels;
  data->Au = p.A_u.value();
  data->bu = p.b_u.value();
  data->Av = p.A_v.value();
  data->bv = p.b_v.value();
  data->prepare();

  const Index n = data->n;
  const bool track = p.A_u.requires_grad() || p.b_u.requires_grad() || p.A_v.requires_grad() ||
                     p.b_v.requires_grad();
  const bool cache = track && n * n * (data->t + 1 + data->r) <= kCacheLimit;

  Matrix out(n, data->r);
  auto E_cache = std::make_shared<Matrix>();
  auto H_cache = std::make_shared<Matrix>();
  if (cache) {
    data->fill_e(0, n, *E_cache);
    data->fill_h(*E_cache, *H_cache);
    accumulate_rows_mean(*H_cache, data->act, 0, n, n, out);
  } else {
    const Index block = data->block_rows();
    Matrix E, H;
    for (Index i0 = 0; i0 < n; i0 += block) {
      const Index i1 = std::min(n, i0 + block);
      data->fill_e(i0, i1, E);
      data->fill_h(E, H);
      accumulate_rows_mean(H, data->act, i0, i1, n, out);
    }
  }

  Tensor Au = p.A_u, bu = p.b_u, Av = p.A_v, bv = p.b_v;
  return tape.record(
      {n, data->r}, std::move(out), {p.A_u, p.b_u, p.A_v, p.b_v},
      [data, E_cache, H_cache, cache, Au, bu, Av, bv](const Matrix& g) {
        const Index n = data->n, t = data->t, r = data->r, dx = data->dx;
        Matrix gAv = Matrix::Zero(r, t + 1);
        Matrix gbv = Matrix::Zero(r, 1);
        Matrix gAu = Matrix::Zero(t, 2);
        Matrix gbu = Matrix::Zero(t, 1);
        const Index block = cache ? n : data->block_rows();
        Matrix E_local, H_local, dE;
        const Matrix AvL = data->Av.leftCols(t);
        std::vector<double> s_i(static_cast<std::size_t>(t));
        std::vector<double> au1(static_cast<std::size_t>(t), 0.0);
        std::vector<double> gb(static_cast<std::size_t>(r), 0.0);
        for (Index i0 = 0; i0 < n; i0 += block) {
          const Index i1 = std::min(n, i0 + block);
          const Matrix* E = E_cache.get();
          Matrix* H = H_cache.get();
          if (!cache) {
            data->fill_e(i0, i1, E_local);
            data->fill_h(E_local, H_local);
            E = &E_local;
            H = &H_local;
          }
          // H is overwritten with dH.
          Matrix& dH = *H;
          with_activation(data->act, [&](auto fn) {
            using Fn = decltype(fn);
            const double inv_n = 1.0 / static_cast<double>(n);
            std::vector<double> gs(static_cast<std::size_t>(r));
            const double* __restrict gi = gs.data();
            double* __restrict acc = gb.data();
            for (Index i = i0; i < i1; ++i) {
              for (Index c = 0; c < r; ++c) gs[static_cast<std::size_t>(c)] = g(i, c) * inv_n;
              for (Index j = 0; j < n; ++j) {
                double* d = dH.row((i - i0) * n + j).data();
                for (Index c = 0; c < r; ++c) {
                  d[c] = Fn::bp(d[c], gi[c]);
                  acc[c] += d[c];
                }
              }
            }
          });
          gAv.noalias() += dH.transpose() * (*E);
          dE.noalias() = dH * AvL;
          with_activation(data->act, [&](auto fn) {
            using Fn = decltype(fn);
            const double scale = data->agg_scale;
            double* __restrict s = s_i.data();
            double* __restrict a1 = au1.data();
            for (Index i = i0; i < i1; ++i) {
              for (Index k = 0; k < dx; ++k) {
                const double* __restrict p = data->P[static_cast<std::size_t>(k)].row(i).data();
                const auto& Qk = data->Q[static_cast<std::size_t>(k)];
                std::fill(s, s + t, 0.0);
                for (Index j = 0; j < n; ++j) {
                  const double* __restrict q = Qk.row(j).data();
                  const double* __restrict de = dE.row((i - i0) * n + j).data();
                  const double xj = data->x(j, k);
                  for (Index c = 0; c < t; ++c) {
                    const double d = Fn::bp(p[c] + q[c], de[c]);
                    s[c] += d;
                    a1[c] += d * xj;
                  }
                }
                const double xi = data->x(i, k);
                for (Index c = 0; c < t; ++c) {
                  gAu(c, 0) += scale * s[c] * xi;
                  gbu(c, 0) += scale * s[c];
                }
              }
            }
          });
        }
        for (Index c = 0; c < t; ++c) gAu(c, 1) += data->agg_scale * au1[static_cast<std::size_t>(c)];
        for (Index c = 0; c < r; ++c) gbv(c, 0) = gb[static_cast<std::size_t>(c)];
        if (Au.requires_grad()) Au.accumulate_grad(gAu);
        if (bu.requires_grad()) bu.accumulate_grad(gbu);
        if (Av.requires_grad()) Av.accumulate_grad(gAv);
        if (bv.requires_grad()) bv.accumulate_grad(gbv);
      });
}

Tensor pairwise_layer(Tape& tape, const Tensor& points, const MidLayerParams& p) {
  return pairwise_impl(tape, points, p, {});
}

std::vector<std::vector<int>> nearest_neighbors(const Matrix& points, int k) {
  const Index n = points.rows();
  if (k < 1 || k > n) {
    fail(ErrorKind::domain, "k_neighbors = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<std::vector<int>> result(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) dist[static_cast<std::size_t>(j)] = (points.row(i) - points.row(j)).squaredNorm();
    std::iota(order.begin(), order.end(), 0);
    auto closer = [&](int a, int b) {
      const double da = dist[static_cast<std::size_t>(a)], db = dist[static_cast<std::size_t>(b)];
      return da < db || (da == db && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);
    std::vector<int> chosen(order.begin(), order.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    result[static_cast<std::size_t>(i)] = std::move(chosen);
  }
  return result;
}

Tensor localized_pairwise_layer(Tape& tape, const Tensor& points, const MidLayerParams& p, int k_neighbors) {
  require(points.rank() == 2, ErrorKind::contract, "localized layer expects a point matrix");
  auto neighbors = nearest_neighbors(points.value(), k_neighbors);
  return pairwise_impl(tape, points, p, std::move(neighbors));
}

Tensor moment_pool(Tape& tape, const Tensor& points) {
  return ad::reduce(tape, ad::Reduction::mean, points, ad::Axis::rows);
}

Tensor dense_forward(Tape& tape, const DenseLayer& layer, const Tensor& x) {
  Tensor h = ad::affine(tape, layer.W, layer.b, x);
  if (layer.activation == Activation::identity) return h;
  return ad::activation(tape, layer.activation, h);
}

Matrix first_layer_forward(const LabeledDataset& z, const FirstLayerParams& p) {
  Tape tape;
  return first_layer(tape, z, p).value();
}

Matrix pairwise_layer_forward(const Matrix& points, const MidLayerParams& p) {
  Tape tape;
  return pairwise_layer(tape, Tensor::matrix(points), p).value();
}

Matrix localized_pairwise_forward(const Matrix& points, const MidLayerParams& p, int k_neighbors) {
  Tape tape;
  return localized_pairwise_layer(tape, Tensor::matrix(points), p, k_neighbors).value();
}

Vector moment_pool(const Matrix& points) {
  require(points.rows() >= 1, ErrorKind::contract, "moment pool on an empty point set");
  return points.colwise().mean().transpose();
}

// ---- configuration -----------------------------------------------------------------------

ModelKind parse_model_kind(const std::string& name) {
  if (name == "dida") return ModelKind::dida;
  if (name == "dss-linear") return ModelKind::dss_linear;
  if (name == "dss-nonlinear") return ModelKind::dss_nonlinear;
  if (name == "dss-equivariant") return ModelKind::dss_equivariant;
  fail(ErrorKind::configuration, "unknown model '" + name + "'");
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::dida: return "dida";
    case ModelKind::dss_linear: return "dss-linear";
    case ModelKind::dss_nonlinear: return "dss-nonlinear";
    case ModelKind::dss_equivariant: return "dss-equivariant";
  }
  return "?";
}

void ArchConfig::validate() const {
  require(t >= 1 && r >= 1 && d3 >= 1, ErrorKind::configuration, "layer dimensions must be positive");
  require(head.size() == 3, ErrorKind::configuration, "the FC head has exactly three layers");
  for (int h : head) require(h >= 1, ErrorKind::configuration, "FC head sizes must be positive");
  require(local_k >= 0, ErrorKind::configuration, "local_k must be >= 0");
  require(hidden >= 0 && param_budget >= 0, ErrorKind::configuration, "hidden and param_budget must be >= 0");
}

io::Json to_json(const ArchConfig& cfg) {
  return {{"model", to_string(cfg.kind)},
          {"activation", std::string(ad::to_string(cfg.activation))},
          {"t", cfg.t},
          {"r", cfg.r},
          {"d3", cfg.d3},
          {"aggregation", to_string(cfg.aggregation)},
          {"local_k", cfg.local_k},
          {"hidden", cfg.hidden},
          {"param_budget", cfg.param_budget},
          {"head", cfg.head}};
}

ArchConfig arch_from_json(const io::Json& doc) {
  require(doc.is_object(), ErrorKind::configuration, "architecture must be a JSON object");
  ArchConfig cfg;
  static const std::set<std::string> known{"model", "activation", "t", "r", "d3", "aggregation",
                                           "local_k", "hidden", "param_budget", "head"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) fail(ErrorKind::configuration, "unknown architecture key '" + key + "'");
  }
  try {
    if (doc.contains("model")) cfg.kind = parse_model_kind(doc.at("model").get<std::string>());
    if (doc.contains("activation")) cfg.activation = ad::parse_activation(doc.at("activation").get<std::string>());
    if (doc.contains("t")) cfg.t = doc.at("t").get<int>();
    if (doc.contains("r")) cfg.r = doc.at("r").get<int>();
    if (doc.contains("d3")) cfg.d3 = doc.at("d3").get<int>();
    if (doc.contains("aggregation")) cfg.aggregation = parse_aggregation(doc.at("aggregation").get<std::string>());
    if (doc.contains("local_k")) cfg.local_k = doc.at("local_k").get<int>();
    if (doc.contains("hidden")) cfg.hidden = doc.at("hidden").get<int>();
    if (doc.contains("param_budget")) cfg.param_budget = doc.at("param_budget").get<long>();
    if (doc.contains("head")) cfg.head = doc.at("head").get<std::vector<int>>();
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::configuration, std::string("architecture: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---- models ---------------------------------------------------------------------------------

Matrix glorot_uniform(Index fan_out, Index fan_in, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_out, fan_in);
  for (Index i = 0; i < w.size(); ++i) {
    double v;
    do {
      v = rng.uniform(-s, s);
    } while (v == -s);
    w.data()[i] = v;
  }
  return w;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

long Model::parameter_count() const {
  long total = 0;
  for (const auto& [name, t] : params_) total += static_cast<long>(t.size());
  return total;
}

Tensor Model::parameter(const std::string& name) const {
  for (const auto& [key, t] : params_) {
    if (key == name) return t;
  }
  fail(ErrorKind::contract, "no parameter named '" + name + "'");
}

Tensor Model::add_parameter(const std::string& name, Matrix value, const Shape& shape) {
  Tensor t = Tensor::from_shape(shape, std::move(value), true);
  params_.emplace_back(name, t);
  return t;
}

Vector Model::extract(const LabeledDataset& z) const {
  Tape tape;
  return forward(tape, z).as_vector();
}

std::unique_ptr<Model> Model::clone() const {
  auto copy = init_model(arch_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy->params_[i].second.mutable_value() = params_[i].second.value();
  }
  return copy;
}

namespace {

DenseLayer make_dense(const std::string& prefix, Index in, Index out, Activation act, Rng& rng,
                      const std::function<Tensor(const std::string&, Matrix, const Shape&)>& add) {
  DenseLayer layer;
  layer.W = add(prefix + ".W", glorot_uniform(out, in, rng), {out, in});
  layer.b = add(prefix + ".b", Matrix::Zero(out, 1), {out});
  layer.activation = act;
  return layer;
}

long dense_count(long in, long out) { return in * out + out; }

long head_count(const ArchConfig& a, long in) {
  return dense_count(in, a.head[0]) + dense_count(a.head[0], a.head[1]) + dense_count(a.head[1], a.head[2]);
}

long dss_count(const ArchConfig& a, long h) {
  long total = 0;
  switch (a.kind) {
    case ModelKind::dss_linear:
      total = 2 * (dense_count(1, h) + dense_count(h, h));
      break;
    case ModelKind::dss_nonlinear:
      total = 2 * (dense_count(1, h) + dense_count(h, h) + 2 * dense_count(h, h));
      break;
    case ModelKind::dss_equivariant:
      total = dense_count(4, h) + dense_count(h, h) + dense_count(1, h) + dense_count(h, h) + 2 * dense_count(h, h);
      break;
    case ModelKind::dida:
      break;
  }
  return total + head_count(a, 2 * h);
}

int resolve_hidden(const ArchConfig& a) {
  if (a.hidden > 0) return a.hidden;
  if (a.param_budget <= 0) return 32;
  int best = 1;
  for (int h = 1; h <= 1024; ++h) {
    if (dss_count(a, h) <= a.param_budget) best = h;
  }
  return best;
}

}  // namespace

long count_parameters(const ArchConfig& a) {
  a.validate();
  if (a.kind == ModelKind::dida) {
    return dense_count(2, a.t) + dense_count(a.t + 1, a.r) + dense_count(2L * a.r, a.d3) + head_count(a, a.d3);
  }
  return dss_count(a, resolve_hidden(a));
}

DidaModel::DidaModel(const ArchConfig& arch, std::uint64_t seed) : Model(arch) {
  arch_.validate();
  require(arch_.kind == ModelKind::dida, ErrorKind::configuration, "DidaModel needs model = dida");
  Rng rng(seed);
  auto add = [this](const std::string& name, Matrix v, const Shape& s) { return add_parameter(name, std::move(v), s); };
  const Index t = arch_.t, r = arch_.r, d3 = arch_.d3;
  first_.A_u = add("first.A_u", glorot_uniform(t, 2, rng), {t, 2});
  first_.b_u = add("first.b_u", Matrix::Zero(t, 1), {t});
  first_.A_v = add("first.A_v", glorot_uniform(r, t + 1, rng), {r, t + 1});
  first_.b_v = add("first.b_v", Matrix::Zero(r, 1), {r});
  first_.activation = arch_.activation;
  first_.aggregation = arch_.aggregation;
  mid_.A = add("mid.A", glorot_uniform(d3, 2 * r, rng), {d3, 2 * r});
  mid_.b = add("mid.b", Matrix::Zero(d3, 1), {d3});
  mid_.activation = arch_.activation;
  Index in = d3;
  for (std::size_t l = 0; l < 3; ++l) {
    const Index out = arch_.head[l];
    const Activation act = l + 1 < 3 ? arch_.activation : Activation::identity;
    head_.push_back(make_dense("head" + std::to_string(l), in, out, act, rng, add));
    in = out;
  }
}

Tensor DidaModel::forward(Tape& tape, const LabeledDataset& z) const {
  Tensor h = first_layer(tape, z, first_);
  if (arch_.local_k > 0) {
    h = localized_pairwise_layer(tape, h, mid_, std::min<int>(arch_.local_k, static_cast<int>(z.n())));
  } else {
    h = pairwise_layer(tape, h, mid_);
  }
  Tensor v = moment_pool(tape, h);
  for (const auto& layer : head_) v = dense_forward(tape, layer, v);
  return v;
}

DssModel::DssModel(const ArchConfig& arch, std::uint64_t seed) : Model(arch) {
  arch_.validate();
  require(arch_.kind != ModelKind::dida, ErrorKind::configuration, "DssModel needs a dss-* model kind");
  hidden_ = resolve_hidden(arch_);
  arch_.hidden = hidden_;
  const int h = hidden_;
  const Activation act = arch_.activation;
  switch (arch_.kind) {
    case ModelKind::dss_linear:
      feature_phi_ = make_stack("feature.phi", {1, h}, Activation::identity, child_seed(seed, 1));
      feature_rho_ = make_stack("feature.rho", {h, h}, Activation::identity, child_seed(seed, 2));
      label_phi_ = make_stack("label.phi", {1, h}, Activation::identity, child_seed(seed, 3));
      label_rho_ = make_stack("label.rho", {h, h}, Activation::identity, child_seed(seed, 4));
      break;
    case ModelKind::dss_nonlinear:
      feature_phi_ = make_stack("feature.phi", {1, h, h}, act, child_seed(seed, 1));
      feature_rho_ = make_stack("feature.rho", {h, h, h}, act, child_seed(seed, 2));
      label_phi_ = make_stack("label.phi", {1, h, h}, act, child_seed(seed, 3));
      label_rho_ = make_stack("label.rho", {h, h, h}, act, child_seed(seed, 4));
      break;
    case ModelKind::dss_equivariant:
      feature_phi_ = make_stack("feature.eq", {4, h}, act, child_seed(seed, 1));
      feature_rho_ = make_stack("feature.rho", {h, h}, act, child_seed(seed, 2));
      label_phi_ = make_stack("label.phi", {1, h, h}, act, child_seed(seed, 3));
      label_rho_ = make_stack("label.rho", {h, h, h}, act, child_seed(seed, 4));
      break;
    case ModelKind::dida:
      break;
  }
  Rng rng(child_seed(seed, 5));
  auto add = [this](const std::string& name, Matrix v, const Shape& s) { return add_parameter(name, std::move(v), s); };
  Index in = 2 * h;
  for (std::size_t l = 0; l < 3; ++l) {
    const Index out = arch_.head[l];
    const Activation a = l + 1 < 3 ? act : Activation::identity;
    head_.push_back(make_dense("head" + std::to_string(l), in, out, a, rng, add));
    in = out;
  }
}

std::vector<DenseLayer> DssModel::make_stack(const std::string& prefix, const std::vector<int>& dims,
                                             Activation last, std::uint64_t seed) {
  Rng rng(seed);
  auto add = [this](const std::string& name, Matrix v, const Shape& s) { return add_parameter(name, std::move(v), s); };
  std::vector<DenseLayer> stack;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const Activation act = l + 2 < dims.size() ? arch_.activation : last;
    stack.push_back(make_dense(prefix + std::to_string(l), dims[l], dims[l + 1], act, rng, add));
  }
  return stack;
}

Tensor DssModel::run_stack(Tape& tape, const std::vector<DenseLayer>& stack, Tensor x) const {
  for (const auto& layer : stack) x = dense_forward(tape, layer, x);
  return x;
}

Tensor DssModel::forward(Tape& tape, const LabeledDataset& z) const {
  require(z.n() >= 1 && z.dx() >= 1, ErrorKind::contract, "DSS forward on an empty dataset");
  const Index n = z.n(), dx = z.dx();
  Tensor feature;
  if (arch_.kind == ModelKind::dss_equivariant) {
    // Cell (i, k) sees x_ik, the row mean of x_i, the mean of the other
    // samples at feature k, and that vector's row mean.
    const Vector total = z.features.colwise().sum().transpose();
    Matrix cells(n * dx, 4);
    for (Index i = 0; i < n; ++i) {
      const double row_mean = z.features.row(i).mean();
      double others_mean = 0.0;
      Vector others(dx);
      for (Index k = 0; k < dx; ++k) {
        others[k] = n > 1 ? (total[k] - z.features(i, k)) / static_cast<double>(n - 1) : 0.0;
        others_mean += others[k];
      }
      others_mean /= static_cast<double>(dx);
      for (Index k = 0; k < dx; ++k) {
        cells.row(i * dx + k) << z.features(i, k), row_mean, others[k], others_mean;
      }
    }
    Tensor h = run_stack(tape, feature_phi_, Tensor::matrix(std::move(cells)));
    Tensor pooled = ad::reduce(tape, ad::Reduction::mean, h, ad::Axis::rows);
    feature = run_stack(tape, feature_rho_, pooled);
  } else {
    const Matrix means = z.features.colwise().mean().transpose();
    Tensor h = run_stack(tape, feature_phi_, Tensor::matrix(means));
    Tensor pooled = ad::reduce(tape, ad::Reduction::sum, h, ad::Axis::rows);
    feature = run_stack(tape, feature_rho_, pooled);
  }
  const auto counts = class_counts(z);
  Matrix proportions(static_cast<Index>(counts.size()), 1);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    proportions(static_cast<Index>(c), 0) = static_cast<double>(counts[c]) / static_cast<double>(n);
  }
  Tensor lh = run_stack(tape, label_phi_, Tensor::matrix(std::move(proportions)));
  Tensor label = run_stack(tape, label_rho_, ad::reduce(tape, ad::Reduction::sum, lh, ad::Axis::rows));
  Tensor v = ad::concat(tape, {feature, label});
  for (const auto& layer : head_) v = dense_forward(tape, layer, v);
  return v;
}

std::unique_ptr<Model> init_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  if (arch.kind == ModelKind::dida) return std::make_unique<DidaModel>(arch, seed);
  return std::make_unique<DssModel>(arch, seed);
}

// ---- checkpoints -------------------------------------------------------------------------------

io::Json checkpoint_json(const Model& model, const io::Json& extra) {
  io::Json tensors = io::Json::object();
  for (const auto& [name, t] : model.named_parameters()) {
    const Matrix& v = t.value();
    std::vector<double> values(v.data(), v.data() + v.size());
    tensors[name] = {{"shape", t.shape()}, {"values", values}};
  }
  io::Json doc = {{"format_version", kCheckpointVersion}, {"arch_config", to_json(model.arch())}, {"tensors", tensors}};
  if (!extra.empty()) doc["extra"] = extra;
  return doc;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const io::Json& extra) {
  io::write_json(path, checkpoint_json(model, extra));
}

LoadedCheckpoint checkpoint_from_json(const io::Json& doc) {
  if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("arch_config") || !doc.contains("tensors")) {
    fail(ErrorKind::format, "checkpoint lacks format_version, arch_config or tensors");
  }
  if (!doc.at("format_version").is_number_integer() || doc.at("format_version").get<int>() != kCheckpointVersion) {
    fail(ErrorKind::compatibility, "checkpoint format_version " + doc.at("format_version").dump() +
                                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  LoadedCheckpoint out;
  out.model = init_model(arch_from_json(doc.at("arch_config")), 0);
  const auto& tensors = doc.at("tensors");
  if (!tensors.is_object() || tensors.size() != out.model->named_parameters().size()) {
    fail(ErrorKind::format, "checkpoint tensor set does not match the architecture");
  }
  try {
    for (const auto& [name, t] : out.model->named_parameters()) {
      if (!tensors.contains(name)) fail(ErrorKind::format, "checkpoint misses tensor '" + name + "'");
      const auto& entry = tensors.at(name);
      const auto shape = entry.at("shape").get<Shape>();
      const auto values = entry.at("values").get<std::vector<double>>();
      if (shape != t.shape() || static_cast<Index>(values.size()) != t.size()) {
        fail(ErrorKind::format, "checkpoint tensor '" + name + "' has shape " + ad::shape_string(shape) +
                                    ", expected " + ad::shape_string(t.shape()));
      }
      Tensor handle = t;
      Matrix& dst = handle.mutable_value();
      for (Index i = 0; i < dst.size(); ++i) {
        const double v = values[static_cast<std::size_t>(i)];
        require(std::isfinite(v), ErrorKind::format, "checkpoint tensor '" + name + "' holds a non-finite value");
        dst.data()[i] = v;
      }
    }
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint: ") + e.what());
  }
  if (doc.contains("extra")) out.extra = doc.at("extra");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(io::read_json(path)); }

}  // namespace dida::net
