#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dida/invariant_net.hpp"
#include "dida/random.hpp"

using namespace dida;
using namespace dida::net;

namespace {

LabeledDataset random_dataset(int n, int dx, int classes, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, dx);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, classes - 1));
  return make_dataset("rand", x, y, classes);
}

Matrix random_matrix(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

double act(Activation kind, double x) { return ad::apply_activation(kind, x); }

// Straight nested-loop reimplementation of the DIDA forward pass.
Vector reference_dida(const DidaModel& m, const LabeledDataset& z) {
  const auto& f = m.first();
  const Matrix Au = f.A_u.value(), bu = f.b_u.value(), Av = f.A_v.value(), bv = f.b_v.value();
  const Index n = z.n(), dx = z.dx(), t = f.t(), r = f.r();
  const Activation a = f.activation;
  Matrix h1 = Matrix::Zero(n, r);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      Vector e = Vector::Zero(t + 1);
      for (Index k = 0; k < dx; ++k) {
        for (Index c = 0; c < t; ++c) {
          e[c] += act(a, Au(c, 0) * z.features(i, k) + Au(c, 1) * z.features(j, k) + bu(c, 0));
        }
      }
      if (f.aggregation == Aggregation::mean) e.head(t) /= static_cast<double>(dx);
      e[t] = z.labels[static_cast<std::size_t>(i)] != z.labels[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
      for (Index o = 0; o < r; ++o) {
        double s = bv(o, 0);
        for (Index c = 0; c <= t; ++c) s += Av(o, c) * e[c];
        h1(i, o) += act(a, s) / static_cast<double>(n);
      }
    }
  }
  const Matrix A = m.mid().A.value(), b = m.mid().b.value();
  const Index d3 = A.rows();
  Matrix h2 = Matrix::Zero(n, d3);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      for (Index o = 0; o < d3; ++o) {
        double s = b(o, 0);
        for (Index c = 0; c < r; ++c) s += A(o, c) * h1(i, c) + A(o, r + c) * h1(j, c);
        h2(i, o) += act(a, s) / static_cast<double>(n);
      }
    }
  }
  Vector v = h2.colwise().mean().transpose();
  for (const auto& layer : m.head()) {
    Vector next = layer.W.value() * v + layer.b.value();
    for (Index i = 0; i < next.size(); ++i) next[i] = act(layer.activation, next[i]);
    v = next;
  }
  return v;
}

ArchConfig small_dida(Activation activation = Activation::relu) {
  ArchConfig a;
  a.t = 4;
  a.r = 5;
  a.d3 = 6;
  a.head = {7, 5, 3};
  a.activation = activation;
  return a;
}

double invariance_error(const Vector& a, const Vector& b) {
  return (a - b).lpNorm<Eigen::Infinity>() / std::max(a.lpNorm<Eigen::Infinity>(), 1.0);
}

}  // namespace

TEST(FirstLayer, HandComputedExample) {
  FirstLayerParams p;
  Matrix Au(1, 2);
  Au << 1, 1;
  p.A_u = Tensor::matrix(Au);
  p.b_u = Tensor::vector(Vector::Zero(1));
  p.A_v = Tensor::matrix(Matrix::Identity(2, 2));
  p.b_v = Tensor::vector(Vector::Zero(2));
  p.activation = Activation::identity;
  Matrix x(2, 2);
  x << 1, 2, 3, 4;
  auto z = make_dataset("h", x, {0, 0}, 2);
  Matrix out = first_layer_forward(z, p);
  EXPECT_DOUBLE_EQ(out(0, 0), 8.0);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.0);
}

TEST(FirstLayer, LabelIndicatorAppendedOnce) {
  FirstLayerParams p;
  p.A_u = Tensor::matrix(Matrix::Zero(1, 2));
  p.b_u = Tensor::vector(Vector::Zero(1));
  Matrix Av(1, 2);
  Av << 0, 1;
  p.A_v = Tensor::matrix(Av);
  p.b_v = Tensor::vector(Vector::Zero(1));
  p.activation = Activation::identity;
  auto z = make_dataset("l", Matrix::Zero(4, 5), {0, 1, 1, 1}, 2);
  Matrix out = first_layer_forward(z, p);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(out(1, 0), 0.25);
}

TEST(FirstLayer, DimensionMismatchIsContractError) {
  auto m = init_model(small_dida(), 1);
  auto& dida = dynamic_cast<DidaModel&>(*m);
  FirstLayerParams bad = dida.first();
  bad.A_v = Tensor::matrix(Matrix::Zero(5, 4));
  try {
    first_layer_forward(random_dataset(3, 2, 2, 0), bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(FirstLayer, FeatureAndLabelPermutationInvariant) {
  auto m = init_model(small_dida(Activation::tanh), 2);
  const auto& first = dynamic_cast<DidaModel&>(*m).first();
  auto z = random_dataset(9, 6, 3, 3);
  Matrix base = first_layer_forward(z, first);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Matrix permuted = first_layer_forward(apply_permutation(z, PermutationPair::random(6, 3, s)), first);
    EXPECT_LE((permuted - base).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, base.cwiseAbs().maxCoeff()));
  }
}

TEST(PairwiseLayer, HandExample) {
  MidLayerParams p;
  Matrix A(1, 2);
  A << 1, 1;
  p.A = Tensor::matrix(A);
  p.b = Tensor::vector(Vector::Zero(1));
  p.activation = Activation::identity;
  Matrix pts(2, 1);
  pts << 1, 3;
  Matrix out = pairwise_layer_forward(pts, p);
  EXPECT_DOUBLE_EQ(out(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(out(1, 0), 5.0);
}

TEST(PairwiseLayer, PushForwardAndMomentCases) {
  Rng rng(4);
  Matrix A = random_matrix(3, 4, rng);
  Vector b = random_matrix(3, 1, rng);
  Matrix pts = random_matrix(5, 2, rng);
  MidLayerParams first_only{Tensor::matrix(A), Tensor::vector(b), Activation::tanh};
  first_only.A.mutable_value().rightCols(2).setZero();
  Matrix push = pairwise_layer_forward(pts, first_only);
  for (Index i = 0; i < 5; ++i) {
    Vector expect = (A.leftCols(2) * pts.row(i).transpose() + b).array().tanh().matrix();
    EXPECT_LE((push.row(i).transpose() - expect).cwiseAbs().maxCoeff(), 1e-14);
  }
  MidLayerParams second_only{Tensor::matrix(A), Tensor::vector(b), Activation::tanh};
  second_only.A.mutable_value().leftCols(2).setZero();
  Matrix moment = pairwise_layer_forward(pts, second_only);
  Vector expect = Vector::Zero(3);
  for (Index j = 0; j < 5; ++j) expect += (A.rightCols(2) * pts.row(j).transpose() + b).array().tanh().matrix() / 5.0;
  for (Index i = 0; i < 5; ++i) EXPECT_LE((moment.row(i).transpose() - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(PairwiseLayer, DimensionMismatch) {
  MidLayerParams p{Tensor::matrix(Matrix::Ones(2, 6)), Tensor::vector(Vector::Zero(2)), Activation::relu};
  EXPECT_THROW(pairwise_layer_forward(Matrix::Ones(4, 2), p), Error);
}

TEST(LocalizedLayer, FullNeighbourhoodIsBitExact) {
  Rng rng(5);
  MidLayerParams p{Tensor::matrix(random_matrix(4, 6, rng)), Tensor::vector(random_matrix(4, 1, rng)),
                   Activation::relu};
  Matrix pts = random_matrix(11, 3, rng);
  EXPECT_EQ(localized_pairwise_forward(pts, p, 11), pairwise_layer_forward(pts, p));
}

TEST(LocalizedLayer, SingleNeighbourIsSelf) {
  Rng rng(6);
  MidLayerParams p{Tensor::matrix(random_matrix(4, 6, rng)), Tensor::vector(random_matrix(4, 1, rng)),
                   Activation::tanh};
  Matrix pts = random_matrix(7, 3, rng);
  Matrix out = localized_pairwise_forward(pts, p, 1);
  for (Index i = 0; i < 7; ++i) {
    Vector pre = p.A.value().leftCols(3) * pts.row(i).transpose() + p.A.value().rightCols(3) * pts.row(i).transpose() +
                 p.b.value();
    EXPECT_LE((out.row(i).transpose() - pre.array().tanh().matrix()).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(LocalizedLayer, MatchesBruteForceNeighbours) {
  Rng rng(7);
  MidLayerParams p{Tensor::matrix(random_matrix(3, 4, rng)), Tensor::vector(random_matrix(3, 1, rng)),
                   Activation::tanh};
  Matrix pts = random_matrix(5, 2, rng);
  Matrix out = localized_pairwise_forward(pts, p, 2);
  for (Index i = 0; i < 5; ++i) {
    // brute force: the self point plus the single closest other point
    Index best = -1;
    double best_d = 1e300;
    for (Index j = 0; j < 5; ++j) {
      if (j == i) continue;
      const double d = (pts.row(i) - pts.row(j)).norm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    Vector acc = Vector::Zero(3);
    for (Index j : {i, best}) {
      acc += (p.A.value().leftCols(2) * pts.row(i).transpose() + p.A.value().rightCols(2) * pts.row(j).transpose() +
              p.b.value())
                 .array()
                 .tanh()
                 .matrix();
    }
    EXPECT_LE((out.row(i).transpose() - acc / 2.0).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(LocalizedLayer, TiesBrokenByIndex) {
  Matrix pts(4, 1);
  pts << 0, 1, -1, 5;
  auto nn = nearest_neighbors(pts, 2);
  EXPECT_EQ(nn[0], (std::vector<int>{0, 1}));
  EXPECT_THROW(nearest_neighbors(pts, 0), Error);
  EXPECT_THROW(nearest_neighbors(pts, 5), Error);
}

TEST(MomentPool, Examples) {
  Matrix single(1, 3);
  single << 1, 2, 3;
  EXPECT_EQ(moment_pool(single), (Vector{{1.0, 2.0, 3.0}}));
  Matrix two(2, 2);
  two << 0, 0, 2, 4;
  EXPECT_EQ(moment_pool(two), (Vector{{1.0, 2.0}}));
  Matrix swapped = two.colwise().reverse();
  EXPECT_EQ(moment_pool(swapped), moment_pool(two));
}

TEST(Dida, MatchesNestedLoopReference) {
  for (auto a : {Activation::relu, Activation::tanh, Activation::sigmoid}) {
    ArchConfig arch = small_dida(a);
    for (auto agg : {Aggregation::sum, Aggregation::mean}) {
      arch.aggregation = agg;
      auto m = init_model(arch, 8);
      Rng rng(9);
      for (auto& [name, t] : m->named_parameters()) {
        Tensor h = t;
        h.mutable_value() = random_matrix(t.rows(), t.cols(), rng);
      }
      auto z = random_dataset(8, 3, 3, 10);
      Vector got = m->extract(z);
      Vector want = reference_dida(dynamic_cast<DidaModel&>(*m), z);
      EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Dida, InvariantUnderGroupAction) {
  auto m = init_model(small_dida(), 11);
  for (std::uint64_t d = 0; d < 5; ++d) {
    auto z = random_dataset(12, 1 + static_cast<int>(d), 2 + static_cast<int>(d % 3), d);
    Vector base = m->extract(z);
    for (std::uint64_t s = 0; s < 50; ++s) {
      auto sigma = PermutationPair::random(static_cast<int>(z.dx()), z.num_classes, s);
      EXPECT_LE(invariance_error(m->extract(apply_permutation(z, sigma)), base), 1e-6);
    }
  }
}

TEST(Dida, SampleOrderInvariant) {
  auto m = init_model(small_dida(), 12);
  auto z = random_dataset(15, 4, 3, 13);
  Vector base = m->extract(z);
  Rng rng(14);
  auto order = rng.permutation(15);
  LabeledDataset shuffled = z;
  for (int i = 0; i < 15; ++i) {
    shuffled.features.row(i) = z.features.row(order[static_cast<std::size_t>(i)]);
    shuffled.labels[static_cast<std::size_t>(i)] = z.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  EXPECT_LE(invariance_error(m->extract(shuffled), base), 1e-12);
}

TEST(Dida, AcceptsAnyDimension) {
  auto m = init_model(small_dida(), 15);
  EXPECT_EQ(m->extract(random_dataset(10, 3, 2, 1)).size(), 3);
  EXPECT_EQ(m->extract(random_dataset(17, 7, 4, 2)).size(), 3);
  EXPECT_EQ(m->extract(random_dataset(1, 1, 2, 3)).size(), 3);
}

TEST(Dida, GradientsPassCheck) {
  for (auto a : {Activation::tanh, Activation::relu}) {
    for (int local_k : {0, 3}) {
      ArchConfig arch = small_dida(a);
      arch.local_k = local_k;
      auto m = init_model(arch, 16);
      auto z = random_dataset(6, 3, 2, 17);
      ad::LossFn loss = [&](Tape& tape) {
        Tensor f = m->forward(tape, z);
        return ad::norm2(tape, f);
      };
      auto report = ad::check_gradients(loss, m->parameters(), 1e-5);
      EXPECT_LE(report.max_relative_error, 1e-5) << ad::to_string(a) << " k=" << local_k;
    }
  }
}

TEST(Dida, BlockedBackwardMatchesCached) {
  // n large enough to leave the cached path
  ArchConfig arch;
  arch.t = 8;
  arch.r = 16;
  arch.d3 = 8;
  arch.head = {8, 8, 4};
  auto m = init_model(arch, 18);
  auto big = random_dataset(700, 2, 3, 19);
  Tape tape;
  tape.backward(ad::norm2(tape, m->forward(tape, big)));
  Matrix g_blocked = m->parameter("first.A_u").grad();
  Tensor Au = m->parameter("first.A_u");
  const double eps = 1e-5;
  for (Index c = 0; c < 3; ++c) {
    const double keep = Au.value().data()[c];
    Au.mutable_value().data()[c] = keep + eps;
    const double up = m->extract(big).norm();
    Au.mutable_value().data()[c] = keep - eps;
    const double down = m->extract(big).norm();
    Au.mutable_value().data()[c] = keep;
    const double fd = (up - down) / (2 * eps);
    EXPECT_NEAR(g_blocked.data()[c], fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Dss, InvariantUnderGroupAction) {
  for (auto kind : {ModelKind::dss_linear, ModelKind::dss_nonlinear, ModelKind::dss_equivariant}) {
    ArchConfig arch;
    arch.kind = kind;
    arch.hidden = 6;
    arch.head = {8, 6, 4};
    auto m = init_model(arch, 20);
    auto z = random_dataset(14, 5, 4, 21);
    Vector base = m->extract(z);
    for (std::uint64_t s = 0; s < 50; ++s) {
      EXPECT_LE(invariance_error(m->extract(apply_permutation(z, PermutationPair::random(5, 4, s))), base), 1e-6);
    }
  }
}

TEST(Dss, LinearVariantMatchesDoubleSum) {
  ArchConfig arch;
  arch.kind = ModelKind::dss_linear;
  arch.hidden = 3;
  arch.head = {4, 4, 2};
  auto m = init_model(arch, 22);
  auto z = random_dataset(10, 4, 2, 23);
  // feature branch: rho(sum_k phi(mean_i x_i[k])), both affine
  const Matrix Wp = m->parameter("feature.phi0.W").value(), bp = m->parameter("feature.phi0.b").value();
  const Matrix Wr = m->parameter("feature.rho0.W").value(), br = m->parameter("feature.rho0.b").value();
  double total = 0.0;
  for (Index i = 0; i < z.n(); ++i) {
    for (Index k = 0; k < z.dx(); ++k) total += z.features(i, k);
  }
  Vector feat = Wr * (Wp.col(0) * (total / static_cast<double>(z.n())) + 4.0 * bp) + br;
  const Matrix Wl = m->parameter("label.phi0.W").value(), bl = m->parameter("label.phi0.b").value();
  const Matrix Wlr = m->parameter("label.rho0.W").value(), blr = m->parameter("label.rho0.b").value();
  Vector lab = Wlr * (Wl.col(0) * 1.0 + 2.0 * bl) + blr;  // proportions sum to one
  Vector v(6);
  v << feat, lab;
  for (int l = 0; l < 3; ++l) {
    const std::string p = "head" + std::to_string(l);
    v = m->parameter(p + ".W").value() * v + m->parameter(p + ".b").value();
    if (l < 2) v = v.cwiseMax(0.0);
  }
  EXPECT_LE((m->extract(z) - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dss, ZeroDatasetIsFinite) {
  for (auto kind : {ModelKind::dss_linear, ModelKind::dss_nonlinear, ModelKind::dss_equivariant}) {
    ArchConfig arch;
    arch.kind = kind;
    arch.hidden = 5;
    auto m = init_model(arch, 24);
    EXPECT_TRUE(m->extract(make_dataset("zero", Matrix::Zero(5, 3), {0, 1, 0, 1, 0}, 2)).allFinite());
  }
}

TEST(Dss, GradientsPassCheck) {
  for (auto kind : {ModelKind::dss_linear, ModelKind::dss_nonlinear, ModelKind::dss_equivariant}) {
    ArchConfig arch;
    arch.kind = kind;
    arch.hidden = 4;
    arch.head = {5, 4, 3};
    arch.activation = Activation::tanh;
    auto m = init_model(arch, 25);
    auto z = random_dataset(7, 3, 3, 26);
    ad::LossFn loss = [&](Tape& tape) { return ad::norm2(tape, m->forward(tape, z)); };
    EXPECT_LE(ad::check_gradients(loss, m->parameters(), 1e-5).max_relative_error, 1e-5);
  }
}

TEST(Dss, BudgetMatching) {
  ArchConfig dida;
  const long budget = count_parameters(dida);
  for (auto kind : {ModelKind::dss_linear, ModelKind::dss_nonlinear, ModelKind::dss_equivariant}) {
    ArchConfig arch;
    arch.kind = kind;
    arch.param_budget = budget;
    auto m = init_model(arch, 27);
    EXPECT_LE(m->parameter_count(), budget);
    EXPECT_EQ(m->parameter_count(), count_parameters(arch));
    ArchConfig wider = arch;
    wider.hidden = dynamic_cast<DssModel&>(*m).hidden() + 1;
    EXPECT_GT(count_parameters(wider), budget);
  }
}

TEST(Init, SameSeedBitIdentical) {
  auto a = init_model(ArchConfig{}, 42);
  auto b = init_model(ArchConfig{}, 42);
  auto c = init_model(ArchConfig{}, 43);
  ASSERT_EQ(a->named_parameters().size(), b->named_parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a->named_parameters().size(); ++i) {
    EXPECT_EQ(a->named_parameters()[i].second.value(), b->named_parameters()[i].second.value());
    differs |= a->named_parameters()[i].second.value() != c->named_parameters()[i].second.value();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a->parameter_count(), count_parameters(ArchConfig{}));
}

TEST(Init, GlorotStatistics) {
  Rng rng(44);
  Matrix w = glorot_uniform(100, 100, rng);
  const double s = std::sqrt(6.0 / 200.0);
  EXPECT_LT(w.cwiseAbs().maxCoeff(), s);
  // uniform(-s, s) has standard deviation s / sqrt(3)
  const double sd_mean = s / std::sqrt(3.0) / std::sqrt(static_cast<double>(w.size()));
  EXPECT_LE(std::abs(w.mean()), 3.0 * sd_mean);
}

TEST(Init, InvalidDimsAreConfigurationErrors) {
  ArchConfig arch;
  arch.r = 0;
  try {
    init_model(arch, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::configuration);
  }
  arch.r = 4;
  arch.head = {4, 4};
  EXPECT_THROW(init_model(arch, 1), Error);
  EXPECT_THROW(arch_from_json(io::Json{{"model", "dida"}, {"bogus", 1}}), Error);
}

TEST(Checkpoint, RoundTripIsBitFaithful) {
  auto dir = std::filesystem::temp_directory_path() / "dida_test_ckpt";
  std::filesystem::create_directories(dir);
  for (auto kind : {ModelKind::dida, ModelKind::dss_equivariant}) {
    ArchConfig arch = small_dida();
    arch.kind = kind;
    auto m = init_model(arch, 45);
    Tensor w = m->named_parameters()[0].second;
    w.mutable_value()(0, 0) = 0.1 + 0.2;
    save_checkpoint(dir / "m.json", *m, {{"note", "x"}});
    auto loaded = load_checkpoint(dir / "m.json");
    EXPECT_EQ(loaded.extra.at("note"), "x");
    for (std::size_t i = 0; i < m->named_parameters().size(); ++i) {
      EXPECT_EQ(m->named_parameters()[i].second.value(), loaded.model->named_parameters()[i].second.value());
    }
    auto z = random_dataset(6, 3, 2, 46);
    EXPECT_EQ(m->extract(z), loaded.model->extract(z));
  }
}

TEST(Checkpoint, VersionMismatchAndCorruption) {
  auto m = init_model(small_dida(), 47);
  auto doc = checkpoint_json(*m);
  doc["format_version"] = 99;
  try {
    checkpoint_from_json(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::compatibility);
  }
  auto broken = checkpoint_json(*m);
  broken["tensors"]["mid.A"]["values"] = std::vector<double>{1.0};
  try {
    checkpoint_from_json(broken);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

TEST(Model, CloneIsIndependent) {
  auto m = init_model(small_dida(), 48);
  auto c = m->clone();
  auto z = random_dataset(5, 2, 2, 49);
  EXPECT_EQ(m->extract(z), c->extract(z));
  Tensor w = c->named_parameters()[0].second;
  w.mutable_value().setZero();
  EXPECT_NE(m->named_parameters()[0].second.value(), c->named_parameters()[0].second.value());
}
