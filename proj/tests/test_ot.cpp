#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dida/ot.hpp"
#include "dida/random.hpp"

using namespace dida;
using namespace dida::ot;

namespace {

Matrix random_points(Index n, Index d, Rng& rng) {
  Matrix x(n, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  return x;
}

DiscreteMeasure random_measure(Index n, Index d, Rng& rng) {
  DiscreteMeasure mu{random_points(n, d, rng), Vector(n)};
  for (Index i = 0; i < n; ++i) mu.weights[i] = 0.1 + rng.uniform();
  mu.weights /= mu.weights.sum();
  return mu;
}

// Minimum over all m! matchings, written out directly.
double brute_assignment(const Matrix& x, const Matrix& y) {
  std::vector<int> p(static_cast<std::size_t>(x.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double c = 0.0;
    for (Index i = 0; i < x.rows(); ++i) c += (x.row(i) - y.row(p[static_cast<std::size_t>(i)])).norm();
    best = std::min(best, c / static_cast<double>(x.rows()));
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

// W1 on the line: integral of |F - G|.
double line_w1(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  std::vector<std::pair<double, double>> events;
  for (Index i = 0; i < mu.size(); ++i) events.push_back({mu.points(i, 0), mu.weights[i]});
  for (Index i = 0; i < nu.size(); ++i) events.push_back({nu.points(i, 0), -nu.weights[i]});
  std::sort(events.begin(), events.end());
  double acc = 0.0, total = 0.0;
  for (std::size_t k = 0; k + 1 < events.size(); ++k) {
    acc += events[k].second;
    total += std::abs(acc) * (events[k + 1].first - events[k].first);
  }
  return total;
}

Matrix swap_columns(const Matrix& x, const std::vector<int>& perm) {
  Matrix out(x.rows(), x.cols());
  for (Index k = 0; k < x.cols(); ++k) out.col(perm[static_cast<std::size_t>(k)]) = x.col(k);
  return out;
}

void expect_marginals(const TransportPlan& plan, const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  const Matrix& P = plan.coupling;
  EXPECT_GE(P.minCoeff(), 0.0);
  for (Index i = 0; i < mu.size(); ++i) EXPECT_NEAR(P.row(i).sum(), mu.weights[i], 1e-9);
  for (Index j = 0; j < nu.size(); ++j) EXPECT_NEAR(P.col(j).sum(), nu.weights[j], 1e-9);
  const Matrix D = distance_matrix(mu.points, nu.points);
  EXPECT_NEAR((P.array() * D.array()).sum(), plan.cost, 1e-9);
}

}  // namespace

TEST(Wasserstein, SelfDistanceIsZero) {
  Rng rng(1);
  const auto mu = random_measure(7, 3, rng);
  EXPECT_NEAR(wasserstein1(mu, mu).first, 0.0, 1e-12);
}

TEST(Wasserstein, SingleAtoms) {
  DiscreteMeasure a = DiscreteMeasure::uniform(Matrix{{0.0, 0.0}});
  DiscreteMeasure b = DiscreteMeasure::uniform(Matrix{{3.0, 4.0}});
  EXPECT_DOUBLE_EQ(wasserstein1(a, b).first, 5.0);
}

TEST(Wasserstein, TwoPointLine) {
  const auto mu = DiscreteMeasure::uniform(Matrix{{0.0}, {1.0}});
  const auto nu = DiscreteMeasure::uniform(Matrix{{0.0}, {2.0}});
  // assignments {0->0, 1->2} cost 1/2, {0->2, 1->0} cost 3/2
  const double expected = std::min(0.5 * (0.0 + 1.0), 0.5 * (2.0 + 1.0));
  EXPECT_NEAR(wasserstein1(mu, nu).first, expected, 1e-15);
}

TEST(Wasserstein, DimensionMismatch) {
  const auto a = DiscreteMeasure::uniform(Matrix{{0.0, 0.0}});
  const auto b = DiscreteMeasure::uniform(Matrix{{0.0}});
  try {
    wasserstein1(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(Wasserstein, InvalidWeightsRejected) {
  DiscreteMeasure a{Matrix{{0.0}, {1.0}}, Vector::Constant(2, 0.4)};
  EXPECT_THROW(a.validate(), Error);
}

TEST(Wasserstein, NetworkSimplexMatchesExhaustiveAssignment) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Index m = rng.uniform_int(1, 6), d = rng.uniform_int(1, 3);
    const auto mu = DiscreteMeasure::uniform(random_points(m, d, rng));
    const auto nu = DiscreteMeasure::uniform(random_points(m, d, rng));
    const auto plan = solve_transport(mu.weights, nu.weights, distance_matrix(mu.points, nu.points));
    EXPECT_NEAR(plan.cost, brute_assignment(mu.points, nu.points), 1e-9);
    expect_marginals(plan, mu, nu);
    EXPECT_NEAR(wasserstein1(mu, nu).first, plan.cost, 1e-9);
  }
}

TEST(Wasserstein, GeneralWeightsOnTheLine) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mu = random_measure(rng.uniform_int(1, 12), 1, rng);
    const auto nu = random_measure(rng.uniform_int(1, 12), 1, rng);
    const auto [w, plan] = wasserstein1(mu, nu);
    EXPECT_NEAR(w, line_w1(mu, nu), 1e-9);
    expect_marginals(plan, mu, nu);
  }
}

TEST(Wasserstein, RationalWeightsMatchExpandedAssignment) {
  // weights k_i / 6 split into 6 unit atoms each side
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const Index d = 2;
    auto draw = [&](std::vector<int>& counts) {
      counts.clear();
      int left = 6;
      while (left > 0) {
        const int k = static_cast<int>(rng.uniform_int(1, left));
        counts.push_back(k);
        left -= k;
      }
    };
    std::vector<int> ca, cb;
    draw(ca);
    draw(cb);
    DiscreteMeasure mu{random_points(static_cast<Index>(ca.size()), d, rng), Vector(static_cast<Index>(ca.size()))};
    DiscreteMeasure nu{random_points(static_cast<Index>(cb.size()), d, rng), Vector(static_cast<Index>(cb.size()))};
    Matrix xa(6, d), xb(6, d);
    int r = 0;
    for (std::size_t i = 0; i < ca.size(); ++i) {
      mu.weights[static_cast<Index>(i)] = ca[i] / 6.0;
      for (int k = 0; k < ca[i]; ++k) xa.row(r++) = mu.points.row(static_cast<Index>(i));
    }
    r = 0;
    for (std::size_t i = 0; i < cb.size(); ++i) {
      nu.weights[static_cast<Index>(i)] = cb[i] / 6.0;
      for (int k = 0; k < cb[i]; ++k) xb.row(r++) = nu.points.row(static_cast<Index>(i));
    }
    EXPECT_NEAR(wasserstein1(mu, nu).first, brute_assignment(xa, xb), 1e-9);
  }
}

TEST(Wasserstein, LargerProblemsHaveConsistentPlans) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mu = random_measure(rng.uniform_int(20, 80), 2, rng);
    const auto nu = random_measure(rng.uniform_int(20, 80), 2, rng);
    const auto [w, plan] = wasserstein1(mu, nu);
    expect_marginals(plan, mu, nu);
    EXPECT_NEAR(w, wasserstein1(nu, mu).first, 1e-10);
  }
}

TEST(Wasserstein, HungarianMatchesSimplexOnUniform) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Index m = rng.uniform_int(5, 40);
    const auto mu = DiscreteMeasure::uniform(random_points(m, 3, rng));
    const auto nu = DiscreteMeasure::uniform(random_points(m, 3, rng));
    const auto [w, plan] = wasserstein1(mu, nu);
    const auto simplex = solve_transport(mu.weights, nu.weights, distance_matrix(mu.points, nu.points));
    EXPECT_NEAR(w, simplex.cost, 1e-10);
    expect_marginals(plan, mu, nu);
  }
}

TEST(Wasserstein, SymmetryAndTriangleInequality) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = rng.uniform_int(1, 3);
    const auto a = random_measure(rng.uniform_int(1, 8), d, rng);
    const auto b = random_measure(rng.uniform_int(1, 8), d, rng);
    const auto c = random_measure(rng.uniform_int(1, 8), d, rng);
    const double ab = wasserstein1(a, b).first, ba = wasserstein1(b, a).first;
    const double bc = wasserstein1(b, c).first, ac = wasserstein1(a, c).first;
    EXPECT_NEAR(ab, ba, 1e-10);
    EXPECT_LE(ac, ab + bc + 1e-9);
  }
}

TEST(Wasserstein, DegenerateTransportTerminates) {
  // many ties in supplies and costs
  const Vector a = Vector::Constant(8, 1.0 / 8.0);
  const Vector b = Vector::Constant(4, 1.0 / 4.0);
  const Matrix C = Matrix::Ones(8, 4);
  const auto plan = solve_transport(a, b, C);
  EXPECT_NEAR(plan.cost, 1.0, 1e-12);
}

TEST(Quotient, PermutedCopyIsZero) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int dx = static_cast<int>(rng.uniform_int(1, 4));
    const auto mu = DiscreteMeasure::uniform(random_points(rng.uniform_int(1, 6), dx, rng));
    PermutationPair sigma{rng.permutation(dx), {}};
    const auto moved = permute_measure(mu, sigma, dx, 0);
    EXPECT_NEAR(quotiented_wasserstein1(moved, mu, dx, 0).distance, 0.0, 1e-12);
  }
}

TEST(Quotient, CoordinateSwapAligns) {
  const auto mu = DiscreteMeasure::uniform(Matrix{{1.0, 0.0}});
  const auto nu = DiscreteMeasure::uniform(Matrix{{0.0, 1.0}});
  const auto q = quotiented_wasserstein1(mu, nu, 2, 0);
  EXPECT_NEAR(q.distance, 0.0, 1e-15);
  EXPECT_EQ(q.sigma.features, (std::vector<int>{1, 0}));
}

TEST(Quotient, MatchesPerPermutationLoop) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mu = DiscreteMeasure::uniform(random_points(4, 3, rng));
    const auto nu = DiscreteMeasure::uniform(random_points(4, 3, rng));
    const std::vector<std::vector<int>> perms{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    double best = 1e300;
    for (const auto& p : perms) {
      best = std::min(best, wasserstein1(DiscreteMeasure::uniform(swap_columns(mu.points, p)), nu).first);
    }
    const double q = quotiented_wasserstein1(mu, nu, 3, 0).distance;
    EXPECT_NEAR(q, best, 1e-12);
    EXPECT_LE(q, wasserstein1(mu, nu).first + 1e-15);
  }
}

TEST(Quotient, LabelBlockPermuted) {
  // one feature column then two one-hot label columns
  const auto mu = DiscreteMeasure::uniform(Matrix{{0.2, 1.0, 0.0}, {0.7, 0.0, 1.0}});
  const auto nu = DiscreteMeasure::uniform(Matrix{{0.2, 0.0, 1.0}, {0.7, 1.0, 0.0}});
  EXPECT_GT(wasserstein1(mu, nu).first, 0.4);
  EXPECT_NEAR(quotiented_wasserstein1(mu, nu, 1, 2).distance, 0.0, 1e-15);
}

TEST(Quotient, BudgetExceeded) {
  const auto mu = DiscreteMeasure::uniform(Matrix::Zero(1, 8));
  try {
    quotiented_wasserstein1(mu, mu, 8, 0, 5040);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::capacity);
    EXPECT_NE(std::string(e.what()).find("40320"), std::string::npos);
  }
}

TEST(Lipschitz, ScaledIdentity) {
  TransformSpec spec;
  spec.layers.push_back({2.0 * Matrix::Identity(3, 3), Vector::Zero(3), ad::Activation::identity});
  EXPECT_NEAR(lipschitz_upper_bound(spec), 2.0, 1e-8);
}

TEST(Lipschitz, IdentityNetwork) {
  EXPECT_NEAR(lipschitz_upper_bound(TransformSpec::identity(4)), 1.0, 1e-12);
  EXPECT_NEAR(lipschitz_upper_bound(TransformSpec::translation(0.3)), 1.0, 1e-12);
}

TEST(Lipschitz, SpectralNormAgainstRankOne) {
  // u v^T has norm |u| |v|
  const Vector u = (Vector(3) << 1.0, -2.0, 2.0).finished();
  const Vector v = (Vector(2) << 3.0, -4.0).finished();
  const Matrix W = u * v.transpose();
  EXPECT_NEAR(spectral_norm(W), 15.0, 1e-9);
  EXPECT_EQ(spectral_norm(Matrix::Zero(2, 2)), 0.0);
}

TEST(Lipschitz, BoundsSampledQuotients) {
  Rng rng(10);
  TransformSpec spec;
  Matrix W1(5, 3), W2(2, 5);
  for (Index i = 0; i < W1.size(); ++i) W1.data()[i] = rng.normal();
  for (Index i = 0; i < W2.size(); ++i) W2.data()[i] = rng.normal();
  spec.layers.push_back({W1, Vector::Constant(5, 0.1), ad::Activation::tanh});
  spec.layers.push_back({W2, Vector::Zero(2), ad::Activation::relu});
  const double bound = lipschitz_upper_bound(spec);
  double sampled = 0.0;
  for (int k = 0; k < 100000; ++k) {
    Vector x(3), y(3);
    for (Index i = 0; i < 3; ++i) x[i] = rng.uniform(-2.0, 2.0);
    for (Index i = 0; i < 3; ++i) y[i] = x[i] + 0.05 * rng.normal();
    const double dist = (x - y).norm();
    if (dist == 0.0) continue;
    sampled = std::max(sampled, (spec.apply(x) - spec.apply(y)).norm() / dist);
  }
  EXPECT_GT(sampled, 0.0);
  EXPECT_GE(bound, sampled);
}

TEST(Lipschitz, InteractionBoundAgainstSamples) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int dx = static_cast<int>(rng.uniform_int(1, 4));
    const auto phi = random_interaction(3, 2, ad::Activation::tanh, rng);
    const double c = lipschitz_upper_bound(phi, dx);
    for (int k = 0; k < 2000; ++k) {
      // phi(x, .) evaluated through the layer on a two-point set {x, y}: row 0 = (phi(x,x) + phi(x,y)) / 2
      Matrix pts = random_points(2, dx, rng);
      Matrix moved = pts;
      for (Index i = 0; i < dx; ++i) moved(1, i) += 0.01 * rng.normal();
      const Matrix f0 = invariant_layer(phi, pts), f1 = invariant_layer(phi, moved);
      const double dist = (pts.row(1) - moved.row(1)).norm();
      if (dist == 0.0) continue;
      EXPECT_LE((f0.row(0) - f1.row(0)).norm() * 2.0 / dist, c * (1.0 + 1e-9));
    }
  }
}

TEST(Prop1, IdenticalInputs) {
  Rng rng(12);
  const auto phi = random_interaction(3, 2, ad::Activation::relu, rng);
  const Matrix z = random_points(5, 3, rng);
  const auto rec = check_prop1(phi, z, z);
  EXPECT_NEAR(rec.lhs, 0.0, 1e-12);
  EXPECT_LE(rec.lhs, rec.rhs + kInequalityTolerance);
  EXPECT_FALSE(rec.violated);
}

TEST(Prop1, InvariantLayerIgnoresFeatureOrder) {
  Rng rng(13);
  const auto phi = random_interaction(4, 3, ad::Activation::tanh, rng);
  const Matrix z = random_points(6, 4, rng);
  const Matrix fz = invariant_layer(phi, z);
  const Matrix fs = invariant_layer(phi, swap_columns(z, {2, 0, 3, 1}));
  EXPECT_LE((fz - fs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Prop1, RandomSuiteHasNoViolations) {
  StabilitySuiteConfig cfg;
  cfg.trials = 100;
  cfg.seed = 14;
  const auto report = verify_prop1(cfg);
  EXPECT_EQ(report.violations, 0);
  ASSERT_EQ(report.records.size(), 100u);
  for (const auto& r : report.records) {
    EXPECT_LE(r.lhs, r.rhs + kInequalityTolerance);
  }
  EXPECT_GT(report.max_ratio, 0.0);
  const auto lines = report.to_jsonl();
  EXPECT_NE(lines.find("\"violated\":false"), std::string::npos);
}

TEST(Prop1, RatioBelowCertifiedConstant) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const int dx = static_cast<int>(rng.uniform_int(1, 3));
    const auto phi = random_interaction(3, 2, ad::Activation::relu, rng);
    const Matrix z = random_points(rng.uniform_int(1, 5), dx, rng);
    const Matrix zp = random_points(rng.uniform_int(1, 5), dx, rng);
    const auto rec = check_prop1(phi, z, zp);
    EXPECT_LE(rec.ratio, 2.0 * 2 * lipschitz_upper_bound(phi, dx) + 1e-8);
  }
}

TEST(Prop2, IdentityMapsReduceToProp1) {
  Rng rng(16);
  const auto phi = random_interaction(3, 2, ad::Activation::sigmoid, rng);
  const Matrix z = random_points(4, 3, rng), zp = random_points(5, 3, rng);
  TransformSpec tau = TransformSpec::translation(0.0);
  const auto recs = check_prop2(phi, tau, TransformSpec::identity(2), z, zp);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_NEAR(recs[0].lhs, 0.0, 1e-12);
  EXPECT_NEAR(recs[0].rhs, 0.0, 1e-12);
  const auto p1 = check_prop1(phi, z, zp);
  EXPECT_NEAR(recs[1].lhs, p1.lhs, 1e-12);
  EXPECT_NEAR(recs[1].rhs, p1.rhs, 1e-9);
}

TEST(Prop2, TranslationHoldsWithUnitConstant) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const auto phi = random_interaction(3, 2, ad::Activation::relu, rng);
    const Matrix z = random_points(4, 2, rng), zp = random_points(3, 2, rng);
    const auto tau = TransformSpec::translation(rng.uniform(-0.3, 0.3));
    EXPECT_DOUBLE_EQ(lipschitz_upper_bound(tau), 1.0);
    for (const auto& r : check_prop2(phi, tau, TransformSpec::identity(2), z, zp)) EXPECT_FALSE(r.violated);
  }
}

TEST(Prop2, RandomSuiteHasNoViolations) {
  StabilitySuiteConfig cfg;
  cfg.trials = 50;
  cfg.seed = 18;
  const auto report = verify_prop2(cfg);
  EXPECT_EQ(report.violations, 0);
  EXPECT_GE(report.records.size(), 50u);
}

TEST(SymmetricEmbed, TwoCoordinates) {
  const Matrix e = elementary_symmetric_embed(Matrix{{1.0, 2.0}}, false);
  EXPECT_EQ(e(0, 0), 3.0);
  EXPECT_EQ(e(0, 1), 2.0);
}

TEST(SymmetricEmbed, ExpandedCubic) {
  // (X-1)(X-2)(X-3) = X^3 - 6X^2 + 11X - 6
  const Matrix e = elementary_symmetric_embed(Matrix{{1.0, 2.0, 3.0}}, false);
  EXPECT_EQ(e(0, 0), 6.0);
  EXPECT_EQ(e(0, 1), 11.0);
  EXPECT_EQ(e(0, 2), 6.0);
  const Vector roots = roots_from_coefficients(e.row(0).transpose());
  EXPECT_NEAR(roots[0], 1.0, 1e-9);
  EXPECT_NEAR(roots[1], 2.0, 1e-9);
  EXPECT_NEAR(roots[2], 3.0, 1e-9);
}

TEST(SymmetricEmbed, PermutationBitExact) {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = static_cast<int>(rng.uniform_int(1, 12));
    const Matrix x = random_points(1, d, rng);
    const Matrix a = elementary_symmetric_embed(x);
    const Matrix b = elementary_symmetric_embed(swap_columns(x, rng.permutation(d)));
    EXPECT_TRUE((a.array() == b.array()).all());
    EXPECT_GE(a.minCoeff(), 0.0);
    EXPECT_LE(a.maxCoeff(), 1.0);
  }
}

TEST(SymmetricEmbed, TooManyCoordinates) {
  try {
    elementary_symmetric_embed(Matrix::Zero(1, 13));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::capacity);
  }
}

TEST(Grid, AtomAtNode) {
  const auto mu = DiscreteMeasure::uniform(Matrix{{0.25, 0.75}});
  const auto g = grid_discretize(mu, 4);
  const auto hat = g.measure();
  ASSERT_EQ(hat.size(), 1);
  EXPECT_DOUBLE_EQ(hat.weights[0], 1.0);
  EXPECT_NEAR(wasserstein1(hat, mu).first, 0.0, 1e-15);
}

TEST(Grid, HatWeightsInterpolateLinearly) {
  // on a line the masses are the barycentric weights of the two nodes
  const auto mu = DiscreteMeasure::uniform(Matrix{{0.3}});
  const auto g = grid_discretize(mu, 2);
  EXPECT_NEAR(g.alpha[0], 0.4, 1e-15);
  EXPECT_NEAR(g.alpha[1], 0.6, 1e-15);
  EXPECT_NEAR(g.alpha[2], 0.0, 1e-15);
  EXPECT_NEAR(g.delta_max, 0.5, 1e-15);
}

TEST(Grid, UniformPointsOnTheLine) {
  Matrix x(100, 1);
  for (Index i = 0; i < 100; ++i) x(i, 0) = (i + 0.5) / 100.0;
  const auto mu = DiscreteMeasure::uniform(x);
  const auto g = grid_discretize(mu, 10);
  EXPECT_NEAR(g.alpha.sum(), 1.0, 1e-12);
  EXPECT_LE(wasserstein1(g.measure(), mu).first, g.delta_max);
}

TEST(Grid, BoundHoldsOnRandomMeasures) {
  Rng rng(20);
  for (int trial = 0; trial < 200; ++trial) {
    const Index d = rng.uniform_int(1, 2);
    const auto mu = random_measure(rng.uniform_int(1, 30), d, rng);
    const int cells = static_cast<int>(rng.uniform_int(1, 32));
    const auto g = grid_discretize(mu, cells);
    EXPECT_NEAR(g.alpha.sum(), 1.0, 1e-12);
    EXPECT_LE(wasserstein1(g.measure(), mu).first, g.delta_max + 1e-10);
  }
}

TEST(Grid, GapShrinksWithFinerGrids) {
  Rng rng(21);
  std::vector<double> mean_gap;
  std::vector<DiscreteMeasure> measures;
  for (int k = 0; k < 50; ++k) measures.push_back(random_measure(20, 2, rng));
  for (int cells : {4, 8, 16, 32}) {
    double total = 0.0;
    for (const auto& mu : measures) total += wasserstein1(grid_discretize(mu, cells).measure(), mu).first;
    mean_gap.push_back(total / 50.0);
  }
  for (std::size_t k = 1; k < mean_gap.size(); ++k) EXPECT_LT(mean_gap[k], mean_gap[k - 1]);
}

TEST(Grid, SupportOutsideCube) {
  const auto mu = DiscreteMeasure::uniform(Matrix{{1.5}});
  try {
    grid_discretize(mu, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
  }
}

TEST(Holder, Identity) {
  Rng rng(22);
  std::vector<std::pair<Vector, Vector>> pairs;
  for (int k = 0; k < 200; ++k) pairs.push_back({Vector::Random(3), Vector::Random(3)});
  pairs.push_back({Vector::Zero(3), Vector::Zero(3)});
  const double c = holder_estimate([](const Vector& x) { return x; }, pairs, 1.0);
  EXPECT_LE(c, 1.0 + 1e-15);
}

TEST(Holder, SquareRoot) {
  Rng rng(23);
  std::vector<std::pair<Vector, Vector>> pairs;
  for (int k = 0; k < 2000; ++k) {
    pairs.push_back({Vector::Constant(1, rng.uniform()), Vector::Constant(1, rng.uniform())});
  }
  pairs.push_back({Vector::Constant(1, 0.0), Vector::Constant(1, 1e-12)});
  const double c = holder_estimate([](const Vector& x) { return Vector(x.cwiseSqrt()); }, pairs, 2.0);
  EXPECT_LE(c, 1.0 + 1e-9);
  EXPECT_GT(c, 0.9);
}

TEST(Holder, RootsOfMonicCubics) {
  Rng rng(24);
  std::vector<std::pair<Vector, Vector>> pairs;
  for (int k = 0; k < 500; ++k) {
    const Matrix a = random_points(1, 3, rng);
    Matrix b = a;
    for (Index i = 0; i < 3; ++i) b(0, i) = std::clamp(b(0, i) + 0.01 * rng.normal(), 0.0, 1.0);
    pairs.push_back({elementary_symmetric_embed(a, false).row(0).transpose(),
                     elementary_symmetric_embed(b, false).row(0).transpose()});
  }
  const double c = holder_estimate([](const Vector& e) { return roots_from_coefficients(e); }, pairs, 3.0);
  EXPECT_TRUE(std::isfinite(c));
  EXPECT_GT(c, 0.0);
}
