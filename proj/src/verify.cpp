#include "dida/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dida/invariant_net.hpp"
#include "dida/ot.hpp"
#include "dida/parallel.hpp"
#include "dida/tasks.hpp"

namespace dida::verify {

namespace {

using Clock = std::chrono::steady_clock;

int trials_or(const VerifyConfig& cfg, int fallback) { return cfg.trials > 0 ? cfg.trials : fallback; }

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
T get_or(const io::Json& doc, const char* key, T fallback) {
  return doc.contains(key) ? doc.at(key).get<T>() : fallback;
}

LabeledDataset random_dataset(int n, int dx, int classes, Rng& rng) {
  Matrix x(n, dx);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, classes - 1));
  return make_dataset("verify", std::move(x), std::move(y), classes);
}

LabeledDataset shuffle_rows(const LabeledDataset& z, Rng& rng) {
  const auto order = rng.permutation(static_cast<int>(z.n()));
  LabeledDataset out = z;
  for (Index i = 0; i < z.n(); ++i) {
    out.features.row(i) = z.features.row(order[static_cast<std::size_t>(i)]);
    out.labels[static_cast<std::size_t>(i)] = z.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  return out;
}

SuiteResult from_report(const std::string& name, const ot::VerificationReport& report) {
  SuiteResult out;
  out.suite = name;
  out.violations = report.violations;
  out.max_value = report.max_ratio;
  std::vector<int> ids;
  for (const auto& r : report.records) {
    out.records.push_back(ot::to_json(r));
    ids.push_back(r.trial_id);
  }
  std::sort(ids.begin(), ids.end());
  out.trials = static_cast<int>(std::unique(ids.begin(), ids.end()) - ids.begin());
  out.summary = {{"max_ratio", report.max_ratio}, {"tolerance", ot::kInequalityTolerance}};
  return out;
}

}  // namespace

void VerifyConfig::validate() const {
  require(jobs >= 1, ErrorKind::configuration, "jobs must be >= 1");
  require(budget >= 1, ErrorKind::configuration, "permutation budget must be >= 1");
  require(sigmas >= 1 && max_rows >= 1 && max_features >= 1, ErrorKind::configuration,
          "invariance settings must be positive");
  require(max_atoms >= 1 && max_atoms <= 8 && max_dim >= 1, ErrorKind::configuration,
          "ot-oracle needs 1 <= max_atoms <= 8 and max_dim >= 1");
  require(max_n >= 1 && max_dx >= 1 && max_r >= 1 && max_t >= 1, ErrorKind::configuration,
          "stability settings must be positive");
  require(lemma_dim >= 1 && lemma_dim <= 3, ErrorKind::configuration, "lemma1 dimension must lie in [1, 3]");
  require(!cells.empty(), ErrorKind::configuration, "lemma1 needs at least one grid size");
  for (int c : cells) require(c >= 1, ErrorKind::configuration, "grid sizes must be >= 1");
}

io::Json to_json(const VerifyConfig& c) {
  return {{"trials", c.trials},         {"seed", c.seed},         {"budget", c.budget},
          {"sigmas", c.sigmas},         {"max_rows", c.max_rows}, {"max_features", c.max_features},
          {"max_atoms", c.max_atoms},   {"max_dim", c.max_dim},   {"max_n", c.max_n},
          {"max_dx", c.max_dx},         {"max_r", c.max_r},       {"max_t", c.max_t},
          {"lemma_dim", c.lemma_dim},   {"cells", c.cells}};
}

VerifyConfig verify_config_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc,
                          {"trials", "seed", "budget", "sigmas", "max_rows", "max_features", "max_atoms", "max_dim",
                           "max_n", "max_dx", "max_r", "max_t", "lemma_dim", "cells"},
                          "verify");
  VerifyConfig c;
  try {
    c.trials = get_or(doc, "trials", c.trials);
    c.seed = get_or(doc, "seed", c.seed);
    c.budget = get_or(doc, "budget", c.budget);
    c.sigmas = get_or(doc, "sigmas", c.sigmas);
    c.max_rows = get_or(doc, "max_rows", c.max_rows);
    c.max_features = get_or(doc, "max_features", c.max_features);
    c.max_atoms = get_or(doc, "max_atoms", c.max_atoms);
    c.max_dim = get_or(doc, "max_dim", c.max_dim);
    c.max_n = get_or(doc, "max_n", c.max_n);
    c.max_dx = get_or(doc, "max_dx", c.max_dx);
    c.max_r = get_or(doc, "max_r", c.max_r);
    c.max_t = get_or(doc, "max_t", c.max_t);
    c.lemma_dim = get_or(doc, "lemma_dim", c.lemma_dim);
    c.cells = get_or(doc, "cells", c.cells);
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::configuration, std::string("verify: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json SuiteResult::report() const {
  return {{"suite", suite},         {"trials", trials},   {"violations", violations},
          {"passed", passed()},     {"max_value", max_value}, {"summary", summary},
          {"metadata", {{"seconds", seconds}}}};
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"invariance", "ot-oracle", "prop1", "prop2", "lemma1", "gradients"};
  return names;
}

// ---- invariance --------------------------------------------------------------------------------

SuiteResult run_invariance(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const int trials = trials_or(cfg, 100);
  const std::vector<net::ModelKind> kinds{net::ModelKind::dida, net::ModelKind::dss_linear,
                                          net::ModelKind::dss_nonlinear, net::ModelKind::dss_equivariant};
  std::vector<std::vector<io::Json>> rows(static_cast<std::size_t>(trials));
  parallel_for(trials, cfg.jobs, [&](long trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    const int n = static_cast<int>(rng.uniform_int(1, cfg.max_rows));
    const int dx = static_cast<int>(rng.uniform_int(1, cfg.max_features));
    const int classes = static_cast<int>(rng.uniform_int(2, 5));
    const LabeledDataset z = random_dataset(n, dx, classes, rng);
    for (auto kind : kinds) {
      net::ArchConfig arch;
      arch.kind = kind;
      if (kind == net::ModelKind::dida) {
        arch.aggregation = rng.bernoulli(0.5) ? net::Aggregation::sum : net::Aggregation::mean;
        arch.local_k = rng.bernoulli(0.25) ? static_cast<int>(rng.uniform_int(1, n)) : 0;
      } else {
        arch.hidden = 16;
      }
      const auto model = net::init_model(arch, rng.next_u64());
      const Vector f0 = model->extract(z);
      const double scale = std::max(f0.lpNorm<Eigen::Infinity>(), 1.0);
      double worst = 0.0;
      for (int s = 0; s < cfg.sigmas; ++s) {
        const auto sigma = PermutationPair::random(dx, classes, rng.next_u64());
        const LabeledDataset zs = shuffle_rows(apply_permutation(z, sigma), rng);
        worst = std::max(worst, (model->extract(zs) - f0).lpNorm<Eigen::Infinity>() / scale);
      }
      rows[static_cast<std::size_t>(trial)].push_back({{"trial_id", trial},
                                                       {"model", net::to_string(kind)},
                                                       {"n", n},
                                                       {"dx", dx},
                                                       {"local_k", arch.local_k},
                                                       {"max_relative_error", worst},
                                                       {"violated", worst > 1e-6}});
    }
  });
  SuiteResult out;
  out.suite = "invariance";
  out.trials = trials;
  for (auto& trial_rows : rows) {
    for (auto& r : trial_rows) {
      out.violations += r["violated"].get<bool>();
      out.max_value = std::max(out.max_value, r["max_relative_error"].get<double>());
      out.records.push_back(std::move(r));
    }
  }
  out.summary = {{"sigmas_per_dataset", cfg.sigmas}, {"tolerance", 1e-6}, {"max_relative_error", out.max_value}};
  out.seconds = seconds_since(start);
  return out;
}

// ---- transport oracle ----------------------------------------------------------------------------

SuiteResult run_ot_oracle(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const int trials = trials_or(cfg, 200);
  std::vector<io::Json> rows(static_cast<std::size_t>(trials));
  parallel_for(trials, cfg.jobs, [&](long trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    const int m = static_cast<int>(rng.uniform_int(1, cfg.max_atoms));
    const int d = static_cast<int>(rng.uniform_int(1, cfg.max_dim));
    Matrix x(m, d), y(m, d);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
    if (rng.bernoulli(0.25)) {
      // degenerate: a permuted copy, some rows exactly shared
      const auto order = rng.permutation(m);
      for (int i = 0; i < m; ++i) y.row(i) = x.row(order[static_cast<std::size_t>(i)]);
      if (m > 1) y.row(0) = y.row(1);
    } else {
      for (Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform();
    }
    const Matrix cost = ot::distance_matrix(x, y);
    const Vector w = Vector::Constant(m, 1.0 / m);
    const auto plan = ot::solve_transport(w, w, cost);

    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    double exhaustive = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (int i = 0; i < m; ++i) c += cost(i, perm[static_cast<std::size_t>(i)]);
      exhaustive = std::min(exhaustive, c / m);
    } while (std::next_permutation(perm.begin(), perm.end()));

    const double marginal = std::max((plan.coupling.rowwise().sum() - w).cwiseAbs().maxCoeff(),
                                     (plan.coupling.colwise().sum().transpose() - w).cwiseAbs().maxCoeff());
    const double cost_error = std::abs(plan.cost - exhaustive);
    const double assignment_error = std::abs(
        ot::wasserstein1(ot::DiscreteMeasure::uniform(x), ot::DiscreteMeasure::uniform(y)).first - exhaustive);
    const double negative = std::max(0.0, -plan.coupling.minCoeff());
    rows[static_cast<std::size_t>(trial)] = {{"trial_id", trial},
                                             {"atoms", m},
                                             {"dim", d},
                                             {"lp_cost", plan.cost},
                                             {"exhaustive_cost", exhaustive},
                                             {"cost_error", cost_error},
                                             {"assignment_error", assignment_error},
                                             {"marginal_error", marginal},
                                             {"violated", cost_error > 1e-9 || marginal > 1e-9 ||
                                                              assignment_error > 1e-9 || negative > 1e-12}};
  });
  SuiteResult out;
  out.suite = "ot-oracle";
  out.trials = trials;
  double worst_marginal = 0.0;
  for (auto& r : rows) {
    out.violations += r["violated"].get<bool>();
    out.max_value = std::max({out.max_value, r["cost_error"].get<double>(), r["assignment_error"].get<double>()});
    worst_marginal = std::max(worst_marginal, r["marginal_error"].get<double>());
    out.records.push_back(std::move(r));
  }
  out.summary = {{"max_cost_error", out.max_value}, {"max_marginal_error", worst_marginal}, {"tolerance", 1e-9}};
  out.seconds = seconds_since(start);
  return out;
}

// ---- stability statements --------------------------------------------------------------------

namespace {

ot::StabilitySuiteConfig stability_config(const VerifyConfig& cfg, int trials) {
  const long needed = std::max(ot::permutation_count(cfg.max_dx, 0), ot::permutation_count(cfg.max_r, 0));
  if (needed > cfg.budget) {
    fail(ErrorKind::capacity, "quotient over " + std::to_string(needed) + " permutations exceeds the budget of " +
                                  std::to_string(cfg.budget));
  }
  ot::StabilitySuiteConfig s;
  s.trials = trials;
  s.max_n = cfg.max_n;
  s.max_dx = cfg.max_dx;
  s.max_r = cfg.max_r;
  s.max_t = cfg.max_t;
  s.seed = cfg.seed;
  s.jobs = cfg.jobs;
  s.budget = cfg.budget;
  return s;
}

}  // namespace

SuiteResult run_prop1(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  auto out = from_report("prop1", ot::verify_prop1(stability_config(cfg, trials_or(cfg, 100))));
  out.seconds = seconds_since(start);
  return out;
}

SuiteResult run_prop2(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  auto out = from_report("prop2", ot::verify_prop2(stability_config(cfg, trials_or(cfg, 50))));
  int second = 0;
  for (const auto& r : out.records) second += r["inequality"].get<int>() == 2;
  out.summary["second_inequality_checks"] = second;
  out.seconds = seconds_since(start);
  return out;
}

// ---- grid discretization ---------------------------------------------------------------------

SuiteResult run_lemma1(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const int trials = trials_or(cfg, 200);
  const std::size_t grids = cfg.cells.size();
  std::vector<std::vector<io::Json>> rows(static_cast<std::size_t>(trials));
  parallel_for(trials, cfg.jobs, [&](long trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    const int d = static_cast<int>(rng.uniform_int(1, cfg.lemma_dim));
    const int m = static_cast<int>(rng.uniform_int(1, 20));
    ot::DiscreteMeasure mu;
    mu.points.resize(m, d);
    for (Index i = 0; i < mu.points.size(); ++i) mu.points.data()[i] = rng.uniform();
    mu.weights.resize(m);
    for (int i = 0; i < m; ++i) mu.weights[i] = 0.05 + rng.uniform();
    mu.weights /= mu.weights.sum();
    for (int c : cfg.cells) {
      const auto g = ot::grid_discretize(mu, c);
      const double w1 = ot::wasserstein1(g.measure(), mu).first;
      rows[static_cast<std::size_t>(trial)].push_back({{"trial_id", trial},
                                                       {"dim", d},
                                                       {"atoms", m},
                                                       {"cells", c},
                                                       {"w1", w1},
                                                       {"bound", g.delta_max},
                                                       {"violated", w1 > g.delta_max + 1e-10}});
    }
  });
  SuiteResult out;
  out.suite = "lemma1";
  out.trials = trials;
  std::vector<double> mean_gap(grids, 0.0);
  for (auto& trial_rows : rows) {
    for (std::size_t k = 0; k < trial_rows.size(); ++k) {
      auto& r = trial_rows[k];
      out.violations += r["violated"].get<bool>();
      const double gap = r["w1"].get<double>();
      mean_gap[k] += gap / trials;
      out.max_value = std::max(out.max_value, gap / r["bound"].get<double>());
      out.records.push_back(std::move(r));
    }
  }
  const auto finest = static_cast<std::size_t>(std::max_element(cfg.cells.begin(), cfg.cells.end()) - cfg.cells.begin());
  const auto coarsest = static_cast<std::size_t>(std::min_element(cfg.cells.begin(), cfg.cells.end()) - cfg.cells.begin());
  const bool shrinks = grids == 1 || mean_gap[finest] < mean_gap[coarsest];
  if (!shrinks) ++out.violations;
  io::Json gaps = io::Json::object();
  for (std::size_t k = 0; k < grids; ++k) gaps[std::to_string(cfg.cells[k])] = mean_gap[k];
  out.summary = {{"mean_gap_by_cells", gaps}, {"gap_shrinks", shrinks}, {"max_gap_over_bound", out.max_value}};
  out.seconds = seconds_since(start);
  return out;
}

// ---- gradients -------------------------------------------------------------------------------

SuiteResult run_gradients(const VerifyConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const int trials = trials_or(cfg, 4);
  SuiteResult out;
  out.suite = "gradients";
  out.trials = trials;
  std::size_t kinks = 0;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(trial)));
    net::ArchConfig arch;
    arch.t = 3;
    arch.r = 4;
    arch.d3 = 4;
    arch.head = {5, 4, 3};
    arch.activation = trial % 2 == 0 ? ad::Activation::tanh : ad::Activation::relu;
    arch.aggregation = trial % 4 < 2 ? net::Aggregation::sum : net::Aggregation::mean;
    const auto model = net::init_model(arch, rng.next_u64());
    const int n = static_cast<int>(rng.uniform_int(5, 9));
    const LabeledDataset a = random_dataset(n, static_cast<int>(rng.uniform_int(1, 3)), 3, rng);
    const LabeledDataset b = random_dataset(n, static_cast<int>(rng.uniform_int(1, 3)), 3, rng);
    const double label = trial % 2;

    ad::LossFn patch_loss = [&](ad::Tape& tape) {
      return tasks::patch_id_loss(tape, model->forward(tape, a), model->forward(tape, b), label);
    };
    const auto r1 = ad::check_gradients(patch_loss, model->parameters(), 1e-5);

    const auto head = tasks::RankerHead::init(model->meta_dim(), 6, rng.next_u64());
    const tasks::HyperConfigKnn t1{3, 1, tasks::KnnWeights::uniform}, t2{20, 2, tasks::KnnWeights::distance};
    ad::LossFn rank_loss = [&](ad::Tape& tape) {
      return tasks::ranking_loss(tape, head.forward(tape, model->forward(tape, a), t1, t2), trial % 2, {0.8, 1.3});
    };
    auto params = model->parameters();
    for (const auto& p : head.parameters()) params.push_back(p);
    const auto r2 = ad::check_gradients(rank_loss, params, 1e-5);

    for (const auto& [name, r] : {std::pair{"patch-id", r1}, std::pair{"ranking", r2}}) {
      const bool violated = r.max_relative_error > 1e-5;
      out.violations += violated;
      out.max_value = std::max(out.max_value, r.max_relative_error);
      kinks += r.kinks.size();
      out.records.push_back({{"trial_id", trial},
                             {"loss", name},
                             {"activation", ad::to_string(arch.activation)},
                             {"max_relative_error", r.max_relative_error},
                             {"checked", r.checked},
                             {"kinks", r.kinks.size()},
                             {"violated", violated}});
    }
  }
  out.summary = {{"max_relative_error", out.max_value}, {"tolerance", 1e-5}, {"kinks_skipped", kinks}};
  out.seconds = seconds_since(start);
  return out;
}

SuiteResult run_suite(const std::string& name, const VerifyConfig& cfg) {
  if (name == "invariance") return run_invariance(cfg);
  if (name == "ot-oracle") return run_ot_oracle(cfg);
  if (name == "prop1") return run_prop1(cfg);
  if (name == "prop2") return run_prop2(cfg);
  if (name == "lemma1") return run_lemma1(cfg);
  if (name == "gradients") return run_gradients(cfg);
  fail(ErrorKind::configuration, "unknown verification suite '" + name + "'");
}

}  // namespace dida::verify
