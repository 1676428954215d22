#pragma once

#include <string>
#include <vector>

#include "dida/io.hpp"

namespace dida::verify {

/// Settings shared by the suites. Zero or negative `trials` picks the suite
/// default.
struct VerifyConfig {
  int trials = 0;
  std::uint64_t seed = 0;
  int jobs = 1;
  long budget = 5040;
  // invariance
  int sigmas = 50;
  int max_rows = 50;
  int max_features = 7;
  // ot-oracle
  int max_atoms = 6;
  int max_dim = 3;
  // prop1 / prop2
  int max_n = 6;
  int max_dx = 4;
  int max_r = 3;
  int max_t = 4;
  // lemma1
  int lemma_dim = 2;
  std::vector<int> cells{4, 8, 16, 32, 64};

  void validate() const;
};

io::Json to_json(const VerifyConfig& cfg);
/// Rejects unknown keys.
VerifyConfig verify_config_from_json(const io::Json& doc);

struct SuiteResult {
  std::string suite;
  int trials = 0;
  int violations = 0;
  /// Largest scored quantity (relative error, ratio or gap, per suite).
  double max_value = 0.0;
  double seconds = 0.0;
  /// Suite-specific summary fields.
  io::Json summary = io::Json::object();
  /// One JSON object per trial.
  std::vector<io::Json> records;

  bool passed() const { return violations == 0; }
  /// Wall time sits under "metadata", everything else is deterministic.
  io::Json report() const;
};

const std::vector<std::string>& suite_names();

/// F(sigma#z) against F(z) for DIDA and each DSS variant; also shuffles rows.
SuiteResult run_invariance(const VerifyConfig& cfg);
/// Network simplex against exhaustive assignment on uniform measures.
SuiteResult run_ot_oracle(const VerifyConfig& cfg);
SuiteResult run_prop1(const VerifyConfig& cfg);
SuiteResult run_prop2(const VerifyConfig& cfg);
/// W1(alpha_hat, mu) <= max_j Delta_j on random measures in [0,1]^d.
SuiteResult run_lemma1(const VerifyConfig& cfg);
/// Finite-difference check of the patch-id and ranking losses through DIDA.
SuiteResult run_gradients(const VerifyConfig& cfg);

/// Dispatch by name; unknown names are a configuration error.
SuiteResult run_suite(const std::string& name, const VerifyConfig& cfg);

}  // namespace dida::verify
