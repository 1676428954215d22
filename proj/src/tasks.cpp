#include "dida/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "dida/handcrafted.hpp"
#include "dida/log.hpp"
#include "dida/parallel.hpp"

namespace dida::tasks {

// ---- k-NN ---------------------------------------------------------------------------

KnnWeights parse_knn_weights(const std::string& name) {
  if (name == "uniform") return KnnWeights::uniform;
  if (name == "distance") return KnnWeights::distance;
  fail(ErrorKind::configuration, "unknown k-NN weighting '" + name + "'");
}

std::string to_string(KnnWeights w) { return w == KnnWeights::uniform ? "uniform" : "distance"; }

Vector HyperConfigKnn::encode() const {
  Vector e(kThetaDim);
  e << std::log(static_cast<double>(n_neighbors)) / std::log(static_cast<double>(kMaxNeighbors)),
      static_cast<double>(p - 1), weights == KnnWeights::distance ? 1.0 : 0.0;
  return e;
}

void HyperConfigKnn::validate() const {
  require(n_neighbors >= 1 && n_neighbors <= kMaxNeighbors, ErrorKind::configuration,
          "n_neighbors must lie in [1, 100]");
  require(p == 1 || p == 2, ErrorKind::configuration, "Minkowski p must be 1 or 2");
}

HyperConfigKnn HyperConfigKnn::sample(Rng& rng) {
  HyperConfigKnn t;
  const double u = rng.uniform() * std::log(static_cast<double>(kMaxNeighbors + 1));
  t.n_neighbors = std::clamp(static_cast<int>(std::floor(std::exp(u))), 1, kMaxNeighbors);
  t.p = static_cast<int>(rng.uniform_int(1, 2));
  t.weights = rng.bernoulli(0.5) ? KnnWeights::distance : KnnWeights::uniform;
  return t;
}

io::Json to_json(const HyperConfigKnn& theta) {
  return {{"n_neighbors", theta.n_neighbors}, {"p", theta.p}, {"weights", to_string(theta.weights)}};
}

HyperConfigKnn knn_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc, {"n_neighbors", "p", "weights"}, "k-NN configuration");
  HyperConfigKnn t;
  try {
    t.n_neighbors = doc.at("n_neighbors").get<int>();
    t.p = doc.at("p").get<int>();
    t.weights = parse_knn_weights(doc.at("weights").get<std::string>());
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::configuration, std::string("k-NN configuration: ") + e.what());
  }
  t.validate();
  return t;
}

double knn_accuracy(const LabeledDataset& train, const LabeledDataset& test, const HyperConfigKnn& theta) {
  theta.validate();
  require(train.n() >= 1, ErrorKind::contract, "knn_accuracy needs a nonempty training set");
  require(train.dx() == test.dx(), ErrorKind::contract,
          "knn_accuracy: train has " + std::to_string(train.dx()) + " features, test has " +
              std::to_string(test.dx()));
  if (test.n() == 0) return 0.0;
  int k = theta.n_neighbors;
  if (k > train.n()) {
    log::warn("k-NN: n_neighbors ", k, " clamped to training size ", train.n());
    k = static_cast<int>(train.n());
  }
  int classes = 0;
  for (int y : train.labels) classes = std::max(classes, y + 1);

  const Index m = train.n();
  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(m));
  std::vector<double> votes(static_cast<std::size_t>(classes));
  Index correct = 0;
  for (Index q = 0; q < test.n(); ++q) {
    const auto row = test.features.row(q);
    for (Index i = 0; i < m; ++i) {
      const auto diff = (train.features.row(i) - row).array();
      const double d = theta.p == 1 ? diff.abs().sum() : std::sqrt(diff.square().sum());
      dist[static_cast<std::size_t>(i)] = {d, static_cast<int>(i)};
    }
    std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
    // nth_element leaves the k smallest (by distance, then index) in front
    std::fill(votes.begin(), votes.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      const auto& [d, i] = dist[static_cast<std::size_t>(j)];
      const double w = theta.weights == KnnWeights::distance ? 1.0 / (d + 1e-12) : 1.0;
      votes[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)])] += w;
    }
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
    }
    if (best == test.labels[static_cast<std::size_t>(q)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.n());
}

namespace {

LabeledDataset take_rows(const LabeledDataset& z, const std::vector<int>& rows, const std::string& suffix) {
  LabeledDataset out;
  out.id = z.id + suffix;
  out.num_classes = z.num_classes;
  out.features.resize(static_cast<Index>(rows.size()), z.dx());
  out.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = z.features.row(rows[i]);
    out.labels[i] = z.labels[static_cast<std::size_t>(rows[i])];
  }
  return out;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> stratified_halves(const LabeledDataset& z, std::uint64_t seed) {
  Rng rng(seed);
  std::map<int, std::vector<int>> by_class;
  for (Index i = 0; i < z.n(); ++i) by_class[z.labels[static_cast<std::size_t>(i)]].push_back(static_cast<int>(i));
  bool stratify = true;
  for (const auto& [c, rows] : by_class) stratify = stratify && rows.size() >= 2;

  std::vector<int> train, test;
  if (stratify) {
    for (auto& [c, rows] : by_class) {
      rng.shuffle(rows);
      const std::size_t half = rows.size() / 2;
      train.insert(train.end(), rows.begin(), rows.begin() + static_cast<long>(half));
      test.insert(test.end(), rows.begin() + static_cast<long>(half), rows.end());
    }
  } else {
    log::warn("dataset '", z.id, "' has a class with fewer than 2 rows; using an unstratified split");
    auto order = rng.permutation(static_cast<int>(z.n()));
    const std::size_t half = order.size() / 2;
    train.assign(order.begin(), order.begin() + static_cast<long>(half));
    test.assign(order.begin() + static_cast<long>(half), order.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {take_rows(z, train, "/train"), take_rows(z, test, "/test")};
}

double knn_performance_oracle(const LabeledDataset& patch, const HyperConfigKnn& theta, std::uint64_t seed) {
  require(patch.n() >= 20, ErrorKind::contract, "knn_performance_oracle needs n >= 20");
  const auto [train, test] = stratified_halves(patch, seed);
  return knn_accuracy(train, test, theta);
}

// ---- patch identification ---------------------------------------------------------------

void PatchSampling::validate() const {
  require(rows_min >= 1 && rows_min <= rows_max, ErrorKind::configuration, "patch rows need 1 <= min <= max");
  require(feats_min >= 1 && feats_min <= feats_max, ErrorKind::configuration, "patch features need 1 <= min <= max");
}

std::vector<PatchPair> build_patch_pairs(const std::vector<LabeledDataset>& datasets, int count,
                                         const PatchSampling& sampling, std::uint64_t seed) {
  sampling.validate();
  require(datasets.size() >= 2, ErrorKind::contract, "patch pairs need at least 2 datasets");
  require(count >= 0, ErrorKind::contract, "negative pair count");
  for (const auto& z : datasets) {
    if (z.n() < sampling.rows_max || z.dx() < sampling.feats_max) {
      fail(ErrorKind::domain, "dataset '" + z.id + "' (" + std::to_string(z.n()) + "x" + std::to_string(z.dx()) +
                                  ") is smaller than the patch ranges");
    }
  }
  Rng rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(count), 0);
  std::fill(labels.begin(), labels.begin() + count / 2, 1);
  rng.shuffle(labels);

  const auto n_sets = static_cast<std::int64_t>(datasets.size());
  std::vector<PatchPair> pairs;
  pairs.reserve(labels.size());
  for (int label : labels) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, n_sets - 1));
    std::size_t j = i;
    if (label == 0) {
      j = static_cast<std::size_t>(rng.uniform_int(0, n_sets - 2));
      if (j >= i) ++j;
    }
    const int rows = static_cast<int>(rng.uniform_int(sampling.rows_min, sampling.rows_max));
    const int fa = static_cast<int>(rng.uniform_int(sampling.feats_min, sampling.feats_max));
    const int fb = static_cast<int>(rng.uniform_int(sampling.feats_min, sampling.feats_max));
    PatchPair pair;
    pair.a = sample_patch(datasets[i], rows, fa, rng.next_u64()).first;
    pair.b = sample_patch(datasets[j], rows, fb, rng.next_u64()).first;
    pair.label = label;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

double patch_similarity(const Vector& fa, const Vector& fb) {
  return std::clamp(std::exp(-(fa - fb).norm()), kSimilarityClamp, 1.0 - kSimilarityClamp);
}

double patch_id_loss_value(double similarity, double label) {
  return -(label * std::log(similarity) + (1.0 - label) * std::log(1.0 - similarity));
}

Tensor patch_id_loss(Tape& tape, const Tensor& fa, const Tensor& fb, double label) {
  require(fa.size() == fb.size(), ErrorKind::dimension, "patch_id_loss: meta-feature sizes differ");
  const Tensor dist = ad::norm2(tape, ad::sub(tape, fa, fb));
  const Tensor sim = ad::clamp(tape, ad::exp(tape, ad::scale(tape, dist, -1.0)), kSimilarityClamp,
                               1.0 - kSimilarityClamp);
  const Tensor pos = ad::scale(tape, ad::log(tape, sim), -label);
  const Tensor neg = ad::scale(tape, ad::log(tape, ad::add_scalar(tape, ad::scale(tape, sim, -1.0), 1.0)),
                               -(1.0 - label));
  return ad::add(tape, pos, neg);
}

// ---- ranking -------------------------------------------------------------------------------

void RankSampling::validate() const {
  require(rows_min >= 20 && rows_min <= rows_max, ErrorKind::configuration, "rank patch rows need 20 <= min <= max");
  require(feats_min >= 1 && feats_min <= feats_max, ErrorKind::configuration,
          "rank patch features need 1 <= min <= max");
}

RankSampling RankSampling::scaled(double factor) const {
  require(factor > 0.0 && factor <= 1.0, ErrorKind::configuration, "rank patch scale must lie in (0, 1]");
  RankSampling out = *this;
  out.rows_min = std::max(20, static_cast<int>(std::lround(rows_min * factor)));
  out.rows_max = std::max(out.rows_min, static_cast<int>(std::lround(rows_max * factor)));
  if (factor != 1.0) {
    log::info("rank patches scaled by ", factor, ": rows in [", out.rows_min, ", ", out.rows_max, "]");
  }
  return out;
}

std::vector<RankTriplet> make_rank_group(const LabeledDataset& source, int count, const RankSampling& sampling,
                                         std::uint64_t seed) {
  sampling.validate();
  if (source.n() < sampling.rows_max || source.dx() < sampling.feats_max) {
    fail(ErrorKind::domain, "dataset '" + source.id + "' (" + std::to_string(source.n()) + "x" +
                                std::to_string(source.dx()) + ") is too small for rank patches");
  }
  Rng rng(seed);
  for (int patch_attempt = 0; patch_attempt < 20; ++patch_attempt) {
    const int rows = static_cast<int>(rng.uniform_int(sampling.rows_min, sampling.rows_max));
    const int feats = static_cast<int>(rng.uniform_int(sampling.feats_min, sampling.feats_max));
    auto patch = std::make_shared<const LabeledDataset>(sample_patch(source, rows, feats, rng.next_u64()).first);
    const std::uint64_t split_seed = rng.next_u64();
    const auto [train, test] = stratified_halves(*patch, split_seed);

    std::map<std::tuple<int, int, int>, double> cache;
    auto perf = [&](const HyperConfigKnn& t) {
      const auto key = std::make_tuple(t.n_neighbors, t.p, static_cast<int>(t.weights));
      auto it = cache.find(key);
      if (it == cache.end()) it = cache.emplace(key, knn_accuracy(train, test, t)).first;
      return it->second;
    };

    std::vector<RankTriplet> out;
    bool degenerate = false;
    for (int i = 0; i < count && !degenerate; ++i) {
      RankTriplet tr;
      tr.patch = patch;
      tr.split_seed = split_seed;
      degenerate = true;
      for (int attempt = 0; attempt < 200; ++attempt) {
        tr.theta1 = HyperConfigKnn::sample(rng);
        tr.theta2 = HyperConfigKnn::sample(rng);
        tr.perf1 = perf(tr.theta1);
        tr.perf2 = perf(tr.theta2);
        if (tr.perf1 != tr.perf2) {
          degenerate = false;
          break;
        }
      }
      tr.label = tr.perf2 > tr.perf1 ? 1 : 0;
      out.push_back(std::move(tr));
    }
    if (!degenerate) return out;
    log::debug("patch of '", source.id, "' gives equal accuracies for every drawn configuration; redrawing");
  }
  fail(ErrorKind::numeric, "no patch of '" + source.id + "' separates any configuration pair");
}

std::vector<RankTriplet> build_rank_triplets(const std::vector<LabeledDataset>& datasets, int count,
                                             const RankSampling& sampling, std::uint64_t seed, int per_patch,
                                             int jobs) {
  require(!datasets.empty(), ErrorKind::contract, "build_rank_triplets needs datasets");
  require(per_patch >= 1 && count >= 0, ErrorKind::contract, "build_rank_triplets: invalid counts");
  const int groups = (count + per_patch - 1) / per_patch;
  std::vector<std::vector<RankTriplet>> parts(static_cast<std::size_t>(groups));
  parallel_for(groups, jobs, [&](long g) {
    Rng rng(child_seed(seed, static_cast<std::uint64_t>(g)));
    const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(datasets.size()) - 1));
    const int size = std::min(per_patch, count - static_cast<int>(g) * per_patch);
    parts[static_cast<std::size_t>(g)] = make_rank_group(datasets[idx], size, sampling, rng.next_u64());
  });
  std::vector<RankTriplet> out;
  out.reserve(static_cast<std::size_t>(count));
  for (auto& p : parts) std::move(p.begin(), p.end(), std::back_inserter(out));
  return out;
}

std::pair<double, double> inverse_frequency_weights(const std::vector<int>& labels) {
  double n1 = 0.0;
  for (int y : labels) n1 += y;
  const double n = static_cast<double>(labels.size());
  const double n0 = n - n1;
  return {n0 > 0 ? n / (2.0 * n0) : 1.0, n1 > 0 ? n / (2.0 * n1) : 1.0};
}

Tensor ranking_loss(Tape& tape, const Tensor& logit, int label, const std::pair<double, double>& class_weights) {
  require(class_weights.first > 0.0 && class_weights.second > 0.0, ErrorKind::contract,
          "ranking_loss: class weights must be positive");
  return ad::bce_with_logits(tape, logit, label, label == 1 ? class_weights.second : class_weights.first);
}

RankerHead RankerHead::init(Index meta_dim, Index width, std::uint64_t seed) {
  Rng rng(seed);
  const Index in = meta_dim + 2 * kThetaDim;
  RankerHead h;
  h.hidden.W = Tensor::matrix(net::glorot_uniform(width, in, rng), true);
  h.hidden.b = Tensor::vector(Vector::Zero(width), true);
  h.hidden.activation = ad::Activation::relu;
  h.out.W = Tensor::matrix(net::glorot_uniform(1, width, rng), true);
  h.out.b = Tensor::vector(Vector::Zero(1), true);
  h.out.activation = ad::Activation::identity;
  return h;
}

Tensor RankerHead::forward(Tape& tape, const Tensor& meta, const HyperConfigKnn& t1,
                           const HyperConfigKnn& t2) const {
  require(meta.size() == meta_dim(), ErrorKind::dimension, "ranker head: meta-feature size mismatch");
  const Tensor x = ad::concat(tape, {meta, Tensor::vector(t1.encode()), Tensor::vector(t2.encode())});
  return net::dense_forward(tape, out, net::dense_forward(tape, hidden, x));
}

double RankerHead::logit(const Vector& meta, const HyperConfigKnn& t1, const HyperConfigKnn& t2) const {
  Vector x(meta.size() + 2 * kThetaDim);
  x << meta, t1.encode(), t2.encode();
  const Vector h = ad::activate(hidden.activation, (hidden.W.value() * x + hidden.b.value().col(0)).array()).matrix();
  return (out.W.value() * h)(0, 0) + out.b.value()(0, 0);
}

std::vector<Tensor> RankerHead::parameters() const { return {hidden.W, hidden.b, out.W, out.b}; }

RankerHead RankerHead::clone() const {
  RankerHead h = *this;
  h.hidden.W = Tensor::from_shape(hidden.W.shape(), hidden.W.value(), true);
  h.hidden.b = Tensor::from_shape(hidden.b.shape(), hidden.b.value(), true);
  h.out.W = Tensor::from_shape(out.W.shape(), out.W.value(), true);
  h.out.b = Tensor::from_shape(out.b.shape(), out.b.value(), true);
  return h;
}

namespace {

io::Json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"values", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const io::Json& doc) {
  const auto rows = doc.at("rows").get<Index>();
  const auto cols = doc.at("cols").get<Index>();
  const auto values = doc.at("values").get<std::vector<double>>();
  require(rows >= 0 && cols >= 0 && static_cast<Index>(values.size()) == rows * cols, ErrorKind::format,
          "matrix entry has " + std::to_string(values.size()) + " values for shape " + std::to_string(rows) + "x" +
              std::to_string(cols));
  Matrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

}  // namespace

io::Json to_json(const RankerHead& head) {
  return {{"hidden.W", matrix_json(head.hidden.W.value())},
          {"hidden.b", matrix_json(head.hidden.b.value())},
          {"out.W", matrix_json(head.out.W.value())},
          {"out.b", matrix_json(head.out.b.value())}};
}

RankerHead ranker_head_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc, {"hidden.W", "hidden.b", "out.W", "out.b"}, "ranker head");
  RankerHead h;
  try {
    const Matrix w1 = matrix_from_json(doc.at("hidden.W"));
    const Matrix b1 = matrix_from_json(doc.at("hidden.b"));
    const Matrix w2 = matrix_from_json(doc.at("out.W"));
    const Matrix b2 = matrix_from_json(doc.at("out.b"));
    require(w1.rows() == b1.rows() && b1.cols() == 1 && w2.rows() == 1 && w2.cols() == w1.rows() &&
                b2.rows() == 1 && b2.cols() == 1 && w1.cols() > 2 * kThetaDim,
            ErrorKind::format, "ranker head tensors have inconsistent shapes");
    h.hidden.W = Tensor::matrix(w1, true);
    h.hidden.b = Tensor::vector(b1.col(0), true);
    h.hidden.activation = ad::Activation::relu;
    h.out.W = Tensor::matrix(w2, true);
    h.out.b = Tensor::vector(b2.col(0), true);
    h.out.activation = ad::Activation::identity;
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::format, std::string("ranker head: ") + e.what());
  }
  return h;
}

Standardizer Standardizer::fit(const Matrix& rows) {
  require(rows.rows() >= 1, ErrorKind::contract, "standardizer needs at least one row");
  Standardizer s;
  s.mean = rows.colwise().mean().transpose();
  s.scale.resize(rows.cols());
  for (Index k = 0; k < rows.cols(); ++k) {
    const double var = (rows.col(k).array() - s.mean[k]).square().mean();
    s.scale[k] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Vector Standardizer::apply(const Vector& x) const {
  require(x.size() == mean.size(), ErrorKind::dimension, "standardizer size mismatch");
  return ((x - mean).array() / scale.array()).matrix();
}

io::Json to_json(const Standardizer& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
}

Standardizer standardizer_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc, {"mean", "scale"}, "standardizer");
  Standardizer s;
  try {
    const auto m = doc.at("mean").get<std::vector<double>>();
    const auto c = doc.at("scale").get<std::vector<double>>();
    require(m.size() == c.size(), ErrorKind::format, "standardizer mean and scale differ in size");
    s.mean = Eigen::Map<const Vector>(m.data(), static_cast<Index>(m.size()));
    s.scale = Eigen::Map<const Vector>(c.data(), static_cast<Index>(c.size()));
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::format, std::string("standardizer: ") + e.what());
  }
  return s;
}

// ---- extractors ------------------------------------------------------------------------------

MetaExtractor model_extractor(const net::Model& model, std::string name) {
  std::shared_ptr<const net::Model> frozen = model.clone();
  return {std::move(name), [frozen](const LabeledDataset& z) { return frozen->extract(z); }};
}

MetaExtractor handcrafted_extractor() {
  return {"handcrafted", [](const LabeledDataset& z) { return meta::extract_handcrafted(z).values; }};
}

// ---- metrics ---------------------------------------------------------------------------------

io::Json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"split", m.split}, {"loss", m.loss}, {"accuracy", m.accuracy}};
}

std::string metrics_jsonl(const std::vector<EpochMetrics>& history) {
  std::vector<io::Json> rows;
  for (const auto& m : history) rows.push_back(to_json(m));
  return io::to_jsonl(rows);
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int count, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::configuration,
          "train_fraction must lie in (0, 1)");
  Rng rng(seed);
  auto order = rng.permutation(count);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * count));
  std::vector<int> train(order.begin(), order.begin() + static_cast<long>(n_train));
  std::vector<int> test(order.begin() + static_cast<long>(n_train), order.end());
  return {train, test};
}

namespace {

std::vector<LabeledDataset> select(const std::vector<LabeledDataset>& all, const std::vector<int>& idx) {
  std::vector<LabeledDataset> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

template <typename T>
T get_or(const io::Json& doc, const char* key, T fallback) {
  return doc.contains(key) ? doc.at(key).get<T>() : fallback;
}

}  // namespace

// ---- patch-id training -----------------------------------------------------------------------

void PatchIdConfig::validate() const {
  require(epochs >= 1 && batch_size >= 1, ErrorKind::configuration, "patch-id needs epochs >= 1 and batch_size >= 1");
  require(learning_rate >= 0.0, ErrorKind::configuration, "learning_rate must be >= 0");
  require(train_pairs >= 1 && test_pairs >= 1, ErrorKind::configuration, "patch-id needs positive pair counts");
  require(jobs >= 1, ErrorKind::configuration, "jobs must be >= 1");
  sampling.validate();
}

io::Json to_json(const PatchIdConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"train_fraction", c.train_fraction},
          {"train_pairs", c.train_pairs},
          {"test_pairs", c.test_pairs},
          {"rows_min", c.sampling.rows_min},
          {"rows_max", c.sampling.rows_max},
          {"feats_min", c.sampling.feats_min},
          {"feats_max", c.sampling.feats_max}};
}

PatchIdConfig patch_id_config_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc,
                          {"epochs", "batch_size", "learning_rate", "seed", "train_fraction", "train_pairs",
                           "test_pairs", "rows_min", "rows_max", "feats_min", "feats_max"},
                          "patch-id training");
  PatchIdConfig c;
  try {
    c.epochs = get_or(doc, "epochs", c.epochs);
    c.batch_size = get_or(doc, "batch_size", c.batch_size);
    c.learning_rate = get_or(doc, "learning_rate", c.learning_rate);
    c.seed = get_or(doc, "seed", c.seed);
    c.train_fraction = get_or(doc, "train_fraction", c.train_fraction);
    c.train_pairs = get_or(doc, "train_pairs", c.train_pairs);
    c.test_pairs = get_or(doc, "test_pairs", c.test_pairs);
    c.sampling.rows_min = get_or(doc, "rows_min", c.sampling.rows_min);
    c.sampling.rows_max = get_or(doc, "rows_max", c.sampling.rows_max);
    c.sampling.feats_min = get_or(doc, "feats_min", c.sampling.feats_min);
    c.sampling.feats_max = get_or(doc, "feats_max", c.sampling.feats_max);
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::configuration, std::string("patch-id training: ") + e.what());
  }
  c.validate();
  return c;
}

std::pair<double, double> evaluate_patch_pairs(const net::Model& model, const std::vector<PatchPair>& pairs,
                                               int jobs) {
  if (pairs.empty()) return {0.0, 0.0};
  std::vector<double> sims(pairs.size());
  parallel_for(static_cast<long>(pairs.size()), jobs, [&](long i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    sims[static_cast<std::size_t>(i)] = patch_similarity(model.extract(p.a), model.extract(p.b));
  });
  double loss = 0.0;
  long correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    loss += patch_id_loss_value(sims[i], pairs[i].label);
    correct += (sims[i] > 0.5 ? 1 : 0) == pairs[i].label;
  }
  const auto n = static_cast<double>(pairs.size());
  return {loss / n, static_cast<double>(correct) / n};
}

PatchIdSplit make_patch_id_split(const std::vector<LabeledDataset>& datasets, const PatchIdConfig& cfg) {
  cfg.validate();
  require(datasets.size() >= 4, ErrorKind::contract, "patch identification needs at least 4 datasets");
  PatchIdSplit split;
  std::tie(split.train_datasets, split.test_datasets) =
      split_indices(static_cast<int>(datasets.size()), cfg.train_fraction, child_seed(cfg.seed, 1));
  split.test_pairs = build_patch_pairs(select(datasets, split.test_datasets), cfg.test_pairs, cfg.sampling,
                                       child_seed(cfg.seed, 2));
  return split;
}

PatchIdResult train_patch_id(net::Model& model, const std::vector<LabeledDataset>& datasets,
                             const PatchIdConfig& cfg, const EpochHook& hook) {
  const PatchIdSplit split = make_patch_id_split(datasets, cfg);
  const auto train_sets = select(datasets, split.train_datasets);
  const auto& test_pairs = split.test_pairs;

  auto params = model.parameters();
  auto adam = ad::make_adam_state(params, cfg.learning_rate);
  PatchIdResult result;
  result.best_test_accuracy = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto pairs = build_patch_pairs(train_sets, cfg.train_pairs, cfg.sampling,
                                         child_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    long correct = 0;
    for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - start);
      ad::zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        Tape tape;
        const Tensor fa = model.forward(tape, pairs[i].a);
        const Tensor fb = model.forward(tape, pairs[i].b);
        const Tensor loss = patch_id_loss(tape, fa, fb, pairs[i].label);
        loss_sum += loss.item();
        correct += (patch_similarity(fa.as_vector(), fb.as_vector()) > 0.5 ? 1 : 0) == pairs[i].label;
        tape.backward(ad::scale(tape, loss, inv));
      }
      ad::adam_step(params, adam);
    }
    const auto n = static_cast<double>(pairs.size());
    result.history.push_back({epoch, "train", loss_sum / n, static_cast<double>(correct) / n});
    const auto [test_loss, test_acc] = evaluate_patch_pairs(model, test_pairs, cfg.jobs);
    result.history.push_back({epoch, "test", test_loss, test_acc});
    log::info("patch-id epoch ", epoch, ": train loss ", loss_sum / n, " acc ", correct / n, ", test loss ",
              test_loss, " acc ", test_acc);
    const bool best = test_acc > result.best_test_accuracy;
    if (best) {
      result.best_test_accuracy = test_acc;
      result.best_epoch = epoch;
      result.best_model = model.clone();
    }
    if (hook) hook({epoch, &model, nullptr, &result.history, best});
  }
  return result;
}

// ---- ranker training -------------------------------------------------------------------------

void RankerConfig::validate() const {
  require(epochs >= 1 && batch_size >= 1, ErrorKind::configuration, "ranker needs epochs >= 1 and batch_size >= 1");
  require(learning_rate >= 0.0, ErrorKind::configuration, "learning_rate must be >= 0");
  require(triplets_per_patch >= 1 && patches_per_dataset >= 1 && test_patches_per_dataset >= 1,
          ErrorKind::configuration, "ranker needs positive triplet and patch counts");
  require(head_width >= 1, ErrorKind::configuration, "head_width must be >= 1");
  require(jobs >= 1, ErrorKind::configuration, "jobs must be >= 1");
  sampling.validate();
}

io::Json to_json(const RankerConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"train_fraction", c.train_fraction},
          {"triplets_per_patch", c.triplets_per_patch},
          {"patches_per_dataset", c.patches_per_dataset},
          {"test_patches_per_dataset", c.test_patches_per_dataset},
          {"head_width", c.head_width},
          {"rows_min", c.sampling.rows_min},
          {"rows_max", c.sampling.rows_max},
          {"feats_min", c.sampling.feats_min},
          {"feats_max", c.sampling.feats_max}};
}

RankerConfig ranker_config_from_json(const io::Json& doc) {
  io::reject_unknown_keys(doc,
                          {"epochs", "batch_size", "learning_rate", "seed", "train_fraction", "triplets_per_patch",
                           "patches_per_dataset", "test_patches_per_dataset", "head_width", "rows_min", "rows_max",
                           "feats_min", "feats_max"},
                          "ranker training");
  RankerConfig c;
  try {
    c.epochs = get_or(doc, "epochs", c.epochs);
    c.batch_size = get_or(doc, "batch_size", c.batch_size);
    c.learning_rate = get_or(doc, "learning_rate", c.learning_rate);
    c.seed = get_or(doc, "seed", c.seed);
    c.train_fraction = get_or(doc, "train_fraction", c.train_fraction);
    c.triplets_per_patch = get_or(doc, "triplets_per_patch", c.triplets_per_patch);
    c.patches_per_dataset = get_or(doc, "patches_per_dataset", c.patches_per_dataset);
    c.test_patches_per_dataset = get_or(doc, "test_patches_per_dataset", c.test_patches_per_dataset);
    c.head_width = get_or(doc, "head_width", c.head_width);
    c.sampling.rows_min = get_or(doc, "rows_min", c.sampling.rows_min);
    c.sampling.rows_max = get_or(doc, "rows_max", c.sampling.rows_max);
    c.sampling.feats_min = get_or(doc, "feats_min", c.sampling.feats_min);
    c.sampling.feats_max = get_or(doc, "feats_max", c.sampling.feats_max);
  } catch (const io::Json::exception& e) {
    fail(ErrorKind::configuration, std::string("ranker training: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

/// Groups of `per` patches per dataset, each with `triplets` triplets.
std::vector<RankTriplet> draw_groups(const std::vector<LabeledDataset>& datasets, const std::vector<int>& idx,
                                     int per, int triplets, const RankSampling& sampling, std::uint64_t seed,
                                     int jobs) {
  const long groups = static_cast<long>(idx.size()) * per;
  std::vector<std::vector<RankTriplet>> parts(static_cast<std::size_t>(groups));
  parallel_for(groups, jobs, [&](long g) {
    const auto& source = datasets[static_cast<std::size_t>(idx[static_cast<std::size_t>(g / per)])];
    parts[static_cast<std::size_t>(g)] =
        make_rank_group(source, triplets, sampling, child_seed(seed, static_cast<std::uint64_t>(g)));
  });
  std::vector<RankTriplet> out;
  for (auto& p : parts) std::move(p.begin(), p.end(), std::back_inserter(out));
  return out;
}

/// Consecutive runs of triplets sharing a patch.
std::vector<std::pair<std::size_t, std::size_t>> patch_runs(const std::vector<RankTriplet>& triplets) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t i = 0; i < triplets.size();) {
    std::size_t j = i + 1;
    while (j < triplets.size() && triplets[j].patch == triplets[i].patch) ++j;
    runs.emplace_back(i, j);
    i = j;
  }
  return runs;
}

Vector meta_of(const net::Model* model, const Standardizer* standardizer, const LabeledDataset& patch) {
  if (model) return model->extract(patch);
  return standardizer->apply(meta::extract_handcrafted(patch).values);
}

struct RankEval {
  double loss = 0.0;
  double accuracy = 0.0;
};

RankEval evaluate_ranking(const net::Model* model, const RankerHead& head, const Standardizer* standardizer,
                          const std::vector<RankTriplet>& triplets, bool swapped, int jobs) {
  if (triplets.empty()) return {};
  const auto runs = patch_runs(triplets);
  std::vector<Vector> metas(runs.size());
  parallel_for(static_cast<long>(runs.size()), jobs, [&](long r) {
    metas[static_cast<std::size_t>(r)] =
        meta_of(model, standardizer, *triplets[runs[static_cast<std::size_t>(r)].first].patch);
  });
  double loss = 0.0;
  long correct = 0;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (std::size_t i = runs[r].first; i < runs[r].second; ++i) {
      const auto& t = triplets[i];
      const double z = swapped ? head.logit(metas[r], t.theta2, t.theta1) : head.logit(metas[r], t.theta1, t.theta2);
      const int label = swapped ? 1 - t.label : t.label;
      loss += std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
      correct += (z > 0.0 ? 1 : 0) == label;
    }
  }
  const auto n = static_cast<double>(triplets.size());
  return {loss / n, static_cast<double>(correct) / n};
}

RankerResult train_ranker_impl(net::Model* model, const std::vector<LabeledDataset>& datasets,
                               const RankerConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  require(datasets.size() >= 4, ErrorKind::contract, "ranking needs at least 4 datasets");
  const RankingSplit split = make_ranking_split(datasets, cfg);

  RankerResult result;
  Standardizer standardizer;
  Index meta_dim = 0;
  if (model) {
    meta_dim = model->meta_dim();
  } else {
    const auto sample = draw_groups(datasets, split.train_datasets, 1, 1, cfg.sampling, child_seed(cfg.seed, 3),
                                    cfg.jobs);
    Matrix rows(static_cast<Index>(sample.size()), meta::HandcraftedVector::size());
    for (std::size_t i = 0; i < sample.size(); ++i) {
      rows.row(static_cast<Index>(i)) = meta::extract_handcrafted(*sample[i].patch).values.transpose();
    }
    standardizer = Standardizer::fit(rows);
    meta_dim = rows.cols();
  }
  RankerHead head = RankerHead::init(meta_dim, cfg.head_width, child_seed(cfg.seed, 4));

  std::vector<Tensor> params = model ? model->parameters() : std::vector<Tensor>{};
  for (const auto& p : head.parameters()) params.push_back(p);
  auto adam = ad::make_adam_state(params, cfg.learning_rate);
  result.best_test_accuracy = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = child_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch));
    std::vector<int> order = split.train_datasets;
    Rng(epoch_seed).shuffle(order);
    const auto triplets = draw_groups(datasets, order, cfg.patches_per_dataset, cfg.triplets_per_patch, cfg.sampling,
                                      child_seed(epoch_seed, 1), cfg.jobs);
    std::vector<int> labels;
    for (const auto& t : triplets) labels.push_back(t.label);
    const auto weights = inverse_frequency_weights(labels);
    const auto runs = patch_runs(triplets);

    double loss_sum = 0.0;
    long correct = 0;
    std::size_t r = 0;
    while (r < runs.size()) {
      // whole patches per step, about batch_size triplets
      std::size_t r_end = r;
      std::size_t count = 0;
      while (r_end < runs.size() && (count == 0 || count + (runs[r_end].second - runs[r_end].first) <=
                                                         static_cast<std::size_t>(cfg.batch_size))) {
        count += runs[r_end].second - runs[r_end].first;
        ++r_end;
      }
      const double inv = 1.0 / static_cast<double>(count);
      ad::zero_grads(params);
      for (; r < r_end; ++r) {
        Tape tape;
        const auto& patch = *triplets[runs[r].first].patch;
        const Tensor meta =
            model ? model->forward(tape, patch) : Tensor::vector(meta_of(nullptr, &standardizer, patch));
        Tensor total;
        for (std::size_t i = runs[r].first; i < runs[r].second; ++i) {
          const auto& t = triplets[i];
          const Tensor logit = head.forward(tape, meta, t.theta1, t.theta2);
          const Tensor loss = ranking_loss(tape, logit, t.label, weights);
          loss_sum += loss.item();
          correct += (logit.item() > 0.0 ? 1 : 0) == t.label;
          total = total.defined() ? ad::add(tape, total, loss) : loss;
        }
        tape.backward(ad::scale(tape, total, inv));
      }
      ad::adam_step(params, adam);
    }
    const auto n = static_cast<double>(triplets.size());
    result.history.push_back({epoch, "train", loss_sum / n, static_cast<double>(correct) / n});
    const auto test = evaluate_ranking(model, head, model ? nullptr : &standardizer, split.test_triplets, false,
                                       cfg.jobs);
    result.history.push_back({epoch, "test", test.loss, test.accuracy});
    log::info(model ? "ranker" : "handcrafted ranker", " epoch ", epoch, ": train loss ", loss_sum / n, " acc ",
              correct / n, ", test loss ", test.loss, " acc ", test.accuracy);
    const bool best = test.accuracy > result.best_test_accuracy;
    if (best) {
      result.best_test_accuracy = test.accuracy;
      result.best_epoch = epoch;
      if (model) result.best_model = model->clone();
      result.best_head = head.clone();
    }
    if (hook) hook({epoch, model, &head, &result.history, best});
  }
  result.standardizer = standardizer;
  return result;
}

}  // namespace

RankingSplit make_ranking_split(const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg) {
  RankingSplit split;
  std::tie(split.train_datasets, split.test_datasets) =
      split_indices(static_cast<int>(datasets.size()), cfg.train_fraction, child_seed(cfg.seed, 1));
  split.test_triplets = draw_groups(datasets, split.test_datasets, cfg.test_patches_per_dataset,
                                    cfg.triplets_per_patch, cfg.sampling, child_seed(cfg.seed, 2), cfg.jobs);
  return split;
}

double ranking_accuracy(const net::Model* model, const RankerHead& head, const Standardizer* standardizer,
                        const std::vector<RankTriplet>& triplets, bool swapped, int jobs) {
  require(model != nullptr || standardizer != nullptr, ErrorKind::contract,
          "ranking_accuracy needs a model or a standardizer");
  return evaluate_ranking(model, head, standardizer, triplets, swapped, jobs).accuracy;
}

RankerResult train_ranker(net::Model& model, const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg,
                          const EpochHook& hook) {
  return train_ranker_impl(&model, datasets, cfg, hook);
}

RankerResult train_handcrafted_ranker(const std::vector<LabeledDataset>& datasets, const RankerConfig& cfg,
                                      const EpochHook& hook) {
  return train_ranker_impl(nullptr, datasets, cfg, hook);
}

// ---- regression ------------------------------------------------------------------------------

void RegressorConfig::validate() const {
  require(epochs >= 1 && batch_size >= 1 && width >= 1, ErrorKind::configuration,
          "regressor needs positive epochs, batch_size and width");
  require(learning_rate >= 0.0, ErrorKind::configuration, "learning_rate must be >= 0");
}

std::vector<PerfSample> perf_samples(const std::vector<RankTriplet>& triplets) {
  std::vector<PerfSample> out;
  out.reserve(2 * triplets.size());
  for (const auto& t : triplets) {
    out.push_back({t.patch, t.theta1, t.perf1});
    out.push_back({t.patch, t.theta2, t.perf2});
  }
  return out;
}

namespace {

Matrix design_rows(const std::vector<PerfSample>& samples,
                   std::unordered_map<const LabeledDataset*, Vector>& metas, const Standardizer& s) {
  const Index meta_dim = s.mean.size();
  Matrix x(static_cast<Index>(samples.size()), meta_dim + kThetaDim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    x.row(static_cast<Index>(i)) << s.apply(metas.at(samples[i].patch.get())).transpose(),
        samples[i].theta.encode().transpose();
  }
  return x;
}

}  // namespace

RegressorResult train_regressor(const MetaExtractor& extractor, const std::vector<PerfSample>& train,
                                const std::vector<PerfSample>& test, const RegressorConfig& cfg) {
  cfg.validate();
  require(!train.empty() && !test.empty(), ErrorKind::contract, "regressor needs train and test samples");

  std::unordered_map<const LabeledDataset*, Vector> metas;
  std::vector<const LabeledDataset*> train_patches;
  for (const auto* set : {&train, &test}) {
    for (const auto& s : *set) {
      if (metas.count(s.patch.get())) continue;
      metas.emplace(s.patch.get(), extractor.extract(*s.patch));
      if (set == &train) train_patches.push_back(s.patch.get());
    }
  }
  const Index meta_dim = metas.begin()->second.size();
  Matrix fit_rows(static_cast<Index>(train_patches.size()), meta_dim);
  for (std::size_t i = 0; i < train_patches.size(); ++i) {
    fit_rows.row(static_cast<Index>(i)) = metas.at(train_patches[i]).transpose();
  }
  const Standardizer standardizer = Standardizer::fit(fit_rows);
  const Matrix x_train = design_rows(train, metas, standardizer);
  const Matrix x_test = design_rows(test, metas, standardizer);
  Vector y_train(x_train.rows()), y_test(x_test.rows());
  for (std::size_t i = 0; i < train.size(); ++i) y_train[static_cast<Index>(i)] = train[i].perf;
  for (std::size_t i = 0; i < test.size(); ++i) y_test[static_cast<Index>(i)] = test[i].perf;

  Rng rng(cfg.seed);
  const Index in = x_train.cols();
  net::DenseLayer l1{Tensor::matrix(net::glorot_uniform(cfg.width, in, rng), true),
                     Tensor::vector(Vector::Zero(cfg.width), true), ad::Activation::relu};
  // starts as the training-mean predictor
  const double m = std::clamp(y_train.mean(), 1e-3, 1.0 - 1e-3);
  net::DenseLayer l2{Tensor::matrix(Matrix::Zero(1, cfg.width), true),
                     Tensor::vector(Vector::Constant(1, std::log(m / (1.0 - m))), true), ad::Activation::sigmoid};
  std::vector<Tensor> params{l1.W, l1.b, l2.W, l2.b};
  auto adam = ad::make_adam_state(params, cfg.learning_rate);

  auto predict = [&](const Matrix& x) {
    const Matrix h = ad::activate(ad::Activation::relu,
                                  ((x * l1.W.value().transpose()).rowwise() + l1.b.value().col(0).transpose()).array())
                         .matrix();
    const Vector z = (h * l2.W.value().transpose()).col(0).array() + l2.b.value()(0, 0);
    return Vector(ad::activate(ad::Activation::sigmoid, z.array()).matrix());
  };

  std::vector<int> order(static_cast<std::size_t>(x_train.rows()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto b = static_cast<Index>(end - start);
      Matrix xb(b, in);
      Matrix yb(b, 1);
      for (Index i = 0; i < b; ++i) {
        xb.row(i) = x_train.row(order[start + static_cast<std::size_t>(i)]);
        yb(i, 0) = y_train[order[start + static_cast<std::size_t>(i)]];
      }
      ad::zero_grads(params);
      Tape tape;
      const Tensor pred = net::dense_forward(tape, l2, net::dense_forward(tape, l1, Tensor::matrix(xb)));
      const Tensor diff = ad::sub(tape, pred, Tensor::matrix(yb));
      const Tensor loss = ad::reduce(tape, ad::Reduction::mean, ad::mul(tape, diff, diff), ad::Axis::all);
      tape.backward(loss);
      ad::adam_step(params, adam);
    }
  }

  RegressorResult out;
  out.extractor = extractor.name;
  const Vector p_train = predict(x_train);
  const Vector p_test = predict(x_test);
  out.train_mse = (p_train - y_train).squaredNorm() / static_cast<double>(y_train.size());
  out.test_mse = (p_test - y_test).squaredNorm() / static_cast<double>(y_test.size());
  out.baseline_mse = (y_test.array() - y_train.mean()).square().mean();
  for (Index i = 0; i < y_test.size(); ++i) out.scatter.push_back({y_test[i], p_test[i]});
  return out;
}

std::string scatter_csv(const std::vector<RegressorResult>& results) {
  std::ostringstream os;
  os.precision(17);
  os << "true_perf,pred_perf,extractor_name\n";
  for (const auto& r : results) {
    for (const auto& p : r.scatter) os << p.true_perf << ',' << p.pred_perf << ',' << r.extractor << '\n';
  }
  return os.str();
}

}  // namespace dida::tasks
