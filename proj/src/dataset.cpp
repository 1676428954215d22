#include "dida/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dida/io.hpp"
#include "dida/log.hpp"
#include "dida/random.hpp"

namespace dida {
namespace {

bool is_permutation_of_range(const std::vector<int>& p) {
  std::vector<char> seen(p.size(), 0);
  for (int v : p) {
    if (v < 0 || static_cast<std::size_t>(v) >= p.size() || seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = 1;
  }
  return true;
}

std::vector<int> invert(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<int>(i);
  return inv;
}

/// Dense re-index of the labels in `rows`, ordered by original class id.
std::pair<std::vector<int>, int> reindex_labels(const std::vector<int>& labels) {
  std::set<int> present(labels.begin(), labels.end());
  std::map<int, int> remap;
  int next = 0;
  for (int c : present) remap[c] = next++;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int y : labels) out.push_back(remap[y]);
  return {std::move(out), std::max(2, next)};
}

}  // namespace

// ---- LabeledDataset ---------------------------------------------------------------

void LabeledDataset::validate() const {
  require(n() >= 1, ErrorKind::contract, "dataset '" + id + "' has no rows");
  require(dx() >= 1, ErrorKind::contract, "dataset '" + id + "' has no features");
  require(num_classes >= 2, ErrorKind::contract, "dataset '" + id + "' needs at least 2 classes");
  require(static_cast<Index>(labels.size()) == n(), ErrorKind::contract,
          "dataset '" + id + "': label count differs from row count");
  for (int y : labels) {
    require(y >= 0 && y < num_classes, ErrorKind::contract, "dataset '" + id + "': label out of range");
  }
  require(features.allFinite(), ErrorKind::numeric, "dataset '" + id + "' has non-finite features");
}

bool LabeledDataset::operator==(const LabeledDataset& other) const {
  return id == other.id && num_classes == other.num_classes && labels == other.labels &&
         features.rows() == other.features.rows() && features.cols() == other.features.cols() &&
         features == other.features;
}

LabeledDataset make_dataset(std::string id, Matrix features, std::vector<int> labels, int num_classes) {
  LabeledDataset z{std::move(id), std::move(features), std::move(labels), num_classes};
  z.validate();
  return z;
}

std::vector<Index> class_counts(const LabeledDataset& z) {
  std::vector<Index> counts(static_cast<std::size_t>(z.num_classes), 0);
  for (int y : z.labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

// ---- permutations --------------------------------------------------------------------

PermutationPair PermutationPair::identity(int dx, int classes) {
  PermutationPair p;
  p.features.resize(static_cast<std::size_t>(dx));
  p.labels.resize(static_cast<std::size_t>(classes));
  std::iota(p.features.begin(), p.features.end(), 0);
  std::iota(p.labels.begin(), p.labels.end(), 0);
  return p;
}

PermutationPair PermutationPair::random(int dx, int classes, std::uint64_t seed) {
  Rng rng(seed);
  PermutationPair p;
  p.features = rng.permutation(dx);
  p.labels = rng.permutation(classes);
  return p;
}

PermutationPair PermutationPair::inverse() const { return {invert(features), invert(labels)}; }

void PermutationPair::validate() const {
  require(is_permutation_of_range(features), ErrorKind::contract, "sigma_X is not a bijection");
  require(is_permutation_of_range(labels), ErrorKind::contract, "sigma_Y is not a bijection");
}

PermutationPair compose(const PermutationPair& outer, const PermutationPair& inner) {
  require(outer.features.size() == inner.features.size() && outer.labels.size() == inner.labels.size(),
          ErrorKind::contract, "compose: permutation sizes differ");
  PermutationPair out;
  out.features.resize(inner.features.size());
  out.labels.resize(inner.labels.size());
  for (std::size_t k = 0; k < inner.features.size(); ++k) {
    out.features[k] = outer.features[static_cast<std::size_t>(inner.features[k])];
  }
  for (std::size_t c = 0; c < inner.labels.size(); ++c) {
    out.labels[c] = outer.labels[static_cast<std::size_t>(inner.labels[c])];
  }
  return out;
}

LabeledDataset apply_permutation(const LabeledDataset& z, const PermutationPair& sigma) {
  sigma.validate();
  if (static_cast<Index>(sigma.features.size()) != z.dx() ||
      static_cast<int>(sigma.labels.size()) != z.num_classes) {
    fail(ErrorKind::contract, "apply_permutation: sigma acts on " + std::to_string(sigma.features.size()) +
                                  " features / " + std::to_string(sigma.labels.size()) + " classes, dataset has " +
                                  std::to_string(z.dx()) + " / " + std::to_string(z.num_classes));
  }
  LabeledDataset out = z;
  for (Index k = 0; k < z.dx(); ++k) {
    out.features.col(sigma.features[static_cast<std::size_t>(k)]) = z.features.col(k);
  }
  for (auto& y : out.labels) y = sigma.labels[static_cast<std::size_t>(y)];
  return out;
}

// ---- patches -------------------------------------------------------------------------

LabeledDataset extract_patch(const LabeledDataset& z, const PatchSpec& spec) {
  require(!spec.rows.empty() && !spec.features.empty(), ErrorKind::domain, "empty patch");
  Matrix features(static_cast<Index>(spec.rows.size()), static_cast<Index>(spec.features.size()));
  std::vector<int> raw_labels;
  raw_labels.reserve(spec.rows.size());
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    const int r = spec.rows[i];
    require(r >= 0 && r < z.n(), ErrorKind::domain, "patch row index out of range");
    for (std::size_t k = 0; k < spec.features.size(); ++k) {
      const int c = spec.features[k];
      require(c >= 0 && c < z.dx(), ErrorKind::domain, "patch feature index out of range");
      features(static_cast<Index>(i), static_cast<Index>(k)) = z.features(r, c);
    }
    raw_labels.push_back(z.labels[static_cast<std::size_t>(r)]);
  }
  auto [labels, classes] = reindex_labels(raw_labels);
  return make_dataset(spec.source_id, std::move(features), std::move(labels), classes);
}

std::pair<LabeledDataset, PatchSpec> sample_patch(const LabeledDataset& z, int n_rows, int n_features,
                                                  std::uint64_t seed) {
  if (n_rows < 1 || n_rows > z.n() || n_features < 1 || n_features > z.dx()) {
    fail(ErrorKind::domain, "patch of " + std::to_string(n_rows) + "x" + std::to_string(n_features) +
                                " requested from dataset '" + z.id + "' of " + std::to_string(z.n()) + "x" +
                                std::to_string(z.dx()));
  }
  Rng rng(seed);
  PatchSpec spec;
  spec.rows = rng.sample_without_replacement(static_cast<int>(z.n()), n_rows);
  spec.features = rng.sample_without_replacement(static_cast<int>(z.dx()), n_features);
  spec.source_id = z.id;
  LabeledDataset patch = extract_patch(z, spec);
  return {std::move(patch), std::move(spec)};
}

// ---- generators --------------------------------------------------------------------------

ToyKind parse_toy_kind(const std::string& name) {
  if (name == "gaussian_mixture") return ToyKind::gaussian_mixture;
  if (name == "moons") return ToyKind::moons;
  if (name == "rings") return ToyKind::rings;
  fail(ErrorKind::configuration, "unknown toy kind '" + name + "'");
}

std::string to_string(ToyKind kind) {
  switch (kind) {
    case ToyKind::gaussian_mixture: return "gaussian_mixture";
    case ToyKind::moons: return "moons";
    case ToyKind::rings: return "rings";
  }
  return "?";
}

void ToyGenConfig::validate() const {
  require(n > 0, ErrorKind::configuration, "toy generator needs n > 0");
  require(classes >= 2 && classes <= 7, ErrorKind::configuration, "toy generator classes must lie in [2, 7]");
  require(dims >= 2, ErrorKind::configuration, "toy generator needs dims >= 2");
  require(noise >= 0.0 && std::isfinite(noise), ErrorKind::configuration, "toy noise must be finite and >= 0");
  require(label_noise >= 0.0 && label_noise <= 1.0, ErrorKind::configuration, "label_noise must lie in [0, 1]");
  require(std::isfinite(rotation), ErrorKind::configuration, "toy rotation must be finite");
  require(stretch > 0.0 && std::isfinite(stretch), ErrorKind::configuration, "toy stretch must be positive");
}

double ring_radius(int c, int classes) { return static_cast<double>(c + 1) / static_cast<double>(classes); }

LabeledDataset generate_toy(const ToyGenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int C = cfg.classes;
  const int d = cfg.dims;

  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(cfg.n));
  for (int c = 0; c < C; ++c) {
    const int count = cfg.n / C + (c < cfg.n % C ? 1 : 0);
    labels.insert(labels.end(), static_cast<std::size_t>(count), c);
  }

  Matrix features(cfg.n, d);
  switch (cfg.kind) {
    case ToyKind::gaussian_mixture: {
      Matrix centers(C, d);
      for (Index i = 0; i < centers.size(); ++i) centers.data()[i] = rng.uniform();
      for (int i = 0; i < cfg.n; ++i) {
        const int c = labels[static_cast<std::size_t>(i)];
        for (int k = 0; k < d; ++k) features(i, k) = centers(c, k) + cfg.noise * rng.normal();
      }
      break;
    }
    case ToyKind::moons: {
      // Pairs of interleaved half-circles; pair g is rotated by pi * g / G.
      const int groups = (C + 1) / 2;
      for (int i = 0; i < cfg.n; ++i) {
        const int c = labels[static_cast<std::size_t>(i)];
        const double t = rng.uniform(0.0, M_PI);
        double x = 0.0;
        double y = 0.0;
        if (c % 2 == 0) {
          x = std::cos(t);
          y = std::sin(t);
        } else {
          x = 1.0 - std::cos(t);
          y = 0.5 - std::sin(t);
        }
        const double angle = M_PI * static_cast<double>(c / 2) / static_cast<double>(groups);
        x -= 0.5;
        y -= 0.25;
        features(i, 0) = std::cos(angle) * x - std::sin(angle) * y + cfg.noise * rng.normal();
        features(i, 1) = std::sin(angle) * x + std::cos(angle) * y + cfg.noise * rng.normal();
        for (int k = 2; k < d; ++k) features(i, k) = cfg.noise * rng.normal();
      }
      break;
    }
    case ToyKind::rings: {
      Vector direction(d);
      for (int i = 0; i < cfg.n; ++i) {
        const int c = labels[static_cast<std::size_t>(i)];
        double norm = 0.0;
        do {
          for (int k = 0; k < d; ++k) direction[k] = rng.normal();
          norm = direction.norm();
        } while (norm < 1e-12);
        const double radius = ring_radius(c, C) + cfg.noise * rng.normal();
        features.row(i) = (direction * (radius / norm)).transpose();
      }
      break;
    }
  }

  if (cfg.rotation != 0.0 || cfg.stretch != 1.0) {
    const double c = std::cos(cfg.rotation);
    const double s = std::sin(cfg.rotation);
    for (int i = 0; i < cfg.n; ++i) {
      const double x = cfg.stretch * features(i, 0);
      const double y = features(i, 1);
      features(i, 0) = c * x - s * y;
      features(i, 1) = s * x + c * y;
    }
  }

  if (cfg.label_noise > 0.0) {
    for (auto& y : labels) {
      if (rng.bernoulli(cfg.label_noise)) {
        const int shift = static_cast<int>(rng.uniform_int(1, C - 1));
        y = (y + shift) % C;
      }
    }
  }

  // Interleave classes so row order carries no label information.
  const std::vector<int> order = rng.permutation(cfg.n);
  Matrix shuffled(cfg.n, d);
  std::vector<int> shuffled_labels(static_cast<std::size_t>(cfg.n));
  for (int i = 0; i < cfg.n; ++i) {
    shuffled.row(i) = features.row(order[static_cast<std::size_t>(i)]);
    shuffled_labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }

  std::string id = cfg.id;
  if (id.empty()) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(cfg.seed));
    id = to_string(cfg.kind) + "-" + buffer;
  }
  return make_dataset(std::move(id), std::move(shuffled), std::move(shuffled_labels), C);
}

void ToyBenchmarkConfig::validate() const {
  require(count >= 1, ErrorKind::configuration, "toy benchmark count must be >= 1");
  require(n_min >= 1 && n_min <= n_max, ErrorKind::configuration, "toy benchmark needs 1 <= n_min <= n_max");
  require(min_classes >= 2 && min_classes <= max_classes && max_classes <= 7, ErrorKind::configuration,
          "toy benchmark classes must satisfy 2 <= min_classes <= max_classes <= 7");
  require(dims_min >= 2 && dims_min <= dims_max, ErrorKind::configuration, "toy benchmark needs 2 <= dims_min <= dims_max");
  require(noise_min >= 0.0 && noise_min <= noise_max, ErrorKind::configuration, "toy benchmark noise range invalid");
  require(label_noise_max >= 0.0 && label_noise_max <= 1.0, ErrorKind::configuration,
          "toy benchmark label_noise_max must lie in [0, 1]");
  require(max_stretch >= 1.0, ErrorKind::configuration, "toy benchmark max_stretch must be >= 1");
}

std::vector<ToyGenConfig> toy_benchmark_configs(const ToyBenchmarkConfig& cfg) {
  cfg.validate();
  std::vector<ToyGenConfig> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(child_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    ToyGenConfig g;
    g.kind = static_cast<ToyKind>(rng.uniform_int(0, 2));
    g.n = static_cast<int>(rng.uniform_int(cfg.n_min, cfg.n_max));
    g.classes = static_cast<int>(rng.uniform_int(cfg.min_classes, cfg.max_classes));
    g.dims = static_cast<int>(rng.uniform_int(cfg.dims_min, cfg.dims_max));
    g.noise = rng.uniform(cfg.noise_min, cfg.noise_max);
    g.label_noise = cfg.label_noise_max > 0.0 ? rng.uniform(0.0, cfg.label_noise_max) : 0.0;
    if (cfg.vary_geometry) {
      g.rotation = rng.uniform(0.0, M_PI);
      g.stretch = rng.uniform(1.0, cfg.max_stretch);
    }
    g.seed = rng.next_u64();
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "toy-%05d", i);
    g.id = buffer;
    out.push_back(g);
  }
  return out;
}

std::vector<LabeledDataset> generate_toy_benchmark(const ToyBenchmarkConfig& cfg) {
  std::vector<LabeledDataset> out;
  for (const auto& g : toy_benchmark_configs(cfg)) out.push_back(normalize_features(generate_toy(g)));
  return out;
}

LabeledDataset normalize_features(const LabeledDataset& z) {
  require(z.n() >= 1, ErrorKind::contract, "normalize_features on an empty dataset");
  require(z.features.allFinite(), ErrorKind::numeric, "normalize_features: non-finite input");
  LabeledDataset out = z;
  for (Index k = 0; k < z.dx(); ++k) {
    const double lo = z.features.col(k).minCoeff();
    const double hi = z.features.col(k).maxCoeff();
    if (hi > lo) {
      out.features.col(k) = ((z.features.col(k).array() - lo) / (hi - lo)).matrix();
    } else {
      out.features.col(k).setConstant(0.5);
    }
  }
  return out;
}

// ---- CSV ------------------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  cells.push_back(cell);
  return cells;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == "?" || cell == "null";
}

bool parse_double(const std::string& cell, double& out) {
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace

CsvLoadResult load_csv(const std::filesystem::path& path, const std::string& label_column) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error&) {
    fail(ErrorKind::ingestion, "unreadable file " + path.string());
  }
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::ingestion, path.string() + ": missing header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    fail(ErrorKind::ingestion, path.string() + ": no label column '" + label_column + "'");
  }
  const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty() || trim(line) == "\r") continue;
    auto cells = split_csv_line(line);
    for (auto& c : cells) c = trim(c);
    if (cells.size() != header.size()) {
      fail(ErrorKind::ingestion, path.string() + ": row " + std::to_string(rows.size() + 2) + " has " +
                                     std::to_string(cells.size()) + " cells, header has " +
                                     std::to_string(header.size()));
    }
    rows.push_back(std::move(cells));
  }

  // A column is numeric when every non-missing cell parses as a finite double.
  std::vector<std::size_t> feature_cols;
  CsvLoadResult result;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_idx) continue;
    bool numeric = true;
    bool any_value = false;
    for (const auto& r : rows) {
      if (is_missing(r[c])) continue;
      double v;
      any_value = true;
      if (!parse_double(r[c], v)) {
        numeric = false;
        break;
      }
    }
    if (numeric && any_value) {
      feature_cols.push_back(c);
      result.feature_names.push_back(header[c]);
    } else {
      result.ignored_columns.push_back(header[c]);
    }
  }
  if (feature_cols.empty()) fail(ErrorKind::ingestion, path.string() + ": no numeric feature columns");
  for (const auto& name : result.ignored_columns) {
    log::warn(path.string(), ": ignoring non-numeric column '", name, "'");
  }

  std::vector<std::vector<double>> kept_values;
  std::vector<std::string> kept_labels;
  for (const auto& r : rows) {
    bool missing = is_missing(r[label_idx]);
    std::vector<double> values;
    values.reserve(feature_cols.size());
    for (std::size_t c : feature_cols) {
      double v = 0.0;
      if (is_missing(r[c]) || !parse_double(r[c], v)) {
        missing = true;
        break;
      }
      values.push_back(v);
    }
    if (missing) {
      ++result.dropped_rows;
      continue;
    }
    kept_values.push_back(std::move(values));
    kept_labels.push_back(r[label_idx]);
  }
  if (result.dropped_rows > 0) {
    log::warn(path.string(), ": dropped ", result.dropped_rows, " row(s) with missing values");
  }
  if (kept_values.empty()) fail(ErrorKind::ingestion, path.string() + ": no rows left after dropping missing values");

  // Labels are ordered numerically when they all parse as numbers.
  std::vector<std::string> distinct(kept_labels.begin(), kept_labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  bool numeric_labels = true;
  for (const auto& l : distinct) {
    double v;
    if (!parse_double(l, v)) numeric_labels = false;
  }
  if (numeric_labels) {
    std::stable_sort(distinct.begin(), distinct.end(), [](const std::string& a, const std::string& b) {
      double va = 0.0, vb = 0.0;
      parse_double(a, va);
      parse_double(b, vb);
      return va < vb;
    });
  }
  std::map<std::string, int> label_index;
  for (std::size_t i = 0; i < distinct.size(); ++i) label_index[distinct[i]] = static_cast<int>(i);

  Matrix features(static_cast<Index>(kept_values.size()), static_cast<Index>(feature_cols.size()));
  std::vector<int> labels;
  labels.reserve(kept_labels.size());
  for (std::size_t i = 0; i < kept_values.size(); ++i) {
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      features(static_cast<Index>(i), static_cast<Index>(k)) = kept_values[i][k];
    }
    labels.push_back(label_index[kept_labels[i]]);
  }
  const int classes = std::max(2, static_cast<int>(distinct.size()));
  result.dataset = make_dataset(path.stem().string(), std::move(features), std::move(labels), classes);
  return result;
}

std::string to_csv(const LabeledDataset& z) {
  std::string out;
  for (Index k = 0; k < z.dx(); ++k) out += "x" + std::to_string(k) + ",";
  out += "label\n";
  char buffer[40];
  for (Index i = 0; i < z.n(); ++i) {
    for (Index k = 0; k < z.dx(); ++k) {
      std::snprintf(buffer, sizeof buffer, "%.17g,", z.features(i, k));
      out += buffer;
    }
    out += std::to_string(z.labels[static_cast<std::size_t>(i)]);
    out += '\n';
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const LabeledDataset& z) { io::atomic_write(path, to_csv(z)); }

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const io::Json doc = io::read_json(path);
  if (!doc.is_array()) fail(ErrorKind::format, path.string() + ": manifest must be a JSON array");
  std::vector<ManifestEntry> entries;
  for (const auto& item : doc) {
    if (!item.is_object() || !item.contains("id") || !item.contains("path") || !item.contains("label_column")) {
      fail(ErrorKind::format, path.string() + ": manifest entries need id, path and label_column");
    }
    entries.push_back({item.at("id").get<std::string>(), item.at("path").get<std::string>(),
                       item.at("label_column").get<std::string>()});
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  io::Json doc = io::Json::array();
  for (const auto& e : entries) doc.push_back({{"id", e.id}, {"path", e.path}, {"label_column", e.label_column}});
  io::write_json(path, doc);
}

std::vector<LabeledDataset> load_manifest_datasets(const std::filesystem::path& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<LabeledDataset> datasets;
  datasets.reserve(entries.size());
  for (const auto& e : entries) {
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = base / p;
    auto loaded = load_csv(p, e.label_column);
    loaded.dataset.id = e.id;
    datasets.push_back(normalize_features(loaded.dataset));
  }
  return datasets;
}

}  // namespace dida
