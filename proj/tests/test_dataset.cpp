#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dida/dataset.hpp"
#include "dida/random.hpp"

using namespace dida;

namespace {

LabeledDataset random_dataset(int n, int dx, int classes, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, dx);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i % classes;
  return make_dataset("rand", x, y, classes);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dida_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(LabeledDataset, ValidationCatchesBadLabels) {
  EXPECT_THROW(make_dataset("a", Matrix::Zero(2, 1), {0, 2}, 2), Error);
  EXPECT_THROW(make_dataset("a", Matrix::Zero(2, 1), {0, 1}, 1), Error);
  EXPECT_THROW(make_dataset("a", Matrix::Zero(2, 1), {0}, 2), Error);
}

TEST(ApplyPermutation, IdentityLeavesDataset) {
  auto z = random_dataset(10, 4, 3, 1);
  EXPECT_EQ(apply_permutation(z, PermutationPair::identity(4, 3)), z);
}

TEST(ApplyPermutation, ExplicitSwap) {
  Matrix x(2, 2);
  x << 1, 2, 3, 4;
  auto z = make_dataset("s", x, {0, 1}, 2);
  PermutationPair sigma{{1, 0}, {0, 1}};
  auto out = apply_permutation(z, sigma);
  Matrix expected(2, 2);
  expected << 2, 1, 4, 3;
  EXPECT_EQ(out.features, expected);
}

TEST(ApplyPermutation, ColumnIsInverseImage) {
  auto z = random_dataset(6, 5, 3, 2);
  auto sigma = PermutationPair::random(5, 3, 9);
  auto inv = sigma.inverse();
  auto out = apply_permutation(z, sigma);
  for (int k = 0; k < 5; ++k) EXPECT_EQ(out.features.col(k), z.features.col(inv.features[static_cast<std::size_t>(k)]));
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(out.labels[static_cast<std::size_t>(i)], sigma.labels[static_cast<std::size_t>(z.labels[static_cast<std::size_t>(i)])]);
  }
}

TEST(ApplyPermutation, InverseRestoresBitExact) {
  auto z = random_dataset(12, 6, 4, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto sigma = PermutationPair::random(6, 4, s);
    EXPECT_EQ(apply_permutation(apply_permutation(z, sigma), sigma.inverse()), z);
  }
}

TEST(ApplyPermutation, Composes) {
  auto z = random_dataset(9, 5, 3, 4);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto s1 = PermutationPair::random(5, 3, s);
    auto s2 = PermutationPair::random(5, 3, s + 100);
    EXPECT_EQ(apply_permutation(apply_permutation(z, s1), s2), apply_permutation(z, compose(s2, s1)));
  }
}

TEST(ApplyPermutation, SizeMismatchIsContractError) {
  auto z = random_dataset(4, 3, 2, 5);
  try {
    apply_permutation(z, PermutationPair::identity(4, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(SamplePatch, FullSizeIsPermutedCopy) {
  auto z = random_dataset(20, 4, 2, 6);
  auto [patch, spec] = sample_patch(z, 20, 4, 7);
  EXPECT_EQ(patch.n(), 20);
  EXPECT_EQ(patch.dx(), 4);
  EXPECT_EQ(patch.id, z.id);
  std::set<int> rows(spec.rows.begin(), spec.rows.end());
  EXPECT_EQ(rows.size(), 20u);
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    for (std::size_t k = 0; k < spec.features.size(); ++k) {
      EXPECT_EQ(patch.features(static_cast<Index>(i), static_cast<Index>(k)), z.features(spec.rows[i], spec.features[k]));
    }
  }
}

TEST(SamplePatch, Deterministic) {
  auto z = random_dataset(50, 6, 3, 8);
  auto a = sample_patch(z, 10, 3, 99).first;
  auto b = sample_patch(z, 10, 3, 99).first;
  EXPECT_EQ(a, b);
}

TEST(SamplePatch, RowInclusionIsUniform) {
  auto z = random_dataset(100, 2, 2, 9);
  std::vector<int> counts(100, 0);
  const int draws = 1000;
  for (int s = 0; s < draws; ++s) {
    auto spec = sample_patch(z, 10, 1, child_seed(1, static_cast<std::uint64_t>(s))).second;
    for (int r : spec.rows) ++counts[static_cast<std::size_t>(r)];
  }
  const double p = 0.1;
  const double mean = draws * p;
  const double sd = std::sqrt(draws * p * (1 - p));
  for (int c : counts) {
    EXPECT_GE(c, mean - 3.5 * sd);
    EXPECT_LE(c, mean + 3.5 * sd);
  }
}

TEST(SamplePatch, LabelsReindexedDensely) {
  Matrix x = Matrix::Zero(6, 1);
  auto z = make_dataset("r", x, {0, 3, 3, 5, 0, 5}, 6);
  PatchSpec spec{{1, 3, 2}, {0}, "r"};
  auto patch = extract_patch(z, spec);
  EXPECT_EQ(patch.labels, (std::vector<int>{0, 1, 0}));
  EXPECT_EQ(patch.num_classes, 2);
  PatchSpec single{{1, 2}, {0}, "r"};
  auto one = extract_patch(z, single);
  EXPECT_EQ(one.labels, (std::vector<int>{0, 0}));
  EXPECT_EQ(one.num_classes, 2);
}

TEST(SamplePatch, AlwaysValid) {
  auto z = random_dataset(40, 7, 5, 10);
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto patch = sample_patch(z, 1 + static_cast<int>(s % 40), 1 + static_cast<int>(s % 7), s).first;
    EXPECT_NO_THROW(patch.validate());
  }
}

TEST(SamplePatch, OversizedRequestIsDomainError) {
  auto z = random_dataset(10, 3, 2, 11);
  try {
    sample_patch(z, 11, 2, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
  }
  EXPECT_THROW(sample_patch(z, 5, 4, 0), Error);
}

TEST(GenerateToy, GaussianMixtureBalanced) {
  ToyGenConfig cfg;
  cfg.kind = ToyKind::gaussian_mixture;
  cfg.classes = 2;
  cfg.n = 100;
  cfg.seed = 3;
  auto z = generate_toy(cfg);
  EXPECT_EQ(z.dx(), 2);
  auto counts = class_counts(z);
  EXPECT_EQ(counts[0], 50);
  EXPECT_EQ(counts[1], 50);
}

TEST(GenerateToy, CountsDifferByAtMostOne) {
  for (auto kind : {ToyKind::gaussian_mixture, ToyKind::moons, ToyKind::rings}) {
    for (int classes = 2; classes <= 7; ++classes) {
      ToyGenConfig cfg;
      cfg.kind = kind;
      cfg.classes = classes;
      cfg.n = 101;
      cfg.seed = static_cast<std::uint64_t>(classes);
      auto counts = class_counts(generate_toy(cfg));
      auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      EXPECT_LE(*hi - *lo, 1);
    }
  }
}

TEST(GenerateToy, RingRadiiIncrease) {
  ToyGenConfig cfg;
  cfg.kind = ToyKind::rings;
  cfg.classes = 3;
  cfg.n = 600;
  cfg.seed = 4;
  auto z = generate_toy(cfg);
  std::vector<double> sum(3, 0.0);
  std::vector<int> count(3, 0);
  for (Index i = 0; i < z.n(); ++i) {
    const int c = z.labels[static_cast<std::size_t>(i)];
    sum[static_cast<std::size_t>(c)] += z.features.row(i).norm();
    ++count[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];
    EXPECT_NEAR(mean, ring_radius(c, 3), 0.05);
    if (c > 0) {
      EXPECT_GT(mean, sum[static_cast<std::size_t>(c - 1)] / count[static_cast<std::size_t>(c - 1)]);
    }
  }
}

TEST(GenerateToy, SameSeedBitIdentical) {
  ToyGenConfig cfg;
  cfg.kind = ToyKind::moons;
  cfg.classes = 5;
  cfg.seed = 77;
  EXPECT_EQ(generate_toy(cfg), generate_toy(cfg));
  ToyGenConfig other = cfg;
  other.seed = 78;
  EXPECT_FALSE(generate_toy(cfg) == generate_toy(other));
}

TEST(GenerateToy, InvalidConfig) {
  ToyGenConfig cfg;
  cfg.classes = 8;
  EXPECT_THROW(generate_toy(cfg), Error);
  cfg.classes = 2;
  cfg.n = 0;
  EXPECT_THROW(generate_toy(cfg), Error);
  EXPECT_THROW(parse_toy_kind("spirals"), Error);
}

TEST(NormalizeFeatures, MinMax) {
  Matrix x(3, 2);
  x << 0, 7, 5, 7, 10, 7;
  auto z = normalize_features(make_dataset("n", x, {0, 1, 0}, 2));
  EXPECT_EQ(z.features.col(0), (Vector{{0.0, 0.5, 1.0}}));
  EXPECT_EQ(z.features.col(1), Vector::Constant(3, 0.5));
}

TEST(NormalizeFeatures, UnitRangeUnchanged) {
  auto z = random_dataset(30, 3, 2, 12);
  for (Index k = 0; k < 3; ++k) {
    z.features(0, k) = 0.0;
    z.features(1, k) = 1.0;
  }
  auto out = normalize_features(z);
  for (Index i = 0; i < z.features.size(); ++i) EXPECT_NEAR(out.features.data()[i], z.features.data()[i], 1e-15);
}

TEST(NormalizeFeatures, NonFiniteIsNumericError) {
  LabeledDataset z{"bad", Matrix::Zero(2, 1), {0, 1}, 2};
  z.features(0, 0) = INFINITY;
  try {
    normalize_features(z);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(Csv, LoadsNumericColumns) {
  auto dir = temp_dir("csv_basic");
  std::ofstream(dir / "a.csv") << "f1,f2,class\n1.5,2,cat\n3,4,dog\n5,6,cat\n7,8,bird\n";
  auto result = load_csv(dir / "a.csv", "class");
  EXPECT_EQ(result.dataset.n(), 4);
  EXPECT_EQ(result.dataset.dx(), 2);
  EXPECT_EQ(result.dataset.num_classes, 3);
  EXPECT_EQ(result.dataset.labels, (std::vector<int>{1, 2, 1, 0}));
  EXPECT_EQ(result.dropped_rows, 0u);
}

TEST(Csv, DropsMissingRows) {
  auto dir = temp_dir("csv_missing");
  std::ofstream(dir / "m.csv") << "a,b,y\n1,2,0\n3,,1\n5,6,1\n7,8,0\n";
  auto result = load_csv(dir / "m.csv", "y");
  EXPECT_EQ(result.dataset.n(), 3);
  EXPECT_EQ(result.dropped_rows, 1u);
}

TEST(Csv, IgnoresTextColumnsAndQuotes) {
  auto dir = temp_dir("csv_text");
  std::ofstream(dir / "t.csv") << "name,x,y\n\"a, b\",1,2\nc,3,10\n";
  auto result = load_csv(dir / "t.csv", "y");
  EXPECT_EQ(result.dataset.dx(), 1);
  EXPECT_EQ(result.ignored_columns, (std::vector<std::string>{"name"}));
  EXPECT_EQ(result.dataset.labels, (std::vector<int>{0, 1}));
}

TEST(Csv, IngestionErrors) {
  auto dir = temp_dir("csv_errors");
  std::ofstream(dir / "nonum.csv") << "a,y\nx,0\nz,1\n";
  std::ofstream(dir / "empty.csv") << "a,y\n,0\nNA,1\n";
  for (const char* name : {"nonum.csv", "empty.csv", "missing.csv"}) {
    try {
      load_csv(dir / name, "y");
      FAIL() << name;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::ingestion) << name;
    }
  }
}

TEST(Csv, RoundTrip) {
  auto dir = temp_dir("csv_roundtrip");
  auto z = random_dataset(25, 4, 3, 13);
  z.features(3, 2) = 1.0 / 3.0;
  z.features(4, 1) = -1e-300;
  write_csv(dir / "rt.csv", z);
  auto back = load_csv(dir / "rt.csv", "label").dataset;
  EXPECT_EQ(back.features, z.features);
  EXPECT_EQ(back.labels, z.labels);
  EXPECT_EQ(back.num_classes, z.num_classes);
}

TEST(Manifest, RoundTripAndLoad) {
  auto dir = temp_dir("manifest");
  auto z = random_dataset(10, 2, 2, 14);
  write_csv(dir / "data" / "d0.csv", z);
  write_manifest(dir / "manifest.json", {{"d0", "data/d0.csv", "label"}});
  auto entries = read_manifest(dir / "manifest.json");
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].path, "data/d0.csv");
  auto loaded = load_manifest_datasets(dir / "manifest.json");
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].id, "d0");
  EXPECT_GE(loaded[0].features.minCoeff(), 0.0);
  EXPECT_LE(loaded[0].features.maxCoeff(), 1.0);
}
