#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <doctest.h>

#include "raregen/errors.hpp"
#include "raregen/knn_manifold.hpp"
#include "raregen/rng.hpp"
#include "support/knn_oracle.hpp"

using namespace raregen;
using knn::FeatureSet;
using numerics::Tensor;

namespace {

FeatureSet set2d(std::initializer_list<std::pair<double, double>> pts) {
  FeatureSet s(2);
  for (const auto& [a, b] : pts) {
    const double p[2] = {a, b};
    s.push(std::span<const double>(p, 2));
  }
  return s;
}

FeatureSet random_set(numerics::RngStream& rng, std::size_t n, std::size_t dim, double spread) {
  FeatureSet s(dim);
  for (std::size_t i = 0; i < n; ++i) {
    s.push(numerics::scale(rng.normal_tensor({dim}), spread));
  }
  return s;
}

const FeatureSet kFourPoints = set2d({{0, 0}, {1, 0}, {0, 1}, {3, 3}});

}  // namespace

TEST_CASE("knnd nearest and second nearest") {
  const FeatureSet x = set2d({{1, 0}, {0, 2}, {3, 0}});
  const double q[2] = {0.0, 0.0};
  const std::span<const double> query(q, 2);
  CHECK(knn::knnd(query, x, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(knn::knnd(query, x, 2) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(knn::knnd(query, x, 3) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK_THROWS_AS(knn::knnd(query, x, 4), ContractViolation);
}

TEST_CASE("knnd with self-exclusion") {
  const FeatureSet x = set2d({{0, 0}, {1, 0}});
  CHECK(knn::knnd(x.point(0), x, 1, 0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("build_manifold radii on the four-point set") {
  const auto m = knn::build_manifold(kFourPoints, 1);
  CHECK(m.radii()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.radii()[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.radii()[2] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.radii()[3] == doctest::Approx(std::sqrt(13.0)).epsilon(1e-15));
}

TEST_CASE("build_manifold: duplicate points give zero radii") {
  const FeatureSet dup = set2d({{1, 1}, {1, 1}, {4, 4}});
  const auto m = knn::build_manifold(dup, 1);
  CHECK(m.radii()[0] == 0.0);
  CHECK(m.radii()[1] == 0.0);
}

TEST_CASE("build_manifold: k = |X|-1 radius equals farthest other point") {
  numerics::RngStream rng(3);
  const FeatureSet x = random_set(rng, 12, 3, 1.0);
  const auto m = knn::build_manifold(x, x.size() - 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double far = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (j != i) far = std::max(far, numerics::euclidean_distance(x.point(i), x.point(j)));
    }
    CHECK(m.radii()[i] == doctest::Approx(far).epsilon(1e-12));
  }
  CHECK_THROWS_AS(knn::build_manifold(x, x.size()), ContractViolation);
}

TEST_CASE("contains: closed-ball membership") {
  const auto m = knn::build_manifold(kFourPoints, 1);
  const double in[2] = {0.5, 0.0};
  const double out[2] = {10.0, 10.0};
  CHECK(m.contains(std::span<const double>(in, 2)));
  CHECK_FALSE(m.contains(std::span<const double>(out, 2)));
  for (std::size_t i = 0; i < kFourPoints.size(); ++i) {
    CHECK(m.contains(kFourPoints.point(i)));
  }
  const double wrong_dim[3] = {0, 0, 0};
  CHECK_THROWS_AS(m.contains(std::span<const double>(wrong_dim, 3)), ContractViolation);
}

TEST_CASE("rarity score: min containing radius, undefined outside") {
  const auto m = knn::build_manifold(kFourPoints, 1);
  const double q1[2] = {0.5, 0.0};
  const auto r1 = m.rarity_score(std::span<const double>(q1, 2));
  REQUIRE(r1.has_value());
  CHECK(*r1 == doctest::Approx(1.0).epsilon(1e-15));

  const double q2[2] = {10.0, 10.0};
  CHECK_FALSE(m.rarity_score(std::span<const double>(q2, 2)).has_value());

  const double q3[2] = {3.0, 3.0};
  const auto r3 = m.rarity_score(std::span<const double>(q3, 2));
  REQUIRE(r3.has_value());
  CHECK(*r3 == doctest::Approx(std::sqrt(13.0)).epsilon(1e-15));
}

TEST_CASE("precision and recall on constructed cases") {
  const auto m = knn::build_manifold(kFourPoints, 1);
  const FeatureSet mixed = set2d({{0.5, 0.0}, {10.0, 10.0}});
  CHECK(knn::precision(mixed, m) == doctest::Approx(0.5));
  CHECK(knn::precision(kFourPoints, m) == doctest::Approx(1.0));
  const FeatureSet far = set2d({{50, 50}, {60, 60}});
  CHECK(knn::precision(far, m) == doctest::Approx(0.0));
  CHECK_THROWS_AS(knn::precision(FeatureSet(2), m), ContractViolation);

  // recall is the symmetric query against the fake manifold
  const auto fake_manifold = knn::build_manifold(mixed, 1);
  const FeatureSet reals = set2d({{0.5, 0.0}, {10.0, 10.0}, {0.6, 0.1}, {-40, 0}});
  CHECK(knn::recall(reals, fake_manifold) == doctest::Approx(0.75));
  CHECK(knn::recall(mixed, fake_manifold) == doctest::Approx(1.0));
}

TEST_CASE("oracle equivalence on seeded instances") {
  numerics::RngStream seeds(2718);
  for (int inst = 0; inst < 25; ++inst) {
    numerics::RngStream rng(seeds.bits());
    const std::size_t n = 20 + rng.below(180);
    const std::size_t dim = 1 + rng.below(8);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n - 1, 7));
    FeatureSet x = random_set(rng, n, dim, 1.0);
    // Inject duplicates now and then.
    if (inst % 3 == 0 && n > 4) x.push(x.point(0));

    const auto m = knn::build_manifold(x, k);
    const auto oracle = testsupport::oracle_radii(x, k);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(m.radii()[i] == oracle[i]);

    for (int q = 0; q < 25; ++q) {
      const Tensor query = numerics::scale(rng.normal_tensor({dim}), 1.5);
      CHECK(m.contains(query.data()) == testsupport::oracle_contains(x, oracle, query.data()));
      const auto got = m.rarity_score(query.data());
      const auto want = testsupport::oracle_rarity(x, oracle, query.data());
      CHECK(got.has_value() == want.has_value());
      if (got && want) CHECK(*got == *want);
      CHECK(knn::knnd(query.data(), x, k) == testsupport::oracle_knnd(query.data(), x, k));
    }
  }
}

TEST_CASE("radii monotone in k and membership nested") {
  numerics::RngStream rng(4242);
  const FeatureSet x = random_set(rng, 60, 4, 1.0);
  const auto m1 = knn::build_manifold(x, 2);
  const auto m2 = knn::build_manifold(x, 3);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(m1.radii()[i] <= m2.radii()[i]);
  for (int q = 0; q < 200; ++q) {
    const Tensor query = numerics::scale(rng.normal_tensor({4}), 1.5);
    if (m1.contains(query.data())) CHECK(m2.contains(query.data()));
    const auto score = m1.rarity_score(query.data());
    if (score) {
      CHECK(m1.contains(query.data()));
      // the score must be one of the containing balls' radii
      bool matches = false;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (m1.radii()[i] == *score &&
            numerics::euclidean_distance(query.data(), x.point(i)) <= m1.radii()[i]) {
          matches = true;
        }
      }
      CHECK(matches);
    }
  }
}

TEST_CASE("translation invariance") {
  numerics::RngStream rng(515);
  const FeatureSet x = random_set(rng, 40, 3, 1.0);
  const Tensor shift = rng.normal_tensor({3});
  FeatureSet moved(3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor p = x.point_tensor(i);
    moved.push(numerics::add(p, shift));
  }
  const auto m = knn::build_manifold(x, 2);
  const auto m_moved = knn::build_manifold(moved, 2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(m.radii()[i] == doctest::Approx(m_moved.radii()[i]).epsilon(1e-9));
  }
  for (int q = 0; q < 50; ++q) {
    const Tensor query = rng.normal_tensor({3});
    const Tensor moved_query = numerics::add(query, shift);
    CHECK(m.contains(query.data()) == m_moved.contains(moved_query.data()));
  }
}

TEST_CASE("feature set csv and binary round trips") {
  numerics::RngStream rng(31);
  const FeatureSet x = random_set(rng, 23, 5, 2.0);
  const auto dir = std::filesystem::temp_directory_path() / "raregen_knn_io";
  std::filesystem::create_directories(dir);

  knn::save_csv(x, dir / "set.csv");
  CHECK(knn::load_csv(dir / "set.csv") == x);

  knn::save_fset(x, dir / "set.fset");
  CHECK(knn::load_fset(dir / "set.fset") == x);

  // header validation
  knn::save_csv(x, dir / "bad.csv");
  {
    std::ifstream in(dir / "bad.csv");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    all[0] = 'X';
    std::ofstream out(dir / "bad.csv");
    out << all;
  }
  CHECK_THROWS_AS(knn::load_csv(dir / "bad.csv"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("feature set rejects non-finite points") {
  FeatureSet s(2);
  const double bad[2] = {1.0, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(s.push(std::span<const double>(bad, 2)), ContractViolation);
}
