#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "nir/common.hpp"

using namespace nir;

TEST_CASE("random_permutation is a permutation and seed-deterministic") {
  Rng a(42), b(42), c(43);
  const auto p1 = random_permutation(17, a);
  const auto p2 = random_permutation(17, b);
  const auto p3 = random_permutation(17, c);
  REQUIRE(p1 == p2);
  REQUIRE(p1 != p3);
  std::set<int> seen(p1.begin(), p1.end());
  REQUIRE(seen.size() == 17);
  REQUIRE(*seen.begin() == 0);
  REQUIRE(*seen.rbegin() == 16);
}

TEST_CASE("uniform_index stays in range and covers all values") {
  Rng rng(7);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto v = uniform_index(5, rng);
    REQUIRE(v < 5);
    ++counts[static_cast<int>(v)];
  }
  for (int c : counts) REQUIRE(c > 800);
}

TEST_CASE("fnv1a64 matches the published test vector") {
  // FNV-1a 64-bit of "a" is 0xaf63dc4c8601ec8c.
  const unsigned char a = 'a';
  REQUIRE(fnv1a64(&a, 1) == 0xaf63dc4c8601ec8cULL);
  REQUIRE(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ULL);
}

TEST_CASE("softplus is accurate and overflow-safe") {
  REQUIRE_THAT(softplus(0.0), Catch::Matchers::WithinAbs(std::log(2.0), 1e-15));
  REQUIRE_THAT(softplus(-40.0), Catch::Matchers::WithinAbs(std::exp(-40.0), 1e-22));
  REQUIRE_THAT(softplus(100.0), Catch::Matchers::WithinAbs(100.0, 1e-12));
  REQUIRE(std::isfinite(softplus(1000.0)));
}

TEST_CASE("all_finite flags NaN and infinity") {
  Matrix m = Matrix::Zero(2, 2);
  REQUIRE(all_finite(m));
  m(1, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_FALSE(all_finite(m));
  m(1, 0) = std::numeric_limits<double>::infinity();
  REQUIRE_FALSE(all_finite(m));
}

TEST_CASE("errors carry their code") {
  try {
    fail(ErrorCode::DimensionMismatch, "probe");
    FAIL("unreachable");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::DimensionMismatch);
    REQUIRE(std::string(e.what()).find("probe") != std::string::npos);
  }
}
