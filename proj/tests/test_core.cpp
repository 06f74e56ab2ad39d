#include <catch2/catch_amalgamated.hpp>

#include "mvsl/prng.hpp"
#include "mvsl/tensor.hpp"

using namespace mvsl;

TEST_CASE("splitmix64 stream is reproducible and seed-sensitive", "[core]") {
  SplitMix64 a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    auto x = a.next_u64();
    REQUIRE(x == b.next_u64());
  }
  bool any_diff = false;
  SplitMix64 a2(42);
  for (int i = 0; i < 100; ++i) any_diff = any_diff || (a2.next_u64() != c.next_u64());
  REQUIRE(any_diff);
}

TEST_CASE("uniform draws live in [0,1) and fill the range", "[core]") {
  SplitMix64 g(7);
  double mn = 1.0, mx = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = g.next_uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    mn = std::min(mn, u);
    mx = std::max(mx, u);
  }
  REQUIRE(mn < 0.01);
  REQUIRE(mx > 0.99);
}

TEST_CASE("normal draws have roughly standard moments", "[core]") {
  SplitMix64 g(11);
  const int n = 20000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = g.next_normal();
    s1 += x;
    s2 += x * x;
  }
  double mean = s1 / n;
  double var = s2 / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("derived sub-streams are order-independent", "[core]") {
  auto s1 = derive_seed(123, 0);
  auto s2 = derive_seed(123, 1);
  REQUIRE(s1 != s2);
  REQUIRE(derive_seed(123, 0) == s1);  // no hidden state
}

TEST_CASE("shuffle is deterministic per seed", "[core]") {
  std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7}, v2 = v1, v3 = v1;
  SplitMix64 a(5), b(5), c(6);
  a.shuffle(v1);
  b.shuffle(v2);
  c.shuffle(v3);
  REQUIRE(v1 == v2);
  REQUIRE(v1 != v3);
}

TEST_CASE("gaussian fill is visitation-order pinned", "[core]") {
  SplitMix64 a(9), b(9);
  Mat m1 = random_gaussian(3, 4, a, 0.5);
  Mat m2 = random_gaussian(3, 4, b, 0.5);
  REQUIRE(checksum(m1) == checksum(m2));
  REQUIRE(all_finite(m1));
}

TEST_CASE("Array3 slab views alias the flat storage", "[core]") {
  Array3 t(2, 3, 4);
  t.at(1, 2, 3) = 7.5;
  REQUIRE(t.slab(1)(2, 3) == 7.5);
  Mat m = Mat::Constant(3, 4, 2.0);
  t.set_slab(0, m);
  REQUIRE(t.at(0, 0, 0) == 2.0);
  REQUIRE(t.at(0, 2, 3) == 2.0);
  REQUIRE(t.at(1, 2, 3) == 7.5);
  REQUIRE_THROWS_AS(t.set_slab(0, Mat::Zero(2, 2)), mvsl::InputError);
}

TEST_CASE("checksums detect single-bit changes", "[core]") {
  Mat m = Mat::Zero(2, 2);
  auto h0 = checksum(m);
  m(1, 1) = 1e-300;
  REQUIRE(checksum(m) != h0);
}
