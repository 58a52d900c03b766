#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "twoway/channel.hpp"

using namespace twoway;

TEST_CASE("snr to noise variance", "[channel]") {
  CHECK(snr_to_noise_variance(0.0, 1.0) == 1.0);
  CHECK(snr_to_noise_variance(20.0, 1.0) == Catch::Approx(0.01).epsilon(1e-12));
  // 10^(0.1) evaluated numerically
  CHECK(snr_to_noise_variance(-1.0, 1.0) ==
        Catch::Approx(1.2589254117941673).epsilon(1e-12));
  CHECK(snr_to_noise_variance(3.0, 2.0) ==
        Catch::Approx(2.0 * std::pow(10.0, -0.3)).epsilon(1e-12));

  CHECK_THROWS_AS(snr_to_noise_variance(std::nan(""), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(snr_to_noise_variance(1.0 / 0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(snr_to_noise_variance(0.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(snr_to_noise_variance(0.0, -1.0), std::invalid_argument);
}

TEST_CASE("channel config invariants", "[channel]") {
  ChannelConfig ok{.snr1_db = 1.0, .snr2_db = 20.0, .power1 = 1.0, .power2 = 1.0, .block_uses = 9};
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.noise_var1() > 0.0);

  ChannelConfig bad = ok;
  bad.block_uses = 0;
  CHECK_THROWS(bad.validate());
  bad = ok;
  bad.power2 = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("exchange step, zero noise", "[channel]") {
  TwoWayRng rng(42);
  auto [y1, y2] = exchange_step(1.0, -1.0, 0.0, 0.0, rng);
  CHECK(y1 == -1.0);
  CHECK(y2 == 1.0);
}

TEST_CASE("exchange step, asymmetric noise", "[channel]") {
  TwoWayRng rng(7);
  double mean1 = 0.0, mean2 = 0.0, var1 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto [y1, y2] = exchange_step(0.5, 0.5, 0.0, 4.0, rng);
    CHECK(y2 == 0.5);  // direction 1 is noiseless
    mean1 += y1;
    mean2 += y2;
    var1 += (y1 - 0.5) * (y1 - 0.5);
  }
  mean1 /= n;
  var1 /= n;
  CHECK(mean1 == Catch::Approx(0.5).margin(0.05));
  CHECK(var1 == Catch::Approx(4.0).epsilon(0.03));
}

TEST_CASE("exchange step, unit variance statistics", "[channel]") {
  // c1 = 0, sigma1^2 = 1: sample variance of y2 within [0.97, 1.03]
  TwoWayRng rng(123);
  const int n = 100000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    auto [y1, y2] = exchange_step(0.0, 0.0, 1.0, 0.0, rng);
    (void)y1;
    sum += y2;
    sumsq += y2 * y2;
  }
  const double var = sumsq / n - (sum / n) * (sum / n);
  CHECK(var >= 0.97);
  CHECK(var <= 1.03);
}

TEST_CASE("exchange step rejects negative variance", "[channel]") {
  TwoWayRng rng(1);
  CHECK_THROWS_AS(exchange_step(0.0, 0.0, -1.0, 0.0, rng), std::invalid_argument);
}

TEST_CASE("empirical power", "[channel]") {
  EpisodeTrace ones;
  ones.sent1.assign(9, 1.0);
  ones.sent2.assign(9, 0.0);
  std::vector<EpisodeTrace> batch{ones};
  CHECK(empirical_power(batch, 1) == 9.0);
  CHECK(empirical_power(batch, 2) == 0.0);

  std::vector<EpisodeTrace> empty;
  CHECK_THROWS_AS(empirical_power(empty, 1), std::invalid_argument);
  CHECK_THROWS_AS(empirical_power(batch, 3), std::invalid_argument);
}

TEST_CASE("transmit: additivity is exact", "[channel]") {
  ChannelConfig cfg{.snr1_db = 0.0, .snr2_db = 3.0, .block_uses = 9};
  std::mt19937_64 sym(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (std::uint64_t ep = 0; ep < 200; ++ep) {
    TwoWayRng rng(99, ep);
    std::vector<double> c1(9), c2(9);
    for (auto& v : c1) v = u(sym);
    for (auto& v : c2) v = u(sym);
    auto tr = transmit(c1, c2, cfg, rng);
    for (int t = 0; t < 9; ++t) {
      CHECK(tr.received2[t] - tr.sent1[t] == tr.noise1[t]);
      CHECK(tr.received1[t] - tr.sent2[t] == tr.noise2[t]);
    }
  }
}

TEST_CASE("noise streams are independent across directions", "[channel]") {
  ChannelConfig cfg{.snr1_db = 0.0, .snr2_db = 0.0, .block_uses = 1};
  const int n = 100000;
  double s1 = 0.0, s2 = 0.0, s11 = 0.0, s22 = 0.0, s12 = 0.0;
  std::vector<double> c{0.0};
  for (std::uint64_t ep = 0; ep < n; ++ep) {
    TwoWayRng rng(2024, ep);
    auto tr = transmit(c, c, cfg, rng);
    const double a = tr.noise1[0], b = tr.noise2[0];
    s1 += a;
    s2 += b;
    s11 += a * a;
    s22 += b * b;
    s12 += a * b;
  }
  const double cov = s12 / n - (s1 / n) * (s2 / n);
  const double v1 = s11 / n - (s1 / n) * (s1 / n);
  const double v2 = s22 / n - (s2 / n) * (s2 / n);
  const double corr = cov / std::sqrt(v1 * v2);
  CHECK(std::abs(corr) < 0.01);
}

TEST_CASE("seeded determinism of episode streams", "[channel]") {
  ChannelConfig cfg{.snr1_db = 1.0, .snr2_db = 2.0, .block_uses = 4};
  std::vector<double> c1{1.0, -1.0, 0.5, 0.0}, c2{0.0, 1.0, -0.5, 2.0};

  TwoWayRng a(77, 3), b(77, 3), other(77, 4);
  auto ta = transmit(c1, c2, cfg, a);
  auto tb = transmit(c1, c2, cfg, b);
  auto tc = transmit(c1, c2, cfg, other);
  CHECK(ta.noise1 == tb.noise1);
  CHECK(ta.noise2 == tb.noise2);
  CHECK(ta.received1 == tb.received1);
  CHECK(ta.noise1 != tc.noise1);
}
