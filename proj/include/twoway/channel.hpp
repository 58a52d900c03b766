#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "twoway/rng.hpp"

namespace twoway {

// sigma^2 = P * 10^(-snr/10), P in linear scale.
inline double snr_to_noise_variance(double snr_db, double power) {
  if (!std::isfinite(snr_db))
    throw std::invalid_argument("snr_to_noise_variance: snr_db must be finite");
  if (!(power > 0.0))
    throw std::invalid_argument("snr_to_noise_variance: power must be > 0");
  return power * std::pow(10.0, -snr_db / 10.0);
}

// Both directions of one Gaussian two-way link. SNR_i is measured at the
// receiver of the opposite user, so noise_var_i corrupts user i's transmit
// direction.
struct ChannelConfig {
  double snr1_db = 0.0;
  double snr2_db = 0.0;
  double power1 = 1.0;
  double power2 = 1.0;
  int block_uses = 1;  // T

  double noise_var1() const { return snr_to_noise_variance(snr1_db, power1); }
  double noise_var2() const { return snr_to_noise_variance(snr2_db, power2); }

  void validate() const {
    if (!(power1 > 0.0) || !(power2 > 0.0))
      throw std::invalid_argument("ChannelConfig: powers must be > 0");
    if (block_uses < 1)
      throw std::invalid_argument("ChannelConfig: block_uses must be >= 1");
    (void)noise_var1();
    (void)noise_var2();
  }
};

// Full record of one two-way exchange: received_j[t] = sent_i[t] + noise_i[t].
struct EpisodeTrace {
  std::vector<double> sent1, sent2;
  std::vector<double> received1, received2;
  std::vector<double> noise1, noise2;
};

// Independent noise engines for the two directions, derived from one master
// seed. episode selects a substream so workers never alias.
struct TwoWayRng {
  std::mt19937_64 dir1, dir2;

  explicit TwoWayRng(std::uint64_t master, std::uint64_t episode = 0)
      : dir1(substream(master, 1, episode)), dir2(substream(master, 2, episode)) {}
};

// One simultaneous use: y2 = c1 + n1, y1 = c2 + n2.
inline std::pair<double, double> exchange_step(double c1, double c2,
                                               double sigma1_sq, double sigma2_sq,
                                               TwoWayRng& rng) {
  if (sigma1_sq < 0.0 || sigma2_sq < 0.0)
    throw std::invalid_argument("exchange_step: variances must be >= 0");
  const double n1 = gaussian(rng.dir1, sigma1_sq);
  const double n2 = gaussian(rng.dir2, sigma2_sq);
  return {c2 + n2, c1 + n1};
}

// Completes an episode from two fixed symbol streams (open-loop use: the
// symbols must not depend on received values). Samples fresh noise from rng.
inline EpisodeTrace transmit(const std::vector<double>& sent1,
                             const std::vector<double>& sent2,
                             const ChannelConfig& cfg, TwoWayRng& rng) {
  if (sent1.size() != sent2.size())
    throw std::invalid_argument("transmit: symbol streams must have equal length");
  EpisodeTrace tr;
  tr.sent1 = sent1;
  tr.sent2 = sent2;
  const std::size_t n = sent1.size();
  tr.noise1.resize(n);
  tr.noise2.resize(n);
  tr.received1.resize(n);
  tr.received2.resize(n);
  fill_gaussian(rng.dir1, cfg.noise_var1(), tr.noise1);
  fill_gaussian(rng.dir2, cfg.noise_var2(), tr.noise2);
  for (std::size_t t = 0; t < n; ++t) {
    tr.received2[t] = sent1[t] + tr.noise1[t];
    tr.received1[t] = sent2[t] + tr.noise2[t];
    // store the rounded noise so that received - sent == noise bit-exactly
    tr.noise1[t] = tr.received2[t] - sent1[t];
    tr.noise2[t] = tr.received1[t] - sent2[t];
  }
  return tr;
}

// Sample mean over episodes of sum_t c_i[t]^2.
inline double empirical_power(std::span<const EpisodeTrace> batch, int user) {
  if (batch.empty())
    throw std::invalid_argument("empirical_power: empty batch");
  if (user != 1 && user != 2)
    throw std::invalid_argument("empirical_power: user must be 1 or 2");
  double acc = 0.0;
  for (const auto& tr : batch) {
    const auto& c = (user == 1) ? tr.sent1 : tr.sent2;
    double e = 0.0;
    for (double v : c) e += v * v;
    acc += e;
  }
  return acc / static_cast<double>(batch.size());
}

}  // namespace twoway
