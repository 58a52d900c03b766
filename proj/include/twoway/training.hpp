#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "twoway/autodiff.hpp"
#include "twoway/channel.hpp"
#include "twoway/models.hpp"
#include "twoway/optimizer.hpp"
#include "twoway/rng.hpp"

namespace twoway {

struct TrainConfig {
  ModelConfig model;
  double snr1_db = 1.0;
  double snr2_db = 20.0;
  int batch = 512;
  int steps = 25000;
  double lr = 1e-3;
  int warmup = 0;  // linear lr warmup steps; 0 disables
  int eval_every = 500;
  int val_trials = 10000;
  double lr_decay = 0.5;   // applied when validation sum BLER plateaus
  int plateau_evals = 10;  // evaluations without improvement before decay
  int max_restarts = 3;    // re-seeded attempts after non-finite failures
  double stop_below_val_sum_bler = -1.0;  // early stop threshold; < 0 disables
  std::uint64_t seed = 1;
  AdamConfig adam;

  ChannelConfig channel() const {
    ChannelConfig ch;
    ch.snr1_db = snr1_db;
    ch.snr2_db = snr2_db;
    ch.power1 = model.power1;
    ch.power2 = model.power2;
    ch.block_uses = model.t_uses();
    return ch;
  }

  void validate() const {
    model.validate();
    channel().validate();
    if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
    if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr))
      throw std::invalid_argument("TrainConfig: lr must be finite and >= 0");
    if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
    if (val_trials < 1) throw std::invalid_argument("TrainConfig: val_trials must be >= 1");
    if (max_restarts < 0) throw std::invalid_argument("TrainConfig: max_restarts must be >= 0");
  }
};

template <class T>
struct SampledBatch {
  Tensor<T> bits1, bits2;             // [rows, M]
  std::vector<int> labels1, labels2;  // class index per row
  std::vector<Tensor<T>> noise1, noise2;
};

// One training batch of episodes, bits uniform over {0,1}^M per sub-block and
// noise at the configured training SNRs.
template <class T>
SampledBatch<T> sample_batch(const ModelConfig& cfg, const ChannelConfig& ch,
                             std::uint64_t master, int episodes) {
  const int m = cfg.block_len;
  const int tm = cfg.t_uses();
  const int width = cfg.symbol_width();
  const int rows = episodes * (cfg.attention() ? cfg.tokens() : 1);

  SampledBatch<T> b;
  b.bits1 = Tensor<T>(rows, m);
  b.bits2 = Tensor<T>(rows, m);
  b.labels1.assign(static_cast<std::size_t>(rows), 0);
  b.labels2.assign(static_cast<std::size_t>(rows), 0);
  auto fill_bits = [&](Tensor<T>& bits, std::vector<int>& labels, std::uint64_t purpose) {
    auto eng = substream(master, purpose, 0);
    for (int r = 0; r < rows; ++r) {
      int idx = 0;
      for (int j = 0; j < m; ++j) {
        const int bit = static_cast<int>(eng() & 1u);
        bits.data[static_cast<std::size_t>(r) * m + j] = static_cast<T>(bit);
        idx = (idx << 1) | bit;
      }
      labels[static_cast<std::size_t>(r)] = idx;
    }
  };
  fill_bits(b.bits1, b.labels1, 21);
  if (!cfg.one_way()) fill_bits(b.bits2, b.labels2, 22);

  auto fill_noise = [&](std::vector<Tensor<T>>& dst, double var, std::uint64_t purpose) {
    dst.assign(static_cast<std::size_t>(tm), Tensor<T>(episodes, width));
    auto eng = substream(master, purpose, 0);
    for (int t = 0; t < tm; ++t)
      for (auto& v : dst[static_cast<std::size_t>(t)].data)
        v = static_cast<T>(gaussian(eng, var));
  };
  fill_noise(b.noise1, ch.noise_var1(), 23);
  fill_noise(b.noise2, ch.noise_var2(), 24);
  return b;
}

// Sum of both users' cross-entropy losses, Eq. (10)-(11); one-way systems keep
// user 1's term only. Token losses sum within a batch element (denom =
// episodes, not rows).
template <class T>
int episode_loss_node(Graph<T>& g, const ModelConfig& cfg, const EpisodeNodes& ep,
                      const std::vector<int>& labels1, const std::vector<int>& labels2,
                      int episodes) {
  int l1 = g.cross_entropy_mean(ep.logits_b1, labels1, episodes);
  if (cfg.one_way()) return l1;
  int l2 = g.cross_entropy_mean(ep.logits_b2, labels2, episodes);
  return g.add(l1, l2);
}

struct StepMetrics {
  double loss = 0;
  double grad_norm = 0;  // pre-clip global norm
};

// One Alg.-1 iteration over a batch: forward unroll, backward, clip, Adam,
// power-weight reprojection. Throws std::runtime_error on non-finite values.
template <class T>
StepMetrics train_step(ParameterSet<T>& ps, const TrainConfig& tc, std::uint64_t step_master,
                       double lr, const Tensor<T>& pe) {
  const ModelConfig& cfg = tc.model;
  const ChannelConfig ch = tc.channel();
  SampledBatch<T> batch = sample_batch<T>(cfg, ch, step_master, tc.batch);

  Graph<T> g(&ps, StatsMode::kEma);
  int b1 = g.input(batch.bits1);
  int b2 = g.input(batch.bits2);
  EpisodeNodes ep = episode_forward(g, cfg, b1, b2, batch.noise1, batch.noise2, pe,
                                    passive_echo_gain(cfg, ch));
  int loss = episode_loss_node(g, cfg, ep, batch.labels1, batch.labels2, tc.batch);

  StepMetrics m;
  m.loss = static_cast<double>(g.scalar(loss));
  if (!std::isfinite(m.loss)) throw std::runtime_error("train_step: non-finite loss");

  ps.zero_grads();
  g.backward(loss);
  m.grad_norm = ps.clip_gradients(tc.adam.clip_norm);
  ps.adam_step(tc.adam, lr);
  project_power_weights(ps, cfg);
  return m;
}

// Replace EMA statistics with averages over fresh batches under the final
// weights, then mark them ready for frozen inference.
template <class T>
void calibrate_statistics(ParameterSet<T>& ps, const TrainConfig& tc, std::uint64_t master,
                          int batches = 100) {
  const ModelConfig& cfg = tc.model;
  const ChannelConfig ch = tc.channel();
  const Tensor<T> pe = cfg.attention() ? positional_encoding<T>(cfg.tokens(), cfg.model_dim)
                                       : Tensor<T>(1, 1);
  auto reset = [&](const std::string& name) {
    if (!ps.has(name)) return;
    auto& t = ps.value(name);
    std::fill(t.data.begin(), t.data.end(), T(0));
  };
  for (const char* user : {"u1", "u2"}) {
    for (const char* what : {".power.mean", ".power.var", ".power.count", ".center.mean",
                             ".center.count"})
      reset(std::string(user) + what);
  }
  for (int i = 0; i < batches; ++i) {
    SampledBatch<T> batch =
        sample_batch<T>(cfg, ch, derive_seed(master, 31, static_cast<std::uint64_t>(i)),
                        tc.batch);
    Graph<T> g(&ps, StatsMode::kAccumulate);
    int b1 = g.input(batch.bits1);
    int b2 = g.input(batch.bits2);
    episode_forward(g, cfg, b1, b2, batch.noise1, batch.noise2, pe, passive_echo_gain(cfg, ch));
  }
  auto finalize = [&](const std::string& prefix, bool with_var) {
    if (!ps.has(prefix + ".count")) return;
    auto& cnt = ps.value(prefix + ".count");
    auto& mean = ps.value(prefix + ".mean");
    for (std::size_t i = 0; i < cnt.count(); ++i) {
      if (cnt.data[i] <= T(0)) throw std::runtime_error("calibrate: no samples for " + prefix);
      mean.data[i] /= cnt.data[i];
      if (with_var) ps.value(prefix + ".var").data[i] /= cnt.data[i];
      cnt.data[i] = T(1);
    }
  };
  for (const char* user : {"u1", "u2"}) {
    finalize(std::string(user) + ".power", true);
    finalize(std::string(user) + ".center", false);
  }
}

struct TrainPoint {
  std::uint64_t step = 0;
  double loss = 0;
  double val_bler1 = 0;
  double val_bler2 = 0;
  double val_sum_bler = 0;
  double lr = 0;
};

template <class T>
struct TrainOutput {
  ParameterSet<T> best_params;
  std::vector<TrainPoint> curve;
  double best_val_sum = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  int restarts_used = 0;
  bool success = false;
  std::string failure;
};

namespace detail {

template <class T>
TrainPoint validate_point(const TrainConfig& tc, const ParameterSet<T>& ps, std::uint64_t step,
                          double loss, double lr, std::uint64_t val_seed) {
  TwoWaySystem<T> sys(tc.model, tc.channel(), ps);
  const int chunk = 2048;
  long err1 = 0, err2 = 0;
  for (int done = 0; done < tc.val_trials; done += chunk) {
    const int n = std::min(chunk, tc.val_trials - done);
    BatchOutcome out = sys.decode_batch(val_seed, static_cast<std::uint64_t>(done), n);
    for (auto e : out.err1) err1 += e;
    for (auto e : out.err2) err2 += e;
  }
  TrainPoint p;
  p.step = step;
  p.loss = loss;
  p.lr = lr;
  p.val_bler1 = static_cast<double>(err1) / tc.val_trials;
  p.val_bler2 = static_cast<double>(err2) / tc.val_trials;
  p.val_sum_bler = p.val_bler1 + p.val_bler2;
  return p;
}

}  // namespace detail

// Full training loop: periodic held-out evaluation, best-checkpoint retention,
// plateau-triggered lr decay, optional early stop, and re-seeded restarts on
// persistent non-finite failures.
template <class T>
TrainOutput<T> train(const TrainConfig& tc) {
  tc.validate();
  TrainOutput<T> out;
  const std::uint64_t val_seed = derive_seed(tc.seed, 900);
  const Tensor<T> pe = tc.model.attention()
                           ? positional_encoding<T>(tc.model.tokens(), tc.model.model_dim)
                           : Tensor<T>(1, 1);

  for (int attempt = 0; attempt <= tc.max_restarts; ++attempt) {
    const std::uint64_t run_seed = derive_seed(tc.seed, 7000, static_cast<std::uint64_t>(attempt));
    ParameterSet<T> ps = init_params<T>(tc.model, run_seed);
    out.curve.clear();
    out.best_val_sum = std::numeric_limits<double>::infinity();
    out.restarts_used = attempt;
    double decay_factor = 1.0;
    int since_improvement = 0;
    try {
      for (int step = 1; step <= tc.steps; ++step) {
        double lr = tc.lr * decay_factor;
        if (tc.warmup > 0 && step < tc.warmup)
          lr *= static_cast<double>(step) / tc.warmup;
        StepMetrics m = train_step(ps, tc, derive_seed(run_seed, 50, static_cast<std::uint64_t>(step)),
                                   lr, pe);
        if (step % tc.eval_every == 0 || step == tc.steps) {
          TrainPoint p = detail::validate_point(tc, ps, static_cast<std::uint64_t>(step), m.loss,
                                                lr, val_seed);
          out.curve.push_back(p);
          if (p.val_sum_bler < out.best_val_sum) {
            out.best_val_sum = p.val_sum_bler;
            out.best_step = p.step;
            out.best_params = ps;
            since_improvement = 0;
          } else if (++since_improvement >= tc.plateau_evals) {
            decay_factor *= tc.lr_decay;
            since_improvement = 0;
          }
          if (tc.stop_below_val_sum_bler >= 0 &&
              p.val_sum_bler < tc.stop_below_val_sum_bler)
            break;
        }
      }
      if (out.curve.empty() || !std::isfinite(out.best_val_sum))
        throw std::runtime_error("train: no finite validation point");
      calibrate_statistics(out.best_params, tc, derive_seed(run_seed, 31));
      out.success = true;
      return out;
    } catch (const std::exception& e) {
      out.failure = std::string("attempt ") + std::to_string(attempt) + ": " + e.what();
    }
  }
  out.success = false;
  return out;
}

}  // namespace twoway
