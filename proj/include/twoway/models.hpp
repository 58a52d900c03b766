#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "twoway/autodiff.hpp"
#include "twoway/channel.hpp"
#include "twoway/checkpoint.hpp"
#include "twoway/knowledge.hpp"
#include "twoway/optimizer.hpp"
#include "twoway/rng.hpp"

namespace twoway {

// kTwlc/kTwbaf are two-way systems; kAlc is one-way with a learned feedback
// encoder; kLc is one-way with passive feedback (a power-normalized echo).
enum class ModelKind { kTwlc, kAlc, kLc, kTwbaf };

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kTwlc: return "twlc";
    case ModelKind::kAlc: return "alc";
    case ModelKind::kLc: return "lc";
    case ModelKind::kTwbaf: return "twbaf";
  }
  throw std::invalid_argument("model_kind_name: unknown kind");
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "twlc") return ModelKind::kTwlc;
  if (s == "alc") return ModelKind::kAlc;
  if (s == "lc") return ModelKind::kLc;
  if (s == "twbaf") return ModelKind::kTwbaf;
  throw std::invalid_argument("model_kind_from: unknown kind " + s);
}

struct ModelConfig {
  ModelKind kind = ModelKind::kTwlc;
  int message_len = 3;  // K bits per user
  int block_len = 3;    // M bits per sub-block
  int total_uses = 9;   // T channel uses for the whole message
  double power1 = 1.0;  // linear per-user budgets, P_i per Eq. use
  double power2 = 1.0;
  int fe_hidden = 64;    // LC-family feature extractor width (doubled variant)
  int head_hidden = 32;  // LC-family head width
  int model_dim = 32;    // TWBAF width h_b
  int enc_layers = 2;    // TWBAF attention layers, encoder side
  int dec_layers = 3;    // decoder side
  int heads = 1;

  int t_uses() const { return total_uses * block_len / message_len; }  // T_M
  int tokens() const { return message_len / block_len; }               // l = K/M
  int enc_input_dim() const { return block_len + 2 * (t_uses() - 1); }
  int dec_input_dim(int user) const {
    const bool with_bits = !(one_way() && user == 2);
    return (with_bits ? block_len : 0) + 2 * t_uses();
  }
  int classes() const { return 1 << block_len; }
  bool one_way() const { return kind == ModelKind::kAlc || kind == ModelKind::kLc; }
  bool attention() const { return kind == ModelKind::kTwbaf; }
  // LC-family models code each sub-block independently; TWBAF codes all l
  // sub-blocks jointly as tokens of one episode.
  int blocks_per_trial() const { return attention() ? 1 : tokens(); }
  int symbol_width() const { return attention() ? tokens() : 1; }

  void validate() const {
    if (message_len <= 0 || block_len <= 0 || total_uses <= 0)
      throw std::invalid_argument("ModelConfig: K, M, T must be positive");
    if (block_len > 20) throw std::invalid_argument("ModelConfig: M too large for 2^M classes");
    if (message_len % block_len != 0)
      throw std::invalid_argument("ModelConfig: M must divide K");
    if ((total_uses * block_len) % message_len != 0)
      throw std::invalid_argument("ModelConfig: T*M/K must be integral");
    if (t_uses() < 1) throw std::invalid_argument("ModelConfig: T_M must be >= 1");
    if (power1 <= 0 || power2 <= 0)
      throw std::invalid_argument("ModelConfig: powers must be positive");
    if (fe_hidden <= 0 || head_hidden <= 0 || model_dim <= 0 || enc_layers <= 0 ||
        dec_layers <= 0 || heads <= 0)
      throw std::invalid_argument("ModelConfig: dims must be positive");
    if (model_dim % heads != 0)
      throw std::invalid_argument("ModelConfig: heads must divide model_dim");
  }

  std::string canonical_string() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "kind=%s;K=%d;M=%d;T=%d;p1=%.9g;p2=%.9g;feh=%d;hh=%d;md=%d;el=%d;dl=%d;heads=%d",
                  model_kind_name(kind).c_str(), message_len, block_len, total_uses, power1,
                  power2, fe_hidden, head_hidden, model_dim, enc_layers, dec_layers, heads);
    return buf;
  }
  std::uint64_t fingerprint() const { return fnv1a64(canonical_string()); }
};

namespace detail {

template <class T>
void add_dense(ParameterSet<T>& ps, std::mt19937_64& rng, const std::string& prefix, int in,
               int out, bool xavier) {
  const double bound = xavier ? std::sqrt(6.0 / (in + out)) : 1.0 / std::sqrt(in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w(in, out);
  for (auto& v : w.data) v = static_cast<T>(u(rng));
  ps.add(prefix + ".w", std::move(w));
  Tensor<T> b = Tensor<T>::row(std::vector<T>(static_cast<std::size_t>(out), T(0)));
  if (!xavier)
    for (auto& v : b.data) v = static_cast<T>(u(rng));
  ps.add(prefix + ".b", std::move(b));
}

template <class T>
void add_layer_norm(ParameterSet<T>& ps, const std::string& prefix, int dim) {
  ps.add(prefix + ".g", Tensor<T>::full(1, dim, T(1)));
  ps.add(prefix + ".b", Tensor<T>(1, dim));
}

template <class T>
void add_lc_block(ParameterSet<T>& ps, std::mt19937_64& rng, const std::string& prefix, int in,
                  int out, int hidden, int head_hidden) {
  add_dense(ps, rng, prefix + ".fe.l1", in, hidden, false);
  add_dense(ps, rng, prefix + ".fe.l2", hidden, hidden, false);
  add_layer_norm(ps, prefix + ".fe.ln", 2 * hidden);
  add_dense(ps, rng, prefix + ".head.l1", 2 * hidden, head_hidden, false);
  add_dense(ps, rng, prefix + ".head.l2", head_hidden, out, false);
}

template <class T>
void add_twbaf_block(ParameterSet<T>& ps, std::mt19937_64& rng, const std::string& prefix, int in,
                     int out, int dim, int layers) {
  add_dense(ps, rng, prefix + ".fe.l1", in, dim, false);
  add_dense(ps, rng, prefix + ".fe.l2", dim, dim, false);
  add_dense(ps, rng, prefix + ".fe.l3", dim, dim, false);
  for (int l = 0; l < layers; ++l) {
    const std::string xf = prefix + ".xf" + std::to_string(l);
    add_layer_norm(ps, xf + ".ln1", dim);
    add_dense(ps, rng, xf + ".q", dim, dim, true);
    add_dense(ps, rng, xf + ".k", dim, dim, true);
    add_dense(ps, rng, xf + ".v", dim, dim, true);
    add_dense(ps, rng, xf + ".o", dim, dim, true);
    add_layer_norm(ps, xf + ".ln2", dim);
    add_dense(ps, rng, xf + ".ff1", dim, 4 * dim, false);
    add_dense(ps, rng, xf + ".ff2", 4 * dim, dim, false);
  }
  add_layer_norm(ps, prefix + ".lnf", dim);
  add_dense(ps, rng, prefix + ".head.l1", dim, dim, false);
  add_dense(ps, rng, prefix + ".head.l2", dim, out, false);
}

template <class T>
void add_power(ParameterSet<T>& ps, const std::string& prefix, int t_uses, double power) {
  ps.add(prefix + ".w", Tensor<T>::full(1, t_uses, static_cast<T>(std::sqrt(power))));
  ps.add(prefix + ".mean", Tensor<T>(1, t_uses), false);
  ps.add(prefix + ".var", Tensor<T>(1, t_uses), false);
  ps.add(prefix + ".count", Tensor<T>(1, t_uses), false);
}

}  // namespace detail

// Build both users' parameters with deterministic, seed-driven initialization.
template <class T>
ParameterSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0xA11Cu));
  ParameterSet<T> ps;
  const int tm = cfg.t_uses();
  const int ell = cfg.tokens();
  const int classes = cfg.classes();
  auto add_encoder = [&](const std::string& user) {
    if (cfg.attention())
      detail::add_twbaf_block(ps, rng, user + ".enc", cfg.enc_input_dim(), 1, cfg.model_dim,
                              cfg.enc_layers);
    else
      detail::add_lc_block(ps, rng, user + ".enc", cfg.enc_input_dim(), 1, cfg.fe_hidden,
                           cfg.head_hidden);
  };
  auto add_decoder = [&](const std::string& user, int in_dim) {
    if (cfg.attention())
      detail::add_twbaf_block(ps, rng, user + ".dec", in_dim, classes, cfg.model_dim,
                              cfg.dec_layers);
    else
      detail::add_lc_block(ps, rng, user + ".dec", in_dim, classes, cfg.fe_hidden,
                           cfg.head_hidden);
  };

  add_encoder("u1");
  detail::add_power(ps, "u1.power", tm, cfg.power1);
  if (cfg.attention()) {
    ps.add("u1.center.mean", Tensor<T>(1, ell), false);
    ps.add("u1.center.count", Tensor<T>(1, 1), false);
  }
  if (!cfg.one_way()) add_decoder("u1", cfg.dec_input_dim(1));

  if (cfg.kind != ModelKind::kLc) {
    add_encoder("u2");
    detail::add_power(ps, "u2.power", tm, cfg.power2);
    if (cfg.attention()) {
      ps.add("u2.center.mean", Tensor<T>(1, ell), false);
      ps.add("u2.center.count", Tensor<T>(1, 1), false);
    }
  }
  add_decoder("u2", cfg.dec_input_dim(2));
  return ps;
}

// Rescale each user's power weights onto the constraint surface
// sum_t w_t^2 = P * T_M. Called after every optimizer step.
template <class T>
void project_power_weights(ParameterSet<T>& ps, const ModelConfig& cfg) {
  const double tm = static_cast<double>(cfg.t_uses());
  auto project = [&](const std::string& name, double power) {
    if (!ps.has(name)) return;
    auto& w = ps.value(name);
    double s = 0;
    for (T v : w.data) s += static_cast<double>(v) * static_cast<double>(v);
    if (s < 1e-12) {
      std::fill(w.data.begin(), w.data.end(), static_cast<T>(std::sqrt(power)));
      return;
    }
    const T scale = static_cast<T>(std::sqrt(power * tm / s));
    for (T& v : w.data) v *= scale;
  };
  project("u1.power.w", cfg.power1);
  project("u2.power.w", cfg.power2);
}

// Gain for the passive-feedback echo c2^t = g * y2^{t-1}, sized so the echo
// direction meets the same expected power budget as the data direction.
inline double passive_echo_gain(const ModelConfig& cfg, const ChannelConfig& ch) {
  return std::sqrt(cfg.power2 / (cfg.power1 + ch.noise_var1()));
}

namespace detail {

template <class T>
int lc_forward(Graph<T>& g, const std::string& p, int x, Activation act = Activation::kGelu) {
  int u = g.act(g.dense(x, g.param(p + ".fe.l1.w"), g.param(p + ".fe.l1.b")), act);
  int v = g.act(g.dense(u, g.param(p + ".fe.l2.w"), g.param(p + ".fe.l2.b")), act);
  int f = g.layer_norm(g.concat_cols({u, v}), g.param(p + ".fe.ln.g"), g.param(p + ".fe.ln.b"));
  int h = g.act(g.dense(f, g.param(p + ".head.l1.w"), g.param(p + ".head.l1.b")), act);
  return g.dense(h, g.param(p + ".head.l2.w"), g.param(p + ".head.l2.b"));
}

template <class T>
int twbaf_forward(Graph<T>& g, const std::string& p, int x, const Tensor<T>& pe, int layers,
                  int heads, int ell) {
  int h = g.act(g.dense(x, g.param(p + ".fe.l1.w"), g.param(p + ".fe.l1.b")), Activation::kRelu);
  h = g.act(g.dense(h, g.param(p + ".fe.l2.w"), g.param(p + ".fe.l2.b")), Activation::kRelu);
  h = g.act(g.dense(h, g.param(p + ".fe.l3.w"), g.param(p + ".fe.l3.b")), Activation::kRelu);
  h = g.add_positional(h, pe, ell);
  for (int l = 0; l < layers; ++l) {
    const std::string xf = p + ".xf" + std::to_string(l);
    int n1 = g.layer_norm(h, g.param(xf + ".ln1.g"), g.param(xf + ".ln1.b"));
    int a = g.mhsa(n1, g.param(xf + ".q.w"), g.param(xf + ".q.b"), g.param(xf + ".k.w"),
                   g.param(xf + ".k.b"), g.param(xf + ".v.w"), g.param(xf + ".v.b"),
                   g.param(xf + ".o.w"), g.param(xf + ".o.b"), ell, heads);
    h = g.add(h, a);
    int n2 = g.layer_norm(h, g.param(xf + ".ln2.g"), g.param(xf + ".ln2.b"));
    int f = g.act(g.dense(n2, g.param(xf + ".ff1.w"), g.param(xf + ".ff1.b")), Activation::kRelu);
    f = g.dense(f, g.param(xf + ".ff2.w"), g.param(xf + ".ff2.b"));
    h = g.add(h, f);
  }
  h = g.layer_norm(h, g.param(p + ".lnf.g"), g.param(p + ".lnf.b"));
  int m = g.act(g.dense(h, g.param(p + ".head.l1.w"), g.param(p + ".head.l1.b")),
                Activation::kRelu);
  return g.dense(m, g.param(p + ".head.l2.w"), g.param(p + ".head.l2.b"));
}

}  // namespace detail

// Node ids produced by one unrolled episode batch. Channel-shaped tensors are
// [episodes, symbol_width]; q holds each user's encoder input per interaction.
struct EpisodeNodes {
  int logits_b1 = -1;  // user 1's message, decoded at user 2
  int logits_b2 = -1;  // user 2's message, decoded at user 1 (two-way only)
  std::vector<int> c1, c2, y1, y2;
  std::vector<int> n1, n2;
  std::vector<int> q1, q2;
  std::vector<int> pre1, pre2;  // symbols before power reallocation
};

// Unroll T_M interactive steps for a batch of episodes and decode both
// directions. bits nodes are [rows, M] with rows = episodes (LC family) or
// episodes * l tokens (TWBAF). Gradients flow through the channel: noise
// enters as constant inputs added to the transmitted symbols.
template <class T>
EpisodeNodes episode_forward(Graph<T>& g, const ModelConfig& cfg, int bits1, int bits2,
                             const std::vector<Tensor<T>>& noise1,
                             const std::vector<Tensor<T>>& noise2, const Tensor<T>& pe,
                             double echo_gain = 0.0) {
  const int tm = cfg.t_uses();
  const int ell = cfg.tokens();
  const bool tb = cfg.attention();
  const int width = cfg.symbol_width();
  const int rows = g.val(bits1).rows();
  const int episodes = tb ? rows / ell : rows;
  if (tb && rows % ell != 0)
    throw std::invalid_argument("episode_forward: rows not a multiple of token count");
  if (static_cast<int>(noise1.size()) != tm || static_cast<int>(noise2.size()) != tm)
    throw std::invalid_argument("episode_forward: need one noise tensor per interaction");

  EpisodeNodes out;
  std::vector<int> c1f, c2f, y1f, y2f;  // token-shaped histories [rows, 1]

  auto knowledge = [&](int bits, const std::vector<int>& cs, const std::vector<int>& ys, int t) {
    std::vector<int> parts = {bits};
    for (int s = 0; s < t; ++s) parts.push_back(cs[static_cast<std::size_t>(s)]);
    if (t < tm - 1) parts.push_back(g.zeros(rows, tm - 1 - t));
    for (int s = 0; s < t; ++s) parts.push_back(ys[static_cast<std::size_t>(s)]);
    if (t < tm - 1) parts.push_back(g.zeros(rows, tm - 1 - t));
    return g.concat_cols(parts);
  };

  auto encode = [&](const std::string& user, int q, int t) {
    int raw = tb ? detail::twbaf_forward(g, user + ".enc", q, pe, cfg.enc_layers, cfg.heads, ell)
                 : detail::lc_forward(g, user + ".enc", q);
    int sym = tb ? g.reshape(raw, episodes, ell) : raw;
    if (tb)
      sym = g.tanh_center(sym, g.parameters()->index(user + ".center.mean"),
                          g.parameters()->index(user + ".center.count"));
    return g.reallocate(sym, g.param(user + ".power.w"), t,
                        g.parameters()->index(user + ".power.mean"),
                        g.parameters()->index(user + ".power.var"),
                        g.parameters()->index(user + ".power.count"));
  };

  for (int t = 0; t < tm; ++t) {
    int q1 = knowledge(bits1, c1f, y1f, t);
    int c1 = encode("u1", q1, t);
    out.q1.push_back(q1);

    int c2;
    if (cfg.kind == ModelKind::kLc) {
      c2 = (t == 0) ? g.zeros(episodes, width)
                    : g.scale(out.y2.back(), static_cast<T>(echo_gain));
    } else {
      int q2 = knowledge(bits2, c2f, y2f, t);
      c2 = encode("u2", q2, t);
      out.q2.push_back(q2);
    }

    int n1 = g.input(noise1[static_cast<std::size_t>(t)]);
    int n2 = g.input(noise2[static_cast<std::size_t>(t)]);
    int y2 = g.add(c1, n1);  // what user 2 receives
    int y1 = g.add(c2, n2);  // what user 1 receives

    out.c1.push_back(c1);
    out.c2.push_back(c2);
    out.y1.push_back(y1);
    out.y2.push_back(y2);
    out.n1.push_back(n1);
    out.n2.push_back(n2);
    c1f.push_back(tb ? g.reshape(c1, rows, 1) : c1);
    c2f.push_back(tb ? g.reshape(c2, rows, 1) : c2);
    y1f.push_back(tb ? g.reshape(y1, rows, 1) : y1);
    y2f.push_back(tb ? g.reshape(y2, rows, 1) : y2);
  }

  auto receive = [&](int bits, const std::vector<int>& ys, const std::vector<int>& cs,
                     bool with_bits) {
    std::vector<int> parts;
    if (with_bits) parts.push_back(bits);
    for (int id : ys) parts.push_back(id);
    for (int id : cs) parts.push_back(id);
    return g.concat_cols(parts);
  };
  auto decode = [&](const std::string& user, int r) {
    return tb ? detail::twbaf_forward(g, user + ".dec", r, pe, cfg.dec_layers, cfg.heads, ell)
              : detail::lc_forward(g, user + ".dec", r);
  };

  // decoder housed at user j estimates the other user's message from r_j
  int r2 = receive(bits2, y2f, c2f, !cfg.one_way());
  out.logits_b1 = decode("u2", r2);
  if (!cfg.one_way()) {
    int r1 = receive(bits1, y1f, c1f, true);
    out.logits_b2 = decode("u1", r1);
  }
  return out;
}

// Message bits for one trial, drawn uniformly from per-trial substreams so any
// batch partition sees identical data.
inline Bits draw_bits(std::uint64_t master_seed, std::uint64_t purpose, std::uint64_t trial,
                      int count) {
  auto eng = substream(master_seed, purpose, trial);
  Bits b(static_cast<std::size_t>(count));
  for (auto& v : b) v = static_cast<std::uint8_t>(eng() & 1u);
  return b;
}

struct BatchOutcome {
  std::vector<std::uint8_t> err1;  // per trial: user 1's message decoded wrong
  std::vector<std::uint8_t> err2;
};

struct PowerAudit {
  double energy1 = 0;  // batch-mean sum of squared symbols per episode
  double energy2 = 0;
};

// Frozen-parameter inference runner for trained (or freshly initialized)
// systems. Per-trial bit and noise substreams make results independent of
// batch partitioning.
template <class T>
class TwoWaySystem {
 public:
  TwoWaySystem(ModelConfig cfg, ChannelConfig ch, ParameterSet<T> params)
      : cfg_(std::move(cfg)), ch_(ch), params_(std::move(params)) {
    cfg_.validate();
    ch_.validate();
    pe_ = cfg_.attention() ? positional_encoding<T>(cfg_.tokens(), cfg_.model_dim)
                           : Tensor<T>(1, 1);
  }

  const ModelConfig& config() const { return cfg_; }
  const ChannelConfig& channel() const { return ch_; }
  ParameterSet<T>& params() { return params_; }

  BatchOutcome decode_batch(std::uint64_t master_seed, std::uint64_t trial_base, int n,
                            StatsMode mode = StatsMode::kStored) {
    const int bpt = cfg_.blocks_per_trial();
    const int episodes = n * (cfg_.attention() ? 1 : bpt);
    const int rows = episodes * (cfg_.attention() ? cfg_.tokens() : 1);
    const int m = cfg_.block_len;

    Tensor<T> bits1(rows, m), bits2(rows, m);
    std::vector<Bits> blocks1(static_cast<std::size_t>(rows)),
        blocks2(static_cast<std::size_t>(rows));
    for (int u = 0; u < n; ++u) {
      const std::uint64_t trial = trial_base + static_cast<std::uint64_t>(u);
      Bits b1 = draw_bits(master_seed, 11, trial, cfg_.message_len);
      Bits b2 = cfg_.one_way() ? Bits(static_cast<std::size_t>(cfg_.message_len), 0)
                               : draw_bits(master_seed, 12, trial, cfg_.message_len);
      auto sub1 = split_subblocks(b1, m);
      auto sub2 = split_subblocks(b2, m);
      for (int blk = 0; blk < cfg_.tokens(); ++blk) {
        const int row = u * cfg_.tokens() + blk;
        blocks1[static_cast<std::size_t>(row)] = sub1[static_cast<std::size_t>(blk)];
        blocks2[static_cast<std::size_t>(row)] = sub2[static_cast<std::size_t>(blk)];
        for (int j = 0; j < m; ++j) {
          bits1.data[static_cast<std::size_t>(row) * m + j] =
              static_cast<T>(sub1[static_cast<std::size_t>(blk)][static_cast<std::size_t>(j)]);
          bits2.data[static_cast<std::size_t>(row) * m + j] =
              static_cast<T>(sub2[static_cast<std::size_t>(blk)][static_cast<std::size_t>(j)]);
        }
      }
    }

    Graph<T> g(&params_, mode);
    EpisodeNodes ep = run_forward(g, bits1, bits2, master_seed, trial_base, episodes);

    BatchOutcome out;
    out.err1.assign(static_cast<std::size_t>(n), 0);
    out.err2.assign(static_cast<std::size_t>(n), 0);
    mark_errors(g, ep.logits_b1, blocks1, out.err1);
    if (!cfg_.one_way()) mark_errors(g, ep.logits_b2, blocks2, out.err2);
    return out;
  }

  PowerAudit power_audit(std::uint64_t master_seed, int trials,
                         StatsMode mode = StatsMode::kStored) {
    decode_batch(master_seed, 0, trials, mode);
    return last_audit_;
  }

 private:
  EpisodeNodes run_forward(Graph<T>& g, const Tensor<T>& bits1, const Tensor<T>& bits2,
                           std::uint64_t master_seed, std::uint64_t trial_base, int episodes) {
    const int tm = cfg_.t_uses();
    const int width = cfg_.symbol_width();
    const double v1 = ch_.noise_var1();
    const double v2 = ch_.noise_var2();
    std::vector<Tensor<T>> noise1(static_cast<std::size_t>(tm), Tensor<T>(episodes, width));
    std::vector<Tensor<T>> noise2(static_cast<std::size_t>(tm), Tensor<T>(episodes, width));
    const std::uint64_t ep_base = trial_base * static_cast<std::uint64_t>(
                                      cfg_.attention() ? 1 : cfg_.blocks_per_trial());
    for (int e = 0; e < episodes; ++e) {
      auto d1 = substream(master_seed, 1, ep_base + static_cast<std::uint64_t>(e));
      auto d2 = substream(master_seed, 2, ep_base + static_cast<std::uint64_t>(e));
      for (int t = 0; t < tm; ++t)
        for (int w = 0; w < width; ++w) {
          noise1[static_cast<std::size_t>(t)].data[static_cast<std::size_t>(e) * width + w] =
              static_cast<T>(gaussian(d1, v1));
          noise2[static_cast<std::size_t>(t)].data[static_cast<std::size_t>(e) * width + w] =
              static_cast<T>(gaussian(d2, v2));
        }
    }

    int b1 = g.input(bits1);
    int b2 = g.input(bits2);
    EpisodeNodes ep = episode_forward(g, cfg_, b1, b2, noise1, noise2, pe_,
                                      passive_echo_gain(cfg_, ch_));
    last_audit_ = audit(g, ep, episodes);
    return ep;
  }

  PowerAudit audit(const Graph<T>& g, const EpisodeNodes& ep, int episodes) const {
    PowerAudit a;
    auto total = [&](const std::vector<int>& cs) {
      double s = 0;
      for (int id : cs)
        for (T v : g.val(id).data) s += static_cast<double>(v) * static_cast<double>(v);
      return s / episodes;
    };
    a.energy1 = total(ep.c1);
    a.energy2 = total(ep.c2);
    return a;
  }

  void mark_errors(const Graph<T>& g, int logits, const std::vector<Bits>& truth,
                   std::vector<std::uint8_t>& err) {
    const auto& lv = g.val(logits);
    const int classes = cfg_.classes();
    const int rows_per_trial = cfg_.tokens();
    for (int row = 0; row < lv.rows(); ++row) {
      int best = 0;
      T bv = lv.data[static_cast<std::size_t>(row) * classes];
      for (int c = 1; c < classes; ++c) {
        T v = lv.data[static_cast<std::size_t>(row) * classes + c];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      if (static_cast<std::uint64_t>(best) != bits_to_index(truth[static_cast<std::size_t>(row)]))
        err[static_cast<std::size_t>(row / rows_per_trial)] = 1;
    }
  }

  ModelConfig cfg_;
  ChannelConfig ch_;
  ParameterSet<T> params_;
  Tensor<T> pe_;
  PowerAudit last_audit_;
};

}  // namespace twoway
