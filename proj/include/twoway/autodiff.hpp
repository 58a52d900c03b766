#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "twoway/optimizer.hpp"
#include "twoway/tensor.hpp"

namespace twoway {

enum class Activation { kRelu, kGelu, kTanh };

// How normalization ops source and maintain their running statistics.
//  kEma        batch stats, exponential update of the stored buffers
//  kAccumulate batch stats, buffers collect sums for a calibration pass
//  kBatchOnly  batch stats, buffers untouched (gradient checks, quick eval)
//  kStored     stored stats only; errors if none were calibrated
enum class StatsMode { kEma, kAccumulate, kBatchOnly, kStored };

namespace detail {

inline double gelu_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
}

}  // namespace detail

// Sinusoidal position table, [seq_len, model_dim].
template <class T>
Tensor<T> positional_encoding(int seq_len, int model_dim) {
  if (seq_len <= 0 || model_dim <= 0)
    throw std::invalid_argument("positional_encoding: extents must be positive");
  Tensor<T> pe(seq_len, model_dim);
  for (int p = 0; p < seq_len; ++p)
    for (int j = 0; j < model_dim; ++j) {
      double w = std::pow(10000.0, -2.0 * (j / 2) / model_dim);
      double v = (j % 2 == 0) ? std::sin(p * w) : std::cos(p * w);
      pe.data[static_cast<std::size_t>(p) * model_dim + j] = static_cast<T>(v);
    }
  return pe;
}

// Define-by-run reverse-mode tape over 2D tensors. Parameters live in an
// external ParameterSet; their gradients accumulate there during backward().
template <class T>
class Graph {
 public:
  explicit Graph(ParameterSet<T>* ps = nullptr, StatsMode stats = StatsMode::kBatchOnly,
                 bool check_finite = true)
      : ps_(ps), stats_(stats), check_finite_(check_finite) {}

  StatsMode stats_mode() const { return stats_; }
  ParameterSet<T>* parameters() const { return ps_; }

  int input(Tensor<T> t) {
    Node n;
    n.op = Op::kInput;
    n.out = std::move(t);
    return push(std::move(n), "input");
  }

  int zeros(int r, int c) { return input(Tensor<T>(r, c)); }

  int param(const std::string& name) {
    if (!ps_) throw std::runtime_error("param: graph has no parameter set");
    const int idx = ps_->index(name);
    auto it = param_nodes_.find(idx);
    if (it != param_nodes_.end()) return it->second;
    Node n;
    n.op = Op::kParam;
    n.param_idx = idx;
    const int id = push(std::move(n), "param");
    param_nodes_.emplace(idx, id);
    return id;
  }

  // y = x W + b, bias broadcast over rows. Pass b = -1 for no bias.
  int dense(int x, int w, int b = -1) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (xv.cols() != wv.rows()) throw std::invalid_argument("dense: inner dimensions disagree");
    Node n;
    n.op = Op::kDense;
    n.in = {x, w};
    n.out = Tensor<T>(xv.rows(), wv.cols());
    n.out.map().noalias() = xv.map() * wv.map();
    if (b >= 0) {
      const auto& bv = val(b);
      if (bv.cols() != wv.cols() || bv.rows() != 1)
        throw std::invalid_argument("dense: bias shape disagrees");
      n.in.push_back(b);
      n.out.map().rowwise() += bv.map().row(0);
    }
    return push(std::move(n), "dense");
  }

  int add(int a, int b) { return binary(Op::kAdd, a, b, "add"); }
  int sub(int a, int b) { return binary(Op::kSub, a, b, "sub"); }

  int scale(int a, T s) {
    Node n;
    n.op = Op::kScale;
    n.in = {a};
    n.f0 = s;
    n.out = val(a);
    for (T& v : n.out.data) v *= s;
    return push(std::move(n), "scale");
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int r = val(parts[0]).rows(), c = 0;
    for (int p : parts) {
      if (val(p).rows() != r) throw std::invalid_argument("concat_cols: row counts disagree");
      c += val(p).cols();
    }
    Node n;
    n.op = Op::kConcat;
    n.in = parts;
    n.out = Tensor<T>(r, c);
    int at = 0;
    for (int p : parts) {
      const auto& pv = val(p);
      n.out.map().middleCols(at, pv.cols()) = pv.map();
      at += pv.cols();
    }
    return push(std::move(n), "concat_cols");
  }

  int act(int x, Activation kind) {
    Node n;
    n.op = Op::kAct;
    n.in = {x};
    n.i0 = static_cast<int>(kind);
    n.out = val(x);
    for (T& v : n.out.data) {
      double u = static_cast<double>(v);
      switch (kind) {
        case Activation::kRelu: v = u > 0 ? v : T(0); break;
        case Activation::kGelu: v = static_cast<T>(u * detail::gelu_cdf(u)); break;
        case Activation::kTanh: v = static_cast<T>(std::tanh(u)); break;
      }
    }
    return push(std::move(n), "act");
  }

  int layer_norm(int x, int gamma, int beta, T eps = static_cast<T>(1e-5)) {
    const auto& xv = val(x);
    const int r = xv.rows(), c = xv.cols();
    if (val(gamma).count() != static_cast<std::size_t>(c) ||
        val(beta).count() != static_cast<std::size_t>(c))
      throw std::invalid_argument("layer_norm: gamma/beta length disagrees");
    Node n;
    n.op = Op::kLayerNorm;
    n.in = {x, gamma, beta};
    n.f0 = eps;
    n.out = Tensor<T>(r, c);
    n.saved = {Tensor<T>(r, c), Tensor<T>(r, 1)};  // x_hat, inv_std
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    for (int i = 0; i < r; ++i) {
      double mu = 0, var = 0;
      for (int j = 0; j < c; ++j) mu += xv.data[idx(i, j, c)];
      mu /= c;
      for (int j = 0; j < c; ++j) {
        double d = xv.data[idx(i, j, c)] - mu;
        var += d * d;
      }
      var /= c;
      double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      n.saved[1].data[i] = static_cast<T>(inv);
      for (int j = 0; j < c; ++j) {
        double xh = (xv.data[idx(i, j, c)] - mu) * inv;
        n.saved[0].data[idx(i, j, c)] = static_cast<T>(xh);
        n.out.data[idx(i, j, c)] =
            static_cast<T>(xh * static_cast<double>(gv.data[j]) + static_cast<double>(bv.data[j]));
      }
    }
    return push(std::move(n), "layer_norm");
  }

  // out_row = x_row + table[row % seq_len]; rows are token-major per batch element.
  int add_positional(int x, const Tensor<T>& table, int seq_len) {
    const auto& xv = val(x);
    if (table.rows() != seq_len || table.cols() != xv.cols() || xv.rows() % seq_len != 0)
      throw std::invalid_argument("add_positional: table shape disagrees");
    Node n;
    n.op = Op::kAddPos;
    n.in = {x};
    n.i0 = seq_len;
    n.out = xv;
    for (int i = 0; i < xv.rows(); ++i)
      n.out.map().row(i) += table.map().row(i % seq_len);
    return push(std::move(n), "add_positional");
  }

  int reshape(int x, int r, int c) {
    const auto& xv = val(x);
    if (static_cast<std::size_t>(r) * c != xv.count())
      throw std::invalid_argument("reshape: element count disagrees");
    Node n;
    n.op = Op::kReshape;
    n.in = {x};
    n.out.shape = {r, c};
    n.out.data = xv.data;
    return push(std::move(n), "reshape");
  }

  int softmax_rows(int x) {
    const auto& xv = val(x);
    Node n;
    n.op = Op::kSoftmax;
    n.in = {x};
    n.out = Tensor<T>(xv.rows(), xv.cols());
    softmax_fill(xv, n.out);
    return push(std::move(n), "softmax_rows");
  }

  // Mean over rows of -log softmax(logits)[label], divided by denom instead of
  // the row count so per-token losses can sum within a batch element.
  int cross_entropy_mean(int logits, std::vector<int> labels, int denom) {
    const auto& lv = val(logits);
    const int r = lv.rows(), c = lv.cols();
    if (static_cast<int>(labels.size()) != r)
      throw std::invalid_argument("cross_entropy_mean: label count disagrees");
    for (int l : labels)
      if (l < 0 || l >= c) throw std::out_of_range("cross_entropy_mean: label out of range");
    if (denom <= 0) throw std::invalid_argument("cross_entropy_mean: denom must be positive");
    Node n;
    n.op = Op::kCrossEntropy;
    n.in = {logits};
    n.i0 = denom;
    n.labels = std::move(labels);
    n.saved = {Tensor<T>(r, c)};
    softmax_fill(lv, n.saved[0]);
    double total = 0;
    for (int i = 0; i < r; ++i) {
      double p = static_cast<double>(n.saved[0].data[idx(i, n.labels[i], c)]);
      total -= std::log(std::max(p, 1e-300));
    }
    n.out = Tensor<T>(1, 1);
    n.out.data[0] = static_cast<T>(total / denom);
    return push(std::move(n), "cross_entropy_mean");
  }

  // Multi-head self-attention over seq_len tokens per batch element.
  // in: x, then weight/bias pairs for query, key, value, output projections.
  int mhsa(int x, int wq, int bq, int wk, int bk, int wv, int bv, int wo, int bo, int seq_len,
           int heads) {
    const auto& xv = val(x);
    const int r = xv.rows(), h = xv.cols();
    if (seq_len <= 0 || r % seq_len != 0) throw std::invalid_argument("mhsa: rows not a multiple of seq_len");
    if (heads <= 0 || h % heads != 0) throw std::invalid_argument("mhsa: heads must divide width");
    const int batch = r / seq_len, dh = h / heads;
    Node n;
    n.op = Op::kMhsa;
    n.in = {x, wq, bq, wk, bk, wv, bv, wo, bo};
    n.i0 = seq_len;
    n.i1 = heads;
    Tensor<T> q(r, h), k(r, h), v(r, h), attn(batch * heads * seq_len, seq_len), ctx(r, h);
    q.map().noalias() = xv.map() * val(wq).map();
    q.map().rowwise() += val(bq).map().row(0);
    k.map().noalias() = xv.map() * val(wk).map();
    k.map().rowwise() += val(bk).map().row(0);
    v.map().noalias() = xv.map() * val(wv).map();
    v.map().rowwise() += val(bv).map().row(0);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<T> scores(seq_len, seq_len);
    for (int b = 0; b < batch; ++b)
      for (int hd = 0; hd < heads; ++hd) {
        auto qb = q.map().block(b * seq_len, hd * dh, seq_len, dh);
        auto kb = k.map().block(b * seq_len, hd * dh, seq_len, dh);
        auto vb = v.map().block(b * seq_len, hd * dh, seq_len, dh);
        scores.map().noalias() = qb * kb.transpose() * inv_sqrt;
        auto ab = attn.map().middleRows((b * heads + hd) * seq_len, seq_len);
        Tensor<T> sm(seq_len, seq_len);
        softmax_fill(scores, sm);
        ab = sm.map();
        ctx.map().block(b * seq_len, hd * dh, seq_len, dh).noalias() = ab * vb;
      }
    n.out = Tensor<T>(r, h);
    n.out.map().noalias() = ctx.map() * val(wo).map();
    n.out.map().rowwise() += val(bo).map().row(0);
    n.saved = {std::move(q), std::move(k), std::move(v), std::move(attn), std::move(ctx)};
    return push(std::move(n), "mhsa");
  }

  // Power reallocation for time index t: standardize x over the whole batch
  // (all rows and columns pooled), then scale by w[t]. Statistics follow the
  // graph StatsMode; buffers are the named ParameterSet entries.
  int reallocate(int x, int w, int t, int mean_buf, int var_buf, int count_buf) {
    if (!ps_) throw std::runtime_error("reallocate: graph has no parameter set");
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (t < 0 || static_cast<std::size_t>(t) >= wv.count())
      throw std::out_of_range("reallocate: time index out of range");
    Node n;
    n.op = Op::kReallocate;
    n.in = {x, w};
    n.i0 = t;
    n.s0 = mean_buf;
    n.s1 = var_buf;
    n.s2 = count_buf;
    double mu, var;
    batch_stats(xv, t, mean_buf, var_buf, count_buf, "reallocate", &mu, &var);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    const double wt = static_cast<double>(wv.data[t]);
    n.saved = {Tensor<T>(xv.rows(), xv.cols())};
    n.out = Tensor<T>(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.count(); ++i) {
      double xh = (static_cast<double>(xv.data[i]) - mu) * inv;
      n.saved[0].data[i] = static_cast<T>(xh);
      n.out.data[i] = static_cast<T>(wt * xh);
    }
    n.f0 = static_cast<T>(inv);
    return push(std::move(n), "reallocate");
  }

  // y = tanh(x - column_mean(x)); column means pool over the batch dimension.
  int tanh_center(int x, int mean_buf, int count_buf) {
    if (!ps_) throw std::runtime_error("tanh_center: graph has no parameter set");
    const auto& xv = val(x);
    const int r = xv.rows(), c = xv.cols();
    auto& mbuf = ps_->entry(mean_buf).value;
    auto& cbuf = ps_->entry(count_buf).value;
    if (mbuf.count() != static_cast<std::size_t>(c))
      throw std::invalid_argument("tanh_center: mean buffer length disagrees");
    Node n;
    n.op = Op::kTanhCenter;
    n.in = {x};
    n.s0 = mean_buf;
    n.s1 = count_buf;
    std::vector<double> mu(static_cast<std::size_t>(c), 0.0);
    if (stats_ == StatsMode::kStored) {
      if (cbuf.data[0] <= T(0))
        throw std::runtime_error("tanh_center: stored statistics requested but none calibrated");
      for (int j = 0; j < c; ++j) mu[j] = static_cast<double>(mbuf.data[j]);
    } else {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) mu[j] += static_cast<double>(xv.data[idx(i, j, c)]);
      for (int j = 0; j < c; ++j) mu[j] /= r;
      if (stats_ == StatsMode::kEma) {
        for (int j = 0; j < c; ++j)
          mbuf.data[j] = static_cast<T>(0.99 * static_cast<double>(mbuf.data[j]) + 0.01 * mu[j]);
        cbuf.data[0] = T(1);
      } else if (stats_ == StatsMode::kAccumulate) {
        for (int j = 0; j < c; ++j) mbuf.data[j] += static_cast<T>(mu[j]);
        cbuf.data[0] += T(1);
      }
    }
    n.out = Tensor<T>(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        n.out.data[idx(i, j, c)] =
            static_cast<T>(std::tanh(static_cast<double>(xv.data[idx(i, j, c)]) - mu[j]));
    return push(std::move(n), "tanh_center");
  }

  const Tensor<T>& val(int id) const {
    const Node& n = node(id);
    if (n.op == Op::kParam) return ps_->entry(n.param_idx).value;
    return n.out;
  }

  T scalar(int id) const {
    const auto& v = val(id);
    if (v.count() != 1) throw std::invalid_argument("scalar: node is not scalar");
    return v.data[0];
  }

  // Gradient accumulated at a node during backward (empty if untouched).
  const Tensor<T>& grad(int id) const { return node(id).grad; }

  // Reverse sweep from a scalar loss. Parameter gradients accumulate into the
  // ParameterSet; a second call on the same tape is rejected.
  void backward(int loss) {
    if (backward_done_) throw std::runtime_error("backward: tape already consumed");
    if (val(loss).count() != 1) throw std::invalid_argument("backward: loss must be scalar");
    backward_done_ = true;
    grad_buf(loss).data[0] = T(1);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty()) continue;
      backward_node(n);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    kInput,
    kParam,
    kDense,
    kAdd,
    kSub,
    kScale,
    kConcat,
    kAct,
    kLayerNorm,
    kAddPos,
    kReshape,
    kSoftmax,
    kCrossEntropy,
    kMhsa,
    kReallocate,
    kTanhCenter,
  };

  struct Node {
    Op op = Op::kInput;
    std::vector<int> in;
    Tensor<T> out;
    Tensor<T> grad;
    std::vector<Tensor<T>> saved;
    std::vector<int> labels;
    int param_idx = -1;
    int i0 = 0, i1 = 0;       // op ints: activation kind, seq_len/heads, t, denom
    int s0 = -1, s1 = -1, s2 = -1;  // ParameterSet buffer indices
    T f0 = T(0);
  };

  static std::size_t idx(int i, int j, int c) {
    return static_cast<std::size_t>(i) * c + j;
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  int push(Node n, const char* name) {
    if (check_finite_ && !n.out.empty() && !n.out.all_finite())
      throw std::runtime_error(std::string("graph: non-finite values after ") + name);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int binary(Op op, int a, int b, const char* name) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
      throw std::invalid_argument(std::string(name) + ": shapes disagree");
    Node n;
    n.op = op;
    n.in = {a, b};
    n.out = av;
    if (op == Op::kAdd)
      n.out.map() += bv.map();
    else
      n.out.map() -= bv.map();
    return push(std::move(n), name);
  }

  static void softmax_fill(const Tensor<T>& x, Tensor<T>& out) {
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
      double m = -1e300;
      for (int j = 0; j < c; ++j) m = std::max(m, static_cast<double>(x.data[idx(i, j, c)]));
      double s = 0;
      for (int j = 0; j < c; ++j) {
        double e = std::exp(static_cast<double>(x.data[idx(i, j, c)]) - m);
        out.data[idx(i, j, c)] = static_cast<T>(e);
        s += e;
      }
      for (int j = 0; j < c; ++j)
        out.data[idx(i, j, c)] = static_cast<T>(static_cast<double>(out.data[idx(i, j, c)]) / s);
    }
  }

  // Pooled mean/variance over all entries, honoring the stats mode and the
  // per-time-index running buffers.
  void batch_stats(const Tensor<T>& x, int t, int mean_buf, int var_buf, int count_buf,
                   const char* who, double* mu_out, double* var_out) {
    auto& mbuf = ps_->entry(mean_buf).value;
    auto& vbuf = ps_->entry(var_buf).value;
    auto& cbuf = ps_->entry(count_buf).value;
    if (stats_ == StatsMode::kStored) {
      if (cbuf.data[t] <= T(0))
        throw std::runtime_error(std::string(who) +
                                 ": stored statistics requested but none calibrated");
      *mu_out = static_cast<double>(mbuf.data[t]);
      *var_out = static_cast<double>(vbuf.data[t]);
      return;
    }
    const std::size_t n = x.count();
    double mu = 0;
    for (T v : x.data) mu += static_cast<double>(v);
    mu /= static_cast<double>(n);
    double var = 0;
    for (T v : x.data) {
      double d = static_cast<double>(v) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    if (stats_ == StatsMode::kEma) {
      mbuf.data[t] = static_cast<T>(0.99 * static_cast<double>(mbuf.data[t]) + 0.01 * mu);
      vbuf.data[t] = static_cast<T>(0.99 * static_cast<double>(vbuf.data[t]) + 0.01 * var);
      cbuf.data[t] = T(1);
    } else if (stats_ == StatsMode::kAccumulate) {
      mbuf.data[t] += static_cast<T>(mu);
      vbuf.data[t] += static_cast<T>(var);
      cbuf.data[t] += T(1);
    }
    *mu_out = mu;
    *var_out = var;
  }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) {
      const auto& v = val(id);
      n.grad = Tensor<T>(v.rows(), v.cols());
    }
    return n.grad;
  }

  void backward_node(Node& n) {
    const Tensor<T>& g = n.grad;
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kParam: {
        auto& pg = ps_->entry(n.param_idx).grad;
        for (std::size_t i = 0; i < pg.count(); ++i) pg.data[i] += g.data[i];
        break;
      }
      case Op::kDense: {
        const auto& xv = val(n.in[0]);
        const auto& wv = val(n.in[1]);
        grad_buf(n.in[0]).map().noalias() += g.map() * wv.map().transpose();
        grad_buf(n.in[1]).map().noalias() += xv.map().transpose() * g.map();
        if (n.in.size() == 3) grad_buf(n.in[2]).map() += g.map().colwise().sum();
        break;
      }
      case Op::kAdd:
        grad_buf(n.in[0]).map() += g.map();
        grad_buf(n.in[1]).map() += g.map();
        break;
      case Op::kSub:
        grad_buf(n.in[0]).map() += g.map();
        grad_buf(n.in[1]).map() -= g.map();
        break;
      case Op::kScale:
        grad_buf(n.in[0]).map() += n.f0 * g.map();
        break;
      case Op::kConcat: {
        int at = 0;
        for (int p : n.in) {
          const int pc = val(p).cols();
          grad_buf(p).map() += g.map().middleCols(at, pc);
          at += pc;
        }
        break;
      }
      case Op::kAct: {
        const auto& xv = val(n.in[0]);
        auto& gx = grad_buf(n.in[0]);
        const auto kind = static_cast<Activation>(n.i0);
        for (std::size_t i = 0; i < xv.count(); ++i) {
          double x = static_cast<double>(xv.data[i]);
          double d;
          switch (kind) {
            case Activation::kRelu: d = x > 0 ? 1.0 : 0.0; break;
            case Activation::kGelu: d = detail::gelu_cdf(x) + x * detail::gelu_pdf(x); break;
            default: {
              double y = static_cast<double>(n.out.data[i]);
              d = 1.0 - y * y;
            }
          }
          gx.data[i] += static_cast<T>(static_cast<double>(g.data[i]) * d);
        }
        break;
      }
      case Op::kLayerNorm: {
        const auto& xh = n.saved[0];
        const auto& inv = n.saved[1];
        const auto& gv = val(n.in[1]);
        const int r = xh.rows(), c = xh.cols();
        auto& gx = grad_buf(n.in[0]);
        auto& gg = grad_buf(n.in[1]);
        auto& gb = grad_buf(n.in[2]);
        for (int i = 0; i < r; ++i) {
          double sum_gxh = 0, sum_gxh_xh = 0;
          for (int j = 0; j < c; ++j) {
            double gh = static_cast<double>(g.data[idx(i, j, c)]) * static_cast<double>(gv.data[j]);
            sum_gxh += gh;
            sum_gxh_xh += gh * static_cast<double>(xh.data[idx(i, j, c)]);
            gg.data[j] += static_cast<T>(static_cast<double>(g.data[idx(i, j, c)]) *
                                         static_cast<double>(xh.data[idx(i, j, c)]));
            gb.data[j] += g.data[idx(i, j, c)];
          }
          for (int j = 0; j < c; ++j) {
            double gh = static_cast<double>(g.data[idx(i, j, c)]) * static_cast<double>(gv.data[j]);
            double xhi = static_cast<double>(xh.data[idx(i, j, c)]);
            gx.data[idx(i, j, c)] += static_cast<T>(
                static_cast<double>(inv.data[i]) * (gh - sum_gxh / c - xhi * sum_gxh_xh / c));
          }
        }
        break;
      }
      case Op::kAddPos:
        grad_buf(n.in[0]).map() += g.map();
        break;
      case Op::kReshape: {
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t i = 0; i < gx.count(); ++i) gx.data[i] += g.data[i];
        break;
      }
      case Op::kSoftmax: {
        const auto& y = n.out;
        const int r = y.rows(), c = y.cols();
        auto& gx = grad_buf(n.in[0]);
        for (int i = 0; i < r; ++i) {
          double dot = 0;
          for (int j = 0; j < c; ++j)
            dot += static_cast<double>(g.data[idx(i, j, c)]) *
                   static_cast<double>(y.data[idx(i, j, c)]);
          for (int j = 0; j < c; ++j)
            gx.data[idx(i, j, c)] +=
                static_cast<T>(static_cast<double>(y.data[idx(i, j, c)]) *
                               (static_cast<double>(g.data[idx(i, j, c)]) - dot));
        }
        break;
      }
      case Op::kCrossEntropy: {
        const auto& probs = n.saved[0];
        const int r = probs.rows(), c = probs.cols();
        const double go = static_cast<double>(g.data[0]) / n.i0;
        auto& gx = grad_buf(n.in[0]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            double p = static_cast<double>(probs.data[idx(i, j, c)]);
            double onehot = (j == n.labels[i]) ? 1.0 : 0.0;
            gx.data[idx(i, j, c)] += static_cast<T>(go * (p - onehot));
          }
        break;
      }
      case Op::kMhsa:
        backward_mhsa(n);
        break;
      case Op::kReallocate: {
        const auto& xh = n.saved[0];
        const auto& wv = val(n.in[1]);
        const int t = n.i0;
        const double wt = static_cast<double>(wv.data[t]);
        const double inv = static_cast<double>(n.f0);
        const std::size_t cnt = xh.count();
        auto& gx = grad_buf(n.in[0]);
        auto& gw = grad_buf(n.in[1]);
        double sum_g = 0, sum_gxh = 0;
        for (std::size_t i = 0; i < cnt; ++i) {
          double gi = static_cast<double>(g.data[i]);
          sum_g += gi;
          sum_gxh += gi * static_cast<double>(xh.data[i]);
        }
        gw.data[t] += static_cast<T>(sum_gxh);
        const bool batch_stats_used = stats_ != StatsMode::kStored;
        for (std::size_t i = 0; i < cnt; ++i) {
          double gi = static_cast<double>(g.data[i]);
          double d;
          if (batch_stats_used) {
            d = wt * inv *
                (gi - sum_g / static_cast<double>(cnt) -
                 static_cast<double>(xh.data[i]) * sum_gxh / static_cast<double>(cnt));
          } else {
            d = wt * inv * gi;
          }
          gx.data[i] += static_cast<T>(d);
        }
        break;
      }
      case Op::kTanhCenter: {
        const auto& y = n.out;
        const int r = y.rows(), c = y.cols();
        auto& gx = grad_buf(n.in[0]);
        const bool batch_stats_used = stats_ != StatsMode::kStored;
        std::vector<double> col_mean(static_cast<std::size_t>(c), 0.0);
        std::vector<double> gh(static_cast<std::size_t>(r) * c);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            double yy = static_cast<double>(y.data[idx(i, j, c)]);
            gh[idx(i, j, c)] = static_cast<double>(g.data[idx(i, j, c)]) * (1.0 - yy * yy);
            col_mean[j] += gh[idx(i, j, c)];
          }
        for (int j = 0; j < c; ++j) col_mean[j] /= r;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            gx.data[idx(i, j, c)] +=
                static_cast<T>(batch_stats_used ? gh[idx(i, j, c)] - col_mean[j]
                                                : gh[idx(i, j, c)]);
        break;
      }
    }
  }

  void backward_mhsa(Node& n) {
    const Tensor<T>& g = n.grad;
    const auto& xv = val(n.in[0]);
    const int r = xv.rows(), h = xv.cols();
    const int seq = n.i0, heads = n.i1;
    const int batch = r / seq, dh = h / heads;
    const auto& q = n.saved[0];
    const auto& k = n.saved[1];
    const auto& v = n.saved[2];
    const auto& attn = n.saved[3];
    const auto& ctx = n.saved[4];
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    grad_buf(n.in[7]).map().noalias() += ctx.map().transpose() * g.map();
    grad_buf(n.in[8]).map() += g.map().colwise().sum();
    Tensor<T> gctx(r, h), gq(r, h), gk(r, h), gv(r, h);
    gctx.map().noalias() = g.map() * val(n.in[7]).map().transpose();

    Tensor<T> ga(seq, seq), gs(seq, seq);
    for (int b = 0; b < batch; ++b)
      for (int hd = 0; hd < heads; ++hd) {
        auto qb = q.map().block(b * seq, hd * dh, seq, dh);
        auto kb = k.map().block(b * seq, hd * dh, seq, dh);
        auto vb = v.map().block(b * seq, hd * dh, seq, dh);
        auto ab = attn.map().middleRows((b * heads + hd) * seq, seq);
        auto gcb = gctx.map().block(b * seq, hd * dh, seq, dh);
        ga.map().noalias() = gcb * vb.transpose();
        gv.map().block(b * seq, hd * dh, seq, dh).noalias() = ab.transpose() * gcb;
        for (int i = 0; i < seq; ++i) {
          double dot = 0;
          for (int j = 0; j < seq; ++j)
            dot += static_cast<double>(ga.data[idx(i, j, seq)]) * static_cast<double>(ab(i, j));
          for (int j = 0; j < seq; ++j)
            gs.data[idx(i, j, seq)] = static_cast<T>(
                static_cast<double>(ab(i, j)) *
                (static_cast<double>(ga.data[idx(i, j, seq)]) - dot));
        }
        gq.map().block(b * seq, hd * dh, seq, dh).noalias() = gs.map() * kb * inv_sqrt;
        gk.map().block(b * seq, hd * dh, seq, dh).noalias() = gs.map().transpose() * qb * inv_sqrt;
      }

    auto proj_back = [&](const Tensor<T>& gp, int wi, int bi) {
      grad_buf(n.in[0]).map().noalias() += gp.map() * val(n.in[wi]).map().transpose();
      grad_buf(n.in[wi]).map().noalias() += xv.map().transpose() * gp.map();
      grad_buf(n.in[bi]).map() += gp.map().colwise().sum();
    };
    proj_back(gq, 1, 2);
    proj_back(gk, 3, 4);
    proj_back(gv, 5, 6);
  }

  ParameterSet<T>* ps_;
  StatsMode stats_;
  bool check_finite_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
};

}  // namespace twoway
