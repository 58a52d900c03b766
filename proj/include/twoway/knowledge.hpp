#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace twoway {

using Bits = std::vector<std::uint8_t>;

// What the recv-history slot stores: the raw received symbol y, or the
// residual y - c after subtracting the user's own transmission.
enum class FeedbackMode { Raw, Residual };

inline void check_binary(const Bits& bits, const char* where) {
  for (auto b : bits)
    if (b > 1) throw std::invalid_argument(std::string(where) + ": entries must be 0 or 1");
}

// Transmit-side state q for one sub-block: [bits | c^1..c^{t-1} | 0s | y^1..y^{t-1} | 0s].
// Slots at index >= filled are exactly zero.
struct KnowledgeVector {
  Bits bits;                          // length M
  std::vector<double> sent_history;   // length T_M - 1
  std::vector<double> recv_history;   // length T_M - 1
  int filled = 0;

  int message_len() const { return static_cast<int>(bits.size()); }
  int history_len() const { return static_cast<int>(sent_history.size()); }
  int size() const { return message_len() + 2 * history_len(); }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(size());
    for (auto b : bits) out.push_back(static_cast<double>(b));
    out.insert(out.end(), sent_history.begin(), sent_history.end());
    out.insert(out.end(), recv_history.begin(), recv_history.end());
    return out;
  }
};

inline KnowledgeVector init_knowledge(const Bits& bits, int t_uses) {
  if (bits.empty()) throw std::invalid_argument("init_knowledge: empty message");
  if (t_uses < 1) throw std::invalid_argument("init_knowledge: t_uses must be >= 1");
  check_binary(bits, "init_knowledge");
  KnowledgeVector q;
  q.bits = bits;
  q.sent_history.assign(t_uses - 1, 0.0);
  q.recv_history.assign(t_uses - 1, 0.0);
  q.filled = 0;
  return q;
}

// Records (c_t, y_t) after one channel use. The final use produces no update.
inline KnowledgeVector update_knowledge(const KnowledgeVector& q, double c_t,
                                        double y_t, FeedbackMode mode) {
  if (q.filled >= q.history_len())
    throw std::out_of_range("update_knowledge: history already full");
  KnowledgeVector out = q;
  out.sent_history[q.filled] = c_t;
  out.recv_history[q.filled] = (mode == FeedbackMode::Raw) ? y_t : y_t - c_t;
  out.filled = q.filled + 1;
  return out;
}

// Receive-side state r = [bits, y, c] formed after the last channel use.
struct ReceiveVector {
  Bits bits;
  std::vector<double> received;
  std::vector<double> sent;

  int size() const {
    return static_cast<int>(bits.size() + received.size() + sent.size());
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(size());
    for (auto b : bits) out.push_back(static_cast<double>(b));
    out.insert(out.end(), received.begin(), received.end());
    out.insert(out.end(), sent.begin(), sent.end());
    return out;
  }
};

inline ReceiveVector build_receive_vector(const Bits& bits,
                                          const std::vector<double>& received,
                                          const std::vector<double>& sent) {
  if (bits.empty()) throw std::invalid_argument("build_receive_vector: empty message");
  if (received.size() != sent.size())
    throw std::invalid_argument("build_receive_vector: received/sent length mismatch");
  check_binary(bits, "build_receive_vector");
  return ReceiveVector{bits, received, sent};
}

// Big-endian positional value: bits[0] is most significant.
inline std::uint64_t bits_to_index(const Bits& bits) {
  if (bits.empty() || bits.size() > 63)
    throw std::invalid_argument("bits_to_index: length must be in [1, 63]");
  check_binary(bits, "bits_to_index");
  std::uint64_t k = 0;
  for (auto b : bits) k = (k << 1) | b;
  return k;
}

inline Bits index_to_bits(std::uint64_t k, int m) {
  if (m < 1 || m > 63) throw std::invalid_argument("index_to_bits: m must be in [1, 63]");
  if (k >= (std::uint64_t{1} << m))
    throw std::out_of_range("index_to_bits: index out of range");
  Bits bits(m);
  for (int i = m - 1; i >= 0; --i) {
    bits[i] = static_cast<std::uint8_t>(k & 1);
    k >>= 1;
  }
  return bits;
}

// Splits a length-K stream into K/M blocks of length M, in order.
inline std::vector<Bits> split_subblocks(const Bits& bits, int m) {
  if (m < 1) throw std::invalid_argument("split_subblocks: m must be >= 1");
  if (bits.empty() || bits.size() % static_cast<std::size_t>(m) != 0)
    throw std::invalid_argument("split_subblocks: m must divide the stream length");
  std::vector<Bits> blocks;
  blocks.reserve(bits.size() / m);
  for (std::size_t i = 0; i < bits.size(); i += m)
    blocks.emplace_back(bits.begin() + i, bits.begin() + i + m);
  return blocks;
}

}  // namespace twoway
