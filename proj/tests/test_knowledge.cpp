#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "twoway/knowledge.hpp"

using namespace twoway;

TEST_CASE("init_knowledge layout", "[knowledge]") {
  // K=3, T=9: [b, 0x8, 0x8], total length 19
  auto q = init_knowledge({1, 0, 1}, 9);
  CHECK(q.size() == 19);
  CHECK(q.filled == 0);
  auto flat = q.flatten();
  REQUIRE(flat.size() == 19);
  CHECK(flat[0] == 1.0);
  CHECK(flat[1] == 0.0);
  CHECK(flat[2] == 1.0);
  for (int i = 3; i < 19; ++i) CHECK(flat[i] == 0.0);

  // degenerate single use: no history slots
  auto q1 = init_knowledge({0}, 1);
  CHECK(q1.size() == 1);
  CHECK(q1.flatten() == std::vector<double>{0.0});

  auto q2 = init_knowledge({1, 1}, 3);
  CHECK(q2.size() == 6);
  auto f2 = q2.flatten();
  for (int i = 2; i < 6; ++i) CHECK(f2[i] == 0.0);

  CHECK_THROWS(init_knowledge({}, 3));
  CHECK_THROWS(init_knowledge({1}, 0));
  CHECK_THROWS(init_knowledge({2}, 3));
}

TEST_CASE("update_knowledge fills slots in order", "[knowledge]") {
  auto q = init_knowledge({1, 0, 1}, 3);
  auto q2 = update_knowledge(q, 0.4, 1.1, FeedbackMode::Raw);
  CHECK(q2.flatten() == std::vector<double>{1, 0, 1, 0.4, 0, 1.1, 0});
  CHECK(q2.filled == 1);
  // original untouched
  CHECK(q.filled == 0);

  // two updates reach the [b, c1, c2, y1, y2] layout
  auto q3 = update_knowledge(q2, -0.2, 0.9, FeedbackMode::Raw);
  CHECK(q3.flatten() == std::vector<double>{1, 0, 1, 0.4, -0.2, 1.1, 0.9});
  CHECK(q3.filled == 2);

  // the final channel use produces no update
  CHECK_THROWS_AS(update_knowledge(q3, 0.0, 0.0, FeedbackMode::Raw), std::out_of_range);
}

TEST_CASE("residual feedback stores y - c", "[knowledge]") {
  auto q = init_knowledge({0}, 2);
  auto q2 = update_knowledge(q, 0.4, 1.1, FeedbackMode::Residual);
  CHECK(q2.recv_history[0] == Catch::Approx(0.7));
  CHECK(q2.sent_history[0] == 0.4);
}

TEST_CASE("receive vector is [bits, y, c]", "[knowledge]") {
  auto r = build_receive_vector({1}, {0.5}, {-0.5});
  CHECK(r.flatten() == std::vector<double>{1.0, 0.5, -0.5});

  Bits b(3, 1);
  std::vector<double> y(9, 0.1), c(9, -0.1);
  auto r2 = build_receive_vector(b, y, c);
  CHECK(r2.size() == 21);

  CHECK_THROWS(build_receive_vector({}, {0.5}, {-0.5}));
  CHECK_THROWS(build_receive_vector({1}, {0.5, 0.2}, {-0.5}));
}

TEST_CASE("bits_to_index is big-endian", "[knowledge]") {
  CHECK(bits_to_index({0, 0, 0}) == 0);
  CHECK(bits_to_index({1, 0, 1}) == 5);
  CHECK(bits_to_index({1, 1, 1}) == 7);
  CHECK_THROWS(bits_to_index({}));
  CHECK_THROWS(bits_to_index({2}));

  CHECK(index_to_bits(0, 3) == Bits{0, 0, 0});
  CHECK(index_to_bits(7, 3) == Bits{1, 1, 1});
  CHECK(index_to_bits(2, 2) == Bits{1, 0});
  CHECK_THROWS_AS(index_to_bits(8, 3), std::out_of_range);
  CHECK_THROWS(index_to_bits(0, 0));
}

TEST_CASE("bits/index round-trip is a bijection for M <= 10", "[knowledge]") {
  for (int m = 1; m <= 10; ++m) {
    for (std::uint64_t k = 0; k < (std::uint64_t{1} << m); ++k) {
      auto bits = index_to_bits(k, m);
      REQUIRE(bits_to_index(bits) == k);
    }
  }
}

TEST_CASE("split_subblocks preserves order and content", "[knowledge]") {
  auto blocks = split_subblocks({1, 0, 1, 1, 0, 0}, 3);
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0] == Bits{1, 0, 1});
  CHECK(blocks[1] == Bits{1, 0, 0});

  // K == M: identity
  auto one = split_subblocks({1, 0}, 2);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == Bits{1, 0});

  CHECK_THROWS(split_subblocks({1, 0, 1, 1}, 3));
}

TEST_CASE("split then merge is the identity", "[knowledge]") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 6);
    const int nblocks = 1 + static_cast<int>(rng() % 5);
    Bits stream(static_cast<std::size_t>(m) * nblocks);
    for (auto& b : stream) b = static_cast<std::uint8_t>(rng() & 1);
    auto blocks = split_subblocks(stream, m);
    Bits merged;
    for (const auto& blk : blocks) merged.insert(merged.end(), blk.begin(), blk.end());
    REQUIRE(merged == stream);
  }
}

TEST_CASE("knowledge layout matches the update equations exhaustively", "[knowledge]") {
  // (M, T_M) in {(1,2), (3,9), (2,4)}: after t-1 updates the vector is
  // [bits | c^1..c^{t-1} | 0s | y^1..y^{t-1} | 0s]
  struct Case { int m, t; };
  for (auto [m, t] : {Case{1, 2}, Case{3, 9}, Case{2, 4}}) {
    Bits bits(m);
    for (int i = 0; i < m; ++i) bits[i] = static_cast<std::uint8_t>(i % 2);
    auto q = init_knowledge(bits, t);
    std::vector<double> cs, ys;
    for (int step = 1; step < t; ++step) {
      const double c = 0.1 * step, y = -0.2 * step;
      q = update_knowledge(q, c, y, FeedbackMode::Raw);
      cs.push_back(c);
      ys.push_back(y);
      auto flat = q.flatten();
      REQUIRE(static_cast<int>(flat.size()) == m + 2 * (t - 1));
      for (int i = 0; i < m; ++i) REQUIRE(flat[i] == static_cast<double>(bits[i]));
      for (int i = 0; i < t - 1; ++i) {
        const double want_c = i < step ? cs[i] : 0.0;
        const double want_y = i < step ? ys[i] : 0.0;
        REQUIRE(flat[m + i] == want_c);
        REQUIRE(flat[m + (t - 1) + i] == want_y);
      }
    }
  }
}
