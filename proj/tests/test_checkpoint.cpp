#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <random>
#include <string>

#include "twoway/checkpoint.hpp"

using namespace twoway;

namespace {

std::string temp_path(const char* stem) {
  return std::string("ckpt_test_") + stem + ".bin";
}

ParameterSet<float> sample_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  ParameterSet<float> ps;
  ps.add("u1.enc.w0", Tensor<float>(4, 3));
  ps.add("u1.enc.b0", Tensor<float>::row({0, 0, 0}));
  ps.add("u2.power.w", Tensor<float>::row({1, 1, 1, 1}));
  ps.add("u1.power.mean", Tensor<float>::row({0, 0, 0, 0}), false);
  for (auto& e : ps.entries())
    for (std::size_t i = 0; i < e.value.count(); ++i) {
      e.value.data[i] = d(rng);
      e.m.data[i] = d(rng);
      e.v.data[i] = std::abs(d(rng));
    }
  return ps;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact", "[checkpoint]") {
  auto ps = sample_params(7);
  ps.set_steps(1234);
  const std::string path = temp_path("roundtrip");
  save_checkpoint(path, ps, 0xDEADBEEFull);

  auto loaded = load_checkpoint<float>(path, 0xDEADBEEFull);
  CHECK(loaded.config_fingerprint == 0xDEADBEEFull);
  CHECK(loaded.params.steps() == 1234);
  REQUIRE(loaded.params.size() == ps.size());
  for (int i = 0; i < ps.size(); ++i) {
    const auto& a = ps.entry(i);
    const auto& b = loaded.params.entry(i);
    CHECK(a.name == b.name);
    CHECK(a.trainable == b.trainable);
    CHECK(a.value.shape == b.value.shape);
    CHECK(a.value.data == b.value.data);
    CHECK(a.m.data == b.m.data);
    CHECK(a.v.data == b.v.data);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint restore into an existing set", "[checkpoint]") {
  auto src = sample_params(8);
  src.set_steps(55);
  auto dst = sample_params(9);
  restore_into(dst, src);
  CHECK(dst.steps() == 55);
  CHECK(dst.value("u1.enc.w0").data == src.value("u1.enc.w0").data);

  ParameterSet<float> other;
  other.add("different", Tensor<float>(1, 1));
  CHECK_THROWS_AS(restore_into(other, src), std::runtime_error);
}

TEST_CASE("checkpoint error handling", "[checkpoint]") {
  CHECK_THROWS_AS(load_checkpoint<float>("does_not_exist.bin"), std::runtime_error);

  const std::string path = temp_path("bad");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE this is not a checkpoint";
  }
  CHECK_THROWS_WITH(load_checkpoint<float>(path), Catch::Matchers::ContainsSubstring("bad magic"));

  auto ps = sample_params(10);
  save_checkpoint(path, ps, 42);
  CHECK_THROWS_WITH(load_checkpoint<float>(path, 43),
                    Catch::Matchers::ContainsSubstring("fingerprint"));

  // truncate mid-tensor
  {
    std::ifstream is(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  CHECK_THROWS_WITH(load_checkpoint<float>(path),
                    Catch::Matchers::ContainsSubstring("truncated"));
  std::remove(path.c_str());
}

TEST_CASE("config fingerprint is stable", "[checkpoint]") {
  CHECK(fnv1a64("") == 14695981039346656037ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("model=twlc,K=3,M=3,T=9") == fnv1a64("model=twlc,K=3,M=3,T=9"));
  CHECK(fnv1a64("model=twlc") != fnv1a64("model=twbaf"));
}
