#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "helpers.hpp"
#include "nexus/serialize.hpp"

using namespace nexus;

static std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST_CASE("NXTN header bytes are exact") {
  Tensor t = Tensor::from_data({2, 3}, {0, 1, 2, 3, 4, 5});
  std::ostringstream os(std::ios::binary);
  write_nxtn(os, t, kNxtnF64);
  std::string s = os.str();
  REQUIRE(s.size() == 4 + 4 + 16 + 48);
  const unsigned char expect[8] = {0x4E, 0x58, 0x54, 0x4E, 1, 2, 1, 0};
  CHECK(std::memcmp(s.data(), expect, 8) == 0);
  // extents little endian: 2 then 3
  CHECK(uint8_t(s[8]) == 2);
  CHECK(uint8_t(s[16]) == 3);
  for (int i = 9; i < 16; ++i) CHECK(s[size_t(i)] == 0);
}

TEST_CASE("NXTN f64 round trip is bit exact") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    int rank = int(rng.uniform_int(4)) + 1;
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(int64_t(rng.uniform_int(5)) + 1);
    Tensor t = testutil::random_tensor(shape, rng, false, -1e6, 1e6);
    t.data()[0] = -0.0;  // negative zero must survive
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    write_nxtn(ss, t, kNxtnF64);
    Tensor u = read_nxtn(ss);
    REQUIRE(u.shape() == t.shape());
    CHECK(std::memcmp(u.data(), t.data(), size_t(t.numel()) * sizeof(double)) == 0);
  }
}

TEST_CASE("NXTN f32 round trip keeps seven digits") {
  Rng rng(32);
  Tensor t = testutil::random_tensor({4, 4}, rng);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_nxtn(ss, t, kNxtnF32);
  Tensor u = read_nxtn(ss);
  for (int i = 0; i < 16; ++i)
    CHECK(std::fabs(u.data()[i] - t.data()[i]) < 1e-6);
}

TEST_CASE("NXTN scalar rank 0 works") {
  Tensor t = Tensor::scalar(3.5);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_nxtn(ss, t);
  Tensor u = read_nxtn(ss);
  CHECK(u.rank() == 0);
  CHECK(u.data()[0] == 3.5);
}

TEST_CASE("corrupted magic or dtype is rejected") {
  Tensor t = Tensor::scalar(1.0);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_nxtn(ss, t);
  std::string s = ss.str();
  s[0] = 'X';
  std::istringstream bad(s, std::ios::binary);
  CHECK_THROWS_AS(read_nxtn(bad), IoError);

  std::string s2 = ss.str();
  s2[6] = 9;  // dtype
  std::istringstream bad2(s2, std::ios::binary);
  CHECK_THROWS_AS(read_nxtn(bad2), IoError);

  std::string s3 = ss.str();
  s3[7] = 1;  // pad byte must be zero
  std::istringstream bad3(s3, std::ios::binary);
  CHECK_THROWS_AS(read_nxtn(bad3), IoError);
}

TEST_CASE("checkpoint round trip preserves names, shapes, values, meta") {
  Rng rng(33);
  ParamMap params;
  params.emplace_back("block.weight", testutil::random_tensor({3, 2, 3, 3}, rng));
  params.emplace_back("block.bias", testutil::random_tensor({3}, rng));
  params.emplace_back("head.gamma", testutil::random_tensor({7}, rng));
  std::string path = tmp_path("nexus_test_ckpt.bin");
  write_checkpoint(path, params, R"({"step": 17, "note": "x"})");
  Checkpoint ck = read_checkpoint(path);
  REQUIRE(ck.params.size() == 3);
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(ck.params[i].first == params[i].first);
    REQUIRE(ck.params[i].second.shape() == params[i].second.shape());
    CHECK(std::memcmp(ck.params[i].second.data(), params[i].second.data(),
                      size_t(params[i].second.numel()) * sizeof(double)) == 0);
  }
  CHECK(ck.meta_json.find("17") != std::string::npos);
  CHECK(ck.has("head.gamma"));
  CHECK_FALSE(ck.has("missing"));
  std::filesystem::remove(path);
}

TEST_CASE("load_into copies by name and rejects shape mismatch") {
  Rng rng(34);
  ParamMap saved;
  saved.emplace_back("w", testutil::random_tensor({2, 2}, rng));
  std::string path = tmp_path("nexus_test_ckpt2.bin");
  write_checkpoint(path, saved, "");
  Checkpoint ck = read_checkpoint(path);

  ParamMap dst;
  dst.emplace_back("w", Tensor::zeros({2, 2}, true));
  load_into(ck, dst);
  CHECK(std::memcmp(dst[0].second.data(), saved[0].second.data(), 4 * sizeof(double)) == 0);
  CHECK(dst[0].second.requires_grad());  // flags untouched

  ParamMap bad;
  bad.emplace_back("w", Tensor::zeros({3, 2}));
  CHECK_THROWS_AS(load_into(ck, bad), IoError);
  std::filesystem::remove(path);
}
