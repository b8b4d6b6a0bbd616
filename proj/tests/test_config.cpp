#include <doctest.h>

#include <fstream>

#include "learn/config.hpp"
#include "learn/error.hpp"
#include "support.hpp"

using namespace learn;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected a learn::Error");
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("defaults mirror the library structs") {
  const auto rc = RunConfig::defaults();
  CHECK(rc.get<double>("loss.tau") == 0.07);
  CHECK(rc.get<double>("loss.lambda_align") == 1.0);
  CHECK(rc.get<double>("loss.lambda_laycontrast") == 0.5);
  CHECK(rc.get<double>("loss.lambda_semantic") == 1.0);
  CHECK(rc.get<double>("loss.lambda_intra") == 0.36);
  CHECK(rc.get<int>("layout.max_tokens") == 40);
  CHECK(rc.get<int>("diffusion.num_steps") == 200);
  CHECK(rc.seed() == 0);
  CHECK_NOTHROW(rc.validate());
  CHECK(loss_config(rc).tau == 0.07);
  CHECK(decoder_config(rc).embed_dim == 768);
}

TEST_CASE("file then flag precedence") {
  testing::TempDir dir("config");
  const auto path = dir / "c.json";
  std::ofstream(path) << R"({"seed": 5, "loss": {"tau": 0.1}, "layout": {"embed_dim": 64, "num_heads": 4}})";
  auto rc = RunConfig::defaults();
  rc.merge_file(path);
  CHECK(rc.seed() == 5);
  CHECK(rc.get<double>("loss.tau") == 0.1);
  CHECK(rc.get<int>("layout.embed_dim") == 64);
  rc.set("loss.tau=0.2");
  rc.set("seed", 9);
  CHECK(rc.get<double>("loss.tau") == 0.2);
  CHECK(rc.seed() == 9);
  // Integers are accepted where a float is expected and stay floats.
  rc.set("loss.tau=1");
  CHECK(rc.at("loss.tau").is_number_float());
  rc.set("encoder.kind=toy");
  CHECK(rc.get<std::string>("encoder.kind") == "toy");
  CHECK(decoder_config(rc).embed_dim == 64);
}

TEST_CASE("unknown keys and type mismatches are rejected") {
  auto rc = RunConfig::defaults();
  CHECK(code_of([&] { rc.set("loss.temperature=0.1"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.set("layout.embed_dim=big"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.set("layout.embed_dim=1.5"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.set("noequals"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.merge(nlohmann::json::parse(R"({"loss": {"nope": 1}})"), "test"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.merge(nlohmann::json::array(), "test"); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([&] { rc.merge_file("/nonexistent/config.json"); }) == ErrorCode::IoError);

  testing::TempDir dir("badconfig");
  std::ofstream(dir / "bad.json") << "{";
  CHECK(code_of([&] { rc.merge_file(dir / "bad.json"); }) == ErrorCode::ParseError);

  rc.set("layout.num_heads=5");
  CHECK(code_of([&] { rc.validate(); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("hash tracks values") {
  auto a = RunConfig::defaults(), b = RunConfig::defaults();
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.set("seed=1");
  CHECK(a.hash() != b.hash());
  b.set("seed=0");
  CHECK(a.hash() == b.hash());
  b.set("loss.tau=0.07");
  CHECK(a.hash() == b.hash());
}

TEST_CASE("typed views read the flat keys") {
  auto rc = RunConfig::defaults();
  rc.set("train.layout_lr=0.002");
  rc.set("train.layout_steps=12");
  rc.set("diffusion.layout_source=decoder");
  rc.set("diffusion.use_layout=false");
  CHECK(layout_optimizer_config(rc).adamw.lr == 0.002);
  CHECK(layout_optimizer_config(rc).steps == 12);
  CHECK(diffusion_train_config(rc).layout_source == LayoutSource::Decoder);
  CHECK_FALSE(diffusion_config(rc).use_layout);
  rc.set("diffusion.layout_source=sometimes");
  CHECK(code_of([&] { rc.validate(); }) == ErrorCode::InvalidConfig);
}
