#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "learn/cli.hpp"
#include "learn/dataset.hpp"
#include "learn/encoders.hpp"
#include "learn/image.hpp"
#include "learn/layout.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "learn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = learn::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

// Small enough for a test: 16 px images, 16-d encoder, one decoder layer.
std::filesystem::path tiny_config(const testing::TempDir& dir) {
  const auto path = dir / "tiny.json";
  std::ofstream(path) << R"({
    "encoder": {"dim": 16},
    "layout": {"embed_dim": 16, "num_heads": 2, "num_layers": 1, "max_tokens": 4, "memory_tokens": 2,
               "objectness_threshold": 0.3},
    "diffusion": {"image_size": 16, "base_channels": 8, "channel_mult": [1, 2], "attention_resolutions": [16, 8],
                  "layout_dim": 8, "num_heads": 2, "max_groups": 4, "num_steps": 50, "sample_steps": 4},
    "train": {"layout_steps": 3, "layout_batch_size": 4, "diffusion_steps": 2, "diffusion_batch_size": 2}
  })";
  return path;
}

}  // namespace

TEST_CASE("usage and exit codes") {
  const auto help = cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("train-layout") != std::string::npos);
  CHECK(cli({"frobnicate"}).code == 2);
  const auto no_ckpt = cli({"generate", "--prompt", "ball", "--out", "x.png"});
  CHECK(no_ckpt.code == 2);
  CHECK(no_ckpt.err.find("--ckpt") != std::string::npos);
  const auto missing = cli({"inspect-layout", "--ckpt", "/nonexistent/model.ckpt", "--prompt", "ball"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("/nonexistent/model.ckpt") != std::string::npos);
  CHECK(cli({"generate", "--ckpt", "a", "--prompt", "b", "--out", "c", "--set", "nonsense.key=1"}).code == 1);
}

#ifdef LEARN_BIN_PATH
TEST_CASE("the installed binary reports the same exit codes") {
  auto status = [](const std::string& args) {
    const int s = std::system((std::string(LEARN_BIN_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  CHECK(status("--help") == 0);
  CHECK(status("frobnicate") == 2);
  CHECK(status("inspect-layout --ckpt /nonexistent.ckpt --prompt ball") == 1);
}
#endif

TEST_CASE("end-to-end pipeline on a tiny configuration") {
  testing::TempDir dir("cli");
  const std::string cfg = tiny_config(dir).string();
  const std::string data = (dir / "data").string();

  REQUIRE(cli({"dataset", "synth", "--n", "6", "--size", "16", "--max-shapes", "2", "--seed", "3", "--out", data,
               "--config", cfg})
              .code == 0);
  CHECK(std::filesystem::exists(dir / "data/manifest.jsonl"));
  CHECK(std::filesystem::exists(dir / "data/run_manifest.json"));

  const std::string lay = (dir / "layout.ckpt").string();
  const auto tl = cli({"train-layout", "--data", data + "/manifest.jsonl", "--out", lay, "--seed", "1", "--config", cfg});
  REQUIRE_MESSAGE(tl.code == 0, tl.err);
  const json run = read_json(lay + ".run.json");
  for (const char* key : {"command", "version", "config_hash", "seed", "wall_time_seconds", "config", "outputs"})
    CHECK(run.contains(key));
  CHECK(run["seed"] == 1);
  CHECK(run["summary"]["steps"] == 3);

  const std::string full = (dir / "full.ckpt").string();
  const auto td = cli({"train-diffusion", "--data", data, "--ckpt", lay, "--out", full, "--seed", "1", "--config", cfg});
  REQUIRE_MESSAGE(td.code == 0, td.err);

  // Same seed, same bytes; the config hash moves with any effective value.
  const std::string a = (dir / "a.png").string(), b = (dir / "b.png").string();
  REQUIRE(cli({"generate", "--ckpt", full, "--prompt", "a ball", "--seed", "4", "--out", a, "--config", cfg}).code == 0);
  REQUIRE(cli({"generate", "--ckpt", full, "--prompt", "a ball", "--seed", "4", "--out", b, "--config", cfg}).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(read_json(a + ".run.json")["config_hash"] == read_json(b + ".run.json")["config_hash"]);
  const std::string c = (dir / "c.png").string();
  REQUIRE(cli({"generate", "--ckpt", full, "--prompt", "a ball", "--seed", "5", "--out", c, "--config", cfg}).code == 0);
  CHECK(read_json(c + ".run.json")["config_hash"] != read_json(a + ".run.json")["config_hash"]);
  CHECK(learn::read_png(a).height() == 16);

  // Predictions named by record id feed evaluate.
  const std::string pred = (dir / "pred").string();
  std::filesystem::create_directories(pred);
  for (const auto& r : learn::load_manifest(data + "/manifest.jsonl")) {
    REQUIRE(cli({"generate", "--ckpt", full, "--prompt", r.caption, "--out", pred + "/" + r.id + ".png", "--layout-out",
                 pred + "/" + r.id + ".json", "--config", cfg, "--run-manifest", (dir / "gen_run.json").string()})
                .code == 0);
  }
  const std::string report = (dir / "report.json").string();
  const auto ev = cli({"evaluate", "--pred-dir", pred, "--ref", data, "--out", report, "--config", cfg});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  const json rep = read_json(report);
  CHECK(rep["items"].size() == 6);
  CHECK(rep["fid"].is_number());
  CHECK(rep["sam_iou"].get<double>() >= 0.0);
  CHECK(rep["sam_iou"].get<double>() <= 100.0);

  const std::string cands = (dir / "cands.json").string();
  std::ofstream(cands) << R"(["", "plain paper", "busy texture"])";
  const std::string tuned = (dir / "bg.json").string();
  const auto tb = cli({"tune-background", "--ckpt", full, "--candidates", cands, "--seeds", "2", "--prompt", "a ball",
                       "--out", tuned, "--config", cfg});
  REQUIRE_MESSAGE(tb.code == 0, tb.err);
  const json sel = read_json(tuned);
  CHECK(sel["scores"].size() == 3);
  CHECK(sel["best_embedding"].size() == 16);

  const std::string graph = (dir / "graph.json").string();
  std::ofstream(graph) << R"({"nodes":[{"id":"a","prompt":"a ball"},{"id":"b","prompt":"a ramp"}],"edges":[["a","b"]]})";
  const std::string frames = (dir / "frames").string();
  REQUIRE(cli({"traverse", "--graph", graph, "--concept", "b", "--ckpt", full, "--out-dir", frames, "--config", cfg})
              .code == 0);
  CHECK(std::filesystem::exists(dir / "frames/frame_000.png"));
  CHECK(std::filesystem::exists(dir / "frames/frame_001.png"));
  CHECK(read_json(dir / "frames/plan.json")["ordered_concepts"] == json::array({"a", "b"}));
  CHECK(std::filesystem::exists(dir / "frames/run_manifest.json"));
}

TEST_CASE("inspect-layout is deterministic and renders the boxes it prints") {
  testing::TempDir dir("inspect");
  const std::string cfg = tiny_config(dir).string();
  const std::string data = (dir / "data").string();
  REQUIRE(cli({"dataset", "synth", "--n", "4", "--size", "16", "--out", data, "--config", cfg}).code == 0);
  const std::string lay = (dir / "l.ckpt").string();
  REQUIRE(cli({"train-layout", "--data", data, "--out", lay, "--steps", "0", "--seed", "2", "--config", cfg}).code == 0);

  const auto first = cli({"inspect-layout", "--ckpt", lay, "--prompt", "ball and ramp", "--config", cfg});
  const auto second = cli({"inspect-layout", "--ckpt", lay, "--prompt", "ball and ramp", "--config", cfg});
  REQUIRE(first.code == 0);
  CHECK(first.out == second.out);

  const std::string png = (dir / "boxes.png").string(), js = (dir / "boxes.json").string();
  REQUIRE(cli({"inspect-layout", "--ckpt", lay, "--prompt", "ball and ramp", "--render", png, "--size", "40", "--out",
               js, "--config", cfg})
              .code == 0);
  const learn::Layout layout = learn::layout_from_json(read_json(js));
  const learn::Image img = learn::read_png(png);
  REQUIRE(img.width() == 40);
  auto white = [&](int y, int x) { return img(y, x, 0) == 1.0 && img(y, x, 1) == 1.0 && img(y, x, 2) == 1.0; };
  std::vector<bool> on_border(40 * 40, false);
  for (const auto& el : layout.elements) {
    const auto r = learn::box_to_pixels(el.box, 40, 40);
    if (r.width() <= 0 || r.height() <= 0) continue;
    CHECK_FALSE(white(r.y0, r.x0));
    CHECK_FALSE(white(r.y1 - 1, r.x1 - 1));
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        if (y == r.y0 || y == r.y1 - 1 || x == r.x0 || x == r.x1 - 1) on_border[y * 40 + x] = true;
  }
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      if (!white(y, x)) CHECK(on_border[y * 40 + x]);
  CHECK(std::filesystem::exists(js + ".run.json"));
}

TEST_CASE("LEARN_CONFIG supplies the default config file") {
  testing::TempDir dir("envcfg");
  const auto cfg = tiny_config(dir);
  const std::string data = (dir / "data").string();
  ::setenv("LEARN_CONFIG", cfg.c_str(), 1);
  const auto r = cli({"dataset", "synth", "--n", "2", "--size", "16", "--out", data});
  ::unsetenv("LEARN_CONFIG");
  REQUIRE(r.code == 0);
  CHECK(read_json(dir / "data/run_manifest.json")["config"]["encoder.dim"] == 16);
}
