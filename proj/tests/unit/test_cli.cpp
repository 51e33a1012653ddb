#include <sstream>

#include "doctest.h"
#include "medmm/cli.hpp"
#include "medmm/connector.hpp"
#include "medmm/rng.hpp"
#include "support.hpp"

using namespace medmm;
using testing::fixture;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 1 with help text") {
  const Run r = run({"encode", "--image", "x.png", "--out", "y.mstf", "--bogus"});
  CHECK(r.code == exit_code::kUsage);
  CHECK(contains(r.err, "Usage"));
  CHECK(run({}).code == exit_code::kUsage);
  CHECK(run({"frobnicate"}).code == exit_code::kUsage);
  CHECK(run({"--help"}).code == exit_code::kOk);
}

TEST_CASE("config validation errors exit 2") {
  testing::TempDir dir;
  write_file_atomic(dir / "bad.json", std::string(R"({"encoder": {"patch": 16}})"));
  const Run r = run({"encode", "--image", fixture("rgb_2x2.png").string(), "--out", (dir / "o.mstf").string(),
                     "--config", (dir / "bad.json").string()});
  CHECK(r.code == exit_code::kValidation);
  write_file_atomic(dir / "typo.json", std::string(R"({"encodr": {}})"));
  CHECK(run({"encode", "--image", fixture("rgb_2x2.png").string(), "--out", (dir / "o.mstf").string(), "--config",
             (dir / "typo.json").string()})
            .code == exit_code::kValidation);
}

TEST_CASE("bundled default config is valid and matches the built-in defaults") {
  const auto text = slurp(std::filesystem::path(MEDMM_SOURCE_DIR) / "configs" / "default.json");
  RunConfig cfg = RunConfig::defaults();
  cfg.merge_json(nlohmann::ordered_json::parse(text));
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.to_json() == RunConfig::defaults().to_json());
}

TEST_CASE("encode writes the multi-scale tensor") {
  testing::TempDir dir;
  const Run r = run({"encode", "--image", fixture("rgb_2x2.png").string(), "--out", (dir / "f.mstf").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(contains(r.out, "tiles encoded: 14"));
  CHECK(contains(r.out, "shape: 27x27x9"));
  CHECK(contains(r.out, "effective config: {"));
  CHECK(contains(r.out, "seed: 0"));
  CHECK(load_mstf(dir / "f.mstf").dims() == std::vector<uint32_t>{27, 27, 9});
}

TEST_CASE("tile writes every level plus a manifest") {
  testing::TempDir dir;
  const Run r = run({"tile", "--image", fixture("rgb_2x2.png").string(), "--out-dir", (dir / "tiles").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(contains(r.out, "wrote 14 tiles"));
  CHECK(std::filesystem::exists(dir / "tiles/manifest.json"));
  CHECK(load_mstf(dir / "tiles/scale_1134/tile_2_2.mstf").dims() == std::vector<uint32_t>{378, 378, 3});
  CHECK_FALSE(std::filesystem::exists(dir / "tiles.tmp"));
  // A second run into the populated directory is refused.
  CHECK(run({"tile", "--image", fixture("rgb_2x2.png").string(), "--out-dir", (dir / "tiles").string()}).code != 0);
}

TEST_CASE("synthesize in mock mode follows the quota") {
  testing::TempDir dir;
  const Run r = run({"synthesize", "--mock", "--in", fixture("captions_20.jsonl").string(), "--out",
                     (dir / "ft.json").string(), "--ratio-a", "0.25", "--seed", "7"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(contains(r.out, "records: 20"));
  CHECK(contains(r.out, "provider A: 5"));
  CHECK(contains(r.out, "provider B: 15"));
  const auto records = load_instruct_json(dir / "ft.json");
  REQUIRE(records.size() == 20);
  size_t via_a = 0;
  for (const auto& rec : records) {
    CHECK(rec.conversations[0].value.starts_with("<image>\n"));
    if (contains(rec.conversations[1].value, "messages endpoint")) ++via_a;
  }
  CHECK(via_a == 5);
}

TEST_CASE("real synthesis without credentials fails before network use") {
  testing::TempDir dir;
  ::unsetenv("PROVIDER_A_API_KEY");
  const Run r = run({"synthesize", "--in", fixture("captions_20.jsonl").string(), "--out",
                     (dir / "ft.json").string()});
  CHECK(r.code == exit_code::kValidation);
  CHECK(contains(r.err, "MissingCredential"));
  CHECK_FALSE(std::filesystem::exists(dir / "ft.json"));
}

TEST_CASE("outputs are byte-identical across runs") {
  testing::TempDir dir;
  for (int k = 0; k < 2; ++k) {
    const std::string s = std::to_string(k);
    REQUIRE(run({"synthesize", "--mock", "--in", fixture("captions_20.jsonl").string(), "--out",
                 (dir / ("ft" + s + ".json")).string(), "--seed", "3"})
                .code == 0);
    REQUIRE(run({"encode", "--image", fixture("color_16x8.jpg").string(), "--out", (dir / ("f" + s + ".mstf")).string(),
                 "--threads", k == 0 ? "1" : "3"})
                .code == 0);
    REQUIRE(run({"merge", "--a", fixture("instruct_a.json").string(), "--b", fixture("instruct_b.json").string(),
                 "--out", (dir / ("m" + s + ".json")).string()})
                .code == 0);
    REQUIRE(run({"tile", "--image", fixture("gray_8x8.jpg").string(), "--out-dir", (dir / ("t" + s)).string()}).code == 0);
  }
  CHECK(slurp(dir / "ft0.json") == slurp(dir / "ft1.json"));
  CHECK(slurp(dir / "f0.mstf") == slurp(dir / "f1.mstf"));
  CHECK(slurp(dir / "m0.json") == slurp(dir / "m1.json"));
  CHECK(slurp(dir / "t0/scale_756/tile_1_0.mstf") == slurp(dir / "t1/scale_756/tile_1_0.mstf"));
  CHECK(slurp(dir / "t0/manifest.json") == slurp(dir / "t1/manifest.json"));
  CHECK(run({"stats", "--in", fixture("vqa_10.jsonl").string()}).out ==
        run({"stats", "--in", fixture("vqa_10.jsonl").string()}).out);
}

TEST_CASE("stats for instruct files and datasets") {
  const Run inst = run({"stats", "--in", fixture("instruct_a.json").string(), "--json"});
  REQUIRE_MESSAGE(inst.code == 0, inst.err);
  CHECK(contains(inst.out, "\"CT\": {\n    \"images\": 1,\n    \"qas\": 5"));
  const Run ds = run({"stats", "--in", fixture("slake_mini.json").string(), "--format", "slake", "--json"});
  REQUIRE_MESSAGE(ds.code == 0, ds.err);
  CHECK(contains(ds.out, "\"total\": 3"));
}

TEST_CASE("evaluate prints the report and writes JSON") {
  testing::TempDir dir;
  std::string preds;
  for (const char* line :
       {R"({"qid":"q1","text":"left lung"})", R"({"qid":"q2","text":"yes"})", R"({"qid":"q3","text":"yes"})",
        R"({"qid":"q4","text":"lobe"})", R"({"qid":"q5","text":"mri"})", R"({"qid":"q6","text":"yes"})",
        R"({"qid":"q7","text":"left"})", R"({"qid":"q8","text":"no"})", R"({"qid":"q9","text":"no"})",
        R"({"qid":"q10","text":"axial"})"})
    preds += std::string(line) + "\n";
  write_file_atomic(dir / "p.jsonl", preds);
  const Run r = run({"evaluate", "--predictions", (dir / "p.jsonl").string(), "--dataset",
                     fixture("vqa_10.jsonl").string(), "--split", "test", "--name", "Fixture", "--out-json",
                     (dir / "r.json").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // Test split: open q5 (1) and q7 (1/3); closed q6, q8 right, q9 wrong.
  CHECK(contains(r.out, "0.6667"));
  const auto j = nlohmann::json::parse(slurp(dir / "r.json"));
  CHECK(j["n_open"] == 2);
  CHECK(j["open_recall"].get<double>() == doctest::Approx(2.0 / 3.0));
  CHECK(j["closed_accuracy"].get<double>() == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("train-connector writes a checkpoint and loss trace") {
  testing::TempDir dir;
  SplitMix64 rng(1);
  std::vector<float> x(64 * 6), y(64 * 3);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  for (size_t r = 0; r < 64; ++r)
    for (size_t k = 0; k < 3; ++k) y[r * 3 + k] = x[r * 6 + k] - x[r * 6 + k + 3];
  save_mstf(dir / "x.mstf", TensorF32({64, 6}, x));
  save_mstf(dir / "y.mstf", TensorF32({64, 3}, y));
  const Run r = run({"train-connector", "--features", (dir / "x.mstf").string(), "--targets",
                     (dir / "y.mstf").string(), "--out-dir", (dir / "ckpt").string(), "--loss-csv",
                     (dir / "loss.csv").string(), "--batch", "16", "--epochs", "2", "--hidden", "8"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(contains(r.out, "steps: 8"));
  CHECK(contains(r.out, "final mean loss:"));
  CHECK(load_checkpoint(dir / "ckpt").hidden() == 8);
  CHECK(slurp(dir / "loss.csv").starts_with("step,lr,loss\n0,"));

  const Run frozen = run({"train-connector", "--features", (dir / "x.mstf").string(), "--targets",
                          (dir / "y.mstf").string(), "--out-dir", (dir / "ckpt2").string(), "--init",
                          (dir / "ckpt").string(), "--freeze", "all", "--batch", "16"});
  REQUIRE_MESSAGE(frozen.code == 0, frozen.err);
  CHECK(slurp(dir / "ckpt/w1.mstf") == slurp(dir / "ckpt2/w1.mstf"));
  CHECK(slurp(dir / "ckpt/b2.mstf") == slurp(dir / "ckpt2/b2.mstf"));
}

TEST_CASE("missing input maps to a runtime failure") {
  testing::TempDir dir;
  const Run r = run({"merge", "--a", (dir / "nope.json").string(), "--b", fixture("instruct_b.json").string(),
                     "--out", (dir / "m.json").string()});
  CHECK(r.code == exit_code::kRuntime);
  const Run dup = run({"merge", "--a", fixture("instruct_a.json").string(), "--b", fixture("instruct_a.json").string(),
                       "--out", (dir / "m.json").string()});
  CHECK(dup.code == exit_code::kValidation);
  CHECK(contains(dup.err, "a1"));
}

}  // TEST_SUITE
