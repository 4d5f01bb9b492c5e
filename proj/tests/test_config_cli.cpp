#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "tcl/cli.hpp"
#include "tcl/config.hpp"
#include "tcl/errors.hpp"

using namespace tcl;

namespace {

struct Invocation {
  int code = -1;
  std::string out, err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tcl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Invocation r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string write_micro_config(const std::filesystem::path& dir) {
  const auto path = dir / "micro.cfg";
  std::ofstream(path) << config::to_text(test::micro_train_config());
  return path.string();
}

}  // namespace

TEST_CASE("config: parse text with comments, blanks and later overrides") {
  const auto a = config::parse_text("# header\n\nlr_peak = 2e-4\n  batch_size=16  # trailing\nlr_peak = 3e-4\n");
  REQUIRE(a.size() == 3);
  training::TrainConfig cfg;
  config::apply_all(cfg, a);
  CHECK(cfg.lr_peak == 3e-4);
  CHECK(cfg.batch_size == 16);
  CHECK_THROWS_AS(config::parse_text("no equals sign\n"), ConfigError);
}

TEST_CASE("config: to_text / from_text round trip for every key") {
  auto cfg = test::micro_train_config();
  cfg.seed = 77;
  cfg.momentum = 0.9;
  const std::string text = config::to_text(cfg);
  CHECK(config::to_text(config::from_text(text)) == text);
  for (const auto& k : config::schema()) CHECK(text.find(k.key + " =") != std::string::npos);
}

TEST_CASE("config: unknown keys are rejected with the list of valid ones") {
  training::TrainConfig cfg;
  try {
    config::apply(cfg, "learning_rate", "1e-3");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("learning_rate") != std::string::npos);
    CHECK(msg.find("lr_peak") != std::string::npos);
  }
  CHECK_THROWS_AS(config::apply(cfg, "batch_size", "many"), ConfigError);
  CHECK_THROWS_AS(config::parse_override("batch_size"), ConfigError);
  CHECK_THROWS_AS(config::read_file("/nonexistent/x.cfg"), ConfigError);
}

TEST_CASE("cli: missing config file is a validation failure") {
  const auto r = invoke({"train", "--config", "/nonexistent/missing.cfg"});
  CHECK(r.code == 1);
  CHECK(r.err.find("config not found") != std::string::npos);
}

TEST_CASE("cli: malformed or invalid --set is a validation failure") {
  CHECK(invoke({"train", "--set", "batch_size"}).code == 1);
  CHECK(invoke({"train", "--set", "bogus_key=1"}).code == 1);
  CHECK(invoke({"train", "--set", "batch_size=0"}).code == 1);
  CHECK(invoke({"frobnicate"}).code == 1);
  CHECK(invoke({}).code == 1);
}

TEST_CASE("cli: eval without a checkpoint is a validation failure") {
  const auto dir = test::scratch_dir("cli_eval_missing");
  const auto r = invoke({"eval", "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("checkpoint not found") != std::string::npos);
}

TEST_CASE("cli: gen-data writes both splits") {
  const auto dir = test::scratch_dir("cli_gen");
  const auto cfg_path = write_micro_config(dir);
  const auto r = invoke({"gen-data", "--config", cfg_path, "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto cfg = test::micro_train_config();
  CHECK(data::load_dataset(dir / "train.tcld").size() == cfg.train_pairs);
  CHECK(data::load_dataset(dir / "eval.tcld").size() == cfg.eval_pairs);
}

TEST_CASE("cli: a barely trained checkpoint evaluates near chance") {
  const auto dir = test::scratch_dir("cli_train_eval");
  const auto cfg_path = write_micro_config(dir);
  const auto t = invoke({"train", "--config", cfg_path, "--out", dir.string(), "--steps", "1"});
  REQUIRE(t.code == 0);
  CHECK(t.out.find("stopped at step 1") != std::string::npos);
  const auto e = invoke({"eval", "--out", dir.string(), "--dump-similarity"});
  REQUIRE(e.code == 0);
  const auto j = nlohmann::json::parse(e.out);
  const double mean = j["retrieval"]["mean_recall"].get<double>();
  // 16 held-out pairs: chance mean recall is (1 + 5 + 10) / 3 / 16 = 1/3.
  CHECK(mean < 0.75);
  CHECK(j["step"] == "1");
  CHECK(std::filesystem::file_size(dir / "similarity.f32") == 12 + 16 * 16 * 4);
}

TEST_CASE("cli: --seed overrides the config seed") {
  const auto dir = test::scratch_dir("cli_seed");
  const auto cfg_path = write_micro_config(dir);
  REQUIRE(invoke({"train", "--config", cfg_path, "--out", dir.string(), "--steps", "1", "--seed", "9"}).code == 0);
  std::ifstream in(dir / "config.cfg");
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  CHECK(config::from_text(text).seed == 9);
}

TEST_CASE("cli: ablate prints one row per momentum value") {
  const auto dir = test::scratch_dir("cli_ablate");
  const auto cfg_path = write_micro_config(dir);
  const auto r = invoke({"ablate", "--config", cfg_path, "--out", dir.string(), "--set", "epochs=1", "--sweeps",
                         "momentum", "--momenta", "0.5,0.9"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("m=0.5") != std::string::npos);
  CHECK(r.out.find("m=0.9") != std::string::npos);
  const auto doc = nlohmann::json::parse(std::ifstream(dir / "ablation.json"));
  CHECK(doc["momentum"].size() == 2);
  CHECK(invoke({"ablate", "--config", cfg_path, "--out", dir.string(), "--sweeps", "nothing"}).code == 1);
}
