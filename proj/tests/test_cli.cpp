#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "config_file.hpp"
#include "oracle.hpp"
#include "segcal/error.hpp"
#include "segcal/io.hpp"

using namespace segcal;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "segcal_test_cli";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, NoArgumentsIsUsage) {
  const Outcome o = run_cli({});
  EXPECT_EQ(o.code, cli::kExitUsage);
  EXPECT_NE(o.err.find("usage: segcal"), std::string::npos);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitUsage);
}

TEST(Cli, MetricsOnFixture) {
  const fs::path out = scratch("fixture.json");
  const Outcome o = run_cli({"metrics", "--probs", oracle::data_path("fixture_probs.npy"), "--labels",
                             oracle::data_path("fixture_labels.npy"), "--bins", "2", "--out",
                             out.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const RunManifest m = read_manifest(out);
  EXPECT_EQ(m.command, "metrics");
  EXPECT_NEAR(m.aggregate.at("ace").get<double>(), 0.2, 1e-12);
  EXPECT_NEAR(m.aggregate.at("ece").get<double>(), 0.2, 1e-12);
  EXPECT_NEAR(m.aggregate.at("mce").get<double>(), 0.2, 1e-12);
  EXPECT_EQ(m.bins.num_bins, 2u);
}

TEST(Cli, MetricsReplayIsByteIdentical) {
  const fs::path first = scratch("run1.json");
  const fs::path second = scratch("run2.json");
  ASSERT_EQ(run_cli({"metrics", "--cases", oracle::data_path("cases.txt"), "--bins", "10,20",
                     "--out", first.string()})
                .code,
            0);
  const Outcome o = run_cli({"metrics", "--replay", first.string(), "--out", second.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(slurp(first), slurp(second));
  const RunManifest m = read_manifest(first);
  EXPECT_EQ(m.cases.size(), 3u);
  EXPECT_TRUE(m.aggregate.contains("sweep"));
  EXPECT_TRUE(m.aggregate.contains("relative_spread"));
  // Replay of a manifest from another command.
  EXPECT_EQ(run_cli({"temp-fit", "--replay", first.string(), "--out", second.string()}).code,
            cli::kExitUsage);
}

TEST(Cli, ErrorsMapToExitCodes) {
  const Outcome missing = run_cli({"metrics", "--probs", "/nonexistent/p.npy", "--labels",
                                   "/nonexistent/l.npy", "--out", scratch("x.json").string()});
  EXPECT_EQ(missing.code, cli::kExitData);
  EXPECT_EQ(missing.err.rfind("segcal: error[", 0), 0u);
  EXPECT_EQ(std::count(missing.err.begin(), missing.err.end(), '\n'), 1);

  EXPECT_EQ(run_cli({"metrics", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"metrics", "--probs", oracle::data_path("fixture_probs.npy"), "--labels",
                     oracle::data_path("fixture_labels.npy"), "--bins", "1", "--out",
                     scratch("y.json").string()})
                .code,
            cli::kExitUsage);
  EXPECT_EQ(run_cli({"grad-check", "--loss", "focal"}).code, cli::kExitUsage);
  // A label tensor whose shape does not match is a data error.
  EXPECT_EQ(run_cli({"metrics", "--probs", oracle::data_path("fixture_probs.npy"), "--labels",
                     oracle::data_path("c_order.npy"), "--out", scratch("z.json").string()})
                .code,
            cli::kExitData);
}

TEST(Cli, GradCheckPasses) {
  const fs::path m = scratch("grad.json");
  const Outcome o = run_cli({"grad-check", "--loss", "dice+ace", "--trials", "20",
                             "--through-softmax", "--manifest", m.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("ok"), std::string::npos);
  EXPECT_LT(read_manifest(m).aggregate.at("max_relative_error").get<double>(), 1e-4);
}

TEST(Cli, DiagramAndHistogram) {
  const fs::path csv = scratch("d.csv");
  const fs::path svg = scratch("d.svg");
  ASSERT_EQ(run_cli({"diagram", "--probs", oracle::data_path("fixture_probs.npy"), "--labels",
                     oracle::data_path("fixture_labels.npy"), "--class", "0", "--bins", "2", "--csv",
                     csv.string(), "--svg", svg.string()})
                .code,
            0);
  EXPECT_EQ(slurp(csv).substr(0, 5), "class");
  EXPECT_TRUE(fs::exists(scratch("d.csv.manifest.json")));
  const fs::path hcsv = scratch("h.csv");
  const Outcome h = run_cli({"histogram", "--cases", oracle::data_path("cases.txt"), "--class", "1",
                             "--bins", "10", "--csv", hcsv.string()});
  ASSERT_EQ(h.code, 0) << h.err;
  EXPECT_EQ(slurp(hcsv).substr(0, 8), "conf_bin");
}

TEST(Cli, TempFit) {
  const fs::path out = scratch("t.json");
  const Outcome o = run_cli({"temp-fit", "--cases", oracle::data_path("logit_cases.txt"), "--out",
                             out.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const RunManifest m = read_manifest(out);
  ASSERT_TRUE(m.temperature.has_value());
  EXPECT_GT(*m.temperature, 0.0);
  EXPECT_TRUE(m.aggregate.at("argmax_unchanged").get<bool>());
}

TEST(Cli, TrainDemoAndReplay) {
  const fs::path cfg = scratch("demo.toml");
  std::ofstream(cfg) << "# tiny run\nloss = \"dice+ace\"\nepochs = 3\nhidden = 4\nimage_size = 32\n"
                        "train_cases = 2\nval_cases = 1\ntest_cases = 1\nseeds = [1, 2]\n"
                        "[data]\nmax_blobs = 2\n";
  const fs::path dir = scratch("demo");
  ASSERT_EQ(run_cli({"train-demo", "--config", cfg.string(), "--out", dir.string()}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "history_seed2.csv"));
  EXPECT_TRUE(fs::exists(dir / "weights_seed1.npy"));
  const std::string first = slurp(dir / "manifest.json");
  const std::string weights = slurp(dir / "weights_seed1.npy");
  const fs::path dir2 = scratch("demo2");
  ASSERT_EQ(run_cli({"train-demo", "--replay", (dir / "manifest.json").string(), "--out",
                     dir2.string()})
                .code,
            0);
  EXPECT_EQ(slurp(dir2 / "manifest.json"), first);
  EXPECT_EQ(slurp(dir2 / "weights_seed1.npy"), weights);

  std::ofstream(scratch("bad.toml")) << "epochs = 3\nunknown_key = 1\n";
  EXPECT_EQ(run_cli({"train-demo", "--config", scratch("bad.toml").string(), "--out",
                     scratch("bad").string()})
                .code,
            cli::kExitUsage);
}

TEST(ListFile, ParsesAndResolvesRelativePaths) {
  const auto cases = cli::read_list_file(oracle::data_path("cases.txt"));
  ASSERT_EQ(cases.size(), 3u);
  EXPECT_EQ(cases[1].first, fs::path(oracle::data_path("case1_probs.npy")));
  EXPECT_EQ(cases[1].second, fs::path(oracle::data_path("case1_labels.npy")));
  std::ofstream(scratch("bad_list.txt")) << "a.npy b.npy\n";
  EXPECT_THROW(cli::read_list_file(scratch("bad_list.txt")), ParseError);
  std::ofstream(scratch("empty_list.txt")) << "# nothing\n\n";
  EXPECT_THROW(cli::read_list_file(scratch("empty_list.txt")), ParseError);
}

TEST(TomlSubset, Values) {
  const nlohmann::json j = cli::parse_toml_subset(
      "# comment\nname = \"a\\tb\"  # trailing\nraw = 'c:\\\\x'\nn = 1_000\nx = -2.5e-3\n"
      "flag = true\nlist = [1, 2, 3]\n\n[data]\nmin_blobs = 2\n");
  EXPECT_EQ(j["name"], "a\tb");
  EXPECT_EQ(j["raw"], "c:\\\\x");
  EXPECT_EQ(j["n"], 1000);
  EXPECT_DOUBLE_EQ(j["x"].get<double>(), -2.5e-3);
  EXPECT_EQ(j["flag"], true);
  EXPECT_EQ(j["list"], nlohmann::json::array({1, 2, 3}));
  EXPECT_EQ(j["data"]["min_blobs"], 2);
}

TEST(TomlSubset, ErrorsNameTheLine) {
  try {
    cli::parse_toml_subset("a = 1\nb = \n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cli::parse_toml_subset("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(cli::parse_toml_subset("[a.b]\n"), ConfigError);
  EXPECT_THROW(cli::parse_toml_subset("s = \"open\n"), ConfigError);
}

TEST(DemoConfig, RoundTrip) {
  nlohmann::json doc = {{"loss", "ce:1+ace:0.5"}, {"epochs", 7}, {"seeds", {3, 4}},
                        {"bins", 15}, {"empty_bins", "zero"}, {"data", {{"max_blobs", 2}}}};
  const cli::DemoConfig c = cli::demo_config_from_json(doc);
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.train.bins.num_bins, 15u);
  EXPECT_EQ(c.train.data.max_blobs, 2u);
  const nlohmann::json back = cli::demo_config_to_json(c);
  EXPECT_EQ(cli::demo_config_to_json(cli::demo_config_from_json(back)), back);
  EXPECT_THROW(cli::demo_config_from_json({{"epochs", -1}}), ConfigError);
  EXPECT_THROW(cli::demo_config_from_json({{"epoch", 3}}), ConfigError);
}
