#include "waves/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "waves");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = waves::cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json run_json(const std::vector<std::string>& args) {
  const auto r = run(args);
  EXPECT_EQ(r.code, 0) << r.err;
  return json::parse(r.out);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("waves_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p.string();
}

const char* kPatch = "monge:0.05,0.45,0.05,0.45;0,0,0.25;1,0,0.618;2,0,1;0,2,1";

}  // namespace

TEST(Cli, LatticeReport) {
  const auto j = run_json({"lattice", "--m", "3"});
  EXPECT_EQ(j["schema"], 1);
  EXPECT_EQ(j["command"], "lattice");
  EXPECT_EQ(j["results"][0]["N"], 8);
  EXPECT_EQ(j["results"][0]["admissible"], true);
  EXPECT_EQ(j["config_hash"].get<std::string>().size(), 16u);
  EXPECT_TRUE(j["metadata"].contains("timestamp"));
  EXPECT_TRUE(j.contains("error_budget"));
}

TEST(Cli, PredictSphere) {
  const auto j = run_json({"predict", "--m", "3", "--surface", "sphere:0.2"});
  const auto& r = j["results"][0];
  EXPECT_NEAR(r["mean"].get<double>(), 0.16 * waves::pi * waves::pi, 1e-10);
  EXPECT_LT(std::abs(r["variance"]["coefficient"].get<double>()), 1e-8);
  EXPECT_EQ(j["error_budget"]["quadrature_tol"], 1e-8);
}

TEST(Cli, SimulateWritesCsvAndStats) {
  const auto dir = scratch("sim");
  const auto r = run({"simulate", "--m", "3", "--surface", "sphere:0.2", "--n", "50", "--seed", "1", "--h", "0.01",
                      "--out", dir.string(), "--csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream js(dir / "simulate.json");
  const auto j = json::parse(js);
  std::ifstream cs(dir / "lengths_m3.csv");
  std::string line;
  std::getline(cs, line);
  EXPECT_EQ(line, "seed,length");
  std::vector<double> lengths;
  std::uint64_t expect_seed = 1;
  while (std::getline(cs, line)) {
    const auto comma = line.find(',');
    EXPECT_EQ(std::stoull(line.substr(0, comma)), expect_seed++);
    lengths.push_back(std::stod(line.substr(comma + 1)));
  }
  ASSERT_EQ(lengths.size(), 50u);
  const auto st = waves::summarize(lengths, 1);
  EXPECT_EQ(st.mean, j["results"][0]["stats"]["mean"].get<double>());
  EXPECT_EQ(j["seeds"]["first"], 1);
  EXPECT_EQ(j["seeds"]["last"], 50);
  EXPECT_EQ(j["error_budget"]["mesh_h"][0], 0.01);
}

TEST(Cli, SameConfigSameBytes) {
  auto a = run_json({"simulate", "--m", "3", "--n", "20", "--seed", "9", "--h", "0.02"});
  auto b = run_json({"simulate", "--m", "3", "--n", "20", "--seed", "9", "--h", "0.02"});
  a.erase("metadata");
  b.erase("metadata");
  EXPECT_EQ(a.dump(), b.dump());
  auto c = run_json({"simulate", "--m", "3", "--n", "20", "--seed", "10", "--h", "0.02"});
  EXPECT_NE(a["config_hash"], c["config_hash"]);
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto dir = scratch("cfg");
  const auto cfg = write_file(dir / "run.cfg",
                              "# sweep\nm_list = 3, 11\nn = 5\nseed = 4\n"
                              "surface.kind = sphere\nsurface.radius = 0.15\n");
  const auto j = run_json({"predict", "--config", cfg, "--m", "3"});
  EXPECT_EQ(j["config"]["m_list"], json::array({3}));
  EXPECT_EQ(j["config"]["surface"]["radius"], 0.15);
  const auto k = run_json({"predict", "--config", cfg});
  EXPECT_EQ(k["config"]["m_list"], json::array({3, 11}));
  EXPECT_EQ(k["config"]["seed"], 4);
}

TEST(Cli, ValidationErrorsExitTwo) {
  const auto dir = scratch("bad");
  auto r = run({"predict", "--m", "7"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--m"), std::string::npos);
  const auto bad_line = write_file(dir / "a.cfg", "m = 3\nthis line has no equals\n");
  r = run({"predict", "--config", bad_line});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(bad_line + ":2:"), std::string::npos) << r.err;
  const auto bad_value = write_file(dir / "b.cfg", "m = 3\n\nn = many\n");
  r = run({"simulate", "--config", bad_value});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(bad_value + ":3:"), std::string::npos) << r.err;
  const auto unknown = write_file(dir / "c.cfg", "colour = blue\n");
  EXPECT_EQ(run({"predict", "--config", unknown}).code, 2);
  EXPECT_EQ(run({"predict", "--m", "3", "--bogus"}).code, 2);
  EXPECT_EQ(run({"simulate", "--m", "3", "--h", "0.2", "--n", "4"}).code, 2);
  EXPECT_EQ(run({"simulate", "--m", "3", "--csv"}).code, 2);
  EXPECT_EQ(run({"predict", "--m", "3", "--surface", "sphere:0.9"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST(Cli, NumericErrorExitsThree) {
  const auto r = run({"surface", "--tol", "1e-300"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("no convergence"), std::string::npos);
}

TEST(Cli, SurfaceIntegrals) {
  const auto j = run_json({"surface", "--surface", kPatch, "--m", "11"});
  const auto& r = j["results"][0];
  const double a = r["area"], i = r["I"];
  EXPECT_GE(i, a * a / 3);
  EXPECT_LE(i, a * a);
  EXPECT_NEAR(r["H"][0]["H"].get<double>(), r["H"][0]["H_prediction"].get<double>(), 0.01 * a * a);
}

TEST(Cli, VerifyChecks) {
  const auto j = run_json({"verify", "--m", "11", "--surface", kPatch});
  const auto& r = j["results"][0];
  for (const auto& c : r["checks"]) EXPECT_TRUE(c["pass"].get<bool>()) << c.dump();
  EXPECT_TRUE(r["relative_residuals"].contains("trYY"));
  EXPECT_TRUE(r["approx_variance"]["moments"].contains("error_budget"));
  EXPECT_EQ(j["error_budget"]["expansion_constant"], waves::kExpansionConstant);
}

TEST(Cli, ReadConfigParsesComments) {
  std::istringstream is("  m = 11   # trailing\n\n# only comment\nsurface = sphere:0.2\n");
  const auto st = waves::cli::read_config(is, "x");
  EXPECT_EQ(st.at("m").value, "11");
  EXPECT_EQ(st.at("m").where, "x:1");
  EXPECT_EQ(st.at("surface").where, "x:4");
  std::istringstream dup("m = 1\nm = 2\n");
  EXPECT_THROW(waves::cli::read_config(dup, "d"), waves::cli::ConfigError);
}
