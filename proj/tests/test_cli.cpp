#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "pem/pem.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome pemsim(const std::string& args) {
  const std::string cmd = std::string(PEMSIM_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return o;
  std::array<char, 4096> buf{};
  while (auto n = std::fread(buf.data(), 1, buf.size(), p)) o.output.append(buf.data(), n);
  const int status = pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string source(const std::string& rel) { return std::string(PEM_SOURCE_DIR) + "/" + rel; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pem_cli_" + name);
  fs::remove_all(p);
  return p;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const auto p = fs::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

}  // namespace

TEST(Cli, ValidatesShippedScenarios) {
  auto o = pemsim("validate --scenario " + source("scenarios/fig3.json"));
  EXPECT_EQ(o.code, 0) << o.output;
  EXPECT_NE(o.output.find("3 devices"), std::string::npos);
  EXPECT_EQ(pemsim("validate --scenario " + source("scenarios/islanded.json")).code, 0);
}

TEST(Cli, MalformedJsonIsBadInput) {
  const auto p = write_text("pem_cli_bad.json", "{\n  \"grid\": {,\n}");
  const auto o = pemsim("validate --scenario " + p.string());
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("line 2"), std::string::npos) << o.output;
}

TEST(Cli, MissingFileIsBadInput) {
  EXPECT_EQ(pemsim("validate --scenario /nonexistent/pem.json").code, 1);
}

TEST(Cli, UnknownFlagPrintsUsage) {
  const auto o = pemsim("run --scenario x.json --out y --frobnicate");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("Usage"), std::string::npos) << o.output;
  EXPECT_EQ(pemsim("").code, 1);
}

TEST(Cli, Fig3WritesBundle) {
  const auto dir = scratch("fig3");
  const auto o = pemsim("fig3 --seed 5 --out " + dir.string());
  ASSERT_EQ(o.code, 0) << o.output;
  const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(j.at("accepted").get<int>(), 3);
  EXPECT_EQ(j.at("deadline_misses").get<int>(), 0);
  EXPECT_EQ(j.at("seed").get<int>(), 5);

  const auto again = scratch("fig3_again");
  ASSERT_EQ(pemsim("run --scenario " + source("scenarios/fig3.json") + " --seed 5 --out " + again.string()).code, 0);
  for (const char* f : {"slots.csv", "requests.csv", "channel.csv", "summary.json"})
    EXPECT_EQ(slurp(dir / f), slurp(again / f)) << f;
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST(Cli, BatchCreatesSeedDirectories) {
  const auto dir = scratch("batch");
  const auto o = pemsim("batch --scenario " + source("scenarios/fig3.json") + " --seeds 4..6 --threads 2 --out " +
                        dir.string());
  ASSERT_EQ(o.code, 0) << o.output;
  for (int s = 4; s <= 6; ++s) EXPECT_TRUE(fs::exists(dir / ("seed_" + std::to_string(s)) / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "batch.csv"));
  EXPECT_EQ(pemsim("batch --scenario " + source("scenarios/fig3.json") + " --seeds 6..4 --out " + dir.string()).code,
            1);
  fs::remove_all(dir);
}

TEST(Cli, FleetRunsWithShippedReference) {
  const auto dir = scratch("fleet");
  const auto o = pemsim("fleet --count 50 --ref " + source("scenarios/fleet_reference.csv") + " --out " + dir.string());
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_TRUE(fs::exists(dir / "fleet.csv"));
  EXPECT_EQ(pemsim("fleet --count 0 --ref " + source("scenarios/fleet_reference.csv") + " --out " + dir.string()).code,
            1);
  fs::remove_all(dir);
}

TEST(Cli, UnderSupplyExitsWithTwo) {
  const auto p = write_text("pem_cli_starved.json", R"({
  "grid": {"start": "00:00", "slot_min": 10, "end": "01:00"},
  "feeder_capacity_w": 10000,
  "import_allowed": false,
  "policy": {"emergency_shedding": false},
  "devices": [
    {"type": "battery", "id": "ev", "capacity_wh": 3000, "p_max_w": 3000, "packet_w": 1000,
     "arrival": "00:00", "deadline": "01:00", "initial_soc_wh": 0}
  ]
})");
  const auto dir = scratch("starved");
  const auto o = pemsim("run --scenario " + p.string() + " --out " + dir.string());
  EXPECT_EQ(o.code, 2) << o.output;
  EXPECT_NE(o.output.find("slot 0"), std::string::npos) << o.output;
  fs::remove_all(dir);
}
