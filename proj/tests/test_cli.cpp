#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pulsekoop_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PULSEKOOP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string config(const std::string& name) { return std::string(PULSEKOOP_CONFIG_DIR) + "/" + name; }

TEST(Cli, SpectrumWritesMetadata) {
  const auto out = scratch("spectrum");
  ASSERT_EQ(run_cli("run " + config("spectrum_repressilator.json") + " --output " + out.string()), 0);
  const std::string text = slurp(out / "spectrum.csv");
  ASSERT_FALSE(text.empty());
  ASSERT_EQ(text[0], '#');
  const auto meta = nlohmann::json::parse(text.substr(1, text.find('\n') - 1));
  EXPECT_EQ(meta.at("tool"), "pulsekoop");
  EXPECT_EQ(meta.at("command"), "spectrum");
  EXPECT_TRUE(meta.contains("config_hash"));
  EXPECT_TRUE(meta.contains("version"));
}

TEST(Cli, RunsAreDeterministic) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(run_cli("run " + config("simulate_pulse.json") + " --output " + a.string()), 0);
  ASSERT_EQ(run_cli("run " + config("simulate_pulse.json") + " --output " + b.string() + " --threads 1"), 0);
  EXPECT_EQ(slurp(a / "simulate.csv"), slurp(b / "simulate.csv"));
}

TEST(Cli, InvalidConfigWritesNothing) {
  const auto dir = scratch("invalid");
  auto cfg = nlohmann::json::parse(slurp(config("switch_closed_setting_b.json")));
  cfg["t_samp"] = -2.0;
  std::ofstream(dir / "bad.json") << cfg.dump();
  const auto out = dir / "out";
  EXPECT_EQ(run_cli("run " + (dir / "bad.json").string() + " --output " + out.string()), 2);
  EXPECT_TRUE(!fs::exists(out) || fs::is_empty(out));
}

TEST(Cli, UnknownCommandRejected) {
  const auto dir = scratch("unknown");
  std::ofstream(dir / "c.json") << R"({"command": "teleport", "model": {"id": "linear_test"}, "output": "x.csv"})";
  EXPECT_EQ(run_cli("run " + (dir / "c.json").string() + " --output " + dir.string()), 2);
  EXPECT_FALSE(fs::exists(dir / "x.csv"));
}

TEST(Cli, MissingConfigFile) { EXPECT_NE(run_cli("run /nonexistent/config.json"), 0); }

}  // namespace
