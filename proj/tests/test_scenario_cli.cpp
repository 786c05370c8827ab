#include "deso/scenario.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace deso;
namespace fs = std::filesystem;

namespace {

const std::string kScenarios = DESO_SCENARIO_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("deso_test_" + std::to_string(::getpid())) / name;
  fs::create_directories(dir);
  return dir;
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

const char* kScalar = R"({
  "name": "scalar",
  "plant": { "truth": { "A": [[-1]], "B": [[1]], "C": [[1]], "D": [[1]] } }, // 1/s
  "input": { "channels": [[ { "t_start": 0, "constant": 1 } ]] },
  "disturbance": { "channels": [[ { "t_start": 0, "constant": 0.5 } ]] },
  "gain": { "poles": [-2, -3] },
  "observers": [ { "name": "std", "kind": "StandardEso" } ],
  "sim": { "dt": 0.01, "t_end": 1 }
})";

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult cli(const std::string& args) {
  const fs::path log = scratch("logs") / "last.txt";
  const std::string cmd = std::string(DESO_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// scenario files

TEST(Scenario, BundledScenariosLoadAndValidate) {
  for (const char* name : {"dc_drive_fig2", "dc_drive_noise", "smo_fig5", "relateddoc_example"}) {
    const Scenario s = load_scenario(kScenarios + "/" + name + ".json");
    EXPECT_EQ(s.name, name);
    const PreparedScenario p = prepare(s);
    EXPECT_NO_THROW(validate(s, p)) << name;
  }
}

TEST(Scenario, Fig2Contents) {
  const Scenario s = load_scenario(kScenarios + "/dc_drive_fig2.json");
  ASSERT_EQ(s.observers.size(), 4u);
  EXPECT_EQ(s.observers[0].kind, ObserverKind::StandardEso);
  EXPECT_EQ(*s.observers[3].h, 1.0);
  EXPECT_EQ(s.input.eval(10.0)(0), 110.0);
  EXPECT_EQ(s.disturbance.eval(30.0)(0), 4.0);
  EXPECT_EQ(s.sim.dt, 0.001);
  const PreparedScenario p = prepare(s);
  ASSERT_TRUE(p.observers[0].design.has_value());
  EXPECT_LT(p.observers[0].design->placement_error, 1e-8);
}

TEST(Scenario, RoundTrip) {
  for (const char* name : {"dc_drive_fig2", "dc_drive_noise", "smo_fig5", "relateddoc_example"}) {
    const Scenario s = load_scenario(kScenarios + "/" + name + ".json");
    const nlohmann::json once = to_json(s);
    const nlohmann::json twice = to_json(parse_scenario(once));
    EXPECT_EQ(once, twice) << name;
    const Scenario back = parse_scenario(once.dump());
    EXPECT_EQ(back.disturbance, s.disturbance);
    EXPECT_EQ(back.sim.noise, s.sim.noise);
  }
}

TEST(Scenario, UnknownKeyNamesItsPath) {
  auto j = nlohmann::json::parse(kScalar, nullptr, true, true);
  j["observers"][0]["gian"] = 1;
  try {
    parse_scenario(j);
    FAIL() << "expected ScenarioError";
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.path(), "observers[0].gian");
  }
}

TEST(Scenario, DelayNotOnGridNamesTheField) {
  auto j = nlohmann::json::parse(slurp(kScenarios + "/dc_drive_fig2.json"), nullptr, true, true);
  j["observers"][2]["h"] = 0.5005;
  j.erase("sweep");
  const Scenario s = parse_scenario(j);
  try {
    validate(s, prepare(s));
    FAIL() << "expected ScenarioError";
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.path(), "observers[2].h");
  }
}

TEST(Scenario, SyntaxErrorReportsLine) {
  try {
    parse_scenario(std::string("{\n  \"name\": \"x\",\n  \"plant\": }\n"));
    FAIL() << "expected ScenarioError";
  } catch (const ScenarioError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Scenario, StructuralErrors) {
  auto base = nlohmann::json::parse(kScalar, nullptr, true, true);
  auto expect_path = [](const nlohmann::json& j, const std::string& path) {
    try {
      parse_scenario(j);
      ADD_FAILURE() << "expected ScenarioError at " << path;
    } catch (const ScenarioError& e) {
      EXPECT_EQ(e.path(), path) << e.what();
    }
  };
  auto j = base;
  j["disturbance"]["channels"].push_back(j["disturbance"]["channels"][0]);
  expect_path(j, "disturbance.channels");
  j = base;
  j["observers"][0]["kind"] = "Kalman";
  expect_path(j, "observers[0].kind");
  j = base;
  j["sim"]["dt"] = "fast";
  expect_path(j, "sim.dt");
  j = base;
  j["observers"][0]["kind"] = "DelayEso";
  expect_path(j, "observers[0]");
  j = base;
  j["plant"]["truth"]["A"] = {{-1, 0}};
  expect_path(j, "plant.truth");
}

TEST(Scenario, UnobservableDesignIsReported) {
  const Scenario s = load_scenario(kScenarios + "/relateddoc_example.json");
  auto j = to_json(s);
  j["observers"][0] = {{"name", "std"}, {"kind", "StandardEso"}, {"gain", {{"poles", {-1, -2, -3, -4}}}}};
  j.erase("sweep");
  const Scenario bad = parse_scenario(j);
  EXPECT_THROW(prepare(bad), UnobservableError);
}

// ---------------------------------------------------------------------------
// command line

TEST(Cli, CheckObservableScenarioSucceeds) {
  const CliResult r = cli("check --scenario dc_drive_fig2");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("observable"), std::string::npos);
}

TEST(Cli, CheckUnobservableScenarioPrintsWitness) {
  const CliResult r = cli("check --scenario relateddoc_example");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("unobservable"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("lambda"), std::string::npos) << r.output;
}

TEST(Cli, ValidationErrorsExitWithTwo) {
  const fs::path dir = scratch("validation");
  auto j = nlohmann::json::parse(kScalar, nullptr, true, true);
  j["observers"][0] = {{"name", "dly"}, {"kind", "DelayEso"}, {"h", 0.015}};
  put(dir / "bad.json", j.dump());
  const CliResult r = cli("check --scenario " + (dir / "bad.json").string());
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("observers[0].h"), std::string::npos) << r.output;
  EXPECT_EQ(cli("run --scenario " + (dir / "missing.json").string()).code, 1);
  EXPECT_EQ(cli("run --bogus").code, 2);
}

TEST(Cli, DesignMatchesHandGain) {
  const fs::path dir = scratch("design");
  put(dir / "scalar.json", kScalar);
  const CliResult r = cli("design --scenario " + (dir / "scalar.json").string() + " --write-gains " +
                    (dir / "gains.json").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("h*"), std::string::npos);
  const Scenario s = load_scenario((dir / "gains.json").string());
  ASSERT_TRUE(s.observers[0].gain && s.observers[0].gain->L);
  const Matrix& l = *s.observers[0].gain->L;
  EXPECT_NEAR(l(0, 0), -4.0, 1e-9);
  EXPECT_NEAR(l(1, 0), -6.0, 1e-9);
}

TEST(Cli, DesignRejectsNonConjugatePoles) {
  const fs::path dir = scratch("conj");
  auto j = nlohmann::json::parse(kScalar, nullptr, true, true);
  j["gain"]["poles"] = {{-1, 1}, {-2, -1}};
  put(dir / "conj.json", j.dump());
  EXPECT_EQ(cli("design --scenario " + (dir / "conj.json").string()).code, 2);
}

TEST(Cli, RunWritesTraceAndSeedIsDeterministic) {
  const fs::path dir = scratch("run");
  auto j = nlohmann::json::parse(slurp(kScenarios + "/dc_drive_noise.json"), nullptr, true, true);
  j["sim"]["t_end"] = 2.0;
  put(dir / "noise.json", j.dump());
  const std::string base = "run --scenario " + (dir / "noise.json").string() + " --seed 5 --out ";
  ASSERT_EQ(cli(base + (dir / "a").string()).code, 0);
  ASSERT_EQ(cli(base + (dir / "b").string()).code, 0);
  ASSERT_EQ(cli("run --scenario " + (dir / "noise.json").string() + " --seed 6 --out " + (dir / "c").string()).code, 0);
  const std::string a = slurp(dir / "a" / "trace.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b" / "trace.csv"));
  EXPECT_NE(a, slurp(dir / "c" / "trace.csv"));
  EXPECT_EQ(a.substr(0, a.find('\n')),
            "t,x1,x2,y1,y2,d1,d2,std.xhat1,std.xhat2,std.xhat3,std.xhat4,std.err_norm,"
            "delay_h01.xhat1,delay_h01.xhat2,delay_h01.xhat3,delay_h01.xhat4,delay_h01.err_norm,"
            "delay_h05.xhat1,delay_h05.xhat2,delay_h05.xhat3,delay_h05.xhat4,delay_h05.err_norm,"
            "delay_h10.xhat1,delay_h10.xhat2,delay_h10.xhat3,delay_h10.xhat4,delay_h10.err_norm");
  EXPECT_TRUE(fs::exists(dir / "a" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "a" / "summary.txt"));
}

TEST(Cli, ObserverFilter) {
  const fs::path dir = scratch("filter");
  auto j = nlohmann::json::parse(slurp(kScenarios + "/dc_drive_fig2.json"), nullptr, true, true);
  j["sim"]["t_end"] = 0.5;
  put(dir / "f.json", j.dump());
  ASSERT_EQ(cli("run --scenario " + (dir / "f.json").string() + " --observer std --out " + (dir / "o").string()).code, 0);
  const std::string trace = slurp(dir / "o" / "trace.csv");
  EXPECT_EQ(trace.find("delay_h"), std::string::npos);
}

TEST(Cli, DivergenceExitsWithFour) {
  const fs::path dir = scratch("diverge");
  auto j = nlohmann::json::parse(slurp(kScenarios + "/dc_drive_fig2.json"), nullptr, true, true);
  j["observers"] = {{{"name", "fast"}, {"kind", "DelayEso"}, {"h", 0.001}}};
  j["sim"]["t_end"] = 20.0;
  j.erase("sweep");
  put(dir / "d.json", j.dump());
  const CliResult r = cli("run --scenario " + (dir / "d.json").string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_TRUE(fs::exists(dir / "o" / "trace.csv"));
}

TEST(Cli, SweepWritesOneRowPerDelay) {
  const fs::path dir = scratch("sweep");
  auto j = nlohmann::json::parse(slurp(kScenarios + "/dc_drive_fig2.json"), nullptr, true, true);
  j["sim"]["t_end"] = 45.0;
  put(dir / "s.json", j.dump());
  const CliResult r = cli("sweep --scenario " + (dir / "s.json").string() + " --h 0.001,0.1,0.5 --out " + (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream in(slurp(dir / "o" / "sweep.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[1].rfind("0.001,", 0), 0u) << lines[1];
}
