// Runs the hardet binary (path in HARDET_BIN) end to end.

#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::StartsWith;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("hardet_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string bin() {
  const char* b = std::getenv("HARDET_BIN");
  REQUIRE(b != nullptr);
  return b;
}

std::string configs() {
  const char* c = std::getenv("HARDET_CONFIGS");
  REQUIRE(c != nullptr);
  return c;
}

Run run(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch() / ("stdout_" + std::to_string(counter));
  const fs::path err = scratch() / ("stderr_" + std::to_string(counter++));
  const std::string cmd = bin() + " " + args + " >" + out.string() + " 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path write(const std::string& name, const std::string& text) {
  const fs::path p = scratch() / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

const std::string kPerfect =
    R"({"probs":[0,1,0],"gt_class":1,"anchor":[0,0,10,10],"gt_box":[0,0,10,10],"d":[0,0,0,0]})";
const std::string kOther =
    R"({"probs":[0.2,0.5,0.3],"gt_class":2,"anchor":[0,0,10,10],"gt_box":[1,2,12,11],"d":[0.1,-0.2,0.05,0]})";

}  // namespace

TEST_CASE("gradcheck passes at the default config and fails at tolerance 0") {
  const auto out = (scratch() / "gc").string();
  const Run ok = run("gradcheck --config " + configs() + "/default.json --out " + out);
  INFO(ok.out << ok.err);
  CHECK(ok.status == 0);
  CHECK_THAT(ok.out, ContainsSubstring("PASS tolerance=1e-05"));
  const auto report = lines_of(slurp(fs::path(out) / "gradcheck.csv"));
  CHECK_THAT(report[0], StartsWith("# config_hash="));
  CHECK(report[1] == "name,checked,max_error,max_abs_error,pass");
  // Every checked operation exactly once.
  CHECK(report.size() == 2 + 9);

  const Run bad = run("gradcheck --samples 20 --tolerance 0 --out " + out);
  CHECK(bad.status == 2);
  CHECK_THAT(bad.out, ContainsSubstring("FAIL"));
}

TEST_CASE("config problems exit with status 1") {
  const auto typo = write("typo.json", "{\"hyper\": {\"gama\": 0.5}}");
  const Run r = run("gradcheck --config " + typo.string());
  CHECK(r.status == 1);
  CHECK_THAT(r.err, ContainsSubstring("hyper.gama"));

  const auto broken = write("broken.json", "{\n\"seed\": 1,,\n}");
  const Run s = run("train --config " + broken.string());
  CHECK(s.status == 1);
  CHECK_THAT(s.err, ContainsSubstring("line 2"));

  CHECK(run("train --config " + (scratch() / "missing.json").string()).status == 1);
  CHECK(run("train --no-such-flag").status == 1);
  CHECK(run("").status == 1);
  CHECK(run("surface --seed -3").status == 1);
}

TEST_CASE("loss-eval") {
  const auto empty = write("empty.jsonl", "");
  const Run e = run("loss-eval " + empty.string());
  CHECK(e.status == 0);
  CHECK(e.out.empty());

  const auto two = write("two.jsonl", kPerfect + "\n" + kOther + "\n");
  const Run r = run("loss-eval " + two.string());
  REQUIRE(r.status == 0);
  const auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 2);
  const auto first = nlohmann::json::parse(rows[0]);
  CHECK(first["total"].get<double>() == Catch::Approx(0.0).margin(1e-12));
  const auto second = nlohmann::json::parse(rows[1]);
  CHECK(second["beta_c"].get<double>() == Catch::Approx(0.3).epsilon(1e-12));

  const Run std_mode = run("loss-eval --loss-mode standard " + two.string());
  const auto s = nlohmann::json::parse(lines_of(std_mode.out)[1]);
  CHECK(s["beta_r"].get<double>() == 0.0);
  CHECK(s["total"].get<double>() == Catch::Approx(s["ce"].get<double>() + s["smooth_l1"].get<double>()));

  const auto bad = write("bad.jsonl", kPerfect + "\n" + kPerfect + "\n{\"probs\": [1]}\n");
  const Run b = run("loss-eval " + bad.string());
  CHECK(b.status == 1);
  CHECK_THAT(b.err, ContainsSubstring("line 3"));
}

TEST_CASE("surface") {
  const auto out = scratch() / "surface";
  REQUIRE(run("surface --mode standard --out " + out.string()).status == 0);
  const auto rows = lines_of(slurp(out / "surface.csv"));
  CHECK_THAT(rows[0], StartsWith("# config_hash="));
  CHECK(rows[1] == "p,loc,grad");
  CHECK(rows.size() == 2 + 20 * 25);

  REQUIRE(run("surface --out " + out.string()).status == 0);
  const auto h = lines_of(slurp(out / "surface.csv"));
  CHECK(h[2] == "0.05,0,-40");

  const auto grid = write("grid.json", R"({"surface": {"p": {"start": 0.5, "stop": 0.5, "count": 1},
                                                       "loc": {"start": 0, "stop": 0, "count": 1}}})");
  REQUIRE(run("surface --config " + grid.string() + " --out " + out.string()).status == 0);
  CHECK(lines_of(slurp(out / "surface.csv"))[2] == "0.5,0,-4");

  const auto oob = write("oob.json", R"({"surface": {"loc": {"start": 0, "stop": 9, "count": 3}}})");
  CHECK(run("surface --config " + oob.string() + " --out " + out.string()).status == 1);
}

TEST_CASE("train writes every output and repeats byte for byte") {
  const auto a = scratch() / "train_a";
  const auto b = scratch() / "train_b";
  const std::string common = "train --config " + configs() + "/smoke.json --seed 5 --out ";
  const Run ra = run(common + a.string());
  INFO(ra.err);
  REQUIRE(ra.status == 0);
  REQUIRE(run("train --config " + configs() + "/smoke.json --seed 5 --out " + b.string()).status == 0);
  for (const char* name : {"train_log.csv", "detections.jsonl", "scatter.csv", "histogram.csv", "summary.json"}) {
    INFO(name);
    REQUIRE(fs::exists(a / name));
    CHECK(slurp(a / name) == slurp(b / name));
  }
  const auto log = lines_of(slurp(a / "train_log.csv"));
  CHECK_THAT(log[0], StartsWith("# config_hash="));
  CHECK_THAT(log[0], ContainsSubstring("seed=5"));
  CHECK(log[1] == "step,objective,mean_factor_r,mean_factor_c,aic");
  CHECK(log.size() == 2 + 5);  // steps 0, 10, 20, 30, 40

  const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
  CHECK(summary["seed"] == 5);
  for (const char* t : {"0.5", "0.6", "0.7", "0.8", "0.9"}) CHECK(summary["ap"].contains(t));
  CHECK(summary.contains("ap_mean"));
  CHECK(summary.contains("aic_positives"));

  // Another seed changes the outputs and the recorded seed.
  const auto c = scratch() / "train_c";
  REQUIRE(run("train --config " + configs() + "/smoke.json --seed 6 --out " + c.string()).status == 0);
  CHECK(slurp(a / "train_log.csv") != slurp(c / "train_log.csv"));

  // A thread count does not change the bytes.
  const auto d = scratch() / "train_d";
  const std::string env = "HARDET_THREADS=3 ";
  const std::string cmd = env + bin() + " " + common + d.string() + " >/dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(slurp(a / "train_log.csv") == slurp(d / "train_log.csv"));
  CHECK(slurp(a / "detections.jsonl") == slurp(d / "detections.jsonl"));
}

TEST_CASE("train divergence exits with status 2") {
  const Run r = run("train --config " + configs() + "/smoke.json --lr 1e7 --out " + (scratch() / "div").string());
  CHECK(r.status == 2);
  CHECK_THAT(r.err, ContainsSubstring("step"));
}

TEST_CASE("refine writes gains per bin") {
  const auto out = scratch() / "refine";
  const Run r = run("refine --config " + configs() + "/smoke.json --out " + out.string());
  INFO(r.err);
  REQUIRE(r.status == 0);
  const auto rows = lines_of(slurp(out / "refinement_gain.csv"));
  CHECK_THAT(rows[0], StartsWith("# config_hash="));
  CHECK(rows[1] == "bin_lo,bin_hi,count,gain_iou,gain_hiou");
  CHECK(rows.size() == 2 + 5);
  CHECK_THAT(rows[2], StartsWith("0.5,0.6,"));

  // Zero steps are rejected; lr 0 gives the identity model and zero gains.
  CHECK(run("refine --config " + configs() + "/smoke.json --steps 0 --out " + out.string()).status == 1);
  REQUIRE(run("refine --config " + configs() + "/smoke.json --lr 0 --out " + out.string()).status == 0);
  const auto zero = lines_of(slurp(out / "refinement_gain.csv"));
  for (std::size_t k = 2; k < zero.size(); ++k) {
    std::vector<std::string> cells;
    std::istringstream row(zero[k]);
    for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
    cells.resize(5);
    INFO(zero[k]);
    if (cells[2] != "0") {
      CHECK(cells[3] == "0");
      CHECK(cells[4] == "0");
    }
  }
}
