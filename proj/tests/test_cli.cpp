// Subprocess-level checks of the command-line tool.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cqa/chart_model.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

RunResult run(const std::string& args) {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / "cqa_cli_io";
  fs::create_directories(dir);
  fs::path out = dir / ("out" + std::to_string(counter) + ".txt");
  fs::path err = dir / ("err" + std::to_string(counter) + ".txt");
  ++counter;
  std::string cmd = std::string(CQA_CLI_PATH) + " " + args + " > " +
                    out.string() + " 2> " + err.string();
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("cqa_cli_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("help succeeds and a missing subcommand is a usage error") {
  CHECK(run("--help").exit_code == 0);
  CHECK(run("").exit_code == 1);
  CHECK(run("frobnicate").exit_code == 1);
  CHECK(run("gen --no-such-flag").exit_code == 1);
}

TEST_CASE("gen writes identical trees for identical seeds") {
  TempDir a("gen_a"), b("gen_b"), c("gen_c");
  RunResult ra = run("gen --seed 7 --bars 10 --out " + a.str());
  REQUIRE(ra.exit_code == 0);
  CHECK(ra.out.find("\"charts\": 10") != std::string::npos);
  REQUIRE(run("gen --seed 7 --bars 10 --out " + b.str()).exit_code == 0);
  REQUIRE(run("gen --seed 8 --bars 10 --out " + c.str()).exit_code == 0);

  CHECK(slurp(a.path / "manifest.json") == slurp(b.path / "manifest.json"));
  CHECK(slurp(a.path / "charts" / "bar-0000.json") ==
        slurp(b.path / "charts" / "bar-0000.json"));
  CHECK(slurp(a.path / "tables" / "bar-0003.csv") ==
        slurp(b.path / "tables" / "bar-0003.csv"));
  // A different seed changes the content.
  CHECK(slurp(a.path / "manifest.json") != slurp(c.path / "manifest.json"));
}

TEST_CASE("gen without --out or with bad config fails as usage") {
  CHECK(run("gen --bars 3").exit_code == 1);
  TempDir dir("gen_bad");
  CHECK(run("gen --out " + dir.str()).exit_code == 1);  // zero charts
  CHECK(run("gen --bars 2 --raster 24 --out " + dir.str()).exit_code == 1);
}

TEST_CASE("extract reports a missing spec on stderr with exit 2") {
  RunResult r = run("extract definitely-missing.json");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("definitely-missing.json") != std::string::npos);
  CHECK(r.out.empty());
}

TEST_CASE("extract round-trips a generated chart to CSV") {
  TempDir dir("extract");
  REQUIRE(run("gen --seed 3 --bars 1 --out " + dir.str()).exit_code == 0);
  RunResult r = run("extract " + dir.str() + "/charts/bar-0000.json --format csv");
  REQUIRE(r.exit_code == 0);
  cqa::DataTable table = cqa::table_from_csv(r.out);
  cqa::DataTable gold =
      cqa::table_from_csv(slurp(dir.path / "tables" / "bar-0000.csv"));
  REQUIRE(table.rows() == gold.rows());
  REQUIRE(table.cols() == gold.cols());
  CHECK(table.row_labels == gold.row_labels);

  RunResult j = run("extract " + dir.str() + "/charts/bar-0000.json");
  CHECK(j.exit_code == 0);
  CHECK(j.out.find("\"table\"") != std::string::npos);
  CHECK(j.out.find("\"assignment\"") != std::string::npos);
}

TEST_CASE("answer executes an aggregation over a CSV table") {
  TempDir dir("answer");
  std::ofstream(dir.path / "t.csv") << ",value\na,10\nb,4\n";
  RunResult r =
      run("answer --table " + dir.str() + "/t.csv --op difference --cells '1,1;2,1'");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("\"answer\": \"6\"") != std::string::npos);

  CHECK(run("answer --table " + dir.str() + "/t.csv --op frobnicate --cells 1,1")
            .exit_code == 1);
  CHECK(run("answer --table " + dir.str() + "/t.csv --op sum --cells bogus")
            .exit_code == 1);
}

TEST_CASE("eval runs both pipelines and honors --format csv") {
  TempDir dir("eval");
  REQUIRE(run("gen --seed 5 --bars 3 --lines 2 --pies 2 --out " + dir.str())
              .exit_code == 0);
  std::string manifest = dir.str() + "/manifest.json";

  RunResult gold = run("eval --manifest " + manifest);
  REQUIRE(gold.exit_code == 0);
  CHECK(gold.out.find("\"relaxed_accuracy\": 1.0") != std::string::npos);

  RunResult ext =
      run("eval --manifest " + manifest + " --pipeline extracted --answerer oracle");
  REQUIRE(ext.exit_code == 0);
  CHECK(ext.out.find("\"pipeline\": \"extracted_table\"") != std::string::npos);

  RunResult csv = run("eval --manifest " + manifest + " --format csv");
  REQUIRE(csv.exit_code == 0);
  CHECK(csv.out.rfind("chart_id,kind,pipeline,correct,reason", 0) == 0);

  CHECK(run("eval --manifest " + manifest + " --pipeline golden").exit_code == 1);
  CHECK(run("eval --manifest " + dir.str() + "/nope.json").exit_code == 2);
}

TEST_CASE("filter splits kept and dropped questions") {
  TempDir dir("filter");
  REQUIRE(run("gen --seed 13 --bars 4 --unanswerable-frac 0.5 --mix 0.6 0.4 0 0"
              " --out " +
              dir.str())
              .exit_code == 0);
  RunResult r = run("filter --manifest " + dir.str() + "/manifest.json");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("\"kept\"") != std::string::npos);
  CHECK(r.out.find("\"dropped\"") != std::string::npos);
  CHECK(r.out.find("\"matched\"") != std::string::npos);
}

TEST_CASE("train writes a checkpoint and curve usable by answer and eval") {
  TempDir dir("train");
  REQUIRE(run("gen --seed 21 --bars 3 --single-series --out " + dir.str())
              .exit_code == 0);
  std::string ckpt = dir.str() + "/model.ckpt";
  RunResult t = run("train --manifest " + dir.str() +
                    "/manifest.json --epochs 2 --dim 16 --heads 2 --out " + ckpt);
  REQUIRE(t.exit_code == 0);
  CHECK(fs::exists(ckpt));
  std::string curve = slurp(fs::path(ckpt + ".curve.csv"));
  CHECK(curve.rfind("epoch,split,loss,op_acc", 0) == 0);

  RunResult a = run("answer --table " + dir.str() +
                    "/tables/bar-0000.csv --checkpoint " + ckpt + " --spec " +
                    dir.str() + "/charts/bar-0000.json --question \"what is it\"");
  CHECK(a.exit_code == 0);
  CHECK(a.out.find("\"answer\"") != std::string::npos);

  RunResult e = run("eval --manifest " + dir.str() +
                    "/manifest.json --answerer neural --checkpoint " + ckpt);
  CHECK(e.exit_code == 0);
  CHECK(e.out.find("\"answerer\": \"neural_model\"") != std::string::npos);

  CHECK(run("eval --manifest " + dir.str() + "/manifest.json --answerer neural")
            .exit_code == 2);  // checkpoint missing
}

TEST_CASE("gradcheck passes and reports JSON") {
  RunResult r = run("gradcheck --seed 3 --coords 3");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("\"pass\": true") != std::string::npos);
  CHECK(r.out.find("\"max_rel_error\"") != std::string::npos);
}
