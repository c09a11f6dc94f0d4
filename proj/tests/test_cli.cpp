#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "patchscope/common.hpp"

using namespace patchscope;
namespace fs = std::filesystem;

namespace {

const char* kCli = PATCHSCOPE_CLI_PATH;

fs::path work_root() {
  const auto dir = fs::temp_directory_path() / "patchscope_cli_tests";
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) { return read_text_file(p.string()); }

}  // namespace

TEST_CASE("cli end-to-end: synth, train, score, eval, sweep, ensemble, bench") {
  const auto root = work_root();
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string ds = (root / "ds").string();
  REQUIRE(run("synth --out " + ds +
              " --train 6 --val 3 --test 3 --size 48 --seed 3") == 0);
  REQUIRE(fs::exists(root / "ds" / "manifest.tsv"));
  REQUIRE(fs::exists(root / "ds" / "resolved.cfg"));

  const std::string common = " --resize-to 40 --crop 33 ";
  const std::string run1 = (root / "run1").string();
  REQUIRE(run("train --data " + ds + "/manifest.tsv --out " + run1 +
              " --kind tiny" + common +
              "--batch-size 4 --micro-batch 4 --epochs 2 --seed 5") == 0);
  REQUIRE(fs::exists(root / "run1" / "model.pscp"));
  REQUIRE(fs::exists(root / "run1" / "train_log.txt"));

  // reproducible from the resolved config artifact alone
  const std::string run2 = (root / "run2").string();
  fs::create_directories(run2);
  {
    std::ifstream in((root / "run1" / "resolved.cfg").string());
    std::ofstream out((root / "replay.cfg").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("path.out=", 0) == 0) {
        out << "path.out=" << run2 << "\n";
      } else {
        out << line << "\n";
      }
    }
  }
  REQUIRE(run("train --config " + (root / "replay.cfg").string()) == 0);
  CHECK(slurp(root / "run1" / "train_log.txt") ==
        slurp(root / "run2" / "train_log.txt"));
  CHECK(slurp(root / "run1" / "model.pscp") ==
        slurp(root / "run2" / "model.pscp"));

  // scoring and evaluation artifacts
  const std::string scores = (root / "scores.csv").string();
  REQUIRE(run("score --model " + run1 + "/model.pscp --data " + ds +
              "/manifest.tsv --split test --out " + scores + common) == 0);
  REQUIRE(fs::exists(scores));
  const std::string evald = (root / "eval").string();
  REQUIRE(run("eval --model " + run1 + "/model.pscp --data synth=" + ds +
              "/manifest.tsv --split test --out " + evald + common) == 0);
  REQUIRE(fs::exists(root / "eval" / "report.txt"));
  REQUIRE(fs::exists(root / "eval" / "report.csv"));

  // quality-100 sweep report equals the plain report's metric lines
  const std::string sweepd = (root / "sweep").string();
  REQUIRE(run("jpeg-sweep --model " + run1 + "/model.pscp --data " + ds +
              "/manifest.tsv --split test --qualities 100,80 --out " + sweepd +
              common) == 0);
  const std::string q100 = slurp(root / "sweep" / "report_q100.txt");
  const std::string plain = slurp(root / "eval" / "report.txt");
  auto metric_line = [](const std::string& text) {
    const auto pos = text.find("acc=");
    return text.substr(pos, text.find('\n', pos) - pos);
  };
  CHECK(metric_line(q100) == metric_line(plain));

  // ensemble with alpha 0 reproduces the base scores
  const std::string comb = (root / "combined.csv").string();
  REQUIRE(run("ensemble --a " + scores + " --b " + scores +
              " --alpha 0 --out " + comb) == 0);
  const std::string combined_text = slurp(comb);
  const std::string scores_text = slurp(scores);
  CHECK(combined_text == scores_text);

  // bench on the tiny preset
  REQUIRE(run("bench --kind tiny --input 64 --repeats 1 --out " +
              (root / "bench.txt").string()) == 0);
  CHECK(slurp(root / "bench.txt").find("params: 1281") != std::string::npos);

  // heatmap + top-k patches from a test image
  std::string image_path;
  {
    std::ifstream in((root / "ds" / "manifest.tsv").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.find("\ttest") != std::string::npos) {
        image_path = (root / "ds").string() + "/" + line.substr(0, line.find('\t'));
        break;
      }
    }
  }
  REQUIRE(!image_path.empty());
  const std::string heatd = (root / "heat").string();
  REQUIRE(run("heatmap --model " + run1 + "/model.pscp --image " + image_path +
              " --out " + heatd + " --top-k 2" + common) == 0);
  REQUIRE(fs::exists(root / "heat" / "heatmap.pgm"));
  REQUIRE(fs::exists(root / "heat" / "heatmap.csv"));
  REQUIRE(fs::exists(root / "heat" / "patch_00.ppm"));
  REQUIRE(fs::exists(root / "heat" / "patches.csv"));
}

TEST_CASE("cli error classes map to distinct exit codes") {
  const auto root = work_root() / "errors";
  fs::remove_all(root);
  fs::create_directories(root);

  // usage / unknown config key -> 2
  {
    std::ofstream bad((root / "bad.cfg").string());
    bad << "definitely.unknown=1\n";
  }
  CHECK(run("train --config " + (root / "bad.cfg").string()) == 2);
  CHECK(run("train") == 2);  // missing required settings
  CHECK(run("nonsense-subcommand") == 2);

  // io: missing files -> 3
  CHECK(run("eval --model nope.pscp --data x=nope.tsv --out " +
            (root / "e").string()) == 3);

  // data: metric-undefined single-class input -> 4
  const std::string ds = (root / "oneclass").string();
  REQUIRE(run("synth --out " + ds + " --train 2 --val 1 --test 2 --size 48") ==
          0);
  // strip fake test records to make AP undefined
  {
    std::ifstream in(ds + "/manifest.tsv");
    std::ofstream out(ds + "/oneclass.tsv");
    std::string line;
    while (std::getline(in, line)) {
      if (line.find("fake\ttest") == std::string::npos) out << line << "\n";
    }
  }
  const std::string run1 = (root / "m").string();
  REQUIRE(run("train --data " + ds + "/manifest.tsv --out " + run1 +
              " --kind tiny --resize-to 40 --crop 33 --batch-size 4 "
              "--micro-batch 4 --epochs 1") == 0);
  CHECK(run("eval --model " + run1 + "/model.pscp --data x=" + ds +
            "/oneclass.tsv --split test --out " + (root / "e2").string() +
            " --resize-to 40 --crop 33") == 4);
}
