#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "patchscope/distiller.hpp"
#include "patchscope/evaluator.hpp"

using namespace patchscope;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "patchscope_eval_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("average precision worked examples") {
  // perfect separation
  CHECK(average_precision({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) ==
        doctest::Approx(1.0));
  // the {0.9 fake, 0.8 real, 0.7 fake} example: P=1 at R=0.5, P=2/3 at R=1
  CHECK(average_precision({0.9, 0.8, 0.7}, {1, 0, 1}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-9));
  // single-class input is undefined
  CHECK_THROWS_AS(average_precision({0.5, 0.2}, {1, 1}), DataError);
  CHECK_THROWS_AS(average_precision({0.5, 0.2}, {0, 0}), DataError);
}

TEST_CASE("random balanced scores give AP near one half (Monte Carlo)") {
  Rng rng(17);
  const int n = 4000;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[static_cast<std::size_t>(i)] = rng.next_unit();
    labels[static_cast<std::size_t>(i)] = i % 2;
  }
  const double ap = average_precision(scores, labels);
  CHECK(ap == doctest::Approx(0.5).epsilon(0.1));
  CHECK(std::abs(ap - 0.5) < 0.05);
}

TEST_CASE("property: AP matches the brute-force PR oracle exactly") {
  Rng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.next_index(12));
    std::vector<double> scores;
    std::vector<int> labels;
    bool has_pos = false, has_neg = false;
    for (int i = 0; i < n; ++i) {
      // coarse grid scores force ties across and within classes
      scores.push_back(static_cast<double>(rng.next_index(5)) / 4.0);
      labels.push_back(static_cast<int>(rng.next_index(2)));
      has_pos = has_pos || labels.back() == 1;
      has_neg = has_neg || labels.back() == 0;
    }
    if (!has_pos) labels[0] = 1;
    if (!has_neg) labels[static_cast<std::size_t>(n - 1)] = 0;
    const double ours = average_precision(scores, labels);
    const double oracle = oracles::brute_force_ap(scores, labels);
    CHECK(ours == oracle);  // bitwise: same fold, independent counting
  }
}

TEST_CASE("property: AP is invariant under strictly increasing transforms") {
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng.next_index(20));
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      scores.push_back(rng.next_unit() * 6.0 - 3.0);
      labels.push_back(static_cast<int>(rng.next_index(2)));
    }
    labels[0] = 1;
    labels[static_cast<std::size_t>(n - 1)] = 0;
    std::vector<double> warped(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      warped[i] = std::exp(0.7 * scores[i]) + 2.0 * scores[i];
    }
    CHECK(average_precision(scores, labels) ==
          doctest::Approx(average_precision(warped, labels)).epsilon(1e-12));
  }
}

TEST_CASE("accuracy worked values and the boundary tie rule") {
  CHECK(accuracy({0.9, 0.1}, {1, 0}) == doctest::Approx(1.0));
  CHECK(accuracy({0.1, 0.9}, {1, 0}) == doctest::Approx(0.0));
  // probability exactly 0.5 counts as fake
  CHECK(accuracy({0.5}, {1}) == doctest::Approx(1.0));
  CHECK(accuracy({0.5}, {0}) == doctest::Approx(0.0));
}

TEST_CASE("reports aggregate mAP as the unweighted mean of per-set AP") {
  EvalReport r;
  r.sets.push_back({"a", 2, 2, 0.75, 1.0, 0});
  r.sets.push_back({"b", 3, 1, 0.5, 0.5, 1});
  r.finalize();
  CHECK(r.map == doctest::Approx(0.75));
  CHECK(r.mean_acc == doctest::Approx(0.625));
  const std::string text = r.to_text();
  CHECK(text.find("positive") == std::string::npos);  // metadata not set here
  CHECK(text.find("set a n_real=2 n_fake=2") != std::string::npos);
  CHECK(text.find("aggregate mean_acc=0.625000 map=0.750000") !=
        std::string::npos);
  const std::string csv = r.to_csv();
  CHECK(csv.find("a,2,2,0.750000,1.000000,0") != std::string::npos);
}

TEST_CASE("ensemble: alpha 0 is the identity; self-ensemble preserves ranks") {
  std::vector<ScoreRow> a = {{"x.ppm", 1.0, fake_probability(1.0), 1},
                             {"y.ppm", -0.5, fake_probability(-0.5), 0},
                             {"z.ppm", 0.25, fake_probability(0.25), 1}};
  const auto same = ensemble_scores(a, a, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same[i].logit == a[i].logit);
  }
  // b = a, alpha = 1 doubles logits: ACC and AP unchanged
  const auto doubled = ensemble_scores(a, a, 1.0);
  std::vector<double> s0, s1, p0, p1;
  std::vector<int> labels;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s0.push_back(a[i].logit);
    s1.push_back(doubled[i].logit);
    p0.push_back(a[i].prob);
    p1.push_back(doubled[i].prob);
    labels.push_back(a[i].label);
    CHECK(doubled[i].logit == doctest::Approx(2.0 * a[i].logit));
  }
  CHECK(average_precision(s0, labels) ==
        doctest::Approx(average_precision(s1, labels)));
  CHECK(accuracy(p0, labels) == doctest::Approx(accuracy(p1, labels)));
}

TEST_CASE("ensemble mismatch lists the symmetric difference") {
  std::vector<ScoreRow> a = {{"only_in_a.ppm", 1.0, 0.7, 1},
                             {"shared.ppm", 0.5, 0.6, 0}};
  std::vector<ScoreRow> b = {{"shared.ppm", 0.5, 0.6, 0},
                             {"only_in_b.ppm", 0.1, 0.5, 1}};
  try {
    ensemble_scores(a, b, 0.5);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("only_in_a.ppm") != std::string::npos);
    CHECK(msg.find("only_in_b.ppm") != std::string::npos);
  }
}

TEST_CASE("complementary weak scorers ensemble above either alone") {
  // scorer A separates the first half of fakes, scorer B the second half
  Rng rng(31);
  std::vector<ScoreRow> a, b;
  for (int i = 0; i < 200; ++i) {
    const int label = i % 2;
    const bool first_half = i < 100;
    const double noise_a = rng.next_unit() * 0.4;
    const double noise_b = rng.next_unit() * 0.4;
    const double sa = (label && first_half ? 1.0 : 0.0) + noise_a;
    const double sb = (label && !first_half ? 1.0 : 0.0) + noise_b;
    const std::string path = "img" + std::to_string(i) + ".ppm";
    a.push_back({path, sa, fake_probability(sa), label});
    b.push_back({path, sb, fake_probability(sb), label});
  }
  auto ap_of = [](const std::vector<ScoreRow>& rows) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& r : rows) {
      s.push_back(r.logit);
      l.push_back(r.label);
    }
    return average_precision(s, l);
  };
  std::vector<double> grid;
  for (double alpha = 0.0; alpha <= 2.0001; alpha += 0.1) grid.push_back(alpha);
  const double best_alpha = grid_search_alpha(a, b, grid);
  const double ap_a = ap_of(a);
  const double ap_b = ap_of(b);
  const double ap_ens = ap_of(ensemble_scores(a, b, best_alpha));
  CHECK(ap_ens >= std::max(ap_a, ap_b));
  CHECK(best_alpha > 0.0);
}

TEST_CASE("jpeg bias sweep: quality 100 is a bitwise no-op on the report") {
  const auto dir = fresh_dir("sweep");
  SynthConfig scfg;
  scfg.test_per_class = 4;
  scfg.image_size = 48;
  scfg.seed = 41;
  const DatasetManifest manifest = synth_generate(scfg, dir.string());
  PreprocessConfig pre;
  pre.resize_to = 40;
  pre.crop = 33;
  const ModelConfig cfg = reduced_ladeda_config();
  auto weights = init_weights<float>(cfg, 50);

  const auto reports = jpeg_bias_sweep(cfg, weights, manifest, Split::test,
                                       {100, 90, 80, 70}, pre);
  REQUIRE(reports.size() == 4);
  // plain evaluation equals the quality-100 report's metrics exactly
  std::vector<NamedSplit> sets = {{"test", &manifest, Split::test}};
  const EvalReport plain = evaluate(cfg, weights, sets, pre);
  CHECK(reports[0].sets[0].acc == plain.sets[0].acc);
  CHECK(reports[0].sets[0].ap == plain.sets[0].ap);
  // all four reports list the same constant n_fake
  for (const auto& r : reports) {
    CHECK(r.sets[0].n_fake == 4);
    CHECK(r.sets[0].n_real == 4);
  }
  // swept metadata names the quality and the fixed chroma mode
  CHECK(reports[2].to_text().find("jpeg_quality: 80") != std::string::npos);
  CHECK(reports[2].to_text().find("4:2:0") != std::string::npos);
}

TEST_CASE("bench reports cost-model constants and dominance of tiny latency") {
  auto [tiny_cfg, tiny_w] = build_tiny<float>(60);
  ModelConfig ladeda_cfg;  // full width
  auto ladeda_w = init_weights<float>(ladeda_cfg, 61);
  const auto tiny_report = bench(tiny_cfg, tiny_w, 64, 64, 3);
  const auto ladeda_report = bench(ladeda_cfg, ladeda_w, 64, 64, 3);
  CHECK(tiny_report.params == 1281);
  CHECK(static_cast<double>(ladeda_report.flops) /
            static_cast<double>(tiny_report.flops) >=
        300.0);
  CHECK(tiny_report.median_ms < ladeda_report.median_ms);
  CHECK(tiny_report.flops_2x == 2 * tiny_report.flops);
  CHECK(!tiny_report.hardware.empty());
  const std::string text = ladeda_report.to_text();
  CHECK(text.find("params: 13641921") != std::string::npos);
}
