#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "patchscope/imageio.hpp"
#include "patchscope/scorer.hpp"

using namespace patchscope;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  const auto dir = fs::temp_directory_path() / "patchscope_scorer_tests";
  fs::create_directories(dir);
  return dir;
}

Tensor<double> random_image_tensor(std::int64_t h, std::int64_t w,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(3 * h * w));
  for (auto& v : data) v = rng.next_unit();
  return Tensor<double>::from_vector({3, h, w}, std::move(data));
}

PatchScoreMap make_map(std::int64_t h, std::int64_t w,
                       std::vector<double> logits) {
  PatchScoreMap m;
  m.h = h;
  m.w = w;
  m.stride = 8;
  m.patch = 9;
  m.logits = std::move(logits);
  return m;
}

}  // namespace

TEST_CASE("pooling worked values and the Eq-style identity") {
  const auto m = make_map(1, 3, {1.0, 2.0, 3.0});
  CHECK(image_score(m, Pooling::average) == doctest::Approx(2.0));
  CHECK(image_score(m, Pooling::max) == doctest::Approx(3.0));
  const auto c = make_map(2, 2, {0.7, 0.7, 0.7, 0.7});
  CHECK(image_score(c, Pooling::average) == doctest::Approx(0.7));
  CHECK(image_score(c, Pooling::max) == doctest::Approx(0.7));
}

TEST_CASE("property: average pooling is the exact mean; max dominates it") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t h = 1 + rng.next_index(6);
    const std::int64_t w = 1 + rng.next_index(6);
    std::vector<double> logits(static_cast<std::size_t>(h * w));
    for (auto& v : logits) v = rng.next_unit() * 4.0 - 2.0;
    const auto m = make_map(h, w, logits);
    double mean = 0.0;
    for (const double v : logits) mean += v;
    mean /= static_cast<double>(logits.size());
    CHECK(image_score(m, Pooling::average) == mean);  // exact fold
    CHECK(image_score(m, Pooling::max) >= image_score(m, Pooling::average));
  }
}

TEST_CASE("fake_probability is the logistic and monotone in the logit") {
  CHECK(fake_probability(0.0) == doctest::Approx(0.5));
  double prev = 0.0;
  for (double z = -30; z <= 30; z += 0.5) {
    const double p = fake_probability(z);
    CHECK(p > prev);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    prev = p;
  }
  // decisions are invariant under a strictly increasing rescale applied to
  // both scores and threshold
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double z = rng.next_unit() * 8.0 - 4.0;
    const bool before = fake_probability(z) >= 0.5;
    const double rescaled = 3.0 * z + 0.0;  // monotone map of the logit
    const bool after = rescaled >= 0.0;     // equally rescaled threshold
    CHECK(before == after);
  }
}

TEST_CASE("zeroed head weights produce an all-zero score map") {
  const ModelConfig cfg = reduced_ladeda_config();
  auto weights = init_weights<double>(cfg, 9);
  auto& hw = weights.at("head.weight");
  std::fill(hw.vec().begin(), hw.vec().end(), 0.0);
  std::fill(weights.at("head.bias").vec().begin(),
            weights.at("head.bias").vec().end(), 0.0);
  const auto img = random_image_tensor(41, 41, 2);
  const auto map = score_map(cfg, weights, img, "probe");
  CHECK(map.h == 5);
  CHECK(map.w == 5);
  CHECK(map.stride == 8);
  CHECK(map.patch == 9);
  for (const double v : map.logits) CHECK(v == 0.0);
}

TEST_CASE("ladeda q=9 on 224x224 yields the 729-cell grid") {
  const ModelConfig cfg = reduced_ladeda_config();
  auto weights = init_weights<float>(cfg, 4);
  Rng rng(6);
  std::vector<float> data(static_cast<std::size_t>(3 * 224 * 224));
  for (auto& v : data) v = static_cast<float>(rng.next_unit());
  auto img = Tensor<float>::from_vector({3, 224, 224}, std::move(data));
  const auto map = score_map(cfg, weights, img, "full");
  CHECK(map.h == 27);
  CHECK(map.w == 27);
  CHECK(map.cells() == 729);
}

TEST_CASE("score_map rejects inputs smaller than the patch size") {
  const ModelConfig cfg = reduced_ladeda_config();
  auto weights = init_weights<double>(cfg, 9);
  const auto img = random_image_tensor(8, 8, 3);
  CHECK_THROWS_AS(score_map(cfg, weights, img, "small"), ConfigError);
}

TEST_CASE("translating by the grid stride shifts interior map cells") {
  const ModelConfig cfg = reduced_ladeda_config();
  auto weights = init_weights<double>(cfg, 10);
  const std::int64_t H = 57;  // -> 7x7 map at stride 8
  Rng rng(8);
  std::vector<double> wide(static_cast<std::size_t>(3 * H * (H + 8)));
  for (auto& v : wide) v = rng.next_unit();
  // base view: columns [0, H); shifted view: columns [8, H+8)
  std::vector<double> base(static_cast<std::size_t>(3 * H * H));
  std::vector<double> shifted(base.size());
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < H; ++x) {
        base[static_cast<std::size_t>((c * H + y) * H + x)] =
            wide[static_cast<std::size_t>((c * H + y) * (H + 8) + x)];
        shifted[static_cast<std::size_t>((c * H + y) * H + x)] =
            wide[static_cast<std::size_t>((c * H + y) * (H + 8) + x + 8)];
      }
    }
  }
  auto m0 = score_map(cfg, weights,
                      Tensor<double>::from_vector({3, H, H}, base), "a");
  auto m1 = score_map(cfg, weights,
                      Tensor<double>::from_vector({3, H, H}, shifted), "b");
  REQUIRE(m0.w == 7);
  // cell (i, j) of the shifted image sees the window of cell (i, j+1)
  for (std::int64_t i = 0; i < m0.h; ++i) {
    for (std::int64_t j = 0; j + 1 < m0.w; ++j) {
      CHECK(m1.at(i, j) == doctest::Approx(m0.at(i, j + 1)).epsilon(1e-9));
    }
  }
}

TEST_CASE("tiny pool-then-affine equals affine-then-pool within 1e-6") {
  auto [cfg, weights] = build_tiny<double>(12);
  const auto img = random_image_tensor(32, 32, 13);
  // canonical: features -> average pool -> affine
  NoGradGuard ng;
  auto in = reshape(img, {1, 3, 32, 32});
  auto canonical = image_logits(cfg, weights, in, false);
  // dense: per-position affine -> average of logits
  const auto map = score_map(cfg, weights, img, "x");
  CHECK(canonical.item() ==
        doctest::Approx(image_score(map, Pooling::average)).epsilon(1e-6));
}

TEST_CASE("heatmap normalization, degenerate maps, and the csv sidecar") {
  const auto dir = tmp_dir();
  const auto m = make_map(2, 2, {0.0, 1.0, 2.0, 3.0});
  const auto path = (dir / "heat.pgm").string();
  CHECK_FALSE(export_heatmap(m, path));
  int w = 0, h = 0;
  const auto gray = read_pgm(path, w, h);
  CHECK(w == 2);
  CHECK(h == 2);
  CHECK(gray == std::vector<std::uint8_t>{0, 85, 170, 255});
  const std::string csv = read_text_file((dir / "heat.csv").string());
  CHECK(csv.find("0,0,0\n") != std::string::npos);
  CHECK(csv.find("1,1,3\n") != std::string::npos);

  const auto flat = make_map(2, 2, {0.5, 0.5, 0.5, 0.5});
  CHECK(export_heatmap(flat, (dir / "flat.pgm").string()));  // warns
  const auto g2 = read_pgm((dir / "flat.pgm").string(), w, h);
  for (const auto v : g2) CHECK(v == 128);
}

TEST_CASE("top-k patches return the highest cells with aligned crops") {
  auto img = random_image_tensor(25, 25, 14);
  auto m = make_map(3, 3, {0, 0, 0, 0, 5.0, 0, 0, 0, 0});
  m.stride = 8;
  m.patch = 9;
  const auto top = top_k_patches(m, img, 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].row == 1);
  CHECK(top[0].col == 1);
  CHECK(top[0].logit == doctest::Approx(5.0));
  CHECK(top[0].crop.shape() == Shape{3, 9, 9});
  // crop content matches the image window at (8, 8)
  CHECK(top[0].crop.data()[0] ==
        doctest::Approx(img.data()[8 * 25 + 8]).epsilon(1e-12));
  CHECK_THROWS_AS(top_k_patches(m, img, 10), ConfigError);
}

TEST_CASE("score csv round-trips rows") {
  const auto dir = tmp_dir();
  const std::vector<ScoreRow> rows = {
      {"a.ppm", 1.25, fake_probability(1.25), 1},
      {"b.ppm", -0.5, fake_probability(-0.5), 0},
      {"c.ppm", 0.0, 0.5, -1},
  };
  const auto path = (dir / "scores.csv").string();
  write_score_csv(path, rows);
  const auto back = read_score_csv(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].path == "a.ppm");
  CHECK(back[0].logit == doctest::Approx(1.25));
  CHECK(back[0].label == 1);
  CHECK(back[2].label == -1);
}
