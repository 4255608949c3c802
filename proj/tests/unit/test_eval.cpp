#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"
#include "vce/eval.hpp"

using namespace vce;
using namespace vce::eval;
using model::ModelSpec;
namespace vt = vce::testing;

namespace {

const ModelSpec kSmall{28, 4, 1};
const double kHalfBaseline = 784.0 * std::numbers::ln2;

data::Dataset fixture() {
  Rng rng(21);
  return vt::random_dataset(3, 2, 6, rng);
}

const std::vector<std::size_t> kClasses{0, 1, 2, 3, 4, 5};

EvalOptions small_options() {
  EvalOptions o;
  o.episodes = 6;
  o.samples = 3;
  o.support_size = 5;
  o.seed = 4;
  return o;
}

bool same_result(const EvalResult& a, const EvalResult& b) {
  return a.mean_test_nll == b.mean_test_nll && a.mean_soft_nll == b.mean_soft_nll &&
         a.mean_neg_elbo == b.mean_neg_elbo && a.std_error == b.std_error && a.pair_count == b.pair_count;
}

std::string slurp(const std::filesystem::path& p) {
  const auto b = io::read_file_bytes(p);
  return {b.begin(), b.end()};
}

}  // namespace

// ---------------------------------------------------------------- test NLL

TEST(TestNll, ConstantHalfOutputGivesBaseline) {
  const auto m = model::make_zero_model<float>(kSmall);
  const auto r = test_nll(m, fixture(), kClasses, small_options());
  EXPECT_NEAR(r.mean_test_nll, kHalfBaseline, 1e-9);
  EXPECT_NEAR(r.mean_soft_nll, kHalfBaseline, 1e-9);
  EXPECT_NEAR(r.mean_neg_elbo, kHalfBaseline, 1e-9);
  EXPECT_NEAR(r.std_error, 0.0, 1e-6);
  EXPECT_EQ(r.episode_count, 6u);
  EXPECT_EQ(r.samples_per_pair, 3u);
  EXPECT_EQ(r.pair_count, 30u);
  std::size_t pairs = 0;
  for (const auto& [name, s] : r.per_alphabet) {
    EXPECT_NEAR(s.mean_nll, kHalfBaseline, 1e-9) << name;
    pairs += s.pairs;
  }
  EXPECT_EQ(pairs, 30u);
}

TEST(TestNll, FreshModelIsFiniteAndNonNegative) {
  Rng rng(1);
  const auto m = model::make_model<float>(kSmall, rng);
  auto opt = small_options();
  opt.samples = 10;
  const auto r = test_nll(m, fixture(), kClasses, opt);
  EXPECT_TRUE(std::isfinite(r.mean_test_nll));
  EXPECT_GE(r.mean_test_nll, 0.0);
  EXPECT_GE(r.mean_neg_elbo, r.mean_test_nll);
}

TEST(TestNll, ThreadCountDoesNotChangeTheResult) {
  Rng rng(2);
  const auto m = model::make_model<float>(kSmall, rng);
  const auto ds = fixture();
  auto opt = small_options();
  const auto one = test_nll(m, ds, kClasses, opt);
  for (std::size_t t : {2u, 3u, 8u}) {
    opt.threads = t;
    EXPECT_TRUE(same_result(one, test_nll(m, ds, kClasses, opt))) << t;
  }
  opt.seed = 5;
  EXPECT_NE(test_nll(m, ds, kClasses, opt).mean_test_nll, one.mean_test_nll);
}

TEST(TestNll, ZeroNoiseEqualsMuPathReconstruction) {
  Rng rng(3);
  const auto m = model::make_model<float>(kSmall, rng);
  const auto ds = fixture();
  Rng er(8);
  const auto ep = data::sample_episode(ds, kClasses, 4, er);
  Rng unused(0);
  const auto one = score_episode(m, ep, 1, unused, true);
  const auto five = score_episode(m, ep, 5, unused, true);
  std::vector<std::vector<float>> xs;
  for (const auto& g : ep.support) xs.push_back(g.pixels);
  const auto x = model::image_batch<float>(xs, 28);
  const auto q = model::repeat_image<float>(ep.condition.pixels, 4, 28);
  const auto post = model::encode(m, x, q);
  const auto y = model::convert(m, post.mu, q).value();
  for (std::size_t n = 0; n < 4; ++n) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 784; ++i) {
      const double t = ep.support[n].pixels[i] >= 0.5f ? 1.0 : 0.0, p = y[n * 784 + i];
      expect -= t * std::log(p) + (1 - t) * std::log(1 - p);
    }
    EXPECT_NEAR(one.pairs[n].nll, expect, 1e-9 * expect);
    EXPECT_NEAR(five.pairs[n].nll, one.pairs[n].nll, 1e-9 * expect);
  }
}

TEST(TestNll, SpreadShrinksWithMoreSamples) {
  Rng rng(12);
  auto m = model::make_model<float>(kSmall, rng);
  // widen the posterior so the latent draws matter
  auto& bias = m.encoder.head.bias.mutable_value();
  for (std::size_t i = 56; i < 112; ++i) bias[i] = 2.0f;
  const auto ds = fixture();
  Rng er(3);
  const auto ep = data::sample_episode(ds, kClasses, 1, er);
  auto spread = [&](std::size_t k) {
    std::vector<double> v;
    for (std::uint64_t s = 0; s < 60; ++s) {
      Rng r(1000 + s);
      v.push_back(score_episode(m, ep, k, r).pairs[0].nll);
    }
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x / v.size();
    for (double x : v) var += (x - mean) * (x - mean) / (v.size() - 1);
    return std::sqrt(var);
  };
  const double ratio = spread(1) / spread(16);
  EXPECT_GT(ratio, 2.5);  // 4 expected; loose bounds for 60 repeats
  EXPECT_LT(ratio, 6.5);
}

TEST(TestNll, SummaryIsOrderInsensitive) {
  Rng rng(4);
  std::vector<EpisodeScores> eps(50);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    eps[i].alphabet = "a" + std::to_string(i % 3);
    for (int p = 0; p < 19; ++p) {
      const double v = rng.uniform(0.0, 1e3) * (p % 2 ? 1e-6 : 1.0);
      eps[i].pairs.push_back({v, v + 1, v + 2});
    }
  }
  const auto fwd = summarize(eps, 10);
  std::reverse(eps.begin(), eps.end());
  const auto rev = summarize(eps, 10);
  EXPECT_NEAR(fwd.mean_test_nll, rev.mean_test_nll, 1e-9);
  EXPECT_NEAR(fwd.mean_neg_elbo, rev.mean_neg_elbo, 1e-9);
  EXPECT_EQ(fwd.per_alphabet.size(), 3u);
  EXPECT_THROW(summarize({}, 10), SamplingError);
}

TEST(TestNll, Errors) {
  const auto m = model::make_zero_model<float>(kSmall);
  const auto ds = fixture();
  auto opt = small_options();
  EXPECT_THROW(test_nll(m, ds, std::vector<std::size_t>{}, opt), SamplingError);
  opt.episodes = 0;
  EXPECT_THROW(test_nll(m, ds, kClasses, opt), ConfigError);
  opt = small_options();
  opt.samples = 0;
  EXPECT_THROW(test_nll(m, ds, kClasses, opt), ConfigError);
  opt = small_options();
  opt.support_size = 6;  // every class has exactly six exemplars
  opt.threads = 3;
  EXPECT_THROW(test_nll(m, ds, kClasses, opt), SamplingError);
}

TEST(TestNll, PublishedConstants) {
  const auto rows = published_rows();
  ASSERT_EQ(rows.size(), 7u);
  const double expected[] = {106.31, 95.5, 83.3, 117.1, 68.75, 81.39, 62.8};
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(rows[i].test_nll, expected[i]);
    EXPECT_EQ(rows[i].source, "published");
  }
  EXPECT_EQ(rows[3].method, "VCE + IntroVAE");
  EXPECT_EQ(rows[6].method, "VCE + LMVAE (sigma = 0)");
}

// -------------------------------------------------------------- variations

TEST(Variations, LayoutAndPixelDims) {
  Rng rng(5);
  const auto m = model::make_model<float>(kSmall, rng);
  const std::vector<float> q(784, 0.25f);
  for (auto [n, rows, cols, w, h] : {std::tuple{1u, 1u, 1u, 62u, 32u}, std::tuple{5u, 1u, 5u, 182u, 32u},
                                    std::tuple{6u, 2u, 5u, 182u, 62u}, std::tuple{20u, 4u, 5u, 182u, 122u}}) {
    Rng r(9);
    const auto g = generate_variations(m, q, n, r);
    EXPECT_EQ(g.variants.size(), n);
    EXPECT_EQ(g.rows, rows);
    EXPECT_EQ(g.cols, cols);
    const auto img = render_grid(g);
    EXPECT_EQ(img.width, w);
    EXPECT_EQ(img.height, h);
    for (const auto& v : g.variants)
      for (float p : v) {
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
      }
  }
  Rng r(1);
  EXPECT_THROW(generate_variations(m, q, 0, r), ConfigError);
  EXPECT_THROW(generate_variations(m, std::vector<float>(783), 1, r), ShapeError);
}

TEST(Variations, SeededAndDistinct) {
  Rng rng(6);
  const auto m = model::make_model<float>(kSmall, rng);
  Rng qr(7);
  std::vector<float> q(784);
  for (auto& v : q) v = static_cast<float>(qr.uniform());
  Rng a(1), b(1), c(2);
  const auto ga = generate_variations(m, q, 3, a), gb = generate_variations(m, q, 3, b),
             gc = generate_variations(m, q, 3, c);
  EXPECT_EQ(ga.variants, gb.variants);
  double dist = 0.0;
  for (std::size_t i = 0; i < 784; ++i) dist += std::abs(ga.variants[0][i] - gc.variants[0][i]);
  EXPECT_GT(dist, 0.0);
  EXPECT_NE(ga.variants[0], ga.variants[1]);
}

TEST(Variations, GridPlacesConditionAndVariants) {
  VariationGrid g;
  g.condition.assign(784, 1.0f);
  g.variants = {std::vector<float>(784, 0.0f), std::vector<float>(784, 0.5f)};
  g.rows = 1;
  g.cols = 2;
  const auto img = render_grid(g);
  ASSERT_EQ(img.width, 3 * 28 + 4 * 2);
  auto at = [&](std::size_t x, std::size_t y) { return img.pixels[y * img.width + x]; };
  EXPECT_EQ(at(2, 2), data::unit_to_byte(1.0f));
  EXPECT_EQ(at(2 + 30, 2), data::unit_to_byte(0.0f));
  EXPECT_EQ(at(2 + 60 + 27, 2 + 27), data::unit_to_byte(0.5f));
  EXPECT_NE(at(31, 0), at(32, 0));  // frame edge vs separator
}

TEST(Variations, EmittedFilesAreLosslessAndDeterministic) {
  Rng rng(8);
  const auto m = model::make_model<float>(kSmall, rng);
  const std::vector<float> q(784, 0.0f);
  vt::TempDir dir("grid");
  for (auto [fmt, ext] : {std::pair{io::ImageFormat::png, "png"}, std::pair{io::ImageFormat::pgm_binary, "pgm"},
                          std::pair{io::ImageFormat::pgm_ascii, "txt.pgm"}}) {
    Rng r1(3), r2(3);
    const auto g1 = generate_variations(m, q, 7, r1), g2 = generate_variations(m, q, 7, r2);
    const auto p1 = dir / (std::string("a.") + ext), p2 = dir / (std::string("b.") + ext);
    emit_grid(g1, p1, fmt);
    emit_grid(g2, p2, fmt);
    EXPECT_EQ(io::read_file_bytes(p1), io::read_file_bytes(p2));
    const auto back = io::read_image(p1);
    const auto img = render_grid(g1);
    EXPECT_EQ(back.width, img.width);
    EXPECT_EQ(back.height, img.height);
    EXPECT_EQ(back.pixels, img.pixels);
  }
  EXPECT_THROW(emit_grid(generate_variations(m, q, 1, rng), dir / "no" / "such" / "dir.png", io::ImageFormat::png),
               IoError);
}

// ------------------------------------------------------------------ report

namespace {

MeasuredRun measured(const std::string& label = "this run, with a comma") {
  MeasuredRun run;
  run.label = label;
  run.result.mean_test_nll = 543.123456789;
  run.result.mean_soft_nll = 500.5;
  run.result.mean_neg_elbo = 560.0 + 1.0 / 3.0;
  run.result.episode_count = 50;
  run.result.samples_per_pair = 10;
  run.result.pair_count = 950;
  run.result.per_alphabet["Alpha"] = {540.0, 500};
  return run;
}

}  // namespace

TEST(Report, OneRunGivesEightRowsThatRoundTrip) {
  const auto rows = report_rows({measured()});
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.back().source, "measured");
  EXPECT_EQ(rows.back().note, kDeskScaleNote);
  const auto back = parse_report_csv(report_csv(rows));
  EXPECT_EQ(back, rows);
  EXPECT_TRUE(std::isnan(back[0].soft_nll));
}

TEST(Report, WritesMarkdownAndCsv) {
  vt::TempDir dir("report");
  auto run = measured("quote \" and comma,");
  report({run}, dir / "r.md");
  const auto md = slurp(dir / "r.md");
  const auto csv = slurp(dir / "r.csv");
  EXPECT_NE(md.find(kDeskScaleNote), std::string::npos);
  EXPECT_NE(md.find("| Alpha | 500 | 540.00 |"), std::string::npos);
  const auto rows = parse_report_csv(csv);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.back().method, run.label);
  EXPECT_EQ(rows.back().test_nll, run.result.mean_test_nll);
  EXPECT_EQ(rows.back().neg_elbo, run.result.mean_neg_elbo);

  run.full_protocol = true;
  report({run}, dir / "full.md");
  EXPECT_EQ(parse_report_csv(slurp(dir / "full.csv")).back().note, "full protocol");
}

TEST(Report, Errors) {
  vt::TempDir dir("report-errors");
  EXPECT_THROW(report({}, dir / "empty.md"), UsageError);
  EXPECT_FALSE(std::filesystem::exists(dir / "empty.md"));
  EXPECT_FALSE(std::filesystem::exists(dir / "empty.csv"));
  EXPECT_THROW(report({measured()}, dir / "table.csv"), ConfigError);
  EXPECT_THROW(parse_report_csv("bogus\n"), DataError);
  EXPECT_THROW(parse_report_csv(std::string(kReportCsvHeader) + "\na,b\n"), DataError);
}
