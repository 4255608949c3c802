#pragma once

// Held-out negative log-likelihood, one-shot variation grids and the
// comparison report.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vce/data/omniglot.hpp"
#include "vce/losses.hpp"
#include "vce/model.hpp"

namespace vce::eval {

using model::VceModel;
using nn::Tensor;
using nn::Var;

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct EvalOptions {
  std::size_t episodes = 50;
  std::size_t samples = 10;  // K latent draws per (x, q) pair
  std::size_t support_size = 19;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool zero_noise = false;  // eps = 0: deterministic mu-path reconstruction
};

// Scores of one (x, q) pair, each averaged over the K draws.
struct PairScore {
  double nll = 0.0;       // binarized target
  double soft_nll = 0.0;  // raw target
  double neg_elbo = 0.0;  // nll + KL(z)
};

struct EpisodeScores {
  std::string alphabet;
  std::vector<PairScore> pairs;
};

struct AlphabetStat {
  double mean_nll = 0.0;
  std::size_t pairs = 0;
};

struct EvalResult {
  double mean_test_nll = 0.0;
  double mean_soft_nll = 0.0;
  double mean_neg_elbo = 0.0;
  double std_error = 0.0;  // of the per-pair NLL mean
  std::size_t episode_count = 0;
  std::size_t samples_per_pair = 0;
  std::size_t pair_count = 0;
  std::map<std::string, AlphabetStat> per_alphabet;
};

// Independent copy of the parameters with gradients off, safe to share
// between evaluation threads.
inline VceModel<float> frozen_snapshot(const VceModel<float>& m) {
  VceModel<float> snap = m;
  nn::set_trainable(snap.parameters(), false);
  return snap;
}

inline float binarize(float v) { return v >= 0.5f ? 1.0f : 0.0f; }

// Scores every pair of an episode; the noise comes from rng.
inline EpisodeScores score_episode(const VceModel<float>& m, const data::Episode& ep, std::size_t k, Rng& rng,
                                   bool zero_noise = false) {
  const std::size_t b = ep.support.size(), d = m.latent_dim(), px = m.spec.pixels();
  std::vector<std::vector<float>> xs;
  for (const auto& g : ep.support) xs.push_back(g.pixels);
  const Var<float> x = model::image_batch<float>(xs, m.spec.image_size);
  const Var<float> q = model::repeat_image<float>(ep.condition.pixels, b, m.spec.image_size);
  Tensor<float> xbin = x.value();
  for (auto& v : xbin.values()) v = binarize(v);

  const auto post = model::encode(m, x, q);
  const Var<float> kl = loss::kl_per_sample(post.mu, post.logvar);
  std::vector<double> nll(b, 0.0), soft(b, 0.0);
  for (std::size_t s = 0; s < k; ++s) {
    Tensor<float> eps(nn::Shape{b, d});
    if (!zero_noise) eps = model::sample_normal<float>(b, d, rng);
    const auto z = model::reparameterize(post.mu, post.logvar, eps);
    const Var<float> y = model::convert(m, z.z, q);
    const auto& yv = y.value();
    for (std::size_t n = 0; n < b; ++n) {
      double acc_b = 0.0, acc_s = 0.0;
      for (std::size_t i = n * px; i < (n + 1) * px; ++i) {
        const double p = yv[i], lp = std::log(p), lq = std::log1p(-p);
        acc_b -= xbin[i] * lp + (1.0 - xbin[i]) * lq;
        acc_s -= x.value()[i] * lp + (1.0 - x.value()[i]) * lq;
      }
      nll[n] += acc_b;
      soft[n] += acc_s;
    }
  }
  EpisodeScores out;
  for (std::size_t n = 0; n < b; ++n) {
    PairScore p;
    p.nll = nll[n] / static_cast<double>(k);
    p.soft_nll = soft[n] / static_cast<double>(k);
    p.neg_elbo = p.nll + static_cast<double>(kl.value()[n]);
    out.pairs.push_back(p);
  }
  return out;
}

// Merges per-episode scores in the given order.
inline EvalResult summarize(const std::vector<EpisodeScores>& episodes, std::size_t k) {
  EvalResult r;
  r.episode_count = episodes.size();
  r.samples_per_pair = k;
  CompensatedSum nll, soft, elbo, sq;
  std::map<std::string, std::pair<CompensatedSum, std::size_t>> by_alpha;
  for (const auto& e : episodes) {
    auto& a = by_alpha[e.alphabet];
    for (const auto& p : e.pairs) {
      nll.add(p.nll);
      soft.add(p.soft_nll);
      elbo.add(p.neg_elbo);
      sq.add(p.nll * p.nll);
      a.first.add(p.nll);
      ++a.second;
      ++r.pair_count;
    }
  }
  if (r.pair_count == 0) throw SamplingError("evaluation produced no pairs");
  const double n = static_cast<double>(r.pair_count);
  r.mean_test_nll = nll.value() / n;
  r.mean_soft_nll = soft.value() / n;
  r.mean_neg_elbo = elbo.value() / n;
  const double var = std::max(0.0, sq.value() / n - r.mean_test_nll * r.mean_test_nll);
  r.std_error = r.pair_count > 1 ? std::sqrt(var * n / (n - 1.0) / n) : 0.0;
  for (auto& [name, acc] : by_alpha) {
    r.per_alphabet[name] = AlphabetStat{acc.first.value() / static_cast<double>(acc.second), acc.second};
  }
  return r;
}

// Mean test NLL over `opt.episodes` episodes drawn from `classes`. Every
// episode owns a seed drawn up front from opt.seed, so the result does not
// depend on the thread count; scores are merged in episode order.
inline EvalResult test_nll(const VceModel<float>& model, const data::Dataset& ds, std::span<const std::size_t> classes,
                           const EvalOptions& opt) {
  if (classes.empty()) throw SamplingError("test split is empty");
  if (opt.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  if (opt.samples == 0) throw ConfigError("evaluation needs at least one latent sample per pair");
  const VceModel<float> snap = frozen_snapshot(model);
  Rng master(opt.seed);
  std::vector<std::uint64_t> seeds(opt.episodes);
  for (auto& s : seeds) s = master.next_u64();

  std::vector<EpisodeScores> scores(opt.episodes);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < opt.episodes; i = next++) {
      try {
        Rng rng(seeds[i]);
        const auto ep = data::sample_episode(ds, classes, opt.support_size, rng);
        scores[i] = score_episode(snap, ep, opt.samples, rng, opt.zero_noise);
        scores[i].alphabet = ds.classes[ep.class_index].id.alphabet;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(std::max<std::size_t>(1, opt.threads), opt.episodes);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return summarize(scores, opt.samples);
}

// ------------------------------------------------------------- variations

struct VariationGrid {
  std::vector<float> condition;
  std::vector<std::vector<float>> variants;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t image_size = data::kGlyphSize;
  std::string provenance;
};

inline constexpr std::size_t kGridColumns = 5;
inline constexpr std::size_t kGridBorder = 2;

// n variants of q under independent prior rules z ~ N(0, I).
inline VariationGrid generate_variations(const VceModel<float>& model, const std::vector<float>& q, std::size_t n,
                                         Rng& rng) {
  if (n == 0) throw ConfigError("number of variations must be at least 1");
  const std::size_t size = model.spec.image_size;
  if (q.size() != size * size) throw ShapeError("generate_variations: condition has the wrong pixel count");
  const VceModel<float> snap = frozen_snapshot(model);
  const Tensor<float> z = model::sample_normal<float>(n, model.latent_dim(), rng);
  const Var<float> y = model::convert(snap, Var<float>::constant(z), model::repeat_image<float>(q, n, size));
  VariationGrid g;
  g.condition = q;
  g.image_size = size;
  g.cols = std::min(n, kGridColumns);
  g.rows = (n + kGridColumns - 1) / kGridColumns;
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = y.value().data() + i * size * size;
    g.variants.emplace_back(p, p + size * size);
  }
  return g;
}

// The condition sits in an extra leading column with a light frame; the
// variants fill rows of five to its right. Separators are dark gray.
inline io::GrayImage render_grid(const VariationGrid& g) {
  constexpr std::uint8_t kSeparator = 40, kFrame = 160;
  const std::size_t s = g.image_size, b = kGridBorder;
  const std::size_t width = (g.cols + 1) * s + (g.cols + 2) * b;
  const std::size_t height = g.rows * s + (g.rows + 1) * b;
  io::GrayImage img{width, height, std::vector<std::uint8_t>(width * height, kSeparator)};
  auto blit = [&](const std::vector<float>& px, std::size_t row, std::size_t col) {
    const std::size_t y0 = b + row * (s + b), x0 = b + col * (s + b);
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) img.pixels[(y0 + r) * width + x0 + c] = data::unit_to_byte(px[r * s + c]);
    }
  };
  for (std::size_t y = 0; y < s + 2 * b; ++y) {
    for (std::size_t x = 0; x < s + 2 * b; ++x) img.pixels[y * width + x] = kFrame;
  }
  blit(g.condition, 0, 0);
  for (std::size_t i = 0; i < g.variants.size(); ++i) blit(g.variants[i], i / kGridColumns, 1 + i % kGridColumns);
  return img;
}

inline void emit_grid(const VariationGrid& g, const std::filesystem::path& path, io::ImageFormat format) {
  io::write_image(path, render_grid(g), format);
}

// ----------------------------------------------------------------- report

struct ReportRow {
  std::string method;
  std::string source;  // "published" or "measured"
  double test_nll = 0.0;
  double soft_nll = std::numeric_limits<double>::quiet_NaN();
  double neg_elbo = std::numeric_limits<double>::quiet_NaN();
  std::size_t episodes = 0;
  std::size_t samples_per_pair = 0;
  std::string note;

  friend bool operator==(const ReportRow& a, const ReportRow& b) {
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    return a.method == b.method && a.source == b.source && same(a.test_nll, b.test_nll) &&
           same(a.soft_nll, b.soft_nll) && same(a.neg_elbo, b.neg_elbo) && a.episodes == b.episodes &&
           a.samples_per_pair == b.samples_per_pair && a.note == b.note;
  }
};

struct MeasuredRun {
  std::string label;
  EvalResult result;
  bool full_protocol = false;
};

inline constexpr const char* kDeskScaleNote = "desk-scale, not directly comparable";

// One-shot generalization NLLs on 28x28 Omniglot as published.
inline std::vector<ReportRow> published_rows() {
  const std::pair<const char*, double> table[] = {
      {"VAE", 106.31},
      {"Seq Gen", 95.5},
      {"GMN", 83.3},
      {"VCE + IntroVAE", 117.1},
      {"VCE + VAE", 68.75},
      {"VCE + LMVAE (sigma = 0.15)", 81.39},
      {"VCE + LMVAE (sigma = 0)", 62.8},
  };
  std::vector<ReportRow> rows;
  for (const auto& [name, nll] : table) {
    ReportRow r;
    r.method = name;
    r.source = "published";
    r.test_nll = nll;
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<ReportRow> report_rows(const std::vector<MeasuredRun>& runs) {
  auto rows = published_rows();
  for (const auto& run : runs) {
    ReportRow r;
    r.method = run.label;
    r.source = "measured";
    r.test_nll = run.result.mean_test_nll;
    r.soft_nll = run.result.mean_soft_nll;
    r.neg_elbo = run.result.mean_neg_elbo;
    r.episodes = run.result.episode_count;
    r.samples_per_pair = run.result.samples_per_pair;
    r.note = run.full_protocol ? "full protocol" : kDeskScaleNote;
    rows.push_back(r);
  }
  return rows;
}

namespace detail {
inline std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string fixed(double v) {
  if (std::isnan(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}
}  // namespace detail

inline constexpr const char* kReportCsvHeader =
    "method,source,test_nll,soft_nll,neg_elbo,episodes,samples_per_pair,note";

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += detail::csv_field(r.method) + "," + r.source + "," + detail::num(r.test_nll) + "," +
           detail::num(r.soft_nll) + "," + detail::num(r.neg_elbo) + "," + std::to_string(r.episodes) + "," +
           std::to_string(r.samples_per_pair) + "," + detail::csv_field(r.note) + "\n";
  }
  return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw DataError("report CSV: unexpected header");
  std::vector<ReportRow> rows;
  auto num = [](const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw DataError("report CSV: expected 8 fields, got " + std::to_string(f.size()));
    ReportRow r;
    r.method = f[0];
    r.source = f[1];
    r.test_nll = num(f[2]);
    r.soft_nll = num(f[3]);
    r.neg_elbo = num(f[4]);
    r.episodes = std::stoull(f[5]);
    r.samples_per_pair = std::stoull(f[6]);
    r.note = f[7];
    rows.push_back(r);
  }
  return rows;
}

inline std::string report_markdown(const std::vector<ReportRow>& rows, const std::vector<MeasuredRun>& runs) {
  std::ostringstream os;
  os << "# One-shot generalization: test negative log-likelihood\n\n"
     << "Nats per 28x28 image. Measured rows use binarized targets (threshold 0.5) and average the\n"
     << "reconstruction term over K latent draws per (target, condition) pair; the soft-target NLL and\n"
     << "the negative ELBO (reconstruction + KL) are reported alongside.\n\n"
     << "| Method | Source | Test NLL | Soft-target NLL | Negative ELBO | Note |\n"
     << "|---|---|---:|---:|---:|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.method << " | " << r.source << " | " << detail::fixed(r.test_nll) << " | "
       << detail::fixed(r.soft_nll) << " | " << detail::fixed(r.neg_elbo) << " | " << (r.note.empty() ? "" : r.note)
       << " |\n";
  }
  for (const auto& run : runs) {
    os << "\n## " << run.label << "\n\n"
       << "Episodes: " << run.result.episode_count << ", pairs: " << run.result.pair_count
       << ", K: " << run.result.samples_per_pair << ", standard error: " << detail::fixed(run.result.std_error)
       << "\n\n| Alphabet | Pairs | Mean NLL |\n|---|---:|---:|\n";
    for (const auto& [name, st] : run.result.per_alphabet) {
      os << "| " << name << " | " << st.pairs << " | " << detail::fixed(st.mean_nll) << " |\n";
    }
  }
  return os.str();
}

// Writes <out>.md (as given) and the CSV beside it (extension .csv).
inline void report(const std::vector<MeasuredRun>& runs, const std::filesystem::path& out_path) {
  if (runs.empty()) throw UsageError("report: no evaluation results");
  if (out_path.extension() == ".csv") throw ConfigError("report path names the markdown file, not the CSV");
  const auto rows = report_rows(runs);
  const std::string md = report_markdown(rows, runs), csv = report_csv(rows);
  auto csv_path = out_path;
  csv_path.replace_extension(".csv");
  io::write_file_bytes(out_path, std::vector<std::uint8_t>(md.begin(), md.end()));
  io::write_file_bytes(csv_path, std::vector<std::uint8_t>(csv.begin(), csv.end()));
}

}  // namespace vce::eval
