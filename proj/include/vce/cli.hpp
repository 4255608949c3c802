#pragma once

// The `vce` command line: ingest -> pretrain -> train -> finetune -> eval ->
// convert, plus `synth` (procedural Omniglot-layout data) and `config`.
// run() returns the process exit code: 0 ok, 2 I/O or data, 3 config or
// usage, 4 checkpoint incompatibility.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <iostream>
#include <json.hpp>
#include <regex>
#include <string>
#include <vector>

#include "vce/checkpoint.hpp"
#include "vce/config.hpp"
#include "vce/data/omniglot.hpp"
#include "vce/data/synthetic.hpp"
#include "vce/eval.hpp"
#include "vce/training.hpp"

namespace vce::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kFailure = 1, kDataError = 2, kConfigError = 3, kCheckpointError = 4 };

// Git's object id for a blob: SHA-1 over "blob <size>\0" + content.
inline std::string git_blob_sha1(const std::vector<std::uint8_t>& bytes) {
  const std::string head = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) && EVP_DigestUpdate(ctx, head.data(), head.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) && EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::vector<std::size_t> all_classes(const data::Dataset& ds) {
  std::vector<std::size_t> v(ds.classes.size());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// ------------------------------------------------------------------ ingest

struct IngestArgs {
  std::string root;
  std::string out_cache;
};

inline int cmd_ingest(const IngestArgs& a, std::ostream& out) {
  const auto ds = data::ingest(a.root);
  const auto bytes = data::encode_cache(ds);
  io::write_file_bytes(a.out_cache, bytes);
  out << ds.alphabets().size() << " alphabets, " << ds.classes.size() << " classes, " << ds.exemplar_count()
      << " exemplars\n"
      << "cache " << a.out_cache << " (" << bytes.size() << " bytes, blob " << git_blob_sha1(bytes) << ")\n";
  return kOk;
}

// --------------------------------------------------------------- training

struct TrainArgs {
  std::string cache;
  std::string config;
  std::vector<std::string> sets;
  std::string resume;
  std::string out_checkpoint;
  std::string metrics;
  std::string manifest;
  std::uint64_t split_seed = 0;
  bool from_scratch = false;
  std::size_t max_episodes = 0;  // stop this invocation early (0 = no limit)
};

inline train::TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  train::TrainConfig cfg;
  if (!path.empty()) cfg = config::load(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    config::apply(cfg, config::detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  config::apply_environment(cfg);
  cfg.validate();
  return cfg;
}

inline Json config_json(const train::TrainConfig& cfg) {
  Json j = Json::object();
  std::istringstream in(config::to_text(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

// Keeps the metrics file consistent with a resumed state: rows at or past
// the resume step are dropped so the continued run rewrites them.
inline void prepare_metrics(const fs::path& path, std::uint64_t resume_step, bool resuming) {
  std::vector<std::string> keep;
  if (resuming && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line == loss::kMetricsHeader) continue;
      if (std::stoull(line.substr(0, line.find(','))) < resume_step) keep.push_back(line);
    }
  }
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw IoError("cannot write metrics file " + path.string());
  o << loss::kMetricsHeader << '\n';
  for (const auto& l : keep) o << l << '\n';
}

// Periodic checkpoints are <stem>.<phase>-<episode>.ckpt beside the final
// one; only the newest `keep` survive.
inline void prune_checkpoints(const fs::path& final_path, train::Phase phase, std::size_t keep) {
  const auto dir = final_path.has_parent_path() ? final_path.parent_path() : fs::path(".");
  const std::regex pat(std::regex_replace(final_path.stem().string(), std::regex(R"([.^$|()\[\]{}*+?\\])"), R"(\$&)") +
                       "\\." + train::phase_name(phase) + "-([0-9]+)\\.ckpt");
  std::vector<std::pair<std::uint64_t, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pat)) found.emplace_back(std::stoull(m[1]), e.path());
  }
  std::sort(found.begin(), found.end());
  for (std::size_t i = 0; i + keep < found.size(); ++i) fs::remove(found[i].second);
}

inline fs::path periodic_path(const fs::path& final_path, train::Phase phase, std::uint64_t episode) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%08llu.ckpt", static_cast<unsigned long long>(episode));
  auto p = final_path;
  p.replace_filename(final_path.stem().string() + "." + train::phase_name(phase) + buf);
  return p;
}

inline int cmd_train(train::Phase phase, const TrainArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a.config, a.sets);
  const auto cache_bytes = io::read_file_bytes(a.cache);
  const auto ds = data::decode_cache(cache_bytes);
  const auto split = data::split(ds, a.split_seed);

  train::TrainState<float> st;
  std::string parent_meta;
  if (!a.resume.empty()) {
    auto loaded = ckpt::load(a.resume);
    if (!(loaded.state.model.spec == cfg.model_spec())) {
      throw CheckpointError("checkpoint architecture (channels " + std::to_string(loaded.state.model.spec.channels) +
                            ", blocks " + std::to_string(loaded.state.model.spec.residual_blocks) +
                            ") does not match the configuration");
    }
    st = std::move(loaded.state);
    parent_meta = loaded.meta;
    // the loaded windows keep their own capacity; a resized window restarts
    if (st.kl_z.capacity() != cfg.monitor_window) st.kl_z = st.kl_zc = st.con = train::RunningWindow(cfg.monitor_window);
  } else {
    if (phase == train::Phase::lmvae && !a.from_scratch) {
      throw CheckpointError("finetune needs --resume with a phase-2 checkpoint (or --from-scratch)");
    }
    st = train::make_state<float>(cfg);
  }
  if (phase == train::Phase::lmvae && !a.from_scratch && st.phase != train::Phase::vae &&
      st.phase != train::Phase::lmvae) {
    throw CheckpointError(std::string("finetune needs a phase-2 checkpoint, got phase '") + train::phase_name(st.phase) +
                          "'");
  }

  const fs::path final_ckpt = a.out_checkpoint;
  const fs::path metrics_path = a.metrics.empty() ? fs::path(a.out_checkpoint + ".metrics.csv") : fs::path(a.metrics);
  const fs::path manifest_path =
      a.manifest.empty() ? fs::path(a.out_checkpoint + ".manifest.json") : fs::path(a.manifest);

  Json manifest;
  manifest["tool"] = "vce";
  manifest["tool_version"] = kToolVersion;
  manifest["command"] = train::phase_name(phase);
  manifest["config"] = config_json(cfg);
  manifest["data_cache"] = {{"path", a.cache}, {"git_blob_sha1", git_blob_sha1(cache_bytes)}};
  manifest["seeds"] = {{"config", cfg.seed}, {"split", a.split_seed}};
  manifest["split"] = {{"canonical", split.canonical},
                       {"train_alphabets", split.train_alphabets.size()},
                       {"test_alphabets", split.test_alphabets.size()},
                       {"train_classes", split.train_classes.size()}};
  manifest["started_from"] = a.resume.empty() ? Json(nullptr)
                                              : Json{{"checkpoint", a.resume},
                                                     {"manifest", parent_meta},
                                                     {"phase", train::phase_name(st.phase)},
                                                     {"step", st.step}};
  manifest["start_time"] = utc_timestamp();
  manifest["start_step"] = st.step;
  const std::string meta = manifest_path.string();

  const bool same_phase = st.phase == phase;
  prepare_metrics(metrics_path, st.step, !a.resume.empty());
  std::ofstream metrics(metrics_path, std::ios::app);

  out << "phase " << train::phase_name(phase) << ", config:\n" << config::to_text(cfg);
  out << "train split: " << split.train_alphabets.size() << " alphabets, " << split.train_classes.size()
      << " classes" << (split.canonical ? " (background/evaluation directories)" : " (seeded split)") << "\n";
  if (!a.resume.empty()) {
    out << "resuming at step " << st.step << (same_phase ? ", phase episode " + std::to_string(st.phase_episode) : "")
        << "\n";
  }

  std::size_t run_episodes = 0;
  train::TrainHooks<float> hooks;
  hooks.metrics = [&](std::uint64_t step, train::Phase p, const loss::LossReport& r) {
    metrics << loss::metrics_row(step, train::phase_name(p), r) << '\n';
  };
  hooks.checkpoint = [&](const train::TrainState<float>& s) {
    metrics.flush();
    ckpt::save(periodic_path(final_ckpt, phase, s.phase_episode), const_cast<train::TrainState<float>&>(s), meta);
    prune_checkpoints(final_ckpt, phase, cfg.keep_checkpoints);
  };
  hooks.monitor = [&](const train::MonitorStatus& s) { out << "step " << st.step << ": " << train::describe(s) << "\n"; };
  hooks.keep_going = [&](const train::TrainState<float>&) {
    return a.max_episodes == 0 || run_episodes++ < a.max_episodes;
  };

  train::run_phase(st, phase, ds, split.train_classes, cfg, hooks);
  metrics.close();
  ckpt::save(final_ckpt, st, meta);

  manifest["end_time"] = utc_timestamp();
  manifest["end_step"] = st.step;
  manifest["phase_episodes"] = st.phase_episode;
  manifest["complete"] = st.phase_episode >= cfg.episodes(phase) || st.converged;
  manifest["outputs"] = {{"checkpoint", a.out_checkpoint}, {"metrics", metrics_path.string()}};
  {
    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw IoError("cannot write manifest " + manifest_path.string());
    mf << manifest.dump(2) << '\n';
  }
  out << "finished at step " << st.step << " (phase episode " << st.phase_episode << ")";
  if (phase == train::Phase::lmvae) out << "; " << train::describe(train::theorem1_monitor(st, cfg));
  out << "\ncheckpoint " << a.out_checkpoint << "\n";
  return kOk;
}

// A fresh, untrained checkpoint (phase "init").
struct InitArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out_checkpoint;
};

inline int cmd_init(const InitArgs& a, std::ostream& out) {
  const auto cfg = resolve_config(a.config, a.sets);
  auto st = train::make_state<float>(cfg);
  ckpt::save(a.out_checkpoint, st, "");
  out << "initialized " << st.model.parameter_count() << " parameters (seed " << cfg.seed << ") -> "
      << a.out_checkpoint << "\n";
  return kOk;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string cache;
  std::string checkpoint;
  std::size_t episodes = 50;
  std::size_t k = 10;
  std::size_t support_size = 19;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::size_t threads = 1;
  std::string out_report;
  std::string label;
};

inline int cmd_eval(EvalArgs a, std::ostream& out) {
  if (a.episodes == 0) throw ConfigError("--episodes must be at least 1");
  if (a.k == 0) throw ConfigError("--K must be at least 1");
  if (const char* v = std::getenv("VCE_THREADS"); v && *v) {
    train::TrainConfig tmp;
    config::apply_environment(tmp);
    a.threads = tmp.thread_count;
  }
  const auto ds = data::read_cache(a.cache);
  const auto split = data::split(ds, a.split_seed);
  const auto model = ckpt::load_model(a.checkpoint);
  eval::EvalOptions opt;
  opt.episodes = a.episodes;
  opt.samples = a.k;
  opt.support_size = a.support_size;
  opt.seed = a.seed;
  opt.threads = a.threads;
  const auto result = eval::test_nll(model, ds, split.test_classes, opt);
  eval::MeasuredRun run;
  run.label = a.label.empty() ? "this run (" + fs::path(a.checkpoint).filename().string() + ")" : a.label;
  run.result = result;
  run.full_protocol = false;
  eval::report({run}, a.out_report);
  char buf[256];
  std::snprintf(buf, sizeof buf, "mean test NLL %.4f nats (soft %.4f, negative ELBO %.4f, s.e. %.4f) over %zu pairs\n",
                result.mean_test_nll, result.mean_soft_nll, result.mean_neg_elbo, result.std_error, result.pair_count);
  out << buf << "report " << a.out_report << "\n";
  return kOk;
}

// ----------------------------------------------------------------- convert

struct ConvertArgs {
  std::string checkpoint;
  std::string image;
  std::size_t n = 20;
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "png";
};

inline int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  const auto format = io::parse_image_format(a.format);
  if (a.n == 0) throw ConfigError("--n must be at least 1");
  const auto model = ckpt::load_model(a.checkpoint);
  const auto glyph = data::preprocess(io::read_image(a.image));
  Rng rng(a.seed);
  auto grid = eval::generate_variations(model, glyph.pixels, a.n, rng);
  grid.provenance = a.checkpoint + " seed " + std::to_string(a.seed);
  eval::emit_grid(grid, a.out, format);
  out << grid.rows << "x" << grid.cols << " variations of " << a.image << " -> " << a.out << "\n";
  return kOk;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  data::SyntheticSpec spec;
  std::string format = "png";
};

inline int cmd_synth(SynthArgs a, std::ostream& out) {
  a.spec.format = io::parse_image_format(a.format);
  const auto n = data::write_synthetic_omniglot(a.out, a.spec);
  out << "wrote " << n << " images under " << a.out << "\n";
  return kOk;
}

// -------------------------------------------------------------- dispatcher

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Variational convertor-encoder: one-shot glyph generation", "vce"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Load an Omniglot tree and write the binary data cache");
  c_ingest->add_option("--root", ingest.root, "Omniglot root directory")->required();
  c_ingest->add_option("--out-cache", ingest.out_cache, "Cache file to write")->required();

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  c_init->add_option("--config", init.config, "key = value config file");
  c_init->add_option("--set", init.sets, "Override one config key (key=value)");
  c_init->add_option("--out-checkpoint", init.out_checkpoint)->required();

  TrainArgs targs[3];
  const std::pair<const char*, const char*> phases[3] = {
      {"pretrain", "Reptile pre-training"},
      {"train", "Plain VAE training"},
      {"finetune", "Large-margin fine-tuning"},
  };
  CLI::App* c_train[3];
  for (int i = 0; i < 3; ++i) {
    auto& t = targs[i];
    c_train[i] = app.add_subcommand(phases[i].first, phases[i].second);
    c_train[i]->add_option("--cache", t.cache, "Data cache from `ingest`")->required();
    c_train[i]->add_option("--config", t.config, "key = value config file");
    c_train[i]->add_option("--set", t.sets, "Override one config key (key=value)");
    c_train[i]->add_option("--resume", t.resume, "Checkpoint to continue from");
    c_train[i]->add_option("--out-checkpoint", t.out_checkpoint)->required();
    c_train[i]->add_option("--metrics", t.metrics, "Metrics CSV (default <out-checkpoint>.metrics.csv)");
    c_train[i]->add_option("--manifest", t.manifest, "Run manifest (default <out-checkpoint>.manifest.json)");
    c_train[i]->add_option("--split-seed", t.split_seed, "Seed of the alphabet split when not canonical");
    c_train[i]->add_option("--max-episodes", t.max_episodes, "Stop after this many episodes in this invocation");
    if (i == 2) c_train[i]->add_flag("--from-scratch", t.from_scratch, "Fine-tune a fresh model");
  }

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Test NLL on the held-out alphabets");
  c_eval->add_option("--cache", ev.cache)->required();
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--episodes", ev.episodes, "Test episodes")->capture_default_str();
  c_eval->add_option("--K", ev.k, "Latent samples per pair")->capture_default_str();
  c_eval->add_option("--support-size", ev.support_size)->capture_default_str();
  c_eval->add_option("--seed", ev.seed)->capture_default_str();
  c_eval->add_option("--split-seed", ev.split_seed)->capture_default_str();
  c_eval->add_option("--threads", ev.threads)->capture_default_str();
  c_eval->add_option("--label", ev.label, "Row label in the report");
  c_eval->add_option("--out-report", ev.out_report, "Markdown report; the CSV goes beside it")->required();

  ConvertArgs cv;
  auto* c_convert = app.add_subcommand("convert", "Render n variations of one glyph");
  c_convert->add_option("--checkpoint", cv.checkpoint)->required();
  c_convert->add_option("--image", cv.image)->required();
  c_convert->add_option("--n", cv.n)->capture_default_str();
  c_convert->add_option("--seed", cv.seed)->capture_default_str();
  c_convert->add_option("--out", cv.out)->required();
  c_convert->add_option("--format", cv.format, "png, pgm or pgm-ascii")->capture_default_str();

  SynthArgs sy;
  auto* c_synth = app.add_subcommand("synth", "Write a procedural dataset in the Omniglot layout");
  c_synth->add_option("--out", sy.out)->required();
  c_synth->add_option("--background", sy.spec.background_alphabets)->capture_default_str();
  c_synth->add_option("--evaluation", sy.spec.evaluation_alphabets)->capture_default_str();
  c_synth->add_option("--characters", sy.spec.characters_per_alphabet)->capture_default_str();
  c_synth->add_option("--drawers", sy.spec.drawers)->capture_default_str();
  c_synth->add_option("--seed", sy.spec.seed)->capture_default_str();
  c_synth->add_flag("--canonical", sy.spec.canonical_counts, "30 + 20 alphabets, 964 + 659 characters");
  c_synth->add_option("--format", sy.format)->capture_default_str();

  std::string cfg_path;
  std::vector<std::string> cfg_sets;
  auto* c_config = app.add_subcommand("config", "Print the resolved configuration");
  c_config->add_option("--config", cfg_path);
  c_config->add_option("--set", cfg_sets);

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (c_synth->parsed() && sy.spec.canonical_counts) {
      sy.spec.background_alphabets = 30;
      sy.spec.evaluation_alphabets = 20;
    }
    if (c_ingest->parsed()) return cmd_ingest(ingest, out);
    if (c_init->parsed()) return cmd_init(init, out);
    for (int i = 0; i < 3; ++i) {
      if (c_train[i]->parsed()) {
        const train::Phase ph[3] = {train::Phase::pretrain, train::Phase::vae, train::Phase::lmvae};
        return cmd_train(ph[i], targs[i], out);
      }
    }
    if (c_eval->parsed()) return cmd_eval(ev, out);
    if (c_convert->parsed()) return cmd_convert(cv, out);
    if (c_synth->parsed()) return cmd_synth(sy, out);
    if (c_config->parsed()) {
      out << config::to_text(resolve_config(cfg_path, cfg_sets));
      return kOk;
    }
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kCheckpointError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kConfigError;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, out, err);
}

}  // namespace vce::cli
