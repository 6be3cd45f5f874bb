#pragma once

// Command-line front end. Subcommands: extract, synth, train, eval, predict,
// gradcheck. Every run prints its resolved configuration and seed. Exit
// codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
// (non-finite loss or a failed gradient check).

#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stx/data.hpp"
#include "stx/gradcheck_suite.hpp"
#include "stx/model.hpp"
#include "stx/train.hpp"

namespace stx {

namespace cli_detail {

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                        " is not a key=value line");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// Routes a flat key=value map onto the model and training configs; "seed"
// applies to both.
inline void apply_config(ModelConfig& mcfg, TrainConfig& tcfg,
                         const std::map<std::string, std::string>& kv) {
  static const std::set<std::string> model_keys = [] {
    std::set<std::string> s;
    for (const auto& [k, v] : ModelConfig{}.to_kv()) s.insert(k);
    return s;
  }();
  static const std::set<std::string> train_keys = [] {
    std::set<std::string> s;
    for (const auto& [k, v] : TrainConfig{}.to_kv()) s.insert(k);
    return s;
  }();
  for (const auto& [key, value] : kv) {
    try {
      if (key == "seed") {
        mcfg.apply_kv(key, value);
        tcfg.apply_kv(key, value);
      } else if (model_keys.count(key)) {
        mcfg.apply_kv(key, value);
      } else if (train_keys.count(key)) {
        tcfg.apply_kv(key, value);
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }
}

inline void print_config(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) std::cout << k << "=" << v << "\n";
}

inline void print_train_config(const ModelConfig& mcfg, const TrainConfig& tcfg) {
  std::cout << "seed=" << tcfg.seed << "\n";
  std::map<std::string, std::string> merged;
  for (const auto& [k, v] : mcfg.to_kv()) merged["model." + k] = v;
  for (const auto& [k, v] : tcfg.to_kv()) merged["train." + k] = v;
  print_config(merged);
}

inline std::map<std::string, std::string> feature_kv(const FeatureConfig& f) {
  char buf[64];
  const auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  return {{"frame_ms", fmt(f.frame_ms)},
          {"hop_ms", fmt(f.hop_ms)},
          {"preemphasis", fmt(f.preemphasis)},
          {"n_fft", std::to_string(f.n_fft)},
          {"n_filters", std::to_string(f.n_filters)},
          {"n_coeffs", std::to_string(f.n_coeffs)},
          {"mel_low_hz", fmt(f.mel_low_hz)},
          {"mel_high_hz", fmt(f.mel_high_hz)}};
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"stochastic transformer for audio severity-score regression"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // ---- extract ------------------------------------------------------------
  auto* extract_cmd = app.add_subcommand("extract", "extract an MFCC matrix from a wav file");
  std::string extract_in, extract_out;
  FeatureConfig fcfg;
  extract_cmd->add_option("input", extract_in, "input wav (PCM16)")->required();
  extract_cmd->add_option("output", extract_out, "output .mfcc path")->required();
  extract_cmd->add_option("--frame_ms", fcfg.frame_ms, "frame length in ms");
  extract_cmd->add_option("--hop_ms", fcfg.hop_ms, "hop length in ms");
  extract_cmd->add_option("--preemphasis", fcfg.preemphasis, "pre-emphasis coefficient");
  extract_cmd->add_option("--n_fft", fcfg.n_fft, "FFT size (power of two)");
  extract_cmd->add_option("--n_filters", fcfg.n_filters, "mel filter count");
  extract_cmd->add_option("--n_coeffs", fcfg.n_coeffs, "highest cepstral coefficient L");
  extract_cmd->add_option("--mel_low_hz", fcfg.mel_low_hz, "filterbank low edge");
  extract_cmd->add_option("--mel_high_hz", fcfg.mel_high_hz, "filterbank high edge");

  // ---- synth ----------------------------------------------------------------
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic labeled corpus");
  SyntheticSpec spec;
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--n", spec.n_participants, "number of participants");
  synth_cmd->add_option("--duration", spec.duration_s, "seconds of audio per participant");
  synth_cmd->add_option("--rate", spec.sample_rate, "sample rate in Hz");
  synth_cmd->add_option("--lo", spec.score_lo, "lowest score");
  synth_cmd->add_option("--hi", spec.score_hi, "highest score");
  synth_cmd->add_option("--seed", spec.seed, "generator seed");

  // ---- train ----------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train a model on an indexed corpus");
  std::string train_corpus, train_index = "index.csv", train_ckpt, train_report, train_config;
  int train_threads = 1;
  std::map<std::string, std::string> train_overrides;
  train_cmd->add_option("--corpus", train_corpus, "corpus directory")->required();
  train_cmd->add_option("--index", train_index, "index csv inside the corpus directory");
  train_cmd->add_option("--out", train_ckpt, "checkpoint output path")->required();
  train_cmd->add_option("--report", train_report, "training report path (default <out>.report.tsv)");
  train_cmd->add_option("--config", train_config, "key=value config file");
  train_cmd->add_option("--threads", train_threads, "feature-extraction threads");
  // any model/train key can be overridden as --set key=value (repeatable)
  train_cmd
      ->add_option_function<std::vector<std::string>>(
          "--set",
          [&train_overrides](const std::vector<std::string>& pairs) {
            for (const auto& p : pairs) {
              const auto eq = p.find('=');
              if (eq == std::string::npos) throw CLI::ValidationError("--set expects key=value");
              train_overrides[p.substr(0, eq)] = p.substr(eq + 1);
            }
          },
          "override a config key, e.g. --set epochs=50")
      ->take_all();
  std::uint64_t train_seed = 0;
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "master seed");

  // ---- eval -----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  std::string eval_ckpt, eval_corpus, eval_index = "index.csv", eval_split = "test";
  std::size_t eval_batch = 8;
  int eval_threads = 1;
  eval_cmd->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "corpus directory")->required();
  eval_cmd->add_option("--index", eval_index, "index csv inside the corpus directory");
  eval_cmd->add_option("--split", eval_split, "split tag to evaluate");
  eval_cmd->add_option("--batch-size", eval_batch, "evaluation batch size");
  eval_cmd->add_option("--threads", eval_threads, "feature-extraction threads");

  // ---- predict ----------------------------------------------------------------
  auto* predict_cmd = app.add_subcommand("predict", "score a single wav file");
  std::string predict_ckpt, predict_wav;
  predict_cmd->add_option("--ckpt", predict_ckpt, "model checkpoint")->required();
  predict_cmd->add_option("input", predict_wav, "input wav")->required();

  // ---- gradcheck -----------------------------------------------------------------
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "run the finite-difference suite");
  int gc_trials = 100;
  std::uint64_t gc_seed = 42;
  gradcheck_cmd->add_option("--trials", gc_trials, "trials per layer check");
  gradcheck_cmd->add_option("--seed", gc_seed, "suite seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (extract_cmd->parsed()) {
      std::cout << "command=extract\n";
      cli_detail::print_config(cli_detail::feature_kv(fcfg));
      const MfccMatrix m = extract_mfcc(read_wav(extract_in), fcfg);
      save_mfcc(extract_out, m);
      std::cout << "frames=" << m.frames << "\ncoeffs=" << m.coeffs << "\nwrote=" << extract_out
                << "\n";
      return 0;
    }
    if (synth_cmd->parsed()) {
      char buf[64];
      std::cout << "command=synth\nseed=" << spec.seed << "\nn=" << spec.n_participants << "\n";
      std::snprintf(buf, sizeof(buf), "%.17g", spec.duration_s);
      std::cout << "duration_s=" << buf << "\nsample_rate=" << spec.sample_rate << "\n";
      std::snprintf(buf, sizeof(buf), "%.17g", spec.score_lo);
      std::cout << "score_lo=" << buf << "\n";
      std::snprintf(buf, sizeof(buf), "%.17g", spec.score_hi);
      std::cout << "score_hi=" << buf << "\n";
      generate_synthetic(spec, synth_out);
      std::cout << "wrote=" << synth_out << "\n";
      return 0;
    }
    if (train_cmd->parsed()) {
      ModelConfig mcfg;
      TrainConfig tcfg;
      if (!train_config.empty()) {
        cli_detail::apply_config(mcfg, tcfg, cli_detail::read_kv_file(train_config));
      }
      cli_detail::apply_config(mcfg, tcfg, train_overrides);
      if (train_seed_opt->count() > 0) {
        mcfg.seed = train_seed;
        tcfg.seed = train_seed;
      }
      mcfg.validate();
      tcfg.validate();
      std::cout << "command=train\n";
      cli_detail::print_train_config(mcfg, tcfg);

      const Corpus corpus = load_corpus(train_corpus, train_index, mcfg.features, train_threads);
      Model model(mcfg);
      const TrainReport report = train_model(model, corpus, tcfg);
      model.save(train_ckpt);
      const std::string report_path =
          train_report.empty() ? train_ckpt + ".report.tsv" : train_report;
      std::ofstream out(report_path, std::ios::trunc);
      if (!out) throw IoError("train: cannot write report " + report_path);
      out << report.serialize();
      out.close();
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", report.best_val_rmse);
      std::cout << "epochs_run=" << report.epochs.size() << "\nbest_epoch=" << report.best_epoch
                << "\nbest_val_rmse=" << buf << "\ncheckpoint=" << train_ckpt
                << "\nreport=" << report_path << "\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      Model model = Model::load(eval_ckpt);
      std::cout << "command=eval\nseed=" << model.config().seed << "\n";
      std::map<std::string, std::string> merged;
      for (const auto& [k, v] : model.config().to_kv()) merged["model." + k] = v;
      merged["eval.split"] = eval_split;
      merged["eval.batch_size"] = std::to_string(eval_batch);
      cli_detail::print_config(merged);
      const Corpus corpus = load_corpus(eval_corpus, eval_index, model.config().features, eval_threads);
      const EvalReport report = evaluate_split(model, corpus, eval_split, eval_batch);
      std::cout << report.to_text();
      return 0;
    }
    if (predict_cmd->parsed()) {
      Model model = Model::load(predict_ckpt);
      std::cout << "command=predict\nseed=" << model.config().seed << "\n";
      const MfccMatrix m = extract_mfcc(read_wav(predict_wav), model.config().features);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", model.predict(m));
      std::cout << "score=" << buf << "\n";
      return 0;
    }
    if (gradcheck_cmd->parsed()) {
      std::cout << "command=gradcheck\nseed=" << gc_seed << "\ntrials=" << gc_trials << "\n";
      const auto results = run_gradcheck_suite(gc_trials, gc_seed);
      bool ok = true;
      for (const auto& r : results) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3e", r.max_err);
        std::cout << (r.passed() ? "PASS" : "FAIL") << " " << r.name << " max_rel_err=" << buf
                  << " tol=" << r.tolerance << " trials=" << r.trials << "\n";
        ok = ok && r.passed();
      }
      std::cout << (ok ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES detected\n");
      return ok ? 0 : 3;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace stx
