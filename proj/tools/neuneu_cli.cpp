#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "neuneu/datapipe/examples.hpp"
#include "neuneu/datapipe/io.hpp"
#include "neuneu/evalharness.hpp"
#include "neuneu/forecaster/checkpoint.hpp"
#include "neuneu/forecaster/train.hpp"
#include "neuneu/logfit.hpp"
#include "neuneu/synthgen.hpp"

namespace fs = std::filesystem;
using namespace neuneu;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kIo = 3, kData = 4, kNumeric = 5, kMissingOracle = 6 };

// ---- content hashing ----

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) throw IoError("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

std::string git_blob_hash(std::string_view bytes) {
  std::string obj = "blob " + std::to_string(bytes.size());
  obj.push_back('\0');
  obj.append(bytes);
  return sha1_hex(obj);
}

// Files under each input, by path relative to that input, in sorted order.
std::string content_hash(const std::vector<fs::path>& inputs) {
  std::string listing;
  for (const auto& in : inputs) {
    std::vector<fs::path> files;
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(in);
    }
    for (const auto& f : files) {
      const std::string rel = fs::is_directory(in) ? fs::relative(f, in).generic_string() : f.filename().string();
      listing += git_blob_hash(read_file_bytes(f)) + " " + rel + "\n";
    }
  }
  return sha1_hex(listing);
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  nlohmann::json extra = nlohmann::json::object();

  void write(const fs::path& path) const {
    nlohmann::json j;
    j["command"] = command;
    j["config_path"] = config_path;
    j["seed"] = seed;
    nlohmann::json ins = nlohmann::json::array(), outs = nlohmann::json::array();
    for (const auto& p : inputs) ins.push_back(p.generic_string());
    for (const auto& p : outputs) outs.push_back(p.generic_string());
    j["inputs"] = ins;
    j["outputs"] = outs;
    j["input_hash"] = content_hash(inputs);
    j["details"] = extra;
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path sidecar(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

// ---- shared loading ----

std::vector<fs::path> trajectory_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no trajectory files in " + dir.string());
  return files;
}

std::vector<Trajectory> load_trajectories(const std::vector<fs::path>& files) {
  std::vector<Trajectory> out;
  for (const auto& f : files) out.push_back(read_trajectory(f));
  return out;
}

std::vector<std::shared_ptr<CachedLossSource>> file_sources(const std::vector<Trajectory>& trajs) {
  std::vector<std::shared_ptr<CachedLossSource>> out;
  for (const auto& t : trajs)
    out.push_back(std::make_shared<CachedLossSource>(std::make_shared<FileLossSource>(t)));
  return out;
}

std::vector<synth::Family> parse_families(const std::string& list) {
  std::vector<synth::Family> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(synth::family_from_string(item));
  if (out.empty()) throw InvalidArgument("--families is empty");
  return out;
}

// ---- commands ----

struct SynthArgs {
  std::string out;
  std::size_t runs = 100;
  std::string families = "saturating,plateau,inverse,u_shaped";
  std::string heldout_families;
  std::size_t tokens = 4096;
  std::size_t checkpoints = 10;
  double noise = 0.01;
  double heldout_fraction = 0.2;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  synth::CorpusOptions opt;
  opt.runs = a.runs;
  opt.families = parse_families(a.families);
  if (!a.heldout_families.empty()) opt.heldout_only = parse_families(a.heldout_families);
  opt.tokens = a.tokens;
  opt.checkpoints = a.checkpoints;
  opt.noise_std = a.noise;
  opt.heldout_fraction = a.heldout_fraction;
  opt.seed = a.seed;
  const auto idx = synth::gen_corpus(opt, a.out);
  RunManifest m{"synth", "", a.seed, {}, {fs::path(a.out)}};
  m.extra = {{"runs", a.runs}, {"tokens", a.tokens}, {"families", a.families}, {"checkpoints", a.checkpoints},
             {"trajectory_files", idx.trajectory_files}, {"prob_files", idx.prob_files}};
  m.write(fs::path(a.out) / "run_manifest.json");
  std::cout << "wrote " << idx.trajectory_files << " trajectories and " << idx.prob_files
            << " probability files to " << a.out << "\n";
  return kOk;
}

struct BuildArgs {
  std::string trajs;
  std::string variant = "neuneu";
  double drop_p = 0.4;
  std::size_t masks = 8;
  std::size_t max_context = 510;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_build_data(const BuildArgs& a) {
  const Variant v = variant_from_string(a.variant);
  const auto files = trajectory_files(a.trajs);
  const auto trajs = load_trajectories(files);
  if (v != Variant::NoLoss) {
    // Decode every probability file now so format errors surface here.
    for (const auto& t : trajs) {
      if (!t.token_prob_files) throw DataError("run '" + t.run_id + "' has no token-probability files");
      for (const auto& f : *t.token_prob_files) {
        if (!fs::exists(f)) throw DataError("run '" + t.run_id + "': missing token-probability file " + f);
        read_token_probs_f32(f);
      }
    }
  }
  AugmentOptions aug;
  aug.p_drop = a.drop_p;
  aug.masks = a.masks;
  aug.seed = a.seed;
  aug.max_context = a.max_context;
  Manifest m;
  m.variant = v;
  const fs::path base = fs::absolute(a.out).parent_path();
  for (const auto& f : files) m.trajectory_paths.push_back(fs::relative(fs::absolute(f), base).generic_string());
  m.examples = build_descriptors(trajs, aug);
  write_manifest(m, a.out);
  RunManifest rm{"build-data", "", a.seed, {fs::path(a.trajs)}, {fs::path(a.out)}};
  rm.extra = {{"variant", a.variant}, {"drop_p", a.drop_p}, {"masks", a.masks}, {"examples", m.examples.size()}};
  rm.write(sidecar(a.out, ".run.json"));
  std::cout << m.examples.size() << " examples\n";
  return kOk;
}

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  Manifest m = read_manifest(a.manifest);
  nlohmann::json cj = nlohmann::json::object();
  if (!a.config.empty()) {
    try {
      cj = nlohmann::json::parse(read_file_bytes(a.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidArgument(a.config + ": invalid JSON: " + e.what());
    }
  }
  if (!cj.is_object()) throw InvalidArgument(a.config + ": config must be a JSON object");
  if (!cj.contains("variant")) cj["variant"] = to_string(m.variant);
  ModelConfig cfg = model_config_from_json(cj);
  if (cfg.variant != m.variant) {
    throw InvalidArgument("config variant '" + to_string(cfg.variant) + "' does not match manifest variant '" +
                          to_string(m.variant) + "'");
  }
  std::vector<fs::path> paths(m.trajectory_paths.begin(), m.trajectory_paths.end());
  auto trajs = load_trajectories(paths);
  auto sources = m.variant == Variant::NoLoss ? std::vector<std::shared_ptr<CachedLossSource>>{} : file_sources(trajs);
  DescriptorExampleSet data(std::move(trajs), std::move(m.examples), m.variant, std::move(sources));

  Forecaster model(cfg, a.seed);
  const double initial = mean_loss(model, data);
  auto res = train(model, data, a.seed);
  const double final_loss = mean_loss(model, data);
  save_checkpoint(model, a.out);
  write_file_atomic(sidecar(a.out, ".loss.csv"), loss_trace_csv(res.trace));
  RunManifest rm{"train", a.config, a.seed, {fs::path(a.manifest)}, {fs::path(a.out), sidecar(a.out, ".loss.csv")}};
  if (!a.config.empty()) rm.inputs.push_back(a.config);
  rm.extra = {{"config", cfg}, {"examples", data.size()}, {"steps", res.trace.size()}, {"aborted", res.aborted},
              {"initial_loss", initial}, {"final_loss", final_loss}};
  rm.write(sidecar(a.out, ".run.json"));
  if (res.aborted) {
    std::cerr << "error: training aborted: " << res.diagnostic << "\n";
    return kNumeric;
  }
  std::cout << "initial loss " << initial << "\nfinal loss " << final_loss << "\n";
  return kOk;
}

struct FitArgs {
  std::string trajs;
  std::vector<std::string> tasks;
  std::optional<double> chance;
  std::string out;
};

int cmd_fit_logistic(const FitArgs& a) {
  const auto files = trajectory_files(a.trajs);
  const auto trajs = load_trajectories(files);
  std::map<std::string, std::vector<std::pair<double, double>>> pts;
  const std::set<std::string> wanted(a.tasks.begin(), a.tasks.end());
  for (const auto& t : trajs) {
    if (!wanted.empty() && !wanted.count(t.task_id)) continue;
    if (!t.token_prob_files) throw MissingOracle("run '" + t.run_id + "' has no token-probability files");
    CachedLossSource src(std::make_shared<FileLossSource>(t));
    for (std::size_t c = 0; c < t.length(); ++c) pts[t.task_id].emplace_back(src.mean_loss(c), t.accuracies[c]);
  }
  for (const auto& task : wanted)
    if (!pts.count(task)) throw DataError("no trajectories for task '" + task + "' in " + a.trajs);
  LogisticFitOptions opt;
  opt.chance_level = a.chance;
  nlohmann::json fits = nlohmann::json::array();
  for (auto& [task, p] : pts) fits.push_back(to_json_value(fit_logistic(p, opt, task)));
  write_file_atomic(a.out, nlohmann::json{{"fits", fits}}.dump(2) + "\n");
  RunManifest rm{"fit-logistic", "", 0, {fs::path(a.trajs)}, {fs::path(a.out)}};
  rm.extra = {{"tasks", fits.size()}};
  rm.write(sidecar(a.out, ".run.json"));
  std::cout << "fitted " << fits.size() << " task(s)\n";
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string logistic;
  bool truth_stub = false;
  std::string trajs;
  double frac = 0.2;
  std::string report;
  std::string csv;
  bool oracle_losses = false;
  std::uint64_t seed = 0;
  std::size_t resamples = 10000;
};

int cmd_evaluate(const EvalArgs& a) {
  const int chosen = !a.ckpt.empty() + !a.logistic.empty() + a.truth_stub;
  if (chosen != 1) throw InvalidArgument("choose exactly one of --ckpt, --logistic, --truth-stub");
  const auto files = trajectory_files(a.trajs);
  const auto trajs = load_trajectories(files);
  std::vector<EvalRun> runs;
  for (const auto& t : trajs) {
    runs.push_back({t, t.token_prob_files ? std::make_shared<CachedLossSource>(std::make_shared<FileLossSource>(t))
                                          : nullptr});
  }

  std::optional<Forecaster> model;
  std::map<std::string, LogisticParams> fits;
  TargetPredictor predictor;
  std::string method;
  bool needs_future = false;
  std::vector<fs::path> inputs{fs::path(a.trajs)};
  if (!a.ckpt.empty()) {
    model.emplace(load_checkpoint(a.ckpt));
    method = to_string(model->config().variant);
    needs_future = uses_future_losses(model->config().variant);
    predictor = forecaster_predictor(*model);
    inputs.push_back(a.ckpt);
  } else if (!a.logistic.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file_bytes(a.logistic));
      for (const auto& f : j.at("fits")) {
        const auto fit = logistic_fit_from_json(f);
        fits[fit.task_id] = fit.params;
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(a.logistic + ": malformed logistic fits: " + e.what());
    }
    method = "logistic";
    needs_future = true;
    predictor = logistic_predictor(fits);
    inputs.push_back(a.logistic);
  } else {
    method = "truth-stub";
    predictor = oracle_predictor();
  }
  if (needs_future && !a.oracle_losses) {
    throw MissingOracle(method + " needs oracle future losses; pass --oracle-losses");
  }
  if (needs_future) {
    // Absent future probability files are a missing oracle, not bad data.
    predictor = [inner = predictor](const EvalQuery& q) {
      try {
        return inner(q);
      } catch (const FormatError&) {
        throw;
      } catch (const DataError& e) {
        throw MissingOracle(e.what());
      }
    };
  }

  auto records = evaluate_runs(runs, a.frac, predictor);
  const EvalReport rep = make_report(method, a.frac, std::move(records), runs, distinct_configs, a.seed, a.resamples);
  write_file_atomic(a.report, rep.to_json().dump(2) + "\n");
  std::vector<fs::path> outputs{fs::path(a.report)};
  if (!a.csv.empty()) {
    write_file_atomic(a.csv, rep.to_csv());
    outputs.push_back(a.csv);
  }
  RunManifest rm{"evaluate", "", a.seed, inputs, outputs};
  rm.extra = {{"method", method}, {"frac", a.frac}, {"records", rep.records.size()}, {"mae", rep.overall_mae()}};
  rm.write(sidecar(a.report, ".run.json"));
  std::cout << method << " mae " << rep.overall_mae() << " coverage " << rep.coverage();
  if (rep.ranking) std::cout << " ranking " << rep.ranking->accuracy;
  std::cout << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forecast downstream accuracy of training runs from accuracy trajectories and token losses"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--runs", sa.runs, "Number of runs")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--families", sa.families, "Comma-separated family list");
  synth_cmd->add_option("--heldout-families", sa.heldout_families, "Families kept out of the train split");
  synth_cmd->add_option("--tokens", sa.tokens, "Tokens per checkpoint")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--checkpoints", sa.checkpoints, "Checkpoints per run")->check(CLI::Range(4, 100000));
  synth_cmd->add_option("--noise", sa.noise, "Accuracy noise std")->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--heldout-fraction", sa.heldout_fraction, "Heldout share of runs")->check(CLI::Range(0.0, 0.99));
  synth_cmd->add_option("--seed", sa.seed, "Seed");

  BuildArgs ba;
  auto* build_cmd = app.add_subcommand("build-data", "Build a training-example manifest");
  build_cmd->add_option("--trajs", ba.trajs, "Trajectory directory")->required();
  build_cmd->add_option("--variant", ba.variant, "neuneu|average|histdiff|noloss|diffprobe")
      ->check(CLI::IsMember({"neuneu", "average", "histdiff", "noloss", "diffprobe"}));
  build_cmd->add_option("--drop-p", ba.drop_p, "Drop probability")->check(CLI::Range(0.0, 0.999999));
  build_cmd->add_option("--masks", ba.masks, "Masks per trajectory")->check(CLI::PositiveNumber);
  build_cmd->add_option("--max-context", ba.max_context, "Context pairs kept")->check(CLI::PositiveNumber);
  build_cmd->add_option("--seed", ba.seed, "Seed");
  build_cmd->add_option("--out", ba.out, "Manifest path")->required();

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a forecaster");
  train_cmd->add_option("--manifest", ta.manifest, "Manifest from build-data")->required();
  train_cmd->add_option("--config", ta.config, "Model config JSON");
  train_cmd->add_option("--seed", ta.seed, "Seed");
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit-logistic", "Fit per-task logistic loss-to-accuracy maps");
  fit_cmd->add_option("--trajs", fa.trajs, "Trajectory directory")->required();
  fit_cmd->add_option("--task", fa.tasks, "Task to fit (repeatable; default all)");
  fit_cmd->add_option("--chance", fa.chance, "Chance accuracy used as an extra start");
  fit_cmd->add_option("--out", fa.out, "Output JSON")->required();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate on heldout runs");
  eval_cmd->add_option("--ckpt", ea.ckpt, "Forecaster checkpoint");
  eval_cmd->add_option("--logistic", ea.logistic, "Logistic fits JSON");
  eval_cmd->add_flag("--truth-stub", ea.truth_stub, "Predict the truth (harness check)");
  eval_cmd->add_option("--trajs", ea.trajs, "Heldout trajectory directory")->required();
  eval_cmd->add_option("--frac", ea.frac, "Observed fraction")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--report", ea.report, "Report JSON")->required();
  eval_cmd->add_option("--csv", ea.csv, "Per-record CSV");
  eval_cmd->add_flag("--oracle-losses", ea.oracle_losses, "Allow reading future token probabilities");
  eval_cmd->add_option("--seed", ea.seed, "Bootstrap seed");
  eval_cmd->add_option("--resamples", ea.resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kUsage;
  }

  try {
    if (*synth_cmd) return cmd_synth(sa);
    if (*build_cmd) return cmd_build_data(ba);
    if (*train_cmd) return cmd_train(ta);
    if (*fit_cmd) return cmd_fit_logistic(fa);
    if (*eval_cmd) return cmd_evaluate(ea);
  } catch (const MissingOracle& e) {
    std::cerr << "error: missing oracle input: " << e.what() << "\n";
    return kMissingOracle;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
