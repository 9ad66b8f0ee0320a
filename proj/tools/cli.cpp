#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "llmembed/checkpoint.hpp"
#include "llmembed/classifier.hpp"
#include "llmembed/cost.hpp"
#include "llmembed/embedding_store.hpp"
#include "llmembed/error.hpp"
#include "llmembed/fusion.hpp"
#include "llmembed/synthetic.hpp"
#include "llmembed/trainer.hpp"

namespace llmembed::cli {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kCheckpointFile = "checkpoint.llmc";
constexpr const char* kReportFile = "report.json";
constexpr const char* kLossCurveFile = "loss_curve.txt";
constexpr const char* kCostFile = "cost.json";
constexpr const char* kCostTextFile = "cost.txt";
constexpr const char* kConfigFile = "config.json";

std::string default_out_root() {
  if (const char* env = std::getenv("LLMEMBED_OUT"); env != nullptr && *env != '\0') return env;
  return "llmembed_out";
}

fs::path prepare_out(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(default_out_root()) : fs::path(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error(ErrorCode::io, "write failed for " + path.string());
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::pair<std::string, std::string> split_assignment(const std::string& text, const char* flag) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::argument, std::string(flag) + " expects NAME=VALUE, got '" + text + "'");
  }
  return {text.substr(0, eq), text.substr(eq + 1)};
}

FusionStrategy select_strategy(const std::string& selector, double sigma, std::uint32_t projection_dim) {
  FusionStrategy s = FusionStrategy::parse(selector);
  s.sigma = sigma;
  s.projection_dim = projection_dim;
  s.validate();
  return s;
}

json strategy_json(const FusionStrategy& s) {
  return {{"index", s.index}, {"label", std::string(s.label())}, {"description", s.description()},
          {"sigma", s.sigma}, {"projection_dim", s.projection_dim}};
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  std::string out;
  std::size_t train_rows = 2000;
  std::size_t test_rows = 500;
  std::uint32_t classes = 4;
  double separation = 10.0;
  double noise = 0.1;
  std::uint64_t seed = 42;
  std::uint32_t llama2_depths = 5;
  std::uint32_t llama2_dim = 64;
  std::uint32_t bert_dim = 32;
  std::uint32_t roberta_dim = 32;
  bool l2_normalize = false;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  SyntheticSpec spec;
  spec.n_train_rows = o.train_rows;
  spec.n_test_rows = o.test_rows;
  spec.n_classes = o.classes;
  spec.separation = o.separation;
  spec.noise = o.noise;
  spec.seed = o.seed;
  spec.sources.clear();
  spec.sources.push_back({std::string(kLlama2), o.llama2_depths, o.llama2_dim});
  if (o.bert_dim > 0) spec.sources.push_back({std::string(kBert), 1, o.bert_dim});
  if (o.roberta_dim > 0) spec.sources.push_back({std::string(kRoberta), 1, o.roberta_dim});
  const SyntheticData data = generate_synthetic(spec);

  const fs::path dir = prepare_out(o.out);
  for (const DatasetBundle* bundle : {&data.train, &data.test}) {
    const std::string split(to_string(bundle->split));
    Manifest manifest;
    manifest.split = bundle->split;
    manifest.class_names = bundle->class_names;
    manifest.l2_normalize = o.l2_normalize;
    manifest.labels_path = split + ".labels";
    write_labels(bundle->labels, dir / manifest.labels_path);
    for (const auto& m : bundle->sources) {
      const std::string file = m.source_name + "." + split + ".llme";
      write_embeddings(m, dir / file);
      manifest.sources.push_back({m.source_name, file, m.n_depths, m.dim});
    }
    manifest.write(dir / (split + ".json"));
  }

  write_json(dir / kConfigFile, {{"command", "synth"},
                                 {"train_rows", o.train_rows},
                                 {"test_rows", o.test_rows},
                                 {"classes", o.classes},
                                 {"separation", o.separation},
                                 {"noise", o.noise},
                                 {"seed", o.seed},
                                 {"llama2_depths", o.llama2_depths},
                                 {"llama2_dim", o.llama2_dim},
                                 {"bert_dim", o.bert_dim},
                                 {"roberta_dim", o.roberta_dim},
                                 {"l2_normalize", o.l2_normalize}});
  out << "wrote " << (dir / "train.json").string() << " and " << (dir / "test.json").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string manifest;
  std::string test_manifest;
  std::string strategy = "2";
  double sigma = kDefaultSigma;
  std::uint32_t projection_dim = kDefaultProjectionDim;
  std::size_t batch_size = 1024;
  int epochs = 100;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool deterministic = false;
  std::uint32_t hidden = 0;
  int eval_every = 0;
  double watts_train = kDownstreamWatts;
  double tariff = kDefaultTariff;
  bool verbose = false;
  std::string out;
};

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  const FusionStrategy strategy = select_strategy(o.strategy, o.sigma, o.projection_dim);
  TrainConfig config;
  config.batch_size = o.batch_size;
  config.epochs = o.epochs;
  config.adam.learning_rate = o.lr;
  config.seed = o.seed;
  config.threads = o.threads;
  config.deterministic = o.deterministic;
  config.hidden_width = o.hidden;
  config.eval_every = o.eval_every;
  config.validate();

  Stopwatch load_watch;
  const DatasetBundle train_set = load_bundle(o.manifest);
  std::optional<DatasetBundle> test_set;
  if (!o.test_manifest.empty()) test_set = load_bundle(o.test_manifest);
  const double load_seconds = load_watch.seconds();

  EpochCallback progress;
  if (o.verbose) {
    progress = [&err](int epoch, double loss) { err << "epoch " << epoch << " loss " << loss << '\n'; };
  }
  TrainResult result = train(train_set, test_set ? &*test_set : nullptr, strategy, config, progress);

  const fs::path dir = prepare_out(o.out);
  write_checkpoint(make_checkpoint(strategy, train_set, result.classifier, result.projections), dir / kCheckpointFile);
  write_text(dir / kLossCurveFile, result.report.loss_curve_text());

  const TrainReport& rep = result.report;
  json evals = json::array();
  for (const auto& e : rep.evals) {
    json rec{{"epoch", e.epoch}, {"train_accuracy", e.train_accuracy}};
    if (e.test_accuracy >= 0.0) rec["test_accuracy"] = e.test_accuracy;
    evals.push_back(rec);
  }
  json timings = json::array();
  timings.push_back({{"phase", "load"}, {"seconds", load_seconds}});
  for (const auto& t : rep.timings) timings.push_back({{"phase", t.phase}, {"seconds", t.seconds}});
  json report{{"strategy", strategy_json(strategy)},
              {"epochs", config.epochs},
              {"batch_size", config.batch_size},
              {"optimizer",
               {{"name", "adam"},
                {"learning_rate", config.adam.learning_rate},
                {"beta1", config.adam.beta1},
                {"beta2", config.adam.beta2},
                {"epsilon", config.adam.epsilon}}},
              {"seed", config.seed},
              {"deterministic", config.deterministic},
              {"hidden_width", config.hidden_width},
              {"train_rows", train_set.n_rows()},
              {"classifier_parameters", result.classifier.parameter_count()},
              {"projection_parameters", result.projections.parameter_count()},
              {"epoch_loss", rep.epoch_loss},
              {"evals", evals},
              {"timings", timings},
              {"final_train_accuracy", rep.final_train_accuracy}};
  if (test_set) {
    report["test_rows"] = test_set->n_rows();
    report["final_test_accuracy"] = rep.final_test_accuracy;
  }
  write_json(dir / kReportFile, report);

  CostInputs cost;
  cost.profile = PowerProfile::defaults(kExtractWatts, o.watts_train);
  cost.tariff = o.tariff;
  for (const auto& t : rep.timings) cost.timings.push_back(t);
  write_json(dir / kCostFile, build_cost_report("llmembed local phases", cost).to_json());

  write_json(dir / kConfigFile, {{"command", "train"},
                                 {"manifest", o.manifest},
                                 {"test_manifest", o.test_manifest},
                                 {"strategy", strategy_json(strategy)},
                                 {"batch_size", o.batch_size},
                                 {"epochs", o.epochs},
                                 {"lr", o.lr},
                                 {"seed", o.seed},
                                 {"threads", o.threads},
                                 {"deterministic", o.deterministic},
                                 {"hidden", o.hidden},
                                 {"eval_every", o.eval_every},
                                 {"watts_train", o.watts_train},
                                 {"tariff", o.tariff}});

  out << "strategy " << strategy.index << " (" << strategy.label() << ") final loss " << rep.epoch_loss.back()
      << " train accuracy " << rep.final_train_accuracy;
  if (test_set) out << " test accuracy " << rep.final_test_accuracy;
  out << "\nartifacts in " << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ScoreOptions {
  std::string checkpoint;
  std::string manifest;
  std::string strategy;
  unsigned threads = 1;
  std::string out;
  std::string output;
};

struct Loaded {
  Checkpoint checkpoint;
  DatasetBundle bundle;
};

Loaded load_for_scoring(const ScoreOptions& o) {
  Loaded l{read_checkpoint(o.checkpoint), load_bundle(o.manifest)};
  if (!o.strategy.empty()) {
    const FusionStrategy requested = FusionStrategy::parse(o.strategy);
    if (requested.index != l.checkpoint.strategy.index) {
      throw Error(ErrorCode::mismatch, "checkpoint was trained with strategy " +
                                           std::to_string(l.checkpoint.strategy.index) + " but strategy " +
                                           std::to_string(requested.index) + " was requested");
    }
  }
  l.checkpoint.check_compatible(l.bundle);
  return l;
}

int cmd_eval(const ScoreOptions& o, std::ostream& out) {
  const Loaded l = load_for_scoring(o);
  const Checkpoint& ck = l.checkpoint;
  const double acc = evaluate(ck.classifier, ck.projections, l.bundle, ck.strategy, std::max(1u, o.threads));
  const json result{{"accuracy", acc}, {"rows", l.bundle.n_rows()}, {"strategy", ck.strategy.index}};
  out << result.dump() << '\n';
  if (!o.out.empty()) write_json(prepare_out(o.out) / "eval.json", result);
  return 0;
}

int cmd_predict(const ScoreOptions& o, std::ostream& out) {
  const Loaded l = load_for_scoring(o);
  const Checkpoint& ck = l.checkpoint;
  std::vector<std::size_t> rows(l.bundle.n_rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto predictions =
      predict(ck.classifier, ck.projections, SourceSet::from(l.bundle), rows, ck.strategy, std::max(1u, o.threads));

  std::ofstream file;
  if (!o.output.empty()) {
    file.open(o.output, std::ios::trunc);
    if (!file) throw Error(ErrorCode::io, "cannot open " + o.output + " for writing");
  }
  std::ostream& sink = o.output.empty() ? out : file;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    sink << json{{"row", i},
                 {"class", ck.class_names[p.label]},
                 {"class_index", p.label},
                 {"probabilities", p.probabilities}}
                .dump()
         << '\n';
  }
  if (!sink) throw Error(ErrorCode::io, "failed writing predictions");
  return 0;
}

// ---------------------------------------------------------------------------

struct CostOptions {
  std::string from;
  std::vector<std::string> phases;
  std::vector<std::string> watts;
  std::string extract_train;
  std::string extract_test;
  double watts_extract = kExtractWatts;
  double watts_train = kDownstreamWatts;
  std::optional<double> kwh;
  std::optional<int> kwh_decimals;
  double tariff = kDefaultTariff;
  std::optional<std::uint64_t> tokens;
  double token_price = kDefaultTokenPrice;
  std::string out;
};

int cmd_report_cost(const CostOptions& o, std::ostream& out) {
  CostInputs in;
  in.profile = PowerProfile::defaults(o.watts_extract, o.watts_train);
  for (const auto& w : o.watts) {
    auto [name, value] = split_assignment(w, "--watts");
    double watts = 0.0;
    try {
      watts = std::stod(value);
    } catch (const std::exception&) {
      throw Error(ErrorCode::argument, "bad wattage '" + value + "' for phase '" + name + "'");
    }
    in.profile.watts[name] = watts;
  }
  in.profile.validate();

  if (!o.from.empty()) {
    std::ifstream f(o.from);
    if (!f) throw Error(ErrorCode::io, "cannot open timing report " + o.from);
    json doc;
    try {
      f >> doc;
      for (const auto& t : doc.at("timings")) {
        const auto phase = t.at("phase").get<std::string>();
        if (phase == "load") continue;
        in.timings.push_back({phase, t.at("seconds").get<double>()});
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::format, "timing report " + o.from + ": " + e.what());
    }
  }
  if (!o.extract_train.empty()) in.timings.push_back({"train_extract", parse_duration(o.extract_train)});
  if (!o.extract_test.empty()) in.timings.push_back({"test_extract", parse_duration(o.extract_test)});
  for (const auto& p : o.phases) {
    auto [name, value] = split_assignment(p, "--phase");
    in.timings.push_back({name, parse_duration(value)});
  }
  in.declared_kwh = o.kwh;
  in.kwh_decimals = o.kwh_decimals;
  in.tariff = o.tariff;

  const CostReport local = build_cost_report("llmembed", in);
  json doc{{"local", local.to_json()}};
  std::string text = local.to_text();
  if (o.tokens) {
    CostInputs remote_in;
    remote_in.profile = in.profile;
    remote_in.tokens = o.tokens;
    remote_in.token_price = o.token_price;
    const CostReport remote = build_cost_report("prompt-based remote", remote_in);
    const CostComparison cmp = compare_report(local, remote);
    doc["remote"] = remote.to_json();
    doc["comparison"] = cmp.to_json();
    text += remote.to_text() + cmp.to_text();
  }

  const fs::path dir = prepare_out(o.out);
  write_json(dir / kCostFile, doc);
  write_text(dir / kCostTextFile, text);
  out << text;
  return 0;
}

int cmd_strategies(std::ostream& out) {
  SourceLayout reference_dims{SourceShape{5, 4096}, SourceShape{1, 1024}, SourceShape{1, 1024}};
  out << std::left << std::setw(7) << "index" << std::setw(24) << "operator" << std::setw(28) << "sources"
      << std::setw(10) << "dim" << "recipe\n";
  for (int i = 1; i <= kStrategyCount; ++i) {
    const FusionStrategy s = FusionStrategy::from_index(i);
    std::string sources;
    for (auto name : s.required_sources()) sources += (sources.empty() ? "" : ",") + std::string(name);
    out << std::left << std::setw(7) << i << std::setw(24) << s.label() << std::setw(28) << sources << std::setw(10)
        << fused_dim(s, reference_dims) << s.description() << '\n';
  }
  out << "aliases:";
  for (const auto& a : strategy_aliases()) out << ' ' << a.alias << '=' << a.index;
  out << '\n';
  return 0;
}

void print_error(std::ostream& err, std::string_view code, const std::string& message) {
  std::string flat = message;
  std::replace(flat.begin(), flat.end(), '\n', ' ');
  err << "llmembed: error[" << code << "]: " << flat << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fuse frozen-backbone text embeddings and train a lightweight classifier head", "llmembed"};
  app.set_config("--config", "", "TOML/INI file supplying option defaults; command-line flags take precedence");
  app.require_subcommand(1);

  SynthOptions synth_o;
  auto* synth = app.add_subcommand("synth", "Write a synthetic Gaussian-cluster dataset (train + test)");
  synth->add_option("--out", synth_o.out, "Output directory (default $LLMEMBED_OUT or ./llmembed_out)");
  synth->add_option("--train-rows", synth_o.train_rows)->capture_default_str();
  synth->add_option("--test-rows", synth_o.test_rows)->capture_default_str();
  synth->add_option("--classes", synth_o.classes)->capture_default_str();
  synth->add_option("--separation", synth_o.separation)->capture_default_str();
  synth->add_option("--noise", synth_o.noise)->capture_default_str();
  synth->add_option("--seed", synth_o.seed)->capture_default_str();
  synth->add_option("--llama2-depths", synth_o.llama2_depths)->capture_default_str();
  synth->add_option("--llama2-dim", synth_o.llama2_dim)->capture_default_str();
  synth->add_option("--bert-dim", synth_o.bert_dim, "0 omits the source")->capture_default_str();
  synth->add_option("--roberta-dim", synth_o.roberta_dim, "0 omits the source")->capture_default_str();
  synth->add_flag("--l2-normalize", synth_o.l2_normalize, "Record per-vector L2 normalisation in the manifests");

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier head on fused embeddings");
  train_cmd->add_option("--manifest", train_o.manifest, "Train manifest")->required();
  train_cmd->add_option("--test-manifest", train_o.test_manifest, "Test manifest");
  train_cmd->add_option("--strategy", train_o.strategy, "Fusion strategy 1-15 or alias")->capture_default_str();
  train_cmd->add_option("--sigma", train_o.sigma, "Power-normalisation slope")->capture_default_str();
  train_cmd->add_option("--projection-dim", train_o.projection_dim)->capture_default_str();
  train_cmd->add_option("--batch-size", train_o.batch_size)->capture_default_str();
  train_cmd->add_option("--epochs", train_o.epochs)->capture_default_str();
  train_cmd->add_option("--lr", train_o.lr)->capture_default_str();
  train_cmd->add_option("--seed", train_o.seed)->capture_default_str();
  train_cmd->add_option("--threads", train_o.threads)->capture_default_str();
  train_cmd->add_flag("--deterministic", train_o.deterministic, "Single-threaded, bitwise-reproducible run");
  train_cmd->add_option("--hidden", train_o.hidden, "Hidden layer width (0 = linear head)")->capture_default_str();
  train_cmd->add_option("--eval-every", train_o.eval_every, "Evaluate every N epochs (0 = final only)");
  train_cmd->add_option("--watts-train", train_o.watts_train)->capture_default_str();
  train_cmd->add_option("--tariff", train_o.tariff, "Electricity tariff per kWh")->capture_default_str();
  train_cmd->add_flag("--verbose", train_o.verbose, "Print per-epoch loss to stderr");
  train_cmd->add_option("--out", train_o.out, "Output directory (default $LLMEMBED_OUT or ./llmembed_out)");

  ScoreOptions eval_o;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a bundle");
  eval_cmd->add_option("--checkpoint", eval_o.checkpoint)->required();
  eval_cmd->add_option("--manifest", eval_o.manifest)->required();
  eval_cmd->add_option("--strategy", eval_o.strategy, "Must match the checkpoint when given");
  eval_cmd->add_option("--threads", eval_o.threads);
  eval_cmd->add_option("--out", eval_o.out, "Also write eval.json here");

  ScoreOptions predict_o;
  auto* predict_cmd = app.add_subcommand("predict", "Per-row predictions as JSON lines");
  predict_cmd->add_option("--checkpoint", predict_o.checkpoint)->required();
  predict_cmd->add_option("--manifest", predict_o.manifest)->required();
  predict_cmd->add_option("--strategy", predict_o.strategy, "Must match the checkpoint when given");
  predict_cmd->add_option("--threads", predict_o.threads);
  predict_cmd->add_option("--output", predict_o.output, "File for the JSON lines (default stdout)");

  CostOptions cost_o;
  auto* cost_cmd = app.add_subcommand("report-cost", "Energy, electricity bill and token budget report");
  cost_cmd->add_option("--from", cost_o.from, "report.json of a previous train run");
  cost_cmd->add_option("--phase", cost_o.phases, "NAME=DURATION (hh:mm:ss or seconds), repeatable");
  cost_cmd->add_option("--watts", cost_o.watts, "NAME=WATTS for a custom phase, repeatable");
  cost_cmd->add_option("--extract-train", cost_o.extract_train, "Train-set extraction duration");
  cost_cmd->add_option("--extract-test", cost_o.extract_test, "Test-set extraction duration");
  cost_cmd->add_option("--watts-extract", cost_o.watts_extract)->capture_default_str();
  cost_cmd->add_option("--watts-train", cost_o.watts_train)->capture_default_str();
  cost_cmd->add_option("--kwh", cost_o.kwh, "Energy measured elsewhere (kWh)");
  cost_cmd->add_option("--kwh-decimals", cost_o.kwh_decimals, "Round total energy before billing");
  cost_cmd->add_option("--tariff", cost_o.tariff, "Electricity tariff per kWh")->capture_default_str();
  cost_cmd->add_option("--tokens", cost_o.tokens, "Token count of the remote prompt-based baseline");
  cost_cmd->add_option("--token-price", cost_o.token_price, "Price per 1k tokens")->capture_default_str();
  cost_cmd->add_option("--out", cost_o.out, "Output directory (default $LLMEMBED_OUT or ./llmembed_out)");

  auto* strategies_cmd = app.add_subcommand("strategies", "List the fusion strategies");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, "argument", e.what());
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_o, out);
    if (*train_cmd) return cmd_train(train_o, out, err);
    if (*eval_cmd) return cmd_eval(eval_o, out);
    if (*predict_cmd) return cmd_predict(predict_o, out);
    if (*cost_cmd) return cmd_report_cost(cost_o, out);
    if (*strategies_cmd) return cmd_strategies(out);
  } catch (const Error& e) {
    print_error(err, to_string(e.code()), e.what());
    return e.code() == ErrorCode::argument ? 2 : 1;
  } catch (const fs::filesystem_error& e) {
    print_error(err, "io", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
    return 1;
  }
  return 2;
}

}  // namespace llmembed::cli
