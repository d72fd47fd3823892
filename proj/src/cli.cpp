#include "fedsc/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedsc/config.hpp"
#include "fedsc/data.hpp"
#include "fedsc/error.hpp"
#include "fedsc/federation.hpp"
#include "fedsc/theory.hpp"

namespace fedsc {

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr std::uint64_t kSplitPurpose = 11;
constexpr std::uint64_t kLongTailPurpose = 12;

bool is_config_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidConstants:
      return true;
    default:
      return false;
  }
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
}

// Options shared by `generate` and `run`. Layering: defaults < preset <
// config file < FEDSC_SEED < flags.
struct ConfigOptions {
  std::string preset_name = "full";
  std::string config_file;
  std::map<std::string, std::string> overrides;  // qualified key -> value

  void attach(CLI::App& app) {
    app.add_option("--preset", preset_name, "named profile: full | desk");
    app.add_option("--config", config_file, "key=value config file with [section] headers");
    for (const auto& f : config_fields()) {
      const auto key = f.qualified();
      app.add_option_function<std::string>(
          f.flag(), [this, key](const std::string& v) { overrides[key] = v; }, f.help)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  RunConfig resolve() const {
    RunConfig c = preset(preset_name);
    if (!config_file.empty()) apply_config_file(c, config_file);
    if (const char* env = std::getenv("FEDSC_SEED"); env != nullptr && *env != '\0')
      set_config_value(c, "seed", env);
    for (const auto& [key, value] : overrides) set_config_value(c, key, value);
    c.resolve();
    return c;
  }
};

std::pair<Dataset, Dataset> make_splits(const RunConfig& c) {
  const Dataset all = generate_gaussian_blobs(c.data.num_classes, c.data.per_class, c.data.dim,
                                              c.data.separation, c.seed);
  auto [train, test] = split_per_class(all, c.data.test_fraction, derive_seed(c.seed, 0, 0, kSplitPurpose));
  if (c.partition.scheme == PartitionScheme::kLongTailed)
    train = apply_long_tail(train, c.partition.rho, derive_seed(c.seed, 0, 0, kLongTailPurpose));
  return {std::move(train), std::move(test)};
}

int cmd_generate(const RunConfig& c, std::ostream& out) {
  auto [train, test] = make_splits(c);
  ensure_dir(c.output_dir);
  save_dataset(train, c.output_dir / "train.fsd");
  save_dataset(test, c.output_dir / "test.fsd");
  const auto train_counts = train.class_counts();
  const auto test_counts = test.class_counts();
  out << "class,train,test\n";
  for (std::size_t j = 0; j < train_counts.size(); ++j)
    out << (j + 1) << "," << train_counts[j] << "," << test_counts[j] << "\n";
  out << "total," << train.size() << "," << test.size() << "\n";
  return 0;
}

bool all_equal(const std::vector<std::size_t>& counts) {
  for (auto n : counts)
    if (n != counts.front()) return false;
  return true;
}

// Long-tailed runs accept either a balanced train split (the transform is
// applied here) or one that already carries the profile (from `generate`).
std::vector<ClientDataset> partition_train(const Dataset& train, const RunConfig& c) {
  if (c.partition.scheme != PartitionScheme::kLongTailed) return partition(train, c.partition);
  const auto counts = train.class_counts();
  PartitionConfig inner = c.partition;
  if (!counts.empty() && counts == long_tail_profile(counts.front(), train.num_classes, c.partition.rho)) {
    inner.scheme = c.partition.inner_scheme;
    return partition(train, inner);
  }
  if (!all_equal(counts))
    throw Error(ErrorCode::kInvalidConfig,
                "train split is neither balanced nor shaped by the configured long-tail ratio");
  const Dataset shaped = apply_long_tail(train, c.partition.rho, derive_seed(c.seed, 0, 0, kLongTailPurpose));
  inner.scheme = c.partition.inner_scheme;
  return partition(shaped, inner);
}

std::string run_metadata(const RunConfig& c, std::size_t train_size, std::size_t test_size) {
  const auto& f = c.federation;
  std::ostringstream meta;
  meta << dump_config(c);
  meta << "algorithm=" << to_string(f.algorithm) << "\n";
  meta << "seed=" << c.seed << "\n";
  meta << "train_samples=" << train_size << "\n";
  meta << "test_samples=" << test_size << "\n";
  meta << "deviation.aggregation_renormalized=" << (f.renormalize_aggregation ? "true" : "false") << "\n";
  meta << "deviation.cpdr_norm=" << to_string(f.loss.cpdr_norm) << "\n";
  meta << "deviation.global_prototypes=support_count_mean\n";
  meta << "deviation.round1=ce_only_bootstrap\n";
  meta << "deviation.prototype_pool=latest_per_reporting_client\n";
  meta << "deviation.unsupported_class_samples=prototype_terms_skipped\n";
  meta << "deviation.empty_client_repair=reassign_one_sample\n";
  meta << "deviation.wall_ms=" << (f.record_wall_time ? "measured" : "zeroed") << "\n";
  return meta.str();
}

int cmd_run(const RunConfig& c, std::ostream& out) {
  const auto data_dir = c.resolved_data_dir();
  const Dataset train = load_dataset(data_dir / "train.fsd");
  const Dataset test = load_dataset(data_dir / "test.fsd");
  if (train.num_classes != test.num_classes || train.dim != test.dim)
    throw Error(ErrorCode::kShapeMismatch, "train and test files disagree on shape");
  const auto clients = partition_train(train, c);
  std::size_t assigned = 0;
  for (const auto& client : clients) assigned += client.total();

  ensure_dir(c.output_dir);
  write_text(c.output_dir / "metadata.txt", run_metadata(c, assigned, test.size()));

  const auto start = std::chrono::steady_clock::now();
  const auto metrics = run_experiment(c.federation, clients, test);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(c.output_dir / "metrics.csv", metrics_to_csv(metrics));

  const auto& last = metrics.back();
  out << "algorithm=" << to_string(c.federation.algorithm) << "\n";
  out << "rounds=" << metrics.size() << "\n";
  out << "final_accuracy=" << fmt(last.accuracy) << "\n";
  out << "elapsed_seconds=" << fmt(seconds) << "\n";
  return 0;
}

int cmd_compare(const std::string& path_a, const std::string& path_b, double threshold, bool kv,
                std::ostream& out) {
  const auto a = metrics_from_csv(read_text(path_a));
  const auto b = metrics_from_csv(read_text(path_b));
  if (a.empty() || b.empty()) throw Error(ErrorCode::kMalformedCsv, "metrics file has no rows");
  const double fa = a.back().accuracy;
  const double fb = b.back().accuracy;
  const auto ra = rounds_to_accuracy(a, threshold);
  const auto rb = rounds_to_accuracy(b, threshold);
  auto rounds = [](const std::optional<int>& r) { return r ? std::to_string(*r) : std::string("none"); };
  const std::string rounds_delta = (ra && rb) ? std::to_string(*rb - *ra) : std::string("none");
  if (kv) {
    out << "final_accuracy_a=" << fmt(fa) << "\n";
    out << "final_accuracy_b=" << fmt(fb) << "\n";
    out << "final_accuracy_delta=" << fmt(fb - fa) << "\n";
    out << "threshold=" << fmt(threshold) << "\n";
    out << "rounds_to_accuracy_a=" << rounds(ra) << "\n";
    out << "rounds_to_accuracy_b=" << rounds(rb) << "\n";
    out << "rounds_delta=" << rounds_delta << "\n";
    return 0;
  }
  char line[160];
  std::snprintf(line, sizeof line, "final accuracy   a=%.4f  b=%.4f  delta(b-a)=%+.4f\n", fa, fb, fb - fa);
  out << line;
  out << "rounds to " << fmt(threshold) << "   a=" << rounds(ra) << "  b=" << rounds(rb)
      << "  delta(b-a)=" << rounds_delta << "\n";
  return 0;
}

TheoryConstants read_constants(const std::filesystem::path& path, double& current_loss) {
  std::map<std::string, std::string> kv;
  try {
    kv = parse_key_values(read_text(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIoError) throw;
    throw Error(ErrorCode::kInvalidConstants, e.what());
  }
  auto take = [&](const char* key) -> double {
    const auto it = kv.find(key);
    if (it == kv.end()) throw Error(ErrorCode::kInvalidConstants, std::string("missing constant ") + key);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(it->second, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != it->second.size())
      throw Error(ErrorCode::kInvalidConstants, std::string("constant ") + key + " is not a number");
    kv.erase(it);
    return v;
  };
  auto take_int = [&](const char* key) -> int {
    const double v = take(key);
    if (v != static_cast<double>(static_cast<int>(v)))
      throw Error(ErrorCode::kInvalidConstants, std::string("constant ") + key + " must be an integer");
    return static_cast<int>(v);
  };
  TheoryConstants c;
  c.smoothness = take("L1");
  c.extractor_lipschitz = take("L2");
  c.grad_bound = take("B");
  c.grad_variance = take("sigma2");
  c.num_classes = take_int("num_classes");
  c.neighbors = take_int("M");
  c.local_epochs = take_int("E");
  c.learning_rate = take("eta");
  c.target_grad_bound = take("xi");
  c.initial_loss = take("L0");
  c.optimal_loss = take("L_star");
  current_loss = kv.count("L_rE") ? take("L_rE") : c.initial_loss;
  if (!kv.empty()) throw Error(ErrorCode::kInvalidConstants, "unknown constant " + kv.begin()->first);
  c.validate();
  return c;
}

int cmd_theory(const std::string& path, std::ostream& out, std::ostream& err) {
  double current_loss = 0.0;
  const auto c = read_constants(path, current_loss);
  out << theory_report(c, current_loss);
  // Infeasible calculators are reported in-line and also fail the command.
  try {
    theorem2_eta_threshold(c);
    theorem3_min_rounds(c);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"FedSC federated learning simulator", "fedsc"};
  app.require_subcommand(1);

  ConfigOptions gen_opts;
  ConfigOptions run_opts;
  auto* gen = app.add_subcommand("generate", "write train.fsd and test.fsd into the output directory");
  gen_opts.attach(*gen);
  auto* run = app.add_subcommand("run", "train one algorithm and write metrics.csv and metadata.txt");
  run_opts.attach(*run);

  std::string csv_a;
  std::string csv_b;
  double threshold = 0.0;
  bool kv = false;
  auto* compare = app.add_subcommand("compare", "compare two metrics CSVs");
  compare->add_option("csv_a", csv_a)->required();
  compare->add_option("csv_b", csv_b)->required();
  compare->add_option("--threshold", threshold, "accuracy threshold for rounds-to-accuracy")->required();
  compare->add_flag("--kv", kv, "machine-readable key=value output");

  std::string constants_file;
  auto* theory = app.add_subcommand("theory", "evaluate the convergence calculators");
  theory->add_option("constants", constants_file, "key=value constants file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream sink;
    const int code = app.exit(e, out, sink);
    err << sink.str();
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_opts.resolve(), out);
    if (run->parsed()) return cmd_run(run_opts.resolve(), out);
    if (compare->parsed()) return cmd_compare(csv_a, csv_b, threshold, kv, out);
    if (theory->parsed()) return cmd_theory(constants_file, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_config_error(e.code()) ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace fedsc
