#include "fedsc/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedsc/error.hpp"

namespace fedsc {

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); }

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double to_double(const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  config_error("'" + v + "' is not a number");
}

long long to_integer(const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  config_error("'" + v + "' is not an integer");
}

std::size_t to_size(const std::string& v) {
  const auto x = to_integer(v);
  if (x < 0) config_error("'" + v + "' must be non-negative");
  return static_cast<std::size_t>(x);
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  config_error("'" + v + "' is not a boolean");
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

PartitionScheme to_scheme(const std::string& v) {
  if (v == "dirichlet") return PartitionScheme::kDirichlet;
  if (v == "biased" || v == "biased_split") return PartitionScheme::kBiased;
  if (v == "long_tailed") return PartitionScheme::kLongTailed;
  config_error("unknown partition scheme '" + v + "'");
}

std::string scheme_name(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::kDirichlet: return "dirichlet";
    case PartitionScheme::kBiased: return "biased";
    case PartitionScheme::kLongTailed: return "long_tailed";
  }
  return "?";
}

Algorithm to_algorithm(const std::string& v) {
  if (v == "fedavg") return Algorithm::kFedAvg;
  if (v == "fedsc") return Algorithm::kFedSC;
  config_error("unknown algorithm '" + v + "'");
}

CpdrNorm to_norm(const std::string& v) {
  if (v == "l1") return CpdrNorm::kL1;
  if (v == "l2") return CpdrNorm::kL2;
  config_error("unknown cpdr norm '" + v + "'");
}

template <typename Member>
ConfigField number_field(std::string section, std::string key, std::string help, Member member) {
  return {std::move(section), std::move(key), std::move(help),
          [member](RunConfig& c, const std::string& v) {
            auto& field = member(c);
            using T = std::decay_t<decltype(field)>;
            if constexpr (std::is_floating_point_v<T>) field = to_double(v);
            else if constexpr (std::is_same_v<T, std::size_t>) field = to_size(v);
            else if constexpr (std::is_same_v<T, bool>) field = to_bool(v);
            else field = static_cast<T>(to_integer(v));
          },
          [member](const RunConfig& c) {
            const auto& field = member(const_cast<RunConfig&>(c));
            using T = std::decay_t<decltype(field)>;
            if constexpr (std::is_floating_point_v<T>) return fmt(field);
            else if constexpr (std::is_same_v<T, bool>) return std::string(field ? "true" : "false");
            else return std::to_string(field);
          }};
}

#define FEDSC_MEMBER(expr) [](RunConfig& c) -> auto& { return expr; }

std::vector<ConfigField> build_fields() {
  std::vector<ConfigField> f;
  f.push_back({"", "seed", "experiment seed (FEDSC_SEED overrides the file value)",
               [](RunConfig& c, const std::string& v) {
                 const auto x = to_integer(v);
                 if (x < 0) config_error("seed must be non-negative");
                 c.seed = static_cast<std::uint64_t>(x);
               },
               [](const RunConfig& c) { return std::to_string(c.seed); }});
  f.push_back({"", "output_dir", "directory that receives every output file",
               [](RunConfig& c, const std::string& v) { c.output_dir = v; },
               [](const RunConfig& c) { return c.output_dir.string(); }});
  f.push_back({"", "data_dir", "directory holding train.fsd/test.fsd (default: output_dir)",
               [](RunConfig& c, const std::string& v) { c.data_dir = v; },
               [](const RunConfig& c) { return c.data_dir.string(); }});

  f.push_back(number_field("data", "num_classes", "number of classes", FEDSC_MEMBER(c.data.num_classes)));
  f.push_back(number_field("data", "per_class", "samples generated per class", FEDSC_MEMBER(c.data.per_class)));
  f.push_back(number_field("data", "dim", "input feature dimension", FEDSC_MEMBER(c.data.dim)));
  f.push_back(number_field("data", "separation", "minimum distance between class means", FEDSC_MEMBER(c.data.separation)));
  f.push_back(number_field("data", "test_fraction", "held-out test share of each class", FEDSC_MEMBER(c.data.test_fraction)));

  f.push_back({"partition", "scheme", "dirichlet | biased | long_tailed",
               [](RunConfig& c, const std::string& v) { c.partition.scheme = to_scheme(v); },
               [](const RunConfig& c) { return scheme_name(c.partition.scheme); }});
  f.push_back({"partition", "inner_scheme", "partition used after the long-tail transform",
               [](RunConfig& c, const std::string& v) { c.partition.inner_scheme = to_scheme(v); },
               [](const RunConfig& c) { return scheme_name(c.partition.inner_scheme); }});
  f.push_back(number_field("partition", "alpha", "Dirichlet concentration", FEDSC_MEMBER(c.partition.alpha)));
  f.push_back(number_field("partition", "rho", "long-tail ratio max/min class count", FEDSC_MEMBER(c.partition.rho)));
  f.push_back(number_field("partition", "holdout_fraction", "per-class share given to the full client in the biased split",
                           FEDSC_MEMBER(c.partition.holdout_fraction)));

  f.push_back(number_field("model", "hidden_dim", "extractor hidden width", FEDSC_MEMBER(c.federation.hidden_dim)));
  f.push_back(number_field("model", "feature_dim", "feature (prototype) dimension", FEDSC_MEMBER(c.federation.feature_dim)));

  f.push_back({"federation", "algorithm", "fedsc | fedavg",
               [](RunConfig& c, const std::string& v) { c.federation.algorithm = to_algorithm(v); },
               [](const RunConfig& c) { return std::string(to_string(c.federation.algorithm)); }});
  f.push_back(number_field("federation", "rounds", "global rounds", FEDSC_MEMBER(c.federation.rounds)));
  f.push_back(number_field("federation", "clients", "number of clients", FEDSC_MEMBER(c.federation.num_clients)));
  f.push_back(number_field("federation", "local_epochs", "local epochs per round", FEDSC_MEMBER(c.federation.local_epochs)));
  f.push_back(number_field("federation", "participation", "fraction of clients sampled per round",
                           FEDSC_MEMBER(c.federation.participation_fraction)));
  f.push_back(number_field("federation", "neighbors", "neighbor clients per relational prototype", FEDSC_MEMBER(c.federation.neighbors)));
  f.push_back(number_field("federation", "temperature", "contrastive temperature", FEDSC_MEMBER(c.federation.temperature)));
  f.push_back(number_field("federation", "threads", "client worker threads (0 = all cores)", FEDSC_MEMBER(c.federation.threads)));
  f.push_back(number_field("federation", "renormalize", "aggregate with weights renormalized over sampled clients",
                           FEDSC_MEMBER(c.federation.renormalize_aggregation)));
  f.push_back(number_field("federation", "record_wall_time", "fill wall_ms (breaks bitwise reproducibility)",
                           FEDSC_MEMBER(c.federation.record_wall_time)));

  f.push_back(number_field("optimizer", "learning_rate", "SGD learning rate", FEDSC_MEMBER(c.federation.optimizer.learning_rate)));
  f.push_back(number_field("optimizer", "momentum", "SGD momentum", FEDSC_MEMBER(c.federation.optimizer.momentum)));
  f.push_back(number_field("optimizer", "weight_decay", "SGD weight decay", FEDSC_MEMBER(c.federation.optimizer.weight_decay)));
  f.push_back(number_field("optimizer", "batch_size", "minibatch size", FEDSC_MEMBER(c.federation.optimizer.batch_size)));

  f.push_back({"loss", "cpdr_norm", "l1 | l2",
               [](RunConfig& c, const std::string& v) { c.federation.loss.cpdr_norm = to_norm(v); },
               [](const RunConfig& c) { return std::string(to_string(c.federation.loss.cpdr_norm)); }});
  f.push_back(number_field("loss", "ce_weight", "cross-entropy weight", FEDSC_MEMBER(c.federation.loss.ce_weight)));
  f.push_back(number_field("loss", "rpcl_weight", "relational contrastive weight", FEDSC_MEMBER(c.federation.loss.rpcl_weight)));
  f.push_back(number_field("loss", "cpdr_weight", "consistent-prototype regularizer weight", FEDSC_MEMBER(c.federation.loss.cpdr_weight)));
  return f;
}

#undef FEDSC_MEMBER

}  // namespace

std::string ConfigField::flag() const {
  std::string out = "--" + key;
  std::replace(out.begin(), out.end(), '_', '-');
  return out;
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

void RunConfig::resolve() {
  partition.seed = seed;
  partition.num_clients = federation.num_clients;
  federation.seed = seed;
  try {
    partition.validate();
    federation.validate();
  } catch (const Error& e) {
    config_error(e.what());
  }
  if (data.num_classes < 2) config_error("data.num_classes must be >= 2");
  if (data.per_class < 1) config_error("data.per_class must be >= 1");
  if (data.dim < 2) config_error("data.dim must be >= 2");
  if (!(data.separation > 0.0)) config_error("data.separation must be > 0");
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) config_error("data.test_fraction must lie in (0, 1)");
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "full" || name.empty()) return c;
  if (name == "desk") {
    c.federation.rounds = 30;
    c.federation.local_epochs = 5;
    return c;
  }
  config_error("unknown preset '" + name + "'");
}

void set_config_value(RunConfig& config, const std::string& qualified_key, const std::string& value) {
  for (const auto& f : config_fields()) {
    if (f.qualified() == qualified_key) {
      f.set(config, value);
      return;
    }
  }
  config_error("unknown config key '" + qualified_key + "'");
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') config_error("line " + std::to_string(line_no) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) config_error("line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    set_config_value(config, section.empty() ? key : section + "." + key, value);
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str());
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : config_fields()) out += f.qualified() + "=" + f.get(config) + "\n";
  return out;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) config_error("line " + std::to_string(line_no) + ": expected key = value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace fedsc
