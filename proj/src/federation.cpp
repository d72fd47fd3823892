#include "fedsc/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "fedsc/error.hpp"

namespace fedsc {

namespace {

enum Purpose : std::uint64_t { kInit = 1, kSample = 2, kTrain = 3 };

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  std::vector<std::exception_ptr> errors(count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try { fn(i); } catch (...) { errors[i] = std::current_exception(); }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try { fn(i); } catch (...) { errors[i] = std::current_exception(); }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  // Rethrow in index order so the reported failure does not depend on scheduling.
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Matrix gather_rows(const Matrix& inputs, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = inputs.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

// Local data and prototype state shared by run_client and the trace recorder.
struct LocalProblem {
  const ClientDataset& client;
  const FederationConfig& config;
  const RelationalSet* relational;
  const ConsistentSet* consistent;
  Matrix inputs;
  LossOptions options;

  LocalProblem(const ClientDataset& c, const FederationConfig& cfg, const RelationalSet* r,
               const ConsistentSet* o)
      : client(c), config(cfg), inputs(gather_inputs(c.data())), options(cfg.loss) {
    const bool fedsc = cfg.algorithm == Algorithm::kFedSC && r && o;
    relational = fedsc ? r : nullptr;
    consistent = fedsc ? o : nullptr;
    options.skip_unsupported = true;
  }

  std::optional<SimilarityContext> epoch_context(const Parameters& params) const {
    if (!relational) return std::nullopt;
    return compute_normalizers(forward_features(params, inputs).z, *relational, config.temperature);
  }

  std::pair<LossBreakdown, Gradients> loss_and_grad(const Parameters& params,
                                                    std::span<const std::size_t> rows,
                                                    const std::optional<SimilarityContext>& ctx) const {
    const auto batch = forward_features(params, gather_rows(inputs, rows),
                                        gather_labels(client.data().labels, rows));
    auto loss = total_loss(batch, forward_logits(params, batch.z), relational, consistent,
                           ctx ? &*ctx : nullptr, options);
    auto grads = backward(params, batch, loss.grad_z, loss.grad_logits);
    return {std::move(loss), std::move(grads)};
  }
};

std::vector<std::span<const std::size_t>> batches_of(const std::vector<std::size_t>& order,
                                                     std::size_t batch_size) {
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size)
    out.emplace_back(order.data() + start, std::min(batch_size, order.size() - start));
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string_view to_string(Algorithm algorithm) {
  return algorithm == Algorithm::kFedAvg ? "fedavg" : "fedsc";
}

void FederationConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (rounds < 1) bad("rounds must be >= 1");
  if (local_epochs < 1) bad("local_epochs must be >= 1");
  if (num_clients < 2) bad("num_clients must be >= 2");
  if (!(participation_fraction > 0.0 && participation_fraction <= 1.0))
    bad("participation_fraction must lie in (0, 1]");
  if (neighbors > static_cast<std::size_t>(num_clients - 1)) bad("neighbors must be <= num_clients - 1");
  if (!(temperature > 0.0)) bad("temperature must be > 0");
  if (hidden_dim == 0 || feature_dim == 0) bad("model dimensions must be positive");
  optimizer.validate();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round, std::uint64_t client,
                          std::uint64_t purpose) {
  return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ round) ^ client) ^ purpose);
}

RoundPlan plan_round(const FederationConfig& config, int round) {
  RoundPlan plan{round, {}};
  std::vector<int> ids(static_cast<std::size_t>(config.num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  const auto wanted = std::clamp<long long>(
      std::llround(config.participation_fraction * config.num_clients), 1, config.num_clients);
  if (wanted < config.num_clients) {
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(round), 0, kSample));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(static_cast<std::size_t>(wanted));
    std::sort(ids.begin(), ids.end());
  }
  plan.selected = std::move(ids);
  return plan;
}

ClientUpdate run_client(const Parameters& global, const RelationalSet* relational,
                        const ConsistentSet* consistent, const ClientDataset& client,
                        const FederationConfig& config, std::uint64_t stream_seed) {
  if (config.local_epochs < 1) throw Error(ErrorCode::kInvalidArgument, "local_epochs must be >= 1");
  const LocalProblem problem(client, config, relational, consistent);
  ModelParams local{global, Parameters::zeros(global.shape())};

  std::mt19937_64 rng(stream_seed);
  std::vector<std::size_t> order(client.total());
  std::iota(order.begin(), order.end(), 0);

  ClientUpdate out;
  double seen = 0.0;
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    // U is measured once per epoch on a snapshot and held fixed.
    const auto ctx = problem.epoch_context(local.weights);
    std::shuffle(order.begin(), order.end(), rng);
    for (auto rows : batches_of(order, config.optimizer.batch_size)) {
      auto [loss, grads] = problem.loss_and_grad(local.weights, rows, ctx);
      sgd_step(local, grads, config.optimizer);
      const double n = static_cast<double>(rows.size());
      out.loss_total += n * loss.total;
      out.loss_ce += n * loss.ce;
      out.loss_rpcl += n * loss.rpcl;
      out.loss_cpdr += n * loss.cpdr;
      seen += n;
    }
  }
  out.loss_total /= seen;
  out.loss_ce /= seen;
  out.loss_rpcl /= seen;
  out.loss_cpdr /= seen;

  out.params = std::move(local.weights);
  const auto features = forward_features(out.params, problem.inputs).z;
  out.prototypes = compute_client_prototypes(features, client.data().labels,
                                             static_cast<std::size_t>(client.data().num_classes),
                                             client.client_id());
  return out;
}

Parameters aggregate_models(const std::vector<Contribution>& contributions,
                            std::optional<double> total_samples) {
  if (contributions.empty()) throw Error(ErrorCode::kInvalidArgument, "nothing to aggregate");
  const auto shape = contributions.front().params->shape();
  double total = 0.0;
  for (const auto& c : contributions) {
    if (c.params->shape() != shape)
      throw Error(ErrorCode::kShapeMismatch, "contributions disagree on model shape");
    total += static_cast<double>(c.samples);
  }
  if (total_samples) total = *total_samples;
  if (!(total > 0.0)) throw Error(ErrorCode::kInvalidArgument, "aggregation weights sum to zero");

  const Vector anchor = contributions.front().params->flatten();
  Vector acc = total_samples ? Vector(Vector::Zero(anchor.size())) : anchor;
  for (const auto& c : contributions) {
    const double w = static_cast<double>(c.samples) / total;
    if (total_samples) {
      acc += w * c.params->flatten();
    } else {
      // anchor + sum_k w_k (p_k - anchor): identical inputs reproduce the anchor exactly.
      acc += w * (c.params->flatten() - anchor);
    }
  }
  return Parameters::unflatten(shape, acc);
}

ServerState init_server(const FederationConfig& config, std::size_t input_dim, int num_classes) {
  ServerState state;
  state.global = init_params(input_dim, config.hidden_dim, config.feature_dim,
                             static_cast<std::size_t>(num_classes),
                             derive_seed(config.seed, 0, 0, kInit))
                     .weights;
  state.latest.resize(static_cast<std::size_t>(config.num_clients));
  return state;
}

RoundMetrics run_round(ServerState& state, const std::vector<ClientDataset>& clients,
                       const Dataset& test_set, const FederationConfig& config) {
  if (clients.size() != static_cast<std::size_t>(config.num_clients))
    throw Error(ErrorCode::kInvalidArgument, "client count differs from configured num_clients");
  const auto started = std::chrono::steady_clock::now();
  const int round = state.round + 1;
  const RoundPlan plan = plan_round(config, round);

  const RelationalSet* relational = state.prototypes ? &state.prototypes->relational : nullptr;
  const ConsistentSet* consistent = state.prototypes ? &state.prototypes->consistent : nullptr;

  std::vector<ClientUpdate> updates(plan.selected.size());
  parallel_for(plan.selected.size(), config.threads, [&](std::size_t i) {
    const int id = plan.selected[i];
    updates[i] = run_client(state.global, relational, consistent, clients[static_cast<std::size_t>(id)],
                            config,
                            derive_seed(config.seed, static_cast<std::uint64_t>(round),
                                        static_cast<std::uint64_t>(id), kTrain));
  });

  // Server side: a single-threaded barrier in ascending client order.
  std::vector<Contribution> contributions;
  double selected_samples = 0.0;
  RoundMetrics metrics;
  metrics.round = round;
  for (std::size_t i = 0; i < plan.selected.size(); ++i) {
    const auto& client = clients[static_cast<std::size_t>(plan.selected[i])];
    const double n = static_cast<double>(client.total());
    contributions.push_back({&updates[i].params, client.total()});
    selected_samples += n;
    metrics.loss_total += n * updates[i].loss_total;
    metrics.loss_ce += n * updates[i].loss_ce;
    metrics.loss_rpcl += n * updates[i].loss_rpcl;
    metrics.loss_cpdr += n * updates[i].loss_cpdr;
  }
  metrics.loss_total /= selected_samples;
  metrics.loss_ce /= selected_samples;
  metrics.loss_rpcl /= selected_samples;
  metrics.loss_cpdr /= selected_samples;

  std::optional<double> denominator;
  if (!config.renormalize_aggregation) {
    double all = 0.0;
    for (const auto& c : clients) all += static_cast<double>(c.total());
    denominator = all;
  }
  state.global = aggregate_models(contributions, denominator);

  if (config.algorithm == Algorithm::kFedSC) {
    for (std::size_t i = 0; i < plan.selected.size(); ++i)
      state.latest[static_cast<std::size_t>(plan.selected[i])] = std::move(updates[i].prototypes);
    std::vector<PrototypeSet> pool;
    std::vector<std::vector<std::size_t>> counts;
    state.prototype_owners.clear();
    for (std::size_t k = 0; k < state.latest.size(); ++k) {
      if (!state.latest[k]) continue;
      pool.push_back(*state.latest[k]);
      counts.push_back(clients[k].class_counts());
      state.prototype_owners.push_back(static_cast<int>(k));
    }
    state.prototypes = build_server_prototypes(pool, counts, config.neighbors);
  }

  metrics.accuracy = accuracy(state.global, test_set);
  if (config.record_wall_time)
    metrics.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  state.round = round;
  return metrics;
}

std::vector<RoundMetrics> run_experiment(const FederationConfig& config,
                                         const std::vector<ClientDataset>& clients,
                                         const Dataset& test_set, const RoundCallback& on_round) {
  config.validate();
  if (clients.empty()) throw Error(ErrorCode::kEmptyDataset, "no clients");
  const auto& first = clients.front().data();
  ServerState state = init_server(config, first.dim, first.num_classes);
  std::vector<RoundMetrics> out;
  out.reserve(static_cast<std::size_t>(config.rounds));
  for (int r = 0; r < config.rounds; ++r) {
    out.push_back(run_round(state, clients, test_set, config));
    if (on_round) on_round(out.back(), state);
  }
  return out;
}

std::optional<int> rounds_to_accuracy(const std::vector<RoundMetrics>& metrics, double threshold) {
  for (const auto& m : metrics)
    if (m.accuracy >= threshold) return m.round;
  return std::nullopt;
}

TrainingTrace trace_local_training(const Parameters& start, const ClientDataset& client,
                                   const FederationConfig& config, const RelationalSet* relational,
                                   const ConsistentSet* consistent, std::size_t max_snapshots,
                                   std::uint64_t stream_seed) {
  const LocalProblem problem(client, config, relational, consistent);
  ModelParams local{start, Parameters::zeros(start.shape())};
  std::mt19937_64 rng(stream_seed);
  std::vector<std::size_t> order(client.total());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> all = order;
  const std::size_t probe_count = std::min<std::size_t>(16, client.total());
  const Matrix probe = problem.inputs.topRows(static_cast<Eigen::Index>(probe_count));

  TrainingTrace trace;
  while (trace.snapshots.size() < max_snapshots) {
    const auto ctx = problem.epoch_context(local.weights);
    std::shuffle(order.begin(), order.end(), rng);
    const auto batches = batches_of(order, config.optimizer.batch_size);
    for (auto rows : batches) {
      if (trace.snapshots.size() >= max_snapshots) break;
      TraceSnapshot snap;
      snap.params = local.weights.flatten();
      snap.extractor_size = local.weights.extractor_size();
      snap.full_gradient = problem.loss_and_grad(local.weights, all, ctx).second.flatten();
      for (auto b : batches) snap.minibatch_gradients.push_back(problem.loss_and_grad(local.weights, b, ctx).second.flatten());
      const Matrix z = forward_features(local.weights, probe).z;
      snap.probe_features = Eigen::Map<const Vector>(z.data(), z.size());
      trace.snapshots.push_back(std::move(snap));

      auto grads = problem.loss_and_grad(local.weights, rows, ctx).second;
      sgd_step(local, grads, config.optimizer);
    }
  }
  return trace;
}

std::string metrics_csv_header() { return "round,accuracy,loss_total,loss_ce,loss_rpcl,loss_cpdr,wall_ms"; }

std::string metrics_csv_row(const RoundMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", m.round, m.accuracy, m.loss_total,
                m.loss_ce, m.loss_rpcl, m.loss_cpdr, m.wall_ms);
  return buf;
}

std::string metrics_to_csv(const std::vector<RoundMetrics>& metrics) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& m : metrics) out += metrics_csv_row(m) + "\n";
  return out;
}

std::vector<RoundMetrics> metrics_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kMalformedCsv, "empty metrics file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != metrics_csv_header()) throw Error(ErrorCode::kMalformedCsv, "unexpected header: " + line);
  std::vector<RoundMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 7)
      throw Error(ErrorCode::kMalformedCsv, "line " + std::to_string(line_no) + " has " +
                                                std::to_string(fields.size()) + " fields");
    RoundMetrics m;
    try {
      std::size_t used = 0;
      m.round = std::stoi(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("round");
      double* targets[] = {&m.accuracy, &m.loss_total, &m.loss_ce, &m.loss_rpcl, &m.loss_cpdr, &m.wall_ms};
      for (std::size_t f = 1; f < 7; ++f) {
        *targets[f - 1] = std::stod(fields[f], &used);
        if (used != fields[f].size()) throw std::invalid_argument(fields[f]);
      }
    } catch (const std::exception&) {
      throw Error(ErrorCode::kMalformedCsv, "line " + std::to_string(line_no) + " is not numeric");
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace fedsc
