#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedsc/data.hpp"
#include "fedsc/losses.hpp"
#include "fedsc/model.hpp"
#include "fedsc/prototypes.hpp"
#include "fedsc/theory.hpp"

namespace fedsc {

enum class Algorithm { kFedAvg, kFedSC };

std::string_view to_string(Algorithm algorithm);

struct FederationConfig {
  int rounds = 100;
  int num_clients = 10;
  int local_epochs = 10;
  double participation_fraction = 1.0;
  std::size_t neighbors = 2;
  double temperature = 0.05;
  OptimizerConfig optimizer;
  Algorithm algorithm = Algorithm::kFedSC;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  LossOptions loss;
  // Weights n_k / sum over the sampled clients. When false, the global sample
  // count is used as the denominator.
  bool renormalize_aggregation = true;
  // Worker threads for client training; 0 selects hardware concurrency.
  // Results do not depend on this value.
  unsigned threads = 0;
  // Record measured wall time in RoundMetrics; otherwise wall_ms stays 0 so
  // the metrics trajectory is reproducible bit for bit.
  bool record_wall_time = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RoundPlan {
  int round = 0;                  // 1-based
  std::vector<int> selected;      // ascending client ids
};

struct RoundMetrics {
  int round = 0;
  double accuracy = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_rpcl = 0.0;
  double loss_cpdr = 0.0;
  double wall_ms = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

struct ClientUpdate {
  Parameters params;
  PrototypeSet prototypes;
  // Sample-weighted means over every local step of the round.
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_rpcl = 0.0;
  double loss_cpdr = 0.0;
};

struct ServerState {
  Parameters global;
  int round = 0;  // completed rounds
  // Most recent prototype set reported by each client, indexed by client id.
  std::vector<std::optional<PrototypeSet>> latest;
  // Built from every client that has reported so far; absent before round 2.
  std::optional<ServerPrototypes> prototypes;
  // Client ids along the client axis of `prototypes`.
  std::vector<int> prototype_owners;
};

/// Deterministic stream seed for (experiment seed, round, client, purpose).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round, std::uint64_t client,
                          std::uint64_t purpose);

RoundPlan plan_round(const FederationConfig& config, int round);

/// Local training from the global model. Prototype losses are applied only
/// for FedSC and only when both prototype sets are supplied.
ClientUpdate run_client(const Parameters& global, const RelationalSet* relational,
                        const ConsistentSet* consistent, const ClientDataset& client,
                        const FederationConfig& config, std::uint64_t stream_seed);

struct Contribution {
  const Parameters* params;
  std::size_t samples;
};

/// Weighted parameter mean in the given order. Weights are n_k / total, with
/// total the contributors' sum unless `total_samples` overrides it.
Parameters aggregate_models(const std::vector<Contribution>& contributions,
                            std::optional<double> total_samples = std::nullopt);

ServerState init_server(const FederationConfig& config, std::size_t input_dim, int num_classes);

RoundMetrics run_round(ServerState& state, const std::vector<ClientDataset>& clients,
                       const Dataset& test_set, const FederationConfig& config);

using RoundCallback = std::function<void(const RoundMetrics&, const ServerState&)>;

std::vector<RoundMetrics> run_experiment(const FederationConfig& config,
                                         const std::vector<ClientDataset>& clients,
                                         const Dataset& test_set,
                                         const RoundCallback& on_round = {});

/// First 1-based round whose accuracy reaches `threshold`.
std::optional<int> rounds_to_accuracy(const std::vector<RoundMetrics>& metrics, double threshold);

/// Local training on one client that records a snapshot after each of the
/// first `max_snapshots` optimizer steps, for estimate_constants().
TrainingTrace trace_local_training(const Parameters& start, const ClientDataset& client,
                                   const FederationConfig& config, const RelationalSet* relational,
                                   const ConsistentSet* consistent, std::size_t max_snapshots,
                                   std::uint64_t stream_seed);

std::string metrics_csv_header();
std::string metrics_csv_row(const RoundMetrics& m);
std::string metrics_to_csv(const std::vector<RoundMetrics>& metrics);
/// Throws kMalformedCsv.
std::vector<RoundMetrics> metrics_from_csv(const std::string& text);

}  // namespace fedsc
