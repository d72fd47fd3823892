#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedsc/model.hpp"

namespace fedsc {

/// Per-class mean features of one client. Rows of absent classes are zero
/// and flagged in `present`; they must never be read as prototypes.
struct PrototypeSet {
  Matrix vectors;  // num_classes x d
  std::vector<bool> present;
  int owner = -1;

  std::size_t num_classes() const { return present.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
};

struct GlobalPrototypes {
  Matrix vectors;  // num_classes x d
  std::vector<std::size_t> support_count;
};

/// Cosine between each client prototype and its class's global prototype.
struct AngularTable {
  Matrix phi;  // num_classes x num_clients
  std::vector<bool> valid;  // row-major num_classes x num_clients

  std::size_t num_classes() const { return static_cast<std::size_t>(phi.rows()); }
  std::size_t num_clients() const { return static_cast<std::size_t>(phi.cols()); }
  bool is_valid(std::size_t j, std::size_t k) const { return valid[j * num_clients() + k]; }
};

struct AdjacencyTensor {
  std::size_t num_classes = 0;
  std::size_t num_clients = 0;
  std::vector<unsigned char> entries;  // [class][row client][column client]

  unsigned char at(std::size_t j, std::size_t k, std::size_t q) const {
    return entries[(j * num_clients + k) * num_clients + q];
  }
  std::size_t row_sum(std::size_t j, std::size_t k) const;
};

struct RelationalSet {
  std::vector<Matrix> per_class;  // per class: num_clients x d
  std::vector<bool> valid;        // row-major num_classes x num_clients

  std::size_t num_classes() const { return per_class.size(); }
  std::size_t num_clients() const {
    return per_class.empty() ? 0 : static_cast<std::size_t>(per_class.front().rows());
  }
  std::size_t dim() const {
    return per_class.empty() ? 0 : static_cast<std::size_t>(per_class.front().cols());
  }
  bool is_valid(std::size_t j, std::size_t k) const { return valid[j * num_clients() + k]; }
  auto prototype(std::size_t j, std::size_t k) const {
    return per_class[j].row(static_cast<Eigen::Index>(k));
  }
};

struct DiscrepancyWeights {
  Vector discrepancy;  // d_k
  Vector weights;      // e_k, sums to 1
  double a = 0.0;
  double b = 0.0;
};

struct ConsistentSet {
  Matrix vectors;  // num_classes x d
  std::vector<bool> supported;

  std::size_t num_classes() const { return supported.size(); }
  /// Throws kClassUnsupported for classes with no relational prototype.
  Eigen::RowVectorXd row(std::size_t j) const;
};

/// `features` holds one row per sample, `labels` its class index.
PrototypeSet compute_client_prototypes(const Matrix& features, std::span<const int> labels,
                                       std::size_t num_classes, int owner = -1);

/// Mean over the clients that hold each class. With `allow_unsupported`,
/// classes nobody holds get support 0 instead of raising kClassUnsupported.
GlobalPrototypes compute_global_prototypes(std::span<const PrototypeSet> clients,
                                           bool allow_unsupported = false);

AngularTable angular_differences(const GlobalPrototypes& global,
                                 std::span<const PrototypeSet> clients);

/// Each valid (class, client) row selects itself plus up to `neighbors`
/// valid clients with the closest cosine; ties go to the lower client index.
AdjacencyTensor build_adjacency(const AngularTable& table, std::size_t neighbors);

RelationalSet relational_prototypes(const AdjacencyTensor& adjacency,
                                    std::span<const PrototypeSet> clients);

double client_discrepancy(std::span<const std::size_t> class_counts);

DiscrepancyWeights aggregation_weights(std::span<const std::size_t> sample_counts,
                                       std::span<const double> discrepancies);

ConsistentSet consistent_prototypes(const RelationalSet& relational,
                                    const DiscrepancyWeights& weights);

/// Everything the server derives from one round's client prototype sets.
struct ServerPrototypes {
  GlobalPrototypes global;
  AngularTable angular;
  AdjacencyTensor adjacency;
  RelationalSet relational;
  DiscrepancyWeights weights;
  ConsistentSet consistent;
};

/// `class_counts[k]` belongs to `clients[k]`.
ServerPrototypes build_server_prototypes(std::span<const PrototypeSet> clients,
                                         std::span<const std::vector<std::size_t>> class_counts,
                                         std::size_t neighbors);

}  // namespace fedsc
