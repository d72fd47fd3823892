#include "fedsc/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedsc/error.hpp"

namespace fedsc {

namespace {

constexpr double kMinNorm = 1e-12;

void check_clients(std::span<const PrototypeSet> clients) {
  if (clients.empty()) throw Error(ErrorCode::kInvalidArgument, "no client prototype sets");
  const auto classes = clients.front().num_classes();
  const auto dim = clients.front().dim();
  for (const auto& p : clients)
    if (p.num_classes() != classes || p.dim() != dim ||
        static_cast<std::size_t>(p.vectors.rows()) != classes)
      throw Error(ErrorCode::kShapeMismatch, "client prototype sets disagree on shape");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::size_t AdjacencyTensor::row_sum(std::size_t j, std::size_t k) const {
  std::size_t s = 0;
  for (std::size_t q = 0; q < num_clients; ++q) s += at(j, k, q);
  return s;
}

Eigen::RowVectorXd ConsistentSet::row(std::size_t j) const {
  if (j >= supported.size() || !supported[j])
    throw Error(ErrorCode::kClassUnsupported, "no consistent prototype for class " + std::to_string(j));
  return vectors.row(static_cast<Eigen::Index>(j));
}

PrototypeSet compute_client_prototypes(const Matrix& features, std::span<const int> labels,
                                       std::size_t num_classes, int owner) {
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw Error(ErrorCode::kDimensionMismatch, "feature rows and labels differ in count");
  PrototypeSet out;
  out.vectors = Matrix::Zero(static_cast<Eigen::Index>(num_classes), features.cols());
  out.present.assign(num_classes, false);
  out.owner = owner;
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw Error(ErrorCode::kLabelOutOfRange, "label " + std::to_string(y));
    out.vectors.row(y) += features.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t j = 0; j < num_classes; ++j) {
    if (counts[j] == 0) continue;
    out.present[j] = true;
    if (counts[j] > 1) out.vectors.row(static_cast<Eigen::Index>(j)) /= static_cast<double>(counts[j]);
  }
  return out;
}

GlobalPrototypes compute_global_prototypes(std::span<const PrototypeSet> clients,
                                           bool allow_unsupported) {
  check_clients(clients);
  const auto classes = clients.front().num_classes();
  GlobalPrototypes g;
  g.vectors = Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(clients.front().dim()));
  g.support_count.assign(classes, 0);
  for (std::size_t j = 0; j < classes; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    for (const auto& p : clients) {
      if (!p.present[j]) continue;
      g.vectors.row(row) += p.vectors.row(row);
      ++g.support_count[j];
    }
    if (g.support_count[j] == 0) {
      if (!allow_unsupported)
        throw Error(ErrorCode::kClassUnsupported, "no client holds class " + std::to_string(j));
      continue;
    }
    g.vectors.row(row) /= static_cast<double>(g.support_count[j]);
  }
  return g;
}

AngularTable angular_differences(const GlobalPrototypes& global,
                                 std::span<const PrototypeSet> clients) {
  check_clients(clients);
  const auto classes = clients.front().num_classes();
  const auto k_count = clients.size();
  if (static_cast<std::size_t>(global.vectors.rows()) != classes)
    throw Error(ErrorCode::kShapeMismatch, "global prototypes disagree with client class count");

  AngularTable t;
  t.phi = Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(k_count));
  t.valid.assign(classes * k_count, false);
  for (std::size_t j = 0; j < classes; ++j) {
    if (global.support_count[j] == 0) continue;
    const auto row = static_cast<Eigen::Index>(j);
    const double g_norm = global.vectors.row(row).norm();
    if (g_norm < kMinNorm)
      throw Error(ErrorCode::kDegeneratePrototype, "global prototype of class " + std::to_string(j) + " is zero");
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!clients[k].present[j]) continue;
      const auto c = clients[k].vectors.row(row);
      const double c_norm = c.norm();
      if (c_norm < kMinNorm)
        throw Error(ErrorCode::kDegeneratePrototype,
                    "prototype of class " + std::to_string(j) + " on client " + std::to_string(k) + " is zero");
      t.phi(row, static_cast<Eigen::Index>(k)) =
          std::clamp(global.vectors.row(row).dot(c) / (g_norm * c_norm), -1.0, 1.0);
      t.valid[j * k_count + k] = true;
    }
  }
  return t;
}

AdjacencyTensor build_adjacency(const AngularTable& table, std::size_t neighbors) {
  const auto classes = table.num_classes();
  const auto k_count = table.num_clients();
  AdjacencyTensor a{classes, k_count, std::vector<unsigned char>(classes * k_count * k_count, 0)};
  std::vector<std::size_t> candidates;
  for (std::size_t j = 0; j < classes; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    for (std::size_t k1 = 0; k1 < k_count; ++k1) {
      if (!table.is_valid(j, k1)) continue;
      auto* out = &a.entries[(j * k_count + k1) * k_count];
      out[k1] = 1;
      candidates.clear();
      for (std::size_t k = 0; k < k_count; ++k)
        if (k != k1 && table.is_valid(j, k)) candidates.push_back(k);
      const double anchor = table.phi(row, static_cast<Eigen::Index>(k1));
      // Stable sort on ascending index keeps the lower client on ties.
      std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t p, std::size_t q) {
        return std::abs(anchor - table.phi(row, static_cast<Eigen::Index>(p))) <
               std::abs(anchor - table.phi(row, static_cast<Eigen::Index>(q)));
      });
      const auto take = std::min(neighbors, candidates.size());
      for (std::size_t i = 0; i < take; ++i) out[candidates[i]] = 1;
    }
  }
  return a;
}

RelationalSet relational_prototypes(const AdjacencyTensor& adjacency,
                                    std::span<const PrototypeSet> clients) {
  check_clients(clients);
  const auto classes = clients.front().num_classes();
  const auto k_count = clients.size();
  const auto dim = static_cast<Eigen::Index>(clients.front().dim());
  if (adjacency.num_classes != classes || adjacency.num_clients != k_count)
    throw Error(ErrorCode::kShapeMismatch, "adjacency does not match prototype sets");

  RelationalSet r;
  r.per_class.assign(classes, Matrix::Zero(static_cast<Eigen::Index>(k_count), dim));
  r.valid.assign(classes * k_count, false);
  for (std::size_t j = 0; j < classes; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto selected = adjacency.row_sum(j, k);
      if (selected == 0) continue;
      auto out = r.per_class[j].row(static_cast<Eigen::Index>(k));
      for (std::size_t q = 0; q < k_count; ++q)
        if (adjacency.at(j, k, q)) out += clients[q].vectors.row(row);
      out /= static_cast<double>(selected);
      r.valid[j * k_count + k] = true;
    }
  }
  return r;
}

double client_discrepancy(std::span<const std::size_t> class_counts) {
  if (class_counts.empty()) throw Error(ErrorCode::kInvalidArgument, "no classes");
  const double total = static_cast<double>(std::accumulate(class_counts.begin(), class_counts.end(), std::size_t{0}));
  if (total < 1.0) throw Error(ErrorCode::kEmptyClient, "client has no samples");
  const double uniform = 1.0 / static_cast<double>(class_counts.size());
  double sq = 0.0;
  for (auto n : class_counts) {
    const double diff = static_cast<double>(n) / total - uniform;
    sq += diff * diff;
  }
  return std::sqrt(0.5 * sq);
}

DiscrepancyWeights aggregation_weights(std::span<const std::size_t> sample_counts,
                                       std::span<const double> discrepancies) {
  if (sample_counts.empty() || sample_counts.size() != discrepancies.size())
    throw Error(ErrorCode::kInvalidArgument, "sample counts and discrepancies must be non-empty and aligned");
  const auto k_count = static_cast<Eigen::Index>(sample_counts.size());
  DiscrepancyWeights w;
  w.discrepancy = Vector(k_count);
  w.weights = Vector(k_count);
  double total_samples = 0.0;
  double total_discrepancy = 0.0;
  for (Eigen::Index k = 0; k < k_count; ++k) {
    if (sample_counts[static_cast<std::size_t>(k)] < 1)
      throw Error(ErrorCode::kEmptyClient, "client " + std::to_string(k) + " has no samples");
    total_samples += static_cast<double>(sample_counts[static_cast<std::size_t>(k)]);
    total_discrepancy += discrepancies[static_cast<std::size_t>(k)];
    w.discrepancy(k) = discrepancies[static_cast<std::size_t>(k)];
  }
  w.a = 1.0 / total_samples;
  w.b = total_discrepancy > 0.0 ? 1.0 / total_discrepancy : 0.0;
  double norm = 0.0;
  for (Eigen::Index k = 0; k < k_count; ++k) {
    w.weights(k) = sigmoid(w.a * static_cast<double>(sample_counts[static_cast<std::size_t>(k)]) -
                           w.b * w.discrepancy(k));
    norm += w.weights(k);
  }
  w.weights /= norm;
  return w;
}

ConsistentSet consistent_prototypes(const RelationalSet& relational,
                                    const DiscrepancyWeights& weights) {
  const auto classes = relational.num_classes();
  const auto k_count = relational.num_clients();
  if (static_cast<std::size_t>(weights.weights.size()) != k_count)
    throw Error(ErrorCode::kShapeMismatch, "weights do not match relational client axis");
  ConsistentSet o;
  o.vectors = Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(relational.dim()));
  o.supported.assign(classes, false);
  for (std::size_t j = 0; j < classes; ++j) {
    double mass = 0.0;
    auto out = o.vectors.row(static_cast<Eigen::Index>(j));
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!relational.is_valid(j, k)) continue;
      const double e = weights.weights(static_cast<Eigen::Index>(k));
      out += e * relational.prototype(j, k);
      mass += e;
    }
    if (mass <= 0.0) continue;
    out /= mass;
    o.supported[j] = true;
  }
  if (std::none_of(o.supported.begin(), o.supported.end(), [](bool s) { return s; }))
    throw Error(ErrorCode::kClassUnsupported, "no class has a relational prototype");
  return o;
}

ServerPrototypes build_server_prototypes(std::span<const PrototypeSet> clients,
                                         std::span<const std::vector<std::size_t>> class_counts,
                                         std::size_t neighbors) {
  if (clients.size() != class_counts.size())
    throw Error(ErrorCode::kInvalidArgument, "one class-count vector is required per client");
  ServerPrototypes s;
  s.global = compute_global_prototypes(clients, /*allow_unsupported=*/true);
  s.angular = angular_differences(s.global, clients);
  s.adjacency = build_adjacency(s.angular, neighbors);
  s.relational = relational_prototypes(s.adjacency, clients);

  std::vector<std::size_t> totals;
  std::vector<double> discrepancies;
  for (const auto& counts : class_counts) {
    totals.push_back(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    discrepancies.push_back(client_discrepancy(counts));
  }
  s.weights = aggregation_weights(totals, discrepancies);
  s.consistent = consistent_prototypes(s.relational, s.weights);
  return s;
}

}  // namespace fedsc
