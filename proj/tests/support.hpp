#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "fedsc/losses.hpp"
#include "fedsc/model.hpp"
#include "fedsc/prototypes.hpp"
#include "fedsc/theory.hpp"

namespace fedsc::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

inline Vector random_vector(Eigen::Index size, std::mt19937_64& rng, double scale = 1.0) {
  return random_matrix(size, 1, rng, scale).col(0);
}

inline Parameters random_parameters(const ModelShape& s, std::mt19937_64& rng) {
  Parameters p = Parameters::zeros(s);
  p.for_each([&](auto& block) { block = random_matrix(block.rows(), block.cols(), rng, 0.7); });
  return p;
}

inline PrototypeSet full_prototype_set(std::size_t classes, std::size_t dim, int owner, std::mt19937_64& rng) {
  PrototypeSet p;
  p.vectors = random_matrix(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim), rng);
  p.present.assign(classes, true);
  p.owner = owner;
  return p;
}

inline RelationalSet random_relational(std::size_t classes, std::size_t clients, std::size_t dim,
                                       std::mt19937_64& rng) {
  RelationalSet r;
  for (std::size_t j = 0; j < classes; ++j)
    r.per_class.push_back(random_matrix(static_cast<Eigen::Index>(clients), static_cast<Eigen::Index>(dim), rng));
  r.valid.assign(classes * clients, true);
  return r;
}

inline ConsistentSet random_consistent(std::size_t classes, std::size_t dim, std::mt19937_64& rng) {
  ConsistentSet c;
  c.vectors = random_matrix(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim), rng);
  c.supported.assign(classes, true);
  return c;
}

/// Positive constants with learning rates below 0.5 / L1.
inline TheoryConstants random_theory_constants(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TheoryConstants c;
  c.smoothness = 0.1 + 5 * u(rng);
  c.extractor_lipschitz = 0.01 * u(rng);
  c.grad_bound = 0.1 + 5 * u(rng);
  c.grad_variance = 3 * u(rng);
  c.num_classes = 2 + static_cast<int>(rng() % 20);
  c.neighbors = static_cast<int>(rng() % 6);
  c.local_epochs = 1 + static_cast<int>(rng() % 10);
  c.learning_rate = 0.5 * u(rng) / c.smoothness;
  c.target_grad_bound = 0.1 + 5 * u(rng);
  c.optimal_loss = u(rng);
  c.initial_loss = c.optimal_loss + 5 * u(rng);
  return c;
}

/// Entries below 1e-6 sit at the finite-difference noise floor and are
/// compared absolutely instead.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-6) return std::abs(analytic - numeric) < 1e-10 ? 0.0 : 1.0;
  return std::abs(analytic - numeric) / scale;
}

/// Random composite-loss instance through the MLP. Returns the largest
/// relative error between backward() and central finite differences, or
/// nothing when the instance sits within 0.1 of a CPDR kink (or within 1e-3
/// of a ReLU kink) and must be redrawn.
inline std::optional<double> composite_gradient_error(std::mt19937_64& rng, const LossOptions& options) {
  const ModelShape shape{3, 5, 4, 3};
  const std::size_t clients = 3;
  const Parameters p = random_parameters(shape, rng);
  const Matrix x = random_matrix(4, 3, rng);
  std::vector<int> labels(4);
  for (auto& y : labels) y = static_cast<int>(rng() % shape.num_classes);
  const RelationalSet rel = random_relational(shape.num_classes, clients, shape.feature_dim, rng);
  const ConsistentSet cons = random_consistent(shape.num_classes, shape.feature_dim, rng);

  const FeatureBatch batch = forward_features(p, x, labels);
  if (batch.pre_hidden.cwiseAbs().minCoeff() < 1e-3) return std::nullopt;
  for (Eigen::Index i = 0; i < batch.z.rows(); ++i) {
    const Eigen::RowVectorXd gap = batch.z.row(i) - cons.vectors.row(labels[static_cast<std::size_t>(i)]);
    if (gap.cwiseAbs().minCoeff() <= 0.1) return std::nullopt;
  }
  // U is measured once and held fixed, as during a local epoch.
  const SimilarityContext ctx = compute_normalizers(batch.z, rel, 0.05);

  auto objective = [&](const Parameters& q) {
    return total_loss(forward_features(q, x, labels), &rel, &cons, &ctx, q, options).total;
  };
  const LossBreakdown loss = total_loss(batch, &rel, &cons, &ctx, p, options);
  const Vector analytic = backward(p, batch, loss.grad_z, loss.grad_logits).flatten();
  const Vector flat = p.flatten();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    const double h = 1e-5;
    Vector up = flat, down = flat;
    up(i) += h;
    down(i) -= h;
    const double numeric =
        (objective(Parameters::unflatten(shape, up)) - objective(Parameters::unflatten(shape, down))) / (2 * h);
    worst = std::max(worst, relative_error(analytic(i), numeric));
  }
  return worst;
}

/// Straight-line evaluation of the server prototype pipeline on plain arrays,
/// for instances where every client holds every class.
struct OraclePipeline {
  // [client][class][dim]
  using Protos = std::vector<std::vector<std::vector<double>>>;
  Protos relational;
  std::vector<std::vector<double>> consistent;
  std::vector<double> discrepancy;
  std::vector<double> weights;
};

inline OraclePipeline oracle_pipeline(const OraclePipeline::Protos& client,
                                      const std::vector<std::vector<std::size_t>>& counts,
                                      std::size_t neighbors) {
  const std::size_t K = client.size();
  const std::size_t C = client[0].size();
  const std::size_t d = client[0][0].size();
  OraclePipeline out;

  std::vector<std::vector<double>> global(C, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t q = 0; q < d; ++q) {
      for (std::size_t k = 0; k < K; ++k) global[j][q] += client[k][j][q];
      global[j][q] /= static_cast<double>(K);
    }

  std::vector<std::vector<double>> phi(C, std::vector<double>(K));
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t q = 0; q < d; ++q) {
        dot += global[j][q] * client[k][j][q];
        na += global[j][q] * global[j][q];
        nb += client[k][j][q] * client[k][j][q];
      }
      phi[j][k] = dot / (std::sqrt(na) * std::sqrt(nb));
    }

  out.relational.assign(K, std::vector<std::vector<double>>(C, std::vector<double>(d, 0.0)));
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::size_t> chosen{k};
      std::vector<bool> used(K, false);
      used[k] = true;
      for (std::size_t pick = 0; pick < std::min(neighbors, K - 1); ++pick) {
        std::size_t best = K;
        for (std::size_t q = 0; q < K; ++q) {
          if (used[q]) continue;
          if (best == K || std::abs(phi[j][k] - phi[j][q]) < std::abs(phi[j][k] - phi[j][best])) best = q;
        }
        used[best] = true;
        chosen.push_back(best);
      }
      for (auto q : chosen)
        for (std::size_t t = 0; t < d; ++t) out.relational[k][j][t] += client[q][j][t];
      for (std::size_t t = 0; t < d; ++t) out.relational[k][j][t] /= static_cast<double>(chosen.size());
    }

  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double n = 0;
    for (auto c : counts[k]) n += static_cast<double>(c);
    total += n;
    double s = 0;
    for (auto c : counts[k]) {
      const double diff = static_cast<double>(c) / n - 1.0 / static_cast<double>(C);
      s += diff * diff;
    }
    out.discrepancy.push_back(std::sqrt(0.5 * s));
  }
  double dsum = 0.0;
  for (double v : out.discrepancy) dsum += v;
  const double b = dsum > 0 ? 1.0 / dsum : 0.0;
  double norm = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double n = 0;
    for (auto c : counts[k]) n += static_cast<double>(c);
    const double e = 1.0 / (1.0 + std::exp(-(n / total - b * out.discrepancy[k])));
    out.weights.push_back(e);
    norm += e;
  }
  for (auto& e : out.weights) e /= norm;

  out.consistent.assign(C, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < d; ++t) out.consistent[j][t] += out.weights[k] * out.relational[k][j][t];
  return out;
}

inline OraclePipeline::Protos to_arrays(const std::vector<PrototypeSet>& sets) {
  OraclePipeline::Protos out;
  for (const auto& s : sets) {
    std::vector<std::vector<double>> per_class;
    for (Eigen::Index j = 0; j < s.vectors.rows(); ++j) {
      per_class.emplace_back();
      for (Eigen::Index q = 0; q < s.vectors.cols(); ++q) per_class.back().push_back(s.vectors(j, q));
    }
    out.push_back(std::move(per_class));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> random_counts(std::size_t K, std::size_t C, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> u(1, 60);
  std::vector<std::vector<std::size_t>> out(K, std::vector<std::size_t>(C));
  for (auto& row : out)
    for (auto& n : row) n = u(rng);
  return out;
}

/// Largest absolute disagreement between build_server_prototypes() and the
/// oracle on one random instance with K <= 6, C <= 5, d <= 8.
inline double pipeline_oracle_error(std::mt19937_64& rng) {
  const std::size_t K = 2 + rng() % 5;
  const std::size_t C = 2 + rng() % 4;
  const std::size_t d = 2 + rng() % 7;
  const std::size_t M = rng() % K;
  std::vector<PrototypeSet> sets;
  for (std::size_t k = 0; k < K; ++k) sets.push_back(full_prototype_set(C, d, static_cast<int>(k), rng));
  const auto counts = random_counts(K, C, rng);
  const auto server = build_server_prototypes(sets, counts, M);
  const auto oracle = oracle_pipeline(to_arrays(sets), counts, M);
  double worst = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    worst = std::max(worst, std::abs(server.weights.weights(ki) - oracle.weights[k]));
    worst = std::max(worst, std::abs(server.weights.discrepancy(ki) - oracle.discrepancy[k]));
    for (std::size_t j = 0; j < C; ++j)
      for (std::size_t q = 0; q < d; ++q)
        worst = std::max(worst, std::abs(server.relational.prototype(j, k)(static_cast<Eigen::Index>(q)) -
                                         oracle.relational[k][j][q]));
  }
  for (std::size_t j = 0; j < C; ++j)
    for (std::size_t q = 0; q < d; ++q)
      worst = std::max(worst, std::abs(server.consistent.vectors(static_cast<Eigen::Index>(j),
                                                                 static_cast<Eigen::Index>(q)) -
                                       oracle.consistent[j][q]));
  return worst;
}

}  // namespace fedsc::testing
