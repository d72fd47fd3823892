#pragma once

#include <string>
#include <vector>

#include "fedsc/model.hpp"

namespace fedsc {

/// Constants of the non-convex convergence analysis.
///   smoothness (L1), extractor_lipschitz (L2), grad_bound (B),
///   grad_variance (sigma^2), initial_loss (L0), optimal_loss (L*).
struct TheoryConstants {
  double smoothness = 1.0;
  double extractor_lipschitz = 0.0;
  double grad_bound = 1.0;
  double grad_variance = 0.0;
  int num_classes = 10;
  int neighbors = 2;
  int local_epochs = 1;
  double learning_rate = 0.01;
  double target_grad_bound = 1.0;
  double initial_loss = 1.0;
  double optimal_loss = 0.0;
  // Set by estimate_constants: empirical maxima underestimate the true constants.
  bool estimated_lower_bounds = false;

  /// Throws kInvalidConstants.
  void validate() const;
};

/// Upper bound on the expected loss after one more round, starting from
/// `current_loss`.
double theorem1_bound(double current_loss, const TheoryConstants& c);

/// Largest learning rate (exclusive) for which the per-round bound is a
/// descent. Throws kNoFeasibleRate when no positive rate exists.
double theorem2_eta_threshold(const TheoryConstants& c);

struct RoundRequirement {
  double min_rounds = 0.0;         // R must exceed this
  double max_learning_rate = 0.0;  // eta must stay below this
};

/// Throws kInfeasibleConfiguration when the rate denominator is not positive.
RoundRequirement theorem3_min_rounds(const TheoryConstants& c);

/// One recorded optimizer step.
struct TraceSnapshot {
  Vector params;                          // flattened parameters w
  std::size_t extractor_size = 0;         // leading entries of params that form u
  Vector full_gradient;                   // gradient on the whole local dataset
  std::vector<Vector> minibatch_gradients;
  Vector probe_features;                  // flattened f(u; x) on a fixed probe set
};

struct TrainingTrace {
  std::vector<TraceSnapshot> snapshots;
};

/// Empirical lower bounds for B, sigma^2, L1 and L2; the remaining fields of
/// `base` are copied through.
TheoryConstants estimate_constants(const TrainingTrace& trace, const TheoryConstants& base = {});

/// key=value lines for all three calculators. Infeasible entries are
/// reported as the error name instead of a number.
std::string theory_report(const TheoryConstants& c, double current_loss);

}  // namespace fedsc
