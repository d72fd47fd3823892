#include "fedsc/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fedsc/error.hpp"

namespace fedsc {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::kInvalidConstants, what);
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void TheoryConstants::validate() const {
  require(std::isfinite(smoothness) && smoothness > 0.0, "L1 must be > 0");
  require(std::isfinite(extractor_lipschitz) && extractor_lipschitz >= 0.0, "L2 must be >= 0");
  require(std::isfinite(grad_bound) && grad_bound > 0.0, "B must be > 0");
  require(std::isfinite(grad_variance) && grad_variance >= 0.0, "sigma2 must be >= 0");
  require(num_classes >= 1, "num_classes must be >= 1");
  require(neighbors >= 0, "M must be >= 0");
  require(local_epochs >= 1, "E must be >= 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "eta must be >= 0");
  require(std::isfinite(target_grad_bound) && target_grad_bound > 0.0, "xi must be > 0");
  require(std::isfinite(initial_loss) && std::isfinite(optimal_loss), "losses must be finite");
  require(optimal_loss <= initial_loss, "L_star must not exceed L0");
}

double theorem1_bound(double current_loss, const TheoryConstants& c) {
  c.validate();
  const double eta = c.learning_rate;
  const double l1 = c.smoothness;
  const double e = c.local_epochs;
  const double b = c.grad_bound;
  const double m = c.neighbors;
  const double descent = (eta - l1 * eta * eta / 2.0) * e * b * b;
  const double noise = l1 * e * eta * eta / 2.0 * c.grad_variance;
  const double drift = c.extractor_lipschitz * e * eta * c.num_classes * b * (m + 2.0) / (m + 1.0);
  return current_loss - descent + noise + drift;
}

double theorem2_eta_threshold(const TheoryConstants& c) {
  c.validate();
  const double m = c.neighbors;
  const double b = c.grad_bound;
  const double numerator =
      2.0 * (m + 1.0) * b * b - 2.0 * (m + 2.0) * c.extractor_lipschitz * c.num_classes * b;
  if (!(numerator > 0.0))
    throw Error(ErrorCode::kNoFeasibleRate, "drift term outweighs descent for every positive rate");
  return numerator / (c.smoothness * (m + 1.0) * (c.grad_variance + b * b));
}

RoundRequirement theorem3_min_rounds(const TheoryConstants& c) {
  c.validate();
  const double m = c.neighbors;
  const double e = c.local_epochs;
  const double eta = c.learning_rate;
  const double l1 = c.smoothness;
  const double l2 = c.extractor_lipschitz;
  const double b = c.grad_bound;
  const double xi = c.target_grad_bound;
  const double classes = c.num_classes;

  const double omega1 = (m + 1.0) * l1 * e * eta * eta * c.grad_variance;
  const double omega2 = 2.0 * (m + 2.0) * l2 * e * eta * classes * b;
  const double denominator = xi * e * eta * (m + 1.0) * (2.0 - l1 * eta) - (omega1 + omega2);
  if (!(denominator > 0.0))
    throw Error(ErrorCode::kInfeasibleConfiguration, "round bound denominator is not positive");

  RoundRequirement out;
  out.min_rounds = 2.0 * (m + 1.0) * (c.initial_loss - c.optimal_loss) / denominator;
  out.max_learning_rate = (2.0 * xi * (m + 1.0) - 2.0 * (m + 2.0) * l2 * classes * b) /
                          (l1 * (m + 1.0) * (xi + c.grad_variance));
  return out;
}

TheoryConstants estimate_constants(const TrainingTrace& trace, const TheoryConstants& base) {
  const auto& snaps = trace.snapshots;
  if (snaps.size() < 2)
    throw Error(ErrorCode::kInsufficientTrace, "need at least two snapshots to estimate Lipschitz constants");

  TheoryConstants out = base;
  out.estimated_lower_bounds = true;
  double grad_bound = 0.0;
  double variance = 0.0;
  for (const auto& s : snaps) {
    grad_bound = std::max(grad_bound, s.full_gradient.norm());
    if (s.minibatch_gradients.empty()) continue;
    double spread = 0.0;
    for (const auto& g : s.minibatch_gradients) {
      if (g.size() != s.full_gradient.size())
        throw Error(ErrorCode::kShapeMismatch, "minibatch gradient size differs from full gradient");
      grad_bound = std::max(grad_bound, g.norm());
      spread += (g - s.full_gradient).squaredNorm();
    }
    variance = std::max(variance, spread / static_cast<double>(s.minibatch_gradients.size()));
  }

  double smooth = 0.0;
  double lipschitz = 0.0;
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    for (std::size_t j = i + 1; j < snaps.size(); ++j) {
      const auto& a = snaps[i];
      const auto& b = snaps[j];
      if (a.params.size() != b.params.size())
        throw Error(ErrorCode::kShapeMismatch, "snapshots disagree on parameter count");
      const double dw = (a.params - b.params).norm();
      if (dw > 0.0 && a.full_gradient.size() == b.full_gradient.size())
        smooth = std::max(smooth, (a.full_gradient - b.full_gradient).norm() / dw);
      const auto eu = static_cast<Eigen::Index>(a.extractor_size);
      if (eu == 0 || a.probe_features.size() == 0 || a.probe_features.size() != b.probe_features.size())
        continue;
      const double du = (a.params.head(eu) - b.params.head(eu)).norm();
      if (du > 0.0) lipschitz = std::max(lipschitz, (a.probe_features - b.probe_features).norm() / du);
    }
  }
  out.grad_bound = grad_bound;
  out.grad_variance = variance;
  out.smoothness = smooth;
  out.extractor_lipschitz = lipschitz;
  return out;
}

std::string theory_report(const TheoryConstants& c, double current_loss) {
  c.validate();
  std::ostringstream out;
  out << "theorem1_bound=" << fmt(theorem1_bound(current_loss, c)) << "\n";
  try {
    out << "theorem2_eta_threshold=" << fmt(theorem2_eta_threshold(c)) << "\n";
  } catch (const Error& e) {
    out << "theorem2_eta_threshold=" << error_name(e.code()) << "\n";
  }
  try {
    const auto r = theorem3_min_rounds(c);
    out << "theorem3_min_rounds=" << fmt(r.min_rounds) << "\n";
    out << "theorem3_eta_max=" << fmt(r.max_learning_rate) << "\n";
  } catch (const Error& e) {
    out << "theorem3_min_rounds=" << error_name(e.code()) << "\n";
    out << "theorem3_eta_max=" << error_name(e.code()) << "\n";
  }
  out << "constants_are_lower_bounds=" << (c.estimated_lower_bounds ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace fedsc
