#include "fedsc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fedsc/error.hpp"

namespace fedsc {

namespace {

constexpr double kMinNorm = 1e-12;

// Relational prototypes flattened for one loss evaluation.
struct PreparedPrototypes {
  Matrix unit;                // m x d, r / |r|
  std::vector<int> label;     // class of row m
  std::vector<double> scale;  // 1 / (U * tau)
};

PreparedPrototypes prepare(const RelationalSet& relational, const SimilarityContext& context) {
  if (!(context.temperature > 0.0))
    throw Error(ErrorCode::kInvalidArgument, "temperature must be > 0");
  const auto classes = relational.num_classes();
  const auto k_count = relational.num_clients();
  if (static_cast<std::size_t>(context.normalizers.rows()) != classes ||
      static_cast<std::size_t>(context.normalizers.cols()) != k_count)
    throw Error(ErrorCode::kShapeMismatch, "normalizers do not match relational set");
  PreparedPrototypes p;
  std::size_t count = 0;
  for (std::size_t j = 0; j < classes; ++j)
    for (std::size_t k = 0; k < k_count; ++k) count += relational.is_valid(j, k);
  p.unit.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(relational.dim()));
  Eigen::Index m = 0;
  for (std::size_t j = 0; j < classes; ++j) {
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!relational.is_valid(j, k)) continue;
      const auto r = relational.prototype(j, k);
      const double norm = r.norm();
      if (norm < kMinNorm)
        throw Error(ErrorCode::kDegenerateVector, "relational prototype has zero norm");
      const double u = context.normalizers(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
      if (!(u > 0.0)) throw Error(ErrorCode::kInvalidArgument, "normalizer U must be > 0");
      p.unit.row(m++) = r / norm;
      p.label.push_back(static_cast<int>(j));
      p.scale.push_back(1.0 / (u * context.temperature));
    }
  }
  return p;
}

// Max-shifted log-sum-exp over all entries, or only the masked ones.
double log_sum_exp(const std::vector<double>& a, const std::vector<bool>& mask, bool masked_only) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!masked_only || mask[i]) hi = std::max(hi, a[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!masked_only || mask[i]) s += std::exp(a[i] - hi);
  return hi + std::log(s);
}

bool has_positive_and_negative(const PreparedPrototypes& p, int label) {
  bool pos = false;
  bool neg = false;
  for (int y : p.label) (y == label ? pos : neg) = true;
  return pos && neg;
}

LossAndGrad rpcl_prepared(const Eigen::Ref<const Vector>& z, int label, const PreparedPrototypes& p) {
  const auto count = p.label.size();
  std::vector<bool> positive(count);
  bool any_pos = false;
  bool any_neg = false;
  for (std::size_t m = 0; m < count; ++m) {
    positive[m] = p.label[m] == label;
    (positive[m] ? any_pos : any_neg) = true;
  }
  if (!any_pos)
    throw Error(ErrorCode::kNoPositivePrototype, "no relational prototype for class " + std::to_string(label));
  if (!any_neg) throw Error(ErrorCode::kNoNegativePrototype, "no relational prototype of another class");

  const double z_norm = z.norm();
  if (z_norm < kMinNorm) throw Error(ErrorCode::kDegenerateVector, "feature vector has zero norm");
  const Vector z_unit = z / z_norm;
  const Vector cosines = p.unit * z_unit;

  std::vector<double> a(count);
  for (std::size_t m = 0; m < count; ++m) a[m] = cosines(static_cast<Eigen::Index>(m)) * p.scale[m];
  const double lse_all = log_sum_exp(a, positive, false);
  const double lse_pos = log_sum_exp(a, positive, true);

  LossAndGrad out;
  out.loss = lse_all - lse_pos;
  // d loss / d a_m = softmax_all(a)_m - [m positive] softmax_pos(a)_m, and
  // d cos_m / d z = (r_hat_m - cos_m z_hat) / |z|.
  Vector grad_cos(static_cast<Eigen::Index>(count));
  for (std::size_t m = 0; m < count; ++m) {
    double w = std::exp(a[m] - lse_all);
    if (positive[m]) w -= std::exp(a[m] - lse_pos);
    grad_cos(static_cast<Eigen::Index>(m)) = w * p.scale[m];
  }
  out.grad = (p.unit.transpose() * grad_cos - grad_cos.dot(cosines) * z_unit) / z_norm;
  return out;
}

LossAndGrad cpdr_row(const Eigen::Ref<const Vector>& z, const Eigen::RowVectorXd& o, CpdrNorm norm) {
  if (o.size() != z.size())
    throw Error(ErrorCode::kDimensionMismatch, "feature and consistent prototype differ in dim");
  const Vector diff = z - o.transpose();
  LossAndGrad out;
  if (norm == CpdrNorm::kL1) {
    out.loss = diff.cwiseAbs().sum();
    out.grad = diff.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
  } else {
    out.loss = diff.norm();
    out.grad = out.loss > 0.0 ? Vector(diff / out.loss) : Vector::Zero(diff.size());
  }
  return out;
}

LossAndGrad ce_row(const Eigen::Ref<const Vector>& logits, int label) {
  const auto k = logits.size();
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "cross-entropy needs at least two classes");
  if (label < 0 || label >= k) throw Error(ErrorCode::kLabelOutOfRange, "label " + std::to_string(label));
  const double hi = logits.maxCoeff();
  const Vector shifted = (logits.array() - hi).exp().matrix();
  const double sum = shifted.sum();
  LossAndGrad out;
  out.loss = hi + std::log(sum) - logits(label);
  out.grad = shifted / sum;
  out.grad(label) -= 1.0;
  return out;
}

}  // namespace

std::string_view to_string(CpdrNorm norm) { return norm == CpdrNorm::kL1 ? "l1" : "l2"; }

double similarity(const Vector& z, const Vector& r, double normalizer) {
  if (z.size() != r.size()) throw Error(ErrorCode::kDimensionMismatch, "vectors differ in dim");
  const double zn = z.norm();
  const double rn = r.norm();
  if (zn < kMinNorm || rn < kMinNorm) throw Error(ErrorCode::kDegenerateVector, "zero-norm vector");
  if (!(normalizer > 0.0)) throw Error(ErrorCode::kInvalidArgument, "normalizer U must be > 0");
  return z.dot(r) / (zn * rn) / normalizer;
}

SimilarityContext compute_normalizers(const Matrix& epoch_features, const RelationalSet& relational,
                                      double temperature) {
  if (epoch_features.rows() == 0) throw Error(ErrorCode::kEmptyFeatureSet, "no features to normalize against");
  if (static_cast<std::size_t>(epoch_features.cols()) != relational.dim())
    throw Error(ErrorCode::kDimensionMismatch, "features and relational prototypes differ in dim");
  SimilarityContext ctx;
  ctx.temperature = temperature;
  const auto classes = relational.num_classes();
  const auto k_count = relational.num_clients();
  ctx.normalizers = Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(k_count));
  const double n = static_cast<double>(epoch_features.rows());
  for (std::size_t j = 0; j < classes; ++j) {
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!relational.is_valid(j, k)) continue;
      const auto r = relational.prototype(j, k);
      const double mean = (epoch_features.rowwise() - r).rowwise().norm().sum() / n;
      if (!(mean > 0.0))
        throw Error(ErrorCode::kDegenerateVector, "every feature coincides with a relational prototype");
      ctx.normalizers(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = mean;
    }
  }
  return ctx;
}

LossAndGrad rpcl_loss_and_grad(const Vector& z, int label, const RelationalSet& relational,
                               const SimilarityContext& context) {
  if (static_cast<std::size_t>(z.size()) != relational.dim())
    throw Error(ErrorCode::kDimensionMismatch, "feature and relational prototypes differ in dim");
  return rpcl_prepared(z, label, prepare(relational, context));
}

LossAndGrad cpdr_loss_and_grad(const Vector& z, int label, const ConsistentSet& consistent,
                               CpdrNorm norm) {
  if (label < 0 || static_cast<std::size_t>(label) >= consistent.num_classes())
    throw Error(ErrorCode::kClassUnsupported, "class " + std::to_string(label) + " outside consistent set");
  return cpdr_row(z, consistent.row(static_cast<std::size_t>(label)), norm);
}

LossAndGrad ce_loss_and_grad(const Vector& logits, int label) { return ce_row(logits, label); }

LossBreakdown total_loss(const FeatureBatch& batch, const Matrix& logits,
                         const RelationalSet* relational, const ConsistentSet* consistent,
                         const SimilarityContext* context, const LossOptions& options) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw Error(ErrorCode::kEmptyFeatureSet, "empty batch");
  if (batch.labels.size() != static_cast<std::size_t>(n))
    throw Error(ErrorCode::kShapeMismatch, "batch labels and features differ in count");
  if (logits.rows() != n) throw Error(ErrorCode::kShapeMismatch, "logits and batch differ in count");
  if (relational && !context)
    throw Error(ErrorCode::kInvalidArgument, "relational prototypes need a similarity context");

  LossBreakdown out;
  out.grad_z = Matrix::Zero(n, batch.z.cols());
  out.grad_logits = Matrix::Zero(n, logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);

  PreparedPrototypes prepared;
  if (relational) prepared = prepare(*relational, *context);

  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = batch.labels[static_cast<std::size_t>(i)];
    const Vector z = batch.z.row(i).transpose();

    const auto ce = ce_row(logits.row(i).transpose(), y);
    out.ce += options.ce_weight * ce.loss;
    out.grad_logits.row(i) = (options.ce_weight * inv_n) * ce.grad.transpose();

    if (relational && (!options.skip_unsupported || has_positive_and_negative(prepared, y))) {
      const auto rpcl = rpcl_prepared(z, y, prepared);
      out.rpcl += options.rpcl_weight * rpcl.loss;
      out.grad_z.row(i) += (options.rpcl_weight * inv_n) * rpcl.grad.transpose();
    }

    if (consistent) {
      const bool supported = static_cast<std::size_t>(y) < consistent->num_classes() &&
                             consistent->supported[static_cast<std::size_t>(y)];
      if (supported || !options.skip_unsupported) {
        const auto cpdr = cpdr_loss_and_grad(z, y, *consistent, options.cpdr_norm);
        out.cpdr += options.cpdr_weight * cpdr.loss;
        out.grad_z.row(i) += (options.cpdr_weight * inv_n) * cpdr.grad.transpose();
      }
    }
  }
  out.ce *= inv_n;
  out.rpcl *= inv_n;
  out.cpdr *= inv_n;
  out.total = out.ce + out.rpcl + out.cpdr;
  if (!std::isfinite(out.total)) throw Error(ErrorCode::kNonfiniteGradient, "loss is not finite");
  return out;
}

LossBreakdown total_loss(const FeatureBatch& batch, const RelationalSet* relational,
                         const ConsistentSet* consistent, const SimilarityContext* context,
                         const Parameters& params, const LossOptions& options) {
  return total_loss(batch, forward_logits(params, batch.z), relational, consistent, context, options);
}

}  // namespace fedsc
