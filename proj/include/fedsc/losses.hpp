#pragma once

#include <string_view>

#include "fedsc/model.hpp"
#include "fedsc/prototypes.hpp"

namespace fedsc {

/// Per relational prototype normalizer U (mean distance from the client's
/// features to that prototype) and the contrastive temperature.
struct SimilarityContext {
  Matrix normalizers;  // num_classes x num_clients, zero where invalid
  double temperature = 0.05;
};

enum class CpdrNorm { kL1, kL2 };

std::string_view to_string(CpdrNorm norm);

struct LossOptions {
  CpdrNorm cpdr_norm = CpdrNorm::kL1;
  double ce_weight = 1.0;
  double rpcl_weight = 1.0;
  double cpdr_weight = 1.0;
  // Samples whose class has no prototype (or no negatives) contribute no
  // RPCL/CPDR term instead of raising.
  bool skip_unsupported = false;
};

struct LossAndGrad {
  double loss = 0.0;
  Vector grad;
};

/// Batch-mean loss terms. Components are reported after weighting, so
/// total == ce + rpcl + cpdr. Gradients already carry the 1/n factor.
struct LossBreakdown {
  double ce = 0.0;
  double rpcl = 0.0;
  double cpdr = 0.0;
  double total = 0.0;
  Matrix grad_z;       // n x d, RPCL + CPDR
  Matrix grad_logits;  // n x num_classes, CE
};

/// cos(z, r) / U.
double similarity(const Vector& z, const Vector& r, double normalizer);

SimilarityContext compute_normalizers(const Matrix& epoch_features, const RelationalSet& relational,
                                      double temperature);

/// Contrastive loss of one feature against every valid relational prototype:
/// positives are all clients' prototypes of `label`, negatives all others.
LossAndGrad rpcl_loss_and_grad(const Vector& z, int label, const RelationalSet& relational,
                               const SimilarityContext& context);

LossAndGrad cpdr_loss_and_grad(const Vector& z, int label, const ConsistentSet& consistent,
                               CpdrNorm norm = CpdrNorm::kL1);

LossAndGrad ce_loss_and_grad(const Vector& logits, int label);

/// Null prototype pointers disable the corresponding term.
LossBreakdown total_loss(const FeatureBatch& batch, const Matrix& logits,
                         const RelationalSet* relational, const ConsistentSet* consistent,
                         const SimilarityContext* context, const LossOptions& options = {});

/// Convenience overload that runs the classifier on batch.z.
LossBreakdown total_loss(const FeatureBatch& batch, const RelationalSet* relational,
                         const ConsistentSet* consistent, const SimilarityContext* context,
                         const Parameters& params, const LossOptions& options = {});

}  // namespace fedsc
