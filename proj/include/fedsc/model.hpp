#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedsc/data.hpp"

namespace fedsc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelShape {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;

  bool operator==(const ModelShape&) const = default;
};

/// Extractor f(u) = w2 * relu(w1 x + b1) + b2 followed by the linear
/// classifier h(v) = v z + c. Matrices map column inputs, i.e. w1 is
/// hidden x input. Also used as the gradient and momentum container.
struct Parameters {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix v;
  Vector c;

  static Parameters zeros(const ModelShape& shape);

  ModelShape shape() const;
  std::size_t size() const;
  /// Number of leading entries of flatten() that belong to the extractor.
  std::size_t extractor_size() const;

  /// Declaration order: w1, b1, w2, b2, v, c; matrices row-major.
  Vector flatten() const;
  static Parameters unflatten(const ModelShape& shape, const Vector& flat);

  bool all_finite() const;

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(w1); fn(b1); fn(w2); fn(b2); fn(v); fn(c);
  }

  template <typename Fn>
  void for_each_pair(const Parameters& other, Fn&& fn) {
    fn(w1, other.w1); fn(b1, other.b1); fn(w2, other.w2);
    fn(b2, other.b2); fn(v, other.v); fn(c, other.c);
  }

  bool operator==(const Parameters& other) const;
};

using Gradients = Parameters;

struct ModelParams {
  Parameters weights;
  Parameters momentum;

  ModelShape shape() const { return weights.shape(); }
  /// Clears optimizer state; clients start every round with fresh buffers.
  void reset_momentum() { momentum = Parameters::zeros(shape()); }
};

/// Batch rows are samples. Activations are cached for backward().
struct FeatureBatch {
  Matrix inputs;      // n x input_dim
  Matrix pre_hidden;  // n x hidden_dim, before ReLU
  Matrix z;           // n x feature_dim
  std::vector<int> labels;

  std::size_t size() const { return static_cast<std::size_t>(z.rows()); }
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 64;

  void validate() const;
};

ModelParams init_params(std::size_t input_dim, std::size_t hidden_dim, std::size_t feature_dim,
                        std::size_t num_classes, std::uint64_t seed);

/// Gathers the selected rows of a dataset into an input matrix.
Matrix gather_inputs(const Dataset& data, std::span<const std::size_t> rows);
Matrix gather_inputs(const Dataset& data);

FeatureBatch forward_features(const Parameters& params, const Matrix& inputs,
                              std::vector<int> labels = {});
Matrix forward_logits(const Parameters& params, const Matrix& z);

/// Chain rule through the classifier and extractor. `grad_z` is the loss
/// gradient w.r.t. z excluding the classifier path; `grad_logits` is the loss
/// gradient w.r.t. the logits. Either may be an empty (0x0) matrix.
Gradients backward(const Parameters& params, const FeatureBatch& batch, const Matrix& grad_z,
                   const Matrix& grad_logits);

/// buf <- momentum*buf + (grad + wd*param); param <- param - lr*buf.
void sgd_step(ModelParams& params, const Gradients& grads, const OptimizerConfig& config);

/// Fraction of rows whose argmax logit equals the label.
double accuracy(const Parameters& params, const Dataset& data);

void save_params(const Parameters& params, const std::filesystem::path& path);
Parameters load_params(const std::filesystem::path& path);

}  // namespace fedsc
