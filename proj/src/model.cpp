#include "fedsc/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "fedsc/error.hpp"

namespace fedsc {

namespace {

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols)
    throw Error(ErrorCode::kShapeMismatch, std::string(what) + " is " + shape_str(m.rows(), m.cols()) +
                                               ", expected " + shape_str(rows, cols));
}

template <typename Fn>
void visit_entries(const Parameters& p, Fn&& fn) {
  auto matrix = [&](const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) fn(m(i, j));
  };
  auto vector = [&](const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) fn(v(i));
  };
  matrix(p.w1); vector(p.b1); matrix(p.w2); vector(p.b2); matrix(p.v); vector(p.c);
}

template <typename Fn>
void visit_entries_mut(Parameters& p, Fn&& fn) {
  auto matrix = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) fn(m(i, j));
  };
  auto vector = [&](Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) fn(v(i));
  };
  matrix(p.w1); vector(p.b1); matrix(p.w2); vector(p.b2); matrix(p.v); vector(p.c);
}

}  // namespace

Parameters Parameters::zeros(const ModelShape& s) {
  const auto in = static_cast<Eigen::Index>(s.input_dim);
  const auto h = static_cast<Eigen::Index>(s.hidden_dim);
  const auto d = static_cast<Eigen::Index>(s.feature_dim);
  const auto k = static_cast<Eigen::Index>(s.num_classes);
  return {Matrix::Zero(h, in), Vector::Zero(h), Matrix::Zero(d, h),
          Vector::Zero(d),     Matrix::Zero(k, d), Vector::Zero(k)};
}

ModelShape Parameters::shape() const {
  return {static_cast<std::size_t>(w1.cols()), static_cast<std::size_t>(w1.rows()),
          static_cast<std::size_t>(w2.rows()), static_cast<std::size_t>(v.rows())};
}

std::size_t Parameters::size() const {
  return extractor_size() + static_cast<std::size_t>(v.size() + c.size());
}

std::size_t Parameters::extractor_size() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
}

Vector Parameters::flatten() const {
  Vector out(static_cast<Eigen::Index>(size()));
  Eigen::Index i = 0;
  visit_entries(*this, [&](double x) { out(i++) = x; });
  return out;
}

Parameters Parameters::unflatten(const ModelShape& shape, const Vector& flat) {
  Parameters p = zeros(shape);
  if (static_cast<std::size_t>(flat.size()) != p.size())
    throw Error(ErrorCode::kShapeMismatch, "flat vector has " + std::to_string(flat.size()) +
                                               " entries, expected " + std::to_string(p.size()));
  Eigen::Index i = 0;
  visit_entries_mut(p, [&](double& x) { x = flat(i++); });
  return p;
}

bool Parameters::all_finite() const {
  return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite() && v.allFinite() &&
         c.allFinite();
}

bool Parameters::operator==(const Parameters& o) const {
  auto same = [](const auto& a, const auto& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
  };
  return same(w1, o.w1) && same(b1, o.b1) && same(w2, o.w2) && same(b2, o.b2) && same(v, o.v) &&
         same(c, o.c);
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "weight_decay must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
}

ModelParams init_params(std::size_t input_dim, std::size_t hidden_dim, std::size_t feature_dim,
                        std::size_t num_classes, std::uint64_t seed) {
  if (input_dim == 0 || hidden_dim == 0 || feature_dim == 0 || num_classes == 0)
    throw Error(ErrorCode::kInvalidArgument, "model dimensions must be positive");
  const ModelShape shape{input_dim, hidden_dim, feature_dim, num_classes};
  ModelParams params{Parameters::zeros(shape), Parameters::zeros(shape)};

  std::mt19937_64 rng(seed);
  auto fill = [&](Matrix& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
  };
  fill(params.weights.w1);
  fill(params.weights.w2);
  fill(params.weights.v);
  return params;
}

Matrix gather_inputs(const Dataset& data, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(data.dim));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto x = data.row(rows[r]);
    for (std::size_t q = 0; q < data.dim; ++q)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) = x[q];
  }
  return out;
}

Matrix gather_inputs(const Dataset& data) {
  Matrix out(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(data.dim));
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto x = data.row(r);
    for (std::size_t q = 0; q < data.dim; ++q)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) = x[q];
  }
  return out;
}

FeatureBatch forward_features(const Parameters& params, const Matrix& inputs,
                              std::vector<int> labels) {
  if (inputs.cols() != params.w1.cols())
    throw Error(ErrorCode::kDimensionMismatch,
                "input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                    std::to_string(params.w1.cols()));
  FeatureBatch batch;
  batch.inputs = inputs;
  batch.pre_hidden = (inputs * params.w1.transpose()).rowwise() + params.b1.transpose();
  batch.z = (batch.pre_hidden.cwiseMax(0.0) * params.w2.transpose()).rowwise() +
            params.b2.transpose();
  batch.labels = std::move(labels);
  return batch;
}

Matrix forward_logits(const Parameters& params, const Matrix& z) {
  if (z.cols() != params.v.cols())
    throw Error(ErrorCode::kDimensionMismatch,
                "features have " + std::to_string(z.cols()) + " columns, classifier expects " +
                    std::to_string(params.v.cols()));
  return (z * params.v.transpose()).rowwise() + params.c.transpose();
}

Gradients backward(const Parameters& params, const FeatureBatch& batch, const Matrix& grad_z,
                   const Matrix& grad_logits) {
  const Eigen::Index n = batch.z.rows();
  const Eigen::Index d = batch.z.cols();
  const Eigen::Index k = params.v.rows();
  const bool has_z = grad_z.size() != 0;
  const bool has_logits = grad_logits.size() != 0;
  if (has_z) require_shape(grad_z, n, d, "grad_z");
  if (has_logits) require_shape(grad_logits, n, k, "grad_logits");

  Gradients g = Parameters::zeros(params.shape());
  Matrix dz = has_z ? grad_z : Matrix::Zero(n, d);
  if (has_logits) {
    g.v = grad_logits.transpose() * batch.z;
    g.c = grad_logits.colwise().sum().transpose();
    dz += grad_logits * params.v;
  }
  const Matrix hidden = batch.pre_hidden.cwiseMax(0.0);
  g.w2 = dz.transpose() * hidden;
  g.b2 = dz.colwise().sum().transpose();
  // ReLU subgradient at exactly 0 is taken as 0.
  const Matrix dh = (dz * params.w2).cwiseProduct(
      (batch.pre_hidden.array() > 0.0).cast<double>().matrix());
  g.w1 = dh.transpose() * batch.inputs;
  g.b1 = dh.colwise().sum().transpose();
  return g;
}

void sgd_step(ModelParams& params, const Gradients& grads, const OptimizerConfig& config) {
  if (grads.shape() != params.shape())
    throw Error(ErrorCode::kShapeMismatch, "gradient shape does not match parameters");
  if (!grads.all_finite()) throw Error(ErrorCode::kNonfiniteGradient, "gradient contains NaN or Inf");
  const double lr = config.learning_rate;
  const double mu = config.momentum;
  const double wd = config.weight_decay;
  auto update = [&](auto& p, auto& buf, const auto& g) {
    buf = mu * buf + (g + wd * p);
    p -= lr * buf;
  };
  auto& w = params.weights;
  auto& m = params.momentum;
  update(w.w1, m.w1, grads.w1);
  update(w.b1, m.b1, grads.b1);
  update(w.w2, m.w2, grads.w2);
  update(w.b2, m.b2, grads.b2);
  update(w.v, m.v, grads.v);
  update(w.c, m.c, grads.c);
  if (!w.all_finite()) throw Error(ErrorCode::kNonfiniteGradient, "update produced NaN or Inf weights");
}

double accuracy(const Parameters& params, const Dataset& data) {
  if (data.empty()) return 0.0;
  const Matrix logits = forward_logits(params, forward_features(params, gather_inputs(data)).z);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == data.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void save_params(const Parameters& params, const std::filesystem::path& path) {
  const auto s = params.shape();
  detail::ByteWriter w;
  w.magic("FSP1");
  w.u32(static_cast<std::uint32_t>(s.input_dim));
  w.u32(static_cast<std::uint32_t>(s.hidden_dim));
  w.u32(static_cast<std::uint32_t>(s.feature_dim));
  w.u32(static_cast<std::uint32_t>(s.num_classes));
  visit_entries(params, [&](double x) { w.f32(static_cast<float>(x)); });
  w.write_to(path.string());
}

Parameters load_params(const std::filesystem::path& path) {
  detail::ByteReader r(path.string());
  if (!r.has_magic("FSP1") || r.remaining() < 16)
    throw Error(ErrorCode::kMalformedHeader, path.string() + ": missing FSP1 header");
  ModelShape s;
  s.input_dim = r.u32();
  s.hidden_dim = r.u32();
  s.feature_dim = r.u32();
  s.num_classes = r.u32();
  Parameters p = Parameters::zeros(s);
  if (r.remaining() < 4 * p.size())
    throw Error(ErrorCode::kTruncatedFile, path.string() + ": parameter payload is short");
  if (r.remaining() > 4 * p.size())
    throw Error(ErrorCode::kDimensionMismatch, path.string() + ": payload larger than declared dims");
  visit_entries_mut(p, [&](double& x) { x = r.f32(); });
  return p;
}

}  // namespace fedsc
