#include "fedsc/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "fedsc/error.hpp"

namespace fedsc {

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& dataset) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(dataset.num_classes));
  for (std::size_t i = 0; i < dataset.size(); ++i)
    out[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
  return out;
}

Dataset subset(const Dataset& dataset, std::vector<std::size_t> indices) {
  std::sort(indices.begin(), indices.end());
  Dataset out(dataset.dim, dataset.num_classes);
  out.features.reserve(indices.size() * dataset.dim);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.append_from(dataset, i);
  return out;
}

std::vector<ClientDataset> to_clients(const Dataset& dataset,
                                      const std::vector<std::vector<std::size_t>>& assignment) {
  std::vector<ClientDataset> clients;
  clients.reserve(assignment.size());
  for (std::size_t k = 0; k < assignment.size(); ++k)
    clients.emplace_back(static_cast<int>(k), subset(dataset, assignment[k]));
  return clients;
}

// Counts summing exactly to `total`: floor shares, then the leftover units go
// to the largest fractional remainders (lower index first on ties).
std::vector<std::size_t> largest_remainder(const std::vector<double>& proportions,
                                           std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> remainder(n);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double exact = proportions[k] * static_cast<double>(total);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    remainder[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[order[i % n]];
  // Overshoot is only reachable through floating error in the proportions.
  for (; assigned > total; --assigned) --*std::max_element(counts.begin(), counts.end());
  return counts;
}

std::vector<double> sample_dirichlet(std::size_t k, double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // All draws underflowed (tiny alpha); fall back to a uniformly chosen vertex.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace

void Dataset::push_back(std::span<const float> x, int label) {
  if (x.size() != dim)
    throw Error(ErrorCode::kDimensionMismatch,
                "sample has " + std::to_string(x.size()) + " features, expected " +
                    std::to_string(dim));
  if (label < 0 || label >= num_classes)
    throw Error(ErrorCode::kInvalidArgument, "label " + std::to_string(label) + " out of range");
  features.insert(features.end(), x.begin(), x.end());
  labels.push_back(label);
}

void Dataset::append_from(const Dataset& other, std::size_t i) {
  auto x = other.row(i);
  features.insert(features.end(), x.begin(), x.end());
  labels.push_back(other.labels[i]);
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

void Dataset::validate() const {
  if (num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "num_classes must be >= 1");
  if (features.size() != labels.size() * dim)
    throw Error(ErrorCode::kDimensionMismatch, "feature buffer does not match dim x size");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw Error(ErrorCode::kInvalidArgument, "label " + std::to_string(y) + " out of range");
}

ClientDataset::ClientDataset(int client_id, Dataset data)
    : client_id_(client_id), data_(std::move(data)) {
  if (data_.empty())
    throw Error(ErrorCode::kEmptyClient, "client " + std::to_string(client_id) + " has no samples");
  class_counts_ = data_.class_counts();
}

void PartitionConfig::validate() const {
  if (num_clients < 2) throw Error(ErrorCode::kInvalidArgument, "num_clients must be >= 2");
  if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidArgument, "alpha must be > 0");
  if (!(rho >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "rho must be >= 1");
  if (inner_scheme == PartitionScheme::kLongTailed)
    throw Error(ErrorCode::kInvalidArgument, "inner scheme cannot itself be long_tailed");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "holdout_fraction must lie in (0, 1)");
}

Dataset generate_gaussian_blobs(int num_classes, std::size_t per_class_count, std::size_t dim,
                                double separation, std::uint64_t seed) {
  if (num_classes < 2) throw Error(ErrorCode::kInvalidArgument, "num_classes must be >= 2");
  if (per_class_count < 1) throw Error(ErrorCode::kInvalidArgument, "per_class_count must be >= 1");
  if (dim < 2) throw Error(ErrorCode::kInvalidArgument, "dim must be >= 2");
  if (!(separation > 0.0)) throw Error(ErrorCode::kInvalidArgument, "separation must be > 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Unit noise. Means ~ N(0, separation^2/dim I) so the typical pairwise
  // distance is separation*sqrt(2); draws closer than `separation` to an
  // earlier mean are rejected.
  const double mean_scale = separation / std::sqrt(static_cast<double>(dim));
  std::vector<std::vector<double>> means;
  while (means.size() < static_cast<std::size_t>(num_classes)) {
    std::vector<double> candidate(dim);
    for (auto& v : candidate) v = mean_scale * normal(rng);
    const bool far_enough = std::all_of(means.begin(), means.end(), [&](const auto& m) {
      double sq = 0.0;
      for (std::size_t q = 0; q < dim; ++q) sq += (m[q] - candidate[q]) * (m[q] - candidate[q]);
      return std::sqrt(sq) >= separation;
    });
    if (far_enough) means.push_back(std::move(candidate));
  }

  Dataset out(dim, num_classes);
  out.features.reserve(static_cast<std::size_t>(num_classes) * per_class_count * dim);
  out.labels.reserve(static_cast<std::size_t>(num_classes) * per_class_count);
  std::vector<float> x(dim);
  for (int j = 0; j < num_classes; ++j) {
    for (std::size_t i = 0; i < per_class_count; ++i) {
      for (std::size_t q = 0; q < dim; ++q)
        x[q] = static_cast<float>(means[static_cast<std::size_t>(j)][q] + normal(rng));
      out.push_back(x, j);
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& dataset, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "split fraction must lie in (0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep, held;
  for (auto& idx : indices_by_class(dataset)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) n_held = std::clamp<std::size_t>(n_held, 1, idx.size() - 1);
    else n_held = 0;
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    keep.insert(keep.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
  }
  return {subset(dataset, std::move(keep)), subset(dataset, std::move(held))};
}

std::vector<ClientDataset> partition_dirichlet(const Dataset& dataset, int num_clients,
                                               double alpha, std::uint64_t seed) {
  if (num_clients < 1) throw Error(ErrorCode::kInvalidArgument, "num_clients must be >= 1");
  if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidArgument, "alpha must be > 0");
  if (static_cast<std::size_t>(num_clients) > dataset.size())
    throw Error(ErrorCode::kInvalidArgument, "more clients than samples");
  const auto k_count = static_cast<std::size_t>(num_clients);

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> assignment(k_count);
  for (auto& idx : indices_by_class(dataset)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = largest_remainder(sample_dirichlet(k_count, alpha, rng), idx.size());
    std::size_t offset = 0;
    for (std::size_t k = 0; k < k_count; ++k) {
      assignment[k].insert(assignment[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(offset),
                           idx.begin() + static_cast<std::ptrdiff_t>(offset + counts[k]));
      offset += counts[k];
    }
  }

  // Empty-client repair: move one sample from the currently largest client.
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!assignment[k].empty()) continue;
    std::size_t donor = 0;
    for (std::size_t q = 1; q < k_count; ++q)
      if (assignment[q].size() > assignment[donor].size()) donor = q;
    auto& from = assignment[donor];
    auto it = std::max_element(from.begin(), from.end());
    assignment[k].push_back(*it);
    from.erase(it);
  }
  return to_clients(dataset, assignment);
}

std::vector<ClientDataset> partition_biased(const Dataset& dataset, int num_clients,
                                            std::uint64_t seed, double holdout_fraction) {
  if (num_clients < 2) throw Error(ErrorCode::kInvalidArgument, "num_clients must be >= 2");
  const int biased = num_clients - 1;
  if (dataset.num_classes % biased != 0)
    throw Error(ErrorCode::kInvalidArgument,
                std::to_string(dataset.num_classes) + " classes cannot be split evenly over " +
                    std::to_string(biased) + " biased clients");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw Error(ErrorCode::kInvalidArgument, "holdout_fraction must lie in (0, 1)");
  const int block = dataset.num_classes / biased;

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> assignment(static_cast<std::size_t>(num_clients));
  auto& full_client = assignment.back();
  auto by_class = indices_by_class(dataset);
  for (std::size_t j = 0; j < by_class.size(); ++j) {
    auto& idx = by_class[j];
    if (idx.empty()) continue;
    std::shuffle(idx.begin(), idx.end(), rng);
    // The full client's slice is drawn first; both sides keep at least one
    // sample when the class has two or more.
    auto n_held = static_cast<std::size_t>(std::ceil(holdout_fraction * static_cast<double>(idx.size())));
    n_held = idx.size() >= 2 ? std::clamp<std::size_t>(n_held, 1, idx.size() - 1) : 0;
    full_client.insert(full_client.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    auto& owner = assignment[j / static_cast<std::size_t>(block)];
    owner.insert(owner.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
  }
  return to_clients(dataset, assignment);
}

std::vector<std::size_t> long_tail_profile(std::size_t n_max, int num_classes, double rho) {
  if (!(rho >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "rho must be >= 1");
  if (num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "num_classes must be >= 1");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), n_max);
  if (num_classes == 1) return counts;
  for (int j = 0; j < num_classes; ++j) {
    const double exponent = -static_cast<double>(j) / static_cast<double>(num_classes - 1);
    // The epsilon absorbs pow() error on exact integers such as 500 * 100^-1.
    const double exact = static_cast<double>(n_max) * std::pow(rho, exponent);
    counts[static_cast<std::size_t>(j)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
  }
  if (counts.back() < 1)
    throw Error(ErrorCode::kInvalidArgument, "long-tail profile leaves a class with no samples");
  return counts;
}

Dataset apply_long_tail(const Dataset& dataset, double rho, std::uint64_t seed) {
  auto by_class = indices_by_class(dataset);
  const std::size_t n_max = by_class.empty() ? 0 : by_class.front().size();
  for (const auto& idx : by_class)
    if (idx.size() != n_max)
      throw Error(ErrorCode::kInvalidArgument, "long-tail transform requires a class-balanced dataset");
  const auto counts = long_tail_profile(n_max, dataset.num_classes, rho);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < by_class.size(); ++j) {
    auto& idx = by_class[j];
    if (counts[j] < idx.size()) std::shuffle(idx.begin(), idx.end(), rng);
    kept.insert(kept.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(counts[j]));
  }
  return subset(dataset, std::move(kept));
}

std::vector<ClientDataset> partition(const Dataset& dataset, const PartitionConfig& config) {
  config.validate();
  auto dispatch = [&](PartitionScheme scheme, const Dataset& data) {
    if (scheme == PartitionScheme::kBiased)
      return partition_biased(data, config.num_clients, config.seed, config.holdout_fraction);
    return partition_dirichlet(data, config.num_clients, config.alpha, config.seed);
  };
  if (config.scheme == PartitionScheme::kLongTailed)
    return dispatch(config.inner_scheme, apply_long_tail(dataset, config.rho, config.seed));
  return dispatch(config.scheme, dataset);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  detail::ByteWriter w;
  w.magic("FSD1");
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  w.u32(static_cast<std::uint32_t>(dataset.dim));
  w.u32(static_cast<std::uint32_t>(dataset.num_classes));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (float v : dataset.row(i)) w.f32(v);
    w.u32(static_cast<std::uint32_t>(dataset.labels[i] + 1));
  }
  w.write_to(path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  detail::ByteReader r(path.string());
  if (!r.has_magic("FSD1")) throw Error(ErrorCode::kMalformedHeader, path.string() + ": missing FSD1 magic");
  if (r.remaining() < 12) throw Error(ErrorCode::kMalformedHeader, path.string() + ": short header");
  const std::uint32_t n = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint32_t classes = r.u32();
  if (dim == 0 || classes == 0)
    throw Error(ErrorCode::kMalformedHeader, path.string() + ": zero dim or class count");

  const std::size_t row_bytes = 4 * (static_cast<std::size_t>(dim) + 1);
  const std::size_t need = row_bytes * n;
  if (r.remaining() < need)
    throw Error(ErrorCode::kTruncatedFile, path.string() + ": header declares " + std::to_string(n) +
                                                " samples but only " +
                                                std::to_string(r.remaining() / row_bytes) + " rows present");
  if (r.remaining() > need)
    throw Error(ErrorCode::kDimensionMismatch,
                path.string() + ": payload size disagrees with declared dim " + std::to_string(dim));

  Dataset out(dim, static_cast<int>(classes));
  out.features.reserve(static_cast<std::size_t>(n) * dim);
  out.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t q = 0; q < dim; ++q) out.features.push_back(r.f32());
    const std::uint32_t label = r.u32();
    if (label < 1 || label > classes)
      throw Error(ErrorCode::kLabelOutOfRange,
                  path.string() + ": label " + std::to_string(label) + " at row " + std::to_string(i));
    out.labels.push_back(static_cast<int>(label) - 1);
  }
  return out;
}

}  // namespace fedsc
