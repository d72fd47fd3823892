#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedsc {

/// Labeled feature vectors stored row-major. Labels are 0-based class
/// indices in [0, num_classes); the on-disk format stores them 1-based.
struct Dataset {
  std::size_t dim = 0;
  int num_classes = 0;
  std::vector<float> features;
  std::vector<int> labels;

  Dataset() = default;
  Dataset(std::size_t dim, int num_classes) : dim(dim), num_classes(num_classes) {}

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const float> row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  void push_back(std::span<const float> x, int label);

  /// Appends sample `i` of `other`, which must share dim and num_classes.
  void append_from(const Dataset& other, std::size_t i);

  std::vector<std::size_t> class_counts() const;

  /// Throws kInvalidArgument / kDimensionMismatch when an invariant is broken.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

/// One client's shard. Construction rejects empty shards.
class ClientDataset {
 public:
  ClientDataset(int client_id, Dataset data);

  int client_id() const noexcept { return client_id_; }
  const Dataset& data() const noexcept { return data_; }
  const std::vector<std::size_t>& class_counts() const noexcept { return class_counts_; }
  std::size_t total() const noexcept { return data_.size(); }

 private:
  int client_id_;
  Dataset data_;
  std::vector<std::size_t> class_counts_;
};

enum class PartitionScheme { kDirichlet, kBiased, kLongTailed };

struct PartitionConfig {
  PartitionScheme scheme = PartitionScheme::kDirichlet;
  double alpha = 0.2;
  double rho = 1.0;
  // Partition applied after the long-tail transform when scheme is kLongTailed.
  PartitionScheme inner_scheme = PartitionScheme::kDirichlet;
  int num_clients = 10;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset generate_gaussian_blobs(int num_classes, std::size_t per_class_count, std::size_t dim,
                                double separation, std::uint64_t seed);

/// Splits `fraction` of every class (at least one sample when the class has
/// two or more) into the second dataset. Used for the held-out test split.
std::pair<Dataset, Dataset> split_per_class(const Dataset& dataset, double fraction,
                                            std::uint64_t seed);

std::vector<ClientDataset> partition_dirichlet(const Dataset& dataset, int num_clients,
                                               double alpha, std::uint64_t seed);

std::vector<ClientDataset> partition_biased(const Dataset& dataset, int num_clients,
                                            std::uint64_t seed, double holdout_fraction = 0.1);

/// Class j keeps floor(n_max * rho^(-j/(C-1))) samples.
Dataset apply_long_tail(const Dataset& dataset, double rho, std::uint64_t seed);

/// Per-class sample counts produced by apply_long_tail.
std::vector<std::size_t> long_tail_profile(std::size_t n_max, int num_classes, double rho);

std::vector<ClientDataset> partition(const Dataset& dataset, const PartitionConfig& config);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace fedsc
