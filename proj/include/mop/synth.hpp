#pragma once

// Planted-cluster multi-domain interaction generator.
//
// Every global user carries one latent cluster shared by all domains. Items of
// a domain are split into contiguous cluster blocks. A user draws a degree,
// then picks items without replacement: with probability `noise` from outside
// its cluster (uniformly), otherwise from its own block with Zipf weights of
// exponent `popularity` over a per-domain item order.

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "mop/graph.hpp"

namespace mop {

struct SynthSpec {
  std::size_t domains = 2;
  std::size_t users = 500;  // per domain
  std::size_t items = 300;  // per domain
  std::size_t clusters = 4;
  double overlap = 0.2;  // fraction of each domain's users shared by all domains
  double noise = 0.1;
  std::size_t min_degree = 10;
  std::size_t max_degree = 20;
  double popularity = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthDomain {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> interactions;
  std::vector<std::size_t> user_cluster;  // by external user id
  std::vector<std::size_t> item_cluster;  // by external item id
};

struct SynthDataset {
  SynthSpec spec;
  std::vector<SynthDomain> domains;
  /// Shared users of domains 0 and k, for every k >= 1.
  std::vector<std::vector<OverlapLink>> overlap;
};

SynthDataset generate_synthetic(const SynthSpec& spec);

/// Writes domain<k>.tsv, overlap_0_<k>.tsv and manifest.tsv into `dir`.
void write_synthetic(const std::filesystem::path& dir, const SynthDataset& data);

}  // namespace mop
