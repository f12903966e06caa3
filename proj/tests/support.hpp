#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <array>
#include <vector>

#include "mop/graph.hpp"
#include "mop/matrix.hpp"
#include "mop/model.hpp"
#include "mop/motif.hpp"
#include "mop/util.hpp"

namespace mop::testing {

/// Users 0..nu-1 and items 0..ni-1, each edge present with probability p.
DomainGraph random_bipartite(Rng& rng, std::size_t nu, std::size_t ni, double p, int domain = 0);

/// Sorted node quadruples {u1, u2, i1, i2} found by exhaustive enumeration.
std::vector<std::array<node_t, 4>> brute_force_butterflies(const DomainGraph& g);
/// Every butterfly stored in a dictionary, as sorted quadruples (duplicates kept).
std::vector<std::array<node_t, 4>> flatten_butterflies(const ButterflyDict& dict);

/// Gauss-Jordan inverse with partial pivoting.
std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a);

/// Dense Dv^-1 H W De^-1 H^T with W = I, built from raw hyperedge node lists.
Matrix dense_propagation(std::size_t n, const std::vector<std::vector<node_t>>& edges);
Matrix dense_matmul(const Matrix& a, const Matrix& b);
Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Two small domains with three shared users and a planted two-block structure.
struct TinyWorld {
  std::vector<DomainGraph> graphs;
  OverlapRegistry registry;
  Universe universe;
};
TinyWorld tiny_world(std::uint64_t seed = 1, std::size_t users = 12, std::size_t items = 10);

TrainConfig tiny_config();
MopModel tiny_model(const TrainConfig& cfg, std::uint64_t world_seed = 1);

}  // namespace mop::testing

namespace mop::testing {

/// Central-difference check of tables -> hypergraph convolution -> MoDE ->
/// prompted readout -> InfoNCE on a small two-domain model (d = 8) with
/// random, trainable prompts of domain 0.
ad::GradCheckResult composite_grad_check(std::uint64_t seed, PromptMode mode, std::size_t coords_per_tensor = 16);

}  // namespace mop::testing
