#pragma once

// Mixture-of-domain-experts transformer. Every layer shares its attention and
// layer norms across routes; the feed-forward sublayer dispatches to either
// the shared expert or the expert of one domain:
//   T' = MSA(LN1(T)) + T,   T_out = FFN_route(LN2(T')) + T'.
// No positional signal is injected, so the stack is permutation-equivariant
// within a motif.

#include <string>
#include <vector>

#include "mop/autodiff.hpp"
#include "mop/motif.hpp"
#include "mop/util.hpp"

namespace mop {

struct RouteTag {
  Context context = Context::shared;
  int domain_id = -1;

  static RouteTag shared() { return {Context::shared, -1}; }
  static RouteTag specific(int domain) { return {Context::specific, domain}; }
  std::string str() const;
};

struct ModeSpec {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::vector<int> domains;
  std::string prefix = "mode";

  /// Parameter name of layer `layer`, e.g. "mode.0.wq" or "mode.1.ffn.d0.w1".
  std::string name(std::size_t layer, const std::string& part) const;
  std::string expert(std::size_t layer, const RouteTag& route, const std::string& part) const;
  /// Throws RoutingError for a specific route naming an unknown domain.
  void check_route(const RouteTag& route) const;
};

/// Registers every layer's tensors. Projections use scaled Gaussian init,
/// layer norms start at gain 1 / bias 0 and biases at zero.
void init_mode_params(ad::ParamStore& store, const ModeSpec& spec, Rng& rng);

/// One layer over a stack of motifs: rows [offsets[s], offsets[s+1]) form
/// motif s and attend only to each other.
ad::Var mode_layer_forward(ad::Tape& tape, ad::ParamStore& store, const ModeSpec& spec,
                           std::size_t layer, ad::Var t_in, const std::vector<std::size_t>& offsets,
                           const RouteTag& route);

/// All layers in sequence.
ad::Var encode_motif(ad::Tape& tape, ad::ParamStore& store, const ModeSpec& spec, ad::Var t0,
                     const std::vector<std::size_t>& offsets, const RouteTag& route);

/// Single motif convenience form.
Matrix encode_motif(ad::ParamStore& store, const ModeSpec& spec, const Matrix& t0, const RouteTag& route);

}  // namespace mop
