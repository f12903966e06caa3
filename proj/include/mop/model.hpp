#pragma once

// The motif-based encoder over a set of domains: embedding tables, one
// hypergraph operator per domain, the MoDE stack and the prompt parameters.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mop/autodiff.hpp"
#include "mop/graph.hpp"
#include "mop/hypergraph.hpp"
#include "mop/mode.hpp"
#include "mop/motif.hpp"
#include "mop/objectives.hpp"
#include "mop/readout.hpp"

namespace mop {

enum class OptimizerKind : std::uint8_t { sgd, adam };
const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t hyper_layers = 4;
  std::size_t mode_layers = 2;
  double tau = 0.5;
  double lambda1 = 0.5;
  double lr = 0.001;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::size_t batch = 64;
  std::size_t negatives = 4;
  Denominator denominator = Denominator::with_pos;

  MotifSelection motif = MotifSelection::butterfly;
  std::vector<std::size_t> walk_lengths{3, 6, 9};
  std::size_t motif_budget = 8;
  double lambda_f = 1.0;
  bool merge_hyperedges = false;

  PromptMode prompt = PromptMode::elementwise;
  double tune_lr = 0.001;
  std::size_t pretrain_epochs = 20;
  std::size_t tune_epochs = 30;
  std::size_t patience = 5;
  double init_scale = 0.1;

  // Ground-truth matrix factorisation used by embedding reconstruction.
  std::size_t gt_epochs = 30;
  double gt_lr = 0.01;
  double gt_tau = 0.2;

  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

/// Motifs of a set of nodes laid out for one encoder pass. Motif rows index
/// the convolved table; index `mask_row` selects the mask token.
struct MotifBatch {
  std::vector<std::uint32_t> rows;
  std::vector<std::size_t> motif_offsets{0};
  std::vector<std::size_t> node_offsets{0};
  std::vector<std::uint32_t> centrals;

  std::size_t num_nodes() const noexcept { return centrals.size(); }
  /// Appends a node with the given motifs. `masked` is a node position inside
  /// `motif` replaced by the mask token, or -1.
  void begin_node(node_t central);
  void add_motif(const MotifInstance& motif, int masked, std::uint32_t mask_row);
};

/// Values computed once with the encoder frozen: the convolved table of one
/// (domain, context) and every pool motif of that domain run through the
/// encoder.
struct EncodedCache {
  Matrix convolved;
  Matrix encoded;                       // stacked motif rows
  std::vector<std::size_t> motif_rows{0};  // motif m spans [motif_rows[m], motif_rows[m+1])
};

class MopModel {
 public:
  /// Graphs must already carry global ids for `universe`. Samples motif pools
  /// and builds the hypergraph operators; parameters are left empty.
  MopModel(std::vector<DomainGraph> graphs, Universe universe, TrainConfig config);

  /// Seeded initialisation of tables, mask token, encoder and identity prompts.
  void init_params();

  const TrainConfig& config() const noexcept { return config_; }
  std::size_t num_domains() const noexcept { return graphs_.size(); }
  std::vector<int> domain_ids() const;
  const DomainGraph& graph(std::size_t k) const { return graphs_.at(k); }
  const MotifPool& pool(std::size_t k) const { return pools_.at(k); }
  const HypergraphOperator& hyper(std::size_t k) const { return ops_.at(k); }
  const Universe& universe() const noexcept { return universe_; }
  const ModeSpec& mode_spec() const noexcept { return mode_; }
  /// Row of each local node of domain k in the shared table.
  const std::vector<std::uint32_t>& shared_rows(std::size_t k) const { return shared_rows_.at(k); }
  /// Index of a domain id in graph order.
  std::size_t domain_index(int domain_id) const;

  ad::ParamStore& params() noexcept { return store_; }
  const ad::ParamStore& params() const noexcept { return store_; }
  void set_params(ad::ParamStore store) { store_ = std::move(store); }

  /// "init", "pretrained" or "tuned".
  const std::string& stage() const noexcept { return stage_; }
  void set_stage(std::string stage) { stage_ = std::move(stage); }

  static std::string shared_table() { return "table.shared"; }
  static std::string specific_table(int domain) { return "table.d" + std::to_string(domain); }
  static std::string mask_token() { return "mask"; }
  /// Every tensor that is not a prompt.
  std::vector<std::string> encoder_param_names() const;

  /// Layer-averaged convolution of the (domain, context) table; gradient flows
  /// back into the table rows.
  ad::Var convolved(ad::Tape& tape, std::size_t k, Context ctx);
  /// Motif rows gathered from `x` (plus mask token), encoded on the route of
  /// (k, ctx), read out with `prompts` and assembled with the central rows.
  ad::Var embed(ad::Tape& tape, std::size_t k, Context ctx, ad::Var x, ad::Var mask, const MotifBatch& batch,
                const PromptVars& prompts);
  /// Batch holding every pool motif of each node.
  MotifBatch pool_batch(std::size_t k, std::span<const node_t> nodes) const;

  EncodedCache build_cache(std::size_t k, Context ctx) const;
  /// Embeddings (|nodes| x 2d) of domain-k nodes from a frozen-encoder cache,
  /// using the prompts in `prompts`.
  ad::Var cached_embedding(ad::Tape& tape, const EncodedCache& cache, std::size_t k,
                           std::span<const node_t> nodes, const PromptVars& prompts) const;

  RouteTag route(std::size_t k, Context ctx) const;

 private:
  TrainConfig config_;
  std::vector<DomainGraph> graphs_;
  Universe universe_;
  std::vector<MotifPool> pools_;
  std::vector<HypergraphOperator> ops_;
  std::vector<std::vector<std::uint32_t>> shared_rows_;
  ModeSpec mode_;
  ad::ParamStore store_;
  std::string stage_ = "init";
};

}  // namespace mop
