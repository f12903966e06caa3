#include "mop/model.hpp"

#include <algorithm>

namespace mop {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("heads must divide dim");
  if (mode_layers == 0) throw ConfigError("mode_layers must be at least 1");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  check_lambda1(lambda1);
  if (!(lr >= 0.0) || !(tune_lr >= 0.0) || !(gt_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (batch < 2) throw ConfigError("batch must be at least 2");
  if (negatives == 0) throw ConfigError("negatives must be positive");
  if (motif_budget == 0) throw ConfigError("motif budget must be positive");
  if (!(lambda_f > 0.0)) throw ConfigError("lambda_f must be positive");
  if (!(gt_tau > 0.0)) throw ConfigError("gt_tau must be positive");
  for (auto len : walk_lengths) {
    if (len < 2) throw ConfigError("walk lengths must be at least 2");
  }
}

void MotifBatch::begin_node(node_t central) {
  centrals.push_back(central);
  node_offsets.push_back(motif_offsets.size() - 1);
}

void MotifBatch::add_motif(const MotifInstance& motif, int masked, std::uint32_t mask_row) {
  for (std::size_t j = 0; j < motif.nodes.size(); ++j) {
    rows.push_back(static_cast<int>(j) == masked ? mask_row : motif.nodes[j]);
  }
  motif_offsets.push_back(rows.size());
  node_offsets.back() = motif_offsets.size() - 1;
}

namespace {

HypergraphIncidence empty_incidence(std::size_t n) {
  HypergraphIncidence inc;
  inc.num_nodes = n;
  inc.node_offsets.assign(n + 1, 0);
  inc.node_degree.assign(n, 0.0);
  return inc;
}

Matrix gaussian(std::size_t r, std::size_t c, double sd, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace

MopModel::MopModel(std::vector<DomainGraph> graphs, Universe universe, TrainConfig config)
    : config_(std::move(config)), graphs_(std::move(graphs)), universe_(std::move(universe)) {
  config_.validate();
  MotifPoolConfig pc;
  pc.selection = config_.motif;
  pc.walk_lengths = config_.walk_lengths;
  pc.budget = config_.motif_budget;
  pc.lambda_f = config_.lambda_f;
  pc.seed = stream_seed(config_.seed, {0x6d6f74ULL});
  pc.threads = config_.threads;
  IncidenceOptions io;
  io.merge_shared_pairs = config_.merge_hyperedges;
  for (const auto& g : graphs_) {
    pools_.push_back(build_motif_pool(g, pc));
    const auto& motifs = pools_.back().motifs;
    HypergraphIncidence inc = motifs.empty() ? empty_incidence(g.num_nodes()) : build_incidence(motifs, g, io);
    ops_.emplace_back(std::move(inc), config_.hyper_layers, ZeroDegreePolicy::passthrough);
    std::vector<std::uint32_t> rows(g.num_nodes());
    for (node_t v = 0; v < g.num_nodes(); ++v) {
      const auto gid = g.global_id(v);
      if (gid == kNoGlobalId) throw ValidationError("graph has no global ids assigned");
      rows[v] = static_cast<std::uint32_t>(universe_.shared_row(g.kind(v), gid));
    }
    shared_rows_.push_back(std::move(rows));
  }
  mode_.dim = config_.dim;
  mode_.heads = config_.heads;
  mode_.layers = config_.mode_layers;
  mode_.hidden = 2 * config_.dim;
  mode_.domains = domain_ids();
}

std::vector<int> MopModel::domain_ids() const {
  std::vector<int> out;
  for (const auto& g : graphs_) out.push_back(g.domain_id());
  return out;
}

std::size_t MopModel::domain_index(int domain_id) const {
  for (std::size_t k = 0; k < graphs_.size(); ++k) {
    if (graphs_[k].domain_id() == domain_id) return k;
  }
  throw LookupError("unknown domain " + std::to_string(domain_id));
}

void MopModel::init_params() {
  store_ = ad::ParamStore();
  Rng rng(stream_seed(config_.seed, {0x696e6974ULL}));
  const std::size_t d = config_.dim;
  store_.add(shared_table(), gaussian(universe_.num_nodes(), d, config_.init_scale, rng));
  for (const auto& g : graphs_) {
    store_.add(specific_table(g.domain_id()), gaussian(g.num_nodes(), d, config_.init_scale, rng));
  }
  store_.add(mask_token(), gaussian(1, d, config_.init_scale, rng));
  init_mode_params(store_, mode_, rng);
  init_prompt_params(store_, d, domain_ids());
}

std::vector<std::string> MopModel::encoder_param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : store_.tensors()) {
    if (name.rfind("prompt.", 0) != 0) out.push_back(name);
  }
  return out;
}

RouteTag MopModel::route(std::size_t k, Context ctx) const {
  return ctx == Context::shared ? RouteTag::shared() : RouteTag::specific(graphs_.at(k).domain_id());
}

ad::Var MopModel::convolved(ad::Tape& tape, std::size_t k, Context ctx) {
  ad::Var x0 = ctx == Context::shared
                   ? ad::gather_rows(tape.param(store_, shared_table()), shared_rows_.at(k))
                   : tape.param(store_, specific_table(graphs_.at(k).domain_id()));
  const HypergraphOperator* op = &ops_.at(k);
  return ad::linear_map(
      x0, [op](const Matrix& m) { return op->apply(m); }, [op](const Matrix& m) { return op->apply_transpose(m); });
}

ad::Var MopModel::embed(ad::Tape& tape, std::size_t k, Context ctx, ad::Var x, ad::Var mask, const MotifBatch& batch,
                        const PromptVars& prompts) {
  ad::Var table = ad::concat_rows(x, mask);
  ad::Var t0 = ad::gather_rows(table, batch.rows);
  ad::Var t = encode_motif(tape, store_, mode_, t0, batch.motif_offsets, route(k, ctx));
  ad::Var central = ad::gather_rows(x, batch.centrals);
  return node_embedding(t, batch.motif_offsets, batch.node_offsets, central, prompts);
}

MotifBatch MopModel::pool_batch(std::size_t k, std::span<const node_t> nodes) const {
  const auto& pool = pools_.at(k);
  const auto mask_row = static_cast<std::uint32_t>(graphs_.at(k).num_nodes());
  MotifBatch batch;
  for (node_t v : nodes) {
    batch.begin_node(v);
    for (auto m : pool.by_central.at(v)) batch.add_motif(pool.motifs[m], -1, mask_row);
  }
  return batch;
}

EncodedCache MopModel::build_cache(std::size_t k, Context ctx) const {
  EncodedCache cache;
  auto& self = const_cast<MopModel&>(*this);
  {
    ad::Tape tape;
    cache.convolved = self.convolved(tape, k, ctx).value();
  }
  const auto& motifs = pools_.at(k).motifs;
  for (const auto& m : motifs) cache.motif_rows.push_back(cache.motif_rows.back() + m.nodes.size());
  cache.encoded = Matrix(cache.motif_rows.back(), config_.dim);
  const std::size_t chunk = 256;
  const std::size_t chunks = (motifs.size() + chunk - 1) / chunk;
  const RouteTag rt = route(k, ctx);
  parallel_for(chunks, config_.threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(motifs.size(), lo + chunk);
    Matrix t0(cache.motif_rows[hi] - cache.motif_rows[lo], config_.dim);
    std::vector<std::size_t> offsets{0};
    std::size_t r = 0;
    for (std::size_t m = lo; m < hi; ++m) {
      for (node_t v : motifs[m].nodes) {
        std::copy_n(cache.convolved.row(v).data(), config_.dim, t0.row(r++).data());
      }
      offsets.push_back(r);
    }
    ad::Tape tape;
    const Matrix out = encode_motif(tape, self.store_, mode_, tape.constant(std::move(t0)), offsets, rt).value();
    std::copy(out.values().begin(), out.values().end(),
              cache.encoded.values().begin() + static_cast<std::ptrdiff_t>(cache.motif_rows[lo] * config_.dim));
  });
  return cache;
}

ad::Var MopModel::cached_embedding(ad::Tape& tape, const EncodedCache& cache, std::size_t k,
                                   std::span<const node_t> nodes, const PromptVars& prompts) const {
  const auto& pool = pools_.at(k);
  const std::size_t d = config_.dim;
  std::vector<std::size_t> motif_offsets{0}, node_offsets{0};
  std::size_t total = 0;
  for (node_t v : nodes) {
    for (auto m : pool.by_central.at(v)) total += cache.motif_rows[m + 1] - cache.motif_rows[m];
  }
  Matrix rows(total, d), central(nodes.size(), d);
  std::size_t r = 0;
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    const node_t v = nodes[j];
    std::copy_n(cache.convolved.row(v).data(), d, central.row(j).data());
    for (auto m : pool.by_central[v]) {
      const std::size_t lo = cache.motif_rows[m], hi = cache.motif_rows[m + 1];
      std::copy(cache.encoded.data() + lo * d, cache.encoded.data() + hi * d, rows.row(r).data());
      r += hi - lo;
      motif_offsets.push_back(r);
    }
    node_offsets.push_back(motif_offsets.size() - 1);
  }
  return node_embedding(tape.constant(std::move(rows)), motif_offsets, node_offsets,
                        tape.constant(std::move(central)), prompts);
}

}  // namespace mop
