#include "mop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mop {

const char* to_string(Task t) { return t == Task::intra ? "intra" : "inter"; }

Task parse_task(const std::string& s) {
  if (s == "intra") return Task::intra;
  if (s == "inter") return Task::inter;
  throw ConfigError("unknown task '" + s + "'");
}

std::string epoch_line(const EpochRecord& r) {
  char buf[128];
  if (r.val_hr) {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f", r.epoch, r.loss, *r.val_hr);
  } else {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t-", r.epoch, r.loss);
  }
  return buf;
}

void Optimizer::step(ad::ParamStore& store) {
  if (kind_ == OptimizerKind::adam) {
    adam_.step(store);
  } else {
    ad::sgd_step(store, lr_);
  }
}

namespace {

Matrix gaussian(std::size_t r, std::size_t c, double sd, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.values()) v = dist(rng);
  return m;
}

std::size_t lower_median(std::vector<std::size_t> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

/// Uniform item (local node) of domain k not adjacent to user u.
node_t draw_negative(const DomainGraph& g, node_t u, Rng& rng) {
  if (g.degree(u) >= g.num_items()) throw SamplingError("user has interacted with every item");
  while (true) {
    const node_t i = g.item_node(uniform_index(rng, g.num_items()));
    if (!g.has_edge(u, i)) return i;
  }
}

PromptVars constant_prompts(ad::Tape& tape, const ad::ParamStore& store, int domain, Context ctx, PromptMode mode) {
  PromptVars v;
  v.mode = mode;
  v.vec = tape.constant(store.at(prompt_name(domain, ctx, "vec")).value);
  v.mat = tape.constant(store.at(prompt_name(domain, ctx, "mat")).value);
  v.attn = tape.constant(store.at(prompt_name(domain, ctx, "attn")).value);
  v.out = tape.constant(store.at(prompt_name(domain, ctx, "out")).value);
  return v;
}

/// Central position choices that never hit the central node itself.
int pick_mask(const MotifInstance& m, Rng& rng) {
  std::vector<int> options;
  const node_t c = m.central_node();
  for (std::size_t j = 0; j < m.nodes.size(); ++j) {
    if (m.nodes[j] != c) options.push_back(static_cast<int>(j));
  }
  if (options.empty()) return -1;
  return options[uniform_index(rng, options.size())];
}

}  // namespace

// ---------------------------------------------------------------------------
// Ground truth

GroundTruth train_ground_truth(const MopModel& model) {
  const auto& cfg = model.config();
  const auto& uni = model.universe();
  const std::size_t w = 2 * cfg.dim;
  Rng rng(stream_seed(cfg.seed, {0x67745f6d66ULL}));
  ad::ParamStore mf;
  mf.add("users", gaussian(uni.num_users, w, cfg.init_scale, rng));
  mf.add("items", gaussian(uni.num_items, w, cfg.init_scale, rng));

  struct Edge {
    std::size_t k;
    node_t u, i;
  };
  std::vector<Edge> edges;
  for (std::size_t k = 0; k < model.num_domains(); ++k) {
    const auto& g = model.graph(k);
    for (node_t u = 0; u < g.num_users(); ++u) {
      for (node_t i : g.neighbors(u)) edges.push_back({k, u, i});
    }
  }
  auto row = [&](std::size_t k, node_t v) {
    const auto& g = model.graph(k);
    return static_cast<std::uint32_t>(g.global_id(v));
  };

  ad::Adam adam(cfg.gt_lr);
  const std::size_t batch = 256, neg = cfg.negatives;
  for (std::size_t epoch = 0; epoch < cfg.gt_epochs && !edges.empty(); ++epoch) {
    std::shuffle(edges.begin(), edges.end(), rng);
    for (std::size_t lo = 0; lo < edges.size(); lo += batch) {
      const std::size_t hi = std::min(edges.size(), lo + batch);
      std::vector<std::uint32_t> users, pos, negs;
      for (std::size_t e = lo; e < hi; ++e) {
        const auto& ed = edges[e];
        const auto& g = model.graph(ed.k);
        users.push_back(row(ed.k, ed.u));
        pos.push_back(row(ed.k, ed.i));
        for (std::size_t j = 0; j < neg; ++j) negs.push_back(row(ed.k, draw_negative(g, ed.u, rng)));
      }
      ad::Tape tape;
      ad::Var ut = tape.param(mf, "users");
      ad::Var it = tape.param(mf, "items");
      ad::Var loss = rec_loss(ad::gather_rows(ut, users), ad::gather_rows(it, pos), ad::gather_rows(it, negs), neg,
                              cfg.gt_tau, cfg.denominator);
      tape.backward(loss);
      adam.step(mf);
    }
  }

  GroundTruth gt;
  const Matrix& U = mf.at("users").value;
  const Matrix& I = mf.at("items").value;
  for (std::size_t k = 0; k < model.num_domains(); ++k) {
    const auto& g = model.graph(k);
    Matrix z(g.num_nodes(), w);
    std::vector<std::size_t> udeg, ideg;
    for (node_t v = 0; v < g.num_nodes(); ++v) {
      const auto& src = g.is_user(v) ? U : I;
      std::copy_n(src.row(g.global_id(v)).data(), w, z.row(v).data());
      if (g.degree(v) > 0) (g.is_user(v) ? udeg : ideg).push_back(g.degree(v));
    }
    const std::size_t mu = lower_median(udeg), mi = lower_median(ideg);
    std::vector<std::uint8_t> ok(g.num_nodes(), 0);
    for (node_t v = 0; v < g.num_nodes(); ++v) {
      ok[v] = g.degree(v) > 0 && g.degree(v) >= (g.is_user(v) ? mu : mi);
    }
    gt.z.push_back(std::move(z));
    gt.eligible.push_back(std::move(ok));
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Pre-training

PretrainResult pretrain(MopModel& model, const PretrainOptions& options) {
  const auto& cfg = model.config();
  auto& store = model.params();
  for (int dom : model.domain_ids()) {
    for (Context ctx : {Context::shared, Context::specific}) {
      for (const auto& name : prompt_names(dom, ctx)) store.freeze(name);
    }
  }
  const bool use_cl = cfg.lambda1 > 0.0;
  const bool use_er = cfg.lambda1 < 1.0;
  GroundTruth gt;
  if (use_er && cfg.pretrain_epochs > 0) gt = train_ground_truth(model);

  Optimizer optim(cfg.optimizer, cfg.lr);
  Rng rng(stream_seed(cfg.seed, {0x7072657472ULL}));
  std::vector<std::vector<node_t>> nodes(model.num_domains());
  for (std::size_t k = 0; k < model.num_domains(); ++k) {
    const auto& pool = model.pool(k);
    for (node_t v = 0; v < model.graph(k).num_nodes(); ++v) {
      if (!pool.by_central[v].empty()) nodes[k].push_back(v);
    }
  }

  PretrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    const ad::ParamStore backup = store;
    std::vector<std::pair<std::size_t, std::vector<node_t>>> schedule;
    std::size_t max_chunks = 0;
    for (auto& list : nodes) {
      std::shuffle(list.begin(), list.end(), rng);
      max_chunks = std::max(max_chunks, (list.size() + cfg.batch - 1) / cfg.batch);
    }
    for (std::size_t c = 0; c < max_chunks; ++c) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const std::size_t lo = c * cfg.batch;
        if (lo >= nodes[k].size()) continue;
        const std::size_t hi = std::min(nodes[k].size(), lo + cfg.batch);
        schedule.emplace_back(k, std::vector<node_t>(nodes[k].begin() + static_cast<std::ptrdiff_t>(lo),
                                                     nodes[k].begin() + static_cast<std::ptrdiff_t>(hi)));
      }
    }

    double loss_sum = 0.0;
    std::size_t loss_steps = 0;
    for (std::size_t s = 0; s < schedule.size(); ++s) {
      const auto& [k, batch_nodes] = schedule[s];
      const auto& g = model.graph(k);
      const auto& pool = model.pool(k);
      const int dom = g.domain_id();
      const auto mask_row = static_cast<std::uint32_t>(g.num_nodes());
      try {
        ad::Tape tape;
        ad::Var xs = model.convolved(tape, k, Context::shared);
        ad::Var xd = model.convolved(tape, k, Context::specific);
        ad::Var mask = tape.param(store, MopModel::mask_token());
        PromptVars ps = prompt_vars(tape, store, dom, Context::shared, cfg.prompt);
        PromptVars pd = prompt_vars(tape, store, dom, Context::specific, cfg.prompt);

        std::optional<ad::Var> cl, er;
        if (use_cl) {
          std::vector<node_t> members;
          std::vector<std::pair<std::uint32_t, std::uint32_t>> views;
          for (node_t v : batch_nodes) {
            const auto& mine = pool.by_central[v];
            if (mine.size() < 2) {
              ++result.cl_skipped;
              continue;
            }
            const std::size_t a = uniform_index(rng, mine.size());
            std::size_t b = uniform_index(rng, mine.size() - 1);
            if (b >= a) ++b;
            members.push_back(v);
            views.emplace_back(mine[a], mine[b]);
          }
          ClViews cv;
          cv.batch = members.size();
          MotifBatch s1, s2, d1, d2;
          for (std::size_t j = 0; j < members.size(); ++j) {
            const node_t v = members[j];
            const auto& m1 = pool.motifs[views[j].first];
            const auto& m2 = pool.motifs[views[j].second];
            s1.begin_node(v);
            s1.add_motif(m1, -1, mask_row);
            d2.begin_node(v);
            d2.add_motif(m2, -1, mask_row);
            if (g.overlapped(v)) {
              cv.shared_anchors.push_back(j);
              s2.begin_node(v);
              s2.add_motif(m2, -1, mask_row);
            } else {
              cv.specific_anchors.push_back(j);
              d1.begin_node(v);
              d1.add_motif(m1, -1, mask_row);
            }
          }
          if (cv.batch >= 2) {
            if (!cv.shared_anchors.empty()) {
              cv.shared_v1 = model.embed(tape, k, Context::shared, xs, mask, s1, ps);
              cv.shared_v2 = model.embed(tape, k, Context::shared, xs, mask, s2, ps);
            }
            if (!cv.specific_anchors.empty()) {
              cv.specific_v1 = model.embed(tape, k, Context::specific, xd, mask, d1, pd);
              cv.specific_v2 = model.embed(tape, k, Context::specific, xd, mask, d2, pd);
            }
            cl = cl_loss(cv, cfg.tau, cfg.denominator);
          }
        }
        if (use_er) {
          ErViews ev;
          MotifBatch masked;
          std::vector<std::uint32_t> truth_rows;
          for (node_t v : batch_nodes) {
            if (!gt.eligible[k][v]) {
              ++result.er_skipped;
              continue;
            }
            const auto& mine = pool.by_central[v];
            const auto& m = pool.motifs[mine[uniform_index(rng, mine.size())]];
            const std::size_t j = truth_rows.size();
            (g.overlapped(v) ? ev.shared_anchors : ev.specific_anchors).push_back(j);
            truth_rows.push_back(v);
            masked.begin_node(v);
            masked.add_motif(m, pick_mask(m, rng), mask_row);
          }
          ev.batch = truth_rows.size();
          if (ev.batch >= 2) {
            Matrix truth(ev.batch, 2 * cfg.dim);
            for (std::size_t j = 0; j < ev.batch; ++j) {
              std::copy_n(gt.z[k].row(truth_rows[j]).data(), 2 * cfg.dim, truth.row(j).data());
            }
            ev.truth = tape.constant(std::move(truth));
            if (!ev.shared_anchors.empty()) ev.recon_shared = model.embed(tape, k, Context::shared, xs, mask, masked, ps);
            if (!ev.specific_anchors.empty()) {
              ev.recon_specific = model.embed(tape, k, Context::specific, xd, mask, masked, pd);
            }
            er = er_loss(ev, cfg.tau, cfg.denominator);
          }
        }
        auto loss = pretrain_loss(cl, er, cfg.lambda1);
        if (!loss) continue;
        const double value = loss->value()[0];
        if (!std::isfinite(value)) throw NumericalError("non-finite pre-training loss");
        tape.backward(*loss);
        optim.step(store);
        loss_sum += value;
        ++loss_steps;
        ++result.steps;
      } catch (const NumericalError& e) {
        store = backup;
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(s) + " (domain " + std::to_string(dom) +
                             "); parameters restored to the last completed epoch");
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_steps ? loss_sum / static_cast<double>(loss_steps) : 0.0;
    if (options.validate) rec.val_hr = options.validate();
    result.log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  model.set_stage("pretrained");
  return result;
}

// ---------------------------------------------------------------------------
// Composition and scoring

Matrix compose_user_embedding(const Matrix& shared, const Matrix* specific, Task task) {
  require_shape(shared.rows() == 1, "shared user embedding must be one row");
  Matrix out(1, 2 * shared.cols());
  std::copy(shared.values().begin(), shared.values().end(), out.values().begin());
  if (task == Task::intra) {
    if (!specific) throw LookupError("intra composition needs the specific embedding");
    require_shape(specific->same_shape(shared), "shared and specific widths differ");
    std::copy(specific->values().begin(), specific->values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(shared.cols()));
  }
  return out;
}

std::optional<std::pair<std::size_t, node_t>> inter_source(const MopModel& model, std::size_t k, node_t user) {
  const auto& g = model.graph(k);
  if (!g.is_user(user)) throw LookupError("inter source requested for an item");
  const auto gid = g.global_id(user);
  for (const auto& [dom, local] : model.universe().user_members.at(gid)) {
    const std::size_t j = model.domain_index(dom);
    if (j != k && model.graph(j).degree(local) > 0) return std::pair{j, local};
  }
  return std::nullopt;
}

TaskCaches build_task_caches(const MopModel& model, std::size_t k, Task task) {
  TaskCaches c;
  c.shared.resize(model.num_domains());
  for (std::size_t j = 0; j < model.num_domains(); ++j) {
    if (j == k || task == Task::inter) {
      c.shared[j] = std::make_shared<const EncodedCache>(model.build_cache(j, Context::shared));
    }
  }
  c.specific = std::make_shared<const EncodedCache>(model.build_cache(k, Context::specific));
  return c;
}

Recommender::Recommender(const MopModel& model, std::size_t k, Task task)
    : Recommender(model, k, task, build_task_caches(model, k, task)) {}

Recommender::Recommender(const MopModel& model, std::size_t k, Task task, TaskCaches caches)
    : model_(model), k_(k), task_(task), caches_(std::move(caches)) {
  require_shape(caches_.shared.size() == model.num_domains() && caches_.shared[k] && caches_.specific,
                "recommender caches do not cover the domain");
  const auto& g = model.graph(k);
  const int dom = g.domain_id();
  const auto mode = model.config().prompt;
  std::vector<node_t> items(g.num_items());
  std::iota(items.begin(), items.end(), static_cast<node_t>(g.num_users()));
  ad::Tape tape;
  auto ps = constant_prompts(tape, model.params(), dom, Context::shared, mode);
  auto pd = constant_prompts(tape, model.params(), dom, Context::specific, mode);
  ad::Var s = model.cached_embedding(tape, *caches_.shared[k], k, items, ps);
  ad::Var d = model.cached_embedding(tape, *caches_.specific, k, items, pd);
  items_ = ad::concat_cols(s, d).value();
}

std::optional<Matrix> Recommender::user(node_t u) const {
  const int dom = model_.graph(k_).domain_id();
  const auto mode = model_.config().prompt;
  ad::Tape tape;
  auto ps = constant_prompts(tape, model_.params(), dom, Context::shared, mode);
  if (task_ == Task::intra) {
    auto pd = constant_prompts(tape, model_.params(), dom, Context::specific, mode);
    const node_t one[1] = {u};
    const Matrix s = model_.cached_embedding(tape, *caches_.shared[k_], k_, one, ps).value();
    const Matrix d = model_.cached_embedding(tape, *caches_.specific, k_, one, pd).value();
    return compose_user_embedding(s, &d, Task::intra);
  }
  const auto src = inter_source(model_, k_, u);
  if (!src) return std::nullopt;
  const node_t one[1] = {src->second};
  const Matrix s = model_.cached_embedding(tape, *caches_.shared[src->first], src->first, one, ps).value();
  return compose_user_embedding(s, nullptr, Task::inter);
}

bool Recommender::score(node_t u, std::span<const std::uint32_t> items, std::span<double> out) const {
  const auto row = user(u);
  if (!row) return false;
  const std::size_t w = row->cols();
  double nu = 0.0;
  for (double x : row->values()) nu += x * x;
  nu = std::sqrt(nu);
  for (std::size_t j = 0; j < items.size(); ++j) {
    const auto it = items_.row(items[j]);
    double dot = 0.0, ni = 0.0;
    for (std::size_t c = 0; c < w; ++c) {
      dot += (*row)[c] * it[c];
      ni += it[c] * it[c];
    }
    const double denom = nu * std::sqrt(ni);
    out[j] = denom > 0.0 ? dot / denom : 0.0;
  }
  return true;
}

EvalReport evaluate_task(const MopModel& model, std::size_t k, Task task, const DomainHoldout& holdout,
                         bool use_test, const ProtocolSpec& protocol, std::uint64_t seed,
                         const TaskCaches* caches) {
  const auto& pairs = task == Task::intra ? (use_test ? holdout.test : holdout.valid)
                                          : (use_test ? holdout.cold_test : holdout.cold_valid);
  std::vector<EvalCase> cases;
  for (const auto& p : pairs) {
    EvalCase ec;
    ec.user = p.user;
    ec.positive = p.item;
    if (auto it = holdout.known.find(p.user); it != holdout.known.end()) ec.known = it->second;
    cases.push_back(std::move(ec));
  }
  const Recommender rec = caches ? Recommender(model, k, task, *caches) : Recommender(model, k, task);
  return evaluate_ranking(cases, model.graph(k).num_items(), protocol, seed,
                          [&](std::size_t c, std::span<const std::uint32_t> items, std::span<double> out) {
                            return rec.score(static_cast<node_t>(cases[c].user), items, out);
                          });
}

// ---------------------------------------------------------------------------
// Prompt tuning

void freeze_for_tuning(ad::ParamStore& store, const MopModel& model, std::size_t k) {
  store.freeze_all();
  const int dom = model.graph(k).domain_id();
  for (Context ctx : {Context::shared, Context::specific}) {
    for (const auto& name : prompt_names(dom, ctx)) store.unfreeze(name);
  }
}

TuneResult prompt_tune(MopModel& model, std::size_t k, Task task, const DomainHoldout& holdout,
                       const TuneOptions& options) {
  if (model.stage() != "pretrained") {
    throw StageError("prompt tuning needs a pre-trained checkpoint (stage is '" + model.stage() + "')");
  }
  const auto& cfg = model.config();
  const auto& g = model.graph(k);
  const int dom = g.domain_id();
  auto& store = model.params();
  freeze_for_tuning(store, model, k);

  std::vector<std::string> tuned;
  for (Context ctx : {Context::shared, Context::specific}) {
    for (const auto& name : prompt_names(dom, ctx)) tuned.push_back(name);
  }
  auto snapshot = [&] {
    std::vector<Matrix> out;
    for (const auto& name : tuned) out.push_back(store.at(name).value);
    return out;
  };

  const TaskCaches caches = build_task_caches(model, k, task);
  const EncodedCache& cs = *caches.shared[k];
  const EncodedCache& cd = *caches.specific;
  std::vector<std::pair<node_t, node_t>> edges;
  for (node_t u = 0; u < g.num_users(); ++u) {
    for (node_t i : g.neighbors(u)) edges.emplace_back(u, i);
  }
  const std::uint64_t val_seed = stream_seed(cfg.seed, {0x76616cULL, static_cast<std::uint64_t>(dom)});
  auto validate = [&] {
    return evaluate_task(model, k, task, holdout, false, options.val_protocol, val_seed, &caches).hr;
  };

  TuneResult result;
  result.initial_val_hr = validate();
  result.best_val_hr = result.initial_val_hr;
  auto best = snapshot();
  Optimizer optim(cfg.optimizer, cfg.tune_lr);
  Rng rng(stream_seed(cfg.seed, {0x74756e65ULL, static_cast<std::uint64_t>(dom), static_cast<std::uint64_t>(task)}));
  const std::size_t neg = cfg.negatives;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.tune_epochs && !edges.empty(); ++epoch) {
    std::shuffle(edges.begin(), edges.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t lo = 0; lo < edges.size(); lo += cfg.batch) {
      const std::size_t hi = std::min(edges.size(), lo + cfg.batch);
      std::vector<node_t> users, items;
      for (std::size_t e = lo; e < hi; ++e) {
        users.push_back(edges[e].first);
        items.push_back(edges[e].second);
      }
      for (std::size_t e = lo; e < hi; ++e) {
        for (std::size_t j = 0; j < neg; ++j) items.push_back(draw_negative(g, edges[e].first, rng));
      }
      const std::size_t b = users.size();
      ad::Tape tape;
      PromptVars ps = prompt_vars(tape, store, dom, Context::shared, cfg.prompt);
      PromptVars pd = prompt_vars(tape, store, dom, Context::specific, cfg.prompt);
      ad::Var us = model.cached_embedding(tape, cs, k, users, ps);
      ad::Var ud = task == Task::intra ? model.cached_embedding(tape, cd, k, users, pd)
                                       : tape.constant(Matrix(b, 2 * cfg.dim));
      ad::Var u = ad::concat_cols(us, ud);
      ad::Var it = ad::concat_cols(model.cached_embedding(tape, cs, k, items, ps),
                                   model.cached_embedding(tape, cd, k, items, pd));
      std::vector<std::uint32_t> pos_idx(b), neg_idx(b * neg);
      std::iota(pos_idx.begin(), pos_idx.end(), 0u);
      std::iota(neg_idx.begin(), neg_idx.end(), static_cast<std::uint32_t>(b));
      ad::Var loss = rec_loss(u, ad::gather_rows(it, pos_idx), ad::gather_rows(it, neg_idx), neg, cfg.tau,
                              cfg.denominator);
      tape.backward(loss);
      optim.step(store);
      loss_sum += loss.value()[0];
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    rec.val_hr = validate();
    result.log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (*rec.val_hr > result.best_val_hr) {
      result.best_val_hr = *rec.val_hr;
      result.best_epoch = epoch;
      best = snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t j = 0; j < tuned.size(); ++j) store.at(tuned[j]).value = best[j];
  store.zero_grad();
  model.set_stage("tuned");
  return result;
}

}  // namespace mop
