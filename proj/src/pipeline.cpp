#include "mop/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "mop/util.hpp"

namespace mop {

namespace fs = std::filesystem;

namespace {

template <class F>
auto in_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

fs::path data_dir(const PipelineConfig& cfg) { return cfg.out / "data"; }

std::string domain_file(const std::string& stem, std::size_t k) { return stem + "_" + std::to_string(k) + ".tsv"; }

std::vector<std::vector<std::string>> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LookupError("missing " + path.string() + " (run ingest first)");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    rows.push_back(std::move(cols));
  }
  return rows;
}

std::uint64_t to_id(const std::string& s) {
  std::size_t pos = 0;
  const auto v = std::stoull(s, &pos);
  if (pos != s.size()) throw ValidationError("bad id '" + s + "'");
  return v;
}

/// Merges the overlap files into one registry over `graphs`.
OverlapRegistry load_registry(const std::vector<DomainGraph>& graphs, const std::vector<OverlapSource>& overlaps) {
  OverlapRegistry reg;
  for (const auto& o : overlaps) {
    if (o.domain_a < 0 || o.domain_b < 0 || static_cast<std::size_t>(o.domain_a) >= graphs.size() ||
        static_cast<std::size_t>(o.domain_b) >= graphs.size()) {
      throw ConfigError("overlap refers to an unknown domain");
    }
    const auto& a = graphs[static_cast<std::size_t>(o.domain_a)];
    const auto& b = graphs[static_cast<std::size_t>(o.domain_b)];
    const auto part = load_overlap(o.path, a, b);
    std::vector<OverlapLink> links;
    for (const auto& [pair, link] : part.links()) {
      if (pair.first == a.domain_id()) {
        links.push_back(link);
      } else {
        links.push_back({link.b_external, link.a_external, link.global_label});
      }
    }
    reg.register_overlap(a, b, links);
  }
  return reg;
}

ConfigFile model_config(const PipelineConfig& cfg) {
  // Paths are left out so that checkpoints do not depend on where data lives.
  ConfigFile all = cfg.to_config(), out;
  for (const auto& [section, kv] : all.sections()) {
    if (section == "data") continue;
    for (const auto& [k, v] : kv) out.set(section, k, v);
  }
  return out;
}

std::map<std::string, std::string> ckpt_meta(const PipelineConfig& cfg, const MopModel& model) {
  return {{"config", model_config(cfg).serialize()},
          {"stage", model.stage()},
          {"seed", std::to_string(cfg.train.seed)}};
}

std::string log_text(const std::vector<EpochRecord>& log) {
  std::string out = "epoch\tloss\tval_hr10\n";
  for (const auto& r : log) out += epoch_line(r) + "\n";
  return out;
}

std::string tune_stem(int domain, Task task) {
  return "d" + std::to_string(domain) + "_" + to_string(task);
}

void apply_checkpoint(const PipelineConfig& cfg, MopModel& model, const fs::path& ckpt) {
  std::map<std::string, std::string> meta;
  auto store = ad::load_params(ckpt, &meta);
  if (meta["config"] != model_config(cfg).serialize()) {
    throw ConfigError(ckpt.string() + " was written under a different model configuration");
  }
  model.set_params(std::move(store));
  model.set_stage(meta["stage"]);
}

TuneResult tune_in_memory(const PipelineConfig& cfg, MopModel& model, const Workspace& ws, int domain, Task task,
                          std::ostream& log) {
  const std::size_t k = model.domain_index(domain);
  TuneOptions opt;
  opt.val_protocol = cfg.eval.val_protocol;
  opt.on_epoch = [&](const EpochRecord& r) { log << "  tune " << tune_stem(domain, task) << " " << epoch_line(r) << "\n"; };
  auto result = prompt_tune(model, k, task, ws.holdouts.at(k), opt);
  std::vector<EpochRecord> records{{0, 0.0, result.initial_val_hr}};
  records.insert(records.end(), result.log.begin(), result.log.end());
  auto meta = ckpt_meta(cfg, model);
  meta["domain"] = std::to_string(domain);
  meta["task"] = to_string(task);
  meta["best_epoch"] = std::to_string(result.best_epoch);
  ad::save_params(tuned_checkpoint(cfg, domain, task), model.params(), meta);
  write_text(cfg.out / ("tune_" + tune_stem(domain, task) + ".tsv"), log_text(records));
  log << "  tune " << tune_stem(domain, task) << ": best epoch " << result.best_epoch << ", val HR@10 "
      << result.initial_val_hr << " -> " << result.best_val_hr << "\n";
  return result;
}

PretrainResult pretrain_in_memory(const PipelineConfig& cfg, MopModel& model, std::ostream& log) {
  model.init_params();
  PretrainOptions opt;
  std::vector<EpochRecord> records;
  opt.on_epoch = [&](const EpochRecord& r) {
    records.push_back(r);
    log << "  pretrain " << epoch_line(r) << "\n";
    auto meta = ckpt_meta(cfg, model);
    meta["stage"] = "pretraining";
    meta["epoch"] = std::to_string(r.epoch);
    ad::save_params(cfg.out / "pretrain_partial.ckpt", model.params(), meta);
    write_text(cfg.out / "pretrain_log.tsv", log_text(records));
  };
  auto result = pretrain(model, opt);
  ad::save_params(cfg.out / "pretrained.ckpt", model.params(), ckpt_meta(cfg, model));
  write_text(cfg.out / "pretrain_log.tsv", log_text(result.log));
  log << "  pretrain: " << result.steps << " steps, " << result.cl_skipped << " contrastive and " << result.er_skipped
      << " reconstruction anchors skipped\n";
  return result;
}

void sample_in_memory(const PipelineConfig& cfg, const MopModel& model, std::ostream& log) {
  fs::create_directories(cfg.out / "motifs");
  for (std::size_t k = 0; k < model.num_domains(); ++k) {
    const auto& g = model.graph(k);
    const auto& pool = model.pool(k);
    const std::string id = std::to_string(g.domain_id());
    write_motifs(cfg.out / "motifs" / ("motifs_d" + id + ".tsv"), g, pool.motifs);
    IncidenceOptions io;
    io.merge_shared_pairs = cfg.train.merge_hyperedges;
    const auto inc_path = cfg.out / "motifs" / ("incidence_d" + id + ".tsv");
    if (pool.motifs.empty()) {
      write_text(inc_path, "");
    } else {
      write_incidence_coo(inc_path, build_incidence(pool.motifs, g, io));
    }
    std::size_t bare = 0;
    for (node_t n = 0; n < g.num_nodes(); ++n) {
      if (g.degree(n) > 0 && pool.by_central[n].empty()) ++bare;
    }
    log << "  domain " << id << ": " << pool.motifs.size() << " motifs";
    if (bare > 0) log << ", warning: " << bare << " connected nodes without motifs fall back to their own row";
    log << "\n";
  }
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<DomainSplit> split_domains(const std::vector<DomainGraph>& raw, const OverlapRegistry& registry,
                                       const SplitConfig& split, std::uint64_t seed) {
  Rng rng(stream_seed(seed, {0x73706c6974ULL}));
  std::map<std::uint64_t, std::vector<std::size_t>> domains_of;  // label -> domains holding it
  for (std::size_t k = 0; k < raw.size(); ++k) {
    for (node_t u = 0; u < raw[k].num_users(); ++u) {
      if (auto label = registry.label_of(raw[k].domain_id(), raw[k].external_id(u))) domains_of[*label].push_back(k);
    }
  }
  std::set<std::uint64_t> cold_labels;
  std::vector<std::set<node_t>> cold(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto& g = raw[k];
    std::vector<node_t> cand;
    std::size_t overlapped = 0;
    for (node_t u = 0; u < g.num_users(); ++u) {
      const auto label = registry.label_of(g.domain_id(), g.external_id(u));
      if (!label) continue;
      ++overlapped;
      if (cold_labels.contains(*label) || g.degree(u) < 2 || domains_of[*label].size() < 2) continue;
      cand.push_back(u);
    }
    std::shuffle(cand.begin(), cand.end(), rng);
    const auto want = static_cast<std::size_t>(std::llround(split.cold_fraction * static_cast<double>(overlapped)));
    cand.resize(std::min(want, cand.size()));
    for (node_t u : cand) {
      cold[k].insert(u);
      cold_labels.insert(*registry.label_of(g.domain_id(), g.external_id(u)));
    }
  }

  const std::size_t min_warm = std::max<std::size_t>(split.min_interactions, 3);
  std::vector<DomainSplit> out(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const auto& g = raw[k];
    auto& s = out[k];
    s.users = g.user_ids();
    s.items = g.item_ids();
    for (node_t u = 0; u < g.num_users(); ++u) {
      const auto ue = g.external_id(u);
      std::vector<std::uint64_t> items;
      for (node_t i : g.neighbors(u)) items.push_back(g.external_id(i));
      if (cold[k].contains(u)) {
        auto order = items;
        std::shuffle(order.begin(), order.end(), rng);
        s.cold.push_back({ue, order[1], order[0], items});
        continue;
      }
      std::uint64_t test = 0, valid = 0;
      const bool warm = items.size() >= min_warm;
      if (warm) {
        const std::size_t t = uniform_index(rng, items.size());
        std::size_t v = uniform_index(rng, items.size() - 1);
        if (v >= t) ++v;
        test = items[t];
        valid = items[v];
        s.test.emplace_back(ue, test);
        s.valid.emplace_back(ue, valid);
      }
      for (auto i : items) {
        if (warm && (i == test || i == valid)) continue;
        s.train.emplace_back(ue, i);
      }
    }
  }
  return out;
}

Workspace make_workspace(const std::vector<DomainSplit>& splits, const std::vector<OverlapSource>& overlaps) {
  Workspace ws;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    ws.graphs.push_back(
        DomainGraph::from_edges(static_cast<int>(k), splits[k].train, splits[k].users, splits[k].items));
  }
  ws.registry = load_registry(ws.graphs, overlaps);
  ws.universe = assign_global_ids(ws.graphs, ws.registry);
  for (std::size_t k = 0; k < splits.size(); ++k) {
    const auto& g = ws.graphs[k];
    const auto& s = splits[k];
    DomainHoldout h;
    auto item_of = [&](std::uint64_t ext) {
      return static_cast<std::uint32_t>(g.item_index(g.lookup(NodeKind::item, ext)));
    };
    auto add = [&](std::vector<DomainHoldout::Pair>& dst, std::uint64_t ue, std::uint64_t ie) {
      const node_t u = g.lookup(NodeKind::user, ue);
      dst.push_back({u, item_of(ie)});
      auto& known = h.known[u];
      known.insert(item_of(ie));
      for (node_t i : g.neighbors(u)) known.insert(static_cast<std::uint32_t>(g.item_index(i)));
    };
    for (const auto& [u, i] : s.valid) add(h.valid, u, i);
    for (const auto& [u, i] : s.test) add(h.test, u, i);
    for (const auto& c : s.cold) {
      add(h.cold_valid, c.user, c.valid_item);
      add(h.cold_test, c.user, c.test_item);
      for (auto i : c.hidden) h.known[g.lookup(NodeKind::user, c.user)].insert(item_of(i));
    }
    ws.holdouts.push_back(std::move(h));
  }
  return ws;
}

Workspace run_ingest(const PipelineConfig& cfg, std::ostream& log) {
  return in_stage("ingest", [&] {
    if (cfg.domains.empty()) throw ConfigError("no interaction files configured");
    std::vector<DomainGraph> raw;
    for (std::size_t k = 0; k < cfg.domains.size(); ++k) {
      if (!fs::exists(cfg.domains[k])) throw LookupError("missing interaction file " + cfg.domains[k].string());
      raw.push_back(load_interactions(cfg.domains[k], static_cast<int>(k)));
    }
    for (const auto& o : cfg.overlaps) {
      if (!fs::exists(o.path)) throw LookupError("missing overlap file " + o.path.string());
    }
    const auto registry = load_registry(raw, cfg.overlaps);
    const auto splits = split_domains(raw, registry, cfg.split, cfg.train.seed);
    const fs::path dir = data_dir(cfg);
    for (std::size_t k = 0; k < splits.size(); ++k) {
      const auto& s = splits[k];
      std::string train, valid, test, cold, users, items;
      for (const auto& [u, i] : s.train) train += std::to_string(u) + "\t" + std::to_string(i) + "\n";
      for (const auto& [u, i] : s.valid) valid += std::to_string(u) + "\t" + std::to_string(i) + "\n";
      for (const auto& [u, i] : s.test) test += std::to_string(u) + "\t" + std::to_string(i) + "\n";
      for (const auto& c : s.cold) {
        cold += std::to_string(c.user) + "\t" + std::to_string(c.valid_item) + "\t" + std::to_string(c.test_item) + "\t";
        for (std::size_t j = 0; j < c.hidden.size(); ++j) cold += (j ? "," : "") + std::to_string(c.hidden[j]);
        cold += "\n";
      }
      for (auto u : s.users) users += std::to_string(u) + "\n";
      for (auto i : s.items) items += std::to_string(i) + "\n";
      write_text(dir / domain_file("train", k), train);
      write_text(dir / domain_file("valid", k), valid);
      write_text(dir / domain_file("test", k), test);
      write_text(dir / domain_file("cold", k), cold);
      write_text(dir / domain_file("users", k), users);
      write_text(dir / domain_file("items", k), items);
      log << "  domain " << k << ": " << s.users.size() << " users, " << s.items.size() << " items, " << s.train.size()
          << " training edges, " << s.test.size() << " warm and " << s.cold.size() << " cold test users\n";
    }
    return make_workspace(splits, cfg.overlaps);
  });
}

Workspace load_workspace(const PipelineConfig& cfg) {
  const fs::path dir = data_dir(cfg);
  std::vector<DomainSplit> splits(cfg.domains.size());
  for (std::size_t k = 0; k < splits.size(); ++k) {
    auto& s = splits[k];
    for (const auto& r : read_rows(dir / domain_file("train", k))) s.train.emplace_back(to_id(r.at(0)), to_id(r.at(1)));
    for (const auto& r : read_rows(dir / domain_file("valid", k))) s.valid.emplace_back(to_id(r.at(0)), to_id(r.at(1)));
    for (const auto& r : read_rows(dir / domain_file("test", k))) s.test.emplace_back(to_id(r.at(0)), to_id(r.at(1)));
    for (const auto& r : read_rows(dir / domain_file("cold", k))) {
      DomainSplit::Cold c{to_id(r.at(0)), to_id(r.at(1)), to_id(r.at(2)), {}};
      std::stringstream ss(r.at(3));
      std::string part;
      while (std::getline(ss, part, ',')) c.hidden.push_back(to_id(part));
      s.cold.push_back(std::move(c));
    }
    for (const auto& r : read_rows(dir / domain_file("users", k))) s.users.push_back(to_id(r.at(0)));
    for (const auto& r : read_rows(dir / domain_file("items", k))) s.items.push_back(to_id(r.at(0)));
  }
  return make_workspace(splits, cfg.overlaps);
}

MopModel make_model(const PipelineConfig& cfg, const Workspace& ws) {
  return MopModel(ws.graphs, ws.universe, cfg.train);
}

void run_sample_motifs(const PipelineConfig& cfg, std::ostream& log) {
  in_stage("sample-motifs", [&] {
    const auto ws = load_workspace(cfg);
    sample_in_memory(cfg, make_model(cfg, ws), log);
  });
}

PretrainResult run_pretrain(const PipelineConfig& cfg, std::ostream& log) {
  return in_stage("pretrain", [&] {
    const auto ws = load_workspace(cfg);
    auto model = make_model(cfg, ws);
    return pretrain_in_memory(cfg, model, log);
  });
}

fs::path tuned_checkpoint(const PipelineConfig& cfg, int domain, Task task) {
  return cfg.out / ("tuned_" + tune_stem(domain, task) + ".ckpt");
}

TuneResult run_tune(const PipelineConfig& cfg, int domain, Task task, std::ostream& log) {
  return in_stage("prompt-tune", [&] {
    const auto ws = load_workspace(cfg);
    auto model = load_model(cfg, ws, cfg.out / "pretrained.ckpt");
    return tune_in_memory(cfg, model, ws, domain, task, log);
  });
}

MopModel load_model(const PipelineConfig& cfg, const Workspace& ws, const fs::path& ckpt) {
  auto model = make_model(cfg, ws);
  apply_checkpoint(cfg, model, ckpt);
  return model;
}

std::uint64_t eval_seed(std::uint64_t seed, int domain, Task task) {
  return stream_seed(seed, {0x74657374ULL, static_cast<std::uint64_t>(domain), static_cast<std::uint64_t>(task)});
}

EvalReport run_evaluate(const PipelineConfig& cfg, const fs::path& ckpt, int domain, Task task,
                        const ProtocolSpec& protocol, std::uint64_t seed) {
  return in_stage("evaluate", [&] {
    const auto ws = load_workspace(cfg);
    const auto model = load_model(cfg, ws, ckpt);
    const std::size_t k = model.domain_index(domain);
    return evaluate_task(model, k, task, ws.holdouts.at(k), true, protocol, seed);
  });
}

std::vector<Recommendation> recommend(const MopModel& model, std::size_t k, Task task,
                                      std::span<const std::uint64_t> users, std::size_t top_k) {
  const auto& g = model.graph(k);
  const Recommender rec(model, k, task);
  std::vector<std::uint32_t> all(g.num_items());
  std::iota(all.begin(), all.end(), 0u);
  std::vector<double> scores(all.size());
  std::vector<Recommendation> out;
  for (auto ue : users) {
    Recommendation r;
    r.user = ue;
    const auto u = g.find(NodeKind::user, ue);
    if (!u) {
      r.error = "unknown user";
      out.push_back(std::move(r));
      continue;
    }
    if (top_k == 0) {
      out.push_back(std::move(r));
      continue;
    }
    std::vector<std::uint32_t> eligible;
    for (auto i : all) {
      if (!g.has_edge(*u, g.item_node(i))) eligible.push_back(i);
    }
    if (eligible.empty()) {
      r.error = "user has interacted with every catalog item";
    } else if (!rec.score(*u, all, scores)) {
      r.error = "no domain provides an embedding for this user";
    } else {
      const std::size_t n = std::min(top_k, eligible.size());
      std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n), eligible.end(),
                        [&](std::uint32_t a, std::uint32_t b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
      for (std::size_t j = 0; j < n; ++j) r.items.push_back(g.external_id(g.item_node(eligible[j])));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string recommendation_line(const Recommendation& r) {
  std::string line = std::to_string(r.user) + "\t";
  if (r.error) return line + "!" + *r.error;
  for (std::size_t j = 0; j < r.items.size(); ++j) line += (j ? "," : "") + std::to_string(r.items[j]);
  return line;
}

void run_pipeline(const PipelineConfig& cfg, std::ostream& log) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

  log << "ingest\n";
  const auto ws = run_ingest(cfg, log);
  log << "sample-motifs\n";
  auto model = in_stage("sample-motifs", [&] {
    auto m = make_model(cfg, ws);
    sample_in_memory(cfg, m, log);
    return m;
  });
  log << "pretrain\n";
  in_stage("pretrain", [&] { pretrain_in_memory(cfg, model, log); });
  const ad::ParamStore pretrained = model.params();

  std::string report, baseline;
  for (std::size_t k = 0; k < model.num_domains(); ++k) {
    const int dom = model.graph(k).domain_id();
    for (Task task : {Task::intra, Task::inter}) {
      const auto seed = eval_seed(cfg.train.seed, dom, task);
      log << "prompt-tune " << tune_stem(dom, task) << "\n";
      const auto base = in_stage("evaluate", [&] {
        return evaluate_task(model, k, task, ws.holdouts[k], true, cfg.eval.protocol, seed);
      });
      baseline += report_line(to_string(task), dom, base) + "\n";
      in_stage("prompt-tune", [&] { tune_in_memory(cfg, model, ws, dom, task, log); });
      const auto tuned = in_stage("evaluate", [&] {
        return evaluate_task(model, k, task, ws.holdouts[k], true, cfg.eval.protocol, seed);
      });
      report += report_line(to_string(task), dom, tuned) + "\n";
      if (tuned.skipped > 0) log << "  " << tuned.skipped << " test users skipped (no embedding source)\n";
      model.set_params(pretrained);
      model.set_stage("pretrained");
    }
  }
  in_stage("evaluate", [&] {
    write_text(cfg.out / "report.tsv", report);
    write_text(cfg.out / "baseline.tsv", baseline);
  });

  log << "\ntask\tdomain\tHR@10\tNDCG@10\tusers\t(identity prompts: HR@10 NDCG@10)\n";
  std::stringstream r(report), b(baseline);
  std::string rl, bl;
  while (std::getline(r, rl) && std::getline(b, bl)) {
    const auto cut = [](const std::string& s) {
      std::vector<std::string> f;
      std::stringstream ss(s);
      std::string x;
      while (std::getline(ss, x, '\t')) f.push_back(x);
      return f;
    };
    const auto bf = cut(bl);
    log << rl << "\t(" << bf.at(2) << " " << bf.at(3) << ")\n";
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", elapsed());
  log << "done in " << buf << " s\n";
}

}  // namespace mop
