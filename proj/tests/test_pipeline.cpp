#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mop/pipeline.hpp"
#include "mop/synth.hpp"
#include "support.hpp"

using namespace mop;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mop_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig small_config(const fs::path& dir, std::size_t domains, const std::string& motif) {
  std::string text = "[data]\ndomains = ";
  for (std::size_t k = 0; k < domains; ++k) text += (k ? ", " : "") + ("domain" + std::to_string(k) + ".tsv");
  text += "\noverlap = 0:1:overlap_0_1.tsv\nout = run\n";
  text += "[model]\ndim = 8\nheads = 2\nhyper_layers = 2\nmode_layers = 1\nmotif = " + motif + "\nmotif_budget = 3\n";
  text += "[train]\nbatch = 16\npretrain_epochs = 2\ntune_epochs = 2\ngt_epochs = 2\noptimizer = adam\nlr = 0.01\n";
  text += "[run]\nseed = 4\n";
  std::ofstream(dir / "config.ini") << text;
  return PipelineConfig::load(dir / "config.ini");
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("noise-free generator keeps interactions inside clusters") {
    SynthSpec s;
    s.users = 60;
    s.items = 40;
    s.clusters = 2;
    s.noise = 0.0;
    s.seed = 1;
    auto d = generate_synthetic(s);
    for (const auto& dom : d.domains) {
      for (auto [u, i] : dom.interactions) CHECK(dom.user_cluster[u] == dom.item_cluster[i]);
    }
  }

  TEST_CASE("overlapped users keep one cluster everywhere") {
    SynthSpec s;
    s.domains = 3;
    s.seed = 2;
    auto d = generate_synthetic(s);
    REQUIRE(d.overlap.size() == 2);
    for (std::size_t k = 1; k < 3; ++k) {
      CHECK(d.overlap[k - 1].size() == 100);
      for (const auto& l : d.overlap[k - 1]) {
        CHECK(d.domains[0].user_cluster[l.a_external] == d.domains[k].user_cluster[l.b_external]);
      }
    }
    std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
    for (auto e : d.domains[0].interactions) CHECK(seen.insert(e).second);
  }

  TEST_CASE("zero overlap and infeasible specs") {
    SynthSpec s;
    s.overlap = 0.0;
    auto d = generate_synthetic(s);
    for (const auto& links : d.overlap) CHECK(links.empty());
    s.overlap = 1.5;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s.overlap = 0.2;
    s.items = 3;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
    s.items = 300;
    s.min_degree = 30;
    CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
  }

  TEST_CASE("generator output files and determinism") {
    SynthSpec s;
    s.users = 50;
    s.items = 30;
    s.seed = 3;
    auto a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
    write_synthetic(a, generate_synthetic(s));
    write_synthetic(b, generate_synthetic(s));
    for (const char* f : {"domain0.tsv", "domain1.tsv", "overlap_0_1.tsv", "manifest.tsv"}) {
      CHECK(fs::exists(a / f));
      CHECK(slurp(a / f) == slurp(b / f));
    }
    auto g = load_interactions(a / "domain0.tsv", 0);
    CHECK(g.num_users() == 50);
  }

  TEST_CASE("split invariants") {
    SynthSpec s;
    s.users = 80;
    s.items = 40;
    s.overlap = 0.5;
    s.seed = 5;
    auto d = generate_synthetic(s);
    std::vector<DomainGraph> raw;
    for (int k = 0; k < 2; ++k) raw.push_back(DomainGraph::from_edges(k, d.domains[k].interactions));
    OverlapRegistry reg;
    reg.register_overlap(raw[0], raw[1], d.overlap[0]);
    SplitConfig sc;
    auto splits = split_domains(raw, reg, sc, 11);
    auto again = split_domains(raw, reg, sc, 11);
    std::set<std::uint64_t> cold_labels;
    for (int k = 0; k < 2; ++k) {
      const auto& sp = splits[k];
      CHECK(sp.train == again[k].train);
      CHECK(sp.cold.size() == 16);  // 40% of 40 overlapped users
      std::set<std::pair<std::uint64_t, std::uint64_t>> train(sp.train.begin(), sp.train.end());
      std::set<std::uint64_t> cold_users;
      for (const auto& c : sp.cold) {
        cold_users.insert(c.user);
        CHECK(cold_labels.insert(*reg.label_of(k, c.user)).second);
        CHECK(c.valid_item != c.test_item);
        for (auto i : c.hidden) CHECK_FALSE(train.contains({c.user, i}));
      }
      for (auto [u, i] : sp.train) CHECK_FALSE(cold_users.contains(u));
      REQUIRE(sp.test.size() == sp.valid.size());
      for (std::size_t j = 0; j < sp.test.size(); ++j) {
        CHECK(sp.test[j].first == sp.valid[j].first);
        CHECK(sp.test[j].second != sp.valid[j].second);
        CHECK_FALSE(train.contains(sp.test[j]));
        CHECK_FALSE(train.contains(sp.valid[j]));
      }
      CHECK(sp.train.size() + 2 * sp.test.size() + [&] {
        std::size_t n = 0;
        for (const auto& c : sp.cold) n += c.hidden.size();
        return n;
      }() == raw[k].num_edges());
    }
    auto ws = make_workspace(splits, {});
    CHECK(ws.graphs[0].num_users() == raw[0].num_users());
    CHECK(ws.holdouts[0].cold_test.size() == 16);
  }

  TEST_CASE("top-K contract") {
    // User 0 has seen every item of domain 0.
    std::vector<std::pair<std::uint64_t, std::uint64_t>> e;
    for (std::uint64_t i = 0; i < 6; ++i) e.emplace_back(0, i);
    for (std::uint64_t u = 1; u < 8; ++u) {
      e.emplace_back(u, u % 6);
      e.emplace_back(u, (u + 1) % 6);
      e.emplace_back(u, (u + 3) % 6);
    }
    std::vector<DomainGraph> graphs{DomainGraph::from_edges(0, e)};
    auto uni = assign_global_ids(graphs, OverlapRegistry{});
    auto cfg = testing::tiny_config();
    MopModel m(std::move(graphs), std::move(uni), cfg);
    m.init_params();
    const std::vector<std::uint64_t> users{0, 1, 99, 2};
    auto none = recommend(m, 0, Task::intra, users, 0);
    CHECK(none[1].items.empty());
    CHECK_FALSE(none[1].error.has_value());
    auto all = recommend(m, 0, Task::intra, users, 100);
    REQUIRE(all.size() == 4);
    CHECK(all[0].items.empty());
    CHECK(all[0].error == "user has interacted with every catalog item");
    CHECK(all[2].error == "unknown user");
    CHECK(recommendation_line(all[2]) == "99\t!unknown user");
    CHECK(all[1].items.size() == 3);
    CHECK(all[3].items.size() == 3);
    // Rank order follows the model's scores.
    Recommender rec(m, 0, Task::intra);
    const auto& g = m.graph(0);
    std::vector<std::uint32_t> idx;
    for (auto ext : all[1].items) idx.push_back(static_cast<std::uint32_t>(g.item_index(g.lookup(NodeKind::item, ext))));
    std::vector<double> s(idx.size());
    rec.score(g.lookup(NodeKind::user, 1), idx, s);
    CHECK(std::is_sorted(s.rbegin(), s.rend()));
    for (auto ext : all[1].items) CHECK_FALSE(g.has_edge(g.lookup(NodeKind::user, 1), g.lookup(NodeKind::item, ext)));
    auto top1 = recommend(m, 0, Task::intra, users, 1);
    CHECK(top1[1].items == std::vector<std::uint64_t>{all[1].items[0]});
  }

  TEST_CASE("stages fail with their name") {
    auto dir = fresh_dir("stage");
    auto cfg = small_config(dir, 2, "walk");
    std::ostringstream sink;
    try {
      run_tune(cfg, 0, Task::intra, sink);
      FAIL("expected a stage error");
    } catch (const PipelineError& e) {
      CHECK(e.stage() == "prompt-tune");
    }
    try {
      run_ingest(cfg, sink);
      FAIL("expected a stage error");
    } catch (const PipelineError& e) {
      CHECK(e.stage() == "ingest");
    }
  }

  TEST_CASE("butterfly-free data runs to completion with fallbacks") {
    auto dir = fresh_dir("nofly");
    // Consecutive users share exactly one item, so no two users share two.
    for (int k = 0; k < 2; ++k) {
      std::ofstream out(dir / ("domain" + std::to_string(k) + ".tsv"));
      for (int u = 0; u < 24; ++u)
        for (int j = 0; j < 3; ++j) out << u << '\t' << 2 * u + j << '\n';
    }
    {
      std::ofstream out(dir / "overlap_0_1.tsv");
      for (int u = 0; u < 10; ++u) out << "user\t" << u << '\t' << u << '\t' << u << '\n';
    }
    auto cfg = small_config(dir, 2, "butterfly");
    std::ostringstream log;
    run_pipeline(cfg, log);
    INFO(log.str());
    CHECK(log.str().find("warning:") != std::string::npos);
    CHECK(log.str().find(" 0 motifs") != std::string::npos);
    const auto report = slurp(cfg.out / "report.tsv");
    CHECK(report.find("intra\t0\t") != std::string::npos);
    CHECK(report.find("inter\t1\t") != std::string::npos);
    CHECK(fs::exists(cfg.out / "tuned_d1_inter.ckpt"));
  }

  TEST_CASE("staged commands reproduce the one-shot pipeline") {
    SynthSpec s;
    s.users = 60;
    s.items = 40;
    s.seed = 9;
    auto a = fresh_dir("stages_a"), b = fresh_dir("stages_b");
    write_synthetic(a, generate_synthetic(s));
    write_synthetic(b, generate_synthetic(s));
    auto ca = small_config(a, 2, "walk"), cb = small_config(b, 2, "walk");
    std::ostringstream sink;
    run_pipeline(ca, sink);
    run_ingest(cb, sink);
    run_sample_motifs(cb, sink);
    run_pretrain(cb, sink);
    run_tune(cb, 1, Task::inter, sink);
    CHECK(slurp(ca.out / "pretrained.ckpt") == slurp(cb.out / "pretrained.ckpt"));
    CHECK(slurp(ca.out / "tuned_d1_inter.ckpt") == slurp(cb.out / "tuned_d1_inter.ckpt"));
    CHECK(slurp(ca.out / "motifs" / "motifs_d0.tsv") == slurp(cb.out / "motifs" / "motifs_d0.tsv"));
    const auto r = run_evaluate(cb, tuned_checkpoint(cb, 1, Task::inter), 1, Task::inter, cb.eval.protocol,
                                eval_seed(cb.train.seed, 1, Task::inter));
    CHECK(slurp(ca.out / "report.tsv").find(report_line("inter", 1, r)) != std::string::npos);

    auto ws = load_workspace(cb);
    auto model = load_model(cb, ws, tuned_checkpoint(cb, 1, Task::inter));
    CHECK(model.stage() == "tuned");
    auto other = small_config(b, 2, "walk");
    other.train.dim = 16;
    CHECK_THROWS(load_model(other, ws, tuned_checkpoint(cb, 1, Task::inter)));
  }
}
