#include "mop/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mop/config.hpp"
#include "mop/util.hpp"

namespace mop {

void SynthSpec::validate() const {
  if (domains < 1) throw ConfigError("need at least one domain");
  if (clusters < 2) throw ConfigError("need at least two clusters");
  if (users == 0 || items == 0) throw ConfigError("users and items must be positive");
  if (items < clusters) throw ConfigError("fewer items than clusters");
  if (!(overlap >= 0.0 && overlap <= 1.0)) throw ConfigError("overlap fraction must lie in [0, 1]");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("noise must lie in [0, 1]");
  if (min_degree == 0 || min_degree > max_degree) throw ConfigError("bad degree range");
  if (!(popularity >= 0.0)) throw ConfigError("popularity exponent must be non-negative");
}

SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthDataset data;
  data.spec = spec;
  Rng rng(stream_seed(spec.seed, {0x73796e7468ULL}));
  const auto n_ov = static_cast<std::size_t>(std::llround(spec.overlap * static_cast<double>(spec.users)));
  std::uniform_int_distribution<std::size_t> pick_cluster(0, spec.clusters - 1);
  std::vector<std::size_t> shared_cluster(n_ov);
  for (auto& c : shared_cluster) c = pick_cluster(rng);

  // Position of each shared user in every domain's external id space.
  std::vector<std::vector<std::size_t>> shared_pos(spec.domains);
  data.overlap.assign(spec.domains > 1 ? spec.domains - 1 : 0, {});
  for (std::size_t k = 0; k < spec.domains; ++k) {
    std::vector<std::size_t> ids(spec.users);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    shared_pos[k].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_ov));
  }
  for (std::size_t k = 1; k < spec.domains; ++k) {
    for (std::size_t s = 0; s < n_ov; ++s) data.overlap[k - 1].push_back({shared_pos[0][s], shared_pos[k][s], s});
  }

  const std::size_t block = spec.items / spec.clusters;
  auto cluster_of_item = [&](std::size_t i) { return std::min(i / block, spec.clusters - 1); };

  for (std::size_t k = 0; k < spec.domains; ++k) {
    SynthDomain dom;
    dom.user_cluster.assign(spec.users, 0);
    std::vector<std::uint8_t> is_shared(spec.users, 0);
    for (std::size_t s = 0; s < n_ov; ++s) {
      dom.user_cluster[shared_pos[k][s]] = shared_cluster[s];
      is_shared[shared_pos[k][s]] = 1;
    }
    for (std::size_t u = 0; u < spec.users; ++u) {
      if (!is_shared[u]) dom.user_cluster[u] = pick_cluster(rng);
    }
    dom.item_cluster.resize(spec.items);
    std::vector<std::vector<std::size_t>> members(spec.clusters);
    for (std::size_t i = 0; i < spec.items; ++i) {
      dom.item_cluster[i] = cluster_of_item(i);
      members[dom.item_cluster[i]].push_back(i);
    }
    // Zipf weights over a random popularity order inside each block.
    std::vector<double> weight(spec.items, 0.0);
    for (auto& block_items : members) {
      std::vector<std::size_t> order = block_items;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t r = 0; r < order.size(); ++r) {
        weight[order[r]] = 1.0 / std::pow(static_cast<double>(r + 1), spec.popularity);
      }
    }
    std::uniform_int_distribution<std::size_t> pick_degree(spec.min_degree, spec.max_degree);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t u = 0; u < spec.users; ++u) {
      const std::size_t c = dom.user_cluster[u];
      const std::size_t deg = std::min(pick_degree(rng), spec.items);
      std::vector<std::uint8_t> taken(spec.items, 0);
      std::size_t in_left = members[c].size(), out_left = spec.items - members[c].size();
      for (std::size_t n = 0; n < deg; ++n) {
        bool outside = unit(rng) < spec.noise;
        if (outside && out_left == 0) outside = false;
        if (!outside && in_left == 0) outside = true;
        std::size_t item = 0;
        if (outside) {
          do {
            item = uniform_index(rng, spec.items);
          } while (taken[item] || dom.item_cluster[item] == c);
          --out_left;
        } else {
          double total = 0.0;
          for (auto i : members[c]) total += taken[i] ? 0.0 : weight[i];
          double x = unit(rng) * total;
          item = members[c].back();
          for (auto i : members[c]) {
            if (taken[i]) continue;
            item = i;
            x -= weight[i];
            if (x < 0.0) break;
          }
          --in_left;
        }
        taken[item] = 1;
        dom.interactions.emplace_back(u, item);
      }
    }
    data.domains.push_back(std::move(dom));
  }
  return data;
}

namespace {

template <class Fn>
void write_atomic(const std::filesystem::path& path, Fn body) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp.string());
    body(out);
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void write_synthetic(const std::filesystem::path& dir, const SynthDataset& data) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < data.domains.size(); ++k) {
    write_atomic(dir / ("domain" + std::to_string(k) + ".tsv"), [&](std::ostream& out) {
      for (const auto& [u, i] : data.domains[k].interactions) out << u << '\t' << i << '\n';
    });
  }
  for (std::size_t k = 1; k < data.domains.size(); ++k) {
    write_atomic(dir / ("overlap_0_" + std::to_string(k) + ".tsv"), [&](std::ostream& out) {
      for (const auto& l : data.overlap[k - 1]) {
        out << "user\t" << l.a_external << '\t' << l.b_external << '\t' << l.global_label << '\n';
      }
    });
  }
  const auto& s = data.spec;
  write_atomic(dir / "manifest.tsv", [&](std::ostream& out) {
    out << "# domains=" << s.domains << " users=" << s.users << " items=" << s.items << " clusters=" << s.clusters
        << " overlap=" << format_double(s.overlap) << " noise=" << format_double(s.noise)
        << " degree=" << s.min_degree << "-" << s.max_degree << " popularity=" << format_double(s.popularity)
        << " seed=" << s.seed << '\n';
    for (std::size_t k = 0; k < data.domains.size(); ++k) {
      const auto& d = data.domains[k];
      for (std::size_t u = 0; u < d.user_cluster.size(); ++u) out << "user\t" << k << '\t' << u << '\t' << d.user_cluster[u] << '\n';
      for (std::size_t i = 0; i < d.item_cluster.size(); ++i) out << "item\t" << k << '\t' << i << '\t' << d.item_cluster[i] << '\n';
    }
  });
}

}  // namespace mop
