#include "mop/graph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>

namespace mop {

const char* to_string(NodeKind kind) { return kind == NodeKind::user ? "user" : "item"; }

namespace {

std::vector<std::uint64_t> sorted_unique(std::vector<std::uint64_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

node_t index_of(const std::vector<std::uint64_t>& sorted, std::uint64_t id) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), id);
  return static_cast<node_t>(it - sorted.begin());
}

bool parse_u64(std::string_view s, std::uint64_t& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

bool blank(std::string_view line) {
  return line.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace

DomainGraph DomainGraph::from_edges(int domain_id,
                                    std::span<const std::pair<std::uint64_t, std::uint64_t>> edges,
                                    std::span<const std::uint64_t> extra_users,
                                    std::span<const std::uint64_t> extra_items) {
  DomainGraph g;
  g.domain_id_ = domain_id;
  std::vector<std::uint64_t> users(extra_users.begin(), extra_users.end());
  std::vector<std::uint64_t> items(extra_items.begin(), extra_items.end());
  for (const auto& [u, i] : edges) {
    users.push_back(u);
    items.push_back(i);
  }
  g.user_ext_ = sorted_unique(std::move(users));
  g.item_ext_ = sorted_unique(std::move(items));

  const std::size_t n = g.num_nodes();
  std::vector<std::vector<node_t>> adj(n);
  for (const auto& [u, i] : edges) {
    node_t un = index_of(g.user_ext_, u);
    node_t in = g.item_node(index_of(g.item_ext_, i));
    adj[un].push_back(in);
    adj[in].push_back(un);
  }
  g.offsets_.assign(n + 1, 0);
  for (std::size_t v = 0; v < n; ++v) {
    auto& list = adj[v];
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
    g.offsets_[v + 1] = g.offsets_[v] + list.size();
  }
  g.adjacency_.reserve(g.offsets_[n]);
  for (auto& list : adj) g.adjacency_.insert(g.adjacency_.end(), list.begin(), list.end());
  g.num_edges_ = g.offsets_[n] / 2;
  g.global_.assign(n, kNoGlobalId);
  g.overlapped_.assign(n, 0);
  g.compute_priority();
  return g;
}

void DomainGraph::compute_priority() {
  const std::size_t n = num_nodes();
  std::vector<node_t> order(n);
  std::iota(order.begin(), order.end(), node_t{0});
  std::sort(order.begin(), order.end(), [this](node_t a, node_t b) {
    std::size_t da = degree(a), db = degree(b);
    return da != db ? da < db : a < b;
  });
  priority_.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) priority_[order[r]] = r + 1;
}

node_t DomainGraph::check(node_t n) const {
  if (n >= num_nodes()) {
    throw LookupError("node " + std::to_string(n) + " not in domain " + std::to_string(domain_id_));
  }
  return n;
}

std::span<const node_t> DomainGraph::neighbors(node_t n) const {
  check(n);
  return {adjacency_.data() + offsets_[n], offsets_[n + 1] - offsets_[n]};
}

bool DomainGraph::has_edge(node_t a, node_t b) const {
  auto nb = neighbors(a);
  return std::binary_search(nb.begin(), nb.end(), b);
}

std::uint64_t DomainGraph::external_id(node_t n) const {
  check(n);
  return is_user(n) ? user_ext_[n] : item_ext_[item_index(n)];
}

std::optional<node_t> DomainGraph::find(NodeKind kind, std::uint64_t external) const {
  const auto& ids = kind == NodeKind::user ? user_ext_ : item_ext_;
  auto it = std::lower_bound(ids.begin(), ids.end(), external);
  if (it == ids.end() || *it != external) return std::nullopt;
  auto idx = static_cast<std::size_t>(it - ids.begin());
  return kind == NodeKind::user ? user_node(idx) : item_node(idx);
}

node_t DomainGraph::lookup(NodeKind kind, std::uint64_t external) const {
  auto n = find(kind, external);
  if (!n) {
    throw LookupError(std::string(to_string(kind)) + " " + std::to_string(external) +
                      " not in domain " + std::to_string(domain_id_));
  }
  return *n;
}

NodeRef DomainGraph::ref(node_t n) const {
  check(n);
  return NodeRef{kind(n), global_[n], n};
}

std::size_t DomainGraph::priority(const NodeRef& n) const {
  if (n.local >= num_nodes() || kind(n.local) != n.kind) {
    throw LookupError("node not in domain " + std::to_string(domain_id_));
  }
  return priority_[n.local];
}

void DomainGraph::set_global(node_t n, std::uint32_t global_id, bool overlapped) {
  global_[check(n)] = global_id;
  overlapped_[n] = overlapped ? 1 : 0;
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> DomainGraph::edge_list() const {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  out.reserve(num_edges_);
  for (node_t u = 0; u < num_users(); ++u) {
    for (node_t i : neighbors(u)) out.emplace_back(user_ext_[u], item_ext_[item_index(i)]);
  }
  return out;
}

DomainGraph load_interactions(const std::filesystem::path& path, int domain_id) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open interaction file " + path.string());
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    auto fields = split_tabs(line);
    std::uint64_t u = 0, i = 0;
    if (fields.size() != 2 || !parse_u64(fields[0], u) || !parse_u64(fields[1], i)) {
      throw ParseError("expected 'user<TAB>item' with non-negative integer ids in " +
                           path.string(),
                       line_no);
    }
    edges.emplace_back(u, i);
  }
  return DomainGraph::from_edges(domain_id, edges);
}

std::size_t priority(const DomainGraph& graph, const NodeRef& n) { return graph.priority(n); }

void OverlapRegistry::register_overlap(const DomainGraph& a, const DomainGraph& b,
                                       std::span<const OverlapLink> links) {
  if (a.domain_id() == b.domain_id()) {
    throw ValidationError("overlap must join two distinct domains");
  }
  for (const auto& link : links) {
    if (!a.find(role_, link.a_external)) {
      throw ValidationError(std::string(to_string(role_)) + " " + std::to_string(link.a_external) +
                            " missing from domain " + std::to_string(a.domain_id()));
    }
    if (!b.find(role_, link.b_external)) {
      throw ValidationError(std::string(to_string(role_)) + " " + std::to_string(link.b_external) +
                            " missing from domain " + std::to_string(b.domain_id()));
    }
    auto la = label_of(a.domain_id(), link.a_external);
    auto lb = label_of(b.domain_id(), link.b_external);
    if ((la && *la != link.global_label) || (lb && *lb != link.global_label)) {
      throw ValidationError("conflicting global id for overlapped node " +
                            std::to_string(link.global_label));
    }
  }
  auto& bucket = links_[{a.domain_id(), b.domain_id()}];
  for (const auto& link : links) {
    bucket.push_back(link);
    label_by_node_[{a.domain_id(), link.a_external}] = link.global_label;
    label_by_node_[{b.domain_id(), link.b_external}] = link.global_label;
  }
}

void OverlapRegistry::register_overlap(const DomainGraph& a, const DomainGraph& b,
                                       const std::set<std::uint64_t>& ids) {
  std::vector<OverlapLink> links;
  for (auto id : ids) links.push_back({id, id, id});
  register_overlap(a, b, links);
}

std::set<std::uint64_t> OverlapRegistry::intersection(int domain_a, int domain_b) const {
  std::set<std::uint64_t> out;
  for (auto key : {std::pair{domain_a, domain_b}, std::pair{domain_b, domain_a}}) {
    auto it = links_.find(key);
    if (it == links_.end()) continue;
    for (const auto& link : it->second) out.insert(link.global_label);
  }
  return out;
}

std::optional<std::uint64_t> OverlapRegistry::label_of(int domain, std::uint64_t external) const {
  auto it = label_by_node_.find({domain, external});
  if (it == label_by_node_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::pair<std::pair<int, int>, OverlapLink>> OverlapRegistry::links() const {
  std::vector<std::pair<std::pair<int, int>, OverlapLink>> out;
  for (const auto& [key, list] : links_) {
    for (const auto& link : list) out.emplace_back(key, link);
  }
  return out;
}

OverlapRegistry register_overlap(OverlapRegistry registry, const DomainGraph& a,
                                 const DomainGraph& b, const std::set<std::uint64_t>& ids) {
  registry.register_overlap(a, b, ids);
  return registry;
}

OverlapRegistry load_overlap(const std::filesystem::path& path, const DomainGraph& a,
                             const DomainGraph& b) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open overlap file " + path.string());
  std::vector<OverlapLink> links;
  std::optional<NodeKind> role;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    auto f = split_tabs(line);
    OverlapLink link;
    if (f.size() != 4 || !parse_u64(f[1], link.a_external) || !parse_u64(f[2], link.b_external) ||
        !parse_u64(f[3], link.global_label)) {
      throw ParseError("expected 'kind<TAB>a_local<TAB>b_local<TAB>global_id' in " + path.string(),
                       line_no);
    }
    NodeKind kind;
    if (f[0] == "user") {
      kind = NodeKind::user;
    } else if (f[0] == "item") {
      kind = NodeKind::item;
    } else {
      throw ParseError("overlap kind must be 'user' or 'item'", line_no);
    }
    if (role && *role != kind) throw ParseError("mixed overlap kinds in one file", line_no);
    role = kind;
    links.push_back(link);
  }
  OverlapRegistry registry(role.value_or(NodeKind::user));
  registry.register_overlap(a, b, links);
  return registry;
}

Universe assign_global_ids(std::span<DomainGraph> domains, const OverlapRegistry& registry) {
  Universe u;
  std::map<std::uint64_t, std::uint32_t> label_to_global;
  for (auto& g : domains) {
    for (node_t n = 0; n < g.num_nodes(); ++n) {
      const NodeKind kind = g.kind(n);
      auto& members = kind == NodeKind::user ? u.user_members : u.item_members;
      std::optional<std::uint64_t> label;
      if (kind == registry.role()) label = registry.label_of(g.domain_id(), g.external_id(n));
      std::uint32_t gid;
      if (label) {
        auto it = label_to_global.find(*label);
        if (it == label_to_global.end()) {
          gid = static_cast<std::uint32_t>(members.size());
          members.emplace_back();
          label_to_global.emplace(*label, gid);
        } else {
          gid = it->second;
        }
      } else {
        gid = static_cast<std::uint32_t>(members.size());
        members.emplace_back();
      }
      members[gid].emplace_back(g.domain_id(), n);
      g.set_global(n, gid, label.has_value());
    }
  }
  u.num_users = u.user_members.size();
  u.num_items = u.item_members.size();
  return u;
}

}  // namespace mop
