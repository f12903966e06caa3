#include "mop/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mop/errors.hpp"

namespace mop {

double hr_at_k(double rank, std::size_t k) { return rank <= static_cast<double>(k) ? 1.0 : 0.0; }

double ndcg_at_k(double rank, std::size_t k) {
  return rank <= static_cast<double>(k) ? 1.0 / std::log2(rank + 1.0) : 0.0;
}

double mean_tied_rank(double positive_score, std::span<const double> negative_scores) {
  std::size_t above = 0, ties = 0;
  for (double s : negative_scores) {
    above += s > positive_score;
    ties += s == positive_score;
  }
  return 1.0 + static_cast<double>(above) + 0.5 * static_cast<double>(ties);
}

std::string to_string(const ProtocolSpec& p) {
  return p.kind == Protocol::full ? std::string("full") : "sampled:" + std::to_string(p.negatives);
}

ProtocolSpec parse_protocol(const std::string& s) {
  if (s == "full") return {Protocol::full, 0};
  if (s == "sampled") return {Protocol::sampled, 999};
  if (s.rfind("sampled:", 0) == 0) {
    try {
      const long n = std::stol(s.substr(8));
      if (n > 0) return {Protocol::sampled, static_cast<std::size_t>(n)};
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown protocol '" + s + "'");
}

std::vector<std::uint32_t> candidate_items(const EvalCase& ec, std::size_t c, std::size_t num_items,
                                           const ProtocolSpec& protocol, std::uint64_t seed, bool* fell_back) {
  if (ec.positive >= num_items) throw LookupError("held-out item outside the catalog");
  std::vector<std::uint32_t> eligible;
  for (std::uint32_t i = 0; i < num_items; ++i) {
    if (i != ec.positive && !ec.known.contains(i)) eligible.push_back(i);
  }
  std::vector<std::uint32_t> out{ec.positive};
  const bool full = protocol.kind == Protocol::full || eligible.size() < protocol.negatives;
  if (fell_back) *fell_back = protocol.kind == Protocol::sampled && full;
  if (full) {
    out.insert(out.end(), eligible.begin(), eligible.end());
    return out;
  }
  // Partial Fisher-Yates: the first `negatives` slots become a uniform sample.
  Rng rng(stream_seed(seed, {0x6576616cULL, c}));
  for (std::size_t j = 0; j < protocol.negatives; ++j) {
    const std::size_t pick = j + uniform_index(rng, eligible.size() - j);
    std::swap(eligible[j], eligible[pick]);
    out.push_back(eligible[j]);
  }
  return out;
}

EvalReport evaluate_ranking(std::span<const EvalCase> cases, std::size_t num_items, const ProtocolSpec& protocol,
                            std::uint64_t seed, const CaseScorer& scorer, std::size_t k) {
  EvalReport report;
  std::vector<double> scores;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    bool fell_back = false;
    const auto items = candidate_items(cases[c], c, num_items, protocol, seed, &fell_back);
    scores.assign(items.size(), 0.0);
    if (!scorer(c, items, scores)) {
      ++report.skipped;
      continue;
    }
    report.full_fallbacks += fell_back;
    const double rank = mean_tied_rank(scores[0], std::span<const double>(scores).subspan(1));
    report.ranks.push_back(rank);
    report.hr += hr_at_k(rank, k);
    report.ndcg += ndcg_at_k(rank, k);
  }
  report.n_users = report.ranks.size();
  if (report.n_users > 0) {
    report.hr /= static_cast<double>(report.n_users);
    report.ndcg /= static_cast<double>(report.n_users);
  }
  return report;
}

std::string report_line(const std::string& task, int domain, const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s\t%d\t%.6f\t%.6f\t%zu", task.c_str(), domain, r.hr, r.ndcg, r.n_users);
  return buf;
}

}  // namespace mop
