#pragma once

// Leave-one-out ranking evaluation with HR@K / NDCG@K.

#include <functional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mop/util.hpp"

namespace mop {

/// Ranks may be fractional: ties are resolved to the mean tied rank.
double hr_at_k(double rank, std::size_t k);
double ndcg_at_k(double rank, std::size_t k);

/// 1 + #(scores above the positive) + #(ties) / 2.
double mean_tied_rank(double positive_score, std::span<const double> negative_scores);

enum class Protocol : std::uint8_t { sampled, full };

struct ProtocolSpec {
  Protocol kind = Protocol::sampled;
  std::size_t negatives = 999;
};

std::string to_string(const ProtocolSpec& p);
/// "full", "sampled" (999 negatives) or "sampled:<n>".
ProtocolSpec parse_protocol(const std::string& s);

/// One held-out positive. `known` lists items never drawn as negatives; the
/// positive is excluded automatically.
struct EvalCase {
  std::size_t user = 0;
  std::uint32_t positive = 0;
  std::unordered_set<std::uint32_t> known;
};

/// Fills `scores[j]` with the score of candidate item `items[j]` for case `c`.
/// Returning false skips the case (e.g. a user without embedding).
using CaseScorer = std::function<bool(std::size_t c, std::span<const std::uint32_t> items, std::span<double> scores)>;

struct EvalReport {
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t n_users = 0;
  std::size_t skipped = 0;
  std::size_t full_fallbacks = 0;
  std::vector<double> ranks;
};

/// Candidates per case: the positive plus `negatives` items drawn without
/// replacement from the non-known catalog (seeded per case), or the whole
/// non-known catalog under the full protocol or when too few items qualify.
EvalReport evaluate_ranking(std::span<const EvalCase> cases, std::size_t num_items, const ProtocolSpec& protocol,
                            std::uint64_t seed, const CaseScorer& scorer, std::size_t k = 10);

/// Candidate list (positive first) used for case `c`; exposed for tests.
std::vector<std::uint32_t> candidate_items(const EvalCase& ec, std::size_t c, std::size_t num_items,
                                           const ProtocolSpec& protocol, std::uint64_t seed, bool* fell_back = nullptr);

/// `task<TAB>domain<TAB>HR@10<TAB>NDCG@10<TAB>n_users`.
std::string report_line(const std::string& task, int domain, const EvalReport& r);

}  // namespace mop
