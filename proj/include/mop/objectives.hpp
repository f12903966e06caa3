#pragma once

// Motif-based similarity learning: every loss below is InfoNCE over cosine
// similarities divided by a temperature.

#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "mop/autodiff.hpp"
#include "mop/util.hpp"

namespace mop {

enum class Denominator : std::uint8_t { with_pos, without_pos };

const char* to_string(Denominator d);
Denominator parse_denominator(const std::string& s);

/// Anchors (A x w) scored against candidates (C x w). Row a's positive is
/// candidate positive[a]; include (A x C, row-major, empty = all) selects the
/// negatives. The positive always sits in the numerator and enters the
/// denominator only under Denominator::with_pos.
struct MSLBatch {
  ad::Var anchors;
  ad::Var candidates;
  std::vector<std::size_t> positive;
  std::vector<std::uint8_t> include;
  double tau = 0.5;
  Denominator denominator = Denominator::with_pos;
};

/// Sum over anchors of -log softmax of the positive.
ad::Var infonce(const MSLBatch& batch);

/// Aligned form: anchor a has positive row a and negatives rows
/// [a*k, (a+1)*k) of `negatives`.
ad::Var infonce_aligned(ad::Var anchors, ad::Var positives, ad::Var negatives, std::size_t k, double tau,
                        Denominator denominator = Denominator::with_pos);

/// Two views per batch node. Overlapped nodes (indices `shared_anchors` into
/// the batch) contrast their two M-shared views against the first shared view
/// of every other batch node; the remaining nodes (`specific_anchors`)
/// contrast their first M-specific view against the second specific view of
/// every batch node.
struct ClViews {
  std::size_t batch = 0;
  std::vector<std::size_t> shared_anchors;
  std::vector<std::size_t> specific_anchors;
  std::optional<ad::Var> shared_v1;    // batch x w
  std::optional<ad::Var> shared_v2;    // |shared_anchors| x w, aligned with shared_anchors
  std::optional<ad::Var> specific_v1;  // |specific_anchors| x w, aligned with specific_anchors
  std::optional<ad::Var> specific_v2;  // batch x w
};

/// One domain's contrastive loss; nullopt when no anchor qualifies.
std::optional<ad::Var> cl_loss(const ClViews& views, double tau, Denominator denominator = Denominator::with_pos);

/// Ground truth z_n (batch x w) against reconstructions from masked motifs.
/// Overlapped anchors compare with the M-shared reconstructions of all batch
/// nodes, the others with the M-specific reconstructions.
struct ErViews {
  std::size_t batch = 0;
  std::vector<std::size_t> shared_anchors;
  std::vector<std::size_t> specific_anchors;
  std::optional<ad::Var> truth;           // batch x w
  std::optional<ad::Var> recon_shared;    // batch x w
  std::optional<ad::Var> recon_specific;  // batch x w
};

std::optional<ad::Var> er_loss(const ErViews& views, double tau, Denominator denominator = Denominator::with_pos);

/// lambda1 * cl + (1 - lambda1) * er. At lambda1 = 1 (0) the other term is not
/// evaluated at all. A missing term counts as zero.
std::optional<ad::Var> pretrain_loss(std::optional<ad::Var> cl, std::optional<ad::Var> er, double lambda1);
double pretrain_loss(double cl, double er, double lambda1);
void check_lambda1(double lambda1);

/// InfoNCE of composed user rows against their positive item rows and k
/// sampled negative item rows each.
ad::Var rec_loss(ad::Var users, ad::Var positives, ad::Var negatives, std::size_t k, double tau,
                 Denominator denominator = Denominator::with_pos);

/// k uniform draws (with replacement) from [0, num_items) minus `known`.
/// Throws SamplingError when every item is known.
std::vector<std::uint32_t> sample_negatives(Rng& rng, std::size_t num_items,
                                            const std::unordered_set<std::uint32_t>& known, std::size_t k);

}  // namespace mop
