#include "mop/objectives.hpp"

namespace mop {

const char* to_string(Denominator d) { return d == Denominator::with_pos ? "with_pos" : "without_pos"; }

Denominator parse_denominator(const std::string& s) {
  if (s == "with_pos") return Denominator::with_pos;
  if (s == "without_pos") return Denominator::without_pos;
  throw ConfigError("unknown denominator '" + s + "'");
}

ad::Var infonce(const MSLBatch& batch) {
  if (!(batch.tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t a = batch.anchors.rows(), c = batch.candidates.rows();
  require_shape(batch.positive.size() == a, "one positive per anchor");
  std::vector<std::uint8_t> include = batch.include;
  if (include.empty()) include.assign(a * c, 1);
  require_shape(include.size() == a * c, "include mask must be anchors x candidates");
  for (std::size_t r = 0; r < a; ++r) {
    const std::size_t p = r * c + batch.positive[r];
    include[p] = batch.denominator == Denominator::with_pos ? 1 : 0;
    std::size_t negatives = 0;
    for (std::size_t j = 0; j < c; ++j) negatives += (include[r * c + j] != 0 && j != batch.positive[r]);
    if (negatives == 0) throw ValidationError("anchor without negatives");
  }
  ad::Var logits = ad::scale(ad::cosine_matrix(batch.anchors, batch.candidates), 1.0 / batch.tau);
  return ad::info_nce(logits, batch.positive, std::move(include));
}

ad::Var infonce_aligned(ad::Var anchors, ad::Var positives, ad::Var negatives, std::size_t k, double tau,
                        Denominator denominator) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t a = anchors.rows();
  require_shape(positives.rows() == a && negatives.rows() == a * k, "aligned batch shapes");
  if (k == 0) throw ValidationError("anchor without negatives");
  // Only the 1 + k aligned similarities of each anchor are formed.
  std::vector<std::uint32_t> rep(a * k);
  for (std::size_t r = 0; r < a * k; ++r) rep[r] = static_cast<std::uint32_t>(r / k);
  ad::Var neg = ad::cosine_rows(ad::gather_rows(anchors, std::move(rep)), negatives);
  ad::Var logits = ad::cosine_rows(anchors, positives);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<std::uint32_t> col(a);
    for (std::size_t r = 0; r < a; ++r) col[r] = static_cast<std::uint32_t>(r * k + j);
    logits = ad::concat_cols(logits, ad::gather_rows(neg, std::move(col)));
  }
  std::vector<std::uint8_t> include(a * (k + 1), 1);
  if (denominator == Denominator::without_pos) {
    for (std::size_t r = 0; r < a; ++r) include[r * (k + 1)] = 0;
  }
  return ad::info_nce(ad::scale(logits, 1.0 / tau), std::vector<std::size_t>(a, 0), std::move(include));
}

namespace {

ad::Var add_opt(std::optional<ad::Var> x, ad::Var y) { return x ? ad::add(*x, y) : y; }

}  // namespace

std::optional<ad::Var> cl_loss(const ClViews& v, double tau, Denominator denominator) {
  std::optional<ad::Var> total;
  const std::size_t b = v.batch;
  if (!v.shared_anchors.empty() && b >= 2) {
    const std::size_t a = v.shared_anchors.size();
    MSLBatch batch;
    batch.anchors = ad::gather_rows(*v.shared_v1, {v.shared_anchors.begin(), v.shared_anchors.end()});
    batch.candidates = ad::concat_rows(*v.shared_v2, *v.shared_v1);
    const std::size_t c = a + b;
    batch.include.assign(a * c, 0);
    for (std::size_t r = 0; r < a; ++r) {
      batch.positive.push_back(r);
      for (std::size_t q = 0; q < b; ++q) batch.include[r * c + a + q] = q != v.shared_anchors[r];
    }
    batch.tau = tau;
    batch.denominator = denominator;
    total = add_opt(total, infonce(batch));
  }
  if (!v.specific_anchors.empty() && b >= 2) {
    MSLBatch batch;
    batch.anchors = *v.specific_v1;
    batch.candidates = *v.specific_v2;
    batch.positive = v.specific_anchors;
    batch.tau = tau;
    batch.denominator = denominator;
    total = add_opt(total, infonce(batch));
  }
  return total;
}

std::optional<ad::Var> er_loss(const ErViews& v, double tau, Denominator denominator) {
  std::optional<ad::Var> total;
  if (v.batch < 2) return total;
  auto term = [&](const std::vector<std::size_t>& anchors, const std::optional<ad::Var>& recon) {
    if (anchors.empty()) return;
    MSLBatch batch;
    batch.anchors = ad::gather_rows(*v.truth, {anchors.begin(), anchors.end()});
    batch.candidates = *recon;
    batch.positive = anchors;
    batch.tau = tau;
    batch.denominator = denominator;
    total = add_opt(total, infonce(batch));
  };
  term(v.shared_anchors, v.recon_shared);
  term(v.specific_anchors, v.recon_specific);
  return total;
}

void check_lambda1(double lambda1) {
  if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) throw ConfigError("lambda1 must lie in [0, 1]");
}

std::optional<ad::Var> pretrain_loss(std::optional<ad::Var> cl, std::optional<ad::Var> er, double lambda1) {
  check_lambda1(lambda1);
  if (lambda1 == 1.0) return cl;
  if (lambda1 == 0.0) return er;
  std::optional<ad::Var> total;
  if (cl) total = ad::scale(*cl, lambda1);
  if (er) total = add_opt(total, ad::scale(*er, 1.0 - lambda1));
  return total;
}

double pretrain_loss(double cl, double er, double lambda1) {
  check_lambda1(lambda1);
  if (lambda1 == 1.0) return cl;
  if (lambda1 == 0.0) return er;
  return lambda1 * cl + (1.0 - lambda1) * er;
}

ad::Var rec_loss(ad::Var users, ad::Var positives, ad::Var negatives, std::size_t k, double tau,
                 Denominator denominator) {
  if (k == 0) throw ConfigError("rec loss needs at least one negative");
  return infonce_aligned(users, positives, negatives, k, tau, denominator);
}

std::vector<std::uint32_t> sample_negatives(Rng& rng, std::size_t num_items,
                                            const std::unordered_set<std::uint32_t>& known, std::size_t k) {
  std::size_t known_in_range = 0;
  for (auto i : known) known_in_range += i < num_items;
  if (known_in_range >= num_items) throw SamplingError("user has interacted with every item");
  std::vector<std::uint32_t> out;
  out.reserve(k);
  while (out.size() < k) {
    const auto i = static_cast<std::uint32_t>(uniform_index(rng, num_items));
    if (!known.contains(i)) out.push_back(i);
  }
  return out;
}

}  // namespace mop
