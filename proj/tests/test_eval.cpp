#include <doctest.h>

#include <cmath>
#include <set>

#include "mop/eval.hpp"
#include "support.hpp"

using namespace mop;

namespace {

/// Positive scores 0; the first rank-1 negatives score 1, the rest -1.
EvalReport fixture(const std::vector<std::size_t>& ranks) {
  std::vector<EvalCase> cases;
  for (std::size_t u = 0; u < ranks.size(); ++u) cases.push_back({u, 0, {}});
  return evaluate_ranking(cases, 30, {Protocol::full, 0}, 1,
                          [&](std::size_t c, std::span<const std::uint32_t>, std::span<double> s) {
                            for (std::size_t j = 1; j < s.size(); ++j) s[j] = j < ranks[c] ? 1.0 : -1.0;
                            s[0] = 0.0;
                            return true;
                          });
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("single-rank metrics") {
    CHECK(hr_at_k(1, 10) == 1.0);
    CHECK(ndcg_at_k(1, 10) == 1.0);
    CHECK(ndcg_at_k(3, 10) == 0.5);
    CHECK(hr_at_k(11, 10) == 0.0);
    CHECK(ndcg_at_k(11, 10) == 0.0);
    CHECK(hr_at_k(10, 10) == 1.0);
  }

  TEST_CASE("three-user fixture") {
    auto r = fixture({1, 4, 20});
    CHECK(r.ranks == std::vector<double>{1, 4, 20});
    CHECK(r.hr == 2.0 / 3.0);
    CHECK(r.ndcg == (1.0 + 1.0 / std::log2(5.0)) / 3.0);
    CHECK(r.n_users == 3);
  }

  TEST_CASE("perfect scorer") {
    auto r = fixture({1, 1, 1, 1});
    CHECK(r.hr == 1.0);
    CHECK(r.ndcg == 1.0);
  }

  TEST_CASE("ties take the mean rank") {
    std::vector<double> negs{0.5, 0.5, 0.1, 0.9};
    CHECK(mean_tied_rank(0.5, negs) == 3.0);
    CHECK(mean_tied_rank(1.0, negs) == 1.0);
  }

  TEST_CASE("protocol parsing") {
    CHECK(parse_protocol("full").kind == Protocol::full);
    CHECK(parse_protocol("sampled").negatives == 999);
    CHECK(parse_protocol("sampled:99").negatives == 99);
    CHECK_THROWS_AS(parse_protocol("sampled:0"), ConfigError);
    CHECK_THROWS_AS(parse_protocol("top"), ConfigError);
    CHECK(to_string(parse_protocol("sampled:7")) == "sampled:7");
  }

  TEST_CASE("candidates exclude known items and are seeded") {
    EvalCase ec{0, 5, {1, 2, 3}};
    auto a = candidate_items(ec, 4, 200, {Protocol::sampled, 50}, 9);
    CHECK(a.size() == 51);
    CHECK(a[0] == 5);
    std::set<std::uint32_t> uniq(a.begin(), a.end());
    CHECK(uniq.size() == a.size());
    for (auto i : {1u, 2u, 3u}) CHECK_FALSE(uniq.contains(i));
    CHECK(candidate_items(ec, 4, 200, {Protocol::sampled, 50}, 9) == a);
    CHECK(candidate_items(ec, 5, 200, {Protocol::sampled, 50}, 9) != a);
    bool fell = false;
    auto small = candidate_items(ec, 0, 20, {Protocol::sampled, 50}, 9, &fell);
    CHECK(fell);
    CHECK(small.size() == 17);
  }

  TEST_CASE("random scores under sampled(999) hit 1%") {
    const std::size_t users = 3000;
    std::vector<EvalCase> cases;
    for (std::size_t u = 0; u < users; ++u) cases.push_back({u, static_cast<std::uint32_t>(u % 1500), {}});
    Rng rng(77);
    std::uniform_real_distribution<double> unit;
    auto r = evaluate_ranking(cases, 1500, {Protocol::sampled, 999}, 3,
                              [&](std::size_t, std::span<const std::uint32_t>, std::span<double> s) {
                                for (auto& v : s) v = unit(rng);
                                return true;
                              });
    const double sigma = std::sqrt(0.01 * 0.99 / static_cast<double>(users));
    CHECK(std::abs(r.hr - 0.01) <= 3.0 * sigma);
  }

  TEST_CASE("monotone score transforms leave metrics unchanged") {
    std::vector<EvalCase> cases;
    for (std::size_t u = 0; u < 50; ++u) cases.push_back({u, static_cast<std::uint32_t>(u), {}});
    auto run = [&](auto f) {
      return evaluate_ranking(cases, 300, {Protocol::sampled, 99}, 5,
                              [&](std::size_t c, std::span<const std::uint32_t> items, std::span<double> s) {
                                for (std::size_t j = 0; j < items.size(); ++j) s[j] = f(std::sin(double(items[j] * 7 + c)));
                                return true;
                              });
    };
    auto a = run([](double x) { return x; });
    auto b = run([](double x) { return std::exp(3.0 * x) + 2.0; });
    CHECK(a.ranks == b.ranks);
    CHECK(a.hr == b.hr);
  }

  TEST_CASE("skipped cases are counted") {
    std::vector<EvalCase> cases{{0, 1, {}}, {1, 2, {}}};
    auto r = evaluate_ranking(cases, 10, {Protocol::full, 0}, 1,
                              [](std::size_t c, std::span<const std::uint32_t>, std::span<double>) { return c == 0; });
    CHECK(r.skipped == 1);
    CHECK(r.n_users == 1);
  }

  TEST_CASE("report line") {
    EvalReport r;
    r.hr = 0.25;
    r.ndcg = 0.125;
    r.n_users = 4;
    CHECK(report_line("intra", 1, r) == "intra\t1\t0.250000\t0.125000\t4");
  }
}
