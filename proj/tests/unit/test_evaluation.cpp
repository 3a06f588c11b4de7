#include "unit/doctest_main.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "m3/error.hpp"
#include "m3/evaluation.hpp"

using namespace m3;

namespace {

// Textbook AP@n: mean over relevant hits within the cutoff of precision@k,
// normalised by min(#relevant, n).
double textbook_ap(const std::vector<std::size_t>& ranking, const std::vector<std::size_t>& relevant,
                   std::size_t n) {
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < std::min(n, ranking.size()); ++k) {
    if (std::find(relevant.begin(), relevant.end(), ranking[k]) != relevant.end()) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(std::min(relevant.size(), n));
}

SequenceSet toy_set(std::size_t n_items, const std::vector<std::size_t>& targets) {
  SequenceSet set;
  set.meta.n_items = n_items;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    UserSequence s;
    s.user = std::to_string(i);
    s.events = {Event{0, {}, {}, {}}, Event{targets[i], {}, {}, {}}};
    set.sequences.push_back(s);
  }
  return set;
}

}  // namespace

TEST_CASE("average precision examples") {
  CHECK(average_precision(1, 5) == 1.0);
  CHECK(average_precision(3, 5) == doctest::Approx(1.0 / 3.0));
  CHECK(average_precision(7, 5) == 0.0);
  const std::vector<std::vector<std::size_t>> rankings{{4, 1, 2}, {0, 1, 2}};
  const std::size_t targets[] = {4, 2};
  CHECK(map_at_n(rankings, targets, 1) == 0.5);
  CHECK_THROWS_AS(average_precision(0, 5), Error);
}

TEST_CASE("map_at_n rejects repeated items") {
  const std::vector<std::vector<std::size_t>> rankings{{1, 2, 1}};
  const std::size_t targets[] = {2};
  CHECK_THROWS_AS(map_at_n(rankings, targets, 5), Error);
}

TEST_CASE("map_at_n agrees with exhaustive textbook AP for vocab up to 8") {
  for (std::size_t vocab = 1; vocab <= 8; ++vocab) {
    std::vector<std::size_t> perm(vocab);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<std::vector<std::size_t>> all;
    std::vector<std::size_t> targets;
    do {
      for (std::size_t t = 0; t < vocab; ++t) {
        all.push_back(perm);
        targets.push_back(t);
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    double prev = 0;
    for (std::size_t n = 1; n <= vocab + 1; ++n) {
      double expect = 0;
      for (std::size_t i = 0; i < all.size(); ++i) expect += textbook_ap(all[i], {targets[i]}, n);
      expect /= static_cast<double>(all.size());
      // Per instance too, on a sample of rankings.
      for (std::size_t i = 0; i < all.size(); i += 97) {
        const std::vector<std::vector<std::size_t>> one{all[i]};
        CHECK(map_at_n(one, std::span(&targets[i], 1), n) == textbook_ap(all[i], {targets[i]}, n));
      }
      const double got = map_at_n(all, targets, n);
      CHECK(got == doctest::Approx(expect).epsilon(1e-14));
      CHECK(got >= prev);
      prev = got;
    }
  }
}

TEST_CASE("rank_of breaks ties by ascending index") {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.5, 0.1};
  CHECK(rank_of(s, 1) == 1);
  CHECK(rank_of(s, 0) == 2);
  CHECK(rank_of(s, 2) == 3);
  CHECK(rank_of(s, 3) == 4);
  CHECK(rank_of(s, 4) == 5);
}

TEST_CASE("evaluate with constant, oracle and adversarial scorers") {
  const auto set = toy_set(5, {0, 2, 4});
  const std::size_t ns[] = {1, 3, 5};

  Scorer flat = [](std::span<const Event>, const std::vector<std::size_t>&) {
    return std::vector<double>(5, 0.0);
  };
  const auto r = evaluate(flat, set, ns);
  CHECK(r.n_examples == 3);
  CHECK(r.at(1) == doctest::Approx(1.0 / 3));
  CHECK(r.at(3) == doctest::Approx((1.0 + 1.0 / 3) / 3));
  CHECK(r.at(5) == doctest::Approx((1.0 + 1.0 / 3 + 1.0 / 5) / 3));

  // The scorer cannot see the target, so the oracle peeks at the set.
  std::size_t next = 0;
  const std::vector<std::size_t> order{0, 2, 4};
  Scorer oracle = [&](std::span<const Event>, const std::vector<std::size_t>&) {
    std::vector<double> s(5, 0.0);
    s[order[next++]] = 1.0;
    return s;
  };
  const auto o = evaluate(oracle, set, ns);
  CHECK(o.map == std::vector<double>{1, 1, 1});

  next = 0;
  Scorer adversarial = [&](std::span<const Event>, const std::vector<std::size_t>&) {
    std::vector<double> s(5, 1.0);
    s[order[next++]] = -1.0;
    return s;
  };
  const std::size_t small[] = {1, 2, 4};
  CHECK(evaluate(adversarial, set, small).map == std::vector<double>{0, 0, 0});
}

TEST_CASE("evaluate is order and thread invariant") {
  std::mt19937_64 rng(3);
  std::vector<std::size_t> targets(200);
  for (auto& t : targets) t = rng() % 30;
  auto set = toy_set(30, targets);
  // Deterministic pseudo-scores keyed by the history content.
  Scorer scorer = [](std::span<const Event> h, const std::vector<std::size_t>&) {
    std::vector<double> s(30);
    for (std::size_t v = 0; v < 30; ++v) s[v] = static_cast<double>((v * 7 + h.size() * 3) % 11);
    return s;
  };
  const std::size_t ns[] = {5, 10, 20};
  const auto a = evaluate(scorer, set, ns);
  std::shuffle(set.sequences.begin(), set.sequences.end(), rng);
  const auto b = evaluate(scorer, set, ns);
  const auto c = evaluate(scorer, set, ns, 4);
  CHECK(a.map[0] == doctest::Approx(b.map[0]).epsilon(1e-15));
  CHECK(b.map == c.map);
  CHECK(a.map[0] <= a.map[1]);
  CHECK(a.map[1] <= a.map[2]);
}

TEST_CASE("evaluate model rejects vocabulary mismatch") {
  M3Config c;
  M3Model<double> model(c, DatasetMeta{10, {}, {}}, 1);
  const auto set = toy_set(12, {1, 2});
  const std::size_t ns[] = {5};
  try {
    evaluate(model, set, ns);
    FAIL("expected mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::vocabulary_mismatch);
  }
  const auto ok = evaluate(model, toy_set(10, {1, 2}), ns);
  CHECK(ok.n_examples == 2);
}

TEST_CASE("metrics csv layout") {
  MetricsReport r{{5, 10, 20}, {0.25, 0.5, 0.75}, 4};
  std::ostringstream out;
  write_metrics_csv(out, {{"m3r", "TSL", "bottom", r}});
  CHECK(out.str() ==
        "model,subset,gate_type,map5,map10,map20,n_examples\n"
        "m3r,TSL,bottom,0.25,0.5,0.75,4\n");
}

TEST_CASE("gate means") {
  const std::size_t one_group[] = {0};
  const std::array<double, 3> one[] = {{0.2, 0.9, 0.4}};
  auto rows = mean_gates(one_group, one);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean == std::array<double, 3>{0.2, 0.9, 0.4});

  const std::size_t groups[] = {1, 1};
  const std::array<double, 3> two[] = {{0.2, 0.8, 0.4}, {0.4, 0.6, 0.6}};
  rows = mean_gates(groups, two);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean[0] == doctest::Approx(0.3));
  CHECK(rows[0].mean[1] == doctest::Approx(0.7));
  CHECK(rows[0].mean[2] == doctest::Approx(0.5));
  CHECK(rows[0].count == 2);

  std::ostringstream out;
  write_gate_csv(out, rows, {{1, "detail"}});
  CHECK(out.str() == "group,count,gate_t,gate_s,gate_l\ndetail,2,0.30000000000000004,0.69999999999999996,0.5\n");
}

TEST_CASE("fixed gate reports ones for every group") {
  M3Config c;
  c.gate = GateType::fixed;
  DatasetMeta meta{6, {2}, {2}};
  M3Model<double> model(c, meta, 1);
  SequenceSet set;
  set.meta = meta;
  for (std::size_t i = 0; i < 6; ++i) {
    UserSequence s;
    s.user = std::to_string(i);
    s.events = {Event{1, {0}, {0}, {}}, Event{i, {i % 2}, {i % 2}, {}}};
    set.sequences.push_back(s);
  }
  const auto rows = gate_report(model, set, GroupKey::parse("context", meta));
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.mean == std::array<double, 3>{1, 1, 1});
    CHECK(r.count == 3);
  }
  CHECK_THROWS_AS(GroupKey::parse("ctx_in:3", meta), Error);
  CHECK(GroupKey::parse("ctx_in:1", DatasetMeta{6, {2, 2}, {}}).feature == 1);
  CHECK_THROWS_AS(GroupKey::parse("context", DatasetMeta{6, {}, {}}), Error);
}
