#include "unit/doctest_main.hpp"

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "m3/error.hpp"
#include "m3/sequence_data.hpp"
#include "m3/synthetic.hpp"

using namespace m3;

namespace {

std::vector<UserSequence> make_sequences(std::vector<std::pair<std::string, std::size_t>> spec) {
  std::vector<UserSequence> out;
  std::size_t item = 0;
  for (auto& [user, len] : spec) {
    UserSequence s;
    s.user = user;
    for (std::size_t i = 0; i < len; ++i) {
      Event e;
      e.item = item++;
      s.events.push_back(e);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> lengths(const std::vector<UserSequence>& seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) out.push_back(s.events.size());
  return out;
}

std::vector<std::size_t> items(const UserSequence& s) {
  std::vector<std::size_t> out;
  for (const auto& e : s.events) out.push_back(e.item);
  return out;
}

}  // namespace

TEST_CASE("load_movielens sorts by timestamp and keeps every rating") {
  std::istringstream in(
      "userId,movieId,rating,timestamp\n"
      "7,10,2.5,200\n"
      "7,11,5.0,100\n"
      "3,10,4,50\n");
  const auto seqs = parse_movielens(in);
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].user == "3");
  CHECK(seqs[1].user == "7");
  REQUIRE(seqs[1].events.size() == 2);
  CHECK(seqs[1].events[0].timestamp == 100);
  CHECK(seqs[1].events[0].item == "11");
  CHECK(seqs[1].events[1].timestamp == 200);
}

TEST_CASE("load_movielens edge cases") {
  std::istringstream header_only("userId,movieId,rating,timestamp\n");
  CHECK(parse_movielens(header_only).empty());

  std::istringstream no_header("1,2,3.0,4\n");
  CHECK_THROWS_AS(parse_movielens(no_header), Error);

  std::istringstream bad_row("userId,movieId,rating,timestamp\n1,2,3.0,4\n1,2,x,5\n");
  try {
    parse_movielens(bad_row);
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }

  CHECK_THROWS_AS(load_movielens("/nonexistent/ratings.csv"), Error);
}

TEST_CASE("filter_items thresholds") {
  std::vector<RawSequence> raw(2);
  raw[0].user = "1";
  raw[1].user = "2";
  for (int i = 0; i < 19; ++i) raw[0].events.push_back({"rare", i});
  for (int i = 0; i < 25; ++i) raw[1].events.push_back({"common", i});

  auto r = filter_items(raw, 20);
  CHECK(r.vocabulary.size() == 1);
  CHECK(r.vocabulary.raw_id(0) == "common");
  CHECK(r.sequences.size() == 1);
  CHECK(r.sequences[0].user == "2");

  auto all = filter_items(raw, 1);
  CHECK(all.vocabulary.size() == 2);
  CHECK(all.sequences.size() == 2);
  CHECK(all.sequences[0].events.size() == 19);

  std::vector<RawSequence> ab(1);
  ab[0].user = "u";
  ab[0].events = {{"a", 0}, {"b", 1}, {"a", 2}, {"a", 3}};
  auto r2 = filter_items(ab, 2);
  REQUIRE(r2.vocabulary.size() == 1);
  CHECK(r2.vocabulary.raw_id(0) == "a");
  CHECK(r2.vocabulary.count(0) == 3);
}

TEST_CASE("filter_items is idempotent") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> item(0, 30), len(1, 40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RawSequence> raw(15);
    for (std::size_t u = 0; u < raw.size(); ++u) {
      raw[u].user = std::to_string(u);
      const int n = len(rng);
      for (int i = 0; i < n; ++i) raw[u].events.push_back({std::to_string(item(rng) * item(rng) % 31), i});
    }
    const std::size_t threshold = 1 + trial % 6;
    auto once = filter_items(raw, threshold);
    auto twice = filter_items(to_raw(once.sequences, once.vocabulary), threshold);
    CHECK(once.sequences == twice.sequences);
    REQUIRE(once.vocabulary.size() == twice.vocabulary.size());
    for (std::size_t i = 0; i < once.vocabulary.size(); ++i) {
      CHECK(once.vocabulary.raw_id(i) == twice.vocabulary.raw_id(i));
    }
  }
}

TEST_CASE("generate_windows examples") {
  DatasetConfig c;
  c.min_length = 2;
  c.window = 3;
  c.max_length.reset();
  CHECK(lengths(generate_windows(make_sequences({{"u", 7}}), c)) == std::vector<std::size_t>{3, 3});

  DatasetConfig ml = dataset_preset("ml20m");
  CHECK(generate_windows(make_sequences({{"u", 19}}), ml).empty());

  DatasetConfig trunc;
  trunc.min_length = 20;
  trunc.max_length = 300;
  trunc.window = 300;
  const auto src = make_sequences({{"u", 400}});
  const auto w = generate_windows(src, trunc);
  REQUIRE(w.size() == 1);
  CHECK(w[0].events.size() == 300);
  CHECK(w[0].events.front().item == 100);
  CHECK(w[0].events.back().item == 399);

  // Short sequences still yield one partial window.
  CHECK(lengths(generate_windows(make_sequences({{"u", 144}}), ml)) == std::vector<std::size_t>{144});
}

TEST_CASE("windows are contiguous slices in source order") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> len(1, 120), win(2, 30), mn(2, 25);
  for (int trial = 0; trial < 200; ++trial) {
    DatasetConfig c;
    c.window = win(rng);
    c.min_length = mn(rng);
    if (trial % 2) c.max_length = c.min_length + len(rng);
    auto src = make_sequences({{"a", len(rng)}, {"b", len(rng)}});
    for (const auto& w : generate_windows(src, c)) {
      const auto& s = w.user == "a" ? src[0] : src[1];
      const auto wi = items(w);
      const auto si = items(s);
      auto pos = std::search(si.begin(), si.end(), wi.begin(), wi.end());
      CHECK(pos != si.end());
      CHECK(std::is_sorted(wi.begin(), wi.end()));
      CHECK(wi.size() >= std::min(c.window, c.min_length));
    }
  }
}

TEST_CASE("split_users by fraction and seed") {
  std::vector<std::pair<std::string, std::size_t>> spec;
  for (int u = 0; u < 10; ++u) spec.emplace_back(std::to_string(u), 3);
  const auto seqs = make_sequences(spec);

  auto s = split_users(seqs, {0.8, 0.1, 0.1}, 1);
  CHECK(s.train.size() == 8);
  CHECK(s.validation.size() == 1);
  CHECK(s.test.size() == 1);

  auto all = split_users(seqs, {1, 0, 0}, 1);
  CHECK(all.train.size() == 10);
  CHECK(all.validation.empty());

  auto again = split_users(seqs, {0.8, 0.1, 0.1}, 1);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);

  auto none = split_users({}, {0.8, 0.1, 0.1}, 1);
  CHECK(none.train.empty());
  CHECK(none.test.empty());

  CHECK_THROWS_AS(split_users(seqs, {0.5, 0.1, 0.1}, 1), Error);
}

TEST_CASE("split_users partitions users") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<UserSequence> seqs;
    const int n_users = 1 + trial * 3;
    for (int u = 0; u < n_users; ++u) {
      const int windows = 1 + u % 3;
      for (int w = 0; w < windows; ++w) {
        UserSequence s;
        s.user = "u" + std::to_string(u);
        s.events.push_back(Event{static_cast<std::size_t>(w), {}, {}, {}});
        seqs.push_back(s);
      }
    }
    auto split = split_users(seqs, {0.7, 0.2, 0.1}, trial);
    std::set<std::string> tr, va, te;
    for (auto& s : split.train) tr.insert(s.user);
    for (auto& s : split.validation) va.insert(s.user);
    for (auto& s : split.test) te.insert(s.user);
    for (auto& u : tr) CHECK((!va.count(u) && !te.count(u)));
    for (auto& u : va) CHECK(!te.count(u));
    CHECK(split.train.size() + split.validation.size() + split.test.size() == seqs.size());
  }
}

TEST_CASE("sequence files round-trip") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    SequenceSet set;
    set.meta.n_items = 40;
    if (trial % 2) {
      set.meta.ctx_in_sizes = {2, 3};
      set.meta.ctx_out_sizes = {2};
    }
    for (int u = 0; u < 5; ++u) {
      UserSequence s;
      s.user = std::to_string(u);
      const std::size_t n = 1 + rng() % 9;
      for (std::size_t i = 0; i < n; ++i) {
        Event e;
        e.item = rng() % 40;
        if (trial % 2) {
          e.context_in = {rng() % 2, rng() % 3};
          e.context_out = {rng() % 2};
        }
        s.events.push_back(e);
      }
      set.sequences.push_back(s);
    }
    std::stringstream buf;
    write_sequences(buf, set);
    const auto back = read_sequences(buf);
    CHECK(back.meta == set.meta);
    CHECK(back.sequences == set.sequences);
  }
}

TEST_CASE("sequence files reject out-of-vocabulary items") {
  std::istringstream in("# m3-sequences n_items=3 ctx_in= ctx_out=\nuser\titems\tctx_in\tctx_out\nu\t1 5\t\t\n");
  CHECK_THROWS_AS(read_sequences(in), Error);
}

TEST_CASE("presets follow the MovieLens variants table") {
  auto s = dataset_preset("ml20m-s");
  CHECK(s.min_length == 20);
  CHECK(s.max_length == 50);
  CHECK(s.window == 20);
  auto m = dataset_preset("ml20m-m");
  CHECK((m.min_length == 50 && m.max_length == 150 && m.window == 50));
  auto l = dataset_preset("ml20m-l");
  CHECK((l.min_length == 150 && l.max_length == 300 && l.window == 150));
  auto xl = dataset_preset("ml20m-xl");
  CHECK((xl.min_length == 300 && !xl.max_length && xl.window == 300));
  CHECK_THROWS_AS(dataset_preset("ml1m"), Error);
}

TEST_CASE("synthetic markov with identity matrix repeats one item") {
  SyntheticParams p;
  p.vocab = 4;
  p.users = 20;
  p.length = 15;
  p.transition = TransitionMatrix(4, std::vector<double>(4, 0.0));
  for (int i = 0; i < 4; ++i) p.transition[i][i] = 1.0;
  auto data = generate_synthetic(SyntheticKind::markov, p, 3);
  for (const auto& s : data.data.sequences) {
    for (const auto& e : s.events) CHECK(e.item == s.events[0].item);
  }
}

TEST_CASE("synthetic long-copy with p=1 copies exactly") {
  SyntheticParams p;
  p.vocab = 30;
  p.users = 20;
  p.length = 40;
  p.lag = 5;
  p.copy_prob = 1.0;
  auto data = generate_synthetic(SyntheticKind::long_copy, p, 5);
  for (const auto& s : data.data.sequences) {
    for (std::size_t t = 5; t < s.events.size(); ++t) CHECK(s.events[t].item == s.events[t - 5].item);
  }
  const auto d = data.oracle(data.data.sequences[0], 10);
  CHECK(d[data.data.sequences[0].events[5].item] == doctest::Approx(1.0));
}

// Monte Carlo oracle: conditional bigram frequencies of a uniform chain.
TEST_CASE("synthetic markov with uniform matrix has uniform bigrams") {
  SyntheticParams p;
  p.vocab = 3;
  p.users = 1000;
  p.length = 101;  // 10^5 transitions
  p.transition = TransitionMatrix(3, std::vector<double>(3, 1.0 / 3.0));
  auto data = generate_synthetic(SyntheticKind::markov, p, 11);
  std::vector<std::vector<double>> counts(3, std::vector<double>(3, 0));
  std::size_t transitions = 0;
  for (const auto& s : data.data.sequences) {
    for (std::size_t t = 1; t < s.events.size(); ++t) {
      counts[s.events[t - 1].item][s.events[t].item] += 1;
      ++transitions;
    }
  }
  CHECK(transitions == 100000);
  for (const auto& row : counts) {
    const double n = row[0] + row[1] + row[2];
    const double sigma = std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / n);
    for (double c : row) CHECK(std::abs(c / n - 1.0 / 3.0) <= 3 * sigma);
  }
}

TEST_CASE("synthetic rejects non-stochastic matrices") {
  SyntheticParams p;
  p.vocab = 2;
  p.transition = {{0.5, 0.6}, {0.5, 0.5}};
  CHECK_THROWS_AS(generate_synthetic(SyntheticKind::markov, p, 1), Error);
  p.transition = {{1.5, -0.5}, {0.5, 0.5}};
  CHECK_THROWS_AS(generate_synthetic(SyntheticKind::markov, p, 1), Error);
}

TEST_CASE("mixed-context generator follows its scenarios") {
  SyntheticParams p;
  p.vocab = 40;
  p.users = 50;
  p.length = 60;
  p.taste_size = 5;
  auto data = generate_synthetic(SyntheticKind::mixed_context, p, 9);
  CHECK(data.data.meta.ctx_in_sizes == std::vector<std::size_t>{2});
  validate(data.data);
  for (const auto& s : data.data.sequences) {
    for (std::size_t t = 0; t < s.events.size(); ++t) {
      const auto d = data.oracle(s, t);
      CHECK(d[s.events[t].item] > 0.0);
      if (s.events[t].context_out[0] == kScenarioHome) {
        std::size_t support = 0;
        for (double v : d) support += v > 0;
        CHECK(support == 5);
      }
    }
  }
}

TEST_CASE("generation is deterministic under seed") {
  SyntheticParams p;
  p.vocab = 20;
  p.users = 10;
  p.length = 30;
  auto a = generate_synthetic(SyntheticKind::mixed_context, p, 42);
  auto b = generate_synthetic(SyntheticKind::mixed_context, p, 42);
  CHECK(a.data.sequences == b.data.sequences);
}
