#include "m3/sequence_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"
#include "m3/error.hpp"
#include "m3/text.hpp"

namespace m3 {

bool user_id_less(const std::string& a, const std::string& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

void validate(const SequenceSet& set) {
  const auto& meta = set.meta;
  for (const auto& seq : set.sequences) {
    if (seq.events.empty()) {
      fail(ErrorCode::format, "sequence for user " + seq.user + " is empty");
    }
    std::optional<std::int64_t> last_ts;
    for (const auto& e : seq.events) {
      if (e.item >= meta.n_items) {
        fail(ErrorCode::vocabulary_mismatch, "user " + seq.user + ": item " +
                                                 std::to_string(e.item) +
                                                 " outside vocabulary of " +
                                                 std::to_string(meta.n_items));
      }
      auto check_ctx = [&](const std::vector<std::size_t>& ctx,
                           const std::vector<std::size_t>& sizes, const char* side) {
        if (ctx.size() != sizes.size()) {
          fail(ErrorCode::format, "user " + seq.user + ": expected " +
                                      std::to_string(sizes.size()) + " " + side +
                                      " context features, got " + std::to_string(ctx.size()));
        }
        for (std::size_t k = 0; k < ctx.size(); ++k) {
          if (ctx[k] >= sizes[k]) {
            fail(ErrorCode::vocabulary_mismatch,
                 "user " + seq.user + ": " + side + " context value " + std::to_string(ctx[k]) +
                     " outside feature " + std::to_string(k) + " of size " +
                     std::to_string(sizes[k]));
          }
        }
      };
      check_ctx(e.context_in, meta.ctx_in_sizes, "input");
      check_ctx(e.context_out, meta.ctx_out_sizes, "output");
      if (e.timestamp) {
        if (last_ts && *e.timestamp < *last_ts) {
          fail(ErrorCode::format, "user " + seq.user + ": timestamps decrease");
        }
        last_ts = e.timestamp;
      }
    }
  }
}

void DatasetConfig::validate() const {
  require(min_length >= 2, "min_length must be at least 2");
  require(window >= 2, "window must be at least 2");
  require(min_item_count >= 1, "min_item_count must be at least 1");
  require(!max_length || *max_length >= min_length, "max_length must be >= min_length");
  const double sum = split.train + split.validation + split.test;
  require(split.train >= 0 && split.validation >= 0 && split.test >= 0 &&
              std::abs(sum - 1.0) <= 1e-9,
          "split fractions must be nonnegative and sum to 1");
}

std::string dataset_config_to_json(const DatasetConfig& c) {
  nlohmann::json j;
  j["min_length"] = c.min_length;
  j["max_length"] = c.max_length ? nlohmann::json(*c.max_length) : nlohmann::json(nullptr);
  j["window"] = c.window;
  j["min_item_count"] = c.min_item_count;
  j["split_train"] = c.split.train;
  j["split_validation"] = c.split.validation;
  j["split_test"] = c.split.test;
  return j.dump();
}

DatasetConfig dataset_config_from_json(const std::string& text) {
  DatasetConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) fail(ErrorCode::format, "dataset config must be a JSON object");
    for (auto& [key, v] : j.items()) {
      auto count = [&] {
        if (!v.is_number_unsigned()) {
          fail(ErrorCode::invalid_argument, "dataset config: " + key + " must be a nonnegative integer");
        }
        return v.get<std::size_t>();
      };
      if (key == "min_length") c.min_length = count();
      else if (key == "max_length") c.max_length = v.is_null() ? std::nullopt : std::optional(count());
      else if (key == "window") c.window = count();
      else if (key == "min_item_count") c.min_item_count = count();
      else if (key == "split_train") c.split.train = v.get<double>();
      else if (key == "split_validation") c.split.validation = v.get<double>();
      else if (key == "split_test") c.split.test = v.get<double>();
      else fail(ErrorCode::invalid_argument, "dataset config: unknown key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("dataset config: ") + e.what());
  }
  return c;
}

DatasetConfig dataset_preset(const std::string& name) {
  DatasetConfig c;
  c.min_item_count = 20;
  if (name == "ml20m") {
    c.min_length = 20, c.max_length.reset(), c.window = 300;
  } else if (name == "ml20m-s") {
    c.min_length = 20, c.max_length = 50, c.window = 20;
  } else if (name == "ml20m-m") {
    c.min_length = 50, c.max_length = 150, c.window = 50;
  } else if (name == "ml20m-l") {
    c.min_length = 150, c.max_length = 300, c.window = 150;
  } else if (name == "ml20m-xl") {
    c.min_length = 300, c.max_length.reset(), c.window = 300;
  } else {
    fail(ErrorCode::invalid_argument, "unknown dataset variant '" + name + "'");
  }
  return c;
}

std::size_t Vocabulary::add(const std::string& raw_id, std::size_t count) {
  if (index_.count(raw_id)) {
    fail(ErrorCode::invalid_argument, "duplicate vocabulary entry '" + raw_id + "'");
  }
  raw_ids_.push_back(raw_id);
  counts_.push_back(count);
  index_.emplace(raw_id, raw_ids_.size() - 1);
  return raw_ids_.size() - 1;
}

std::optional<std::size_t> Vocabulary::find(const std::string& raw_id) const {
  if (auto it = index_.find(raw_id); it != index_.end()) return it->second;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// MovieLens

std::vector<RawSequence> parse_movielens(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || text::trim(line) != "userId,movieId,rating,timestamp") {
    fail(ErrorCode::format, "line 1: expected header 'userId,movieId,rating,timestamp'");
  }
  std::map<std::string, RawSequence, decltype(&user_id_less)> users(&user_id_less);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto row = text::trim(line);
    if (row.empty()) continue;
    const auto fields = text::split(row, ',');
    auto bad = [&](const std::string& why) {
      fail(ErrorCode::format, "line " + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 4) bad("expected 4 fields, got " + std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty()) bad("empty user or item id");
    if (!text::parse_double(fields[2])) bad("rating is not a number");
    const auto ts = text::parse_int<std::int64_t>(fields[3]);
    if (!ts) bad("timestamp is not an integer");
    auto& seq = users[std::string(fields[0])];
    seq.user = std::string(fields[0]);
    seq.events.push_back(RawEvent{std::string(fields[1]), *ts});
  }
  std::vector<RawSequence> out;
  out.reserve(users.size());
  for (auto& [id, seq] : users) {
    std::stable_sort(seq.events.begin(), seq.events.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.timestamp < b.timestamp; });
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<RawSequence> load_movielens(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open ratings file '" + path + "'");
  return parse_movielens(in);
}

FilterResult filter_items(const std::vector<RawSequence>& sequences, std::size_t min_item_count) {
  require(min_item_count >= 1, "filter_items: min_item_count must be at least 1");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& seq : sequences)
    for (const auto& e : seq.events) ++counts[e.item];

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [id, n] : counts) {
    if (n >= min_item_count) kept.emplace_back(id, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return user_id_less(a.first, b.first);
  });

  FilterResult result;
  for (const auto& [id, n] : kept) result.vocabulary.add(id, n);

  for (const auto& seq : sequences) {
    UserSequence out;
    out.user = seq.user;
    for (const auto& e : seq.events) {
      if (auto idx = result.vocabulary.find(e.item)) {
        Event ev;
        ev.item = *idx;
        ev.timestamp = e.timestamp;
        out.events.push_back(std::move(ev));
      }
    }
    if (!out.events.empty()) result.sequences.push_back(std::move(out));
  }
  return result;
}

std::vector<RawSequence> to_raw(const std::vector<UserSequence>& sequences,
                                const Vocabulary& vocabulary) {
  std::vector<RawSequence> out;
  out.reserve(sequences.size());
  for (const auto& seq : sequences) {
    RawSequence raw;
    raw.user = seq.user;
    for (const auto& e : seq.events) {
      raw.events.push_back(RawEvent{vocabulary.raw_id(e.item), e.timestamp.value_or(0)});
    }
    out.push_back(std::move(raw));
  }
  return out;
}

std::vector<UserSequence> generate_windows(const std::vector<UserSequence>& sequences,
                                           const DatasetConfig& config) {
  config.validate();
  std::vector<UserSequence> windows;
  for (const auto& seq : sequences) {
    const std::size_t n = seq.events.size();
    if (n < config.min_length) continue;
    const std::size_t keep = config.max_length ? std::min(n, *config.max_length) : n;
    auto begin = seq.events.end() - static_cast<std::ptrdiff_t>(keep);
    for (std::size_t offset = 0; offset < keep; offset += config.window) {
      const std::size_t len = std::min(config.window, keep - offset);
      if (len < config.window && len < config.min_length) break;
      UserSequence w;
      w.user = seq.user;
      auto first = begin + static_cast<std::ptrdiff_t>(offset);
      w.events.assign(first, first + static_cast<std::ptrdiff_t>(len));
      windows.push_back(std::move(w));
    }
  }
  return windows;
}

UserSplit split_users(const std::vector<UserSequence>& sequences, const SplitFractions& fractions,
                      std::uint64_t seed) {
  const double sum = fractions.train + fractions.validation + fractions.test;
  require(fractions.train >= 0 && fractions.validation >= 0 && fractions.test >= 0 &&
              std::abs(sum - 1.0) <= 1e-9,
          "split fractions must be nonnegative and sum to 1");
  std::vector<std::string> users;
  for (const auto& s : sequences) users.push_back(s.user);
  std::sort(users.begin(), users.end(), user_id_less);
  users.erase(std::unique(users.begin(), users.end()), users.end());

  std::mt19937_64 rng(seed);
  std::shuffle(users.begin(), users.end(), rng);

  const std::size_t n = users.size();
  const auto count = [n](double f) {
    return std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
  };
  const std::size_t n_train = count(fractions.train);
  const std::size_t n_val = std::min(n - n_train, count(fractions.validation));

  std::unordered_map<std::string, int> bucket;
  for (std::size_t i = 0; i < n; ++i) bucket[users[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

  UserSplit split;
  for (const auto& s : sequences) {
    switch (bucket[s.user]) {
      case 0: split.train.push_back(s); break;
      case 1: split.validation.push_back(s); break;
      default: split.test.push_back(s); break;
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Sequence files

namespace {

std::string join_sizes(const std::vector<std::size_t>& sizes) {
  std::string out;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(sizes[i]);
  }
  return out;
}

std::vector<std::size_t> parse_index_list(std::string_view s, char sep, std::size_t line_no) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  for (auto tok : text::split(s, sep)) {
    const auto v = text::parse_int<std::size_t>(tok);
    if (!v) {
      fail(ErrorCode::format, "line " + std::to_string(line_no) + ": bad index '" +
                                  std::string(tok) + "'");
    }
    out.push_back(*v);
  }
  return out;
}

std::string format_contexts(const std::vector<Event>& events, bool input) {
  std::string out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& ctx = input ? events[i].context_in : events[i].context_out;
    if (ctx.empty()) return {};
    if (i) out += ' ';
    for (std::size_t k = 0; k < ctx.size(); ++k) {
      if (k) out += ',';
      out += std::to_string(ctx[k]);
    }
  }
  return out;
}

}  // namespace

void write_sequences(std::ostream& out, const SequenceSet& set) {
  out << "# m3-sequences n_items=" << set.meta.n_items
      << " ctx_in=" << join_sizes(set.meta.ctx_in_sizes)
      << " ctx_out=" << join_sizes(set.meta.ctx_out_sizes) << "\n";
  out << "user\titems\tctx_in\tctx_out\n";
  for (const auto& seq : set.sequences) {
    out << seq.user << '\t';
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
      if (i) out << ' ';
      out << seq.events[i].item;
    }
    out << '\t' << format_contexts(seq.events, true) << '\t'
        << format_contexts(seq.events, false) << '\n';
  }
}

void write_sequences(const std::string& path, const SequenceSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write sequence file '" + path + "'");
  write_sequences(out, set);
  if (!out) fail(ErrorCode::io, "failed writing sequence file '" + path + "'");
}

SequenceSet read_sequences(std::istream& in) {
  SequenceSet set;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# m3-sequences", 0) != 0) {
    fail(ErrorCode::format, "line 1: missing '# m3-sequences' metadata line");
  }
  bool have_items = false;
  for (auto tok : text::split(text::trim(std::string_view(line).substr(14)), ' ')) {
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) fail(ErrorCode::format, "line 1: bad metadata '" + std::string(tok) + "'");
    const auto key = tok.substr(0, eq);
    const auto value = tok.substr(eq + 1);
    if (key == "n_items") {
      const auto n = text::parse_int<std::size_t>(value);
      if (!n) fail(ErrorCode::format, "line 1: bad n_items");
      set.meta.n_items = *n;
      have_items = true;
    } else if (key == "ctx_in") {
      set.meta.ctx_in_sizes = parse_index_list(value, ',', 1);
    } else if (key == "ctx_out") {
      set.meta.ctx_out_sizes = parse_index_list(value, ',', 1);
    } else {
      fail(ErrorCode::format, "line 1: unknown metadata key '" + std::string(key) + "'");
    }
  }
  if (!have_items) fail(ErrorCode::format, "line 1: missing n_items");
  if (!std::getline(in, line) || text::trim(line) != "user\titems\tctx_in\tctx_out") {
    fail(ErrorCode::format, "line 2: expected column header 'user<TAB>items<TAB>ctx_in<TAB>ctx_out'");
  }
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = text::split(line, '\t');
    if (fields.size() != 4) {
      fail(ErrorCode::format, "line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    UserSequence seq;
    seq.user = std::string(fields[0]);
    for (auto item : parse_index_list(fields[1], ' ', line_no)) {
      Event e;
      e.item = item;
      seq.events.push_back(std::move(e));
    }
    auto read_ctx = [&](std::string_view field, bool input, std::size_t n_features) {
      if (field.empty()) {
        if (n_features != 0) {
          fail(ErrorCode::format, "line " + std::to_string(line_no) + ": missing context features");
        }
        return;
      }
      const auto tokens = text::split(field, ' ');
      if (tokens.size() != seq.events.size()) {
        fail(ErrorCode::format, "line " + std::to_string(line_no) +
                                    ": context count does not match item count");
      }
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto values = parse_index_list(tokens[i], ',', line_no);
        (input ? seq.events[i].context_in : seq.events[i].context_out) = std::move(values);
      }
    };
    read_ctx(fields[2], true, set.meta.ctx_in_sizes.size());
    read_ctx(fields[3], false, set.meta.ctx_out_sizes.size());
    set.sequences.push_back(std::move(seq));
  }
  validate(set);
  return set;
}

SequenceSet read_sequences(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open sequence file '" + path + "'");
  try {
    return read_sequences(in);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

void write_vocabulary(const std::string& path, const Vocabulary& vocabulary) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write vocabulary file '" + path + "'");
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    out << i << '\t' << vocabulary.raw_id(i) << '\t' << vocabulary.count(i) << '\n';
  }
}

Vocabulary read_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open vocabulary file '" + path + "'");
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = text::split(line, '\t');
    const auto idx = f.size() == 3 ? text::parse_int<std::size_t>(f[0]) : std::nullopt;
    const auto cnt = f.size() == 3 ? text::parse_int<std::size_t>(f[2]) : std::nullopt;
    if (!idx || !cnt || *idx != vocab.size()) {
      fail(ErrorCode::format, path + ": line " + std::to_string(line_no) + ": malformed entry");
    }
    vocab.add(std::string(f[1]), *cnt);
  }
  return vocab;
}

}  // namespace m3
