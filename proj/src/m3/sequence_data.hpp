#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace m3 {

struct Event {
  std::size_t item = 0;
  std::vector<std::size_t> context_in;
  std::vector<std::size_t> context_out;
  std::optional<std::int64_t> timestamp;

  friend bool operator==(const Event&, const Event&) = default;
};

struct UserSequence {
  std::string user;
  std::vector<Event> events;

  friend bool operator==(const UserSequence&, const UserSequence&) = default;
};

// Cardinalities needed to size embedding tables.
struct DatasetMeta {
  std::size_t n_items = 0;
  std::vector<std::size_t> ctx_in_sizes;
  std::vector<std::size_t> ctx_out_sizes;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct SequenceSet {
  DatasetMeta meta;
  std::vector<UserSequence> sequences;
};

// Checks item and context indices against the declared cardinalities.
void validate(const SequenceSet& set);

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetConfig {
  std::size_t min_length = 20;
  std::optional<std::size_t> max_length;  // unbounded when empty
  std::size_t window = 300;
  std::size_t min_item_count = 20;
  SplitFractions split;

  void validate() const;
};

// JSON object of DatasetConfig fields (split fractions as split_train,
// split_validation, split_test; max_length null when unbounded). Unknown keys
// are rejected.
std::string dataset_config_to_json(const DatasetConfig& config);
DatasetConfig dataset_config_from_json(const std::string& json);

// Named MovieLens variants: ml20m, ml20m-s, ml20m-m, ml20m-l, ml20m-xl.
DatasetConfig dataset_preset(const std::string& name);

class Vocabulary {
 public:
  std::size_t add(const std::string& raw_id, std::size_t count);
  std::optional<std::size_t> find(const std::string& raw_id) const;
  const std::string& raw_id(std::size_t index) const { return raw_ids_.at(index); }
  std::size_t count(std::size_t index) const { return counts_.at(index); }
  std::size_t size() const noexcept { return raw_ids_.size(); }

 private:
  std::vector<std::string> raw_ids_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Ratings before vocabulary construction: item ids are still raw strings.
struct RawEvent {
  std::string item;
  std::int64_t timestamp = 0;
};

struct RawSequence {
  std::string user;
  std::vector<RawEvent> events;
};

// Reads `userId,movieId,rating,timestamp`. Every row is an implicit positive;
// one sequence per user, events in timestamp order, users in id order.
std::vector<RawSequence> load_movielens(const std::string& path);
std::vector<RawSequence> parse_movielens(std::istream& in);

struct FilterResult {
  std::vector<UserSequence> sequences;
  Vocabulary vocabulary;
};

// Drops events of items seen fewer than `min_item_count` times, then users
// left with no events. Indices are assigned by descending count, ties by id.
FilterResult filter_items(const std::vector<RawSequence>& sequences, std::size_t min_item_count);

// Maps indexed sequences back to raw ids (inverse of filter_items' indexing).
std::vector<RawSequence> to_raw(const std::vector<UserSequence>& sequences,
                                const Vocabulary& vocabulary);

std::vector<UserSequence> generate_windows(const std::vector<UserSequence>& sequences,
                                           const DatasetConfig& config);

struct UserSplit {
  std::vector<UserSequence> train;
  std::vector<UserSequence> validation;
  std::vector<UserSequence> test;
};

UserSplit split_users(const std::vector<UserSequence>& sequences, const SplitFractions& fractions,
                      std::uint64_t seed);

// Numeric-aware ordering for opaque ids: shorter first, then lexicographic.
bool user_id_less(const std::string& a, const std::string& b);

// Line-delimited sequence files: a `# m3-sequences` metadata line, a column
// header, then one tab-separated record per window.
void write_sequences(const std::string& path, const SequenceSet& set);
void write_sequences(std::ostream& out, const SequenceSet& set);
SequenceSet read_sequences(const std::string& path);
SequenceSet read_sequences(std::istream& in);

// `index<TAB>raw_id<TAB>count`, one line per item.
void write_vocabulary(const std::string& path, const Vocabulary& vocabulary);
Vocabulary read_vocabulary(const std::string& path);

}  // namespace m3
