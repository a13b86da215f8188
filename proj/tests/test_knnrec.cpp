#include <cmath>
#include <filesystem>

#include <functional>
#include <stdexcept>

#include "doctest.h"
#include "oracle.hpp"
#include "rec/common.hpp"
#include "rec/corpus.hpp"
#include "rec/knnrec.hpp"

using rec::InvertedIndex;
using rec::KnnConfig;
using rec::SparseCounts;
using rec::TokenizedStudent;
using rec::Vocabulary;

namespace {

Vocabulary make_vocab(int items, std::vector<long> counts = {}) {
  Vocabulary v;
  v.size = items;
  v.token_counts.assign(static_cast<size_t>(items) + rec::kFirstItemToken, 0);
  for (int i = 0; i < items; ++i) {
    v.item_to_token[i + 1] = rec::kFirstItemToken + i;
    v.token_to_item.push_back(i + 1);
    v.token_counts[static_cast<size_t>(rec::kFirstItemToken + i)] =
        counts.empty() ? items - i : counts[static_cast<size_t>(i)];
  }
  return v;
}

TokenizedStudent seq(int64_t id, std::vector<int> tokens) {
  TokenizedStudent s;
  s.student_id = id;
  s.classroom_id = 1;
  s.district_id = 1;
  s.tokens = std::move(tokens);
  for (size_t i = 0; i < s.tokens.size(); ++i) s.timestamps.push_back(100 + static_cast<int64_t>(i));
  return s;
}

}  // namespace

TEST_CASE("featurize counts the trailing window") {
  const std::vector<int> hist = {5, 5, 6};
  // history [A,A,B], h=3 -> {A:2, B:1}
  const SparseCounts c = rec::featurize(hist, 3, 3);
  REQUIRE(c.entries.size() == 2);
  CHECK(c.entries[0] == std::pair<int, int>{5, 2});
  CHECK(c.entries[1] == std::pair<int, int>{6, 1});
  CHECK(c.total() == 3);

  const SparseCounts last = rec::featurize(hist, 3, 1);
  REQUIRE(last.entries.size() == 1);
  CHECK(last.entries[0] == std::pair<int, int>{6, 1});

  // h < |history| equals a brute count over the suffix
  const std::vector<int> longer = {3, 4, 4, 5, 3, 3, 6};
  const SparseCounts windowed = rec::featurize(longer, 7, 4);
  std::map<int, int> brute;
  for (size_t i = 3; i < 7; ++i) brute[longer[i]] += 1;
  REQUIRE(windowed.entries.size() == brute.size());
  for (const auto& [tok, cnt] : windowed.entries) CHECK(brute[tok] == cnt);

  CHECK(rec::featurize({}, 0, 5).empty());
  CHECK_THROWS_AS(rec::featurize(hist, 3, 0), std::runtime_error);
  CHECK_THROWS_AS(rec::featurize(hist, 4, 2), std::runtime_error);
}

TEST_CASE("build_index stores one vector per position with a preceding interaction") {
  const Vocabulary vocab = make_vocab(6);
  KnnConfig cfg;
  cfg.history = 4;
  const std::vector<TokenizedStudent> train = {seq(1, {3, 4})};
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);
  REQUIRE(idx.size() == 1);
  CHECK(idx.stored(0).target == 4);
  REQUIRE(idx.stored(0).counts.entries.size() == 1);
  CHECK(idx.stored(0).counts.entries[0] == std::pair<int, int>{3, 1});

  // index size equals count of positions with a nonempty prefix
  const std::vector<TokenizedStudent> more = {seq(1, {3, 4, 5}), seq(2, {6}), seq(3, {7, 8})};
  const InvertedIndex idx2 = InvertedIndex::build(more, vocab, cfg);
  CHECK(idx2.size() == 2 + 0 + 1);
}

TEST_CASE("identical query ranks the stored target first with cosine one") {
  const Vocabulary vocab = make_vocab(8);
  KnnConfig cfg;
  cfg.history = 8;
  const std::vector<TokenizedStudent> train = {seq(1, {3, 4, 3, 5}), seq(2, {6, 7})};
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);

  // Query equal to the stored vector {3:2, 4:1} whose target is 5.
  const SparseCounts query = rec::featurize({3, 4, 3}, 3, 8);
  const auto ranking = idx.ranking(query);
  CHECK(ranking.front() == 5);
  CHECK(idx.rank_of(query, 5) == 1);
}

TEST_CASE("disjoint query falls back to the popularity ranking") {
  const Vocabulary vocab = make_vocab(8);
  KnnConfig cfg;
  const std::vector<TokenizedStudent> train = {seq(1, {3, 4}), seq(2, {4, 3})};
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);
  SparseCounts disjoint;
  disjoint.entries = {{9, 2}};
  CHECK(idx.ranking(disjoint) == idx.popularity_order());
  SparseCounts empty;
  CHECK(idx.ranking(empty) == idx.popularity_order());
  CHECK(idx.ranking(empty) == idx.ranking(empty));  // cold-start determinism
}

TEST_CASE("inverted-index ranking equals the dense brute-force oracle exactly") {
  rec::Rng rng(2024);
  const int items = 40;
  const Vocabulary vocab = make_vocab(items);
  KnnConfig cfg;
  cfg.history = 10;

  std::vector<TokenizedStudent> train;
  for (int s = 0; s < 20; ++s) {
    std::vector<int> tokens;
    const int len = 4 + static_cast<int>(rng.below(9));
    for (int i = 0; i < len; ++i) {
      // Coarse token range so ties and overlaps are common.
      tokens.push_back(rec::kFirstItemToken + static_cast<int>(rng.below(12)));
    }
    train.push_back(seq(s + 1, tokens));
  }
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);
  REQUIRE(idx.size() >= 200 - 140);  // sanity: plenty of stored vectors

  for (int q = 0; q < 200; ++q) {
    SparseCounts query;
    std::map<int, int> counts;
    const int len = static_cast<int>(rng.below(6));
    for (int i = 0; i < len; ++i) counts[rec::kFirstItemToken + static_cast<int>(rng.below(14))] += 1;
    query.entries.assign(counts.begin(), counts.end());

    const auto fast = idx.ranking(query);
    const auto brute = oracle::brute_force_ranking(idx, query, vocab.token_counts);
    REQUIRE(fast.size() == brute.size());
    CHECK(fast == brute);
    // rank_of agrees with the full ranking for every token.
    for (size_t pos = 0; pos < fast.size(); ++pos) {
      if (static_cast<int>(pos) % 7 == 0) {
        CHECK(idx.rank_of(query, fast[pos]) == static_cast<int>(pos) + 1);
      }
    }
  }
}

TEST_CASE("cosine scores stay in [0,1]") {
  const Vocabulary vocab = make_vocab(10);
  KnnConfig cfg;
  const std::vector<TokenizedStudent> train = {seq(1, {3, 3, 4, 5, 3}), seq(2, {5, 5, 4})};
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);
  for (size_t i = 0; i < idx.size(); ++i) {
    for (size_t j = 0; j < idx.size(); ++j) {
      const auto& a = idx.stored(i).counts;
      float dot = 0.0f;
      for (const auto& [tok, c] : a.entries) {
        for (const auto& [tok2, c2] : idx.stored(j).counts.entries) {
          if (tok == tok2) dot += static_cast<float>(c) * c2;
        }
      }
      const float cosine = dot / (idx.stored(i).norm * idx.stored(j).norm);
      CHECK(cosine >= 0.0f);
      CHECK(cosine <= 1.0f + 1e-6f);
    }
  }
}

TEST_CASE("index persists through its versioned file") {
  const Vocabulary vocab = make_vocab(12);
  KnnConfig cfg;
  cfg.history = 5;
  std::vector<TokenizedStudent> train;
  rec::Rng rng(3);
  for (int s = 0; s < 8; ++s) {
    std::vector<int> tokens;
    for (int i = 0; i < 6; ++i) tokens.push_back(rec::kFirstItemToken + static_cast<int>(rng.below(10)));
    train.push_back(seq(s + 1, tokens));
  }
  const InvertedIndex idx = InvertedIndex::build(train, vocab, cfg);
  const std::string path = (std::filesystem::temp_directory_path() / "knnidx_test.bin").string();
  idx.save(path);
  const InvertedIndex loaded = InvertedIndex::load(path);
  CHECK(loaded.size() == idx.size());
  CHECK(loaded.config().history == 5);
  SparseCounts query;
  query.entries = {{rec::kFirstItemToken, 1}, {rec::kFirstItemToken + 3, 2}};
  CHECK(loaded.ranking(query) == idx.ranking(query));

  rec::atomic_write_file(path, "nope");
  CHECK_THROWS_AS(InvertedIndex::load(path), std::runtime_error);
}

TEST_CASE("config validation") {
  KnnConfig bad;
  bad.history = 0;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad.history = 5;
  bad.k = 0;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}
