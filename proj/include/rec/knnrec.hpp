#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rec/corpus.hpp"
#include "rec/pipeline.hpp"

namespace rec {

// Count vector over rankable tokens (items + OOV), sorted by token id.
struct SparseCounts {
  std::vector<std::pair<int, int>> entries;  // (token, count), token ascending

  int total() const;
  float norm() const;
  bool empty() const { return entries.empty(); }
};

// Counts of the last h tokens before end_index.
SparseCounts featurize(const std::vector<int>& tokens, int end_index, int history);

struct KnnConfig {
  int history = 65;
  int k = 2;  // minimum retrieval depth; ranking covers all candidates

  void validate() const;
};

class InvertedIndex {
 public:
  struct StoredVector {
    SparseCounts counts;
    float norm = 0.0f;
    int target = 0;
  };

  static InvertedIndex build(const std::vector<TokenizedStudent>& train_students,
                             const Vocabulary& vocab, const KnnConfig& cfg);

  // All rankable tokens, best first: candidates by max cosine against stored
  // vectors sharing a nonzero component, everything else in popularity order.
  std::vector<int> ranking(const SparseCounts& query) const;
  // 1-based rank of target under the same ordering, without building the
  // whole list.
  int rank_of(const SparseCounts& query, int target) const;

  size_t size() const { return store_.size(); }
  const StoredVector& stored(size_t i) const { return store_[i]; }
  const std::vector<int>& popularity_order() const { return pop_order_; }
  int vocab_tokens() const { return vocab_tokens_; }
  const KnnConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static InvertedIndex load(const std::string& path);

 private:
  KnnConfig cfg_;
  int vocab_tokens_ = 0;
  std::vector<StoredVector> store_;
  std::vector<std::vector<std::pair<int, int>>> postings_;  // token -> (vector id, count)
  std::vector<long> popularity_;  // token -> training count
  std::vector<int> pop_order_;    // rankable tokens by (count desc, token asc)
  std::vector<int> pop_rank_;     // token -> position in pop_order_

  void finalize();
  // (item token -> best cosine) over candidates retrieved via postings.
  std::vector<std::pair<int, float>> candidate_scores(const SparseCounts& query) const;
  friend bool better_ranked(const InvertedIndex& idx, int token_a, float score_a, int token_b,
                            float score_b);
};

}  // namespace rec
