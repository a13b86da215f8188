#include "rec/knnrec.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "rec/common.hpp"

namespace rec {

int SparseCounts::total() const {
  int t = 0;
  for (const auto& [tok, c] : entries) t += c;
  return t;
}

float SparseCounts::norm() const {
  float s = 0.0f;
  for (const auto& [tok, c] : entries) {
    const float f = static_cast<float>(c);
    s += f * f;
  }
  return std::sqrt(s);
}

SparseCounts featurize(const std::vector<int>& tokens, int end_index, int history) {
  if (history < 1) throw std::runtime_error("featurize: history must be positive");
  if (end_index < 0 || end_index > static_cast<int>(tokens.size())) {
    throw std::runtime_error("featurize: end_index out of range");
  }
  const int begin = std::max(0, end_index - history);
  std::map<int, int> counts;
  for (int i = begin; i < end_index; ++i) counts[tokens[static_cast<size_t>(i)]] += 1;
  SparseCounts out;
  out.entries.assign(counts.begin(), counts.end());
  return out;
}

void KnnConfig::validate() const {
  if (history < 1) throw std::runtime_error("knn: history must be at least 1");
  if (k < 1) throw std::runtime_error("knn: k must be at least 1");
}

InvertedIndex InvertedIndex::build(const std::vector<TokenizedStudent>& train_students,
                                   const Vocabulary& vocab, const KnnConfig& cfg) {
  cfg.validate();
  InvertedIndex idx;
  idx.cfg_ = cfg;
  idx.vocab_tokens_ = vocab.total_tokens();
  idx.popularity_.assign(static_cast<size_t>(idx.vocab_tokens_), 0);
  for (size_t t = 0; t < vocab.token_counts.size() && t < idx.popularity_.size(); ++t) {
    idx.popularity_[t] = vocab.token_counts[t];
  }

  for (const TokenizedStudent& s : train_students) {
    for (int pos = 1; pos < static_cast<int>(s.tokens.size()); ++pos) {
      StoredVector v;
      v.counts = featurize(s.tokens, pos, cfg.history);
      v.norm = v.counts.norm();
      v.target = s.tokens[static_cast<size_t>(pos)];
      idx.store_.push_back(std::move(v));
    }
  }
  idx.finalize();
  return idx;
}

void InvertedIndex::finalize() {
  postings_.assign(static_cast<size_t>(vocab_tokens_), {});
  for (size_t id = 0; id < store_.size(); ++id) {
    for (const auto& [tok, c] : store_[id].counts.entries) {
      postings_[static_cast<size_t>(tok)].emplace_back(static_cast<int>(id), c);
    }
  }
  pop_order_.clear();
  pop_order_.push_back(kOovToken);
  for (int t = kFirstItemToken; t < vocab_tokens_; ++t) pop_order_.push_back(t);
  std::sort(pop_order_.begin(), pop_order_.end(), [this](int a, int b) {
    if (popularity_[static_cast<size_t>(a)] != popularity_[static_cast<size_t>(b)]) {
      return popularity_[static_cast<size_t>(a)] > popularity_[static_cast<size_t>(b)];
    }
    return a < b;
  });
  pop_rank_.assign(static_cast<size_t>(vocab_tokens_), -1);
  for (size_t i = 0; i < pop_order_.size(); ++i) {
    pop_rank_[static_cast<size_t>(pop_order_[i])] = static_cast<int>(i);
  }
}

std::vector<std::pair<int, float>> InvertedIndex::candidate_scores(
    const SparseCounts& query) const {
  // Accumulate dot products per stored vector through the postings lists;
  // query tokens ascend, so each vector's products sum in the same order a
  // dense two-pointer merge would use, keeping scores bit-identical to a
  // brute-force pass.
  std::vector<float> dots(store_.size(), 0.0f);
  for (const auto& [tok, qc] : query.entries) {
    if (tok < 0 || tok >= vocab_tokens_) continue;
    const float qf = static_cast<float>(qc);
    for (const auto& [vec_id, vc] : postings_[static_cast<size_t>(tok)]) {
      dots[static_cast<size_t>(vec_id)] += qf * static_cast<float>(vc);
    }
  }
  const float qnorm = query.norm();
  std::vector<float> best(static_cast<size_t>(vocab_tokens_), 0.0f);
  for (size_t vec_id = 0; vec_id < store_.size(); ++vec_id) {
    if (dots[vec_id] == 0.0f) continue;  // counts are non-negative: no overlap
    const StoredVector& v = store_[vec_id];
    const float cosine = dots[vec_id] / (qnorm * v.norm);
    float& slot = best[static_cast<size_t>(v.target)];
    if (cosine > slot) slot = cosine;
  }
  std::vector<std::pair<int, float>> out;
  for (int tok = 0; tok < vocab_tokens_; ++tok) {
    if (best[static_cast<size_t>(tok)] > 0.0f) out.emplace_back(tok, best[static_cast<size_t>(tok)]);
  }
  return out;
}

namespace {
// Ordering: score desc, then training popularity desc, then token asc.
struct RankedToken {
  int token;
  float score;
  long popularity;
};
bool ranked_before(const RankedToken& a, const RankedToken& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.popularity != b.popularity) return a.popularity > b.popularity;
  return a.token < b.token;
}
}  // namespace

std::vector<int> InvertedIndex::ranking(const SparseCounts& query) const {
  std::vector<RankedToken> ranked;
  ranked.reserve(pop_order_.size());
  std::vector<float> scores(static_cast<size_t>(vocab_tokens_), 0.0f);
  for (const auto& [tok, score] : candidate_scores(query)) scores[static_cast<size_t>(tok)] = score;
  for (int tok : pop_order_) {
    ranked.push_back(RankedToken{tok, scores[static_cast<size_t>(tok)],
                                 popularity_[static_cast<size_t>(tok)]});
  }
  std::stable_sort(ranked.begin(), ranked.end(), ranked_before);
  std::vector<int> out;
  out.reserve(ranked.size());
  for (const RankedToken& r : ranked) out.push_back(r.token);
  return out;
}

int InvertedIndex::rank_of(const SparseCounts& query, int target) const {
  if (target < kOovToken || target >= vocab_tokens_ || target == kSepToken ||
      target == kPadToken) {
    throw std::runtime_error("rank_of: target is not a rankable token");
  }
  const auto cands = candidate_scores(query);
  float target_score = 0.0f;
  for (const auto& [tok, score] : cands) {
    if (tok == target) {
      target_score = score;
      break;
    }
  }
  const RankedToken t{target, target_score, popularity_[static_cast<size_t>(target)]};
  int better = 0;
  if (target_score > 0.0f) {
    // Everything outside the candidate set scores zero and cannot beat it.
    for (const auto& [tok, score] : cands) {
      if (tok == target) continue;
      if (ranked_before(RankedToken{tok, score, popularity_[static_cast<size_t>(tok)]}, t)) {
        ++better;
      }
    }
    return better + 1;
  }
  // Zero-score target: positive candidates beat it, and the zero tier orders
  // itself by popularity.
  for (const auto& [tok, score] : cands) {
    if (tok == target) continue;
    if (score > 0.0f) {
      ++better;
    }
  }
  int zero_better = pop_rank_[static_cast<size_t>(target)];
  for (const auto& [tok, score] : cands) {
    if (tok == target || score <= 0.0f) continue;
    if (pop_rank_[static_cast<size_t>(tok)] < pop_rank_[static_cast<size_t>(target)]) {
      --zero_better;  // already counted in the positive tier
    }
  }
  return better + zero_better + 1;
}

namespace {
constexpr const char* kIndexMagic = "recknnidx 1";

template <typename T>
void put(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T take(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("knn index: truncated file");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}
}  // namespace

void InvertedIndex::save(const std::string& path) const {
  std::string out = std::string(kIndexMagic) + "\n";
  put<int32_t>(out, cfg_.history);
  put<int32_t>(out, cfg_.k);
  put<int32_t>(out, vocab_tokens_);
  put<uint64_t>(out, store_.size());
  for (const StoredVector& v : store_) {
    put<int32_t>(out, v.target);
    put<uint32_t>(out, static_cast<uint32_t>(v.counts.entries.size()));
    for (const auto& [tok, c] : v.counts.entries) {
      put<int32_t>(out, tok);
      put<int32_t>(out, c);
    }
  }
  for (long c : popularity_) put<int64_t>(out, c);
  atomic_write_file(path, out);
}

InvertedIndex InvertedIndex::load(const std::string& path) {
  const std::string in = read_file(path);
  const std::string magic = std::string(kIndexMagic) + "\n";
  if (in.size() < magic.size() || in.compare(0, magic.size(), magic) != 0) {
    throw std::runtime_error("knn index: unknown version in " + path);
  }
  size_t pos = magic.size();
  InvertedIndex idx;
  idx.cfg_.history = take<int32_t>(in, pos);
  idx.cfg_.k = take<int32_t>(in, pos);
  idx.vocab_tokens_ = take<int32_t>(in, pos);
  const uint64_t count = take<uint64_t>(in, pos);
  idx.store_.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    StoredVector v;
    v.target = take<int32_t>(in, pos);
    const uint32_t nnz = take<uint32_t>(in, pos);
    v.counts.entries.reserve(nnz);
    for (uint32_t j = 0; j < nnz; ++j) {
      const int tok = take<int32_t>(in, pos);
      const int c = take<int32_t>(in, pos);
      v.counts.entries.emplace_back(tok, c);
    }
    v.norm = v.counts.norm();
    idx.store_.push_back(std::move(v));
  }
  idx.popularity_.resize(static_cast<size_t>(idx.vocab_tokens_));
  for (auto& c : idx.popularity_) c = take<int64_t>(in, pos);
  idx.finalize();
  return idx;
}

}  // namespace rec
