#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rec/corpus.hpp"
#include "rec/knnrec.hpp"
#include "rec/model.hpp"
#include "rec/pipeline.hpp"

namespace rec {

struct EventKey {
  int64_t student;
  int index;
  bool operator==(const EventKey&) const = default;
};
struct EventKeyHash {
  size_t operator()(const EventKey& k) const {
    return static_cast<size_t>(splitmix64(static_cast<uint64_t>(k.student) * 0x9e3779b97f4a7c15ull ^
                                          static_cast<uint64_t>(k.index)));
  }
};
using RankMap = std::unordered_map<EventKey, int, EventKeyHash>;

struct EvalEvent {
  int64_t student_id = 0;
  int index = 0;  // position in the student's split sequence
  int target = 0;
  bool continuation = false;  // target equals previous token
  bool novel = false;         // target unseen in the student's prior history
  bool oov = false;           // excluded from metrics, tallied separately
};

// One event per interaction, sorted by (student, index). Novelty looks back
// through prior_tokens (training-year history) when provided.
std::vector<EvalEvent> build_events(const std::vector<TokenizedStudent>& split_students,
                                    const std::map<int64_t, std::vector<int>>* prior_tokens);

class Recommender {
 public:
  virtual ~Recommender() = default;
  virtual std::string name() const = 0;
  // 1-based rank of each event's target among rankable tokens.
  virtual RankMap rank_events(const std::vector<TokenizedStudent>& split_students) const = 0;
};

struct ScoredEvents {
  std::vector<EvalEvent> events;  // OOV-target events removed
  std::vector<int> ranks;         // aligned
  long oov_events = 0;
  long error_events = 0;  // recommender produced no rank
};

ScoredEvents collect_events(const std::vector<EvalEvent>& events, const Recommender& rec,
                            const std::vector<TokenizedStudent>& split_students);

enum class Subset { kAll, kNonContinuation, kNovel };
const char* subset_name(Subset s);

struct HitsStat {
  bool empty = true;
  double mean_pct = 0.0;
  long students = 0;
  long events = 0;
  std::vector<double> rates;  // per qualifying student, ordered by student id
};

HitsStat hits_at_n(const ScoredEvents& scored, int n, Subset subset);

// Keeps only events of students the predicate accepts; the predicate sees the
// student's total event count in this scored set.
ScoredEvents filter_students(const ScoredEvents& scored,
                             const std::function<bool(int64_t, long)>& keep);

// Percentile bootstrap over students: resample rates with replacement, take
// empirical 2.5/97.5 percentiles of the resampled means.
std::pair<double, double> bootstrap_ci(const std::vector<double>& rates, int resamples,
                                       uint64_t seed);

struct MetricCell {
  Subset subset;
  int n;
  bool empty = true;
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  long students = 0;
  long events = 0;
};

struct MetricReport {
  std::string model;
  std::vector<MetricCell> cells;  // subsets x ns
  long oov_events = 0;
  long error_events = 0;
};

MetricReport compute_report(const std::string& model, const ScoredEvents& scored,
                            const std::vector<int>& ns, int resamples, uint64_t seed);

enum class SliceVar { kEngagement, kMetro, kSes, kReading };
const char* slice_var_name(SliceVar v);
SliceVar parse_slice_var(const std::string& s);

struct SliceSpec {
  SliceVar var = SliceVar::kEngagement;
  std::vector<double> edges;  // ascending bin edges for numeric variables
};

struct StudentAttr {
  long engagement = 0;  // total interactions on record
  MetroCode metro = MetroCode::kUrban;
  SesBand ses = SesBand::kUnknown;
  double reading = 0.0;
};
std::map<int64_t, StudentAttr> student_attrs(const Bundle& full_bundle);

struct SliceBin {
  std::string label;
  long students = 0;  // histogram: students holding >=1 event in the bin
  std::vector<MetricCell> cells;
};

std::vector<SliceBin> slice(const ScoredEvents& scored,
                            const std::map<int64_t, StudentAttr>& attrs, const SliceSpec& spec,
                            const std::vector<int>& ns, int resamples, uint64_t seed);

std::string report_csv(const MetricReport& report);
std::string slice_csv(const std::string& model, const SliceSpec& spec,
                      const std::vector<SliceBin>& bins);
// Table-shaped text rendering across models (subset x n rows).
std::string render_table(const std::vector<MetricReport>& reports);

// Always ranks by training popularity.
class PopularityRecommender : public Recommender {
 public:
  explicit PopularityRecommender(const Vocabulary& vocab);
  std::string name() const override { return "popularity"; }
  RankMap rank_events(const std::vector<TokenizedStudent>& split_students) const override;
  const std::vector<int>& order() const { return order_; }

 private:
  std::vector<int> order_;
  std::vector<int> rank_of_token_;
};

// Teacher-forced transformer scoring inside packed datapoints; events with no
// same-student predecessor in their datapoint fall back to popularity.
class TransformerRecommender : public Recommender {
 public:
  TransformerRecommender(std::string name, const DecoderParams& params,
                         PipelineConfig eval_pipeline, const Vocabulary& vocab);
  std::string name() const override { return name_; }
  RankMap rank_events(const std::vector<TokenizedStudent>& split_students) const override;

 private:
  std::string name_;
  const DecoderParams& params_;
  PipelineConfig pipeline_;
  PopularityRecommender popularity_;
};

class KnnRecommender : public Recommender {
 public:
  explicit KnnRecommender(const InvertedIndex& index);
  std::string name() const override { return "knn"; }
  RankMap rank_events(const std::vector<TokenizedStudent>& split_students) const override;

 private:
  const InvertedIndex& index_;
};

}  // namespace rec
