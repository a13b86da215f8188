#include "rec/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "rec/common.hpp"

namespace rec {

namespace {
constexpr uint64_t kTagBootstrap = 0xb007;

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}
}  // namespace

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::kAll: return "all";
    case Subset::kNonContinuation: return "non_continuation";
    case Subset::kNovel: return "novel";
  }
  return "?";
}

const char* slice_var_name(SliceVar v) {
  switch (v) {
    case SliceVar::kEngagement: return "engagement";
    case SliceVar::kMetro: return "metro";
    case SliceVar::kSes: return "ses";
    case SliceVar::kReading: return "reading_score";
  }
  return "?";
}

SliceVar parse_slice_var(const std::string& s) {
  if (s == "engagement") return SliceVar::kEngagement;
  if (s == "metro") return SliceVar::kMetro;
  if (s == "ses") return SliceVar::kSes;
  if (s == "reading_score") return SliceVar::kReading;
  throw std::runtime_error("unknown slice variable '" + s + "'");
}

std::vector<EvalEvent> build_events(const std::vector<TokenizedStudent>& split_students,
                                    const std::map<int64_t, std::vector<int>>* prior_tokens) {
  std::vector<EvalEvent> out;
  for (const TokenizedStudent& s : split_students) {
    std::unordered_set<int> seen;
    if (prior_tokens) {
      auto it = prior_tokens->find(s.student_id);
      if (it != prior_tokens->end()) seen.insert(it->second.begin(), it->second.end());
    }
    for (int i = 0; i < static_cast<int>(s.tokens.size()); ++i) {
      const int target = s.tokens[static_cast<size_t>(i)];
      EvalEvent ev;
      ev.student_id = s.student_id;
      ev.index = i;
      ev.target = target;
      ev.continuation = i > 0 && s.tokens[static_cast<size_t>(i - 1)] == target;
      ev.novel = seen.find(target) == seen.end();
      ev.oov = target == kOovToken;
      out.push_back(ev);
      seen.insert(target);
    }
  }
  std::sort(out.begin(), out.end(), [](const EvalEvent& a, const EvalEvent& b) {
    if (a.student_id != b.student_id) return a.student_id < b.student_id;
    return a.index < b.index;
  });
  return out;
}

ScoredEvents collect_events(const std::vector<EvalEvent>& events, const Recommender& rec,
                            const std::vector<TokenizedStudent>& split_students) {
  const RankMap ranks = rec.rank_events(split_students);
  ScoredEvents out;
  out.events.reserve(events.size());
  out.ranks.reserve(events.size());
  for (const EvalEvent& ev : events) {
    if (ev.oov) {
      out.oov_events += 1;
      continue;
    }
    auto it = ranks.find(EventKey{ev.student_id, ev.index});
    if (it == ranks.end()) {
      out.error_events += 1;
      continue;
    }
    out.events.push_back(ev);
    out.ranks.push_back(it->second);
  }
  return out;
}

namespace {
bool in_subset(const EvalEvent& ev, Subset subset) {
  switch (subset) {
    case Subset::kAll: return true;
    case Subset::kNonContinuation: return !ev.continuation;
    case Subset::kNovel: return ev.novel;
  }
  return false;
}
}  // namespace

HitsStat hits_at_n(const ScoredEvents& scored, int n, Subset subset) {
  if (n < 1) throw std::runtime_error("hits_at_n: n must be at least 1");
  HitsStat stat;
  size_t i = 0;
  double rate_sum = 0.0;
  while (i < scored.events.size()) {
    const int64_t student = scored.events[i].student_id;
    long subset_events = 0;
    long hits = 0;
    for (; i < scored.events.size() && scored.events[i].student_id == student; ++i) {
      if (!in_subset(scored.events[i], subset)) continue;
      subset_events += 1;
      if (scored.ranks[i] <= n) hits += 1;
    }
    if (subset_events == 0) continue;  // students without subset events are dropped
    const double rate = 100.0 * static_cast<double>(hits) / static_cast<double>(subset_events);
    stat.rates.push_back(rate);
    rate_sum += rate;
    stat.students += 1;
    stat.events += subset_events;
  }
  if (stat.students > 0) {
    stat.empty = false;
    stat.mean_pct = rate_sum / static_cast<double>(stat.students);
  }
  return stat;
}

ScoredEvents filter_students(const ScoredEvents& scored,
                             const std::function<bool(int64_t, long)>& keep) {
  std::map<int64_t, long> counts;
  for (const EvalEvent& ev : scored.events) counts[ev.student_id] += 1;
  ScoredEvents out;
  out.oov_events = scored.oov_events;
  out.error_events = scored.error_events;
  for (size_t i = 0; i < scored.events.size(); ++i) {
    const EvalEvent& ev = scored.events[i];
    if (!keep(ev.student_id, counts[ev.student_id])) continue;
    out.events.push_back(ev);
    out.ranks.push_back(scored.ranks[i]);
  }
  return out;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& rates, int resamples,
                                       uint64_t seed) {
  if (rates.empty()) throw std::runtime_error("bootstrap_ci: no students");
  if (resamples < 1) throw std::runtime_error("bootstrap_ci: resamples must be positive");
  if (rates.size() == 1) return {rates[0], rates[0]};
  Rng rng(derive_seed(seed, kTagBootstrap));
  std::vector<double> means;
  means.reserve(static_cast<size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    double total = 0.0;
    for (size_t i = 0; i < rates.size(); ++i) {
      total += rates[static_cast<size_t>(rng.below(rates.size()))];
    }
    means.push_back(total / static_cast<double>(rates.size()));
  }
  std::sort(means.begin(), means.end());
  auto percentile = [&means](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, means.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] * (1.0 - frac) + means[hi] * frac;
  };
  return {percentile(0.025), percentile(0.975)};
}

MetricReport compute_report(const std::string& model, const ScoredEvents& scored,
                            const std::vector<int>& ns, int resamples, uint64_t seed) {
  MetricReport report;
  report.model = model;
  report.oov_events = scored.oov_events;
  report.error_events = scored.error_events;
  for (Subset subset : {Subset::kAll, Subset::kNonContinuation, Subset::kNovel}) {
    for (int n : ns) {
      MetricCell cell;
      cell.subset = subset;
      cell.n = n;
      const HitsStat stat = hits_at_n(scored, n, subset);
      if (!stat.empty) {
        cell.empty = false;
        cell.mean = stat.mean_pct;
        cell.students = stat.students;
        cell.events = stat.events;
        const auto [lo, hi] = bootstrap_ci(
            stat.rates, resamples,
            derive_seed(seed, static_cast<uint64_t>(subset), static_cast<uint64_t>(n)));
        cell.ci_low = lo;
        cell.ci_high = hi;
      }
      report.cells.push_back(cell);
    }
  }
  return report;
}

std::map<int64_t, StudentAttr> student_attrs(const Bundle& full_bundle) {
  std::map<int64_t, StudentAttr> out;
  for (const StudentRecord& s : full_bundle.students) {
    StudentAttr a;
    a.engagement = static_cast<long>(s.interactions.size());
    a.metro = s.metro;
    a.ses = s.ses;
    a.reading = s.reading_score;
    out[s.student_id] = a;
  }
  return out;
}

namespace {
std::string numeric_bin_label(double lo, double hi) {
  std::ostringstream ss;
  ss << "[" << format_double(lo) << "," << (std::isfinite(hi) ? format_double(hi) : "inf") << ")";
  return ss.str();
}
}  // namespace

std::vector<SliceBin> slice(const ScoredEvents& scored,
                            const std::map<int64_t, StudentAttr>& attrs, const SliceSpec& spec,
                            const std::vector<int>& ns, int resamples, uint64_t seed) {
  const bool categorical = spec.var == SliceVar::kMetro || spec.var == SliceVar::kSes;
  std::vector<std::string> labels;
  int bins = 0;
  if (categorical) {
    bins = spec.var == SliceVar::kMetro ? 4 : 6;
    for (int b = 0; b < bins; ++b) {
      labels.push_back(spec.var == SliceVar::kMetro ? metro_name(static_cast<MetroCode>(b))
                                                    : ses_name(static_cast<SesBand>(b)));
    }
  } else {
    if (spec.edges.size() < 2) throw std::runtime_error("slice: need at least two bin edges");
    for (size_t e = 0; e + 1 < spec.edges.size(); ++e) {
      if (spec.edges[e] >= spec.edges[e + 1]) {
        throw std::runtime_error("slice: bin edges must be strictly ascending");
      }
      labels.push_back(numeric_bin_label(spec.edges[e], spec.edges[e + 1]));
    }
    bins = static_cast<int>(labels.size());
  }

  auto bin_of = [&](int64_t student) -> int {
    auto it = attrs.find(student);
    if (it == attrs.end()) throw std::runtime_error("slice: missing metadata for student");
    const StudentAttr& a = it->second;
    if (spec.var == SliceVar::kMetro) return static_cast<int>(a.metro);
    if (spec.var == SliceVar::kSes) return static_cast<int>(a.ses);
    const double x = spec.var == SliceVar::kEngagement ? static_cast<double>(a.engagement)
                                                       : a.reading;
    for (size_t e = 0; e + 1 < spec.edges.size(); ++e) {
      if (x >= spec.edges[e] && x < spec.edges[e + 1]) return static_cast<int>(e);
    }
    return -1;  // outside every bin
  };

  std::vector<ScoredEvents> per_bin(static_cast<size_t>(bins));
  for (size_t i = 0; i < scored.events.size(); ++i) {
    const int b = bin_of(scored.events[i].student_id);
    if (b < 0) continue;
    per_bin[static_cast<size_t>(b)].events.push_back(scored.events[i]);
    per_bin[static_cast<size_t>(b)].ranks.push_back(scored.ranks[i]);
  }

  std::vector<SliceBin> out;
  for (int b = 0; b < bins; ++b) {
    SliceBin bin;
    bin.label = labels[static_cast<size_t>(b)];
    std::set<int64_t> students;
    for (const EvalEvent& ev : per_bin[static_cast<size_t>(b)].events) students.insert(ev.student_id);
    bin.students = static_cast<long>(students.size());
    const MetricReport rep =
        compute_report("", per_bin[static_cast<size_t>(b)], ns, resamples,
                       derive_seed(seed, 0x511ce, static_cast<uint64_t>(b)));
    bin.cells = rep.cells;
    out.push_back(std::move(bin));
  }
  return out;
}

std::string report_csv(const MetricReport& report) {
  std::ostringstream out;
  out << "model,subset,n,mean,ci_low,ci_high,students,events\n";
  for (const MetricCell& c : report.cells) {
    out << report.model << "," << subset_name(c.subset) << "," << c.n << ",";
    if (c.empty) {
      out << "NA,NA,NA";
    } else {
      out << pct(c.mean) << "," << pct(c.ci_low) << "," << pct(c.ci_high);
    }
    out << "," << c.students << "," << c.events << "\n";
  }
  return out.str();
}

std::string slice_csv(const std::string& model, const SliceSpec& spec,
                      const std::vector<SliceBin>& bins) {
  std::ostringstream out;
  out << "model,variable,bin,students,subset,n,mean,ci_low,ci_high,bin_events\n";
  for (const SliceBin& bin : bins) {
    for (const MetricCell& c : bin.cells) {
      out << model << "," << slice_var_name(spec.var) << "," << bin.label << "," << bin.students
          << "," << subset_name(c.subset) << "," << c.n << ",";
      if (c.empty) {
        out << "NA,NA,NA";
      } else {
        out << pct(c.mean) << "," << pct(c.ci_low) << "," << pct(c.ci_high);
      }
      out << "," << c.events << "\n";
    }
  }
  return out.str();
}

std::string render_table(const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  out << "Evaluation subset |   n";
  for (const MetricReport& r : reports) {
    out << " | " << r.model;
  }
  out << "\n";
  if (reports.empty()) return out.str();
  const size_t cells = reports.front().cells.size();
  for (size_t i = 0; i < cells; ++i) {
    const MetricCell& lead = reports.front().cells[i];
    char head[64];
    std::snprintf(head, sizeof(head), "%-17s | %3d", subset_name(lead.subset), lead.n);
    out << head;
    for (const MetricReport& r : reports) {
      const MetricCell& c = r.cells[i];
      char buf[64];
      if (c.empty) {
        std::snprintf(buf, sizeof(buf), " | %*s", static_cast<int>(r.model.size()), "NA");
      } else {
        std::snprintf(buf, sizeof(buf), " | %.2f +- %.2f", c.mean, (c.ci_high - c.ci_low) / 2.0);
      }
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

PopularityRecommender::PopularityRecommender(const Vocabulary& vocab) {
  order_.push_back(kOovToken);
  for (int t = kFirstItemToken; t < vocab.total_tokens(); ++t) order_.push_back(t);
  std::sort(order_.begin(), order_.end(), [&vocab](int a, int b) {
    const long ca = vocab.token_counts[static_cast<size_t>(a)];
    const long cb = vocab.token_counts[static_cast<size_t>(b)];
    if (ca != cb) return ca > cb;
    return a < b;
  });
  rank_of_token_.assign(static_cast<size_t>(vocab.total_tokens()), -1);
  for (size_t i = 0; i < order_.size(); ++i) {
    rank_of_token_[static_cast<size_t>(order_[i])] = static_cast<int>(i) + 1;
  }
}

RankMap PopularityRecommender::rank_events(
    const std::vector<TokenizedStudent>& split_students) const {
  RankMap out;
  for (const TokenizedStudent& s : split_students) {
    for (int i = 0; i < static_cast<int>(s.tokens.size()); ++i) {
      const int target = s.tokens[static_cast<size_t>(i)];
      if (target == kPadToken || target == kSepToken) continue;
      out[EventKey{s.student_id, i}] = rank_of_token_[static_cast<size_t>(target)];
    }
  }
  return out;
}

TransformerRecommender::TransformerRecommender(std::string name, const DecoderParams& params,
                                               PipelineConfig eval_pipeline,
                                               const Vocabulary& vocab)
    : name_(std::move(name)), params_(params), pipeline_(eval_pipeline), popularity_(vocab) {}

RankMap TransformerRecommender::rank_events(
    const std::vector<TokenizedStudent>& split_students) const {
  RankMap fallback = popularity_.rank_events(split_students);
  RankMap out;
  const std::vector<DataPoint> dps = pack_epoch(split_students, pipeline_, /*epoch=*/0);
  for (const DataPoint& dp : dps) {
    Graph g;
    BoundParams bound = bind_params(g, params_, nullptr);
    const MaskMatrix mask = build_mask(dp, params_.config.mask_mode);
    const ForwardResult fwd =
        decoder_forward(g, params_, bound, dp, mask, /*training=*/false, nullptr);
    const Tensor& logits = g.value(fwd.logits);
    for (int p = 0; p < dp.length(); ++p) {
      const int idx = dp.position_index[static_cast<size_t>(p)];
      if (idx < 0) continue;  // SEP/PAD
      const int target = dp.tokens[static_cast<size_t>(p)];
      const EventKey key{dp.position_student[static_cast<size_t>(p)], idx};
      const bool has_context =
          p > 0 && dp.position_student[static_cast<size_t>(p - 1)] ==
                       dp.position_student[static_cast<size_t>(p)];
      if (!has_context) {
        auto it = fallback.find(key);
        if (it != fallback.end()) out[key] = it->second;
        continue;
      }
      out[key] = rank_of_target(logits.row(p - 1), params_.config.vocab_tokens, target);
    }
  }
  return out;
}

KnnRecommender::KnnRecommender(const InvertedIndex& index) : index_(index) {}

RankMap KnnRecommender::rank_events(const std::vector<TokenizedStudent>& split_students) const {
  RankMap out;
  for (const TokenizedStudent& s : split_students) {
    for (int i = 0; i < static_cast<int>(s.tokens.size()); ++i) {
      const int target = s.tokens[static_cast<size_t>(i)];
      if (target == kPadToken || target == kSepToken) continue;
      const SparseCounts query = featurize(s.tokens, i, index_.config().history);
      out[EventKey{s.student_id, i}] = index_.rank_of(query, target);
    }
  }
  return out;
}

}  // namespace rec
