#include "rec/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rec/common.hpp"

namespace rec {

namespace {

constexpr int64_t kYearBase = 1500000000;  // timeline origin, seconds
constexpr int64_t kYearLen = 31536000;     // 365 days

constexpr uint64_t kTagTopics = 0x70701c5;
constexpr uint64_t kTagClassroom = 0xc1a55;
constexpr uint64_t kTagSchoolMeta = 0x5c4001;
constexpr uint64_t kTagClassMeta = 0xc1a55e7a;

double sample_gamma(Rng& rng, double alpha) {
  if (alpha < 1.0) {
    const double u = 1.0 - rng.next_double();
    return sample_gamma(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  // Marsaglia-Tsang squeeze.
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = rng.normal(0.0, 1.0);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - rng.next_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> sample_dirichlet(Rng& rng, int n, double concentration) {
  std::vector<double> out(static_cast<size_t>(n));
  double total = 0.0;
  for (double& v : out) {
    v = sample_gamma(rng, concentration);
    total += v;
  }
  if (total <= 0.0) {
    // Numerically possible for very small concentrations; fall back to a
    // point mass on a random topic.
    std::fill(out.begin(), out.end(), 0.0);
    out[static_cast<size_t>(rng.below(static_cast<uint64_t>(n)))] = 1.0;
    return out;
  }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace

void CohortConfig::validate() const {
  if (num_districts < 1 || schools_per_district < 1 || classrooms_per_school < 1 ||
      students_per_classroom < 1) {
    throw std::runtime_error("cohort: all structure counts must be at least 1");
  }
  if (catalog_size < 1) throw std::runtime_error("cohort: catalog_size must be at least 1");
  if (num_topics < 1) throw std::runtime_error("cohort: num_topics must be at least 1");
  if (homophily < 0.0 || homophily > 1.0) throw std::runtime_error("cohort: homophily out of [0,1]");
  if (repeat_probability < 0.0 || repeat_probability > 1.0) {
    throw std::runtime_error("cohort: repeat_probability out of [0,1]");
  }
  if (global_taste_weight < 0.0 || global_taste_weight >= 1.0) {
    throw std::runtime_error("cohort: global_taste_weight out of [0,1)");
  }
  if (engagement_max < 1) throw std::runtime_error("cohort: engagement_max must be positive");
  if (metro_weights.size() != 4 || ses_weights.size() != 6) {
    throw std::runtime_error("cohort: metadata weight vectors have fixed arity (4 metro, 6 ses)");
  }
}

PreferenceModel PreferenceModel::build(const CohortConfig& cfg) {
  PreferenceModel pm;
  pm.num_topics = cfg.num_topics;
  pm.catalog_size = cfg.catalog_size;

  pm.rank_cdf.resize(static_cast<size_t>(cfg.catalog_size));
  double total = 0.0;
  for (long r = 0; r < cfg.catalog_size; ++r) {
    total += 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
    pm.rank_cdf[static_cast<size_t>(r)] = total;
  }
  for (double& v : pm.rank_cdf) v /= total;

  pm.topic_items.resize(static_cast<size_t>(cfg.num_topics));
  for (int t = 0; t < cfg.num_topics; ++t) {
    auto& items = pm.topic_items[static_cast<size_t>(t)];
    items.resize(static_cast<size_t>(cfg.catalog_size));
    std::iota(items.begin(), items.end(), 1L);  // item ids are 1-based
    Rng rng(derive_seed(cfg.seed, kTagTopics, static_cast<uint64_t>(t)));
    rng.shuffle(items);
  }

  pm.global_cdf.resize(static_cast<size_t>(cfg.catalog_size));
  double gtotal = 0.0;
  for (long r = 0; r < cfg.catalog_size; ++r) {
    gtotal += 1.0 / std::pow(static_cast<double>(r + 1), cfg.global_zipf_exponent);
    pm.global_cdf[static_cast<size_t>(r)] = gtotal;
  }
  for (double& v : pm.global_cdf) v /= gtotal;
  return pm;
}

long PreferenceModel::sample_global(double u) const {
  const auto it = std::upper_bound(global_cdf.begin(), global_cdf.end(), u);
  size_t rank = static_cast<size_t>(it - global_cdf.begin());
  if (rank >= global_cdf.size()) rank = global_cdf.size() - 1;
  return static_cast<long>(rank) + 1;  // global ranking is by item id
}

long PreferenceModel::sample_item(int topic, double u) const {
  const auto& cdf = rank_cdf;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  size_t rank = static_cast<size_t>(it - cdf.begin());
  if (rank >= cdf.size()) rank = cdf.size() - 1;
  return topic_items[static_cast<size_t>(topic)][rank];
}

Bundle generate(const CohortConfig& cfg) {
  cfg.validate();
  const PreferenceModel pref = PreferenceModel::build(cfg);

  Bundle bundle;
  bundle.students.reserve(static_cast<size_t>(cfg.total_students()));

  int classroom_index = 0;
  for (int d = 0; d < cfg.num_districts; ++d) {
    const int64_t district_id = d + 1;
    for (int s = 0; s < cfg.schools_per_district; ++s) {
      const int64_t school_id = district_id * 1000 + s + 1;
      for (int c = 0; c < cfg.classrooms_per_school; ++c, ++classroom_index) {
        const int64_t classroom_id = school_id * 1000 + c + 1;
        Rng rng(derive_seed(cfg.seed, kTagClassroom, static_cast<uint64_t>(classroom_index)));
        const std::vector<double> classroom_topics =
            sample_dirichlet(rng, cfg.num_topics, cfg.classroom_concentration);

        for (int i = 0; i < cfg.students_per_classroom; ++i) {
          StudentRecord rec;
          rec.student_id = classroom_id * 1000 + i + 1;
          rec.classroom_id = classroom_id;
          rec.school_id = school_id;
          rec.district_id = district_id;

          const std::vector<double> own = sample_dirichlet(rng, cfg.num_topics, 0.5);
          std::vector<double> mixture(static_cast<size_t>(cfg.num_topics));
          for (int t = 0; t < cfg.num_topics; ++t) {
            mixture[static_cast<size_t>(t)] = cfg.homophily * classroom_topics[static_cast<size_t>(t)] +
                                              (1.0 - cfg.homophily) * own[static_cast<size_t>(t)];
          }

          const double raw = rng.log_normal(cfg.engagement_log_mean, cfg.engagement_log_sd);
          const long count =
              std::clamp<long>(std::lround(raw), 1, static_cast<long>(cfg.engagement_max));

          std::vector<int64_t> stamps(static_cast<size_t>(count));
          for (auto& ts : stamps) {
            ts = kYearBase + static_cast<int64_t>(rng.below(static_cast<uint64_t>(2 * kYearLen)));
          }
          std::sort(stamps.begin(), stamps.end());
          for (size_t k = 1; k < stamps.size(); ++k) {
            if (stamps[k] <= stamps[k - 1]) stamps[k] = stamps[k - 1] + 1;
          }

          // Interactions arrive in sessions: a fresh draw is re-emitted until
          // its session ends. Session lengths are the two integers bracketing
          // 1/(1-p_repeat), mixed so the marginal continuation rate is exactly
          // p_repeat; switch timing is therefore learnable from run length,
          // the way finishing an item ends a run on a real platform.
          long current_item = -1;
          long remaining = 0;
          rec.interactions.reserve(stamps.size());
          for (int64_t ts : stamps) {
            if (current_item < 0 || remaining == 0) {
              if (rng.next_double() < cfg.global_taste_weight) {
                current_item = pref.sample_global(rng.next_double());
              } else {
                const int topic = static_cast<int>(rng.categorical(mixture));
                current_item = pref.sample_item(topic, rng.next_double());
              }
              if (cfg.repeat_probability >= 1.0) {
                remaining = static_cast<long>(stamps.size());
              } else {
                const double mean_len = 1.0 / (1.0 - cfg.repeat_probability);
                const long lo = static_cast<long>(mean_len);
                const double frac = mean_len - static_cast<double>(lo);
                remaining = lo + (rng.next_double() < frac ? 1 : 0);
              }
            }
            remaining -= 1;
            Interaction it;
            it.student_id = rec.student_id;
            it.item_id = current_item;
            it.timestamp = ts;
            it.school_year = ts < kYearBase + kYearLen ? 1 : 2;
            rec.interactions.push_back(it);
          }
          bundle.students.push_back(std::move(rec));
        }
      }
    }
  }

  std::sort(bundle.students.begin(), bundle.students.end(),
            [](const StudentRecord& a, const StudentRecord& b) { return a.student_id < b.student_id; });
  emit_metadata(cfg, bundle);
  return bundle;
}

void emit_metadata(const CohortConfig& cfg, Bundle& bundle) {
  cfg.validate();
  for (auto& rec : bundle.students) {
    Rng school_rng(derive_seed(cfg.seed, kTagSchoolMeta, static_cast<uint64_t>(rec.school_id)));
    rec.metro = static_cast<MetroCode>(school_rng.categorical(cfg.metro_weights));
    rec.ses = static_cast<SesBand>(school_rng.categorical(cfg.ses_weights));

    Rng class_rng(derive_seed(cfg.seed, kTagClassMeta, static_cast<uint64_t>(rec.classroom_id)));
    rec.grade_level = 1 + static_cast<int>(class_rng.below(12));
    rec.reading_score =
        std::clamp(class_rng.normal(cfg.reading_score_mean, cfg.reading_score_sd), 0.0, 1.0);
  }
}

}  // namespace rec
