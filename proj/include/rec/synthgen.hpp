#pragma once

#include <cstdint>
#include <vector>

#include "rec/corpus.hpp"

namespace rec {

struct CohortConfig {
  int num_districts = 5;
  int schools_per_district = 10;
  int classrooms_per_school = 10;
  int students_per_classroom = 20;
  long catalog_size = 3000;
  double zipf_exponent = 1.1;
  int num_topics = 8;
  // Dirichlet concentration of the per-classroom topic vector; small values
  // give sharply peaked classroom tastes.
  double classroom_concentration = 0.2;
  double homophily = 0.5;          // weight of classroom topic vs individual topic
  double repeat_probability = 0.5; // chance of re-emitting the current item
  // Taste noise: each fresh draw comes from a flat global popularity with
  // this probability, else from the student's topic mixture. Single
  // interactions stay ambiguous about taste; aggregates reveal it.
  double global_taste_weight = 0.5;
  double global_zipf_exponent = 1.0;
  double engagement_log_mean = 2.302585092994046;  // ln 10
  double engagement_log_sd = 1.58;
  int engagement_max = 300;
  std::vector<double> metro_weights = {0.30, 0.40, 0.20, 0.10};            // urban..town
  std::vector<double> ses_weights = {0.30, 0.23, 0.19, 0.15, 0.10, 0.03};  // A..E,unknown
  double reading_score_mean = 0.5;
  double reading_score_sd = 0.15;
  uint64_t seed = 42;

  int total_classrooms() const {
    return num_districts * schools_per_district * classrooms_per_school;
  }
  int total_students() const { return total_classrooms() * students_per_classroom; }
  void validate() const;
};

// Topic-mixture preference model: every topic ranks the whole catalog with a
// Zipf weight over a seeded permutation, classrooms hold a topic vector, and
// each student's mixture blends classroom and individual vectors by the
// homophily weight.
struct PreferenceModel {
  int num_topics = 0;
  long catalog_size = 0;
  std::vector<double> rank_cdf;                 // shared Zipf CDF over ranks
  std::vector<std::vector<long>> topic_items;   // per topic, items by rank
  std::vector<double> global_cdf;               // flat global popularity by item id

  static PreferenceModel build(const CohortConfig& cfg);
  long sample_item(int topic, double u) const;  // u uniform in [0,1)
  long sample_global(double u) const;
};

// Full two-year cohort, deterministic per seed. Classrooms draw independent
// substreams, so output does not depend on generation order.
Bundle generate(const CohortConfig& cfg);

// Fills metro/SES (per school) and reading score/grade (per classroom) from
// seeded draws; generate() already calls this.
void emit_metadata(const CohortConfig& cfg, Bundle& bundle);

}  // namespace rec
