#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rec/corpus.hpp"
#include "rec/evalharness.hpp"
#include "rec/knnrec.hpp"
#include "rec/model.hpp"
#include "rec/optim.hpp"
#include "rec/pipeline.hpp"
#include "rec/synthgen.hpp"

namespace rec {

// Plain-text key-value file with [section] headers; keys address as
// "section.key".
struct KvConfig {
  std::map<std::string, std::string> values;

  static KvConfig parse(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  bool has(const std::string& key) const { return values.count(key) > 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  long get_long(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
  std::vector<int> get_ints(const std::string& key, std::vector<int> fallback) const;

  std::string canonical_text() const;
};

struct ExperimentConfig {
  std::string stage_dir = "run";
  std::string data_dir;  // defaults to stage_dir; ablation sub-runs share it
  uint64_t seed = 42;

  CohortConfig cohort;
  int vocab_size = 2000;
  double validation_fraction = 0.5;
  bool cache_packed = true;

  PipelineConfig pipeline;
  DecoderConfig decoder;  // vocab_tokens resolved from the vocabulary at use
  ScheduleConfig schedule;
  int train_steps = 3500;
  int batch_size = 64;
  double train_fraction = 1.0;  // student-level subset of the training split

  KnnConfig knn;

  std::string eval_split = "test";  // validation | test
  std::vector<int> eval_ns = {1, 3, 5, 10, 20};
  int bootstrap_resamples = 50;
  std::vector<double> engagement_bins = {0, 10, 20, 35, 65, 1e9};
  std::vector<double> reading_bins = {0, 0.35, 0.5, 0.65, 1.0001};

  static ExperimentConfig from_kv(const KvConfig& kv);
  std::string resolved_text() const;  // canonical frozen form
  uint64_t config_hash() const;

  std::string data_path(const std::string& name) const;
  std::string stage_path(const std::string& name) const;
  void validate() const;
};

struct StageOutcome {
  bool skipped = false;
  std::vector<std::string> artifacts;
};

// Stages write artifacts atomically, append a manifest row per artifact, and
// no-op when a completed marker matches the current config hash.
StageOutcome run_generate(const ExperimentConfig& cfg);
StageOutcome run_preprocess(const ExperimentConfig& cfg);
StageOutcome run_train(const ExperimentConfig& cfg, const std::string& model);
StageOutcome run_eval(const ExperimentConfig& cfg, const std::string& model);
StageOutcome run_ablation(const ExperimentConfig& cfg, const std::string& kind);
// Renders reports/table.txt from every report CSV present.
StageOutcome run_report(const ExperimentConfig& cfg);

// Loaded artifacts shared by eval paths.
struct LoadedData {
  Bundle full;
  SplitResult splits;
  Vocabulary vocab;
};
LoadedData load_data(const ExperimentConfig& cfg);

std::vector<TokenizedStudent> eval_students(const ExperimentConfig& cfg, const LoadedData& data);
// Student-level training subset, nested across fractions under one seed.
std::vector<TokenizedStudent> train_students(const ExperimentConfig& cfg, const LoadedData& data);

std::string vocab_to_string(const Vocabulary& vocab);
Vocabulary vocab_from_string(const std::string& text);

}  // namespace rec
