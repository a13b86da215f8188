#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rec/corpus.hpp"

namespace rec {

enum class Grouping { kClassroom, kDistrictYear, kSingle, kIndividual };

const char* grouping_name(Grouping g);
Grouping parse_grouping(const std::string& s);

struct PipelineConfig {
  int context = 65;  // c
  int segment = 65;  // s
  Grouping grouping = Grouping::kClassroom;
  // Opens every packed segment with a separator carrying the student's id and
  // a timestamp just before their first interaction. That position sees only
  // strictly-earlier peer interactions, so it is a leak-free cold-start query
  // for the segment's first token; without it, first events have no
  // predicting position at all.
  bool cold_start_anchor = true;
  uint64_t seed = 0;

  // A packed segment always carries its separator (and anchor, when enabled)
  // inside the context budget.
  int overhead() const { return cold_start_anchor ? 2 : 1; }
  int effective_payload() const {
    return segment < context - overhead() ? segment : context - overhead();
  }
  void validate() const;
};

struct TokenizedStudent {
  int64_t student_id = 0;
  int64_t classroom_id = 0;
  int64_t school_id = 0;
  int64_t district_id = 0;
  int school_year = 1;  // school year of this split's interactions
  std::vector<int> tokens;
  std::vector<int64_t> timestamps;
};

struct Segment {
  int64_t student_id = 0;
  int start_index = 0;  // offset into the student's split sequence
  std::vector<int> tokens;
  std::vector<int64_t> timestamps;
};

struct DataPoint {
  std::vector<int> tokens;
  std::vector<int64_t> timestamps;
  std::vector<int64_t> position_student;  // -1 at PAD
  std::vector<int> position_index;        // split-sequence index; -1 at SEP/PAD
  std::vector<uint8_t> loss_mask;         // position i scored against tokens[i+1]

  int length() const { return static_cast<int>(tokens.size()); }
};

std::vector<TokenizedStudent> tokenize(const Bundle& bundle, const Vocabulary& vocab);

// Consecutive non-overlapping windows of at most c tokens, one student per
// datapoint, no separators.
std::vector<DataPoint> window_individual(const TokenizedStudent& student, int context);

std::vector<Segment> segment_student(const TokenizedStudent& student, int max_payload);

// Greedy first-fit packing of one group after a seeded student shuffle: at
// most one segment per student per datapoint, each segment lands in exactly
// one datapoint, every segment is terminated with a separator.
std::vector<DataPoint> assemble_group(const std::vector<const TokenizedStudent*>& members,
                                      const PipelineConfig& cfg, uint64_t shuffle_seed);

// One full pass over every segment of every student, grouped per the config;
// deterministic in (cfg.seed, epoch).
std::vector<DataPoint> pack_epoch(const std::vector<TokenizedStudent>& students,
                                  const PipelineConfig& cfg, uint64_t epoch);

// Appends PAD up to target_len; PAD positions carry student -1 and are never
// scored.
void pad_datapoint(DataPoint& dp, int target_len);

// Versioned binary cache of packed datapoints.
void save_datapoints(const std::string& path, const std::vector<DataPoint>& dps);
std::vector<DataPoint> load_datapoints(const std::string& path);

int64_t group_key(const TokenizedStudent& s, Grouping grouping);

}  // namespace rec
