#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace rec {

// Reserved token ids; catalog items occupy [kFirstItemToken, v + kFirstItemToken).
constexpr int kPadToken = 0;
constexpr int kSepToken = 1;
constexpr int kOovToken = 2;
constexpr int kFirstItemToken = 3;

enum class MetroCode { kUrban = 0, kSuburban, kRural, kTown };
enum class SesBand { kA = 0, kB, kC, kD, kE, kUnknown };

const char* metro_name(MetroCode m);
const char* ses_name(SesBand s);
MetroCode parse_metro(const std::string& s);
SesBand parse_ses(const std::string& s);

struct Interaction {
  int64_t student_id = 0;
  int64_t item_id = 0;
  int64_t timestamp = 0;  // seconds since epoch, positive
  int school_year = 1;    // 1 or 2
};

struct StudentRecord {
  int64_t student_id = 0;
  int64_t classroom_id = 0;
  int64_t school_id = 0;
  int64_t district_id = 0;
  int grade_level = 0;
  MetroCode metro = MetroCode::kUrban;
  SesBand ses = SesBand::kUnknown;
  double reading_score = 0.0;
  std::vector<Interaction> interactions;  // sorted by timestamp, stable on ties
};

struct Bundle {
  std::vector<StudentRecord> students;  // sorted by student_id

  size_t interaction_count() const;
  const StudentRecord* find(int64_t student_id) const;
};

struct Vocabulary {
  int size = 0;                       // item tokens, excluding reserved ids
  std::map<int64_t, int> item_to_token;
  std::vector<int64_t> token_to_item;  // indexed by token - kFirstItemToken
  std::vector<long> token_counts;      // training popularity per token id (size + 3)
  bool shrunk = false;                 // fewer distinct items than requested v

  int token_of(int64_t item_id) const;
  int total_tokens() const { return size + kFirstItemToken; }
};

// Frequencies counted on the provided (training) interactions only. Ties
// break by ascending item id so the mapping is identical across runs and
// platforms.
Vocabulary build_vocab(const std::vector<Interaction>& train_interactions, int v);

struct SplitSpec {
  double validation_fraction = 0.5;  // of year-2 students
  uint64_t seed = 0;
};

struct SplitResult {
  Bundle train;       // all year-1 interactions
  Bundle validation;  // year-2 interactions of validation students
  Bundle test;        // year-2 interactions of test students
};

// Year 1 becomes the training stage; year-2 students are partitioned whole
// into validation/test by seeded hash.
SplitResult split(const Bundle& bundle, const SplitSpec& spec);

// Tab-separated dataset file with a version header. save() canonicalizes row
// order; load(save(x)) == x and save(load(f)) == f for canonical files.
void save_bundle(const std::string& path, const Bundle& bundle);
Bundle load_bundle(const std::string& path);

std::string bundle_to_string(const Bundle& bundle);
Bundle bundle_from_string(const std::string& text);

}  // namespace rec
