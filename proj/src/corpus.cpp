#include "rec/corpus.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "rec/common.hpp"

namespace rec {

namespace {
constexpr const char* kFileMagic = "# cohort-interactions v1";

const char* kMetroNames[] = {"urban", "suburban", "rural", "town"};
const char* kSesNames[] = {"A", "B", "C", "D", "E", "unknown"};

int64_t parse_i64(const std::string& s, int line, const char* field) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') {
    throw std::runtime_error("dataset line " + std::to_string(line) + ": bad " + field + " '" +
                             s + "'");
  }
  return v;
}

double parse_f64(const std::string& s, int line, const char* field) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw std::runtime_error("dataset line " + std::to_string(line) + ": bad " + field + " '" +
                             s + "'");
  }
  return v;
}
}  // namespace

const char* metro_name(MetroCode m) { return kMetroNames[static_cast<int>(m)]; }
const char* ses_name(SesBand s) { return kSesNames[static_cast<int>(s)]; }

MetroCode parse_metro(const std::string& s) {
  for (int i = 0; i < 4; ++i) {
    if (s == kMetroNames[i]) return static_cast<MetroCode>(i);
  }
  throw std::runtime_error("unknown metro code '" + s + "'");
}

SesBand parse_ses(const std::string& s) {
  for (int i = 0; i < 6; ++i) {
    if (s == kSesNames[i]) return static_cast<SesBand>(i);
  }
  throw std::runtime_error("unknown ses band '" + s + "'");
}

size_t Bundle::interaction_count() const {
  size_t n = 0;
  for (const auto& s : students) n += s.interactions.size();
  return n;
}

const StudentRecord* Bundle::find(int64_t student_id) const {
  auto it = std::lower_bound(students.begin(), students.end(), student_id,
                             [](const StudentRecord& s, int64_t id) { return s.student_id < id; });
  if (it == students.end() || it->student_id != student_id) return nullptr;
  return &*it;
}

int Vocabulary::token_of(int64_t item_id) const {
  auto it = item_to_token.find(item_id);
  return it == item_to_token.end() ? kOovToken : it->second;
}

Vocabulary build_vocab(const std::vector<Interaction>& train_interactions, int v) {
  if (v < 1) throw std::runtime_error("build_vocab: v must be at least 1");
  std::unordered_map<int64_t, long> counts;
  for (const Interaction& it : train_interactions) counts[it.item_id] += 1;

  std::vector<std::pair<int64_t, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  vocab.size = std::min<int>(v, static_cast<int>(ranked.size()));
  vocab.shrunk = vocab.size < v;
  vocab.token_to_item.reserve(static_cast<size_t>(vocab.size));
  vocab.token_counts.assign(static_cast<size_t>(vocab.size) + kFirstItemToken, 0);
  for (int i = 0; i < vocab.size; ++i) {
    const int token = kFirstItemToken + i;
    vocab.item_to_token[ranked[static_cast<size_t>(i)].first] = token;
    vocab.token_to_item.push_back(ranked[static_cast<size_t>(i)].first);
    vocab.token_counts[static_cast<size_t>(token)] = ranked[static_cast<size_t>(i)].second;
  }
  for (size_t i = static_cast<size_t>(vocab.size); i < ranked.size(); ++i) {
    vocab.token_counts[kOovToken] += ranked[i].second;
  }
  return vocab;
}

SplitResult split(const Bundle& bundle, const SplitSpec& spec) {
  if (spec.validation_fraction < 0.0 || spec.validation_fraction > 1.0) {
    throw std::runtime_error("split: validation_fraction out of range");
  }
  bool saw_year1 = false;
  bool saw_year2 = false;
  for (const auto& s : bundle.students) {
    for (const auto& it : s.interactions) {
      if (it.school_year == 1) saw_year1 = true;
      if (it.school_year == 2) saw_year2 = true;
    }
  }
  if (!saw_year1 || !saw_year2) {
    throw std::runtime_error("split: both school years must be present");
  }

  SplitResult out;
  for (const auto& s : bundle.students) {
    StudentRecord train_rec = s;
    StudentRecord eval_rec = s;
    train_rec.interactions.clear();
    eval_rec.interactions.clear();
    for (const auto& it : s.interactions) {
      (it.school_year == 1 ? train_rec : eval_rec).interactions.push_back(it);
    }
    if (!train_rec.interactions.empty()) out.train.students.push_back(std::move(train_rec));
    if (!eval_rec.interactions.empty()) {
      // Whole-student assignment: hash is independent of everything except
      // seed and student id.
      const double u = static_cast<double>(
                           derive_seed(spec.seed, 0x5eedu, static_cast<uint64_t>(s.student_id)) >>
                           11) *
                       0x1.0p-53;
      (u < spec.validation_fraction ? out.validation : out.test)
          .students.push_back(std::move(eval_rec));
    }
  }
  return out;
}

std::string bundle_to_string(const Bundle& bundle) {
  // Canonical order: students ascending, interactions already time-sorted.
  std::vector<const StudentRecord*> order;
  order.reserve(bundle.students.size());
  for (const auto& s : bundle.students) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const StudentRecord* a, const StudentRecord* b) { return a->student_id < b->student_id; });

  std::ostringstream out;
  out << kFileMagic << "\n";
  out << "student_id\titem_id\ttimestamp\tschool_year\tclassroom_id\tschool_id\tdistrict_id\t"
         "grade\tmetro_code\tses_band\treading_score\n";
  for (const StudentRecord* s : order) {
    for (const Interaction& it : s->interactions) {
      out << s->student_id << '\t' << it.item_id << '\t' << it.timestamp << '\t' << it.school_year
          << '\t' << s->classroom_id << '\t' << s->school_id << '\t' << s->district_id << '\t'
          << s->grade_level << '\t' << metro_name(s->metro) << '\t' << ses_name(s->ses) << '\t'
          << format_double(s->reading_score) << '\n';
    }
  }
  return out.str();
}

Bundle bundle_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;

  if (!std::getline(in, line)) return Bundle{};
  ++line_no;
  if (line != kFileMagic) {
    throw std::runtime_error("dataset line 1: unknown format/version header '" + line + "'");
  }
  if (!std::getline(in, line)) return Bundle{};
  ++line_no;  // column header

  std::unordered_map<int64_t, StudentRecord> students;
  std::vector<int64_t> order;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, '\t');
    if (f.size() != 11) {
      throw std::runtime_error("dataset line " + std::to_string(line_no) + ": expected 11 fields, got " +
                               std::to_string(f.size()));
    }
    Interaction it;
    it.student_id = parse_i64(f[0], line_no, "student_id");
    it.item_id = parse_i64(f[1], line_no, "item_id");
    it.timestamp = parse_i64(f[2], line_no, "timestamp");
    it.school_year = static_cast<int>(parse_i64(f[3], line_no, "school_year"));
    if (it.timestamp <= 0) {
      throw std::runtime_error("dataset line " + std::to_string(line_no) + ": timestamp must be positive");
    }
    if (it.school_year != 1 && it.school_year != 2) {
      throw std::runtime_error("dataset line " + std::to_string(line_no) + ": school_year must be 1 or 2");
    }
    auto [iter, inserted] = students.try_emplace(it.student_id);
    StudentRecord& rec = iter->second;
    if (inserted) {
      order.push_back(it.student_id);
      rec.student_id = it.student_id;
      rec.classroom_id = parse_i64(f[4], line_no, "classroom_id");
      rec.school_id = parse_i64(f[5], line_no, "school_id");
      rec.district_id = parse_i64(f[6], line_no, "district_id");
      rec.grade_level = static_cast<int>(parse_i64(f[7], line_no, "grade"));
      rec.metro = parse_metro(f[8]);
      rec.ses = parse_ses(f[9]);
      rec.reading_score = parse_f64(f[10], line_no, "reading_score");
    }
    if (!rec.interactions.empty() && it.timestamp < rec.interactions.back().timestamp) {
      throw std::runtime_error("dataset line " + std::to_string(line_no) +
                               ": timestamps not ascending within student");
    }
    rec.interactions.push_back(it);
  }

  Bundle bundle;
  std::sort(order.begin(), order.end());
  bundle.students.reserve(order.size());
  for (int64_t id : order) bundle.students.push_back(std::move(students[id]));
  return bundle;
}

void save_bundle(const std::string& path, const Bundle& bundle) {
  atomic_write_file(path, bundle_to_string(bundle));
}

Bundle load_bundle(const std::string& path) { return bundle_from_string(read_file(path)); }

}  // namespace rec
