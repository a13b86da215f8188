#include "rec/pipeline.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rec/common.hpp"

namespace rec {

namespace {
constexpr uint64_t kTagGroupShuffle = 0x9a0c4;
constexpr uint64_t kTagEpochOrder = 0xe90c4;

void finish_loss_mask(DataPoint& dp) {
  const int n = dp.length();
  dp.loss_mask.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i + 1 < n; ++i) {
    if (dp.tokens[static_cast<size_t>(i)] == kPadToken) continue;
    if (dp.tokens[static_cast<size_t>(i + 1)] == kPadToken) continue;
    if (dp.position_student[static_cast<size_t>(i)] != dp.position_student[static_cast<size_t>(i + 1)]) {
      continue;
    }
    // A separator is scored only as a cold-start anchor, i.e. when the next
    // position is a real interaction of the same student.
    if (dp.tokens[static_cast<size_t>(i)] == kSepToken &&
        dp.position_index[static_cast<size_t>(i + 1)] < 0) {
      continue;
    }
    dp.loss_mask[static_cast<size_t>(i)] = 1;
  }
}
}  // namespace

const char* grouping_name(Grouping g) {
  switch (g) {
    case Grouping::kClassroom: return "classroom";
    case Grouping::kDistrictYear: return "district-year";
    case Grouping::kSingle: return "single";
    case Grouping::kIndividual: return "individual";
  }
  return "?";
}

Grouping parse_grouping(const std::string& s) {
  if (s == "classroom") return Grouping::kClassroom;
  if (s == "district-year") return Grouping::kDistrictYear;
  if (s == "single") return Grouping::kSingle;
  if (s == "individual") return Grouping::kIndividual;
  throw std::runtime_error("unknown grouping '" + s + "'");
}

void PipelineConfig::validate() const {
  if (context < 2) throw std::runtime_error("pipeline: context must be at least 2");
  if (segment < 1) throw std::runtime_error("pipeline: segment must be at least 1");
  if (segment > context) throw std::runtime_error("pipeline: segment must not exceed context");
  if (effective_payload() < 1) {
    throw std::runtime_error("pipeline: context too small for segment framing");
  }
}

std::vector<TokenizedStudent> tokenize(const Bundle& bundle, const Vocabulary& vocab) {
  std::vector<TokenizedStudent> out;
  out.reserve(bundle.students.size());
  for (const StudentRecord& rec : bundle.students) {
    if (rec.interactions.empty()) continue;
    TokenizedStudent ts;
    ts.student_id = rec.student_id;
    ts.classroom_id = rec.classroom_id;
    ts.school_id = rec.school_id;
    ts.district_id = rec.district_id;
    ts.school_year = rec.interactions.front().school_year;
    ts.tokens.reserve(rec.interactions.size());
    ts.timestamps.reserve(rec.interactions.size());
    for (const Interaction& it : rec.interactions) {
      ts.tokens.push_back(vocab.token_of(it.item_id));
      ts.timestamps.push_back(it.timestamp);
    }
    out.push_back(std::move(ts));
  }
  return out;
}

std::vector<DataPoint> window_individual(const TokenizedStudent& student, int context) {
  if (context < 1) throw std::runtime_error("window_individual: context must be positive");
  std::vector<DataPoint> out;
  const int n = static_cast<int>(student.tokens.size());
  for (int start = 0; start < n; start += context) {
    const int len = std::min(context, n - start);
    DataPoint dp;
    dp.tokens.assign(student.tokens.begin() + start, student.tokens.begin() + start + len);
    dp.timestamps.assign(student.timestamps.begin() + start,
                         student.timestamps.begin() + start + len);
    dp.position_student.assign(static_cast<size_t>(len), student.student_id);
    dp.position_index.resize(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) dp.position_index[static_cast<size_t>(i)] = start + i;
    finish_loss_mask(dp);
    out.push_back(std::move(dp));
  }
  return out;
}

std::vector<Segment> segment_student(const TokenizedStudent& student, int max_payload) {
  if (max_payload < 1) throw std::runtime_error("segment_student: segment length must be positive");
  std::vector<Segment> out;
  const int n = static_cast<int>(student.tokens.size());
  for (int start = 0; start < n; start += max_payload) {
    const int len = std::min(max_payload, n - start);
    Segment seg;
    seg.student_id = student.student_id;
    seg.start_index = start;
    seg.tokens.assign(student.tokens.begin() + start, student.tokens.begin() + start + len);
    seg.timestamps.assign(student.timestamps.begin() + start,
                          student.timestamps.begin() + start + len);
    out.push_back(std::move(seg));
  }
  return out;
}

std::vector<DataPoint> assemble_group(const std::vector<const TokenizedStudent*>& members,
                                      const PipelineConfig& cfg, uint64_t shuffle_seed) {
  cfg.validate();
  const int payload = cfg.effective_payload();
  const int context = cfg.context;

  struct Cursor {
    const TokenizedStudent* student;
    std::vector<Segment> segments;
    size_t next = 0;
  };
  std::vector<Cursor> cursors;
  cursors.reserve(members.size());
  for (const TokenizedStudent* m : members) {
    if (m->tokens.empty()) continue;
    cursors.push_back(Cursor{m, segment_student(*m, payload), 0});
  }
  std::sort(cursors.begin(), cursors.end(), [](const Cursor& a, const Cursor& b) {
    return a.student->student_id < b.student->student_id;
  });
  Rng rng(shuffle_seed);
  rng.shuffle(cursors);

  std::vector<DataPoint> out;
  size_t remaining = 0;
  for (const Cursor& c : cursors) remaining += c.segments.size();

  const int overhead = cfg.overhead();
  while (remaining > 0) {
    DataPoint dp;
    for (Cursor& cur : cursors) {
      if (cur.next >= cur.segments.size()) continue;
      const Segment& seg = cur.segments[cur.next];
      const int seg_len = static_cast<int>(seg.tokens.size());
      if (seg_len > context - overhead) {
        throw std::runtime_error("assemble_group: segment exceeds context budget");
      }
      if (dp.length() + seg_len + overhead > context) continue;
      if (cfg.cold_start_anchor) {
        dp.tokens.push_back(kSepToken);
        dp.timestamps.push_back(seg.timestamps.front() - 1);
        dp.position_student.push_back(seg.student_id);
        dp.position_index.push_back(-1);
      }
      for (int i = 0; i < seg_len; ++i) {
        dp.tokens.push_back(seg.tokens[static_cast<size_t>(i)]);
        dp.timestamps.push_back(seg.timestamps[static_cast<size_t>(i)]);
        dp.position_student.push_back(seg.student_id);
        dp.position_index.push_back(seg.start_index + i);
      }
      // Separator carries the segment's student and the preceding timestamp.
      dp.tokens.push_back(kSepToken);
      dp.timestamps.push_back(seg.timestamps.back());
      dp.position_student.push_back(seg.student_id);
      dp.position_index.push_back(-1);
      cur.next += 1;
      remaining -= 1;
    }
    finish_loss_mask(dp);
    out.push_back(std::move(dp));
  }
  return out;
}

int64_t group_key(const TokenizedStudent& s, Grouping grouping) {
  switch (grouping) {
    case Grouping::kClassroom: return s.classroom_id;
    case Grouping::kDistrictYear: return s.district_id * 8 + s.school_year;
    case Grouping::kSingle: return 0;
    case Grouping::kIndividual: return s.student_id;
  }
  return 0;
}

std::vector<DataPoint> pack_epoch(const std::vector<TokenizedStudent>& students,
                                  const PipelineConfig& cfg, uint64_t epoch) {
  cfg.validate();
  std::map<int64_t, std::vector<const TokenizedStudent*>> groups;
  for (const TokenizedStudent& s : students) groups[group_key(s, cfg.grouping)].push_back(&s);

  std::vector<DataPoint> out;
  for (auto& [key, members] : groups) {
    const uint64_t seed =
        derive_seed(cfg.seed, kTagGroupShuffle, static_cast<uint64_t>(key), epoch);
    std::vector<DataPoint> dps = assemble_group(members, cfg, seed);
    for (auto& dp : dps) out.push_back(std::move(dp));
  }
  Rng rng(derive_seed(cfg.seed, kTagEpochOrder, epoch));
  rng.shuffle(out);
  return out;
}

void pad_datapoint(DataPoint& dp, int target_len) {
  while (dp.length() < target_len) {
    dp.tokens.push_back(kPadToken);
    dp.timestamps.push_back(0);
    dp.position_student.push_back(-1);
    dp.position_index.push_back(-1);
    dp.loss_mask.push_back(0);
  }
}

namespace {
constexpr const char* kPackMagic = "recpack 1";

template <typename T>
void put(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T take(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("datapoint cache: truncated");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}
}  // namespace

void save_datapoints(const std::string& path, const std::vector<DataPoint>& dps) {
  std::string out = std::string(kPackMagic) + "\n";
  put<uint64_t>(out, dps.size());
  for (const DataPoint& dp : dps) {
    put<uint32_t>(out, static_cast<uint32_t>(dp.length()));
    for (int t : dp.tokens) put<int32_t>(out, t);
    for (int64_t t : dp.timestamps) put<int64_t>(out, t);
    for (int64_t s : dp.position_student) put<int64_t>(out, s);
    for (int i : dp.position_index) put<int32_t>(out, i);
    for (uint8_t m : dp.loss_mask) out.push_back(static_cast<char>(m));
  }
  atomic_write_file(path, out);
}

std::vector<DataPoint> load_datapoints(const std::string& path) {
  const std::string in = read_file(path);
  const std::string magic = std::string(kPackMagic) + "\n";
  if (in.size() < magic.size() || in.compare(0, magic.size(), magic) != 0) {
    throw std::runtime_error("datapoint cache: unknown version in " + path);
  }
  size_t pos = magic.size();
  const uint64_t count = take<uint64_t>(in, pos);
  std::vector<DataPoint> out;
  out.reserve(count);
  for (uint64_t k = 0; k < count; ++k) {
    const uint32_t len = take<uint32_t>(in, pos);
    DataPoint dp;
    dp.tokens.resize(len);
    dp.timestamps.resize(len);
    dp.position_student.resize(len);
    dp.position_index.resize(len);
    dp.loss_mask.resize(len);
    for (auto& v : dp.tokens) v = take<int32_t>(in, pos);
    for (auto& v : dp.timestamps) v = take<int64_t>(in, pos);
    for (auto& v : dp.position_student) v = take<int64_t>(in, pos);
    for (auto& v : dp.position_index) v = take<int32_t>(in, pos);
    for (auto& v : dp.loss_mask) {
      if (pos >= in.size()) throw std::runtime_error("datapoint cache: truncated");
      v = static_cast<uint8_t>(in[pos++]);
    }
    out.push_back(std::move(dp));
  }
  return out;
}

}  // namespace rec
