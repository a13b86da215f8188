#include "rec/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "rec/common.hpp"

namespace fs = std::filesystem;

namespace rec {

namespace {

constexpr uint64_t kTagSplit = 0x5b117;
constexpr uint64_t kTagTaper = 0x7a9e4;
constexpr uint64_t kTagPack = 0x9ac8;
constexpr uint64_t kTagInitModel = 0x171d;
constexpr uint64_t kTagTrain = 0x7421;
constexpr uint64_t kTagEvalPack = 0xe7a1;
constexpr uint64_t kTagReport = 0x4e90;

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

uint64_t model_tag(const std::string& model) { return fnv1a64(model); }

void append_manifest(const ExperimentConfig& cfg, const std::string& stage,
                     const std::string& variant, const std::vector<std::string>& artifacts,
                     int64_t wall_ms) {
  std::ostringstream row;
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(cfg.config_hash()));
  for (const std::string& artifact : artifacts) {
    char sum_hex[32];
    std::snprintf(sum_hex, sizeof(sum_hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(artifact)));
    row << stage << '\t' << (variant.empty() ? "-" : variant) << '\t' << hash_hex << '\t'
        << fs::path(artifact).filename().string() << '\t' << sum_hex << '\t'
        << fs::file_size(artifact) << '\t' << wall_ms << '\t' << "1" << '\n';
  }
  const std::string path = cfg.stage_path("manifest.tsv");
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("manifest: cannot open " + path);
  out << row.str();
}

std::string marker_path(const ExperimentConfig& cfg, const std::string& key) {
  return cfg.stage_path(".done_" + key);
}

bool stage_complete(const ExperimentConfig& cfg, const std::string& key,
                    const std::vector<std::string>& artifacts) {
  const std::string path = marker_path(cfg, key);
  if (!fs::exists(path)) return false;
  std::ifstream in(path);
  std::string recorded;
  if (!std::getline(in, recorded)) return false;
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(cfg.config_hash()));
  if (recorded != hash_hex) return false;
  for (const std::string& artifact : artifacts) {
    if (!fs::exists(artifact)) return false;
  }
  return true;
}

void mark_stage(const ExperimentConfig& cfg, const std::string& key) {
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(cfg.config_hash()));
  atomic_write_file(marker_path(cfg, key), std::string(hash_hex) + "\n");
}

void require_artifact(const std::string& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw std::runtime_error(stage + ": missing upstream artifact " + path);
  }
}

void freeze_config(const ExperimentConfig& cfg) {
  const std::string path = cfg.stage_path("config.resolved");
  const std::string text = cfg.resolved_text();
  if (fs::exists(path) && read_file(path) == text) return;
  atomic_write_file(path, text);
}

struct TransformerSpec {
  MaskMode mask;
  Grouping grouping;
};

TransformerSpec transformer_spec(const ExperimentConfig& cfg, const std::string& model) {
  if (model == "study") return {cfg.decoder.mask_mode, cfg.pipeline.grouping};
  if (model == "individual") return {MaskMode::kPositionalCausal, Grouping::kIndividual};
  throw std::runtime_error("not a transformer model: " + model);
}

bool is_transformer(const std::string& model) { return model == "study" || model == "individual"; }

void check_model_name(const std::string& model) {
  if (model != "study" && model != "individual" && model != "knn" && model != "popularity") {
    throw std::runtime_error("unknown model '" + model +
                             "' (expected study|individual|knn|popularity)");
  }
}

DecoderConfig resolved_decoder(const ExperimentConfig& cfg, const TransformerSpec& spec,
                               int vocab_tokens) {
  DecoderConfig d = cfg.decoder;
  d.vocab_tokens = vocab_tokens;
  d.max_seq_len = cfg.pipeline.context;
  d.mask_mode = spec.mask;
  d.validate();
  return d;
}

std::string sidecar_text(const DecoderConfig& d) {
  std::ostringstream out;
  out << "[decoder]\n";
  out << "layers = " << d.num_layers << "\n";
  out << "heads = " << d.num_heads << "\n";
  out << "d_model = " << d.d_model << "\n";
  out << "d_ff = " << d.d_ff << "\n";
  out << "vocab_tokens = " << d.vocab_tokens << "\n";
  out << "max_seq_len = " << d.max_seq_len << "\n";
  out << "mask_mode = " << mask_mode_name(d.mask_mode) << "\n";
  out << "dropout = " << format_double(d.dropout) << "\n";
  out << "use_pos_embedding = " << (d.use_pos_embedding ? 1 : 0) << "\n";
  out << "mask_apply = "
      << (d.mask_apply == MaskApply::kAdditiveBeforeSoftmax ? "additive" : "post_multiply")
      << "\n";
  return out.str();
}

DecoderConfig sidecar_decoder(const std::string& path) {
  const KvConfig kv = KvConfig::parse_file(path);
  DecoderConfig d;
  d.num_layers = static_cast<int>(kv.get_long("decoder.layers", d.num_layers));
  d.num_heads = static_cast<int>(kv.get_long("decoder.heads", d.num_heads));
  d.d_model = static_cast<int>(kv.get_long("decoder.d_model", d.d_model));
  d.d_ff = static_cast<int>(kv.get_long("decoder.d_ff", d.d_ff));
  d.vocab_tokens = static_cast<int>(kv.get_long("decoder.vocab_tokens", 0));
  d.max_seq_len = static_cast<int>(kv.get_long("decoder.max_seq_len", d.max_seq_len));
  d.mask_mode = parse_mask_mode(kv.get("decoder.mask_mode", "temporal"));
  d.dropout = static_cast<float>(kv.get_double("decoder.dropout", d.dropout));
  d.use_pos_embedding = kv.get_long("decoder.use_pos_embedding", 1) != 0;
  d.mask_apply = kv.get("decoder.mask_apply", "additive") == "post_multiply"
                     ? MaskApply::kMultiplyAfterSoftmax
                     : MaskApply::kAdditiveBeforeSoftmax;
  d.validate();
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// KvConfig

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw std::runtime_error("config line " + std::to_string(line_no) + ": bad section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
    }
    out.values[section.empty() ? key : section + "." + key] = value;
  }
  return out;
}

KvConfig KvConfig::parse_file(const std::string& path) { return parse(read_file(path)); }

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}

long KvConfig::get_long(const std::string& key, long fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  return std::stol(it->second);
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  return std::stod(it->second);
}

std::vector<double> KvConfig::get_doubles(const std::string& key,
                                          std::vector<double> fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  std::vector<double> out;
  for (const std::string& part : split(it->second, ',')) out.push_back(std::stod(trim(part)));
  return out;
}

std::vector<int> KvConfig::get_ints(const std::string& key, std::vector<int> fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  std::vector<int> out;
  for (const std::string& part : split(it->second, ',')) out.push_back(std::stoi(trim(part)));
  return out;
}

std::string KvConfig::canonical_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : values) out << k << " = " << v << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
  ExperimentConfig cfg;
  cfg.stage_dir = kv.get("paths.stage_dir", cfg.stage_dir);
  cfg.data_dir = kv.get("paths.data_dir", "");
  cfg.seed = static_cast<uint64_t>(kv.get_long("seed.seed", 42));

  cfg.cohort.num_districts = static_cast<int>(kv.get_long("cohort.districts", 5));
  cfg.cohort.schools_per_district = static_cast<int>(kv.get_long("cohort.schools_per_district", 10));
  cfg.cohort.classrooms_per_school = static_cast<int>(kv.get_long("cohort.classrooms_per_school", 10));
  cfg.cohort.students_per_classroom = static_cast<int>(kv.get_long("cohort.students_per_classroom", 20));
  cfg.cohort.catalog_size = kv.get_long("cohort.catalog_size", 3000);
  cfg.cohort.zipf_exponent = kv.get_double("cohort.zipf_exponent", 1.1);
  cfg.cohort.num_topics = static_cast<int>(kv.get_long("cohort.topics", 8));
  cfg.cohort.classroom_concentration = kv.get_double("cohort.classroom_concentration", 0.2);
  cfg.cohort.homophily = kv.get_double("cohort.homophily", 0.5);
  cfg.cohort.repeat_probability = kv.get_double("cohort.repeat_probability", 0.5);
  cfg.cohort.global_taste_weight = kv.get_double("cohort.global_taste_weight", 0.5);
  cfg.cohort.global_zipf_exponent = kv.get_double("cohort.global_zipf_exponent", 1.0);
  cfg.cohort.engagement_log_mean = kv.get_double("cohort.engagement_log_mean", 2.302585092994046);
  cfg.cohort.engagement_log_sd = kv.get_double("cohort.engagement_log_sd", 1.58);
  cfg.cohort.engagement_max = static_cast<int>(kv.get_long("cohort.engagement_max", 300));
  cfg.cohort.metro_weights = kv.get_doubles("cohort.metro_weights", cfg.cohort.metro_weights);
  cfg.cohort.ses_weights = kv.get_doubles("cohort.ses_weights", cfg.cohort.ses_weights);
  cfg.cohort.reading_score_mean = kv.get_double("cohort.reading_score_mean", 0.5);
  cfg.cohort.reading_score_sd = kv.get_double("cohort.reading_score_sd", 0.15);
  cfg.cohort.seed = cfg.seed;

  cfg.vocab_size = static_cast<int>(kv.get_long("vocab.size", 2000));
  cfg.validation_fraction = kv.get_double("split.validation_fraction", 0.5);
  cfg.cache_packed = kv.get_long("pipeline.cache_packed", 1) != 0;

  cfg.pipeline.context = static_cast<int>(kv.get_long("pipeline.context", 65));
  cfg.pipeline.segment = static_cast<int>(kv.get_long("pipeline.segment", 65));
  cfg.pipeline.grouping = parse_grouping(kv.get("pipeline.grouping", "classroom"));
  cfg.pipeline.cold_start_anchor = kv.get_long("pipeline.cold_start_anchor", 1) != 0;

  cfg.decoder.num_layers = static_cast<int>(kv.get_long("decoder.layers", 2));
  cfg.decoder.num_heads = static_cast<int>(kv.get_long("decoder.heads", 4));
  cfg.decoder.d_model = static_cast<int>(kv.get_long("decoder.d_model", 128));
  cfg.decoder.d_ff = static_cast<int>(kv.get_long("decoder.d_ff", 512));
  cfg.decoder.dropout = static_cast<float>(kv.get_double("decoder.dropout", 0.1));
  cfg.decoder.mask_mode = parse_mask_mode(kv.get("decoder.mask_mode", "temporal"));
  cfg.decoder.mask_apply = kv.get("decoder.mask_apply", "additive") == "post_multiply"
                               ? MaskApply::kMultiplyAfterSoftmax
                               : MaskApply::kAdditiveBeforeSoftmax;

  cfg.schedule.peak_rate = kv.get_double("schedule.peak_rate", 0.003);
  cfg.schedule.warmup_steps = static_cast<int>(kv.get_long("schedule.warmup_steps", 1000));
  cfg.schedule.total_steps = static_cast<int>(kv.get_long("schedule.total_steps", 3500));
  cfg.train_steps = static_cast<int>(kv.get_long("train.steps", cfg.schedule.total_steps));
  cfg.batch_size = static_cast<int>(kv.get_long("train.batch", 64));
  cfg.train_fraction = kv.get_double("train.fraction", 1.0);

  cfg.knn.history = static_cast<int>(kv.get_long("knn.history", 65));
  cfg.knn.k = static_cast<int>(kv.get_long("knn.k", 2));

  cfg.eval_split = kv.get("eval.split", "test");
  cfg.eval_ns = kv.get_ints("eval.ns", cfg.eval_ns);
  cfg.bootstrap_resamples = static_cast<int>(kv.get_long("eval.bootstrap", 50));
  cfg.engagement_bins = kv.get_doubles("eval.engagement_bins", cfg.engagement_bins);
  cfg.reading_bins = kv.get_doubles("eval.reading_bins", cfg.reading_bins);
  cfg.validate();
  return cfg;
}

void ExperimentConfig::validate() const {
  cohort.validate();
  pipeline.validate();
  schedule.validate();
  knn.validate();
  if (vocab_size < 1) throw std::runtime_error("config: vocab.size must be positive");
  if (eval_split != "test" && eval_split != "validation") {
    throw std::runtime_error("config: eval.split must be test or validation");
  }
  if (train_fraction <= 0.0 || train_fraction > 1.0) {
    throw std::runtime_error("config: train.fraction out of (0,1]");
  }
  if (bootstrap_resamples < 1) throw std::runtime_error("config: eval.bootstrap must be positive");
}

std::string ExperimentConfig::resolved_text() const {
  std::ostringstream out;
  auto emit = [&out](const std::string& key, const std::string& value) {
    out << key << " = " << value << "\n";
  };
  auto emit_doubles = [&emit](const std::string& key, const std::vector<double>& vs) {
    std::string joined;
    for (size_t i = 0; i < vs.size(); ++i) {
      if (i) joined += ",";
      joined += format_double(vs[i]);
    }
    emit(key, joined);
  };
  emit("cohort.catalog_size", std::to_string(cohort.catalog_size));
  emit("cohort.classroom_concentration", format_double(cohort.classroom_concentration));
  emit("cohort.classrooms_per_school", std::to_string(cohort.classrooms_per_school));
  emit("cohort.districts", std::to_string(cohort.num_districts));
  emit("cohort.engagement_log_mean", format_double(cohort.engagement_log_mean));
  emit("cohort.engagement_log_sd", format_double(cohort.engagement_log_sd));
  emit("cohort.engagement_max", std::to_string(cohort.engagement_max));
  emit("cohort.global_taste_weight", format_double(cohort.global_taste_weight));
  emit("cohort.global_zipf_exponent", format_double(cohort.global_zipf_exponent));
  emit("cohort.homophily", format_double(cohort.homophily));
  emit_doubles("cohort.metro_weights", cohort.metro_weights);
  emit("cohort.reading_score_mean", format_double(cohort.reading_score_mean));
  emit("cohort.reading_score_sd", format_double(cohort.reading_score_sd));
  emit("cohort.repeat_probability", format_double(cohort.repeat_probability));
  emit("cohort.schools_per_district", std::to_string(cohort.schools_per_district));
  emit_doubles("cohort.ses_weights", cohort.ses_weights);
  emit("cohort.students_per_classroom", std::to_string(cohort.students_per_classroom));
  emit("cohort.topics", std::to_string(cohort.num_topics));
  emit("cohort.zipf_exponent", format_double(cohort.zipf_exponent));
  emit("decoder.d_ff", std::to_string(decoder.d_ff));
  emit("decoder.d_model", std::to_string(decoder.d_model));
  emit("decoder.dropout", format_double(decoder.dropout));
  emit("decoder.heads", std::to_string(decoder.num_heads));
  emit("decoder.layers", std::to_string(decoder.num_layers));
  emit("decoder.mask_apply",
       decoder.mask_apply == MaskApply::kAdditiveBeforeSoftmax ? "additive" : "post_multiply");
  emit("decoder.mask_mode", mask_mode_name(decoder.mask_mode));
  emit_doubles("eval.engagement_bins", engagement_bins);
  emit("eval.bootstrap", std::to_string(bootstrap_resamples));
  {
    std::string joined;
    for (size_t i = 0; i < eval_ns.size(); ++i) {
      if (i) joined += ",";
      joined += std::to_string(eval_ns[i]);
    }
    emit("eval.ns", joined);
  }
  emit_doubles("eval.reading_bins", reading_bins);
  emit("eval.split", eval_split);
  emit("knn.history", std::to_string(knn.history));
  emit("knn.k", std::to_string(knn.k));
  emit("pipeline.cache_packed", cache_packed ? "1" : "0");
  emit("pipeline.cold_start_anchor", pipeline.cold_start_anchor ? "1" : "0");
  emit("pipeline.context", std::to_string(pipeline.context));
  emit("pipeline.grouping", grouping_name(pipeline.grouping));
  emit("pipeline.segment", std::to_string(pipeline.segment));
  emit("schedule.peak_rate", format_double(schedule.peak_rate));
  emit("schedule.total_steps", std::to_string(schedule.total_steps));
  emit("schedule.warmup_steps", std::to_string(schedule.warmup_steps));
  emit("seed.seed", std::to_string(seed));
  emit("split.validation_fraction", format_double(validation_fraction));
  emit("train.batch", std::to_string(batch_size));
  emit("train.fraction", format_double(train_fraction));
  emit("train.steps", std::to_string(train_steps));
  emit("vocab.size", std::to_string(vocab_size));
  return out.str();
}

uint64_t ExperimentConfig::config_hash() const { return fnv1a64(resolved_text()); }

std::string ExperimentConfig::data_path(const std::string& name) const {
  const std::string base = data_dir.empty() ? stage_dir : data_dir;
  return (fs::path(base) / name).string();
}

std::string ExperimentConfig::stage_path(const std::string& name) const {
  return (fs::path(stage_dir) / name).string();
}

// ---------------------------------------------------------------------------
// Vocabulary artifact

std::string vocab_to_string(const Vocabulary& vocab) {
  std::ostringstream out;
  out << "# vocab v1\n";
  out << "size\t" << vocab.size << "\tshrunk\t" << (vocab.shrunk ? 1 : 0) << "\toov_count\t"
      << vocab.token_counts[kOovToken] << "\n";
  for (int i = 0; i < vocab.size; ++i) {
    const int token = kFirstItemToken + i;
    out << token << '\t' << vocab.token_to_item[static_cast<size_t>(i)] << '\t'
        << vocab.token_counts[static_cast<size_t>(token)] << '\n';
  }
  return out.str();
}

Vocabulary vocab_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# vocab v1") {
    throw std::runtime_error("vocab: unknown version header");
  }
  Vocabulary v;
  if (!std::getline(in, line)) throw std::runtime_error("vocab: missing size line");
  {
    const auto f = split(line, '\t');
    if (f.size() != 6 || f[0] != "size") throw std::runtime_error("vocab: bad size line");
    v.size = std::stoi(f[1]);
    v.shrunk = f[3] == "1";
    v.token_counts.assign(static_cast<size_t>(v.size) + kFirstItemToken, 0);
    v.token_counts[kOovToken] = std::stol(f[5]);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 3) throw std::runtime_error("vocab: bad row '" + line + "'");
    const int token = std::stoi(f[0]);
    const int64_t item = std::stoll(f[1]);
    v.item_to_token[item] = token;
    v.token_to_item.push_back(item);
    v.token_counts[static_cast<size_t>(token)] = std::stol(f[2]);
  }
  if (static_cast<int>(v.token_to_item.size()) != v.size) {
    throw std::runtime_error("vocab: row count disagrees with declared size");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Shared data loading

LoadedData load_data(const ExperimentConfig& cfg) {
  LoadedData data;
  data.full = load_bundle(cfg.data_path("dataset.tsv"));
  SplitSpec spec;
  spec.validation_fraction = cfg.validation_fraction;
  spec.seed = derive_seed(cfg.seed, kTagSplit);
  data.splits = split(data.full, spec);
  data.vocab = vocab_from_string(read_file(cfg.data_path("vocab.tsv")));
  return data;
}

std::vector<TokenizedStudent> eval_students(const ExperimentConfig& cfg, const LoadedData& data) {
  const Bundle& bundle = cfg.eval_split == "test" ? data.splits.test : data.splits.validation;
  return tokenize(bundle, data.vocab);
}

std::vector<TokenizedStudent> train_students(const ExperimentConfig& cfg, const LoadedData& data) {
  std::vector<TokenizedStudent> all = tokenize(data.splits.train, data.vocab);
  if (cfg.train_fraction >= 1.0) return all;
  std::vector<TokenizedStudent> kept;
  for (TokenizedStudent& s : all) {
    const double u =
        static_cast<double>(derive_seed(cfg.seed, kTagTaper, static_cast<uint64_t>(s.student_id)) >>
                            11) *
        0x1.0p-53;
    if (u < cfg.train_fraction) kept.push_back(std::move(s));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Stages

StageOutcome run_generate(const ExperimentConfig& cfg) {
  cfg.validate();
  freeze_config(cfg);
  const std::string dataset = cfg.data_path("dataset.tsv");
  if (stage_complete(cfg, "generate", {dataset})) return {true, {dataset}};
  const int64_t t0 = now_ms();
  CohortConfig cohort = cfg.cohort;
  cohort.seed = cfg.seed;
  const Bundle bundle = generate(cohort);
  fs::create_directories(fs::path(dataset).parent_path());
  save_bundle(dataset, bundle);
  append_manifest(cfg, "generate", "", {dataset}, now_ms() - t0);
  mark_stage(cfg, "generate");
  return {false, {dataset}};
}

StageOutcome run_preprocess(const ExperimentConfig& cfg) {
  cfg.validate();
  freeze_config(cfg);
  require_artifact(cfg.data_path("dataset.tsv"), "preprocess");
  const std::string vocab_path = cfg.data_path("vocab.tsv");
  const std::string splits_path = cfg.data_path("splits.tsv");
  std::vector<std::string> artifacts = {vocab_path, splits_path};
  const std::string cache_path = cfg.data_path("packed_train_epoch0.bin");
  if (cfg.cache_packed) artifacts.push_back(cache_path);
  if (stage_complete(cfg, "preprocess", artifacts)) return {true, artifacts};

  const int64_t t0 = now_ms();
  const Bundle full = load_bundle(cfg.data_path("dataset.tsv"));
  SplitSpec spec;
  spec.validation_fraction = cfg.validation_fraction;
  spec.seed = derive_seed(cfg.seed, kTagSplit);
  const SplitResult splits = split(full, spec);

  std::vector<Interaction> train_interactions;
  for (const StudentRecord& s : splits.train.students) {
    train_interactions.insert(train_interactions.end(), s.interactions.begin(),
                              s.interactions.end());
  }
  const Vocabulary vocab = build_vocab(train_interactions, cfg.vocab_size);
  atomic_write_file(vocab_path, vocab_to_string(vocab));

  std::ostringstream sp;
  sp << "# splits v1\n";
  for (const StudentRecord& s : splits.validation.students) {
    sp << s.student_id << "\tvalidation\n";
  }
  for (const StudentRecord& s : splits.test.students) sp << s.student_id << "\ttest\n";
  atomic_write_file(splits_path, sp.str());

  if (cfg.cache_packed) {
    PipelineConfig pipeline = cfg.pipeline;
    pipeline.seed = derive_seed(cfg.seed, kTagPack, model_tag("study"));
    const std::vector<DataPoint> dps = pack_epoch(tokenize(splits.train, vocab), pipeline, 0);
    save_datapoints(cache_path, dps);
  }
  append_manifest(cfg, "preprocess", "", artifacts, now_ms() - t0);
  mark_stage(cfg, "preprocess");
  return {false, artifacts};
}

StageOutcome run_train(const ExperimentConfig& cfg, const std::string& model) {
  cfg.validate();
  check_model_name(model);
  freeze_config(cfg);
  require_artifact(cfg.data_path("dataset.tsv"), "train");
  require_artifact(cfg.data_path("vocab.tsv"), "train");

  std::vector<std::string> artifacts;
  if (is_transformer(model)) {
    artifacts = {cfg.stage_path("ckpt_" + model + ".bin"), cfg.stage_path("ckpt_" + model + ".cfg"),
                 cfg.stage_path("trace_" + model + ".csv")};
  } else if (model == "knn") {
    artifacts = {cfg.stage_path("knn_index.bin")};
  } else {
    artifacts = {cfg.stage_path("popularity.csv")};
  }
  const std::string stage_key = "train_" + model;
  if (stage_complete(cfg, stage_key, artifacts)) return {true, artifacts};

  const int64_t t0 = now_ms();
  const LoadedData data = load_data(cfg);
  const std::vector<TokenizedStudent> students = train_students(cfg, data);

  if (is_transformer(model)) {
    const TransformerSpec spec = transformer_spec(cfg, model);
    const DecoderConfig dec = resolved_decoder(cfg, spec, data.vocab.total_tokens());
    DecoderParams params =
        DecoderParams::init(dec, derive_seed(cfg.seed, kTagInitModel, model_tag(model)));
    PipelineConfig pipeline = cfg.pipeline;
    pipeline.grouping = spec.grouping;
    pipeline.seed = derive_seed(cfg.seed, kTagPack, model_tag(model));
    TrainConfig tc;
    tc.steps = cfg.train_steps;
    tc.batch_size = cfg.batch_size;
    tc.schedule = cfg.schedule;
    tc.seed = derive_seed(cfg.seed, kTagTrain, model_tag(model));
    const TrainResult result = train(params, students, pipeline, tc);
    atomic_write_file(artifacts[2], loss_trace_csv(result));
    if (result.diverged) {
      throw std::runtime_error("train: loss diverged at step " +
                               std::to_string(result.divergence_step) + "; trace written to " +
                               artifacts[2]);
    }
    params.save(artifacts[0]);
    atomic_write_file(artifacts[1], sidecar_text(dec));
  } else if (model == "knn") {
    const InvertedIndex index = InvertedIndex::build(students, data.vocab, cfg.knn);
    index.save(artifacts[0]);
  } else {
    const PopularityRecommender pop(data.vocab);
    std::ostringstream out;
    out << "token,item_id,count\n";
    for (int token : pop.order()) {
      const int64_t item = token == kOovToken
                               ? -1
                               : data.vocab.token_to_item[static_cast<size_t>(token - kFirstItemToken)];
      out << token << "," << item << "," << data.vocab.token_counts[static_cast<size_t>(token)]
          << "\n";
    }
    atomic_write_file(artifacts[0], out.str());
  }
  append_manifest(cfg, "train", model, artifacts, now_ms() - t0);
  mark_stage(cfg, stage_key);
  return {false, artifacts};
}

namespace {

std::unique_ptr<Recommender> make_recommender(const ExperimentConfig& cfg, const LoadedData& data,
                                              const std::string& model,
                                              std::unique_ptr<DecoderParams>& params_holder,
                                              std::unique_ptr<InvertedIndex>& index_holder) {
  if (is_transformer(model)) {
    const std::string ckpt = cfg.stage_path("ckpt_" + model + ".bin");
    require_artifact(ckpt, "eval");
    const DecoderConfig dec = sidecar_decoder(cfg.stage_path("ckpt_" + model + ".cfg"));
    params_holder = std::make_unique<DecoderParams>(DecoderParams::load(ckpt, dec));
    const TransformerSpec spec = transformer_spec(cfg, model);
    PipelineConfig pipeline = cfg.pipeline;
    pipeline.grouping = spec.grouping;
    pipeline.seed = derive_seed(cfg.seed, kTagEvalPack, model_tag(model));
    return std::make_unique<TransformerRecommender>(model, *params_holder, pipeline, data.vocab);
  }
  if (model == "knn") {
    const std::string path = cfg.stage_path("knn_index.bin");
    require_artifact(path, "eval");
    index_holder = std::make_unique<InvertedIndex>(InvertedIndex::load(path));
    return std::make_unique<KnnRecommender>(*index_holder);
  }
  return std::make_unique<PopularityRecommender>(data.vocab);
}

ScoredEvents score_model(const ExperimentConfig& cfg, const LoadedData& data,
                         const std::string& model) {
  std::unique_ptr<DecoderParams> params_holder;
  std::unique_ptr<InvertedIndex> index_holder;
  const auto rec = make_recommender(cfg, data, model, params_holder, index_holder);
  const std::vector<TokenizedStudent> students = eval_students(cfg, data);
  std::map<int64_t, std::vector<int>> prior;
  for (const TokenizedStudent& s : tokenize(data.splits.train, data.vocab)) {
    prior[s.student_id] = s.tokens;
  }
  const std::vector<EvalEvent> events = build_events(students, &prior);
  return collect_events(events, *rec, students);
}

}  // namespace

StageOutcome run_eval(const ExperimentConfig& cfg, const std::string& model) {
  cfg.validate();
  check_model_name(model);
  freeze_config(cfg);
  require_artifact(cfg.data_path("dataset.tsv"), "eval");
  require_artifact(cfg.data_path("vocab.tsv"), "eval");

  std::vector<std::string> artifacts = {cfg.stage_path("reports/report_" + model + ".csv")};
  for (const char* var : {"engagement", "metro", "ses", "reading_score"}) {
    artifacts.push_back(cfg.stage_path("reports/slice_" + model + "_" + var + ".csv"));
  }
  const std::string stage_key = "eval_" + model + "_" + cfg.eval_split;
  if (stage_complete(cfg, stage_key, artifacts)) return {true, artifacts};

  const int64_t t0 = now_ms();
  const LoadedData data = load_data(cfg);
  const ScoredEvents scored = score_model(cfg, data, model);
  const MetricReport report = compute_report(model, scored, cfg.eval_ns, cfg.bootstrap_resamples,
                                             derive_seed(cfg.seed, kTagReport, model_tag(model)));
  std::string report_text = report_csv(report);
  if (is_transformer(model)) {
    report_text += "# note: trained at desk scale, batch " + std::to_string(cfg.batch_size) +
                   " datapoints x " + std::to_string(cfg.train_steps) +
                   " steps (publication-scale batch sizes are out of scope)\n";
  }
  atomic_write_file(artifacts[0], report_text);

  const auto attrs = student_attrs(data.full);
  const SliceSpec specs[] = {
      {SliceVar::kEngagement, cfg.engagement_bins},
      {SliceVar::kMetro, {}},
      {SliceVar::kSes, {}},
      {SliceVar::kReading, cfg.reading_bins},
  };
  for (size_t i = 0; i < 4; ++i) {
    const auto bins = slice(scored, attrs, specs[i], cfg.eval_ns, cfg.bootstrap_resamples,
                            derive_seed(cfg.seed, kTagReport, model_tag(model), i + 1));
    atomic_write_file(artifacts[i + 1], slice_csv(model, specs[i], bins));
  }
  append_manifest(cfg, "eval", model, artifacts, now_ms() - t0);
  mark_stage(cfg, stage_key);
  return {false, artifacts};
}

// ---------------------------------------------------------------------------
// Ablations

namespace {

struct AblationVariant {
  std::string name;
  std::string model;  // study | individual
  ExperimentConfig cfg;
};

std::string ablation_csv(const ExperimentConfig& root, const std::vector<AblationVariant>& variants,
                         bool engagement_slices) {
  std::ostringstream out;
  out << "variant,bin,subset,n,mean,ci_low,ci_high,students,events\n";
  char buf[256];
  for (const AblationVariant& v : variants) {
    const LoadedData data = load_data(v.cfg);
    const ScoredEvents scored = score_model(v.cfg, data, v.model);
    auto emit_cells = [&](const std::string& bin_label, const std::vector<MetricCell>& cells,
                          long bin_students) {
      (void)bin_students;
      for (const MetricCell& c : cells) {
        if (c.empty) {
          std::snprintf(buf, sizeof(buf), "%s,%s,%s,%d,NA,NA,NA,%ld,%ld\n", v.name.c_str(),
                        bin_label.c_str(), subset_name(c.subset), c.n, c.students, c.events);
        } else {
          std::snprintf(buf, sizeof(buf), "%s,%s,%s,%d,%.4f,%.4f,%.4f,%ld,%ld\n", v.name.c_str(),
                        bin_label.c_str(), subset_name(c.subset), c.n, c.mean, c.ci_low, c.ci_high,
                        c.students, c.events);
        }
        out << buf;
      }
    };
    const MetricReport report =
        compute_report(v.name, scored, root.eval_ns, root.bootstrap_resamples,
                       derive_seed(root.seed, kTagReport, fnv1a64(v.name)));
    emit_cells("overall", report.cells, 0);
    if (engagement_slices) {
      const auto attrs = student_attrs(data.full);
      const SliceSpec spec{SliceVar::kEngagement, root.engagement_bins};
      const auto bins = slice(scored, attrs, spec, root.eval_ns, root.bootstrap_resamples,
                              derive_seed(root.seed, kTagReport, fnv1a64(v.name), 99));
      for (const SliceBin& bin : bins) emit_cells(bin.label, bin.cells, bin.students);
    }
  }
  return out.str();
}

ExperimentConfig sub_config(const ExperimentConfig& root, const std::string& kind,
                            const std::string& name) {
  ExperimentConfig sub = root;
  sub.data_dir = root.data_dir.empty() ? root.stage_dir : root.data_dir;
  sub.stage_dir = root.stage_path("ablations/" + kind + "/" + name);
  return sub;
}

}  // namespace

StageOutcome run_ablation(const ExperimentConfig& cfg, const std::string& kind) {
  cfg.validate();
  freeze_config(cfg);
  require_artifact(cfg.data_path("dataset.tsv"), "ablate");
  require_artifact(cfg.data_path("vocab.tsv"), "ablate");

  std::vector<AblationVariant> variants;
  bool engagement_slices = false;
  if (kind == "force-mix") {
    engagement_slices = true;
    {
      AblationVariant v{"study_s" + std::to_string(cfg.pipeline.segment), "study",
                        sub_config(cfg, kind, "study_base")};
      variants.push_back(std::move(v));
    }
    {
      AblationVariant v{"study_s20", "study", sub_config(cfg, kind, "study_s20")};
      v.cfg.pipeline.segment = 20;
      variants.push_back(std::move(v));
    }
    variants.push_back({"individual", "individual", sub_config(cfg, kind, "individual")});
  } else if (kind == "grouping") {
    for (Grouping grouping :
         {Grouping::kClassroom, Grouping::kDistrictYear, Grouping::kSingle}) {
      AblationVariant v{std::string("study_") + grouping_name(grouping), "study",
                        sub_config(cfg, kind, std::string("study_") + grouping_name(grouping))};
      v.cfg.pipeline.grouping = grouping;
      variants.push_back(std::move(v));
    }
    variants.push_back({"individual", "individual", sub_config(cfg, kind, "individual")});
  } else if (kind == "tapering") {
    for (double fraction : {0.25, 0.5, 0.75, 1.0}) {
      const std::string tag = std::to_string(static_cast<int>(fraction * 100));
      for (const std::string model : {std::string("study"), std::string("individual")}) {
        AblationVariant v{model + "_" + tag, model, sub_config(cfg, kind, model + "_" + tag)};
        v.cfg.train_fraction = fraction;
        variants.push_back(std::move(v));
      }
    }
  } else {
    throw std::runtime_error("ablate: unknown kind '" + kind +
                             "' (expected force-mix|grouping|tapering)");
  }

  const std::string csv_path = cfg.stage_path("reports/ablation_" + kind + ".csv");
  if (stage_complete(cfg, "ablate_" + kind, {csv_path})) return {true, {csv_path}};

  const int64_t t0 = now_ms();
  for (const AblationVariant& v : variants) run_train(v.cfg, v.model);
  atomic_write_file(csv_path, ablation_csv(cfg, variants, engagement_slices));
  append_manifest(cfg, "ablate", kind, {csv_path}, now_ms() - t0);
  mark_stage(cfg, "ablate_" + kind);
  return {false, {csv_path}};
}

// ---------------------------------------------------------------------------
// Report rendering

namespace {
MetricReport parse_report_csv(const std::string& text) {
  MetricReport report;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw std::runtime_error("report csv: bad row '" + line + "'");
    report.model = f[0];
    MetricCell c;
    for (Subset s : {Subset::kAll, Subset::kNonContinuation, Subset::kNovel}) {
      if (f[1] == subset_name(s)) c.subset = s;
    }
    c.n = std::stoi(f[2]);
    if (f[3] != "NA") {
      c.empty = false;
      c.mean = std::stod(f[3]);
      c.ci_low = std::stod(f[4]);
      c.ci_high = std::stod(f[5]);
    }
    c.students = std::stol(f[6]);
    c.events = std::stol(f[7]);
    report.cells.push_back(c);
  }
  return report;
}
}  // namespace

StageOutcome run_report(const ExperimentConfig& cfg) {
  const std::string dir = cfg.stage_path("reports");
  std::vector<MetricReport> reports;
  if (fs::exists(dir)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("report_", 0) == 0 && name.ends_with(".csv")) {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    for (const std::string& f : files) reports.push_back(parse_report_csv(read_file(f)));
  }
  if (reports.empty()) throw std::runtime_error("report: no report CSVs under " + dir);
  const std::string table_path = cfg.stage_path("reports/table.txt");
  atomic_write_file(table_path, render_table(reports));
  append_manifest(cfg, "report", "", {table_path}, 0);
  return {false, {table_path}};
}

}  // namespace rec
