#include "rec/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rec/checkpoint.hpp"
#include "rec/common.hpp"
#include "rec/corpus.hpp"

namespace rec {

namespace {
constexpr uint64_t kTagInit = 0x1417;
constexpr uint64_t kTagDropout = 0xd409;
}  // namespace

const char* mask_mode_name(MaskMode m) {
  return m == MaskMode::kPositionalCausal ? "positional" : "temporal";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "positional") return MaskMode::kPositionalCausal;
  if (s == "temporal") return MaskMode::kTemporalCausal;
  throw std::runtime_error("unknown mask mode '" + s + "'");
}

void DecoderConfig::validate() const {
  if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_ff < 1) {
    throw std::runtime_error("decoder: layer/head/width counts must be positive");
  }
  if (d_model % num_heads != 0) {
    throw std::runtime_error("decoder: d_model must be divisible by num_heads");
  }
  if (vocab_tokens <= kFirstItemToken) {
    throw std::runtime_error("decoder: vocab_tokens must exceed the reserved ids");
  }
  if (max_seq_len < 1) throw std::runtime_error("decoder: max_seq_len must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) throw std::runtime_error("decoder: dropout out of [0,1)");
}

namespace {
DecoderParams layout(const DecoderConfig& cfg) {
  cfg.validate();
  DecoderParams p;
  p.config = cfg;
  auto push = [&p](const std::string& name, std::vector<int> shape) {
    p.names.push_back(name);
    p.tensors.push_back(Tensor::zeros(std::move(shape)));
    return static_cast<int>(p.tensors.size()) - 1;
  };
  p.tok_embedding = push("tok_embedding", {cfg.vocab_tokens, cfg.d_model});
  p.pos_embedding = push("pos_embedding", {cfg.max_seq_len, cfg.d_model});
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    DecoderParams::LayerIndex li;
    li.ln1_gain = push(base + "ln1_gain", {cfg.d_model});
    li.ln1_bias = push(base + "ln1_bias", {cfg.d_model});
    li.wq = push(base + "wq", {cfg.d_model, cfg.d_model});
    li.wk = push(base + "wk", {cfg.d_model, cfg.d_model});
    li.wv = push(base + "wv", {cfg.d_model, cfg.d_model});
    li.wo = push(base + "wo", {cfg.d_model, cfg.d_model});
    li.ln2_gain = push(base + "ln2_gain", {cfg.d_model});
    li.ln2_bias = push(base + "ln2_bias", {cfg.d_model});
    li.ff1 = push(base + "ff1", {cfg.d_model, cfg.d_ff});
    li.ff1_bias = push(base + "ff1_bias", {cfg.d_ff});
    li.ff2 = push(base + "ff2", {cfg.d_ff, cfg.d_model});
    li.ff2_bias = push(base + "ff2_bias", {cfg.d_model});
    p.layers.push_back(li);
  }
  p.final_gain = push("final_gain", {cfg.d_model});
  p.final_bias = push("final_bias", {cfg.d_model});
  return p;
}
}  // namespace

DecoderParams DecoderParams::zeros(const DecoderConfig& cfg) { return layout(cfg); }

DecoderParams DecoderParams::init(const DecoderConfig& cfg, uint64_t seed, float init_std) {
  DecoderParams p = layout(cfg);
  Rng rng(derive_seed(seed, kTagInit));
  for (size_t t = 0; t < p.tensors.size(); ++t) {
    const std::string& name = p.names[t];
    const bool is_gain = name.ends_with("gain");
    const bool is_bias = name.ends_with("bias");
    if (is_gain) {
      p.tensors[t].fill(1.0f);
    } else if (is_bias) {
      // stays zero
    } else {
      for (float& v : p.tensors[t].data) {
        v = static_cast<float>(rng.normal(0.0, init_std));
      }
    }
  }
  return p;
}

size_t DecoderParams::parameter_count() const {
  size_t n = 0;
  for (const Tensor& t : tensors) n += t.numel();
  return n;
}

void DecoderParams::save(const std::string& path) const {
  std::vector<std::pair<std::string, const Tensor*>> list;
  list.reserve(tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) list.emplace_back(names[i], &tensors[i]);
  save_tensors(path, list);
}

DecoderParams DecoderParams::load(const std::string& path, const DecoderConfig& cfg) {
  DecoderParams p = layout(cfg);
  auto loaded = load_tensors(path);
  if (loaded.size() != p.tensors.size()) {
    throw std::runtime_error("decoder load: tensor count mismatch in " + path);
  }
  for (size_t i = 0; i < loaded.size(); ++i) {
    if (loaded[i].first != p.names[i]) {
      throw std::runtime_error("decoder load: unexpected tensor '" + loaded[i].first + "'");
    }
    if (loaded[i].second.shape != p.tensors[i].shape) {
      throw std::runtime_error("decoder load: shape mismatch for '" + loaded[i].first + "'");
    }
    p.tensors[i] = std::move(loaded[i].second);
  }
  return p;
}

MaskMatrix temporal_mask(const std::vector<int64_t>& timestamps,
                         const std::vector<int64_t>& position_student) {
  if (timestamps.size() != position_student.size()) {
    throw std::runtime_error("temporal_mask: timestamps and student map differ in length");
  }
  const int n = static_cast<int>(timestamps.size());
  // Within-student times must be non-decreasing along positions: the
  // no-leakage guarantee relies on the permission relation being transitive,
  // which breaks if a student's positional order disagrees with time order.
  {
    std::map<int64_t, int64_t> last_seen;
    for (int i = 0; i < n; ++i) {
      const int64_t s = position_student[static_cast<size_t>(i)];
      if (s < 0) continue;
      auto it = last_seen.find(s);
      if (it != last_seen.end() && timestamps[static_cast<size_t>(i)] < it->second) {
        throw std::runtime_error("temporal_mask: timestamps decrease within a student");
      }
      last_seen[s] = timestamps[static_cast<size_t>(i)];
    }
  }
  MaskMatrix mask(n);
  for (int i = 0; i < n; ++i) {
    const int64_t si = position_student[static_cast<size_t>(i)];
    if (si < 0) {  // PAD sees only itself
      mask.set(i, i, true);
      continue;
    }
    for (int j = 0; j < n; ++j) {
      const int64_t sj = position_student[static_cast<size_t>(j)];
      if (sj < 0) continue;
      if (si == sj) {
        if (j <= i) mask.set(i, j, true);
      } else if (timestamps[static_cast<size_t>(j)] < timestamps[static_cast<size_t>(i)]) {
        mask.set(i, j, true);
      }
    }
  }
  return mask;
}

MaskMatrix positional_mask(const std::vector<int64_t>& position_student) {
  const int n = static_cast<int>(position_student.size());
  MaskMatrix mask(n);
  for (int i = 0; i < n; ++i) {
    if (position_student[static_cast<size_t>(i)] < 0) {
      mask.set(i, i, true);
      continue;
    }
    for (int j = 0; j <= i; ++j) {
      if (position_student[static_cast<size_t>(j)] < 0) continue;
      mask.set(i, j, true);
    }
  }
  return mask;
}

MaskMatrix build_mask(const DataPoint& dp, MaskMode mode) {
  return mode == MaskMode::kTemporalCausal ? temporal_mask(dp.timestamps, dp.position_student)
                                           : positional_mask(dp.position_student);
}

BoundParams bind_params(Graph& g, const DecoderParams& params, std::vector<Tensor>* grad_sinks) {
  if (grad_sinks && grad_sinks->size() != params.tensors.size()) {
    throw std::runtime_error("bind_params: gradient sink count mismatch");
  }
  BoundParams bound;
  bound.ids.reserve(params.tensors.size());
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    if (grad_sinks) {
      bound.ids.push_back(g.param(&params.tensors[i], &(*grad_sinks)[i]));
    } else {
      bound.ids.push_back(g.constant(params.tensors[i]));
    }
  }
  return bound;
}

ForwardResult decoder_forward(Graph& g, const DecoderParams& params, const BoundParams& bound,
                              const DataPoint& dp, const MaskMatrix& mask, bool training,
                              Rng* dropout_rng) {
  const DecoderConfig& cfg = params.config;
  const int len = dp.length();
  if (len < 1) throw std::runtime_error("decoder_forward: empty datapoint");
  if (len > cfg.max_seq_len) throw std::runtime_error("decoder_forward: datapoint exceeds max length");
  if (mask.n != len) throw std::runtime_error("decoder_forward: mask size mismatch");
  for (int t : dp.tokens) {
    if (t < 0 || t >= cfg.vocab_tokens) {
      throw std::runtime_error("decoder_forward: token id out of range");
    }
  }
  const bool drop = training && cfg.dropout > 0.0f;
  if (drop && dropout_rng == nullptr) {
    throw std::runtime_error("decoder_forward: dropout requires an rng");
  }

  NodeId x = gather_rows(g, bound.ids[static_cast<size_t>(params.tok_embedding)], dp.tokens);
  const NodeId embedded = x;
  if (cfg.use_pos_embedding) {
    std::vector<int> positions(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<size_t>(i)] = i;
    NodeId pos = gather_rows(g, bound.ids[static_cast<size_t>(params.pos_embedding)], positions);
    x = add(g, x, pos);
  }
  if (drop) x = dropout(g, x, cfg.dropout, *dropout_rng);

  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(cfg.d_k()));
  for (const auto& li : params.layers) {
    NodeId normed = layer_norm(g, x, bound.ids[static_cast<size_t>(li.ln1_gain)],
                               bound.ids[static_cast<size_t>(li.ln1_bias)], cfg.layer_norm_eps);
    NodeId q = matmul(g, normed, bound.ids[static_cast<size_t>(li.wq)]);
    NodeId k = matmul(g, normed, bound.ids[static_cast<size_t>(li.wk)]);
    NodeId v = matmul(g, normed, bound.ids[static_cast<size_t>(li.wv)]);

    std::vector<NodeId> head_outputs;
    head_outputs.reserve(static_cast<size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      const int off = h * cfg.d_k();
      NodeId qh = slice_cols(g, q, off, cfg.d_k());
      NodeId kh = slice_cols(g, k, off, cfg.d_k());
      NodeId vh = slice_cols(g, v, off, cfg.d_k());
      NodeId scores = scale(g, matmul(g, qh, transpose(g, kh)), scale_factor);
      NodeId weights = masked_softmax(g, scores, mask, cfg.mask_apply);
      head_outputs.push_back(matmul(g, weights, vh));
    }
    NodeId attn = matmul(g, concat_cols(g, head_outputs), bound.ids[static_cast<size_t>(li.wo)]);
    if (drop) attn = dropout(g, attn, cfg.dropout, *dropout_rng);
    x = add(g, x, attn);

    NodeId normed2 = layer_norm(g, x, bound.ids[static_cast<size_t>(li.ln2_gain)],
                                bound.ids[static_cast<size_t>(li.ln2_bias)], cfg.layer_norm_eps);
    NodeId ff = relu(g, add_row_bias(g, matmul(g, normed2, bound.ids[static_cast<size_t>(li.ff1)]),
                                     bound.ids[static_cast<size_t>(li.ff1_bias)]));
    ff = add_row_bias(g, matmul(g, ff, bound.ids[static_cast<size_t>(li.ff2)]),
                      bound.ids[static_cast<size_t>(li.ff2_bias)]);
    if (drop) ff = dropout(g, ff, cfg.dropout, *dropout_rng);
    x = add(g, x, ff);
  }

  NodeId final_norm = layer_norm(g, x, bound.ids[static_cast<size_t>(params.final_gain)],
                                 bound.ids[static_cast<size_t>(params.final_bias)],
                                 cfg.layer_norm_eps);
  NodeId logits =
      matmul(g, final_norm, transpose(g, bound.ids[static_cast<size_t>(params.tok_embedding)]));
  return ForwardResult{logits, embedded};
}

TrainResult train(DecoderParams& params, const std::vector<TokenizedStudent>& students,
                  const PipelineConfig& pipeline_cfg, const TrainConfig& train_cfg) {
  pipeline_cfg.validate();
  train_cfg.schedule.validate();
  if (train_cfg.steps < 0) throw std::runtime_error("train: steps must be non-negative");
  if (train_cfg.batch_size < 1) throw std::runtime_error("train: batch_size must be positive");

  TrainResult result;
  if (train_cfg.steps == 0) return result;

  std::vector<Tensor> grads;
  grads.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) grads.push_back(Tensor::zeros(t.shape));
  AdamState adam = AdamState::init(params.tensors);
  adam.beta1 = train_cfg.beta1;
  adam.beta2 = train_cfg.beta2;
  adam.eps = train_cfg.adam_eps;

  uint64_t epoch = 0;
  std::vector<DataPoint> pool = pack_epoch(students, pipeline_cfg, epoch);
  if (pool.empty()) throw std::runtime_error("train: no datapoints to train on");
  size_t cursor = 0;

  for (int step = 1; step <= train_cfg.steps; ++step) {
    std::vector<DataPoint> batch;
    batch.reserve(static_cast<size_t>(train_cfg.batch_size));
    long batch_positions = 0;
    while (static_cast<int>(batch.size()) < train_cfg.batch_size) {
      if (cursor >= pool.size()) {
        epoch += 1;
        pool = pack_epoch(students, pipeline_cfg, epoch);
        cursor = 0;
      }
      DataPoint& dp = pool[cursor++];
      long scored = 0;
      for (uint8_t m : dp.loss_mask) scored += m != 0;
      if (scored == 0) continue;
      batch_positions += scored;
      batch.push_back(dp);
    }

    for (Tensor& gt : grads) gt.fill(0.0f);
    // Batch loss is the mean over scored positions, so short datapoints do
    // not dominate the gradient of a batch that also holds packed ones.
    double step_loss = 0.0;

    for (size_t b = 0; b < batch.size(); ++b) {
      const DataPoint& dp = batch[b];
      Graph g;
      BoundParams bound = bind_params(g, params, &grads);
      const MaskMatrix mask = build_mask(dp, params.config.mask_mode);
      Rng drop_rng(derive_seed(train_cfg.seed, kTagDropout, static_cast<uint64_t>(step),
                               static_cast<uint64_t>(b)));
      ForwardResult fwd =
          decoder_forward(g, params, bound, dp, mask, /*training=*/true, &drop_rng);

      std::vector<int> targets(dp.tokens.size(), 0);
      for (size_t i = 0; i + 1 < dp.tokens.size(); ++i) targets[i] = dp.tokens[i + 1];
      long scored = 0;
      for (uint8_t m : dp.loss_mask) scored += m != 0;
      const float weight = static_cast<float>(scored) / static_cast<float>(batch_positions);
      NodeId loss = cross_entropy_masked(g, fwd.logits, targets, dp.loss_mask);
      step_loss += static_cast<double>(g.value(loss).data[0]) * weight;
      g.backward(loss, weight);
    }

    const double lr = lr_schedule(std::min(step, train_cfg.schedule.total_steps), train_cfg.schedule);
    if (!std::isfinite(step_loss)) {
      result.diverged = true;
      result.divergence_step = step;
      result.trace.push_back(TraceRow{step, lr, step_loss});
      return result;
    }
    adam_step(params.tensors, grads, adam, static_cast<float>(lr));
    result.trace.push_back(TraceRow{step, lr, step_loss});
  }
  return result;
}

int rank_of_target(const float* logits_row, int vocab_tokens, int target) {
  if (target < kOovToken || target >= vocab_tokens || target == kSepToken) {
    throw std::runtime_error("rank_of_target: target is not a rankable token");
  }
  const float lt = logits_row[target];
  int better = 0;
  for (int t = kOovToken; t < vocab_tokens; ++t) {
    if (t == target) continue;
    const float l = logits_row[t];
    if (l > lt || (l == lt && t < target)) ++better;
  }
  return better + 1;
}

std::vector<int> predict_topn(const DecoderParams& params, const std::vector<int>& tokens,
                              const std::vector<int64_t>& timestamps, int n,
                              const std::vector<int>& popularity_order) {
  const DecoderConfig& cfg = params.config;
  const int rankable = cfg.vocab_tokens - kFirstItemToken + 1;  // items + OOV
  if (n < 1 || n > rankable) throw std::runtime_error("predict_topn: n out of range");
  if (tokens.empty()) {
    if (static_cast<int>(popularity_order.size()) < n) {
      throw std::runtime_error("predict_topn: popularity order too short for cold start");
    }
    return std::vector<int>(popularity_order.begin(), popularity_order.begin() + n);
  }
  const int keep = std::min<int>(static_cast<int>(tokens.size()), cfg.max_seq_len);
  DataPoint dp;
  dp.tokens.assign(tokens.end() - keep, tokens.end());
  dp.timestamps.assign(timestamps.end() - keep, timestamps.end());
  dp.position_student.assign(static_cast<size_t>(keep), 1);
  dp.position_index.assign(static_cast<size_t>(keep), 0);
  dp.loss_mask.assign(static_cast<size_t>(keep), 0);

  Graph g;
  BoundParams bound = bind_params(g, params, nullptr);
  const MaskMatrix mask = build_mask(dp, cfg.mask_mode);
  ForwardResult fwd = decoder_forward(g, params, bound, dp, mask, /*training=*/false, nullptr);
  const Tensor& logits = g.value(fwd.logits);
  const float* row = logits.row(keep - 1);

  std::vector<int> order;
  order.reserve(static_cast<size_t>(rankable));
  order.push_back(kOovToken);
  for (int t = kFirstItemToken; t < cfg.vocab_tokens; ++t) order.push_back(t);
  std::sort(order.begin(), order.end(), [row](int a, int b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(n));
  return order;
}

std::string loss_trace_csv(const TrainResult& result) {
  std::ostringstream out;
  out << "step,lr,loss\n";
  char buf[96];
  for (const TraceRow& row : result.trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.8g\n", row.step, row.lr, row.loss);
    out << buf;
  }
  return out.str();
}

}  // namespace rec
