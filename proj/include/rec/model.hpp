#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rec/graph.hpp"
#include "rec/optim.hpp"
#include "rec/pipeline.hpp"
#include "rec/tensor.hpp"

namespace rec {

enum class MaskMode { kPositionalCausal, kTemporalCausal };

const char* mask_mode_name(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);

struct DecoderConfig {
  int num_layers = 2;
  int num_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_tokens = 0;  // item vocabulary + PAD/SEP/OOV
  int max_seq_len = 65;
  MaskMode mask_mode = MaskMode::kTemporalCausal;
  float dropout = 0.1f;
  bool use_pos_embedding = true;  // test configurations may disable
  MaskApply mask_apply = MaskApply::kAdditiveBeforeSoftmax;
  float layer_norm_eps = 1e-5f;

  int d_k() const { return d_model / num_heads; }
  void validate() const;
};

// All learnable weights, stored flat so the optimizer and checkpoints see one
// aligned list. The output projection is tied to the token embedding.
struct DecoderParams {
  DecoderConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  struct LayerIndex {
    int ln1_gain, ln1_bias;
    int wq, wk, wv, wo;
    int ln2_gain, ln2_bias;
    int ff1, ff1_bias, ff2, ff2_bias;
  };
  int tok_embedding = -1;
  int pos_embedding = -1;
  std::vector<LayerIndex> layers;
  int final_gain = -1;
  int final_bias = -1;

  static DecoderParams init(const DecoderConfig& cfg, uint64_t seed, float init_std = 0.02f);
  static DecoderParams zeros(const DecoderConfig& cfg);

  size_t parameter_count() const;
  void save(const std::string& path) const;
  static DecoderParams load(const std::string& path, const DecoderConfig& cfg);
};

// allowed(i,j) = same student and j <= i, or different students and
// t_j < t_i strictly. Separators inherit their segment's student and the
// preceding timestamp; PAD positions see only themselves.
MaskMatrix temporal_mask(const std::vector<int64_t>& timestamps,
                         const std::vector<int64_t>& position_student);
// Plain causal (j <= i), PAD isolated.
MaskMatrix positional_mask(const std::vector<int64_t>& position_student);
MaskMatrix build_mask(const DataPoint& dp, MaskMode mode);

struct BoundParams {
  std::vector<NodeId> ids;
};
// grad_sinks non-null binds trainable params whose gradients accumulate into
// the sinks; null binds constants (inference).
BoundParams bind_params(Graph& g, const DecoderParams& params, std::vector<Tensor>* grad_sinks);

struct ForwardResult {
  NodeId logits = -1;    // [len, vocab_tokens]
  NodeId embedded = -1;  // [len, d_model] input embeddings, for probes
};
ForwardResult decoder_forward(Graph& g, const DecoderParams& params, const BoundParams& bound,
                              const DataPoint& dp, const MaskMatrix& mask, bool training,
                              Rng* dropout_rng);

struct TrainConfig {
  int steps = 3500;
  int batch_size = 64;
  ScheduleConfig schedule;
  uint64_t seed = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
};

struct TraceRow {
  int step;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  bool diverged = false;
  int divergence_step = -1;
};

TrainResult train(DecoderParams& params, const std::vector<TokenizedStudent>& students,
                  const PipelineConfig& pipeline_cfg, const TrainConfig& train_cfg);

// Item tokens (OOV included) ordered by final-position logit, ties by token
// id. Empty context falls back to the popularity order.
std::vector<int> predict_topn(const DecoderParams& params, const std::vector<int>& tokens,
                              const std::vector<int64_t>& timestamps, int n,
                              const std::vector<int>& popularity_order);

// 1-based rank of `target` among item tokens under `logits_row`, ties by
// ascending token id.
int rank_of_target(const float* logits_row, int vocab_tokens, int target);

std::string loss_trace_csv(const TrainResult& result);

}  // namespace rec
