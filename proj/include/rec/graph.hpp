#pragma once

#include <functional>
#include <vector>

#include "rec/common.hpp"
#include "rec/tensor.hpp"

namespace rec {

using NodeId = int;

enum class MaskApply {
  // Disallowed scores are driven to -inf before the exponent, so masked
  // weights are exactly zero and each row renormalizes over allowed entries.
  kAdditiveBeforeSoftmax,
  // Literal post-multiply: softmax over the full row, then zero the
  // disallowed entries. Rows are left unnormalized.
  kMultiplyAfterSoftmax,
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction; backward walks the tape once in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  NodeId constant(Tensor value);
  NodeId leaf(Tensor value);
  // Value/gradient live outside the graph; backward accumulates into
  // *grad_sink, which lets one accumulator span many per-datapoint graphs.
  NodeId param(const Tensor* value, Tensor* grad_sink);

  const Tensor& value(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  bool wants_grad(NodeId id) const;
  size_t node_count() const { return nodes_.size(); }

  // Root must be scalar. seed is the gradient of the overall objective with
  // respect to this root (1 for a plain loss, 1/B when averaging a batch).
  void backward(NodeId root, float seed = 1.0f);

  // Op plumbing.
  NodeId emit(Tensor value, std::vector<NodeId> inputs, BackwardFn back);
  Tensor& grad_mut(NodeId id);
  void add_grad(NodeId id, const Tensor& g);

 private:
  struct Node {
    Tensor value_own;
    const Tensor* value_ext = nullptr;
    Tensor grad_own;
    Tensor* grad_ext = nullptr;
    bool wants_grad = false;
    std::vector<NodeId> inputs;
    BackwardFn back;
  };
  std::vector<Node> nodes_;

  Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
};

// ---- differentiable operations ----
// Rank-2 a[m,k] x b[k,n], or batched rank-3 with equal leading extents.
NodeId matmul(Graph& g, NodeId a, NodeId b);
NodeId transpose(Graph& g, NodeId a);  // rank-2
NodeId add(Graph& g, NodeId a, NodeId b);
NodeId add_row_bias(Graph& g, NodeId x, NodeId bias);  // x[m,n] + bias[n] per row
NodeId mul(Graph& g, NodeId a, NodeId b);              // elementwise
NodeId scale(Graph& g, NodeId a, float c);
NodeId relu(Graph& g, NodeId a);
NodeId sum(Graph& g, NodeId a);  // scalar
NodeId gather_rows(Graph& g, NodeId table, std::vector<int> ids);
NodeId slice_cols(Graph& g, NodeId a, int offset, int len);
NodeId concat_cols(Graph& g, const std::vector<NodeId>& parts);
NodeId layer_norm(Graph& g, NodeId x, NodeId gain, NodeId bias, float eps);
NodeId masked_softmax(Graph& g, NodeId scores, const MaskMatrix& mask,
                      MaskApply apply = MaskApply::kAdditiveBeforeSoftmax);
// Mean over unmasked positions of -log softmax(logits)[target].
NodeId cross_entropy_masked(Graph& g, NodeId logits, std::vector<int> targets,
                            std::vector<uint8_t> loss_mask);
NodeId dropout(Graph& g, NodeId x, float rate, Rng& rng);

// Raw kernel shared by forward and backward paths: C += A x B, with exact
// skip on zero multipliers so structurally-masked values never touch C.
void matmul_acc(float* c, const float* a, const float* b, int m, int k, int n);

}  // namespace rec
