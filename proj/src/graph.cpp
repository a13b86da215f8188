#include "rec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace rec {

namespace {

void transpose_into(float* dst, const float* src, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      dst[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
    }
  }
}

}  // namespace

void matmul_acc(float* c, const float* a, const float* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

NodeId Graph::constant(Tensor value) {
  Node nd;
  nd.value_own = std::move(value);
  nd.wants_grad = false;
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value) {
  Node nd;
  nd.grad_own = Tensor::zeros(value.shape);
  nd.value_own = std::move(value);
  nd.wants_grad = true;
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::param(const Tensor* value, Tensor* grad_sink) {
  if (value == nullptr || grad_sink == nullptr) {
    throw std::runtime_error("graph: param requires value and gradient storage");
  }
  if (!grad_sink->same_shape(*value)) {
    throw std::runtime_error("graph: param gradient shape mismatch");
  }
  Node nd;
  nd.value_ext = value;
  nd.grad_ext = grad_sink;
  nd.wants_grad = true;
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Graph::value(NodeId id) const {
  const Node& nd = node(id);
  return nd.value_ext ? *nd.value_ext : nd.value_own;
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& nd = node(id);
  return nd.grad_ext ? *nd.grad_ext : nd.grad_own;
}

bool Graph::wants_grad(NodeId id) const { return node(id).wants_grad; }

Tensor& Graph::grad_mut(NodeId id) {
  Node& nd = node(id);
  return nd.grad_ext ? *nd.grad_ext : nd.grad_own;
}

void Graph::add_grad(NodeId id, const Tensor& g) {
  Tensor& dst = grad_mut(id);
  if (!dst.same_shape(g)) throw std::runtime_error("graph: gradient shape mismatch");
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

NodeId Graph::emit(Tensor value, std::vector<NodeId> inputs, BackwardFn back) {
  bool wants = false;
  for (NodeId in : inputs) {
    if (node(in).wants_grad) {
      wants = true;
      break;
    }
  }
  Node nd;
  if (wants) nd.grad_own = Tensor::zeros(value.shape);
  nd.value_own = std::move(value);
  nd.wants_grad = wants;
  nd.inputs = std::move(inputs);
  if (wants) nd.back = std::move(back);
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::backward(NodeId root, float seed) {
  if (value(root).numel() != 1) {
    throw std::runtime_error("graph: backward root must be scalar");
  }
  if (!node(root).wants_grad) return;
  grad_mut(root).data[0] += seed;
  for (NodeId id = root; id >= 0; --id) {
    Node& nd = node(id);
    if (!nd.wants_grad || !nd.back) continue;
    nd.back(*this, id);
  }
}

// ---------------------------------------------------------------------------

NodeId matmul(Graph& g, NodeId a, NodeId b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (ta.rank() == 2 && tb.rank() == 2) {
    const int m = ta.dim(0), k = ta.dim(1), k2 = tb.dim(0), n = tb.dim(1);
    if (k != k2) {
      throw std::runtime_error("matmul: inner extents differ " + ta.shape_str() + " vs " +
                               tb.shape_str());
    }
    Tensor out = Tensor::zeros({m, n});
    matmul_acc(out.data.data(), ta.data.data(), tb.data.data(), m, k, n);
    return g.emit(std::move(out), {a, b}, [a, b, m, k, n](Graph& gr, NodeId self) {
      const Tensor& dc = gr.grad(self);
      const Tensor& va = gr.value(a);
      const Tensor& vb = gr.value(b);
      if (gr.wants_grad(a)) {
        // dA = dC x B^T
        std::vector<float> bt(static_cast<size_t>(k) * n);
        transpose_into(bt.data(), vb.data.data(), k, n);
        matmul_acc(gr.grad_mut(a).data.data(), dc.data.data(), bt.data(), m, n, k);
      }
      if (gr.wants_grad(b)) {
        // dB = A^T x dC
        std::vector<float> at(static_cast<size_t>(m) * k);
        transpose_into(at.data(), va.data.data(), m, k);
        matmul_acc(gr.grad_mut(b).data.data(), at.data(), dc.data.data(), k, m, n);
      }
    });
  }
  if (ta.rank() == 3 && tb.rank() == 3) {
    if (ta.dim(0) != tb.dim(0)) throw std::runtime_error("matmul: batch extents differ");
    const int bsz = ta.dim(0), m = ta.dim(1), k = ta.dim(2), k2 = tb.dim(1), n = tb.dim(2);
    if (k != k2) throw std::runtime_error("matmul: inner extents differ");
    Tensor out = Tensor::zeros({bsz, m, n});
    for (int i = 0; i < bsz; ++i) {
      matmul_acc(out.data.data() + static_cast<size_t>(i) * m * n,
                 ta.data.data() + static_cast<size_t>(i) * m * k,
                 tb.data.data() + static_cast<size_t>(i) * k * n, m, k, n);
    }
    return g.emit(std::move(out), {a, b}, [a, b, bsz, m, k, n](Graph& gr, NodeId self) {
      const Tensor& dc = gr.grad(self);
      const Tensor& va = gr.value(a);
      const Tensor& vb = gr.value(b);
      std::vector<float> scratch(static_cast<size_t>(std::max(m, k)) * std::max(k, n));
      for (int i = 0; i < bsz; ++i) {
        const float* dci = dc.data.data() + static_cast<size_t>(i) * m * n;
        if (gr.wants_grad(a)) {
          transpose_into(scratch.data(), vb.data.data() + static_cast<size_t>(i) * k * n, k, n);
          matmul_acc(gr.grad_mut(a).data.data() + static_cast<size_t>(i) * m * k, dci,
                     scratch.data(), m, n, k);
        }
        if (gr.wants_grad(b)) {
          transpose_into(scratch.data(), va.data.data() + static_cast<size_t>(i) * m * k, m, k);
          matmul_acc(gr.grad_mut(b).data.data() + static_cast<size_t>(i) * k * n, scratch.data(),
                     dci, k, m, n);
        }
      }
    });
  }
  throw std::runtime_error("matmul: expected rank-2 pair or batched rank-3 pair");
}

NodeId transpose(Graph& g, NodeId a) {
  const Tensor& ta = g.value(a);
  if (ta.rank() != 2) throw std::runtime_error("transpose: rank-2 only");
  const int m = ta.dim(0), n = ta.dim(1);
  Tensor out = Tensor::zeros({n, m});
  transpose_into(out.data.data(), ta.data.data(), m, n);
  return g.emit(std::move(out), {a}, [a, m, n](Graph& gr, NodeId self) {
    if (!gr.wants_grad(a)) return;
    const Tensor& dc = gr.grad(self);
    Tensor& da = gr.grad_mut(a);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        da.data[static_cast<size_t>(j) * n + i] += dc.data[static_cast<size_t>(i) * m + j];
      }
    }
  });
}

NodeId add(Graph& g, NodeId a, NodeId b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (!ta.same_shape(tb)) throw std::runtime_error("add: shape mismatch");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, NodeId self) {
    const Tensor& dc = gr.grad(self);
    if (gr.wants_grad(a)) gr.add_grad(a, dc);
    if (gr.wants_grad(b)) gr.add_grad(b, dc);
  });
}

NodeId add_row_bias(Graph& g, NodeId x, NodeId bias) {
  const Tensor& tx = g.value(x);
  const Tensor& tbias = g.value(bias);
  if (tx.rank() != 2 || tbias.rank() != 1 || tbias.dim(0) != tx.dim(1)) {
    throw std::runtime_error("add_row_bias: expected x[m,n] and bias[n]");
  }
  const int m = tx.dim(0), n = tx.dim(1);
  Tensor out = tx;
  for (int i = 0; i < m; ++i) {
    float* r = out.row(i);
    for (int j = 0; j < n; ++j) r[j] += tbias.data[static_cast<size_t>(j)];
  }
  return g.emit(std::move(out), {x, bias}, [x, bias, m, n](Graph& gr, NodeId self) {
    const Tensor& dc = gr.grad(self);
    if (gr.wants_grad(x)) gr.add_grad(x, dc);
    if (gr.wants_grad(bias)) {
      Tensor& db = gr.grad_mut(bias);
      for (int i = 0; i < m; ++i) {
        const float* r = dc.row(i);
        for (int j = 0; j < n; ++j) db.data[static_cast<size_t>(j)] += r[j];
      }
    }
  });
}

NodeId mul(Graph& g, NodeId a, NodeId b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (!ta.same_shape(tb)) throw std::runtime_error("mul: shape mismatch");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, NodeId self) {
    const Tensor& dc = gr.grad(self);
    const Tensor& va = gr.value(a);
    const Tensor& vb = gr.value(b);
    if (gr.wants_grad(a)) {
      Tensor& da = gr.grad_mut(a);
      for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += dc.data[i] * vb.data[i];
    }
    if (gr.wants_grad(b)) {
      Tensor& db = gr.grad_mut(b);
      for (size_t i = 0; i < db.data.size(); ++i) db.data[i] += dc.data[i] * va.data[i];
    }
  });
}

NodeId scale(Graph& g, NodeId a, float c) {
  Tensor out = g.value(a);
  for (float& v : out.data) v *= c;
  return g.emit(std::move(out), {a}, [a, c](Graph& gr, NodeId self) {
    if (!gr.wants_grad(a)) return;
    const Tensor& dc = gr.grad(self);
    Tensor& da = gr.grad_mut(a);
    for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += c * dc.data[i];
  });
}

NodeId relu(Graph& g, NodeId a) {
  Tensor out = g.value(a);
  for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
  return g.emit(std::move(out), {a}, [a](Graph& gr, NodeId self) {
    if (!gr.wants_grad(a)) return;
    const Tensor& dc = gr.grad(self);
    const Tensor& va = gr.value(a);
    Tensor& da = gr.grad_mut(a);
    for (size_t i = 0; i < da.data.size(); ++i) {
      if (va.data[i] > 0.0f) da.data[i] += dc.data[i];
    }
  });
}

NodeId sum(Graph& g, NodeId a) {
  const Tensor& ta = g.value(a);
  double acc = 0.0;
  for (float v : ta.data) acc += v;
  Tensor out({1}, {static_cast<float>(acc)});
  return g.emit(std::move(out), {a}, [a](Graph& gr, NodeId self) {
    if (!gr.wants_grad(a)) return;
    const float d = gr.grad(self).data[0];
    Tensor& da = gr.grad_mut(a);
    for (float& v : da.data) v += d;
  });
}

NodeId gather_rows(Graph& g, NodeId table, std::vector<int> ids) {
  const Tensor& tt = g.value(table);
  if (tt.rank() != 2) throw std::runtime_error("gather_rows: table must be rank-2");
  const int rows = tt.dim(0), width = tt.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), width});
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= rows) throw std::runtime_error("gather_rows: index out of range");
    std::copy_n(tt.row(id), width, out.row(static_cast<int>(i)));
  }
  return g.emit(std::move(out), {table},
                [table, ids = std::move(ids), width](Graph& gr, NodeId self) {
                  if (!gr.wants_grad(table)) return;
                  const Tensor& dc = gr.grad(self);
                  Tensor& dt = gr.grad_mut(table);
                  for (size_t i = 0; i < ids.size(); ++i) {
                    const float* src = dc.row(static_cast<int>(i));
                    float* dst = dt.row(ids[i]);
                    for (int j = 0; j < width; ++j) dst[j] += src[j];
                  }
                });
}

NodeId slice_cols(Graph& g, NodeId a, int offset, int len) {
  const Tensor& ta = g.value(a);
  if (ta.rank() != 2) throw std::runtime_error("slice_cols: rank-2 only");
  const int m = ta.dim(0), n = ta.dim(1);
  if (offset < 0 || len <= 0 || offset + len > n) {
    throw std::runtime_error("slice_cols: range out of bounds");
  }
  Tensor out = Tensor::zeros({m, len});
  for (int i = 0; i < m; ++i) std::copy_n(ta.row(i) + offset, len, out.row(i));
  return g.emit(std::move(out), {a}, [a, offset, len, m](Graph& gr, NodeId self) {
    if (!gr.wants_grad(a)) return;
    const Tensor& dc = gr.grad(self);
    Tensor& da = gr.grad_mut(a);
    for (int i = 0; i < m; ++i) {
      const float* src = dc.row(i);
      float* dst = da.row(i) + offset;
      for (int j = 0; j < len; ++j) dst[j] += src[j];
    }
  });
}

NodeId concat_cols(Graph& g, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: no inputs");
  const int m = g.value(parts[0]).dim(0);
  int total = 0;
  for (NodeId p : parts) {
    const Tensor& tp = g.value(p);
    if (tp.rank() != 2 || tp.dim(0) != m) throw std::runtime_error("concat_cols: row mismatch");
    total += tp.dim(1);
  }
  Tensor out = Tensor::zeros({m, total});
  int off = 0;
  for (NodeId p : parts) {
    const Tensor& tp = g.value(p);
    for (int i = 0; i < m; ++i) std::copy_n(tp.row(i), tp.dim(1), out.row(i) + off);
    off += tp.dim(1);
  }
  std::vector<int> widths;
  for (NodeId p : parts) widths.push_back(g.value(p).dim(1));
  return g.emit(std::move(out), parts,
                [parts, widths = std::move(widths), m](Graph& gr, NodeId self) {
                  const Tensor& dc = gr.grad(self);
                  int off2 = 0;
                  for (size_t pi = 0; pi < parts.size(); ++pi) {
                    if (gr.wants_grad(parts[pi])) {
                      Tensor& dp = gr.grad_mut(parts[pi]);
                      for (int i = 0; i < m; ++i) {
                        const float* src = dc.row(i) + off2;
                        float* dst = dp.row(i);
                        for (int j = 0; j < widths[pi]; ++j) dst[j] += src[j];
                      }
                    }
                    off2 += widths[pi];
                  }
                });
}

NodeId layer_norm(Graph& g, NodeId x, NodeId gain, NodeId bias, float eps) {
  if (eps <= 0.0f) throw std::runtime_error("layer_norm: eps must be positive");
  const Tensor& tx = g.value(x);
  const Tensor& tg = g.value(gain);
  const Tensor& tb = g.value(bias);
  if (tx.rank() != 2) throw std::runtime_error("layer_norm: rank-2 input expected");
  const int m = tx.dim(0), n = tx.dim(1);
  if (tg.rank() != 1 || tg.dim(0) != n || tb.rank() != 1 || tb.dim(0) != n) {
    throw std::runtime_error("layer_norm: gain/bias must match last axis");
  }
  Tensor out = Tensor::zeros({m, n});
  // Cached statistics for backward: per-row mean and 1/sqrt(var+eps).
  auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(m) * 2);
  for (int i = 0; i < m; ++i) {
    const float* r = tx.row(i);
    float mean = 0.0f;
    for (int j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (int j = 0; j < n; ++j) {
      const float d = r[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(i) * 2] = mean;
    (*stats)[static_cast<size_t>(i) * 2 + 1] = inv;
    float* o = out.row(i);
    for (int j = 0; j < n; ++j) {
      o[j] = (r[j] - mean) * inv * tg.data[static_cast<size_t>(j)] + tb.data[static_cast<size_t>(j)];
    }
  }
  return g.emit(std::move(out), {x, gain, bias},
                [x, gain, bias, stats, m, n](Graph& gr, NodeId self) {
                  const Tensor& dc = gr.grad(self);
                  const Tensor& vx = gr.value(x);
                  const Tensor& vg = gr.value(gain);
                  const bool wx = gr.wants_grad(x);
                  const bool wg = gr.wants_grad(gain);
                  const bool wb = gr.wants_grad(bias);
                  for (int i = 0; i < m; ++i) {
                    const float mean = (*stats)[static_cast<size_t>(i) * 2];
                    const float inv = (*stats)[static_cast<size_t>(i) * 2 + 1];
                    const float* xr = vx.row(i);
                    const float* dr = dc.row(i);
                    if (wg || wb) {
                      Tensor* dgain = wg ? &gr.grad_mut(gain) : nullptr;
                      Tensor* dbias = wb ? &gr.grad_mut(bias) : nullptr;
                      for (int j = 0; j < n; ++j) {
                        const float xhat = (xr[j] - mean) * inv;
                        if (dgain) dgain->data[static_cast<size_t>(j)] += dr[j] * xhat;
                        if (dbias) dbias->data[static_cast<size_t>(j)] += dr[j];
                      }
                    }
                    if (wx) {
                      float sum_dxhat = 0.0f;
                      float sum_dxhat_xhat = 0.0f;
                      for (int j = 0; j < n; ++j) {
                        const float xhat = (xr[j] - mean) * inv;
                        const float dxhat = dr[j] * vg.data[static_cast<size_t>(j)];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                      }
                      Tensor& dx = gr.grad_mut(x);
                      float* dxr = dx.row(i);
                      const float invn = 1.0f / static_cast<float>(n);
                      for (int j = 0; j < n; ++j) {
                        const float xhat = (xr[j] - mean) * inv;
                        const float dxhat = dr[j] * vg.data[static_cast<size_t>(j)];
                        dxr[j] += inv * (dxhat - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat);
                      }
                    }
                  }
                });
}

NodeId masked_softmax(Graph& g, NodeId scores, const MaskMatrix& mask, MaskApply apply) {
  const Tensor& ts = g.value(scores);
  if (ts.rank() != 2) throw std::runtime_error("masked_softmax: rank-2 scores expected");
  const int m = ts.dim(0), n = ts.dim(1);
  if (mask.n != n || m != n) {
    // The attention use is square; allow rectangular by row width only.
    if (mask.n != n) throw std::runtime_error("masked_softmax: mask width mismatch");
  }
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const float* s = ts.row(i);
    float* o = out.row(i);
    bool any = false;
    float mx = -std::numeric_limits<float>::infinity();
    if (apply == MaskApply::kAdditiveBeforeSoftmax) {
      for (int j = 0; j < n; ++j) {
        if (mask.at(i, j)) {
          any = true;
          mx = std::max(mx, s[j]);
        }
      }
      if (!any) throw std::runtime_error("masked_softmax: row " + std::to_string(i) +
                                         " has no allowed entries");
      float z = 0.0f;
      for (int j = 0; j < n; ++j) {
        if (mask.at(i, j)) {
          o[j] = std::exp(s[j] - mx);
          z += o[j];
        }
      }
      const float invz = 1.0f / z;
      for (int j = 0; j < n; ++j) {
        if (mask.at(i, j)) o[j] *= invz;
      }
    } else {
      for (int j = 0; j < n; ++j) {
        if (mask.at(i, j)) any = true;
        mx = std::max(mx, s[j]);
      }
      if (!any) throw std::runtime_error("masked_softmax: row " + std::to_string(i) +
                                         " has no allowed entries");
      float z = 0.0f;
      std::vector<float> e(static_cast<size_t>(n));
      for (int j = 0; j < n; ++j) {
        e[static_cast<size_t>(j)] = std::exp(s[j] - mx);
        z += e[static_cast<size_t>(j)];
      }
      const float invz = 1.0f / z;
      for (int j = 0; j < n; ++j) {
        o[j] = mask.at(i, j) ? e[static_cast<size_t>(j)] * invz : 0.0f;
      }
    }
  }
  MaskMatrix mask_copy = mask;
  return g.emit(std::move(out), {scores},
                [scores, mask_copy = std::move(mask_copy), m, n, apply](Graph& gr, NodeId self) {
                  if (!gr.wants_grad(scores)) return;
                  const Tensor& dp = gr.grad(self);
                  const Tensor& p = gr.value(self);
                  Tensor& ds = gr.grad_mut(scores);
                  if (apply == MaskApply::kAdditiveBeforeSoftmax) {
                    for (int i = 0; i < m; ++i) {
                      const float* pr = p.row(i);
                      const float* dr = dp.row(i);
                      float dot = 0.0f;
                      for (int j = 0; j < n; ++j) {
                        if (mask_copy.at(i, j)) dot += dr[j] * pr[j];
                      }
                      float* dsr = ds.row(i);
                      for (int j = 0; j < n; ++j) {
                        if (mask_copy.at(i, j)) dsr[j] += pr[j] * (dr[j] - dot);
                      }
                    }
                  } else {
                    // out = softmax(s) elementwise-masked; recover the full
                    // softmax row to propagate through the normalizer.
                    const Tensor& vs = gr.value(scores);
                    for (int i = 0; i < m; ++i) {
                      const float* s = vs.row(i);
                      float mx = -std::numeric_limits<float>::infinity();
                      for (int j = 0; j < n; ++j) mx = std::max(mx, s[j]);
                      float z = 0.0f;
                      std::vector<float> full(static_cast<size_t>(n));
                      for (int j = 0; j < n; ++j) {
                        full[static_cast<size_t>(j)] = std::exp(s[j] - mx);
                        z += full[static_cast<size_t>(j)];
                      }
                      for (int j = 0; j < n; ++j) full[static_cast<size_t>(j)] /= z;
                      const float* dr = dp.row(i);
                      float dot = 0.0f;
                      for (int j = 0; j < n; ++j) {
                        const float gmask = mask_copy.at(i, j) ? dr[j] : 0.0f;
                        dot += gmask * full[static_cast<size_t>(j)];
                      }
                      float* dsr = ds.row(i);
                      for (int j = 0; j < n; ++j) {
                        const float gmask = mask_copy.at(i, j) ? dr[j] : 0.0f;
                        dsr[j] += full[static_cast<size_t>(j)] * (gmask - dot);
                      }
                    }
                  }
                });
}

NodeId cross_entropy_masked(Graph& g, NodeId logits, std::vector<int> targets,
                            std::vector<uint8_t> loss_mask) {
  const Tensor& tl = g.value(logits);
  if (tl.rank() != 2) throw std::runtime_error("cross_entropy_masked: rank-2 logits expected");
  const int m = tl.dim(0), v = tl.dim(1);
  if (static_cast<int>(targets.size()) != m || static_cast<int>(loss_mask.size()) != m) {
    throw std::runtime_error("cross_entropy_masked: targets/mask length mismatch");
  }
  int live = 0;
  for (int i = 0; i < m; ++i) {
    if (!loss_mask[static_cast<size_t>(i)]) continue;
    ++live;
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= v) throw std::runtime_error("cross_entropy_masked: target out of range");
  }
  if (live == 0) throw std::runtime_error("cross_entropy_masked: no unmasked positions");

  // Probabilities are cached for backward.
  auto probs = std::make_shared<Tensor>(Tensor::zeros({m, v}));
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (!loss_mask[static_cast<size_t>(i)]) continue;
    const float* r = tl.row(i);
    float mx = r[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, r[j]);
    float z = 0.0f;
    float* pr = probs->row(i);
    for (int j = 0; j < v; ++j) {
      pr[j] = std::exp(r[j] - mx);
      z += pr[j];
    }
    const float invz = 1.0f / z;
    for (int j = 0; j < v; ++j) pr[j] *= invz;
    total += -std::log(static_cast<double>(pr[targets[static_cast<size_t>(i)]]));
  }
  Tensor out({1}, {static_cast<float>(total / live)});
  return g.emit(std::move(out), {logits},
                [logits, targets = std::move(targets), loss_mask = std::move(loss_mask), probs, m,
                 v, live](Graph& gr, NodeId self) {
                  if (!gr.wants_grad(logits)) return;
                  const float d = gr.grad(self).data[0] / static_cast<float>(live);
                  Tensor& dl = gr.grad_mut(logits);
                  for (int i = 0; i < m; ++i) {
                    if (!loss_mask[static_cast<size_t>(i)]) continue;
                    const float* pr = probs->row(i);
                    float* dr = dl.row(i);
                    const int t = targets[static_cast<size_t>(i)];
                    for (int j = 0; j < v; ++j) dr[j] += d * pr[j];
                    dr[t] -= d;
                  }
                });
}

NodeId dropout(Graph& g, NodeId x, float rate, Rng& rng) {
  if (rate <= 0.0f) return x;
  if (rate >= 1.0f) throw std::runtime_error("dropout: rate must be below 1");
  const Tensor& tx = g.value(x);
  const float keep = 1.0f - rate;
  const float inv_keep = 1.0f / keep;
  auto mask = std::make_shared<std::vector<uint8_t>>(tx.numel());
  Tensor out = tx;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const bool kept = rng.next_float() >= rate;
    (*mask)[i] = kept ? 1 : 0;
    out.data[i] = kept ? out.data[i] * inv_keep : 0.0f;
  }
  return g.emit(std::move(out), {x}, [x, mask, inv_keep](Graph& gr, NodeId self) {
    if (!gr.wants_grad(x)) return;
    const Tensor& dc = gr.grad(self);
    Tensor& dx = gr.grad_mut(x);
    for (size_t i = 0; i < dx.data.size(); ++i) {
      if ((*mask)[i]) dx.data[i] += dc.data[i] * inv_keep;
    }
  });
}

}  // namespace rec
