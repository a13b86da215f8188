#include <cmath>
#include <cstring>

#include <functional>
#include <stdexcept>

#include "doctest.h"
#include "oracle.hpp"
#include "rec/common.hpp"
#include "rec/graph.hpp"
#include "rec/tensor.hpp"

using rec::Graph;
using rec::MaskMatrix;
using rec::NodeId;
using rec::Rng;
using rec::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.normal(0.0, scale));
  return t;
}

MaskMatrix full_mask(int n) {
  MaskMatrix m(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) m.set(i, j, true);
  }
  return m;
}

MaskMatrix causal_mask(int n) {
  MaskMatrix m(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

// Central-difference check: builds the graph loss as sum(weights * op(...)),
// replays the same composition in double, and compares per-element gradients.
struct FdProblem {
  std::vector<Tensor> inputs;
  std::function<NodeId(Graph&, const std::vector<NodeId>&)> build;
  std::function<double(const std::vector<oracle::Mat>&)> replay;
};

void check_gradients(const FdProblem& prob, double h = 1e-3, double tol = 1e-3) {
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : prob.inputs) ids.push_back(g.leaf(t));
  const NodeId loss = prob.build(g, ids);
  REQUIRE(g.value(loss).numel() == 1);
  g.backward(loss);

  std::vector<oracle::Mat> base;
  for (const Tensor& t : prob.inputs) base.push_back(oracle::to_f64(t));

  for (size_t ti = 0; ti < prob.inputs.size(); ++ti) {
    const Tensor& grad = g.grad(ids[ti]);
    double max_fd = 0.0;
    std::vector<double> fds(grad.data.size());
    for (size_t e = 0; e < grad.data.size(); ++e) {
      std::vector<oracle::Mat> plus = base;
      std::vector<oracle::Mat> minus = base;
      plus[ti][e] += h;
      minus[ti][e] -= h;
      fds[e] = (prob.replay(plus) - prob.replay(minus)) / (2.0 * h);
      max_fd = std::max(max_fd, std::abs(fds[e]));
    }
    for (size_t e = 0; e < grad.data.size(); ++e) {
      const double denom = std::max({std::abs(fds[e]), 1e-3 * max_fd, 1e-6});
      const double rel = std::abs(static_cast<double>(grad.data[e]) - fds[e]) / denom;
      INFO("input ", ti, " element ", e, " ad=", grad.data[e], " fd=", fds[e]);
      CHECK(rel <= tol);
    }
  }
}

oracle::Mat weighted(const oracle::Mat& x, const oracle::Mat& w) {
  oracle::Mat out = x;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= w[i];
  return out;
}

double dsum(const oracle::Mat& x) {
  double acc = 0.0;
  for (double v : x) acc += v;
  return acc;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.shape_str() == "[2x3]");
  CHECK_THROWS(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}));
  t.at(1, 2) = std::nanf("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_WITH_AS(t.require_finite("test"), doctest::Contains("non-finite"),
                       std::runtime_error);
}

TEST_CASE("matmul identity and hand cases") {
  Graph g;
  const NodeId eye = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  const NodeId b = g.constant(Tensor({2, 2}, {3, 4, 5, 6}));
  const NodeId c = rec::matmul(g, eye, b);
  CHECK(g.value(c).data == std::vector<float>{3, 4, 5, 6});

  const NodeId row = g.constant(Tensor({1, 2}, {1, 2}));
  const NodeId col = g.constant(Tensor({2, 1}, {3, 4}));
  CHECK(g.value(rec::matmul(g, row, col)).data == std::vector<float>{11});

  CHECK_THROWS_WITH_AS(rec::matmul(g, col, b), doctest::Contains("inner extents"),
                       std::runtime_error);
}

TEST_CASE("matmul random against triple-loop oracle") {
  Rng rng(7);
  const Tensor a = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5, 3}, rng);
  Graph g;
  const Tensor& got = g.value(rec::matmul(g, g.constant(a), g.constant(b)));
  const oracle::Mat want = oracle::dmatmul(oracle::to_f64(a), oracle::to_f64(b), 4, 5, 3);
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(static_cast<double>(got.data[i]) - want[i]) <= 1e-6);
  }
}

TEST_CASE("matmul batched rank-3") {
  Rng rng(9);
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor b = random_tensor({2, 4, 2}, rng);
  Graph g;
  const Tensor& got = g.value(rec::matmul(g, g.constant(a), g.constant(b)));
  CHECK(got.shape == std::vector<int>{2, 3, 2});
  for (int batch = 0; batch < 2; ++batch) {
    oracle::Mat am(a.data.begin() + batch * 12, a.data.begin() + (batch + 1) * 12);
    oracle::Mat bm(b.data.begin() + batch * 8, b.data.begin() + (batch + 1) * 8);
    const oracle::Mat want = oracle::dmatmul(am, bm, 3, 4, 2);
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(std::abs(static_cast<double>(got.data[batch * 6 + i]) - want[i]) <= 1e-6);
    }
  }
}

TEST_CASE("masked_softmax spec examples") {
  Graph g;
  {
    MaskMatrix m = full_mask(3);
    const NodeId s = g.constant(Tensor({3, 3}, {0, 0, 0, 0, 0, 0, 0, 0, 0}));
    const Tensor& p = g.value(rec::masked_softmax(g, s, m));
    for (int j = 0; j < 3; ++j) CHECK(p.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-6));
  }
  {
    // single allowed entry forces certainty, even against a huge score
    MaskMatrix m(2);
    m.set(0, 0, true);
    m.set(1, 0, true);
    m.set(1, 1, true);
    const NodeId s = g.constant(Tensor({2, 2}, {5, 100, 0, 0}));
    const Tensor& p = g.value(rec::masked_softmax(g, s, m));
    CHECK(p.at(0, 0) == 1.0f);
    CHECK(p.at(0, 1) == 0.0f);
  }
  {
    // renormalization over the allowed set
    MaskMatrix m(3);
    for (int i = 0; i < 3; ++i) {
      m.set(i, 0, true);
      m.set(i, 1, true);
    }
    const NodeId s = g.constant(Tensor({3, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3}));
    const Tensor& p = g.value(rec::masked_softmax(g, s, m));
    const double e1 = std::exp(1.0), e2 = std::exp(2.0);
    CHECK(p.at(0, 0) == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-6));
    CHECK(p.at(0, 1) == doctest::Approx(e2 / (e1 + e2)).epsilon(1e-6));
    CHECK(p.at(0, 2) == 0.0f);
  }
}

TEST_CASE("masked_softmax row properties and degenerate row") {
  Rng rng(21);
  const int n = 12;
  const Tensor scores = random_tensor({n, n}, rng, 3.0);
  MaskMatrix m(n);
  for (int i = 0; i < n; ++i) {
    m.set(i, i, true);
    for (int j = 0; j < n; ++j) {
      if (rng.next_double() < 0.4) m.set(i, j, true);
    }
  }
  Graph g;
  const Tensor& p = g.value(rec::masked_softmax(g, g.constant(scores), m));
  for (int i = 0; i < n; ++i) {
    float row_sum = 0.0f;
    for (int j = 0; j < n; ++j) {
      if (m.at(i, j)) {
        row_sum += p.at(i, j);
      } else {
        CHECK(p.at(i, j) == 0.0f);  // exactly zero, not just small
      }
    }
    CHECK(std::abs(row_sum - 1.0f) <= 1e-6f);
  }

  MaskMatrix empty_row(2);
  empty_row.set(0, 0, true);
  Graph g2;
  CHECK_THROWS_WITH_AS(
      rec::masked_softmax(g2, g2.constant(Tensor::zeros({2, 2})), empty_row),
      doctest::Contains("no allowed entries"), std::runtime_error);
}

TEST_CASE("masked_softmax post-multiply mode leaves rows unnormalized") {
  Rng rng(33);
  const int n = 6;
  const Tensor scores = random_tensor({n, n}, rng);
  const MaskMatrix m = causal_mask(n);
  Graph g;
  const Tensor& p =
      g.value(rec::masked_softmax(g, g.constant(scores), m, rec::MaskApply::kMultiplyAfterSoftmax));
  const oracle::Mat want = oracle::dmasked_softmax(oracle::to_f64(scores), m, n, true);
  float first_row_sum = 0.0f;
  for (int j = 0; j < n; ++j) first_row_sum += p.at(0, j);
  CHECK(first_row_sum < 0.999f);  // row 0 keeps only one of n softmax entries
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(static_cast<double>(p.data[i]) - want[i]) <= 1e-6);
  }
}

TEST_CASE("layer_norm spec examples") {
  Graph g;
  const NodeId gain = g.constant(Tensor({4}, {1, 1, 1, 1}));
  const NodeId bias = g.constant(Tensor::zeros({4}));
  {
    const NodeId x = g.constant(Tensor({1, 4}, {5, 5, 5, 5}));
    const Tensor& y = g.value(rec::layer_norm(g, x, gain, bias, 1e-5f));
    for (float v : y.data) CHECK(v == 0.0f);  // zero-variance convention
  }
  {
    Graph g2;
    const NodeId gain2 = g2.constant(Tensor({2}, {1, 1}));
    const NodeId bias2 = g2.constant(Tensor::zeros({2}));
    const NodeId x = g2.constant(Tensor({1, 2}, {1, -1}));
    const Tensor& y = g2.value(rec::layer_norm(g2, x, gain2, bias2, 1e-12f));
    CHECK(y.at(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(y.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
  }
  {
    Rng rng(5);
    Graph g3;
    const int n = 64;
    const NodeId gain3 = g3.constant(Tensor::full({n}, 1.0f));
    const NodeId bias3 = g3.constant(Tensor::zeros({n}));
    const Tensor x = random_tensor({1, n}, rng, 2.0);
    const Tensor& y = g3.value(rec::layer_norm(g3, g3.constant(x), gain3, bias3, 1e-6f));
    double mean = 0.0, var = 0.0;
    for (float v : y.data) mean += v;
    mean /= n;
    for (float v : y.data) var += (v - mean) * (v - mean);
    var /= n;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
  CHECK_THROWS_WITH_AS(rec::layer_norm(g, g.constant(Tensor::zeros({1, 4})), gain, bias, 0.0f),
                       doctest::Contains("eps"), std::runtime_error);
}

TEST_CASE("cross_entropy_masked spec examples") {
  Graph g;
  {
    const NodeId logits = g.constant(Tensor({1, 3}, {50, 0, 0}));
    const NodeId loss = rec::cross_entropy_masked(g, logits, {0}, {1});
    CHECK(g.value(loss).data[0] == doctest::Approx(0.0).epsilon(1e-6));
  }
  {
    const int v = 7;
    const NodeId logits = g.constant(Tensor::zeros({1, v}));
    const NodeId loss = rec::cross_entropy_masked(g, logits, {3}, {1});
    CHECK(g.value(loss).data[0] == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-6));
  }
  {
    // masked position contributes nothing
    Rng rng(11);
    const Tensor logits = random_tensor({2, 5}, rng);
    Graph g2;
    const NodeId both = rec::cross_entropy_masked(g2, g2.constant(logits), {2, 4}, {1, 0});
    Graph g3;
    Tensor first_row = Tensor::zeros({1, 5});
    std::copy_n(logits.row(0), 5, first_row.row(0));
    const NodeId single = rec::cross_entropy_masked(g3, g3.constant(first_row), {2}, {1});
    CHECK(g2.value(both).data[0] == g3.value(single).data[0]);
  }
  CHECK_THROWS_WITH_AS(
      rec::cross_entropy_masked(g, g.constant(Tensor::zeros({1, 3})), {0}, {0}),
      doctest::Contains("no unmasked"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      rec::cross_entropy_masked(g, g.constant(Tensor::zeros({1, 3})), {9}, {1}),
      doctest::Contains("target out of range"), std::runtime_error);
}

TEST_CASE("backward basics") {
  Rng rng(3);
  {
    Graph g;
    const Tensor x = random_tensor({3, 2}, rng);
    const NodeId xid = g.leaf(x);
    g.backward(rec::sum(g, xid));
    for (float v : g.grad(xid).data) CHECK(v == 1.0f);
  }
  {
    Graph g;
    const Tensor x = random_tensor({4}, rng);
    const NodeId xid = g.leaf(x);
    g.backward(rec::sum(g, rec::mul(g, xid, xid)));
    for (size_t i = 0; i < x.data.size(); ++i) {
      CHECK(g.grad(xid).data[i] == doctest::Approx(2.0f * x.data[i]).epsilon(1e-6));
    }
  }
  {
    Graph g;
    const NodeId xid = g.leaf(Tensor::zeros({2, 2}));
    CHECK_THROWS_WITH_AS(g.backward(xid), doctest::Contains("scalar"), std::runtime_error);
  }
}

TEST_CASE("per-op gradient fidelity vs 64-bit central differences") {
  Rng rng(17);

  SUBCASE("matmul") {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 5}, rng);
    const Tensor w = random_tensor({3, 5}, rng);
    check_gradients(FdProblem{
        {a, b},
        [&](Graph& g, const std::vector<NodeId>& in) {
          return rec::sum(g, rec::mul(g, rec::matmul(g, in[0], in[1]), g.constant(w)));
        },
        [&](const std::vector<oracle::Mat>& in) {
          return dsum(weighted(oracle::dmatmul(in[0], in[1], 3, 4, 5), oracle::to_f64(w)));
        }});
  }

  SUBCASE("layer_norm") {
    const Tensor x = random_tensor({3, 6}, rng);
    const Tensor gain = random_tensor({6}, rng, 0.5);
    const Tensor bias = random_tensor({6}, rng, 0.5);
    const Tensor w = random_tensor({3, 6}, rng);
    check_gradients(FdProblem{
        {x, gain, bias},
        [&](Graph& g, const std::vector<NodeId>& in) {
          return rec::sum(g, rec::mul(g, rec::layer_norm(g, in[0], in[1], in[2], 1e-5f),
                                      g.constant(w)));
        },
        [&](const std::vector<oracle::Mat>& in) {
          return dsum(weighted(oracle::dlayer_norm(in[0], in[1], in[2], 1e-5, 3, 6),
                               oracle::to_f64(w)));
        }});
  }

  SUBCASE("masked_softmax additive") {
    const int n = 5;
    const Tensor s = random_tensor({n, n}, rng);
    const Tensor w = random_tensor({n, n}, rng);
    const MaskMatrix m = causal_mask(n);
    check_gradients(FdProblem{
        {s},
        [&](Graph& g, const std::vector<NodeId>& in) {
          return rec::sum(g, rec::mul(g, rec::masked_softmax(g, in[0], m), g.constant(w)));
        },
        [&](const std::vector<oracle::Mat>& in) {
          return dsum(weighted(oracle::dmasked_softmax(in[0], m, n, false), oracle::to_f64(w)));
        }});
  }

  SUBCASE("masked_softmax post-multiply") {
    const int n = 5;
    const Tensor s = random_tensor({n, n}, rng);
    const Tensor w = random_tensor({n, n}, rng);
    const MaskMatrix m = causal_mask(n);
    check_gradients(FdProblem{
        {s},
        [&](Graph& g, const std::vector<NodeId>& in) {
          return rec::sum(g, rec::mul(g,
                                      rec::masked_softmax(g, in[0], m,
                                                          rec::MaskApply::kMultiplyAfterSoftmax),
                                      g.constant(w)));
        },
        [&](const std::vector<oracle::Mat>& in) {
          return dsum(weighted(oracle::dmasked_softmax(in[0], m, n, true), oracle::to_f64(w)));
        }});
  }

  SUBCASE("relu add_row_bias slice concat gather transpose") {
    const Tensor x = random_tensor({4, 6}, rng);
    const Tensor bias = random_tensor({6}, rng);
    const Tensor w = random_tensor({4, 6}, rng);
    const std::vector<int> ids = {2, 0, 3, 0};
    check_gradients(FdProblem{
        {x, bias},
        [&](Graph& g, const std::vector<NodeId>& in) {
          NodeId y = rec::add_row_bias(g, in[0], in[1]);
          y = rec::relu(g, y);
          NodeId left = rec::slice_cols(g, y, 0, 3);
          NodeId right = rec::slice_cols(g, y, 3, 3);
          y = rec::concat_cols(g, {left, right});
          y = rec::transpose(g, rec::transpose(g, y));
          y = rec::gather_rows(g, y, ids);
          return rec::sum(g, rec::mul(g, y, g.constant(w)));
        },
        [&](const std::vector<oracle::Mat>& in) {
          oracle::Mat y = in[0];
          for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 6; ++j) y[i * 6 + j] += in[1][j];
          }
          y = oracle::drelu(y);
          oracle::Mat gathered(4 * 6);
          for (size_t r = 0; r < ids.size(); ++r) {
            for (int j = 0; j < 6; ++j) gathered[r * 6 + j] = y[ids[r] * 6 + j];
          }
          return dsum(weighted(gathered, oracle::to_f64(w)));
        }});
  }

  SUBCASE("cross_entropy_masked") {
    const Tensor logits = random_tensor({3, 6}, rng);
    const std::vector<int> targets = {1, 4, 2};
    const std::vector<uint8_t> mask = {1, 0, 1};
    check_gradients(FdProblem{
        {logits},
        [&](Graph& g, const std::vector<NodeId>& in) {
          return rec::cross_entropy_masked(g, in[0], targets, mask);
        },
        [&](const std::vector<oracle::Mat>& in) {
          return oracle::dcross_entropy(in[0], targets, mask, 3, 6);
        }});
  }
}

TEST_CASE("determinism: identical seeds produce bit-identical results") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    const Tensor a = random_tensor({8, 8}, rng);
    const Tensor b = random_tensor({8, 8}, rng);
    Graph g;
    NodeId y = rec::matmul(g, g.constant(a), g.constant(b));
    y = rec::masked_softmax(g, y, causal_mask(8));
    return g.value(y).data;
  };
  const auto r1 = run(99);
  const auto r2 = run(99);
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(float)) == 0);
}

TEST_CASE("dropout scales and is seed-deterministic") {
  Rng data_rng(4);
  const Tensor x = random_tensor({20, 20}, data_rng);
  Graph g1, g2;
  Rng d1(123), d2(123);
  const Tensor& y1 = g1.value(rec::dropout(g1, g1.constant(x), 0.25f, d1));
  const Tensor& y2 = g2.value(rec::dropout(g2, g2.constant(x), 0.25f, d2));
  CHECK(y1.data == y2.data);
  int zeros = 0;
  for (size_t i = 0; i < y1.data.size(); ++i) {
    if (y1.data[i] == 0.0f) {
      ++zeros;
    } else {
      CHECK(y1.data[i] == doctest::Approx(x.data[i] / 0.75f));
    }
  }
  CHECK(zeros > 40);
  CHECK(zeros < 160);
}
