#pragma once

#include <array>
#include <vector>

#include "refop/common.hpp"

namespace refop::ad {

struct Var {
  int id = -1;
};

// Reverse-mode tape over dense row-major f64 matrices. The attention ops are
// fused nodes: their forward stashes exactly what the handwritten backward
// needs (per-head weights and normalizers), nothing else. A graph built with
// training=false skips the stashes and refuses backward().
class Graph {
 public:
  explicit Graph(bool training = true) : training_(training) {}

  Var input(Mat v);  // constant leaf
  Var param(Mat v);  // differentiable leaf

  const Mat& val(Var x) const;
  const Mat& grad(Var x) const;  // valid for params after backward()

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_rowvec(Var a, Var b);  // b is 1 x cols
  Var scale(Var a, double c);
  Var concat_cols(Var a, Var b, Var c);
  Var gelu(Var a);                     // exact erf form
  Var layernorm(Var x, Var g, Var b);  // rowwise, eps 1e-5; g,b are 1 x cols

  // w = (B * (v1+v2+v3)) / max(3 * rowsum(B), 1e-12) per head, where
  // B = exp(S - rowmax(S)) .* exp(-dist^2/gamma^2) and S = Qh Kh^T / sqrt(dh).
  // gamma = inf drops the distance factor.
  Var daca_quadratic(Var q, Var k, Var vsum, const Mat& pos_q, const Mat& pos_k, double gamma,
                     int heads);

  // Linear-cost variant; per head the raw projections are passed through
  // exp(. - rowmax) (queries) and exp(. - max) (keys) to stay nonnegative,
  // then contracted against the random-feature maps phi. The shifts act as
  // constants in backward: the output is scale-invariant in each query row
  // and in the key block, so their true gradient contribution is zero.
  Var daca_linear(Var q, Var k, Var vsum, const Mat& phi_q, const Mat& phi_k, int heads);

  Var pnorm_loss(Var u_hat, const Mat& target, int p);  // mean over rows of row p-norm

  void backward(Var root, double seed = 1.0);

 private:
  enum class Op {
    input,
    param,
    matmul,
    add,
    add_rowvec,
    scale_op,
    concat3,
    gelu_op,
    layernorm_op,
    daca_quad,
    daca_lin,
    pnorm
  };

  struct Node {
    Op op;
    std::array<int, 3> a{-1, -1, -1};
    Mat val;
    Mat grad;
    bool needs_grad = false;
    double s0 = 0.0;  // scale factor, gamma, or p
    int heads = 1;
    std::vector<Mat> aux;
  };

  Var push(Node n);
  Node& at(Var x);
  const Node& at(Var x) const;
  Mat& acc(int id);  // grad buffer, allocated on first touch

  std::vector<Node> nodes_;
  bool training_;
};

// Graph-free forward kernels shared with the public operator API. q and k of
// the linear kernel must already be nonnegative feature-mapped values.
Mat daca_quadratic_eval(const Mat& q, const Mat& k, const Mat& vsum, const Mat& pos_q,
                        const Mat& pos_k, double gamma, int heads);
Mat daca_linear_eval(const Mat& q, const Mat& k, const Mat& vsum, const Mat& phi_q,
                     const Mat& phi_k, int heads);

}  // namespace refop::ad
