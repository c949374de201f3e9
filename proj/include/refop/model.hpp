#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refop/autodiff.hpp"
#include "refop/common.hpp"

namespace refop::model {

enum class Attention { quadratic, linear, none };

const char* attention_name(Attention a);
Attention attention_from_name(const std::string& name);

struct ModelConfig {
  int hidden_dim = 64;  // s, split across heads
  int layers = 3;
  int heads = 4;
  double gamma = 0.3;      // distance weighting width; inf disables it
  int rfm_features = 256;  // D, linear variant only
  int target_dim = 1;
  int spatial_dim = 2;
  int param_dim = 3;  // per boundary component
  int mlp_hidden = 128;
  Attention attention = Attention::quadratic;
  std::uint64_t seed = 0;
};

// Throws usage_error on an invalid field combination.
void validate_config(const ModelConfig& cfg);

struct ShapeSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
};

// Trainable arrays in registry (= checkpoint) order.
std::vector<ShapeSpec> param_shapes(const ModelConfig& cfg);

struct ModelParams {
  std::vector<std::string> names;
  std::vector<Mat> values;  // aligned with names
  Mat rfm_omegas;           // D x spatial_dim for the linear variant, else 0x0

  int find(const std::string& name) const;
};

// LeCun-normal weights, zero biases, unit layer-norm scales; the decoder's
// last linear layer starts at zero so the initial correction vanishes.
ModelParams init_params(const ModelConfig& cfg);

// Pointwise two-layer MLP: gelu(x*w1 + b1)*w2 + b2.
Mat mlp_apply(const Mat& x, const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2);

// Sum over boundary components of the shared encoder MLP applied to
// concat(x_row, u_row, diff_i). Throws usage_error when a diff vector's
// length disagrees with the MLP input width.
Mat encode_geometry(const std::vector<Eigen::RowVectorXd>& param_diffs, const Mat& x, const Mat& u,
                    const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2);

// Softmax cross-attention with a shared kernel over three value streams and
// Gaussian distance weighting of width gamma (inf disables weighting).
Mat daca_quadratic(const Mat& q, const Mat& k, const Mat& v1, const Mat& v2, const Mat& v3,
                   const Mat& pos_q, const Mat& pos_k, double gamma, int heads);

// Random Fourier features: row = (1/sqrt(D)) [sin(w_i . x)..., cos(w_i . x)...].
Mat rfm_features(const Mat& x, const Mat& omegas);

// Linearized attention over nonnegative feature-mapped q, k (the caller maps
// them) with random-feature position weighting. Throws numeric_error when a
// normalizer row falls below 1e-12.
Mat daca_linear(const Mat& q, const Mat& k, const Mat& v1, const Mat& v2, const Mat& v3,
                const Mat& phi_q, const Mat& phi_k, int heads);

struct ForwardInput {
  Mat query_nodes;  // N x spatial_dim
  Mat u_interp;     // N x target_dim
  Mat shifts;       // N x spatial_dim
  std::vector<Eigen::RowVectorXd> param_diffs;  // one per component, 1 x param_dim
};

// Throws usage_error on shape/config disagreement.
void validate_forward_input(const ForwardInput& in, const ModelConfig& cfg);

// Model parameters registered on a tape, addressable by registry name.
struct TapeParams {
  std::vector<ad::Var> vars;        // registry order, aligned with shapes
  std::vector<std::string> names;   // registry order
  Mat rfm_omegas;

  ad::Var at(const std::string& name) const;  // throws usage_error if absent
};

// Registers every trainable array on the graph (as params when trainable,
// else as constants). rfm_omegas ride along unregistered: they are frozen.
TapeParams register_params(ad::Graph& g, const ModelParams& p, const ModelConfig& cfg,
                           bool trainable);

// One residual block: v + MLP(LN(w)), where w is the attention output over
// the triplet streams (or the pointwise mix MLP when attention is none).
// phi holds the precomputed position features (linear variant only).
ad::Var tape_layer(ad::Graph& g, const TapeParams& tp, int layer, ad::Var v, ad::Var u_lift,
                   ad::Var dx_lift, const Mat& x, const Mat& phi, const ModelConfig& cfg);

// Full network on the tape; returns u_hat = u_interp + delta_u and optionally
// the correction itself.
ad::Var tape_forward(ad::Graph& g, const TapeParams& tp, const ForwardInput& in,
                     const ModelConfig& cfg, ad::Var* delta_u = nullptr);

struct ForwardResult {
  Mat delta_u;
  Mat u_hat;
};

ForwardResult forward(const ForwardInput& in, const ModelParams& p, const ModelConfig& cfg);

// One residual block evaluated eagerly (inference tape underneath).
Mat operator_layer(const Mat& v, const Mat& u_lift, const Mat& dx_lift, const Mat& x,
                   const ModelParams& p, const ModelConfig& cfg, int layer);

}  // namespace refop::model
