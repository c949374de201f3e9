#include "refop/model.hpp"

#include <cmath>

namespace refop::model {

const char* attention_name(Attention a) {
  switch (a) {
    case Attention::quadratic: return "quadratic";
    case Attention::linear: return "linear";
    case Attention::none: return "none";
  }
  return "?";
}

Attention attention_from_name(const std::string& name) {
  if (name == "quadratic") return Attention::quadratic;
  if (name == "linear") return Attention::linear;
  if (name == "none") return Attention::none;
  throw data_error("unknown attention variant: " + name);
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.hidden_dim < 1) throw usage_error("hidden_dim must be positive");
  if (cfg.layers < 1) throw usage_error("layers must be >= 1");
  if (cfg.heads < 1 || cfg.hidden_dim % cfg.heads != 0)
    throw usage_error("hidden_dim must be divisible by heads");
  if (std::isnan(cfg.gamma) || cfg.gamma <= 0.0) throw usage_error("gamma must be positive or inf");
  if (cfg.rfm_features < 1) throw usage_error("rfm_features must be >= 1");
  if (cfg.target_dim < 1) throw usage_error("target_dim must be >= 1");
  if (cfg.spatial_dim < 1) throw usage_error("spatial_dim must be >= 1");
  if (cfg.param_dim < 1) throw usage_error("param_dim must be >= 1");
  if (cfg.mlp_hidden < 1) throw usage_error("mlp_hidden must be >= 1");
}

namespace {

void push_mlp(std::vector<ShapeSpec>& out, const std::string& prefix, int in, int hidden, int o) {
  out.push_back({prefix + ".w1", in, hidden});
  out.push_back({prefix + ".b1", 1, hidden});
  out.push_back({prefix + ".w2", hidden, o});
  out.push_back({prefix + ".b2", 1, o});
}

}  // namespace

std::vector<ShapeSpec> param_shapes(const ModelConfig& cfg) {
  const int s = cfg.hidden_dim;
  std::vector<ShapeSpec> out;
  push_mlp(out, "enc.P", cfg.spatial_dim + cfg.target_dim + cfg.param_dim, cfg.mlp_hidden, s);
  push_mlp(out, "lift.u", cfg.target_dim, cfg.mlp_hidden, s);
  push_mlp(out, "lift.dx", cfg.spatial_dim, cfg.mlp_hidden, s);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    if (cfg.attention == Attention::none) {
      push_mlp(out, p + ".mix", 3 * s, cfg.mlp_hidden, s);
    } else {
      out.push_back({p + ".wq", s, s});
      out.push_back({p + ".wk", s, s});
      out.push_back({p + ".wv1", s, s});
      out.push_back({p + ".wv2", s, s});
      out.push_back({p + ".wv3", s, s});
    }
    out.push_back({p + ".ln.g", 1, s});
    out.push_back({p + ".ln.b", 1, s});
    push_mlp(out, p + ".mlp", s, cfg.mlp_hidden, s);
  }
  push_mlp(out, "dec", s, cfg.mlp_hidden, cfg.target_dim);
  return out;
}

int ModelParams::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return int(i);
  return -1;
}

ModelParams init_params(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelParams p;
  Rng rng(seed_stream(cfg.seed, 0x1217, 0, 0));
  for (const auto& spec : param_shapes(cfg)) {
    Mat m = Mat::Zero(spec.rows, spec.cols);
    const bool bias = spec.name.size() >= 2 && spec.name[spec.name.size() - 2] == 'b';
    const bool ln = spec.name.find(".ln.") != std::string::npos;
    const bool dec_last = spec.name == "dec.w2" || spec.name == "dec.b2";
    if (ln) {
      if (spec.name.back() == 'g') m.setOnes();
    } else if (!bias && !dec_last) {
      const double scale = 1.0 / std::sqrt(double(spec.rows));
      for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
    }
    p.names.push_back(spec.name);
    p.values.push_back(std::move(m));
  }
  if (cfg.attention == Attention::linear) {
    const double sigma = std::sqrt(2.0) / cfg.gamma;  // 0 when gamma = inf
    Rng orng(seed_stream(cfg.seed, 0x0f3a, 0, 0));
    p.rfm_omegas = Mat::Zero(cfg.rfm_features, cfg.spatial_dim);
    for (int i = 0; i < p.rfm_omegas.rows(); ++i)
      for (int j = 0; j < p.rfm_omegas.cols(); ++j) p.rfm_omegas(i, j) = sigma * orng.normal();
  }
  return p;
}

namespace {

Mat gelu_apply(const Mat& x) {
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  return x.unaryExpr([&](double t) { return 0.5 * t * (1.0 + std::erf(t * inv_sqrt2)); });
}

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw numeric_error(std::string("non-finite ") + what);
}

void require_attention_shapes(const Mat& q, const Mat& k, const Mat& v1, const Mat& v2,
                              const Mat& v3, int heads) {
  const auto s = q.cols();
  if (heads < 1 || s % heads != 0) throw usage_error("width must be divisible by heads");
  if (k.cols() != s || v1.cols() != s || v2.cols() != s || v3.cols() != s)
    throw usage_error("attention stream widths disagree");
  if (v1.rows() != k.rows() || v2.rows() != k.rows() || v3.rows() != k.rows())
    throw usage_error("key/value row counts disagree");
  require_finite(q, "query");
  require_finite(k, "key");
  require_finite(v1, "value stream");
  require_finite(v2, "value stream");
  require_finite(v3, "value stream");
}

}  // namespace

Mat mlp_apply(const Mat& x, const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2) {
  Mat h = x * w1;
  h.rowwise() += b1.row(0);
  h = gelu_apply(h);
  Mat o = h * w2;
  o.rowwise() += b2.row(0);
  return o;
}

Mat encode_geometry(const std::vector<Eigen::RowVectorXd>& param_diffs, const Mat& x, const Mat& u,
                    const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2) {
  if (param_diffs.empty()) throw usage_error("encode_geometry: no components");
  if (x.rows() != u.rows()) throw usage_error("encode_geometry: row counts disagree");
  const Eigen::Index pd = w1.rows() - x.cols() - u.cols();
  if (pd < 1) throw usage_error("encode_geometry: param_dim mismatch");
  Mat cat(x.rows(), w1.rows());
  Mat out = Mat::Zero(x.rows(), w2.cols());
  for (const auto& diff : param_diffs) {
    if (diff.size() != pd) throw usage_error("encode_geometry: param_dim mismatch");
    cat << x, u, diff.replicate(x.rows(), 1);
    out += mlp_apply(cat, w1, b1, w2, b2);
  }
  return out;
}

Mat daca_quadratic(const Mat& q, const Mat& k, const Mat& v1, const Mat& v2, const Mat& v3,
                   const Mat& pos_q, const Mat& pos_k, double gamma, int heads) {
  require_attention_shapes(q, k, v1, v2, v3, heads);
  if (std::isnan(gamma) || gamma <= 0.0) throw usage_error("gamma must be positive or inf");
  if (pos_q.rows() != q.rows() || pos_k.rows() != k.rows() || pos_q.cols() != pos_k.cols())
    throw usage_error("position shapes disagree");
  require_finite(pos_q, "position");
  require_finite(pos_k, "position");
  return ad::daca_quadratic_eval(q, k, v1 + v2 + v3, pos_q, pos_k, gamma, heads);
}

Mat rfm_features(const Mat& x, const Mat& omegas) {
  const Eigen::Index d = omegas.rows();
  Mat proj = x * omegas.transpose();  // N x D
  Mat out(x.rows(), 2 * d);
  out.leftCols(d) = proj.array().sin();
  out.rightCols(d) = proj.array().cos();
  out *= 1.0 / std::sqrt(double(d));
  return out;
}

Mat daca_linear(const Mat& q, const Mat& k, const Mat& v1, const Mat& v2, const Mat& v3,
                const Mat& phi_q, const Mat& phi_k, int heads) {
  require_attention_shapes(q, k, v1, v2, v3, heads);
  if (phi_q.rows() != q.rows() || phi_k.rows() != k.rows() || phi_q.cols() != phi_k.cols())
    throw usage_error("feature map shapes disagree");
  if ((q.array() < 0.0).any() || (k.array() < 0.0).any())
    throw usage_error("linear attention needs nonnegative q, k (apply the feature map)");
  return ad::daca_linear_eval(q, k, v1 + v2 + v3, phi_q, phi_k, heads);
}

void validate_forward_input(const ForwardInput& in, const ModelConfig& cfg) {
  const Eigen::Index n = in.query_nodes.rows();
  if (n < 1) throw usage_error("forward: empty query set");
  if (in.query_nodes.cols() != cfg.spatial_dim || in.shifts.cols() != cfg.spatial_dim)
    throw usage_error("forward: spatial_dim mismatch");
  if (in.u_interp.rows() != n || in.shifts.rows() != n)
    throw usage_error("forward: row counts disagree");
  if (in.u_interp.cols() != cfg.target_dim) throw usage_error("forward: target_dim mismatch");
  if (in.param_diffs.empty()) throw usage_error("forward: no components");
  for (const auto& d : in.param_diffs)
    if (d.size() != cfg.param_dim) throw usage_error("forward: param_dim mismatch");
}

ad::Var TapeParams::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return vars[i];
  throw usage_error("unknown parameter: " + name);
}

TapeParams register_params(ad::Graph& g, const ModelParams& p, const ModelConfig& cfg,
                           bool trainable) {
  const auto shapes = param_shapes(cfg);
  if (p.names.size() != shapes.size()) throw usage_error("parameter set does not match config");
  TapeParams tp;
  tp.rfm_omegas = p.rfm_omegas;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (p.names[i] != shapes[i].name || p.values[i].rows() != shapes[i].rows ||
        p.values[i].cols() != shapes[i].cols)
      throw usage_error("parameter set does not match config");
    tp.names.push_back(p.names[i]);
    tp.vars.push_back(trainable ? g.param(p.values[i]) : g.input(p.values[i]));
  }
  return tp;
}

namespace {

ad::Var tape_mlp(ad::Graph& g, ad::Var x, const TapeParams& tp, const std::string& prefix) {
  ad::Var h = g.gelu(g.add_rowvec(g.matmul(x, tp.at(prefix + ".w1")), tp.at(prefix + ".b1")));
  return g.add_rowvec(g.matmul(h, tp.at(prefix + ".w2")), tp.at(prefix + ".b2"));
}

}  // namespace

ad::Var tape_layer(ad::Graph& g, const TapeParams& tp, int layer, ad::Var v, ad::Var u_lift,
                   ad::Var dx_lift, const Mat& x, const Mat& phi, const ModelConfig& cfg) {
  const std::string pre = "layer" + std::to_string(layer) + ".";
  ad::Var w;
  if (cfg.attention == Attention::none) {
    w = tape_mlp(g, g.concat_cols(v, u_lift, dx_lift), tp, pre + "mix");
  } else {
    ad::Var q = g.matmul(v, tp.at(pre + "wq"));
    ad::Var k = g.matmul(v, tp.at(pre + "wk"));
    ad::Var vs = g.add(g.add(g.matmul(v, tp.at(pre + "wv1")), g.matmul(u_lift, tp.at(pre + "wv2"))),
                       g.matmul(dx_lift, tp.at(pre + "wv3")));
    w = cfg.attention == Attention::quadratic
            ? g.daca_quadratic(q, k, vs, x, x, cfg.gamma, cfg.heads)
            : g.daca_linear(q, k, vs, phi, phi, cfg.heads);
  }
  ad::Var ln = g.layernorm(w, tp.at(pre + "ln.g"), tp.at(pre + "ln.b"));
  return g.add(v, tape_mlp(g, ln, tp, pre + "mlp"));
}

ad::Var tape_forward(ad::Graph& g, const TapeParams& tp, const ForwardInput& in,
                     const ModelConfig& cfg, ad::Var* delta_u) {
  validate_forward_input(in, cfg);
  const Eigen::Index n = in.query_nodes.rows();
  ad::Var v{-1};
  for (std::size_t i = 0; i < in.param_diffs.size(); ++i) {
    Mat cat(n, cfg.spatial_dim + cfg.target_dim + cfg.param_dim);
    cat << in.query_nodes, in.u_interp, in.param_diffs[i].replicate(n, 1);
    ad::Var e = tape_mlp(g, g.input(cat), tp, "enc.P");
    v = i == 0 ? e : g.add(v, e);
  }
  ad::Var u_lift = tape_mlp(g, g.input(in.u_interp), tp, "lift.u");
  ad::Var dx_lift = tape_mlp(g, g.input(in.shifts), tp, "lift.dx");
  Mat phi;
  if (cfg.attention == Attention::linear) phi = rfm_features(in.query_nodes, tp.rfm_omegas);
  for (int l = 0; l < cfg.layers; ++l)
    v = tape_layer(g, tp, l, v, u_lift, dx_lift, in.query_nodes, phi, cfg);
  ad::Var delta = tape_mlp(g, v, tp, "dec");
  if (delta_u) *delta_u = delta;
  return g.add(g.input(in.u_interp), delta);
}

ForwardResult forward(const ForwardInput& in, const ModelParams& p, const ModelConfig& cfg) {
  ad::Graph g(false);
  TapeParams tp = register_params(g, p, cfg, false);
  ad::Var delta{-1};
  ad::Var uh = tape_forward(g, tp, in, cfg, &delta);
  return {g.val(delta), g.val(uh)};
}

Mat operator_layer(const Mat& v, const Mat& u_lift, const Mat& dx_lift, const Mat& x,
                   const ModelParams& p, const ModelConfig& cfg, int layer) {
  if (layer < 0 || layer >= cfg.layers) throw usage_error("layer index out of range");
  if (v.rows() != u_lift.rows() || v.rows() != dx_lift.rows() || v.rows() != x.rows())
    throw usage_error("operator_layer: row counts disagree");
  ad::Graph g(false);
  TapeParams tp = register_params(g, p, cfg, false);
  Mat phi;
  if (cfg.attention == Attention::linear) phi = rfm_features(x, tp.rfm_omegas);
  return g.val(
      tape_layer(g, tp, layer, g.input(v), g.input(u_lift), g.input(dx_lift), x, phi, cfg));
}

}  // namespace refop::model
