#include "refop/autodiff.hpp"

#include <cmath>

namespace refop::ad {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kAlphaFloor = 1e-12;
constexpr double kInvSqrt2 = 0.70710678118654752;
constexpr double kInvSqrt2Pi = 0.39894228040143268;

using Vec = Eigen::VectorXd;

double gelu_val(double t) { return 0.5 * t * (1.0 + std::erf(t * kInvSqrt2)); }

double gelu_deriv(double t) {
  return 0.5 * (1.0 + std::erf(t * kInvSqrt2)) + t * std::exp(-0.5 * t * t) * kInvSqrt2Pi;
}

void check_attention_shapes(const Mat& q, const Mat& k, const Mat& vsum, int heads) {
  if (q.cols() != k.cols() || k.rows() != vsum.rows() || vsum.cols() != q.cols())
    throw data_error("attention: shape mismatch");
  if (heads < 1 || q.cols() % heads != 0)
    throw data_error("attention: width not divisible by heads");
  if (q.rows() < 1 || k.rows() < 1) throw data_error("attention: empty operand");
}

Mat pairwise_gaussian(const Mat& pos_q, const Mat& pos_k, double gamma) {
  const auto nq = pos_q.rows(), nk = pos_k.rows();
  Mat h(nq, nk);
  const double inv_g2 = 1.0 / (gamma * gamma);
  for (Eigen::Index a = 0; a < nq; ++a)
    for (Eigen::Index i = 0; i < nk; ++i)
      h(a, i) = -(pos_q.row(a) - pos_k.row(i)).squaredNorm() * inv_g2;
  h = h.array().exp().matrix();
  return h;
}

struct QuadStash {
  std::vector<Mat> b;  // per head
  Mat r;               // rows x heads, pre-floor row sums of b
};

Mat quad_forward(const Mat& q, const Mat& k, const Mat& vsum, const Mat& pos_q, const Mat& pos_k,
                 double gamma, int heads, QuadStash* st) {
  check_attention_shapes(q, k, vsum, heads);
  if (std::isnan(gamma) || gamma <= 0.0)
    throw usage_error("attention: gamma must be positive or inf");
  if (pos_q.rows() != q.rows() || pos_k.rows() != k.rows() || pos_q.cols() != pos_k.cols())
    throw data_error("attention: position shape mismatch");
  const int s = int(q.cols()), dh = s / heads;
  const double sc = 1.0 / std::sqrt(double(dh));
  Mat h;  // stays empty when gamma = inf
  if (!std::isinf(gamma)) h = pairwise_gaussian(pos_q, pos_k, gamma);
  Mat out(q.rows(), s);
  if (st) st->r.resize(q.rows(), heads);
  for (int hd = 0; hd < heads; ++hd) {
    auto qh = q.middleCols(hd * dh, dh);
    auto kh = k.middleCols(hd * dh, dh);
    auto vh = vsum.middleCols(hd * dh, dh);
    Mat b = (qh * kh.transpose()) * sc;
    Vec rowmax = b.rowwise().maxCoeff();
    b = (b.colwise() - rowmax).array().exp().matrix();
    if (h.size() > 0) b.array() *= h.array();
    Vec r = b.rowwise().sum();
    Vec rc = (3.0 * r).cwiseMax(kAlphaFloor);
    out.middleCols(hd * dh, dh) = ((b * vh).array().colwise() / rc.array()).matrix();
    if (st) {
      st->r.col(hd) = r;
      st->b.push_back(std::move(b));
    }
  }
  return out;
}

struct LinStash {
  Mat u;                    // rows x s, per-head normalizer contractions
  Mat r;                    // rows x heads
  std::vector<Mat> s_mats;  // head-major: index hd*dh + m
};

Mat lin_core(const Mat& qt, const Mat& kt, const Mat& vsum, const Mat& phi_q, const Mat& phi_k,
             int heads, LinStash* st) {
  check_attention_shapes(qt, kt, vsum, heads);
  if (phi_q.rows() != qt.rows() || phi_k.rows() != kt.rows() || phi_q.cols() != phi_k.cols())
    throw data_error("attention: feature map shape mismatch");
  const int s = int(qt.cols()), dh = s / heads;
  Mat out(qt.rows(), s);
  if (st) {
    st->u.resize(qt.rows(), s);
    st->r.resize(qt.rows(), heads);
  }
  for (int hd = 0; hd < heads; ++hd) {
    auto qh = qt.middleCols(hd * dh, dh);
    auto kh = kt.middleCols(hd * dh, dh);
    auto vh = vsum.middleCols(hd * dh, dh);
    Mat u = phi_q * (kh.transpose() * phi_k).transpose();  // rows x dh
    Vec r = (3.0 * (qh.array() * u.array()).rowwise().sum()).matrix();
    if ((r.array() < kAlphaFloor).any()) throw numeric_error("daca_linear: normalizer below 1e-12");
    Mat w = Mat::Zero(qt.rows(), dh);
    for (int m = 0; m < dh; ++m) {
      Mat scaled = (phi_k.array().colwise() * kh.col(m).array()).matrix();
      Mat sm = phi_q * (scaled.transpose() * vh);  // rows x dh
      w.array() += sm.array().colwise() * qh.col(m).array();
      if (st) st->s_mats.push_back(std::move(sm));
    }
    out.middleCols(hd * dh, dh) = (w.array().colwise() / r.array()).matrix();
    if (st) {
      st->u.middleCols(hd * dh, dh) = u;
      st->r.col(hd) = r;
    }
  }
  return out;
}

// Per head: queries shifted by their row max, keys by the block max, both
// exponentiated. The normalized output is invariant to these scalings, so
// treating the shifts as constants in backward is exact, not an approximation.
Mat exp_shift(const Mat& x, int heads, bool per_row) {
  const int dh = int(x.cols()) / heads;
  Mat out(x.rows(), x.cols());
  for (int hd = 0; hd < heads; ++hd) {
    auto xh = x.middleCols(hd * dh, dh);
    if (per_row) {
      Vec rowmax = xh.rowwise().maxCoeff();
      out.middleCols(hd * dh, dh) = (xh.colwise() - rowmax).array().exp().matrix();
    } else {
      out.middleCols(hd * dh, dh) = (xh.array() - xh.maxCoeff()).exp().matrix();
    }
  }
  return out;
}

}  // namespace

Mat daca_quadratic_eval(const Mat& q, const Mat& k, const Mat& vsum, const Mat& pos_q,
                        const Mat& pos_k, double gamma, int heads) {
  return quad_forward(q, k, vsum, pos_q, pos_k, gamma, heads, nullptr);
}

Mat daca_linear_eval(const Mat& q, const Mat& k, const Mat& vsum, const Mat& phi_q,
                     const Mat& phi_k, int heads) {
  return lin_core(q, k, vsum, phi_q, phi_k, heads, nullptr);
}

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size()) - 1};
}

Graph::Node& Graph::at(Var x) {
  if (x.id < 0 || x.id >= int(nodes_.size())) throw data_error("graph: bad var");
  return nodes_[std::size_t(x.id)];
}

const Graph::Node& Graph::at(Var x) const {
  if (x.id < 0 || x.id >= int(nodes_.size())) throw data_error("graph: bad var");
  return nodes_[std::size_t(x.id)];
}

Mat& Graph::acc(int id) {
  Node& n = nodes_[std::size_t(id)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

Var Graph::input(Mat v) {
  Node n;
  n.op = Op::input;
  n.val = std::move(v);
  return push(std::move(n));
}

Var Graph::param(Mat v) {
  Node n;
  n.op = Op::param;
  n.val = std::move(v);
  n.needs_grad = true;
  return push(std::move(n));
}

const Mat& Graph::val(Var x) const { return at(x).val; }

const Mat& Graph::grad(Var x) const {
  const Node& n = at(x);
  if (n.grad.size() == 0 && n.val.size() != 0)
    const_cast<Node&>(n).grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

Var Graph::matmul(Var a, Var b) {
  const Mat& x = val(a);
  const Mat& y = val(b);
  if (x.cols() != y.rows()) throw data_error("matmul: inner dimension mismatch");
  Node n;
  n.op = Op::matmul;
  n.a = {a.id, b.id, -1};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.val = x * y;
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Mat& x = val(a);
  const Mat& y = val(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw data_error("add: shape mismatch");
  Node n;
  n.op = Op::add;
  n.a = {a.id, b.id, -1};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.val = x + y;
  return push(std::move(n));
}

Var Graph::add_rowvec(Var a, Var b) {
  const Mat& x = val(a);
  const Mat& y = val(b);
  if (y.rows() != 1 || y.cols() != x.cols()) throw data_error("add_rowvec: bias shape mismatch");
  Node n;
  n.op = Op::add_rowvec;
  n.a = {a.id, b.id, -1};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  n.val = x.rowwise() + y.row(0);
  return push(std::move(n));
}

Var Graph::scale(Var a, double c) {
  Node n;
  n.op = Op::scale_op;
  n.a = {a.id, -1, -1};
  n.needs_grad = at(a).needs_grad;
  n.s0 = c;
  n.val = c * val(a);
  return push(std::move(n));
}

Var Graph::concat_cols(Var a, Var b, Var c) {
  const Mat& x = val(a);
  const Mat& y = val(b);
  const Mat& z = val(c);
  if (x.rows() != y.rows() || x.rows() != z.rows()) throw data_error("concat_cols: row mismatch");
  Node n;
  n.op = Op::concat3;
  n.a = {a.id, b.id, c.id};
  n.needs_grad = at(a).needs_grad || at(b).needs_grad || at(c).needs_grad;
  n.val.resize(x.rows(), x.cols() + y.cols() + z.cols());
  n.val << x, y, z;
  return push(std::move(n));
}

Var Graph::gelu(Var a) {
  Node n;
  n.op = Op::gelu_op;
  n.a = {a.id, -1, -1};
  n.needs_grad = at(a).needs_grad;
  n.val = val(a).unaryExpr([](double t) { return gelu_val(t); });
  return push(std::move(n));
}

Var Graph::layernorm(Var x, Var g, Var b) {
  const Mat& v = val(x);
  const Mat& gv = val(g);
  const Mat& bv = val(b);
  if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != v.cols() || bv.cols() != v.cols())
    throw data_error("layernorm: affine shape mismatch");
  Node n;
  n.op = Op::layernorm_op;
  n.a = {x.id, g.id, b.id};
  n.needs_grad = at(x).needs_grad || at(g).needs_grad || at(b).needs_grad;
  Vec mu = v.rowwise().mean();
  Mat xc = v.colwise() - mu;
  Vec istd = (xc.array().square().rowwise().mean() + kLnEps).sqrt().inverse().matrix();
  Mat xhat = (xc.array().colwise() * istd.array()).matrix();
  n.val = ((xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array()).matrix();
  n.aux.push_back(std::move(xhat));
  n.aux.push_back(Mat(istd));
  return push(std::move(n));
}

Var Graph::daca_quadratic(Var q, Var k, Var vsum, const Mat& pos_q, const Mat& pos_k, double gamma,
                          int heads) {
  Node n;
  n.op = Op::daca_quad;
  n.a = {q.id, k.id, vsum.id};
  n.needs_grad = at(q).needs_grad || at(k).needs_grad || at(vsum).needs_grad;
  n.s0 = gamma;
  n.heads = heads;
  QuadStash st;
  const bool keep = training_ && n.needs_grad;
  n.val = quad_forward(val(q), val(k), val(vsum), pos_q, pos_k, gamma, heads, keep ? &st : nullptr);
  if (keep) {
    for (auto& b : st.b) n.aux.push_back(std::move(b));
    n.aux.push_back(std::move(st.r));
  }
  return push(std::move(n));
}

Var Graph::daca_linear(Var q, Var k, Var vsum, const Mat& phi_q, const Mat& phi_k, int heads) {
  check_attention_shapes(val(q), val(k), val(vsum), heads);
  Node n;
  n.op = Op::daca_lin;
  n.a = {q.id, k.id, vsum.id};
  n.needs_grad = at(q).needs_grad || at(k).needs_grad || at(vsum).needs_grad;
  n.heads = heads;
  Mat qt = exp_shift(val(q), heads, true);
  Mat kt = exp_shift(val(k), heads, false);
  LinStash st;
  const bool keep = training_ && n.needs_grad;
  n.val = lin_core(qt, kt, val(vsum), phi_q, phi_k, heads, keep ? &st : nullptr);
  if (keep) {
    n.aux.push_back(std::move(qt));
    n.aux.push_back(std::move(kt));
    n.aux.push_back(Mat(phi_q));
    n.aux.push_back(Mat(phi_k));
    n.aux.push_back(std::move(st.u));
    n.aux.push_back(std::move(st.r));
    for (auto& m : st.s_mats) n.aux.push_back(std::move(m));
  }
  return push(std::move(n));
}

Var Graph::pnorm_loss(Var u_hat, const Mat& target, int p) {
  if (p != 1 && p != 2) throw usage_error("loss: p must be 1 or 2");
  const Mat& u = val(u_hat);
  if (u.rows() != target.rows() || u.cols() != target.cols())
    throw data_error("loss: shape mismatch");
  Node n;
  n.op = Op::pnorm;
  n.a = {u_hat.id, -1, -1};
  n.needs_grad = at(u_hat).needs_grad;
  n.s0 = double(p);
  Mat diff = u - target;
  const double v =
      p == 2 ? diff.rowwise().norm().mean() : diff.array().abs().rowwise().sum().mean();
  n.val = Mat::Constant(1, 1, v);
  n.aux.push_back(std::move(diff));
  return push(std::move(n));
}

void Graph::backward(Var root, double seed) {
  if (!training_) throw usage_error("graph: backward on an inference graph");
  Node& r = at(root);
  if (r.val.rows() != 1 || r.val.cols() != 1) throw data_error("backward: root must be scalar");
  if (!r.needs_grad) return;
  acc(root.id)(0, 0) += seed;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[std::size_t(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    const Mat& gy = n.grad;
    switch (n.op) {
      case Op::input:
      case Op::param:
        break;
      case Op::matmul: {
        const Node& a = nodes_[std::size_t(n.a[0])];
        const Node& b = nodes_[std::size_t(n.a[1])];
        if (a.needs_grad) acc(n.a[0]).noalias() += gy * b.val.transpose();
        if (b.needs_grad) acc(n.a[1]).noalias() += a.val.transpose() * gy;
        break;
      }
      case Op::add: {
        if (nodes_[std::size_t(n.a[0])].needs_grad) acc(n.a[0]) += gy;
        if (nodes_[std::size_t(n.a[1])].needs_grad) acc(n.a[1]) += gy;
        break;
      }
      case Op::add_rowvec: {
        if (nodes_[std::size_t(n.a[0])].needs_grad) acc(n.a[0]) += gy;
        if (nodes_[std::size_t(n.a[1])].needs_grad) acc(n.a[1]) += gy.colwise().sum();
        break;
      }
      case Op::scale_op: {
        if (nodes_[std::size_t(n.a[0])].needs_grad) acc(n.a[0]) += n.s0 * gy;
        break;
      }
      case Op::concat3: {
        Eigen::Index off = 0;
        for (int i = 0; i < 3; ++i) {
          const Node& a = nodes_[std::size_t(n.a[i])];
          if (a.needs_grad) acc(n.a[i]) += gy.middleCols(off, a.val.cols());
          off += a.val.cols();
        }
        break;
      }
      case Op::gelu_op: {
        const Node& a = nodes_[std::size_t(n.a[0])];
        if (a.needs_grad)
          acc(n.a[0]).array() +=
              gy.array() * a.val.unaryExpr([](double t) { return gelu_deriv(t); }).array();
        break;
      }
      case Op::layernorm_op: {
        const Mat& xhat = n.aux[0];
        const Vec istd = n.aux[1];
        const Node& g = nodes_[std::size_t(n.a[1])];
        Mat dxhat = (gy.array().rowwise() * g.val.row(0).array()).matrix();
        if (nodes_[std::size_t(n.a[0])].needs_grad) {
          Vec m1 = dxhat.rowwise().mean();
          Vec m2 = ((dxhat.array() * xhat.array()).rowwise().mean()).matrix();
          acc(n.a[0]).array() +=
              ((dxhat.colwise() - m1).array() - xhat.array().colwise() * m2.array()).colwise() *
              istd.array();
        }
        if (g.needs_grad) acc(n.a[1]) += (gy.array() * xhat.array()).colwise().sum().matrix();
        if (nodes_[std::size_t(n.a[2])].needs_grad) acc(n.a[2]) += gy.colwise().sum();
        break;
      }
      case Op::daca_quad: {
        const Node& qn = nodes_[std::size_t(n.a[0])];
        const Node& kn = nodes_[std::size_t(n.a[1])];
        const Node& vn = nodes_[std::size_t(n.a[2])];
        const int heads = n.heads, s = int(qn.val.cols()), dh = s / heads;
        const double sc = 1.0 / std::sqrt(double(dh));
        const Mat& r_all = n.aux[std::size_t(heads)];
        for (int hd = 0; hd < heads; ++hd) {
          const Mat& b = n.aux[std::size_t(hd)];
          Vec r = r_all.col(hd);
          Vec rc = (3.0 * r).cwiseMax(kAlphaFloor);
          auto gw = gy.middleCols(hd * dh, dh);
          auto w = n.val.middleCols(hd * dh, dh);
          auto vh = vn.val.middleCols(hd * dh, dh);
          Mat gnum = (gw.array().colwise() / rc.array()).matrix();
          Vec c = ((gw.array() * w.array()).rowwise().sum()).matrix();
          for (Eigen::Index a2 = 0; a2 < c.size(); ++a2)
            c(a2) = 3.0 * r(a2) > kAlphaFloor ? 3.0 * c(a2) / rc(a2) : 0.0;
          if (vn.needs_grad) acc(n.a[2]).middleCols(hd * dh, dh).noalias() += b.transpose() * gnum;
          if (qn.needs_grad || kn.needs_grad) {
            Mat db = gnum * vh.transpose();
            db.colwise() -= c;
            db.array() *= b.array();
            if (qn.needs_grad)
              acc(n.a[0]).middleCols(hd * dh, dh).noalias() +=
                  sc * (db * kn.val.middleCols(hd * dh, dh));
            if (kn.needs_grad)
              acc(n.a[1]).middleCols(hd * dh, dh).noalias() +=
                  sc * (db.transpose() * qn.val.middleCols(hd * dh, dh));
          }
        }
        break;
      }
      case Op::daca_lin: {
        const Node& qn = nodes_[std::size_t(n.a[0])];
        const Node& kn = nodes_[std::size_t(n.a[1])];
        const Node& vn = nodes_[std::size_t(n.a[2])];
        const int heads = n.heads, s = int(qn.val.cols()), dh = s / heads;
        const Mat& qt = n.aux[0];
        const Mat& kt = n.aux[1];
        const Mat& phi_q = n.aux[2];
        const Mat& phi_k = n.aux[3];
        const Mat& u_all = n.aux[4];
        const Mat& r_all = n.aux[5];
        for (int hd = 0; hd < heads; ++hd) {
          auto qh = qt.middleCols(hd * dh, dh);
          auto kh = kt.middleCols(hd * dh, dh);
          auto vh = vn.val.middleCols(hd * dh, dh);
          auto u = u_all.middleCols(hd * dh, dh);
          Vec r = r_all.col(hd);
          auto gw = gy.middleCols(hd * dh, dh);
          auto w = n.val.middleCols(hd * dh, dh);
          Mat g = (gw.array().colwise() / r.array()).matrix();
          Vec c = (((gw.array() * w.array()).rowwise().sum()) / r.array()).matrix();
          Mat dqt = Mat::Zero(qt.rows(), dh);
          Mat dkt = Mat::Zero(kt.rows(), dh);
          for (int m = 0; m < dh; ++m) {
            const Mat& sm = n.aux[std::size_t(6 + hd * dh + m)];
            dqt.col(m) = ((g.array() * sm.array()).rowwise().sum()).matrix();
            Mat scaled = (phi_q.array().colwise() * qh.col(m).array()).matrix();
            Mat spm = phi_k * (scaled.transpose() * g);  // keys x dh
            if (vn.needs_grad)
              acc(n.a[2]).middleCols(hd * dh, dh).array() +=
                  spm.array().colwise() * kh.col(m).array();
            dkt.col(m) = ((spm.array() * vh.array()).rowwise().sum()).matrix();
            Vec tm = phi_q.transpose() * (c.array() * qh.col(m).array()).matrix();
            dkt.col(m).noalias() -= 3.0 * (phi_k * tm);
          }
          dqt.noalias() -= 3.0 * (u.array().colwise() * c.array()).matrix();
          if (qn.needs_grad)
            acc(n.a[0]).middleCols(hd * dh, dh).array() += dqt.array() * qh.array();
          if (kn.needs_grad)
            acc(n.a[1]).middleCols(hd * dh, dh).array() += dkt.array() * kh.array();
        }
        break;
      }
      case Op::pnorm: {
        const Node& a = nodes_[std::size_t(n.a[0])];
        if (!a.needs_grad) break;
        const Mat& diff = n.aux[0];
        const double g0 = gy(0, 0) / double(diff.rows());
        if (int(n.s0) == 2) {
          Vec norms = diff.rowwise().norm();
          Mat d = Mat::Zero(diff.rows(), diff.cols());
          for (Eigen::Index i = 0; i < diff.rows(); ++i)
            if (norms(i) > 0.0) d.row(i) = diff.row(i) / norms(i);
          acc(n.a[0]) += g0 * d;
        } else {
          acc(n.a[0]) += g0 * diff.unaryExpr([](double t) { return t > 0.0 ? 1.0 : (t < 0.0 ? -1.0 : 0.0); });
        }
        break;
      }
    }
  }
}

}  // namespace refop::ad
