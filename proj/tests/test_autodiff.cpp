#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "refop/autodiff.hpp"

using namespace refop;
using ad::Graph;
using ad::Var;

namespace {

Mat randn(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

Mat randpos(Rng& rng, int r, int c) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = 0.2 + rng.uniform();
  return m;
}

// central finite differences of a scalar functional, one matrix at a time
Mat fd_grad(const std::function<double()>& f, Mat& x, double h = 1e-6) {
  Mat g(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) {
      const double orig = x(i, j);
      x(i, j) = orig + h;
      const double fp = f();
      x(i, j) = orig - h;
      const double fm = f();
      x(i, j) = orig;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  return g;
}

double max_rel_err(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-7});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

}  // namespace

TEST_CASE("gelu matches frozen normal-CDF values") {
  Graph g;
  Mat x(1, 3);
  x << 0.0, 1.0, -1.0;
  Var v = g.gelu(g.input(x));
  CHECK(g.val(v)(0, 0) == 0.0);
  // x * Phi(x) with Phi(1) = 0.8413447460685429 from standard normal tables
  CHECK(g.val(v)(0, 1) == doctest::Approx(0.8413447460685429).epsilon(1e-15));
  CHECK(g.val(v)(0, 2) == doctest::Approx(-0.15865525393145707).epsilon(1e-13));
}

TEST_CASE("layernorm row oracle") {
  Graph g;
  Mat x(1, 4);
  x << 1.0, 2.0, 3.0, 4.0;
  Mat ones = Mat::Ones(1, 4), zeros = Mat::Zero(1, 4);
  Var y = g.layernorm(g.input(x), g.input(ones), g.input(zeros));
  const double istd = 1.0 / std::sqrt(1.25 + 1e-5);
  Mat want(1, 4);
  want << -1.5 * istd, -0.5 * istd, 0.5 * istd, 1.5 * istd;
  CHECK((g.val(y) - want).cwiseAbs().maxCoeff() < 1e-15);

  // affine shift and scale
  Mat g2 = Mat::Constant(1, 4, 2.0), b2 = Mat::Constant(1, 4, 1.0);
  Graph gr;
  Var y2 = gr.layernorm(gr.input(x), gr.input(g2), gr.input(b2));
  CHECK((gr.val(y2) - (2.0 * want.array() + 1.0).matrix()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("pnorm loss hand values") {
  Mat u(1, 2), t(1, 2);
  u << 3.0, 4.0;
  t << 0.0, 0.0;
  Graph g;
  CHECK(g.val(g.pnorm_loss(g.input(u), t, 2))(0, 0) == 5.0);
  CHECK(g.val(g.pnorm_loss(g.input(u), t, 1))(0, 0) == 7.0);

  Mat u2(2, 2), t2(2, 2);
  u2 << 3.0, 4.0, 0.0, 0.0;
  t2 << 0.0, 0.0, 0.0, 1.0;
  CHECK(g.val(g.pnorm_loss(g.input(u2), t2, 2))(0, 0) == 3.0);  // mean of 5 and 1
  CHECK_THROWS_AS(g.pnorm_loss(g.input(u), t2, 2), data_error);
  CHECK_THROWS_AS(g.pnorm_loss(g.input(u), t, 3), usage_error);
}

TEST_CASE("mlp chain gradients match finite differences") {
  Rng rng(42);
  Mat x = randn(rng, 4, 3);
  Mat target = randn(rng, 4, 2);
  Mat w1 = randn(rng, 3, 5, 0.5), b1 = randn(rng, 1, 5, 0.1);
  Mat lg = randpos(rng, 1, 5), lb = randn(rng, 1, 5, 0.1);
  Mat w2 = randn(rng, 5, 2, 0.5), b2 = randn(rng, 1, 2, 0.1);

  auto run = [&](Graph& g, std::vector<Var>& ps) {
    Var vx = g.input(x);
    ps = {g.param(w1), g.param(b1), g.param(lg), g.param(lb), g.param(w2), g.param(b2)};
    Var h = g.gelu(g.add_rowvec(g.matmul(vx, ps[0]), ps[1]));
    Var n = g.layernorm(h, ps[2], ps[3]);
    Var out = g.add_rowvec(g.matmul(n, ps[4]), ps[5]);
    return g.pnorm_loss(out, target, 2);
  };
  auto eval = [&]() {
    Graph g;
    std::vector<Var> ps;
    return g.val(run(g, ps))(0, 0);
  };

  Graph g;
  std::vector<Var> ps;
  Var loss = run(g, ps);
  g.backward(loss);

  Mat* mats[] = {&w1, &b1, &lg, &lb, &w2, &b2};
  for (int i = 0; i < 6; ++i) {
    Mat fd = fd_grad(eval, *mats[i]);
    CHECK(max_rel_err(g.grad(ps[std::size_t(i)]), fd) < 1e-6);
  }
}

TEST_CASE("concat and scale gradients match finite differences") {
  Rng rng(7);
  Mat a = randn(rng, 3, 2), b = randn(rng, 3, 2), c = randn(rng, 3, 3);
  Mat w = randn(rng, 7, 2, 0.4);
  Mat target = randn(rng, 3, 2);
  auto run = [&](Graph& g, std::vector<Var>& ps) {
    ps = {g.param(a), g.param(b), g.param(c), g.param(w)};
    Var cat = g.concat_cols(ps[0], ps[1], ps[2]);
    Var out = g.scale(g.matmul(cat, ps[3]), 1.75);
    return g.pnorm_loss(out, target, 2);
  };
  auto eval = [&]() {
    Graph g;
    std::vector<Var> ps;
    return g.val(run(g, ps))(0, 0);
  };
  Graph g;
  std::vector<Var> ps;
  g.backward(run(g, ps));
  Mat* mats[] = {&a, &b, &c, &w};
  for (int i = 0; i < 4; ++i) {
    Mat fd = fd_grad(eval, *mats[i]);
    CHECK(max_rel_err(g.grad(ps[std::size_t(i)]), fd) < 1e-6);
  }
}

TEST_CASE("p=1 loss gradient matches finite differences") {
  Rng rng(11);
  Mat x = randn(rng, 3, 2);
  Mat w = randn(rng, 2, 2);
  Mat target = Mat::Constant(3, 2, 5.0);  // keeps diff entries far from zero
  auto run = [&](Graph& g, Var& p) {
    p = g.param(w);
    return g.pnorm_loss(g.matmul(g.input(x), p), target, 1);
  };
  auto eval = [&]() {
    Graph g;
    Var p;
    return g.val(run(g, p))(0, 0);
  };
  Graph g;
  Var p;
  g.backward(run(g, p));
  CHECK(max_rel_err(g.grad(p), fd_grad(eval, w)) < 1e-6);
}

TEST_CASE("daca_quadratic single key returns the mean value stream") {
  Rng rng(3);
  for (int heads : {1, 2}) {
    Mat q = randn(rng, 3, 4), k = randn(rng, 1, 4), vsum = randn(rng, 1, 4);
    Mat pos_q = randn(rng, 3, 2), pos_k = randn(rng, 1, 2);
    Mat out = ad::daca_quadratic_eval(q, k, vsum, pos_q, pos_k, 0.7, heads);
    for (int a = 0; a < 3; ++a)
      CHECK((out.row(a) - vsum.row(0) / 3.0).cwiseAbs().maxCoeff() < 1e-14);
  }
}

namespace {

// direct double-loop evaluation of the quadratic form
Mat quad_brute(const Mat& q, const Mat& k, const Mat& vsum, const Mat& pos_q, const Mat& pos_k,
               double gamma, int heads) {
  const int n = int(q.rows()), mkeys = int(k.rows()), s = int(q.cols()), dh = s / heads;
  Mat out = Mat::Zero(n, s);
  for (int hd = 0; hd < heads; ++hd) {
    for (int a = 0; a < n; ++a) {
      double denom = 0.0;
      Eigen::RowVectorXd num = Eigen::RowVectorXd::Zero(dh);
      for (int i = 0; i < mkeys; ++i) {
        double sdot = 0.0;
        for (int d = 0; d < dh; ++d) sdot += q(a, hd * dh + d) * k(i, hd * dh + d);
        sdot /= std::sqrt(double(dh));
        double w = std::exp(sdot);
        if (!std::isinf(gamma)) {
          const double d2 = (pos_q.row(a) - pos_k.row(i)).squaredNorm();
          w *= std::exp(-d2 / (gamma * gamma));
        }
        denom += w;
        for (int d = 0; d < dh; ++d) num(d) += w * vsum(i, hd * dh + d);
      }
      for (int d = 0; d < dh; ++d) out(a, hd * dh + d) = num(d) / (3.0 * denom);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("daca_quadratic matches a brute-force double loop") {
  Rng rng(5);
  for (int heads : {1, 2}) {
    Mat q = randn(rng, 3, 4), k = randn(rng, 4, 4), vsum = randn(rng, 4, 4);
    Mat pos_q = randn(rng, 3, 2), pos_k = randn(rng, 4, 2);
    for (double gamma : {0.5, std::numeric_limits<double>::infinity()}) {
      Mat got = ad::daca_quadratic_eval(q, k, vsum, pos_q, pos_k, gamma, heads);
      Mat want = quad_brute(q, k, vsum, pos_q, pos_k, gamma, heads);
      CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("daca_quadratic with gamma=inf is softmax attention over the summed streams") {
  Rng rng(9);
  const int n = 5, mkeys = 6, s = 4;
  Mat q = randn(rng, n, s), k = randn(rng, mkeys, s), vsum = randn(rng, mkeys, s);
  Mat pos_q = randn(rng, n, 2), pos_k = randn(rng, mkeys, 2);
  Mat got = ad::daca_quadratic_eval(q, k, vsum, pos_q, pos_k,
                                    std::numeric_limits<double>::infinity(), 1);
  // plain softmax cross-attention, then divide by the three value streams
  Mat s_mat = q * k.transpose() / std::sqrt(double(s));
  Mat want(n, s);
  for (int a = 0; a < n; ++a) {
    Eigen::RowVectorXd e = (s_mat.row(a).array() - s_mat.row(a).maxCoeff()).exp();
    want.row(a) = (e / e.sum()) * vsum / 3.0;
  }
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("daca_quadratic is permutation-equivariant in the queries") {
  Rng rng(13);
  const int n = 6, s = 4;
  Mat q = randn(rng, n, s), k = randn(rng, 5, s), vsum = randn(rng, 5, s);
  Mat pos_q = randn(rng, n, 2), pos_k = randn(rng, 5, 2);
  Mat out = ad::daca_quadratic_eval(q, k, vsum, pos_q, pos_k, 0.4, 2);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Mat qp(n, s), pp(n, 2);
  for (int i = 0; i < n; ++i) {
    qp.row(i) = q.row(perm[std::size_t(i)]);
    pp.row(i) = pos_q.row(perm[std::size_t(i)]);
  }
  Mat outp = ad::daca_quadratic_eval(qp, k, vsum, pp, pos_k, 0.4, 2);
  for (int i = 0; i < n; ++i)
    CHECK((outp.row(i) - out.row(perm[std::size_t(i)])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("daca_quadratic gradients match finite differences") {
  Rng rng(17);
  const int n = 5, mkeys = 4, s = 4, heads = 2;
  // keep every attention row well inside the locality window: finite
  // differences at h=1e-6 cannot resolve the ~1e-8 gradients a fully
  // decayed row produces
  const double gamma = 1.0;
  Mat pos_q = randn(rng, n, 2, 0.4), pos_k = randn(rng, mkeys, 2, 0.4);
  Mat q = randn(rng, n, s), k = randn(rng, mkeys, s);
  Mat v1 = randn(rng, mkeys, s), v2 = randn(rng, mkeys, s), v3 = randn(rng, mkeys, s);
  Mat target = randn(rng, n, s);

  auto run = [&](Graph& g, std::vector<Var>& ps) {
    ps = {g.param(q), g.param(k), g.param(v1), g.param(v2), g.param(v3)};
    Var vsum = g.add(g.add(ps[2], ps[3]), ps[4]);
    Var out = g.daca_quadratic(ps[0], ps[1], vsum, pos_q, pos_k, gamma, heads);
    return g.pnorm_loss(out, target, 2);
  };
  auto eval = [&]() {
    Graph g;
    std::vector<Var> ps;
    return g.val(run(g, ps))(0, 0);
  };
  Graph g;
  std::vector<Var> ps;
  g.backward(run(g, ps));
  Mat* mats[] = {&q, &k, &v1, &v2, &v3};
  for (int i = 0; i < 5; ++i) {
    Mat fd = fd_grad(eval, *mats[i]);
    CHECK(max_rel_err(g.grad(ps[std::size_t(i)]), fd) < 1e-5);
  }
}

TEST_CASE("daca_quadratic gradients, no locality window") {
  Rng rng(29);
  const int n = 4, mkeys = 3, s = 4, heads = 2;
  Mat pos_q = randn(rng, n, 2), pos_k = randn(rng, mkeys, 2);
  Mat q = randn(rng, n, s), k = randn(rng, mkeys, s);
  Mat vsum = randn(rng, mkeys, s);
  Mat target = randn(rng, n, s);

  auto run = [&](Graph& g, std::vector<Var>& ps) {
    ps = {g.param(q), g.param(k), g.param(vsum)};
    Var out = g.daca_quadratic(ps[0], ps[1], ps[2], pos_q, pos_k,
                               std::numeric_limits<double>::infinity(), heads);
    return g.pnorm_loss(out, target, 2);
  };
  auto eval = [&]() {
    Graph g;
    std::vector<Var> ps;
    return g.val(run(g, ps))(0, 0);
  };
  Graph g;
  std::vector<Var> ps;
  g.backward(run(g, ps));
  Mat* mats[] = {&q, &k, &vsum};
  for (int i = 0; i < 3; ++i) {
    Mat fd = fd_grad(eval, *mats[i]);
    CHECK(max_rel_err(g.grad(ps[std::size_t(i)]), fd) < 1e-5);
  }
}

namespace {

// direct double-loop evaluation of the linear form (already-mapped q, k)
Mat lin_brute(const Mat& q, const Mat& k, const Mat& vsum, const Mat& phi_q, const Mat& phi_k,
              int heads) {
  const int n = int(q.rows()), mkeys = int(k.rows()), s = int(q.cols()), dh = s / heads;
  Mat out = Mat::Zero(n, s);
  for (int hd = 0; hd < heads; ++hd)
    for (int a = 0; a < n; ++a) {
      double denom = 0.0;
      Eigen::RowVectorXd num = Eigen::RowVectorXd::Zero(dh);
      for (int j = 0; j < mkeys; ++j) {
        double qk = 0.0;
        for (int d = 0; d < dh; ++d) qk += q(a, hd * dh + d) * k(j, hd * dh + d);
        const double ff = phi_q.row(a).dot(phi_k.row(j));
        denom += qk * ff;
        for (int d = 0; d < dh; ++d) num(d) += qk * ff * vsum(j, hd * dh + d);
      }
      for (int d = 0; d < dh; ++d) out(a, hd * dh + d) = num(d) / (3.0 * denom);
    }
  return out;
}

}  // namespace

TEST_CASE("daca_linear matches its quadratic-cost brute-force form") {
  Rng rng(23);
  for (int heads : {1, 2}) {
    const int n = 16, dfeat = 8, s = 4;
    Mat q(n, s), k(n, s);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < s; ++j) {
        q(i, j) = std::exp(rng.normal());
        k(i, j) = std::exp(rng.normal());
      }
    Mat vsum = randn(rng, n, s);
    Mat phi_q = randpos(rng, n, 2 * dfeat), phi_k = randpos(rng, n, 2 * dfeat);
    Mat got = ad::daca_linear_eval(q, k, vsum, phi_q, phi_k, heads);
    Mat want = lin_brute(q, k, vsum, phi_q, phi_k, heads);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("daca_linear single key returns the mean value stream") {
  Rng rng(29);
  Mat q(3, 4), k(1, 4);
  for (int i = 0; i < q.size(); ++i) q.data()[i] = std::exp(rng.normal());
  for (int i = 0; i < k.size(); ++i) k.data()[i] = std::exp(rng.normal());
  Mat vsum = randn(rng, 1, 4);
  Mat phi_q = randpos(rng, 3, 6), phi_k = randpos(rng, 1, 6);
  Mat out = ad::daca_linear_eval(q, k, vsum, phi_q, phi_k, 2);
  for (int a = 0; a < 3; ++a)
    CHECK((out.row(a) - vsum.row(0) / 3.0).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("daca_linear with constant feature maps is plain linear attention") {
  Rng rng(31);
  const int n = 6, s = 4;
  Mat q(n, s), k(n, s);
  for (int i = 0; i < q.size(); ++i) q.data()[i] = std::exp(rng.normal());
  for (int i = 0; i < k.size(); ++i) k.data()[i] = std::exp(rng.normal());
  Mat vsum = randn(rng, n, s);
  Mat ones = Mat::Ones(n, 4);
  Mat got = ad::daca_linear_eval(q, k, vsum, ones, ones, 1);
  Mat want(n, s);
  for (int a = 0; a < n; ++a) {
    Eigen::RowVectorXd num = Eigen::RowVectorXd::Zero(s);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double qk = q.row(a).dot(k.row(j)) * 4.0;  // phi dot = 4 with ones
      denom += qk;
      num += qk * vsum.row(j);
    }
    want.row(a) = num / (3.0 * denom);
  }
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("daca_linear rejects a degenerate normalizer") {
  Mat q = Mat::Ones(2, 2), k = Mat::Ones(2, 2), vsum = Mat::Ones(2, 2);
  Mat phi_q = Mat::Zero(2, 4), phi_k = Mat::Zero(2, 4);
  phi_q.col(0).setOnes();
  phi_k.col(1).setOnes();  // orthogonal feature rows: all weights vanish
  CHECK_THROWS_AS(ad::daca_linear_eval(q, k, vsum, phi_q, phi_k, 1), numeric_error);
}

TEST_CASE("daca_linear tape gradients match finite differences") {
  Rng rng(37);
  const int n = 6, mkeys = 5, s = 4, heads = 2, dfeat = 3;
  Mat phi_q = randpos(rng, n, 2 * dfeat), phi_k = randpos(rng, mkeys, 2 * dfeat);
  Mat q = randn(rng, n, s), k = randn(rng, mkeys, s);
  Mat v1 = randn(rng, mkeys, s), v2 = randn(rng, mkeys, s), v3 = randn(rng, mkeys, s);
  Mat target = randn(rng, n, s);

  auto run = [&](Graph& g, std::vector<Var>& ps) {
    ps = {g.param(q), g.param(k), g.param(v1), g.param(v2), g.param(v3)};
    Var vsum = g.add(g.add(ps[2], ps[3]), ps[4]);
    Var out = g.daca_linear(ps[0], ps[1], vsum, phi_q, phi_k, heads);
    return g.pnorm_loss(out, target, 2);
  };
  auto eval = [&]() {
    Graph g;
    std::vector<Var> ps;
    return g.val(run(g, ps))(0, 0);
  };
  Graph g;
  std::vector<Var> ps;
  g.backward(run(g, ps));
  Mat* mats[] = {&q, &k, &v1, &v2, &v3};
  for (int i = 0; i < 5; ++i) {
    Mat fd = fd_grad(eval, *mats[i]);
    CHECK(max_rel_err(g.grad(ps[std::size_t(i)]), fd) < 1e-5);
  }
}

TEST_CASE("backward is deterministic and inputs stay gradient-free") {
  Rng rng(41);
  Mat x = randn(rng, 4, 3), w = randn(rng, 3, 3), target = randn(rng, 4, 3);
  auto build = [&](Graph& g, Var& p, Var& in) {
    in = g.input(x);
    p = g.param(w);
    return g.pnorm_loss(g.gelu(g.matmul(in, p)), target, 2);
  };
  Graph g1, g2;
  Var p1, p2, i1, i2;
  g1.backward(build(g1, p1, i1));
  g2.backward(build(g2, p2, i2));
  CHECK(g1.grad(p1) == g2.grad(p2));
  CHECK(g1.grad(i1).cwiseAbs().maxCoeff() == 0.0);  // constants accumulate nothing

  Graph inference(false);
  Var p3, i3;
  Var loss = build(inference, p3, i3);
  CHECK_THROWS_AS(inference.backward(loss), usage_error);
}
