#include "refop/datagen.hpp"

#include <cmath>

namespace refop::datagen {

const char* problem_name(Problem p) {
  return p == Problem::poisson_holes ? "poisson-holes" : "annulus";
}

Problem problem_from_name(const std::string& name) {
  if (name == "poisson-holes") return Problem::poisson_holes;
  if (name == "annulus") return Problem::annulus;
  throw usage_error("unknown problem: " + name);
}

namespace {

struct System {
  int n = 0;
  Mat nodes;
  std::vector<std::array<int, 4>> nb;  // unknown neighbor indices, -1 if none
  std::vector<double> diag, rhs;
  double h = 0.0;
};

// Fraction t in (0, 1] along p -> q at which the circle |x - c| = r is hit.
double cut_fraction(const Eigen::Vector2d& p, const Eigen::Vector2d& q, const Eigen::Vector2d& c,
                    double r) {
  Eigen::Vector2d d = q - p, m = p - c;
  double a = d.squaredNorm();
  double b = 2.0 * m.dot(d);
  double cc = m.squaredNorm() - r * r;
  double disc = b * b - 4.0 * a * cc;
  if (disc < 0.0) disc = 0.0;
  double sq = std::sqrt(disc);
  double t1 = (-b - sq) / (2.0 * a);
  double t2 = (-b + sq) / (2.0 * a);
  double t = (t1 > 1e-12 && t1 <= 1.0 + 1e-12) ? t1 : t2;
  return std::clamp(t, 1e-6, 1.0);
}

std::vector<double> conjugate_gradient(const System& sys, double tol) {
  const int n = sys.n;
  std::vector<double> x(n, 0.0), r(sys.rhs), p(sys.rhs), ap(n);
  double bnorm = 0.0;
  for (double v : sys.rhs) bnorm += v * v;
  bnorm = std::sqrt(bnorm);
  if (bnorm == 0.0) return x;
  double rr = bnorm * bnorm;
  const long max_iter = 400L * sys.nodes.rows() / 100 + 200000;
  auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
    for (int i = 0; i < n; ++i) {
      double acc = sys.diag[i] * v[i];
      for (int d = 0; d < 4; ++d) {
        int j = sys.nb[i][d];
        if (j >= 0) acc -= v[j] / (sys.h * sys.h);
      }
      out[i] = acc;
    }
  };
  for (long it = 0; it < max_iter; ++it) {
    apply(p, ap);
    double pap = 0.0;
    for (int i = 0; i < n; ++i) pap += p[i] * ap[i];
    double alpha = rr / pap;
    double rr_new = 0.0;
    for (int i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
      rr_new += r[i] * r[i];
    }
    if (std::sqrt(rr_new) <= tol * bnorm) {
      // recompute the true residual; CG's recurrence can drift
      apply(x, ap);
      double tr = 0.0;
      for (int i = 0; i < n; ++i) {
        double ri = sys.rhs[i] - ap[i];
        tr += ri * ri;
      }
      if (std::sqrt(tr) <= tol * bnorm) return x;
    }
    double beta = rr_new / rr;
    rr = rr_new;
    for (int i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }
  throw numeric_error("poisson solve: conjugate gradient did not converge");
}

Sample finish_sample(const geometry::Geometry& g, System& sys, double tol) {
  std::vector<double> u = conjugate_gradient(sys, tol);
  Sample s;
  s.geom = g;
  s.nodes = std::move(sys.nodes);
  s.values.resize(s.nodes.rows(), 1);
  for (int i = 0; i < sys.n; ++i) {
    if (!std::isfinite(u[i])) throw numeric_error("poisson solve: non-finite solution");
    s.values(i, 0) = u[i];
  }
  return s;
}

}  // namespace

Sample solve_poisson(const geometry::Geometry& g, int grid, double f, double tol) {
  if (grid < 4) throw data_error("solve_poisson: grid too small");
  const double h = 1.0 / grid;
  std::vector<int> id((grid + 1) * (grid + 1), -1);
  auto lat = [&](int i, int j) { return i * (grid + 1) + j; };
  std::vector<std::pair<int, int>> cells;
  for (int i = 1; i < grid; ++i) {
    for (int j = 1; j < grid; ++j) {
      Eigen::Vector2d x(i * h, j * h);
      if (geometry::signed_distance(g, x) > 0.0) {
        id[lat(i, j)] = int(cells.size());
        cells.emplace_back(i, j);
      }
    }
  }
  System sys;
  sys.n = int(cells.size());
  if (sys.n == 0) throw data_error("solve_poisson: no interior nodes");
  sys.h = h;
  sys.nodes.resize(sys.n, 2);
  sys.nb.resize(sys.n);
  sys.diag.assign(sys.n, 4.0 / (h * h));
  sys.rhs.assign(sys.n, f);
  const int di[4] = {1, -1, 0, 0};
  const int dj[4] = {0, 0, 1, -1};
  for (int u = 0; u < sys.n; ++u) {
    auto [i, j] = cells[u];
    sys.nodes(u, 0) = i * h;
    sys.nodes(u, 1) = j * h;
    for (int d = 0; d < 4; ++d) {
      int ni = i + di[d], nj = j + dj[d];
      sys.nb[u][d] = (ni >= 1 && ni < grid && nj >= 1 && nj < grid) ? id[lat(ni, nj)] : -1;
    }
  }
  return finish_sample(g, sys, tol);
}

Sample solve_annulus(const geometry::Geometry& g, double outer_r, int grid, double tol) {
  if (g.components.size() != 1 || g.components[0].kind != geometry::Kind::circle)
    throw data_error("solve_annulus: geometry must have a single circle component");
  if (grid < 8) throw data_error("solve_annulus: grid too small");
  const Eigen::Vector2d c1(g.components[0].params[0], g.components[0].params[1]);
  const double r1 = g.components[0].params[2];
  const Eigen::Vector2d c2(0.5, 0.5);
  if (r1 >= outer_r) throw data_error("solve_annulus: inner radius exceeds outer");
  const double h = 1.0 / grid;
  std::vector<int> id((grid + 1) * (grid + 1), -1);
  auto lat = [&](int i, int j) { return i * (grid + 1) + j; };
  auto inside = [&](const Eigen::Vector2d& x) {
    return (x - c1).norm() > r1 && (x - c2).norm() < outer_r;
  };
  std::vector<std::pair<int, int>> cells;
  for (int i = 1; i < grid; ++i) {
    for (int j = 1; j < grid; ++j) {
      if (inside({i * h, j * h})) {
        id[lat(i, j)] = int(cells.size());
        cells.emplace_back(i, j);
      }
    }
  }
  System sys;
  sys.n = int(cells.size());
  if (sys.n == 0) throw data_error("solve_annulus: no interior nodes");
  sys.h = h;
  sys.nodes.resize(sys.n, 2);
  sys.nb.resize(sys.n);
  sys.diag.assign(sys.n, 0.0);
  sys.rhs.assign(sys.n, 0.0);
  const int di[4] = {1, -1, 0, 0};
  const int dj[4] = {0, 0, 1, -1};
  for (int u = 0; u < sys.n; ++u) {
    auto [i, j] = cells[u];
    Eigen::Vector2d x(i * h, j * h);
    sys.nodes(u, 0) = x.x();
    sys.nodes(u, 1) = x.y();
    for (int d = 0; d < 4; ++d) {
      int ni = i + di[d], nj = j + dj[d];
      sys.nb[u][d] = -1;
      Eigen::Vector2d xn(ni * h, nj * h);
      bool on_lattice = ni >= 1 && ni < grid && nj >= 1 && nj < grid;
      if (on_lattice && id[lat(ni, nj)] >= 0) {
        sys.nb[u][d] = id[lat(ni, nj)];
        sys.diag[u] += 1.0 / (h * h);
      } else if ((xn - c1).norm() <= r1) {  // cut by the inner circle, u = 1
        double th = cut_fraction(x, xn, c1, r1);
        sys.diag[u] += 1.0 / (th * h * h);
        sys.rhs[u] += 1.0 / (th * h * h);
      } else {  // cut by the outer circle (or wall), u = 0
        double th = (xn - c2).norm() >= outer_r ? cut_fraction(x, xn, c2, outer_r) : 1.0;
        sys.diag[u] += 1.0 / (th * h * h);
      }
    }
  }
  return finish_sample(g, sys, tol);
}

namespace {

geometry::Geometry make_geometry(const std::vector<std::array<double, 3>>& holes,
                                 geometry::Kind kind, int K) {
  geometry::Geometry g;
  g.domain = geometry::BoxDomain{{0.0, 0.0}, {1.0, 1.0}};
  for (const auto& p : holes)
    g.components.push_back(geometry::sample_boundary(kind, {p[0], p[1], p[2]}, K));
  return g;
}

bool holes_admissible(const std::vector<std::array<double, 3>>& holes, double wall_margin,
                      double gap, geometry::Kind kind) {
  for (const auto& a : holes) {
    double reach = a[2];
    if (a[0] - reach < wall_margin || a[0] + reach > 1.0 - wall_margin) return false;
    if (a[1] - reach < wall_margin || a[1] + reach > 1.0 - wall_margin) return false;
  }
  for (std::size_t i = 0; i < holes.size(); ++i) {
    for (std::size_t j = i + 1; j < holes.size(); ++j) {
      double dx = holes[i][0] - holes[j][0], dy = holes[i][1] - holes[j][1];
      double dist = kind == geometry::Kind::circle ? std::hypot(dx, dy)
                                                   : std::max(std::abs(dx), std::abs(dy));
      if (dist < holes[i][2] + holes[j][2] + gap) return false;
    }
  }
  return true;
}

}  // namespace

std::pair<std::vector<Sample>, pairing::PairMap> generate_pairs(const GenConfig& cfg) {
  if (cfg.n_pairs < 1) throw usage_error("n_pairs must be positive");
  if (cfg.holes_lo < 1 || cfg.holes_hi > kMaxHoles || cfg.holes_lo > cfg.holes_hi)
    throw usage_error("holes must lie in 1.." + std::to_string(kMaxHoles));
  if (cfg.k_boundary < 8) throw usage_error("k_boundary must be at least 8");
  const double h = 1.0 / cfg.grid;
  const double slack = cfg.perturb_center + cfg.perturb_radius;

  std::vector<Sample> samples(std::size_t(2 * cfg.n_pairs));
  std::vector<geometry::Geometry> geoms(std::size_t(2 * cfg.n_pairs));
  for (int p = 0; p < cfg.n_pairs; ++p) {
    Rng rng(seed_stream(cfg.seed, 0xda7a, std::uint64_t(p)));
    std::vector<std::array<double, 3>> base, twin;
    if (cfg.problem == Problem::annulus) {
      base = {{0.5, 0.5, kAnnulusInnerRadius}};
      int attempts = 0;
      for (;; ++attempts) {
        if (attempts >= 1000) throw data_error("generate_pairs: perturbation rejection cap");
        twin = base;
        twin[0][0] += rng.uniform(-cfg.perturb_center, cfg.perturb_center);
        twin[0][1] += rng.uniform(-cfg.perturb_center, cfg.perturb_center);
        twin[0][2] += rng.uniform(-cfg.perturb_radius, cfg.perturb_radius);
        double off = std::hypot(twin[0][0] - 0.5, twin[0][1] - 0.5);
        if (off + twin[0][2] <= kAnnulusOuterRadius - 4 * h) break;
      }
    } else {
      int n_holes = rng.uniform_int(cfg.holes_lo, cfg.holes_hi);
      int attempts = 0;
      for (;; ++attempts) {
        if (attempts >= 5000) throw data_error("generate_pairs: geometry rejection cap exceeded");
        base.clear();
        for (int k = 0; k < n_holes; ++k) {
          double r = rng.uniform(cfg.radius_lo, cfg.radius_hi);
          double reach = r + 2 * h + slack;
          if (reach > 0.5) break;
          base.push_back({rng.uniform(reach, 1.0 - reach), rng.uniform(reach, 1.0 - reach), r});
        }
        if (int(base.size()) == n_holes &&
            holes_admissible(base, 2 * h + slack, 0.5 * h + 2 * slack, cfg.kind))
          break;
      }
      std::sort(base.begin(), base.end());
      attempts = 0;
      for (;; ++attempts) {
        if (attempts >= 1000) throw data_error("generate_pairs: perturbation rejection cap");
        twin = base;
        for (auto& t : twin) {
          t[0] += rng.uniform(-cfg.perturb_center, cfg.perturb_center);
          t[1] += rng.uniform(-cfg.perturb_center, cfg.perturb_center);
          t[2] += rng.uniform(-cfg.perturb_radius, cfg.perturb_radius);
        }
        if (holes_admissible(twin, 2 * h, 0.5 * h, cfg.kind)) break;
      }
    }
    geoms[2 * p] = make_geometry(base, cfg.kind, cfg.k_boundary);
    geoms[2 * p + 1] = make_geometry(twin, cfg.kind, cfg.k_boundary);
  }

  parallel_for(2 * cfg.n_pairs, [&](int i) {
    if (cfg.problem == Problem::annulus)
      samples[i] = solve_annulus(geoms[i], kAnnulusOuterRadius, cfg.grid, cfg.solver_tol);
    else
      samples[i] = solve_poisson(geoms[i], cfg.grid, cfg.f, cfg.solver_tol);
    samples[i].id = i;
    samples[i].pair_tag = i / 2;
  });
  auto pm = pairing::pair_natural(samples);
  return {std::move(samples), std::move(pm)};
}

}  // namespace refop::datagen
