#include "refop/meshinterp.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>

namespace refop::meshinterp {

namespace {

constexpr double kSlack = 1e-10;

long double orient2d(long double ax, long double ay, long double bx, long double by,
                     long double cx, long double cy) {
  return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
}

// Positive when d is inside the circumcircle of CCW triangle (a, b, c).
// Scale-aware: callers compare against kSlack times the row-magnitude product.
long double incircle(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c,
                     const Eigen::Vector2d& d, long double* magnitude) {
  long double adx = a.x() - d.x(), ady = a.y() - d.y();
  long double bdx = b.x() - d.x(), bdy = b.y() - d.y();
  long double cdx = c.x() - d.x(), cdy = c.y() - d.y();
  long double ad2 = adx * adx + ady * ady;
  long double bd2 = bdx * bdx + bdy * bdy;
  long double cd2 = cdx * cdx + cdy * cdy;
  long double det = adx * (bdy * cd2 - bd2 * cdy) - ady * (bdx * cd2 - bd2 * cdx) +
                    ad2 * (bdx * cdy - bdy * cdx);
  long double la = std::sqrt((double)ad2), lb = std::sqrt((double)bd2),
              lc = std::sqrt((double)cd2);
  *magnitude = la * lb * lc * (la + lb + lc) + 1e-300;
  return det;
}

std::uint64_t edge_key(int a, int b) {
  return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
}

struct Builder {
  std::vector<Eigen::Vector2d> pts;  // normalized, real points then 3 super vertices
  int n_real = 0;
  struct Tri {
    int v[3];
    bool alive = true;
  };
  std::vector<Tri> tris;
  std::unordered_map<std::uint64_t, int> edges;  // directed edge -> triangle
  int last_created = 0;

  const Eigen::Vector2d& P(int i) const { return pts[i]; }

  long double orient(int a, int b, const Eigen::Vector2d& q) const {
    return orient2d(P(a).x(), P(a).y(), P(b).x(), P(b).y(), q.x(), q.y());
  }

  void register_tri(int tid) {
    const Tri& t = tris[tid];
    for (int e = 0; e < 3; ++e) edges[edge_key(t.v[e], t.v[(e + 1) % 3])] = tid;
  }

  void unregister_tri(int tid) {
    const Tri& t = tris[tid];
    for (int e = 0; e < 3; ++e) edges.erase(edge_key(t.v[e], t.v[(e + 1) % 3]));
  }

  int neighbor(int tid, int e) const {
    const Tri& t = tris[tid];
    auto it = edges.find(edge_key(t.v[(e + 1) % 3], t.v[e]));
    return it == edges.end() ? -1 : it->second;
  }

  int locate(const Eigen::Vector2d& q, int start) const {
    int tid = start;
    std::size_t cap = 4 * tris.size() + 16;
    for (std::size_t step = 0; step < cap; ++step) {
      const Tri& t = tris[tid];
      int cross = -1;
      for (int e = 0; e < 3; ++e) {
        if (orient(t.v[e], t.v[(e + 1) % 3], q) < 0) {
          cross = e;
          break;
        }
      }
      if (cross < 0) return tid;
      int nb = neighbor(tid, cross);
      if (nb < 0) return tid;  // cannot happen while the super triangle exists
      tid = nb;
    }
    for (std::size_t i = 0; i < tris.size(); ++i) {  // walk cycled on a degeneracy
      if (!tris[i].alive) continue;
      const Tri& t = tris[i];
      bool inside = true;
      for (int e = 0; e < 3 && inside; ++e)
        inside = orient(t.v[e], t.v[(e + 1) % 3], q) >= 0;
      if (inside) return int(i);
    }
    throw numeric_error("triangulate: point location failed");
  }

  bool circumcircle_contains(int tid, const Eigen::Vector2d& q) const {
    const Tri& t = tris[tid];
    long double mag = 0;
    long double det = incircle(P(t.v[0]), P(t.v[1]), P(t.v[2]), q, &mag);
    return det > kSlack * mag;
  }

  void insert(int pid) {
    const Eigen::Vector2d q = P(pid);
    int seed = locate(q, last_created);
    std::vector<int> cavity{seed};
    std::vector<char> in_cavity(tris.size(), 0);
    in_cavity[seed] = 1;
    for (std::size_t head = 0; head < cavity.size(); ++head) {
      int tid = cavity[head];
      for (int e = 0; e < 3; ++e) {
        int nb = neighbor(tid, e);
        if (nb < 0 || in_cavity[nb]) continue;
        if (circumcircle_contains(nb, q)) {
          in_cavity[nb] = 1;
          cavity.push_back(nb);
        }
      }
    }
    // grow the cavity until every boundary edge sees the new point strictly
    // on its left; guards against zero-area fan triangles at cocircular spots
    for (bool grew = true; grew;) {
      grew = false;
      for (std::size_t i = 0; i < cavity.size() && !grew; ++i) {
        int tid = cavity[i];
        for (int e = 0; e < 3; ++e) {
          int nb = neighbor(tid, e);
          if (nb >= 0 && in_cavity[nb]) continue;
          const Tri& t = tris[tid];
          int va = t.v[e], vb = t.v[(e + 1) % 3];
          long double floor = 1e-14 * (P(vb) - P(va)).norm() * (q - P(va)).norm();
          if (orient(va, vb, q) <= floor) {
            if (nb < 0) throw data_error("triangulate: degenerate input");
            in_cavity[nb] = 1;
            cavity.push_back(nb);
            grew = true;
            break;
          }
        }
      }
    }
    std::vector<std::array<int, 2>> boundary;
    for (int tid : cavity) {
      for (int e = 0; e < 3; ++e) {
        int nb = neighbor(tid, e);
        if (nb >= 0 && in_cavity[nb]) continue;
        boundary.push_back({tris[tid].v[e], tris[tid].v[(e + 1) % 3]});
      }
    }
    for (int tid : cavity) {
      unregister_tri(tid);
      tris[tid].alive = false;
    }
    for (const auto& [a, b] : boundary) {
      Tri t;
      t.v[0] = pid;
      t.v[1] = a;
      t.v[2] = b;
      tris.push_back(t);
      last_created = int(tris.size()) - 1;
      register_tri(last_created);
    }
  }
};

double tri_area2(const Mat& pts, const std::array<int, 3>& t) {
  return (pts(t[1], 0) - pts(t[0], 0)) * (pts(t[2], 1) - pts(t[0], 1)) -
         (pts(t[1], 1) - pts(t[0], 1)) * (pts(t[2], 0) - pts(t[0], 0));
}

int nearest_node(const Mat& pts, double qx, double qy) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (int i = 0; i < pts.rows(); ++i) {
    double dx = pts(i, 0) - qx, dy = pts(i, 1) - qy;
    double d = dx * dx + dy * dy;
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

}  // namespace

TriMesh triangulate(const Mat& points) {
  const int n = int(points.rows());
  if (n < 3) throw data_error("triangulate: need at least 3 points");

  Eigen::Vector2d lo = points.colwise().minCoeff().transpose();
  Eigen::Vector2d hi = points.colwise().maxCoeff().transpose();
  Eigen::Vector2d center = 0.5 * (lo + hi);
  double extent = std::max({hi.x() - lo.x(), hi.y() - lo.y(), 1e-30});

  Builder b;
  b.n_real = n;
  b.pts.reserve(n + 3);
  for (int i = 0; i < n; ++i)
    b.pts.emplace_back((points(i, 0) - center.x()) / extent, (points(i, 1) - center.y()) / extent);

  {  // duplicate detection within relative tolerance
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int i, int j) {
      if (b.pts[i].x() != b.pts[j].x()) return b.pts[i].x() < b.pts[j].x();
      return b.pts[i].y() < b.pts[j].y();
    });
    for (int i = 0; i + 1 < n; ++i) {
      Eigen::Vector2d d = b.pts[order[i + 1]] - b.pts[order[i]];
      if (d.cwiseAbs().maxCoeff() < 1e-12) throw data_error("triangulate: duplicate points");
    }
  }

  const double R = 1e4;
  for (int k = 0; k < 3; ++k) {
    double th = M_PI * (0.5 + 2.0 * k / 3.0);
    b.pts.emplace_back(R * std::cos(th), R * std::sin(th));
  }
  Builder::Tri super;
  super.v[0] = n;
  super.v[1] = n + 1;
  super.v[2] = n + 2;
  b.tris.push_back(super);
  b.register_tri(0);

  Rng rng(0x5eed0000u ^ std::uint64_t(n));
  for (int pid : rng.permutation(n)) b.insert(pid);

  TriMesh mesh;
  mesh.points = points;
  for (const auto& t : b.tris) {
    if (!t.alive) continue;
    if (t.v[0] >= n || t.v[1] >= n || t.v[2] >= n) continue;
    mesh.triangles.push_back({t.v[0], t.v[1], t.v[2]});
  }
  if (mesh.triangles.empty()) throw data_error("triangulate: degenerate (collinear) input");
  for (const auto& t : mesh.triangles)
    if (tri_area2(mesh.points, t) <= 0.0) throw numeric_error("triangulate: non-positive triangle");

  std::unordered_map<std::uint64_t, int> half;
  half.reserve(mesh.triangles.size() * 3);
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i)
    for (int e = 0; e < 3; ++e)
      half[edge_key(mesh.triangles[i][e], mesh.triangles[i][(e + 1) % 3])] = int(i);
  mesh.adjacent.resize(mesh.triangles.size());
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    for (int e = 0; e < 3; ++e) {
      auto it = half.find(edge_key(mesh.triangles[i][(e + 1) % 3], mesh.triangles[i][e]));
      mesh.adjacent[i][e] = it == half.end() ? -1 : it->second;
    }
  }
  return mesh;
}

Mat interpolate(const TriMesh& mesh, const Mat& values, const Mat& queries) {
  if (values.rows() != mesh.points.rows())
    throw data_error("interpolate: values row count does not match mesh points");
  const int m = int(queries.rows());
  Mat out(m, values.cols());
  const Mat& pts = mesh.points;
  const std::size_t T = mesh.triangles.size();

  int start = 0;
  for (int qi = 0; qi < m; ++qi) {
    double qx = queries(qi, 0), qy = queries(qi, 1);
    int tid = start;
    bool located = false, outside = false;
    for (std::size_t step = 0; step < 2 * T + 8; ++step) {
      const auto& t = mesh.triangles[tid];
      int cross = -1;
      for (int e = 0; e < 3; ++e) {
        double ax = pts(t[e], 0), ay = pts(t[e], 1);
        double bx = pts(t[(e + 1) % 3], 0), by = pts(t[(e + 1) % 3], 1);
        if ((bx - ax) * (qy - ay) - (by - ay) * (qx - ax) < 0) {
          cross = e;
          break;
        }
      }
      if (cross < 0) {
        located = true;
        break;
      }
      int nb = mesh.adjacent[tid][cross];
      if (nb < 0) {
        outside = true;
        break;
      }
      tid = nb;
    }
    if (!located && !outside) {  // cycled; exhaustive scan
      for (std::size_t i = 0; i < T && !located; ++i) {
        const auto& t = mesh.triangles[i];
        bool inside = true;
        for (int e = 0; e < 3 && inside; ++e) {
          double ax = pts(t[e], 0), ay = pts(t[e], 1);
          double bx = pts(t[(e + 1) % 3], 0), by = pts(t[(e + 1) % 3], 1);
          inside = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax) >= -kSlack;
        }
        if (inside) {
          located = true;
          tid = int(i);
        }
      }
    }
    if (located) {
      start = tid;
      const auto& t = mesh.triangles[tid];
      bool snapped = false;
      for (int e = 0; e < 3; ++e) {
        if (pts(t[e], 0) == qx && pts(t[e], 1) == qy) {
          out.row(qi) = values.row(t[e]);
          snapped = true;
          break;
        }
      }
      if (snapped) continue;
      double a2 = tri_area2(pts, t);
      double l0 = ((pts(t[1], 0) - qx) * (pts(t[2], 1) - qy) -
                   (pts(t[1], 1) - qy) * (pts(t[2], 0) - qx)) /
                  a2;
      double l1 = ((pts(t[2], 0) - qx) * (pts(t[0], 1) - qy) -
                   (pts(t[2], 1) - qy) * (pts(t[0], 0) - qx)) /
                  a2;
      double l2 = ((pts(t[0], 0) - qx) * (pts(t[1], 1) - qy) -
                   (pts(t[0], 1) - qy) * (pts(t[1], 0) - qx)) /
                  a2;
      if (l0 >= -kSlack && l1 >= -kSlack && l2 >= -kSlack) {
        l0 = std::max(l0, 0.0);
        l1 = std::max(l1, 0.0);
        l2 = std::max(l2, 0.0);
        double s = l0 + l1 + l2;
        out.row(qi) = (l0 * values.row(t[0]) + l1 * values.row(t[1]) + l2 * values.row(t[2])) / s;
        continue;
      }
    }
    out.row(qi) = values.row(nearest_node(pts, qx, qy));
  }
  return out;
}

Mat pushforward(const TriMesh& ref_mesh, const Mat& ref_values, const Mat& query_nodes,
                const geometry::DeformationField& field) {
  if (field.shifts.rows() != query_nodes.rows())
    throw data_error("pushforward: shift row count does not match query nodes");
  Mat targets = query_nodes + field.shifts;
  return interpolate(ref_mesh, ref_values, targets);
}

Mat pushforward(const datagen::Sample& ref, const Mat& query_nodes,
                const geometry::DeformationField& field) {
  return pushforward(triangulate(ref.nodes), ref.values, query_nodes, field);
}

}  // namespace refop::meshinterp
