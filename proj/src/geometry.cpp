#include "refop/geometry.hpp"

#include <cmath>
#include <limits>

namespace refop::geometry {

const char* kind_name(Kind k) { return k == Kind::circle ? "circle" : "square"; }

Kind kind_from_name(const std::string& name) {
  if (name == "circle") return Kind::circle;
  if (name == "square") return Kind::square;
  throw data_error("unsupported boundary kind: " + name);
}

std::vector<double> Geometry::param_vector() const {
  std::vector<double> p;
  for (const auto& c : components) p.insert(p.end(), c.params.begin(), c.params.end());
  return p;
}

double box_signed_distance(const BoxDomain& box, const Eigen::Vector2d& x) {
  double qx = std::max(box.lo.x() - x.x(), x.x() - box.hi.x());
  double qy = std::max(box.lo.y() - x.y(), x.y() - box.hi.y());
  double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  double inside = std::min(std::max(qx, qy), 0.0);
  return -(outside + inside);
}

double component_signed_distance(const BoundaryComponent& c, const Eigen::Vector2d& x) {
  double cx = c.params[0], cy = c.params[1], s = c.params[2];
  if (c.kind == Kind::circle) return std::hypot(x.x() - cx, x.y() - cy) - s;
  double qx = std::abs(x.x() - cx) - s;
  double qy = std::abs(x.y() - cy) - s;
  double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  double inside = std::min(std::max(qx, qy), 0.0);
  return outside + inside;
}

double signed_distance(const Geometry& g, const Eigen::Vector2d& x) {
  double d = box_signed_distance(g.domain, x);
  for (const auto& c : g.components) d = std::min(d, component_signed_distance(c, x));
  return d;
}

BoundaryComponent sample_boundary(Kind kind, const std::vector<double>& params, int K) {
  if (params.size() != 3) throw data_error("boundary component expects 3 params");
  if (K < 1) throw data_error("boundary sample count must be positive");
  BoundaryComponent c;
  c.kind = kind;
  c.params = params;
  c.points.resize(K, 2);
  double cx = params[0], cy = params[1], s = params[2];
  if (s <= 0.0) throw data_error("boundary component size must be positive");
  if (kind == Kind::circle) {
    for (int i = 0; i < K; ++i) {
      double th = 2.0 * M_PI * double(i) / double(K);
      c.points(i, 0) = cx + s * std::cos(th);
      c.points(i, 1) = cy + s * std::sin(th);
    }
    return c;
  }
  double side = 2.0 * s, perim = 4.0 * side;
  for (int i = 0; i < K; ++i) {
    double t = perim * double(i) / double(K);
    int edge = int(t / side);
    double a = t - edge * side;
    double px = 0.0, py = 0.0;
    switch (edge) {
      case 0: px = cx - s + a; py = cy - s; break;
      case 1: px = cx + s; py = cy - s + a; break;
      case 2: px = cx + s - a; py = cy + s; break;
      default: px = cx - s; py = cy + s - a; break;
    }
    c.points(i, 0) = px;
    c.points(i, 1) = py;
  }
  return c;
}

double gaussian_weight(double t, double gamma) {
  if (std::isinf(gamma)) return 1.0;
  double u = t / gamma;
  return std::exp(-u * u);
}

double cutoff_eta(double d, double d_max) {
  if (d <= 0.0) return 0.0;
  if (d >= d_max) return 1.0;
  double u = d_max / d;
  return std::exp(1.0 - u * u);
}

double component_wall_distance(const BoxDomain& box, const BoundaryComponent& c) {
  Eigen::Vector2d center(c.params[0], c.params[1]);
  return box_signed_distance(box, center) - c.params[2];
}

DeformationField construct_phi(const Geometry& ref, const Geometry& query, const Mat& query_nodes,
                               double gamma_phi) {
  if (ref.components.size() != query.components.size())
    throw data_error("construct_phi: component count mismatch");
  for (std::size_t i = 0; i < ref.components.size(); ++i) {
    if (ref.components[i].kind != query.components[i].kind)
      throw data_error("construct_phi: component kind mismatch");
    if (ref.components[i].points.rows() != query.components[i].points.rows())
      throw data_error("construct_phi: boundary point count mismatch");
  }
  double d_max = std::numeric_limits<double>::infinity();
  for (const auto& c : query.components)
    d_max = std::min(d_max, component_wall_distance(query.domain, c));
  if (!(d_max > 0.0)) throw data_error("construct_phi: component touches the wall");

  DeformationField field;
  field.gamma_phi = gamma_phi;
  field.d_max = d_max;
  const int n = int(query_nodes.rows());
  field.shifts = Mat::Zero(n, 2);
  if (query.components.empty()) return field;

  Mat* shifts = &field.shifts;
  parallel_for(n, [&](int a) {
    Eigen::Vector2d x = query_nodes.row(a).transpose();
    double best = std::numeric_limits<double>::infinity();
    int bc = 0, bp = 0;
    for (std::size_t ci = 0; ci < query.components.size(); ++ci) {
      const Mat& pts = query.components[ci].points;
      for (int pi = 0; pi < pts.rows(); ++pi) {
        double dx = x.x() - pts(pi, 0), dy = x.y() - pts(pi, 1);
        double d2 = dx * dx + dy * dy;
        if (d2 < best) {
          best = d2;
          bc = int(ci);
          bp = pi;
        }
      }
    }
    Eigen::Vector2d bq = query.components[bc].points.row(bp).transpose();
    Eigen::Vector2d s = ref.components[bc].points.row(bp).transpose() - bq;
    double wall = std::max(box_signed_distance(query.domain, x), 0.0);
    double w = gaussian_weight((x - bq).norm(), gamma_phi) * cutoff_eta(wall, d_max);
    (*shifts)(a, 0) = s.x() * w;
    (*shifts)(a, 1) = s.y() * w;
  });
  return field;
}

double geometric_distance(const std::vector<double>& p_r, const std::vector<double>& p_q) {
  if (p_r.size() != p_q.size()) throw data_error("geometric_distance: param length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p_r.size(); ++i) {
    double d = p_q[i] - p_r[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

bool geometry_valid(const Geometry& g) {
  for (const auto& c : g.components) {
    if (c.params.size() != 3 || c.params[2] <= 0.0) return false;
    if (component_wall_distance(g.domain, c) <= 0.0) return false;
  }
  for (std::size_t i = 0; i < g.components.size(); ++i) {
    for (std::size_t j = i + 1; j < g.components.size(); ++j) {
      const auto& a = g.components[i];
      const auto& b = g.components[j];
      double dx = std::abs(a.params[0] - b.params[0]);
      double dy = std::abs(a.params[1] - b.params[1]);
      if (a.kind == Kind::circle && b.kind == Kind::circle) {
        if (std::hypot(dx, dy) <= a.params[2] + b.params[2]) return false;
      } else if (a.kind == Kind::square && b.kind == Kind::square) {
        if (std::max(dx, dy) <= a.params[2] + b.params[2]) return false;
      } else {
        const auto& sq = a.kind == Kind::square ? a : b;
        const auto& ci = a.kind == Kind::square ? b : a;
        Eigen::Vector2d cc(ci.params[0], ci.params[1]);
        if (component_signed_distance(sq, cc) <= ci.params[2]) return false;
      }
    }
  }
  return true;
}

}  // namespace refop::geometry
