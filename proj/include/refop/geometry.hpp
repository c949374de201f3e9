#pragma once

#include <vector>

#include "refop/common.hpp"

namespace refop::geometry {

struct BoxDomain {
  Eigen::Vector2d lo{0.0, 0.0};
  Eigen::Vector2d hi{1.0, 1.0};
};

enum class Kind { circle, square };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

// circle params: cx, cy, radius; square params: cx, cy, half_side.
struct BoundaryComponent {
  Kind kind = Kind::circle;
  std::vector<double> params;
  Mat points;  // K x 2, canonical order
};

struct Geometry {
  BoxDomain domain;
  std::vector<BoundaryComponent> components;
  std::vector<double> param_vector() const;
};

struct DeformationField {
  Mat shifts;  // N_q x 2
  double gamma_phi = 0.0;
  double d_max = 0.0;
};

// Positive inside the box, negative outside; exact distance to the walls.
double box_signed_distance(const BoxDomain& box, const Eigen::Vector2d& x);

// Positive outside the component, negative inside; exact.
double component_signed_distance(const BoundaryComponent& c, const Eigen::Vector2d& x);

// Positive inside the computational domain (inside box, outside every component).
double signed_distance(const Geometry& g, const Eigen::Vector2d& x);

// K points in canonical order: circle by angle 2*pi*i/K from the positive
// x-axis; square by arclength from the corner (cx-h, cy-h), counterclockwise.
BoundaryComponent sample_boundary(Kind kind, const std::vector<double>& params, int K);

// h(t) = exp(-t^2/gamma^2); h == 1 for gamma = inf.
double gaussian_weight(double t, double gamma);

// Wall cutoff: 0 at d=0, exp(1 - d_max^2/d^2) on (0, d_max), 1 beyond.
double cutoff_eta(double d, double d_max);

// Shortest distance from a component's boundary to the box walls.
double component_wall_distance(const BoxDomain& box, const BoundaryComponent& c);

// Discrete phi^-1 minus identity at each query node. d_max is the minimum
// component-to-wall distance of the query geometry; eta is evaluated at the
// unshifted node against the box walls; nearest-boundary-point ties break
// toward the lowest (component index, point index).
DeformationField construct_phi(const Geometry& ref, const Geometry& query, const Mat& query_nodes,
                               double gamma_phi);

double geometric_distance(const std::vector<double>& p_r, const std::vector<double>& p_q);

// Components pairwise disjoint and strictly inside the box.
bool geometry_valid(const Geometry& g);

}  // namespace refop::geometry
