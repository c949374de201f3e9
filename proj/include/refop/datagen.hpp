#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "refop/pairing.hpp"
#include "refop/sample.hpp"

namespace refop::datagen {

enum class Problem { poisson_holes, annulus };

const char* problem_name(Problem p);
Problem problem_from_name(const std::string& name);

struct GenConfig {
  Problem problem = Problem::poisson_holes;
  int grid = 64;
  int holes_lo = 1;
  int holes_hi = 3;
  geometry::Kind kind = geometry::Kind::circle;
  double radius_lo = 0.08;
  double radius_hi = 0.18;
  double perturb_center = 0.05;
  double perturb_radius = 0.02;
  double f = 1.0;  // constant source; annulus mode forces 0
  int n_pairs = 1;
  std::uint64_t seed = 0;
  double solver_tol = 1e-8;
  int k_boundary = 64;
};

inline constexpr int kMaxHoles = 3;
inline constexpr double kAnnulusInnerRadius = 0.2;
inline constexpr double kAnnulusOuterRadius = 0.45;

// -laplace(u) = f on the interior lattice of the unit box, 5-point stencil,
// u = 0 on the walls and at masked (hole) neighbors; conjugate gradient to a
// relative residual <= tol.
Sample solve_poisson(const geometry::Geometry& g, int grid, double f, double tol);

// Laplace on the annulus between the geometry's single circle component
// (u = 1) and a fixed concentric outer circle of radius outer_r (u = 0);
// ghost-value linear extrapolation at cut cells keeps the system symmetric
// positive definite and the solution second-order accurate.
Sample solve_annulus(const geometry::Geometry& g, double outer_r, int grid, double tol);

// n_pairs base geometries plus perturbed twins, all solved, natural pairing.
std::pair<std::vector<Sample>, pairing::PairMap> generate_pairs(const GenConfig& cfg);

}  // namespace refop::datagen
