#pragma once

#include <array>
#include <vector>

#include "refop/geometry.hpp"
#include "refop/sample.hpp"

namespace refop::meshinterp {

struct TriMesh {
  Mat points;                                 // N x 2
  std::vector<std::array<int, 3>> triangles;  // CCW vertex indices
  std::vector<std::array<int, 3>> adjacent;   // across edge (v[i], v[i+1]); -1 on the hull
};

// Delaunay triangulation (Bowyer-Watson), empty-circumcircle property up to a
// 1e-10 relative slack for cocircular point sets (regular lattices included).
TriMesh triangulate(const Mat& points);

// Barycentric-linear interpolation; queries outside the hull fall back to the
// nearest node value. Total for every query point.
Mat interpolate(const TriMesh& mesh, const Mat& values, const Mat& queries);

// u_r at (query_nodes + field.shifts), i.e. the pushforward u_r ∘ phi^-1.
Mat pushforward(const TriMesh& ref_mesh, const Mat& ref_values, const Mat& query_nodes,
                const geometry::DeformationField& field);
Mat pushforward(const datagen::Sample& ref, const Mat& query_nodes,
                const geometry::DeformationField& field);

}  // namespace refop::meshinterp
