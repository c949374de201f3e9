#pragma once

#include "refop/geometry.hpp"

namespace refop::datagen {

// One solved PDE case: ((x, u), p, Gamma) plus pairing metadata.
struct Sample {
  int id = 0;
  int pair_tag = 0;
  Mat nodes;   // N x 2, strictly inside the domain
  Mat values;  // N x d_s
  geometry::Geometry geom;
};

}  // namespace refop::datagen
