#pragma once

#include <vector>

#include "refop/sample.hpp"

namespace refop::pairing {

enum class Mode { natural, knn };

struct PairEntry {
  int query_id = 0;
  int ref_id = 0;
  double distance = 0.0;
};

struct PairMap {
  std::vector<PairEntry> entries;
  Mode mode = Mode::natural;
  int k = 1;
};

// Both directions of every tagged pair; each tag must be shared by exactly
// two samples. Distances are Euclidean over the geometry param vectors.
PairMap pair_natural(const std::vector<datagen::Sample>& samples);

// k nearest eligible pool samples per query. Only samples with equal
// param-vector length are comparable; ties break toward the lower sample id;
// a query with no eligible reference is an error.
PairMap pair_knn(const std::vector<datagen::Sample>& queries,
                 const std::vector<datagen::Sample>& pool, int k, bool exclude_self);

}  // namespace refop::pairing
