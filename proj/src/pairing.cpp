#include "refop/pairing.hpp"

#include <algorithm>
#include <map>

namespace refop::pairing {

PairMap pair_natural(const std::vector<datagen::Sample>& samples) {
  std::map<int, std::vector<const datagen::Sample*>> by_tag;
  for (const auto& s : samples) by_tag[s.pair_tag].push_back(&s);
  PairMap pm;
  pm.mode = Mode::natural;
  for (const auto& [tag, group] : by_tag) {
    if (group.size() != 2)
      throw data_error("pair_natural: tag " + std::to_string(tag) + " has " +
                       std::to_string(group.size()) + " samples, expected 2");
    const auto* a = group[0];
    const auto* b = group[1];
    if (a->id > b->id) std::swap(a, b);
    double d = geometry::geometric_distance(a->geom.param_vector(), b->geom.param_vector());
    pm.entries.push_back({a->id, b->id, d});
    pm.entries.push_back({b->id, a->id, d});
  }
  return pm;
}

PairMap pair_knn(const std::vector<datagen::Sample>& queries,
                 const std::vector<datagen::Sample>& pool, int k, bool exclude_self) {
  if (pool.empty()) throw data_error("pair_knn: empty reference pool");
  if (k < 1) throw data_error("pair_knn: k must be at least 1");
  PairMap pm;
  pm.mode = Mode::knn;
  pm.k = k;
  for (const auto& q : queries) {
    auto qp = q.geom.param_vector();
    std::vector<std::pair<double, const datagen::Sample*>> cand;
    for (const auto& r : pool) {
      if (exclude_self && r.id == q.id) continue;
      auto rp = r.geom.param_vector();
      if (rp.size() != qp.size()) continue;
      cand.emplace_back(geometry::geometric_distance(rp, qp), &r);
    }
    if (cand.empty())
      throw data_error("pair_knn: no eligible reference for sample " + std::to_string(q.id));
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return a.second->id < b.second->id;
    });
    int take = std::min<int>(k, int(cand.size()));
    for (int i = 0; i < take; ++i)
      pm.entries.push_back({q.id, cand[i].second->id, cand[i].first});
  }
  return pm;
}

}  // namespace refop::pairing
