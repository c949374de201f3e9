#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "refop/pairing.hpp"

using namespace refop;
using namespace refop::pairing;

namespace {

datagen::Sample make_sample(int id, int tag, std::vector<std::array<double, 3>> circles) {
  datagen::Sample s;
  s.id = id;
  s.pair_tag = tag;
  for (const auto& c : circles)
    s.geom.components.push_back(
        geometry::sample_boundary(geometry::Kind::circle, {c[0], c[1], c[2]}, 8));
  return s;
}

}  // namespace

TEST_CASE("pair_natural emits both directions per tag") {
  std::vector<datagen::Sample> two = {make_sample(0, 0, {{0.4, 0.4, 0.1}}),
                                      make_sample(1, 0, {{0.45, 0.42, 0.11}})};
  auto pm = pair_natural(two);
  REQUIRE(pm.entries.size() == 2);
  CHECK(pm.entries[0].query_id == 0);
  CHECK(pm.entries[0].ref_id == 1);
  CHECK(pm.entries[1].query_id == 1);
  CHECK(pm.entries[1].ref_id == 0);

  std::vector<datagen::Sample> many;
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    double cx = rng.uniform(0.3, 0.7), cy = rng.uniform(0.3, 0.7), r = rng.uniform(0.08, 0.15);
    many.push_back(make_sample(2 * t, t, {{cx, cy, r}}));
    many.push_back(make_sample(2 * t + 1, t, {{cx + 0.02, cy - 0.01, r + 0.005}}));
  }
  auto pm10 = pair_natural(many);
  CHECK(pm10.entries.size() == 20);
  for (const auto& e : pm10.entries) {
    CHECK(e.query_id != e.ref_id);
    bool reverse = false;
    for (const auto& o : pm10.entries)
      reverse |= o.query_id == e.ref_id && o.ref_id == e.query_id && o.distance == e.distance;
    CHECK(reverse);
    const auto& q = many[std::size_t(e.query_id)];
    const auto& r = many[std::size_t(e.ref_id)];
    CHECK(e.distance ==
          geometry::geometric_distance(r.geom.param_vector(), q.geom.param_vector()));
  }
}

TEST_CASE("pair_natural rejects unmatched tags") {
  std::vector<datagen::Sample> bad = {make_sample(0, 0, {{0.4, 0.4, 0.1}}),
                                      make_sample(1, 0, {{0.5, 0.5, 0.1}}),
                                      make_sample(2, 1, {{0.6, 0.6, 0.1}})};
  CHECK_THROWS_AS((void)pair_natural(bad), data_error);
  bad.pop_back();
  bad.push_back(make_sample(2, 0, {{0.6, 0.6, 0.1}}));
  CHECK_THROWS_AS((void)pair_natural(bad), data_error);
}

TEST_CASE("pair_knn nearest on a line of params") {
  std::vector<datagen::Sample> pool = {make_sample(0, 0, {{0.0, 0.0, 1.0}}),
                                       make_sample(1, 1, {{1.0, 0.0, 1.0}}),
                                       make_sample(2, 2, {{3.0, 0.0, 1.0}})};
  auto pm = pair_knn({pool[1]}, pool, 1, true);
  REQUIRE(pm.entries.size() == 1);
  CHECK(pm.entries[0].ref_id == 0);
  CHECK(pm.entries[0].distance == doctest::Approx(1.0).epsilon(1e-15));

  auto self = pair_knn({pool[1]}, pool, 1, false);
  CHECK(self.entries[0].ref_id == 1);
  CHECK(self.entries[0].distance == 0.0);
}

TEST_CASE("pair_knn matches an exhaustive sort oracle") {
  Rng rng(9);
  std::vector<datagen::Sample> pool;
  for (int i = 0; i < 5; ++i)
    pool.push_back(make_sample(i, i, {{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.1}}));
  auto pm = pair_knn(pool, pool, 2, true);
  CHECK(pm.entries.size() == 10);
  for (const auto& q : pool) {
    std::vector<std::pair<double, int>> all;
    for (const auto& r : pool) {
      if (r.id == q.id) continue;
      all.emplace_back(geometry::geometric_distance(r.geom.param_vector(), q.geom.param_vector()),
                       r.id);
    }
    std::sort(all.begin(), all.end());
    std::vector<int> got;
    for (const auto& e : pm.entries)
      if (e.query_id == q.id) got.push_back(e.ref_id);
    REQUIRE(got.size() == 2);
    CHECK(got[0] == all[0].second);
    CHECK(got[1] == all[1].second);
  }
}

TEST_CASE("pair_knn exact brute-force agreement with ties") {
  // quantized params force exact distance ties; rule: lower sample id wins
  Rng rng(13);
  std::vector<datagen::Sample> pool;
  for (int i = 0; i < 200; ++i) {
    double cx = 0.3 + 0.1 * rng.uniform_int(0, 3);
    double cy = 0.3 + 0.1 * rng.uniform_int(0, 3);
    double r = 0.08 + 0.01 * rng.uniform_int(0, 2);
    pool.push_back(make_sample(i, i, {{cx, cy, r}}));
  }
  auto pm = pair_knn(pool, pool, 3, true);
  REQUIRE(pm.entries.size() == 600);
  std::size_t at = 0;
  for (const auto& q : pool) {
    std::vector<std::pair<double, int>> all;
    for (const auto& r : pool) {
      if (r.id == q.id) continue;
      all.emplace_back(geometry::geometric_distance(r.geom.param_vector(), q.geom.param_vector()),
                       r.id);
    }
    std::sort(all.begin(), all.end());
    for (int k = 0; k < 3; ++k, ++at) {
      CHECK(pm.entries[at].query_id == q.id);
      CHECK(pm.entries[at].ref_id == all[std::size_t(k)].second);
      CHECK(pm.entries[at].distance == all[std::size_t(k)].first);
    }
  }
}

TEST_CASE("pair_knn never crosses component-count groups") {
  std::vector<datagen::Sample> pool = {
      make_sample(0, 0, {{0.4, 0.4, 0.1}}),
      make_sample(1, 1, {{0.42, 0.41, 0.1}}),
      make_sample(2, 2, {{0.4, 0.4, 0.1}, {0.7, 0.7, 0.08}}),
      make_sample(3, 3, {{0.41, 0.4, 0.1}, {0.71, 0.7, 0.08}})};
  auto pm = pair_knn(pool, pool, 3, true);
  for (const auto& e : pm.entries) {
    auto nq = pool[std::size_t(e.query_id)].geom.components.size();
    auto nr = pool[std::size_t(e.ref_id)].geom.components.size();
    CHECK(nq == nr);
  }
  CHECK(pm.entries.size() == 4);  // each sample has exactly one same-topology peer
}

TEST_CASE("pair_knn error cases") {
  std::vector<datagen::Sample> one = {make_sample(0, 0, {{0.4, 0.4, 0.1}})};
  CHECK_THROWS_AS((void)pair_knn(one, one, 1, true), data_error);
  CHECK_THROWS_AS((void)pair_knn(one, {}, 1, false), data_error);
  std::vector<datagen::Sample> mixed = {make_sample(0, 0, {{0.4, 0.4, 0.1}}),
                                        make_sample(1, 1, {{0.3, 0.3, 0.1}, {0.7, 0.7, 0.1}})};
  CHECK_THROWS_AS((void)pair_knn({mixed[0]}, {mixed[1]}, 1, false), data_error);
}
