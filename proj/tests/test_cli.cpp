#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "refop/io.hpp"

using namespace refop;
namespace fs = std::filesystem;

namespace {

std::string g_bin;  // the refop executable under test, from argv[1]

struct RunResult {
  int code = -1;
  std::string out;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = g_bin + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunResult r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

// Value after `key ` on the first matching output line.
std::string field(const std::string& out, const std::string& key) {
  std::istringstream iss(out);
  std::string line;
  while (std::getline(iss, line))
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream iss(slurp(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(iss, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path("cli_scratch") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
  REQUIRE(out.good());
}

const char* kTinyConfig = R"({
  "model": {"hidden_dim": 8, "layers": 1, "heads": 2, "gamma": 0.3, "mlp_hidden": 16, "seed": 7},
  "train": {"epochs": 3, "batch_pairs": 1, "base_lr": 1e-4, "max_lr": 1e-3,
            "cycle_len": 12, "weight_decay": 1e-4, "nodes_per_step": 64, "seed": 7},
  "gamma_phi": 0.1
})";

// A zero-step checkpoint whose decoder is still at its zero initialization,
// so the model prediction equals the pushforward baseline exactly.
std::string write_fresh_checkpoint(const fs::path& dir, std::uint64_t seed) {
  model::ModelConfig mc;
  mc.hidden_dim = 8;
  mc.layers = 1;
  mc.heads = 2;
  mc.mlp_hidden = 16;
  mc.seed = seed;
  model::ModelParams p = model::init_params(mc);
  std::vector<Mat> zeros;
  for (const auto& v : p.values) zeros.push_back(Mat::Zero(v.rows(), v.cols()));
  const auto path = (dir / "fresh.refop").string();
  io::write_checkpoint(path, {mc, p, zeros, zeros, 0});
  return path;
}

}  // namespace

TEST_CASE("gen: pair count, loadable output, seed determinism") {
  const auto dir = scratch("gen");
  auto a = run_cli("gen --pairs 10 --grid 16 --holes 1:3 --seed 7 --out " + (dir / "a").string());
  CHECK(a.code == 0);
  CHECK(field(a.out, "samples") == "20");

  const auto ds = io::load_dataset((dir / "a" / "manifest.refop").string());
  CHECK(ds.samples.size() == 20);
  CHECK(ds.manifest.pairs.entries.size() == 20);  // both directions of 10 tags
  CHECK(field(a.out, "config_hash") == hex16(io::gen_config_hash(ds.manifest.config)));

  auto b = run_cli("gen --pairs 10 --grid 16 --holes 1:3 --seed 7 --out " + (dir / "b").string());
  CHECK(b.code == 0);
  CHECK(field(b.out, "config_hash") == field(a.out, "config_hash"));
  CHECK(slurp(dir / "a" / "manifest.refop") == slurp(dir / "b" / "manifest.refop"));
}

TEST_CASE("gen: flag validation exits 2") {
  const auto dir = scratch("gen_bad");
  const std::string out = " --out " + (dir / "x").string();
  CHECK(run_cli("gen --holes 4" + out).code == 2);
  CHECK(run_cli("gen --holes 0:2" + out).code == 2);
  CHECK(run_cli("gen --pairs 0" + out).code == 2);
  CHECK(run_cli("gen --grid 4" + out).code == 2);
  CHECK(run_cli("gen --problem stokes" + out).code == 2);
  CHECK(run_cli("gen --kind hexagon" + out).code == 2);
  CHECK(run_cli("gen --radius 0.2:0.1" + out).code == 2);
  CHECK(run_cli("gen --pairs 1").code == 2);  // --out is required
  CHECK(run_cli("gen --frobnicate 3" + out).code == 2);
  CHECK(run_cli("").code == 2);  // a subcommand is required
  CHECK(run_cli("--help").code == 0);
}

TEST_CASE("train: smoke run, deterministic rerun, seed override") {
  const auto dir = scratch("train");
  auto g = run_cli("gen --pairs 2 --grid 16 --holes 1 --seed 5 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  write_text(dir / "cfg.json", kTinyConfig);

  const auto t0 = std::chrono::steady_clock::now();
  auto r1 = run_cli("train --data " + (dir / "ds").string() + " --config " +
                    (dir / "cfg.json").string() + " --out " + (dir / "run1").string());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(r1.code == 0);
  CHECK(secs < 60.0);
  CHECK(fs::exists(dir / "run1" / "checkpoint.refop"));
  CHECK(fs::exists(dir / "run1" / "train_log.txt"));
  CHECK(field(r1.out, "final_epoch_loss") != "");

  auto ck = io::read_checkpoint((dir / "run1" / "checkpoint.refop").string());
  CHECK(ck.step == 12);  // 3 epochs x 4 pairs, batch 1
  CHECK(ck.config.seed == 7);

  auto r2 = run_cli("train --data " + (dir / "ds").string() + " --config " +
                    (dir / "cfg.json").string() + " --out " + (dir / "run2").string());
  CHECK(r2.code == 0);
  CHECK(field(r2.out, "final_epoch_loss") == field(r1.out, "final_epoch_loss"));
  CHECK(slurp(dir / "run1" / "train_log.txt") == slurp(dir / "run2" / "train_log.txt"));
  CHECK(slurp(dir / "run1" / "checkpoint.refop") == slurp(dir / "run2" / "checkpoint.refop"));

  auto r3 = run_cli("train --data " + (dir / "ds").string() + " --config " +
                    (dir / "cfg.json").string() + " --seed 123 --out " + (dir / "run3").string());
  CHECK(r3.code == 0);
  CHECK(io::read_checkpoint((dir / "run3" / "checkpoint.refop").string()).config.seed == 123);
  CHECK(slurp(dir / "run3" / "train_log.txt").find("model_seed 123") != std::string::npos);
}

TEST_CASE("train: config schema and missing data exit 3") {
  const auto dir = scratch("train_bad");
  auto g = run_cli("gen --pairs 1 --grid 16 --holes 1 --seed 5 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  const std::string base =
      "train --data " + (dir / "ds").string() + " --out " + (dir / "out").string();

  write_text(dir / "badkey.json", R"({"model": {"hidden_dims": 8}})");
  auto r = run_cli(base + " --config " + (dir / "badkey.json").string());
  CHECK(r.code == 3);
  CHECK(r.out.find("hidden_dims") != std::string::npos);

  write_text(dir / "badtop.json", R"({"mode": {}})");
  CHECK(run_cli(base + " --config " + (dir / "badtop.json").string()).code == 3);

  write_text(dir / "syntax.json", "{");
  CHECK(run_cli(base + " --config " + (dir / "syntax.json").string()).code == 3);

  write_text(dir / "badval.json", R"({"model": {"heads": 3}})");  // 8 % 3 != 0
  CHECK(run_cli(base + " --config " + (dir / "badval.json").string()).code == 3);

  write_text(dir / "badgamma.json", R"({"model": {"gamma": "huge"}})");
  CHECK(run_cli(base + " --config " + (dir / "badgamma.json").string()).code == 3);

  CHECK(run_cli("train --data " + (dir / "nope").string() + " --out " + (dir / "o2").string())
            .code == 3);
}

TEST_CASE("train: divergent loss exits 4") {
  const auto dir = scratch("train_nan");
  auto g = run_cli("gen --pairs 2 --grid 16 --holes 1 --seed 5 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  write_text(dir / "boom.json", R"({
    "model": {"hidden_dim": 8, "layers": 1, "heads": 2, "mlp_hidden": 16},
    "train": {"epochs": 1, "base_lr": 1e200, "max_lr": 1e200, "cycle_len": 4,
              "weight_decay": 0, "nodes_per_step": 32}
  })");
  auto r = run_cli("train --data " + (dir / "ds").string() + " --config " +
                   (dir / "boom.json").string() + " --out " + (dir / "out").string());
  CHECK(r.code == 4);
}

TEST_CASE("eval: identical pairs zero the baseline column; CSV row count matches") {
  const auto dir = scratch("eval_self");
  auto g = run_cli("gen --pairs 3 --grid 16 --holes 1 --seed 13 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  auto ds = io::load_dataset((dir / "ds" / "manifest.refop").string());

  // Rewrite the pairing so every sample is its own reference.
  pairing::PairMap self;
  for (const auto& s : ds.samples) self.entries.push_back({s.id, s.id, 0.0});
  io::write_dataset((dir / "selfds").string(), ds.manifest.config, ds.samples, self);

  const auto ckpt = write_fresh_checkpoint(dir, 21);
  auto r = run_cli("eval --data " + (dir / "selfds").string() + " --checkpoint " + ckpt +
                   " --report " + (dir / "rep.txt").string());
  CHECK(r.code == 0);
  CHECK(field(r.out, "pairs") == "6");

  const auto rows = read_csv(dir / "rep.txt.csv");
  REQUIRE(rows.size() == 7);  // header + one row per pair
  CHECK(rows[0] == std::vector<std::string>{"query_id", "ref_id", "distance", "model_rel_l2",
                                            "baseline_rel_l2"});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 5);
    CHECK(rows[i][0] == rows[i][1]);
    CHECK(std::stod(rows[i][2]) == 0.0);
    CHECK(std::stod(rows[i][4]) == 0.0);  // pushforward of an identical pair is exact
    CHECK(std::stod(rows[i][3]) == 0.0);  // zero-init decoder predicts the baseline
  }

  const std::string rep = slurp(dir / "rep.txt");
  CHECK(rep.find("REFOP-REPORT v1") == 0);
  CHECK(rep.find("baseline_rel_l2 0\n") != std::string::npos);
  CHECK(field(rep, "config_hash") == hex16(io::gen_config_hash(ds.manifest.config)));
  CHECK(field(rep, "model_seed") == "21");
}

TEST_CASE("eval: knn k=1 matches an exhaustive nearest-neighbor search") {
  const auto dir = scratch("eval_knn");
  auto g = run_cli("gen --pairs 6 --grid 16 --holes 1 --seed 11 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  const auto ckpt = write_fresh_checkpoint(dir, 3);
  auto r = run_cli("eval --data " + (dir / "ds").string() + " --checkpoint " + ckpt +
                   " --pairing knn --k 1 --report " + (dir / "rep.txt").string());
  CHECK(r.code == 0);

  auto ds = io::load_dataset((dir / "ds" / "manifest.refop").string());
  auto nearest = [&](int q) {
    int best = -1;
    double best_d = 0.0;
    const auto pq = ds.samples[std::size_t(q)].geom.param_vector();
    for (const auto& s : ds.samples) {
      if (s.id == q) continue;
      const auto pr = s.geom.param_vector();
      double d2 = 0.0;
      for (std::size_t i = 0; i < pq.size(); ++i) d2 += (pq[i] - pr[i]) * (pq[i] - pr[i]);
      const double d = std::sqrt(d2);
      if (best < 0 || d < best_d || (d == best_d && s.id < best)) {
        best = s.id;
        best_d = d;
      }
    }
    return std::pair<int, double>(best, best_d);
  };

  const auto rows = read_csv(dir / "rep.txt.csv");
  REQUIRE(rows.size() == 1 + ds.samples.size());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const int q = std::stoi(rows[i][0]);
    const auto [ref, d] = nearest(q);
    CHECK(std::stoi(rows[i][1]) == ref);
    CHECK(std::stod(rows[i][2]) == doctest::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("eval: missing inputs and bad flags") {
  const auto dir = scratch("eval_bad");
  auto g = run_cli("gen --pairs 1 --grid 16 --holes 1 --seed 2 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  const auto ckpt = write_fresh_checkpoint(dir, 1);
  const std::string data = (dir / "ds").string();
  const std::string rep = (dir / "r.txt").string();

  CHECK(run_cli("eval --data " + (dir / "nope").string() + " --checkpoint " + ckpt + " --report " +
                rep).code == 3);
  CHECK(run_cli("eval --data " + data + " --checkpoint " + (dir / "nope.refop").string() +
                " --report " + rep).code == 3);
  CHECK(run_cli("eval --data " + data + " --checkpoint " + ckpt + " --pairing fuzzy --report " +
                rep).code == 2);
  CHECK(run_cli("eval --data " + data + " --checkpoint " + ckpt +
                " --pairing knn --k 0 --report " + rep).code == 2);
  CHECK(run_cli("eval --data " + data + " --checkpoint " + ckpt + " --gamma-phi 0 --report " +
                rep).code == 2);
}

TEST_CASE("sweep-gamma: one row per width, ascending, inf last") {
  const auto dir = scratch("sweep");
  auto g = run_cli("gen --pairs 3 --grid 16 --holes 1 --seed 9 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  write_text(dir / "cfg.json", R"({
    "model": {"hidden_dim": 8, "layers": 1, "heads": 2, "mlp_hidden": 16, "seed": 3},
    "train": {"epochs": 2, "cycle_len": 8, "nodes_per_step": 64, "seed": 3}
  })");
  auto r = run_cli("sweep-gamma --data " + (dir / "ds").string() + " --gammas inf,0.3,1.5" +
                   " --config " + (dir / "cfg.json").string() + " --out " + (dir / "sw").string());
  CHECK(r.code == 0);

  const auto rows = read_csv(dir / "sw" / "sweep_gamma.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == std::vector<std::string>{"gamma", "model_rel_l2", "baseline_rel_l2"});
  CHECK(std::stod(rows[1][0]) == doctest::Approx(0.3));
  CHECK(std::stod(rows[2][0]) == doctest::Approx(1.5));
  CHECK(rows[3][0] == "inf");
  // The baseline never depends on the width.
  CHECK(rows[1][2] == rows[2][2]);
  CHECK(rows[1][2] == rows[3][2]);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(std::isfinite(std::stod(rows[i][1])));
    CHECK(std::stod(rows[i][1]) > 0.0);
  }
  CHECK(slurp(dir / "sw" / "sweep_gamma.csv").rfind("# config_hash " +
                                                    field(r.out, "config_hash"), 0) == 0);
}

TEST_CASE("sweep-gamma: list validation") {
  const auto dir = scratch("sweep_bad");
  auto g = run_cli("gen --pairs 3 --grid 16 --holes 1 --seed 9 --out " + (dir / "ds").string());
  REQUIRE(g.code == 0);
  const std::string base = "sweep-gamma --data " + (dir / "ds").string() + " --out " +
                           (dir / "sw").string() + " --gammas ";
  CHECK(run_cli(base + "','").code == 2);
  CHECK(run_cli(base + "0").code == 2);
  CHECK(run_cli(base + "0.3,-1").code == 2);
  CHECK(run_cli(base + "0.3,huge").code == 2);
}

int main(int argc, char** argv) {
  if (argc > 1 && argv[1][0] != '-') {
    g_bin = argv[1];
    --argc;
    for (int i = 1; i < argc; ++i) argv[i] = argv[i + 1];
  }
  if (g_bin.empty()) {
    std::fprintf(stderr, "usage: test_cli <path to refop binary> [doctest flags]\n");
    return 1;
  }
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
