#include "refop/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "refop/common.hpp"
#include "refop/datagen.hpp"
#include "refop/io.hpp"
#include "refop/model.hpp"
#include "refop/pairing.hpp"
#include "refop/training.hpp"

namespace refop::cli {
namespace {

// ---- small parsers -------------------------------------------------------

// "lo:hi" or a single value meaning lo == hi.
template <typename T, typename Parse>
std::pair<T, T> parse_range(const std::string& s, const char* flag, Parse parse) {
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) {
      T v = parse(s);
      return {v, v};
    }
    return {parse(s.substr(0, colon)), parse(s.substr(colon + 1))};
  } catch (const usage_error&) {
    throw;
  } catch (...) {
    throw usage_error(std::string(flag) + ": cannot parse '" + s + "' (want VALUE or LO:HI)");
  }
}

int parse_int_strict(const std::string& s) {
  std::size_t pos = 0;
  int v = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

double parse_double_strict(const std::string& s) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

// Comma-separated positive values; "inf" allowed.
std::vector<double> parse_gamma_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    if (tok.empty()) continue;
    double g;
    if (tok == "inf") {
      g = std::numeric_limits<double>::infinity();
    } else {
      try {
        g = parse_double_strict(tok);
      } catch (...) {
        throw usage_error("--gammas: cannot parse '" + tok + "'");
      }
    }
    if (!(g > 0.0)) throw usage_error("--gammas: values must be positive");
    out.push_back(g);
  }
  if (out.empty()) throw usage_error("--gammas: empty list");
  return out;
}

std::string fmt_gamma(double g) { return std::isinf(g) ? "inf" : fmt_g17(g); }

// --data accepts either the manifest file or the dataset directory.
std::string resolve_manifest(const std::string& data) {
  namespace fs = std::filesystem;
  if (fs::is_directory(data)) return (fs::path(data) / "manifest.refop").string();
  return data;
}

// ---- run configuration (JSON) --------------------------------------------

struct RunConfig {
  model::ModelConfig model;
  training::TrainConfig train;
  double gamma_phi = 0.1;
};

using Json = nlohmann::json;

[[noreturn]] void config_fail(const std::string& what) { throw data_error("config: " + what); }

void check_keys(const Json& obj, const std::vector<std::string>& allowed, const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      config_fail("unknown key '" + it.key() + "' in " + where);
  }
}

int get_int(const Json& j, const char* key, int dflt) {
  if (!j.contains(key)) return dflt;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) config_fail(std::string("'") + key + "' must be an integer");
  return v.get<int>();
}

double get_num(const Json& j, const char* key, double dflt) {
  if (!j.contains(key)) return dflt;
  const auto& v = j.at(key);
  if (!v.is_number()) config_fail(std::string("'") + key + "' must be a number");
  return v.get<double>();
}

std::uint64_t get_seed(const Json& j, const char* key, std::uint64_t dflt) {
  if (!j.contains(key)) return dflt;
  const auto& v = j.at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
    return std::uint64_t(v.get<std::int64_t>());
  config_fail(std::string("'") + key + "' must be a nonnegative integer");
}

double get_gamma(const Json& j, const char* key, double dflt) {
  if (!j.contains(key)) return dflt;
  const auto& v = j.at(key);
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    config_fail(std::string("'") + key + "' must be a positive number or \"inf\"");
  }
  if (!v.is_number()) config_fail(std::string("'") + key + "' must be a positive number or \"inf\"");
  return v.get<double>();
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw data_error(path + ": cannot open");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    config_fail(e.what());
  }
  if (!j.is_object()) config_fail("top level must be an object");
  check_keys(j, {"model", "train", "gamma_phi"}, "the top level");
  if (j.contains("model")) {
    const Json& m = j.at("model");
    if (!m.is_object()) config_fail("'model' must be an object");
    check_keys(m,
               {"hidden_dim", "layers", "heads", "gamma", "rfm_features", "target_dim",
                "spatial_dim", "param_dim", "mlp_hidden", "attention", "seed"},
               "'model'");
    auto& c = rc.model;
    c.hidden_dim = get_int(m, "hidden_dim", c.hidden_dim);
    c.layers = get_int(m, "layers", c.layers);
    c.heads = get_int(m, "heads", c.heads);
    c.gamma = get_gamma(m, "gamma", c.gamma);
    c.rfm_features = get_int(m, "rfm_features", c.rfm_features);
    c.target_dim = get_int(m, "target_dim", c.target_dim);
    c.spatial_dim = get_int(m, "spatial_dim", c.spatial_dim);
    c.param_dim = get_int(m, "param_dim", c.param_dim);
    c.mlp_hidden = get_int(m, "mlp_hidden", c.mlp_hidden);
    if (m.contains("attention")) {
      if (!m.at("attention").is_string()) config_fail("'attention' must be a string");
      c.attention = model::attention_from_name(m.at("attention").get<std::string>());
    }
    c.seed = get_seed(m, "seed", c.seed);
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    if (!t.is_object()) config_fail("'train' must be an object");
    check_keys(t,
               {"epochs", "batch_pairs", "base_lr", "max_lr", "cycle_len", "weight_decay",
                "loss_p", "nodes_per_step", "seed"},
               "'train'");
    auto& c = rc.train;
    c.epochs = get_int(t, "epochs", c.epochs);
    c.batch_pairs = get_int(t, "batch_pairs", c.batch_pairs);
    c.base_lr = get_num(t, "base_lr", c.base_lr);
    c.max_lr = get_num(t, "max_lr", c.max_lr);
    c.cycle_len = get_int(t, "cycle_len", c.cycle_len);
    c.weight_decay = get_num(t, "weight_decay", c.weight_decay);
    c.loss_p = get_int(t, "loss_p", c.loss_p);
    c.nodes_per_step = get_int(t, "nodes_per_step", c.nodes_per_step);
    c.seed = get_seed(t, "seed", c.seed);
  }
  rc.gamma_phi = get_num(j, "gamma_phi", rc.gamma_phi);
  if (!(rc.gamma_phi > 0.0) || std::isinf(rc.gamma_phi))
    config_fail("'gamma_phi' must be finite and positive");
  try {
    model::validate_config(rc.model);
    training::validate_config(rc.train);
  } catch (const usage_error& e) {
    config_fail(e.what());
  }
  return rc;
}

// ---- subcommand bodies -----------------------------------------------------

struct GenArgs {
  std::string problem = "poisson-holes";
  int pairs = 1;
  int grid = 64;
  std::string holes = "1:3";
  std::string kind = "circle";
  std::string radius = "0.08:0.18";
  double tol = 1e-8;
  int k_boundary = 64;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  datagen::GenConfig cfg;
  cfg.problem = [&] {
    try {
      return datagen::problem_from_name(a.problem);
    } catch (const std::exception&) {
      throw usage_error("--problem: want poisson-holes or annulus, got '" + a.problem + "'");
    }
  }();
  if (a.pairs < 1) throw usage_error("--pairs must be >= 1");
  cfg.n_pairs = a.pairs;
  if (a.grid < 8) throw usage_error("--grid must be >= 8");
  cfg.grid = a.grid;
  std::tie(cfg.holes_lo, cfg.holes_hi) = parse_range<int>(a.holes, "--holes", parse_int_strict);
  if (cfg.holes_lo < 1 || cfg.holes_hi < cfg.holes_lo || cfg.holes_hi > datagen::kMaxHoles)
    throw usage_error("--holes: want a range within 1.." + std::to_string(datagen::kMaxHoles));
  cfg.kind = [&] {
    try {
      return geometry::kind_from_name(a.kind);
    } catch (const std::exception&) {
      throw usage_error("--kind: want circle or square, got '" + a.kind + "'");
    }
  }();
  std::tie(cfg.radius_lo, cfg.radius_hi) =
      parse_range<double>(a.radius, "--radius", parse_double_strict);
  if (!(cfg.radius_lo > 0.0) || cfg.radius_hi < cfg.radius_lo)
    throw usage_error("--radius: want 0 < LO <= HI");
  if (!(a.tol > 0.0)) throw usage_error("--tol must be positive");
  cfg.solver_tol = a.tol;
  if (a.k_boundary < 8) throw usage_error("--k-boundary must be >= 8");
  cfg.k_boundary = a.k_boundary;
  cfg.seed = a.seed;

  auto [samples, pairs] = datagen::generate_pairs(cfg);
  io::write_dataset(a.out, cfg, samples, pairs);
  const auto manifest = (std::filesystem::path(a.out) / "manifest.refop").string();
  std::cout << "manifest " << manifest << "\n";
  std::cout << "config_hash " << hex16(io::gen_config_hash(cfg)) << "\n";
  std::cout << "samples " << samples.size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_train(const TrainArgs& a) {
  io::Dataset ds = io::load_dataset(resolve_manifest(a.data));
  RunConfig rc = load_run_config(a.config);
  if (a.seed_given) {
    rc.model.seed = a.seed;
    rc.train.seed = a.seed;
  }
  if (!ds.samples.empty() && int(ds.samples[0].values.cols()) != rc.model.target_dim)
    throw data_error("train: dataset target dimension " +
                     std::to_string(ds.samples[0].values.cols()) + " != config target_dim " +
                     std::to_string(rc.model.target_dim));

  auto examples = training::preprocess(ds.samples, ds.manifest.pairs, rc.gamma_phi);
  auto split = training::split_examples(examples, ds.manifest.config.seed);
  if (split.train.empty()) throw data_error("train: empty train split");

  std::filesystem::create_directories(a.out);
  const auto log_path = (std::filesystem::path(a.out) / "train_log.txt").string();
  const auto ckpt_path = (std::filesystem::path(a.out) / "checkpoint.refop").string();
  const std::string hash = hex16(io::gen_config_hash(ds.manifest.config));

  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw data_error(log_path + ": cannot open for writing");
  log << "config_hash " << hash << "\n";
  log << "model_seed " << rc.model.seed << "\n";
  log << "train_seed " << rc.train.seed << "\n";
  auto on_step = [&log](const training::StepLog& s) {
    log << "step " << s.step << " epoch " << s.epoch << " lr " << fmt_g17(s.lr) << " loss "
        << fmt_g17(s.loss) << "\n";
  };

  auto res = training::train(examples, split.train, rc.model, rc.train,
                             training::init_state(rc.model), on_step);
  log.flush();
  if (!log.good()) throw data_error(log_path + ": write failed");

  io::write_checkpoint(ckpt_path, {rc.model, res.state.params, res.state.adam.m, res.state.adam.v,
                                   res.state.adam.step});

  std::cout << "config_hash " << hash << "\n";
  std::cout << "train_pairs " << split.train.size() << " test_pairs " << split.test.size() << "\n";
  std::cout << "steps " << res.state.adam.step << "\n";
  std::cout << "final_epoch_loss "
            << (res.epoch_loss.empty() ? std::string("-") : fmt_g17(res.epoch_loss.back())) << "\n";
  std::cout << "checkpoint " << ckpt_path << "\n";
  std::cout << "log " << log_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string pairing = "natural";
  int k = 1;
  double gamma_phi = 0.1;
  std::string report;
};

int cmd_eval(const EvalArgs& a) {
  io::Dataset ds = io::load_dataset(resolve_manifest(a.data));
  io::Checkpoint ckpt = io::read_checkpoint(a.checkpoint);
  if (!(a.gamma_phi > 0.0) || std::isinf(a.gamma_phi))
    throw usage_error("--gamma-phi must be finite and positive");

  pairing::PairMap pm;
  if (a.pairing == "natural") {
    pm = ds.manifest.pairs;
  } else if (a.pairing == "knn") {
    if (a.k < 1) throw usage_error("--k must be >= 1");
    pm = pairing::pair_knn(ds.samples, ds.samples, a.k, true);
  } else {
    throw usage_error("--pairing: want natural or knn, got '" + a.pairing + "'");
  }

  if (!ds.samples.empty() && int(ds.samples[0].values.cols()) != ckpt.config.target_dim)
    throw data_error("eval: dataset target dimension " +
                     std::to_string(ds.samples[0].values.cols()) +
                     " != checkpoint target_dim " + std::to_string(ckpt.config.target_dim));

  auto examples = training::preprocess(ds.samples, pm, a.gamma_phi);
  if (!examples.empty() &&
      int(examples[0].input.param_diffs[0].size()) != ckpt.config.param_dim)
    throw data_error("eval: dataset parameter dimension " +
                     std::to_string(examples[0].input.param_diffs[0].size()) +
                     " != checkpoint param_dim " + std::to_string(ckpt.config.param_dim));
  std::vector<int> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);

  auto rep = training::evaluate(examples, idx, ckpt.params, ckpt.config);
  rep.config_hash = hex16(io::gen_config_hash(ds.manifest.config));
  rep.model_seed = ckpt.config.seed;
  rep.data_seed = ds.manifest.config.seed;

  io::write_report(a.report, rep);
  io::write_pair_csv(a.report + ".csv", rep);

  std::cout << "config_hash " << rep.config_hash << "\n";
  std::cout << "pairs " << rep.records.size() << "\n";
  for (std::size_t c = 0; c < rep.model_err.size(); ++c)
    std::cout << "component " << c << " model_rel_l2 " << fmt_g17(rep.model_err[c])
              << " baseline_rel_l2 " << fmt_g17(rep.baseline_err[c]) << "\n";
  std::cout << "report " << a.report << "\n";
  std::cout << "csv " << a.report << ".csv\n";
  return 0;
}

struct SweepArgs {
  std::string data;
  std::string gammas;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_sweep_gamma(const SweepArgs& a) {
  std::vector<double> gammas = parse_gamma_list(a.gammas);
  std::sort(gammas.begin(), gammas.end());  // inf compares greatest, so it lands last
  io::Dataset ds = io::load_dataset(resolve_manifest(a.data));
  RunConfig rc = load_run_config(a.config);
  if (a.seed_given) {
    rc.model.seed = a.seed;
    rc.train.seed = a.seed;
  }
  if (!ds.samples.empty() && int(ds.samples[0].values.cols()) != rc.model.target_dim)
    throw data_error("sweep-gamma: dataset target dimension " +
                     std::to_string(ds.samples[0].values.cols()) + " != config target_dim " +
                     std::to_string(rc.model.target_dim));

  auto examples = training::preprocess(ds.samples, ds.manifest.pairs, rc.gamma_phi);
  auto split = training::split_examples(examples, ds.manifest.config.seed);
  if (split.train.empty()) throw data_error("sweep-gamma: empty train split");
  if (split.test.empty())
    throw data_error("sweep-gamma: empty test split (need at least 2 pair tags)");

  const std::string hash = hex16(io::gen_config_hash(ds.manifest.config));
  std::filesystem::create_directories(a.out);
  const auto csv_path = (std::filesystem::path(a.out) / "sweep_gamma.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw data_error(csv_path + ": cannot open for writing");
  csv << "# config_hash " << hash << "\n";
  csv << "gamma,model_rel_l2,baseline_rel_l2\n";

  std::cout << "config_hash " << hash << "\n";
  std::cout << "train_pairs " << split.train.size() << " test_pairs " << split.test.size() << "\n";
  for (double g : gammas) {
    model::ModelConfig mc = rc.model;
    mc.gamma = g;
    auto res =
        training::train(examples, split.train, mc, rc.train, training::init_state(mc), {});
    auto rep = training::evaluate(examples, split.test, res.state.params, mc);
    double model_err = 0.0, baseline_err = 0.0;
    for (std::size_t c = 0; c < rep.model_err.size(); ++c) {
      model_err += rep.model_err[c];
      baseline_err += rep.baseline_err[c];
    }
    model_err /= double(rep.model_err.size());
    baseline_err /= double(rep.baseline_err.size());
    csv << fmt_gamma(g) << "," << fmt_g17(model_err) << "," << fmt_g17(baseline_err) << "\n";
    std::cout << "gamma " << fmt_gamma(g) << " model_rel_l2 " << fmt_g17(model_err)
              << " baseline_rel_l2 " << fmt_g17(baseline_err) << "\n";
  }
  csv.flush();
  if (!csv.good()) throw data_error(csv_path + ": write failed");
  std::cout << "csv " << csv_path << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"reference neural operator pipeline: datasets, training, evaluation"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a paired PDE dataset");
  gen->add_option("--problem", ga.problem, "poisson-holes or annulus");
  gen->add_option("--pairs", ga.pairs, "number of reference/query pairs");
  gen->add_option("--grid", ga.grid, "lattice resolution per side");
  gen->add_option("--holes", ga.holes, "hole count, N or LO:HI");
  gen->add_option("--kind", ga.kind, "hole shape, circle or square");
  gen->add_option("--radius", ga.radius, "hole radius range, R or LO:HI");
  gen->add_option("--tol", ga.tol, "solver relative residual");
  gen->add_option("--k-boundary", ga.k_boundary, "boundary points per component");
  gen->add_option("--seed", ga.seed, "generation seed");
  gen->add_option("--out", ga.out, "output dataset directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  train->add_option("--data", ta.data, "dataset directory or manifest path")->required();
  train->add_option("--config", ta.config, "JSON run configuration");
  train->add_option("--out", ta.out, "output directory (checkpoint + log)")->required();
  auto* tseed = train->add_option("--seed", ta.seed, "overrides model and train seeds");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against the pushforward baseline");
  eval->add_option("--data", ea.data, "dataset directory or manifest path")->required();
  eval->add_option("--checkpoint", ea.checkpoint, "trained checkpoint path")->required();
  eval->add_option("--pairing", ea.pairing, "natural or knn");
  eval->add_option("--k", ea.k, "neighbors per query (knn pairing)");
  eval->add_option("--gamma-phi", ea.gamma_phi, "deformation kernel width");
  eval->add_option("--report", ea.report, "report path (CSV lands at PATH.csv)")->required();

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep-gamma", "train and evaluate across locality widths");
  sweep->add_option("--data", sa.data, "dataset directory or manifest path")->required();
  sweep->add_option("--gammas", sa.gammas, "comma-separated widths, e.g. 0.3,inf")->required();
  sweep->add_option("--config", sa.config, "JSON run configuration");
  sweep->add_option("--out", sa.out, "output directory for the sweep CSV")->required();
  auto* sseed = sweep->add_option("--seed", sa.seed, "overrides model and train seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  ta.seed_given = tseed->count() > 0;
  sa.seed_given = sseed->count() > 0;

  try {
    if (gen->parsed()) return cmd_gen(ga);
    if (train->parsed()) return cmd_train(ta);
    if (eval->parsed()) return cmd_eval(ea);
    if (sweep->parsed()) return cmd_sweep_gamma(sa);
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace refop::cli
