#include "refop/training.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "refop/geometry.hpp"
#include "refop/meshinterp.hpp"

namespace refop::training {

void validate_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw usage_error("epochs must be >= 1");
  if (cfg.batch_pairs < 1 || cfg.batch_pairs > 4) throw usage_error("batch_pairs must be in 1..4");
  if (!(cfg.base_lr > 0.0) || !(cfg.max_lr > 0.0)) throw usage_error("learning rates must be positive");
  if (cfg.base_lr > cfg.max_lr) throw usage_error("base_lr must not exceed max_lr");
  if (cfg.cycle_len < 2) throw usage_error("cycle_len must be >= 2");
  if (cfg.weight_decay < 0.0) throw usage_error("weight_decay must be nonnegative");
  if (cfg.loss_p != 1 && cfg.loss_p != 2) throw usage_error("loss_p must be 1 or 2");
}

double loss(const Mat& u_hat, const Mat& u, int p) {
  if (u_hat.rows() != u.rows() || u_hat.cols() != u.cols())
    throw usage_error("loss: shape mismatch");
  if (p != 1 && p != 2) throw usage_error("loss: p must be 1 or 2");
  if (u_hat.rows() == 0) throw usage_error("loss: empty input");
  Mat diff = u_hat - u;
  const double total =
      p == 2 ? diff.rowwise().norm().sum() : diff.cwiseAbs().rowwise().sum().sum();
  return total / double(diff.rows());
}

double rel_l2(const Vec& u, const Vec& u_hat) {
  if (u.size() != u_hat.size()) throw usage_error("rel_l2: size mismatch");
  const double den = u.squaredNorm();
  if (den <= 0.0) throw data_error("rel_l2: zero-norm ground truth");
  return std::sqrt((u - u_hat).squaredNorm() / den);
}

double cyclical_lr(long long step, const TrainConfig& cfg) {
  const long long pos = step % cfg.cycle_len;
  const long long half = cfg.cycle_len / 2;
  const double span = cfg.max_lr - cfg.base_lr;
  if (pos <= half) return cfg.base_lr + span * double(pos) / double(half);
  return cfg.max_lr - span * double(pos - half) / double(cfg.cycle_len - half);
}

PairedExample preprocess_pair(const datagen::Sample& ref, const datagen::Sample& query,
                              double gamma_phi) {
  if (ref.geom.components.size() != query.geom.components.size())
    throw data_error("paired samples have different component counts");
  PairedExample ex;
  ex.query_id = query.id;
  ex.ref_id = ref.id;
  ex.pair_tag = query.pair_tag;
  ex.distance = geometry::geometric_distance(ref.geom.param_vector(), query.geom.param_vector());
  geometry::DeformationField field =
      geometry::construct_phi(ref.geom, query.geom, query.nodes, gamma_phi);
  ex.input.query_nodes = query.nodes;
  ex.input.shifts = field.shifts;
  ex.input.u_interp = meshinterp::pushforward(ref, query.nodes, field);
  for (std::size_t i = 0; i < query.geom.components.size(); ++i) {
    const auto& pq = query.geom.components[i].params;
    const auto& pr = ref.geom.components[i].params;
    if (pq.size() != pr.size()) throw data_error("paired components have different param counts");
    Eigen::RowVectorXd d(pq.size());
    for (std::size_t j = 0; j < pq.size(); ++j) d(Eigen::Index(j)) = pq[j] - pr[j];
    ex.input.param_diffs.push_back(d);
  }
  ex.target = query.values;
  return ex;
}

std::vector<PairedExample> preprocess(const std::vector<datagen::Sample>& samples,
                                      const pairing::PairMap& pairs, double gamma_phi) {
  std::unordered_map<int, int> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].id] = int(i);
  std::vector<PairedExample> out(pairs.entries.size());
  parallel_for(int(pairs.entries.size()), [&](int i) {
    const auto& e = pairs.entries[std::size_t(i)];
    auto q = by_id.find(e.query_id), r = by_id.find(e.ref_id);
    if (q == by_id.end() || r == by_id.end()) throw data_error("pair references unknown sample id");
    out[std::size_t(i)] =
        preprocess_pair(samples[std::size_t(r->second)], samples[std::size_t(q->second)], gamma_phi);
  });
  return out;
}

Split split_examples(const std::vector<PairedExample>& examples, std::uint64_t seed) {
  std::vector<int> tags;
  std::unordered_map<int, int> tag_pos;
  for (const auto& ex : examples)
    if (tag_pos.emplace(ex.pair_tag, int(tags.size())).second) tags.push_back(ex.pair_tag);
  Rng rng(seed_stream(seed, 0x5911, 0, 0));
  std::vector<int> order = rng.permutation(int(tags.size()));
  const int n_train = std::min<int>(int(tags.size()),
                                    std::max<int>(1, int(std::llround(0.8 * double(tags.size())))));
  std::vector<bool> in_train(tags.size(), false);
  for (int i = 0; i < n_train; ++i) in_train[std::size_t(order[std::size_t(i)])] = true;
  Split sp;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const int pos = tag_pos.at(examples[i].pair_tag);
    (in_train[std::size_t(pos)] ? sp.train : sp.test).push_back(int(i));
  }
  return sp;
}

AdamState init_adam(const model::ModelParams& p) {
  AdamState st;
  st.m.reserve(p.values.size());
  st.v.reserve(p.values.size());
  for (const auto& w : p.values) {
    st.m.push_back(Mat::Zero(w.rows(), w.cols()));
    st.v.push_back(Mat::Zero(w.rows(), w.cols()));
  }
  return st;
}

void adamw_step(model::ModelParams& p, AdamState& st, const std::vector<Mat>& grads, double lr,
                const TrainConfig& cfg) {
  if (grads.size() != p.values.size() || st.m.size() != p.values.size())
    throw usage_error("adamw_step: state size mismatch");
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  st.step += 1;
  const double bc1 = 1.0 - std::pow(b1, double(st.step));
  const double bc2 = 1.0 - std::pow(b2, double(st.step));
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    Mat& w = p.values[i];
    Mat& m = st.m[i];
    Mat& v = st.v[i];
    const Mat& g = grads[i];
    m = b1 * m + (1.0 - b1) * g;
    v = (b2 * v.array() + (1.0 - b2) * g.array().square()).matrix();
    const auto mhat = m.array() / bc1;
    const auto vhat = v.array() / bc2;
    w.array() -= lr * (mhat / (vhat.sqrt() + eps) + cfg.weight_decay * w.array());
  }
}

TrainState init_state(const model::ModelConfig& cfg) {
  TrainState st;
  st.params = model::init_params(cfg);
  st.adam = init_adam(st.params);
  return st;
}

namespace {

// rows of the example visible to one optimizer step
struct StepView {
  model::ForwardInput input;
  Mat target;
};

StepView subsample(const PairedExample& ex, int nodes_per_step, std::uint64_t seed,
                   long long step, int slot) {
  StepView sv;
  const int n = int(ex.input.query_nodes.rows());
  if (nodes_per_step <= 0 || nodes_per_step >= n) {
    sv.input = ex.input;
    sv.target = ex.target;
    return sv;
  }
  Rng rng(seed_stream(seed, 0x0b5e, std::uint64_t(step), std::uint64_t(slot)));
  std::vector<int> idx = rng.sample_indices(n, nodes_per_step);
  const int k = int(idx.size());
  sv.input.query_nodes.resize(k, ex.input.query_nodes.cols());
  sv.input.u_interp.resize(k, ex.input.u_interp.cols());
  sv.input.shifts.resize(k, ex.input.shifts.cols());
  sv.target.resize(k, ex.target.cols());
  for (int i = 0; i < k; ++i) {
    const int r = idx[std::size_t(i)];
    sv.input.query_nodes.row(i) = ex.input.query_nodes.row(r);
    sv.input.u_interp.row(i) = ex.input.u_interp.row(r);
    sv.input.shifts.row(i) = ex.input.shifts.row(r);
    sv.target.row(i) = ex.target.row(r);
  }
  sv.input.param_diffs = ex.input.param_diffs;
  return sv;
}

}  // namespace

TrainResult train(const std::vector<PairedExample>& examples, const std::vector<int>& train_idx,
                  const model::ModelConfig& mcfg, const TrainConfig& tcfg, TrainState start,
                  const LogFn& on_step) {
  model::validate_config(mcfg);
  validate_config(tcfg);
  if (train_idx.empty()) throw data_error("train: no training pairs");
  for (int i : train_idx)
    if (i < 0 || std::size_t(i) >= examples.size()) throw usage_error("train: index out of range");

  TrainResult res;
  res.state = std::move(start);
  const int npairs = int(train_idx.size());
  const int steps_per_epoch = (npairs + tcfg.batch_pairs - 1) / tcfg.batch_pairs;
  long long step = res.state.adam.step;

  for (int epoch = res.state.epoch; epoch < tcfg.epochs; ++epoch) {
    Rng shuffle_rng(seed_stream(tcfg.seed, 0xe90c, std::uint64_t(epoch), 0));
    std::vector<int> order = shuffle_rng.permutation(npairs);
    double epoch_acc = 0.0;
    for (int b = 0; b < steps_per_epoch; ++b) {
      const double lr = cyclical_lr(step, tcfg);
      const int lo = b * tcfg.batch_pairs;
      const int hi = std::min(npairs, lo + tcfg.batch_pairs);
      const double inv = 1.0 / double(hi - lo);
      std::vector<Mat> grads;
      grads.reserve(res.state.params.values.size());
      for (const auto& w : res.state.params.values) grads.push_back(Mat::Zero(w.rows(), w.cols()));
      double batch_loss = 0.0;
      for (int slot = lo; slot < hi; ++slot) {
        const PairedExample& ex = examples[std::size_t(train_idx[std::size_t(order[std::size_t(slot)])])];
        StepView sv = subsample(ex, tcfg.nodes_per_step, tcfg.seed, step, slot - lo);
        ad::Graph g(true);
        model::TapeParams tp = model::register_params(g, res.state.params, mcfg, true);
        ad::Var uh = model::tape_forward(g, tp, sv.input, mcfg);
        ad::Var l = g.pnorm_loss(uh, sv.target, tcfg.loss_p);
        g.backward(l, inv);
        batch_loss += inv * g.val(l)(0, 0);
        for (std::size_t pi = 0; pi < grads.size(); ++pi) grads[pi] += g.grad(tp.vars[pi]);
      }
      if (!std::isfinite(batch_loss))
        throw numeric_error("train: non-finite loss at step " + std::to_string(step));
      adamw_step(res.state.params, res.state.adam, grads, lr, tcfg);
      step = res.state.adam.step;
      StepLog sl{step - 1, epoch, lr, batch_loss};
      res.log.push_back(sl);
      if (on_step) on_step(sl);
      epoch_acc += batch_loss;
    }
    res.state.epoch = epoch + 1;
    res.epoch_loss.push_back(epoch_acc / double(steps_per_epoch));
  }
  return res;
}

EvalReport evaluate(const std::vector<PairedExample>& examples, const std::vector<int>& idx,
                    const model::ModelParams& p, const model::ModelConfig& cfg) {
  EvalReport rep;
  const int ds = cfg.target_dim;
  rep.model_err.assign(std::size_t(ds), 0.0);
  rep.baseline_err.assign(std::size_t(ds), 0.0);
  rep.records.resize(idx.size());
  std::vector<std::vector<double>> mdl(idx.size()), base(idx.size());
  parallel_for(int(idx.size()), [&](int i) {
    const PairedExample& ex = examples.at(std::size_t(idx[std::size_t(i)]));
    model::ForwardResult fr = model::forward(ex.input, p, cfg);
    PairRecord rec;
    rec.query_id = ex.query_id;
    rec.ref_id = ex.ref_id;
    rec.distance = ex.distance;
    std::vector<double> me(std::size_t(ds), 0.0), be(std::size_t(ds), 0.0);
    for (int c = 0; c < ds; ++c) {
      me[std::size_t(c)] = rel_l2(ex.target.col(c), fr.u_hat.col(c));
      be[std::size_t(c)] = rel_l2(ex.target.col(c), ex.input.u_interp.col(c));
      rec.model_err += me[std::size_t(c)] / double(ds);
      rec.baseline_err += be[std::size_t(c)] / double(ds);
    }
    rep.records[std::size_t(i)] = rec;
    mdl[std::size_t(i)] = std::move(me);
    base[std::size_t(i)] = std::move(be);
  });
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int c = 0; c < ds; ++c) {
      rep.model_err[std::size_t(c)] += mdl[i][std::size_t(c)] / double(idx.size());
      rep.baseline_err[std::size_t(c)] += base[i][std::size_t(c)] / double(idx.size());
    }
  return rep;
}

}  // namespace refop::training
