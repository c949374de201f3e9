#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refop/model.hpp"
#include "refop/pairing.hpp"
#include "refop/sample.hpp"

namespace refop::training {

struct TrainConfig {
  int epochs = 100;
  int batch_pairs = 1;  // gradient accumulation over 1..4 pairs
  double base_lr = 1e-4;
  double max_lr = 1e-3;
  int cycle_len = 2000;
  double weight_decay = 1e-4;
  int loss_p = 2;
  int nodes_per_step = 384;  // <= 0 trains on all nodes
  std::uint64_t seed = 0;
};

void validate_config(const TrainConfig& cfg);

// Mean over nodes of the row p-norm of u_hat - u.
double loss(const Mat& u_hat, const Mat& u, int p);

// sqrt(sum |u - u_hat|^2 / sum |u|^2); throws data_error on zero-norm truth.
double rel_l2(const Vec& u, const Vec& u_hat);

// Triangular wave: base -> max over the first half cycle, back down over the
// second; period cycle_len steps.
double cyclical_lr(long long step, const TrainConfig& cfg);

// One preprocessed reference/query pair.
struct PairedExample {
  int query_id = 0;
  int ref_id = 0;
  int pair_tag = 0;
  double distance = 0.0;
  model::ForwardInput input;  // full query node set
  Mat target;                 // query values
};

PairedExample preprocess_pair(const datagen::Sample& ref, const datagen::Sample& query,
                              double gamma_phi);

// Preprocesses every map entry (parallel across pairs).
std::vector<PairedExample> preprocess(const std::vector<datagen::Sample>& samples,
                                      const pairing::PairMap& pairs, double gamma_phi);

// 8:2 split; all examples sharing a pair_tag land on the same side.
struct Split {
  std::vector<int> train, test;
};
Split split_examples(const std::vector<PairedExample>& examples, std::uint64_t seed);

struct AdamState {
  std::vector<Mat> m, v;
  long long step = 0;  // completed optimizer steps
};

AdamState init_adam(const model::ModelParams& p);

// Decoupled weight decay; bias correction by st.step.
void adamw_step(model::ModelParams& p, AdamState& st, const std::vector<Mat>& grads, double lr,
                const TrainConfig& cfg);

struct StepLog {
  long long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainState {
  model::ModelParams params;
  AdamState adam;
  int epoch = 0;  // completed epochs
};

TrainState init_state(const model::ModelConfig& cfg);

struct TrainResult {
  TrainState state;
  std::vector<StepLog> log;
  std::vector<double> epoch_loss;  // per completed epoch of this run
};

using LogFn = std::function<void(const StepLog&)>;

// Runs epochs [start.epoch, cfg.epochs). Batch order reshuffles per epoch and
// node subsets redraw per (step, slot), both from stateless streams of
// cfg.seed, so a run resumed from a completed-epoch state is bit-identical to
// the uninterrupted one.
TrainResult train(const std::vector<PairedExample>& examples, const std::vector<int>& train_idx,
                  const model::ModelConfig& mcfg, const TrainConfig& tcfg, TrainState start,
                  const LogFn& on_step = {});

struct PairRecord {
  int query_id = 0;
  int ref_id = 0;
  double distance = 0.0;
  double model_err = 0.0;     // rel-l2, averaged over components
  double baseline_err = 0.0;  // pushforward alone
};

struct EvalReport {
  std::vector<double> model_err;     // per component, mean over pairs
  std::vector<double> baseline_err;  // per component, mean over pairs
  std::vector<PairRecord> records;
  std::string config_hash;  // filled by callers that know the dataset
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
};

// Full-node evaluation of the model and the pushforward baseline.
EvalReport evaluate(const std::vector<PairedExample>& examples, const std::vector<int>& idx,
                    const model::ModelParams& p, const model::ModelConfig& cfg);

}  // namespace refop::training
