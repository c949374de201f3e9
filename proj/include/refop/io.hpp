#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "refop/datagen.hpp"
#include "refop/model.hpp"
#include "refop/pairing.hpp"
#include "refop/sample.hpp"
#include "refop/training.hpp"

namespace refop::io {

// ---- samples ----------------------------------------------------------

void write_sample(const std::string& path, const datagen::Sample& s);
datagen::Sample read_sample(const std::string& path);

// ---- dataset manifests -------------------------------------------------

struct SampleIndexEntry {
  int id = 0;
  std::string file;  // relative to the manifest directory
  int n_nodes = 0;
  int pair_tag = 0;
  std::vector<double> params;
};

struct Manifest {
  datagen::GenConfig config;
  std::vector<SampleIndexEntry> index;
  pairing::PairMap pairs;
};

std::uint64_t gen_config_hash(const datagen::GenConfig& cfg);

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);  // also checks referenced files exist

// Writes manifest.refop plus one sample file per sample into dir.
void write_dataset(const std::string& dir, const datagen::GenConfig& cfg,
                   const std::vector<datagen::Sample>& samples, const pairing::PairMap& pairs);

struct Dataset {
  Manifest manifest;
  std::vector<datagen::Sample> samples;  // manifest index order
};

Dataset load_dataset(const std::string& manifest_path);

// ---- checkpoints -------------------------------------------------------

struct Checkpoint {
  model::ModelConfig config;
  model::ModelParams params;
  std::vector<Mat> adam_m;  // aligned with params.values
  std::vector<Mat> adam_v;
  std::int64_t step = 0;
};

void write_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::string& path);

// ---- evaluation reports --------------------------------------------------

void write_report(const std::string& path, const training::EvalReport& rep);
// One CSV row per evaluated pair: query_id,ref_id,distance,model_rel_l2,baseline_rel_l2.
void write_pair_csv(const std::string& path, const training::EvalReport& rep);

}  // namespace refop::io
