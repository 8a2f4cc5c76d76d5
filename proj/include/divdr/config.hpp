// SPDX-License-Identifier: Apache-2.0
//
// Flat-key JSON experiment configuration. Every run echoes the fully
// materialized config; rerunning from the echo reproduces the run
// byte-for-byte in single-threaded mode.
#pragma once

#include <stdexcept>
#include <string>

#include "divdr/lattice.hpp"
#include "divdr/loss.hpp"
#include "divdr/synth.hpp"
#include "divdr/trainer.hpp"

namespace divdr {

// Errors that should map to CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::string experiment = "run";
  std::string data_subset = "X";  // training subset: S, L or X
  LatticeConfig lattice;
  TrainConfig train;
  LossWeights loss;
  DatasetSpec data;

  void validate() const;

  // Flat dotted keys, e.g. "train.total_steps". Unknown keys and missing
  // required keys ("train.K", "train.seed") are rejected with the field name.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& path);
  std::string to_json_text() const;  // canonical echo, sorted keys
  void save(const std::filesystem::path& path) const;

  // Validation split matching the training subset: val_s, val_l or val_x.
  std::string default_val_split() const;
};

}  // namespace divdr
