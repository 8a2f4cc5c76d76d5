// SPDX-License-Identifier: Apache-2.0
//
// Scale-biased synthetic segmentation data: subset S draws small discs,
// subset L large ones, and X mixes both while keeping the subset label
// around for evaluation only. Disc radii ranges are disjoint, so foreground
// size separates the subsets exactly on noise-free masks.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace divdr {

enum class Subset : int { kS = 0, kL = 1, kX = 2 };

const char* subset_name(Subset s);
Subset subset_from_name(const std::string& name);

struct SynthSample {
  std::vector<double> image;  // (1, size, size), row-major, values in [0,1]
  std::vector<int> mask;      // (size, size), 0 background / 1 foreground
  int true_subset = 0;        // 0 = S-type, 1 = L-type; evaluation only
  int sample_id = 0;
};

struct DatasetSpec {
  int n_train = 1024;           // per subset
  int n_val = 256;              // per subset
  double mix = 0.5;             // fraction of S-type samples in X
  double radius_small_lo = 2.0;
  double radius_small_hi = 4.0;
  double radius_large_lo = 8.0;
  double radius_large_hi = 12.0;
  double noise_std = 0.1;
  uint64_t seed = 0;
  int size = 32;                // square image side
  bool flip_augment = true;     // random horizontal flip during training

  void validate() const;
};

struct Dataset {
  std::string name;  // "train_s", "val_x", ...
  Subset subset = Subset::kX;
  std::vector<SynthSample> samples;
};

// Deterministic per sample: content is a pure function of
// (spec.seed, subset, split, sample_id).
Dataset generate(const DatasetSpec& spec, Subset subset, bool validation);

Dataset make_split(const DatasetSpec& spec, const std::string& split_name);

struct SplitReport {
  int count_s = 0;
  int count_l = 0;
  double mean_foreground_fraction_s = 0.0;
  double mean_foreground_fraction_l = 0.0;
};

SplitReport split_report(const Dataset& dataset);

// Length-prefixed binary cache, one file per split, plus a JSON manifest
// carrying the spec echo and a content hash.
void save_dataset_cache(const std::filesystem::path& file, const Dataset& dataset);
Dataset load_dataset_cache(const std::filesystem::path& file);
uint64_t dataset_content_hash(const Dataset& dataset);

}  // namespace divdr
