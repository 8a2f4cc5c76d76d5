// SPDX-License-Identifier: Apache-2.0
//
// Run-directory artifacts: binary checkpoint, JSON-lines metrics, CSV
// exports. Formats are documented in the README.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "divdr/clustering.hpp"
#include "divdr/config.hpp"
#include "divdr/trainer.hpp"

namespace divdr {

// Checkpoint: parameters, optimizer velocity, center registry and the next
// step index. Written to a temp file and renamed, so readers never see a
// partial file.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const LatticeConfig& lattice);
TrainState load_checkpoint(const std::filesystem::path& path, const LatticeConfig& lattice);

std::string step_record_json(const StepRecord& rec);
std::string eval_record_json(const EvalRecord& rec);

// Appends one JSON object per line.
void append_jsonl(const std::filesystem::path& path, const std::vector<std::string>& lines);

void write_centers_csv(const std::filesystem::path& path, const CenterRegistry& registry);

// A-space export: header "sample_id,true_subset,assigned_cluster,g_0,...",
// one row per sample; `edges_json` describes the enumeration.
void write_aspace_csv(const std::filesystem::path& path,
                      const std::vector<std::vector<double>>& gates,
                      const std::vector<int>& true_subsets, const std::vector<int>& assignment);
void write_aspace_pca_csv(const std::filesystem::path& path, const PcaProjection& proj,
                          const std::vector<int>& assignment);
void write_edges_json(const std::filesystem::path& path, const LatticeConfig& lattice);

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace divdr
