// SPDX-License-Identifier: Apache-2.0
//
// Gated multi-scale routing lattice: a (layer x scale) grid of conv cells
// whose outputs are soft-routed by per-node gates to the same, doubled, or
// halved resolution in the next layer. The vector of all gate activations in
// a fixed enumeration order is the routing signature of one input.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "divdr/tensor.hpp"

namespace divdr {

struct LatticeConfig {
  int num_layers = 4;
  int num_scales = 3;   // scale s runs at 1/2^s of the input resolution
  int channels = 8;     // feature channels per node
  int num_classes = 2;
  int input_h = 32;
  int input_w = 32;
  int gate_hidden = 8;  // hidden width of each gate's two-layer perceptron
  int in_channels = 1;

  void validate() const;
  int gate_dim() const;  // n: total number of gated edges
  int scale_h(int s) const { return input_h >> s; }
  int scale_w(int s) const { return input_w >> s; }
};

enum class Dir : int { kUp = 0, kKeep = 1, kDown = 2 };

const char* dir_name(Dir d);

struct Edge {
  int layer;
  int scale;      // source scale
  Dir dir;
  int dst_scale;  // scale - 1 (up), scale (keep), scale + 1 (down)
};

// Fixed enumeration defining the gate-activation space: layer-major, scale
// ascending, direction up < keep < down; boundary scales omit out-of-range
// directions. The entry index of an edge is its position in this list.
std::vector<Edge> enumerate_edges(const LatticeConfig& config);

// Directions valid at a scale, in enumeration order.
std::vector<Dir> valid_dirs(int scale, int num_scales);

struct EdgeCostTable {
  std::vector<double> cost;  // per edge, enumeration order; strictly positive
  double total = 0.0;
};

// cost(edge) = H_dst * W_dst * C^2 * 9 (the 3x3 cell at the destination)
// plus the resampling work of the edge's direction.
EdgeCostTable make_edge_costs(const LatticeConfig& config);

// Normalized gate-weighted compute: sum_e A_e cost_e / sum_e cost_e in [0,1].
double expected_cost(std::span<const double> gates, const EdgeCostTable& costs);

// Inference-time diagnostic: edges with gate < tau count as skipped, the
// rest charge their full cost.
double pruned_cost(std::span<const double> gates, const EdgeCostTable& costs, double tau = 0.1);

struct NodeParams {
  Tensor cell_w, cell_b;          // conv3x3 C->C
  Tensor gate1_w, gate1_b;        // C -> gate_hidden
  Tensor gate2_w, gate2_b;        // gate_hidden -> #directions
};

struct LatticeParams {
  Tensor stem_w, stem_b;          // conv3x3 in_channels -> C
  Tensor fuse_w, fuse_b;          // 1x1 conv, S*C -> num_classes
  std::vector<NodeParams> nodes;  // layer-major, scale ascending

  static LatticeParams init(const LatticeConfig& config, uint64_t seed);

  NodeParams& node(const LatticeConfig& c, int layer, int scale) {
    return nodes[static_cast<size_t>(layer) * c.num_scales + scale];
  }
  const NodeParams& node(const LatticeConfig& c, int layer, int scale) const {
    return nodes[static_cast<size_t>(layer) * c.num_scales + scale];
  }

  // Visits every parameter with its checkpoint name ("stem.w",
  // "node.<layer>.<scale>.cell.w", "node.<layer>.<scale>.gate.fc1.w", ...,
  // "fuse.b") in a fixed order.
  void for_each(const LatticeConfig& config,
                const std::function<void(const std::string&, Tensor&)>& fn);
  std::vector<std::pair<std::string, Tensor>> named(const LatticeConfig& config);
};

// Gate head: global-average-pool -> fc -> relu -> fc -> sigmoid. Returns the
// (1, num_dirs) activation row; values are in (0,1).
Tensor gate_forward(Tape* tape, const Tensor& features, const NodeParams& node, int num_dirs);

struct LatticeOutput {
  Tensor logits;              // (num_classes, H, W)
  Tensor gate_vec;            // (n,) on the tape, enumeration order
  std::vector<double> gates;  // value snapshot of gate_vec
};

LatticeOutput lattice_forward(Tape* tape, const Tensor& image, const LatticeParams& params,
                              const LatticeConfig& config);

}  // namespace divdr
