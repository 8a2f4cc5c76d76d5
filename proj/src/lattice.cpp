// SPDX-License-Identifier: Apache-2.0

#include "divdr/lattice.hpp"

#include <cmath>
#include <stdexcept>

namespace divdr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void LatticeConfig::validate() const {
  require(num_layers >= 1 && num_scales >= 1 && channels >= 1 && num_classes >= 2 &&
              gate_hidden >= 1 && in_channels >= 1,
          "LatticeConfig: all dimensions must be positive (num_classes >= 2)");
  const int div = 1 << (num_scales - 1);
  require(input_h % div == 0 && input_w % div == 0,
          "LatticeConfig: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
              " not divisible by 2^(num_scales-1) = " + std::to_string(div));
}

std::vector<Dir> valid_dirs(int scale, int num_scales) {
  std::vector<Dir> dirs;
  if (scale > 0) dirs.push_back(Dir::kUp);
  dirs.push_back(Dir::kKeep);
  if (scale < num_scales - 1) dirs.push_back(Dir::kDown);
  return dirs;
}

const char* dir_name(Dir d) {
  switch (d) {
    case Dir::kUp: return "up";
    case Dir::kKeep: return "keep";
    case Dir::kDown: return "down";
  }
  return "?";
}

std::vector<Edge> enumerate_edges(const LatticeConfig& config) {
  config.validate();
  std::vector<Edge> edges;
  for (int layer = 0; layer < config.num_layers; ++layer) {
    for (int scale = 0; scale < config.num_scales; ++scale) {
      for (Dir d : valid_dirs(scale, config.num_scales)) {
        const int delta = d == Dir::kUp ? -1 : d == Dir::kDown ? 1 : 0;
        edges.push_back({layer, scale, d, scale + delta});
      }
    }
  }
  return edges;
}

int LatticeConfig::gate_dim() const {
  int per_layer = 0;
  for (int s = 0; s < num_scales; ++s)
    per_layer += static_cast<int>(valid_dirs(s, num_scales).size());
  return num_layers * per_layer;
}

EdgeCostTable make_edge_costs(const LatticeConfig& config) {
  const auto edges = enumerate_edges(config);
  EdgeCostTable t;
  t.cost.reserve(edges.size());
  const double c2 = static_cast<double>(config.channels) * config.channels;
  for (const Edge& e : edges) {
    const double hd = config.scale_h(e.dst_scale);
    const double wd = config.scale_w(e.dst_scale);
    double cost = hd * wd * c2 * 9.0;
    if (e.dir == Dir::kUp) cost += config.channels * hd * wd;             // one write per output
    if (e.dir == Dir::kDown) cost += config.channels * hd * wd * 4.0;    // one read per input
    t.cost.push_back(cost);
    t.total += cost;
  }
  return t;
}

double expected_cost(std::span<const double> gates, const EdgeCostTable& costs) {
  require(gates.size() == costs.cost.size(),
          "expected_cost: gate vector length " + std::to_string(gates.size()) +
              " != cost table length " + std::to_string(costs.cost.size()));
  double s = 0.0;
  for (size_t i = 0; i < gates.size(); ++i) s += gates[i] * costs.cost[i];
  return s / costs.total;
}

double pruned_cost(std::span<const double> gates, const EdgeCostTable& costs, double tau) {
  require(gates.size() == costs.cost.size(),
          "pruned_cost: gate vector length " + std::to_string(gates.size()) +
              " != cost table length " + std::to_string(costs.cost.size()));
  double s = 0.0;
  for (size_t i = 0; i < gates.size(); ++i)
    if (gates[i] >= tau) s += costs.cost[i];
  return s / costs.total;
}

LatticeParams LatticeParams::init(const LatticeConfig& config, uint64_t seed) {
  config.validate();
  RngStream rng(seed, "init");
  const int c = config.channels;
  LatticeParams p;
  // He-style fan-in scaling for conv and fc weights. The gate head gets a
  // larger output-layer scale: the clustering loss divides unsquared
  // distances by the batch sigma^2, so a too-tight initial activation cloud
  // makes that ratio (and its gradients) blow up. Starting with a moderate
  // pre-sigmoid spread keeps gates near 0.5 yet input-dependent.
  p.stem_w = randn({c, config.in_channels, 3, 3}, rng,
                   std::sqrt(2.0 / (9.0 * config.in_channels)), true);
  p.stem_b = Tensor({c}, true);
  for (int layer = 0; layer < config.num_layers; ++layer) {
    for (int scale = 0; scale < config.num_scales; ++scale) {
      const int dirs = static_cast<int>(valid_dirs(scale, config.num_scales).size());
      NodeParams n;
      n.cell_w = randn({c, c, 3, 3}, rng, std::sqrt(2.0 / (9.0 * c)), true);
      n.cell_b = Tensor({c}, true);
      n.gate1_w = randn({c, config.gate_hidden}, rng, std::sqrt(2.0 / c), true);
      n.gate1_b = Tensor({1, config.gate_hidden}, true);
      n.gate2_w = randn({config.gate_hidden, dirs}, rng, 0.7, true);
      n.gate2_b = Tensor({1, dirs}, true);
      p.nodes.push_back(std::move(n));
    }
  }
  p.fuse_w = randn({config.num_classes, config.num_scales * c}, rng,
                   std::sqrt(2.0 / (config.num_scales * c)), true);
  p.fuse_b = Tensor({config.num_classes}, true);
  return p;
}

void LatticeParams::for_each(const LatticeConfig& config,
                             const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("stem.w", stem_w);
  fn("stem.b", stem_b);
  for (int layer = 0; layer < config.num_layers; ++layer) {
    for (int scale = 0; scale < config.num_scales; ++scale) {
      NodeParams& n = node(config, layer, scale);
      const std::string base = "node." + std::to_string(layer) + "." + std::to_string(scale) + ".";
      fn(base + "cell.w", n.cell_w);
      fn(base + "cell.b", n.cell_b);
      fn(base + "gate.fc1.w", n.gate1_w);
      fn(base + "gate.fc1.b", n.gate1_b);
      fn(base + "gate.fc2.w", n.gate2_w);
      fn(base + "gate.fc2.b", n.gate2_b);
    }
  }
  fn("fuse.w", fuse_w);
  fn("fuse.b", fuse_b);
}

std::vector<std::pair<std::string, Tensor>> LatticeParams::named(const LatticeConfig& config) {
  std::vector<std::pair<std::string, Tensor>> out;
  for_each(config, [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

Tensor gate_forward(Tape* tape, const Tensor& features, const NodeParams& node, int num_dirs) {
  Tensor pooled = global_avg_pool(tape, features).reshaped({1, features.dim(0)});
  Tensor h = relu(tape, add(tape, matmul(tape, pooled, node.gate1_w), node.gate1_b));
  Tensor z = add(tape, matmul(tape, h, node.gate2_w), node.gate2_b);
  require(z.dim(1) == num_dirs, "gate_forward: gate head emits " + std::to_string(z.dim(1)) +
                                    " directions, expected " + std::to_string(num_dirs));
  return sigmoid(tape, z);
}

LatticeOutput lattice_forward(Tape* tape, const Tensor& image, const LatticeParams& params,
                              const LatticeConfig& config) {
  config.validate();
  require(image.rank() == 3 && image.dim(0) == config.in_channels &&
              image.dim(1) == config.input_h && image.dim(2) == config.input_w,
          "lattice_forward: input " + shape_str(image.shape()) + " does not match configured (" +
              std::to_string(config.in_channels) + "," + std::to_string(config.input_h) + "," +
              std::to_string(config.input_w) + ")");

  const int S = config.num_scales;
  const int L = config.num_layers;

  // Layer-0 inputs: the stem at full resolution, then a cascade of halved
  // copies so every scale sees the image from the start.
  std::vector<Tensor> cur(static_cast<size_t>(S));
  cur[0] = conv3x3(tape, image, params.stem_w, params.stem_b);
  for (int s = 1; s < S; ++s) cur[static_cast<size_t>(s)] = downsample2x_avg(tape, cur[s - 1]);

  std::vector<Tensor> gate_rows;  // per node, enumeration order
  gate_rows.reserve(static_cast<size_t>(L) * S);

  for (int layer = 0; layer < L; ++layer) {
    std::vector<Tensor> next(static_cast<size_t>(S));
    for (int scale = 0; scale < S; ++scale) {
      const NodeParams& node = params.node(config, layer, scale);
      Tensor h = relu(tape, conv3x3(tape, cur[static_cast<size_t>(scale)], node.cell_w, node.cell_b));
      const auto dirs = valid_dirs(scale, S);
      Tensor g = gate_forward(tape, h, node, static_cast<int>(dirs.size()));
      Tensor grow = g.reshaped({static_cast<int>(dirs.size())});
      gate_rows.push_back(grow);
      for (size_t di = 0; di < dirs.size(); ++di) {
        const Dir d = dirs[di];
        Tensor routed = d == Dir::kUp     ? upsample2x_nearest(tape, h)
                        : d == Dir::kDown ? downsample2x_avg(tape, h)
                                          : h;
        Tensor gated = mul_scalar(tape, routed, slice(tape, grow, static_cast<int>(di), 1));
        const int dst = scale + (d == Dir::kUp ? -1 : d == Dir::kDown ? 1 : 0);
        Tensor& acc = next[static_cast<size_t>(dst)];
        acc = acc.defined() ? add(tape, acc, gated) : gated;
      }
    }
    cur = std::move(next);
  }

  // Fusion head: bring every terminal scale to input resolution, concatenate,
  // and project with a 1x1 conv.
  std::vector<Tensor> upscaled;
  upscaled.reserve(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s) {
    Tensor t = cur[static_cast<size_t>(s)];
    for (int i = 0; i < s; ++i) t = upsample2x_nearest(tape, t);
    upscaled.push_back(t);
  }
  Tensor fused = concat_channels(tape, upscaled);
  Tensor logits = conv1x1(tape, fused, params.fuse_w, params.fuse_b);

  LatticeOutput out;
  out.logits = logits;
  out.gate_vec = concat_channels(tape, gate_rows);
  out.gates.assign(out.gate_vec.data(), out.gate_vec.data() + out.gate_vec.numel());
  return out;
}

}  // namespace divdr
