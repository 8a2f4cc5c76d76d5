// SPDX-License-Identifier: Apache-2.0

#include "divdr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace divdr {

namespace {

using nlohmann::json;

class FlatReader {
 public:
  explicit FlatReader(const json& j) : j_(j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config field \"" + key + "\" has the wrong type");
    }
  }

  template <typename T>
  void get_required(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) throw ConfigError("missing required config field \"" + key + "\"");
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config field \"" + key + "\" has the wrong type");
    }
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config field \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::set<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (experiment.empty()) throw ConfigError("config field \"experiment\" must be non-empty");
  try {
    subset_from_name(data_subset);
    lattice.validate();
    train.validate();
    loss.validate();
    data.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (lattice.input_h != data.size || lattice.input_w != data.size)
    throw ConfigError("config: lattice input size must match data.size");
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  FlatReader r(j);
  ExperimentConfig c;
  r.get("experiment", c.experiment);
  r.get("data.subset", c.data_subset);

  r.get("lattice.num_layers", c.lattice.num_layers);
  r.get("lattice.num_scales", c.lattice.num_scales);
  r.get("lattice.channels", c.lattice.channels);
  r.get("lattice.num_classes", c.lattice.num_classes);
  r.get("lattice.input_h", c.lattice.input_h);
  r.get("lattice.input_w", c.lattice.input_w);
  r.get("lattice.gate_hidden", c.lattice.gate_hidden);
  r.get("lattice.in_channels", c.lattice.in_channels);

  r.get("train.total_steps", c.train.total_steps);
  r.get("train.batch_size", c.train.batch_size);
  r.get("train.lr0", c.train.lr0);
  r.get("train.lr_power", c.train.lr_power);
  r.get("train.lr_schedule", c.train.lr_schedule);
  r.get("train.momentum", c.train.momentum);
  r.get("train.weight_decay", c.train.weight_decay);
  r.get("train.kmeans_interval", c.train.kmeans_interval);
  r.get("train.warmup_steps", c.train.warmup_steps);
  r.get("train.eval_interval", c.train.eval_interval);
  r.get_required("train.K", c.train.k_clusters);
  r.get_required("train.seed", c.train.seed);
  r.get("train.threads", c.train.threads);

  r.get("loss.lambda1", c.loss.lambda1);
  r.get("loss.lambda2", c.loss.lambda2);
  r.get("loss.alpha", c.loss.alpha);
  r.get("loss.squared_distances", c.loss.squared_distances);

  r.get("data.n_train", c.data.n_train);
  r.get("data.n_val", c.data.n_val);
  r.get("data.mix", c.data.mix);
  r.get("data.radius_small_lo", c.data.radius_small_lo);
  r.get("data.radius_small_hi", c.data.radius_small_hi);
  r.get("data.radius_large_lo", c.data.radius_large_lo);
  r.get("data.radius_large_hi", c.data.radius_large_hi);
  r.get("data.noise_std", c.data.noise_std);
  r.get("data.seed", c.data.seed);
  r.get("data.size", c.data.size);
  r.get("data.flip", c.data.flip_augment);
  r.reject_unknown();

  // The lattice consumes whatever the generator produces.
  c.lattice.input_h = c.data.size;
  c.lattice.input_w = c.data.size;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_json_text(buf.str());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["experiment"] = experiment;
  j["data.subset"] = data_subset;
  j["lattice.num_layers"] = lattice.num_layers;
  j["lattice.num_scales"] = lattice.num_scales;
  j["lattice.channels"] = lattice.channels;
  j["lattice.num_classes"] = lattice.num_classes;
  j["lattice.input_h"] = lattice.input_h;
  j["lattice.input_w"] = lattice.input_w;
  j["lattice.gate_hidden"] = lattice.gate_hidden;
  j["lattice.in_channels"] = lattice.in_channels;
  j["train.total_steps"] = train.total_steps;
  j["train.batch_size"] = train.batch_size;
  j["train.lr0"] = train.lr0;
  j["train.lr_power"] = train.lr_power;
  j["train.lr_schedule"] = train.lr_schedule;
  j["train.momentum"] = train.momentum;
  j["train.weight_decay"] = train.weight_decay;
  j["train.kmeans_interval"] = train.kmeans_interval;
  j["train.warmup_steps"] = train.warmup_steps;
  j["train.eval_interval"] = train.eval_interval;
  j["train.K"] = train.k_clusters;
  j["train.seed"] = train.seed;
  j["train.threads"] = train.threads;
  j["loss.lambda1"] = loss.lambda1;
  j["loss.lambda2"] = loss.lambda2;
  j["loss.alpha"] = loss.alpha;
  j["loss.squared_distances"] = loss.squared_distances;
  j["data.n_train"] = data.n_train;
  j["data.n_val"] = data.n_val;
  j["data.mix"] = data.mix;
  j["data.radius_small_lo"] = data.radius_small_lo;
  j["data.radius_small_hi"] = data.radius_small_hi;
  j["data.radius_large_lo"] = data.radius_large_lo;
  j["data.radius_large_hi"] = data.radius_large_hi;
  j["data.noise_std"] = data.noise_std;
  j["data.seed"] = data.seed;
  j["data.size"] = data.size;
  j["data.flip"] = data.flip_augment;
  return j.dump(2) + "\n";
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write config to " + path.string());
  os << to_json_text();
}

std::string ExperimentConfig::default_val_split() const {
  const Subset s = subset_from_name(data_subset);
  return s == Subset::kS ? "val_s" : s == Subset::kL ? "val_l" : "val_x";
}

}  // namespace divdr
