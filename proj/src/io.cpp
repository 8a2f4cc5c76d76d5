// SPDX-License-Identifier: Apache-2.0

#include "divdr/io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace divdr {

namespace {

using nlohmann::json;

constexpr char kCheckpointMagic[8] = {'D', 'I', 'V', 'D', 'R', 'C', 'K', '1'};

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_string(std::ofstream& os, const std::string& s) {
  write_pod(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is) {
  const uint32_t len = read_pod<uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  return s;
}

void write_tensor_blob(std::ofstream& os, const std::string& name, const Tensor& t) {
  write_string(os, name);
  write_pod(os, static_cast<uint32_t>(t.shape().size()));
  for (int d : t.shape()) write_pod(os, static_cast<int64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_tensor_blob(std::ifstream& is, const std::string& expect_name, Tensor& t) {
  const std::string name = read_string(is);
  if (name != expect_name)
    throw std::runtime_error("checkpoint: expected parameter \"" + expect_name + "\", found \"" +
                             name + "\"");
  const uint32_t rank = read_pod<uint32_t>(is);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_pod<int64_t>(is));
  if (shape != t.shape())
    throw std::runtime_error("checkpoint: shape mismatch for \"" + name + "\": stored " +
                             shape_str(shape) + ", expected " + shape_str(t.shape()));
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const LatticeConfig& lattice) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(os, static_cast<uint32_t>(1));  // version
    write_pod(os, static_cast<int64_t>(state.step));

    auto named = const_cast<TrainState&>(state).params.named(lattice);
    write_pod(os, static_cast<uint32_t>(named.size()));
    for (auto& [name, t] : named) write_tensor_blob(os, name, t);
    for (size_t i = 0; i < named.size(); ++i)
      write_tensor_blob(os, named[i].first + ".velocity", state.velocity[i]);

    write_pod(os, static_cast<uint8_t>(state.registry.initialized ? 1 : 0));
    write_pod(os, static_cast<int64_t>(state.registry.last_update_step));
    write_pod(os, static_cast<uint32_t>(state.registry.k()));
    write_pod(os, static_cast<uint32_t>(state.registry.dim()));
    for (const auto& c : state.registry.centers)
      os.write(reinterpret_cast<const char*>(c.data()),
               static_cast<std::streamsize>(c.size() * sizeof(double)));
    if (!os) throw std::runtime_error("failed while writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const LatticeConfig& lattice) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint");
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  TrainState state = init_train_state(lattice, 0);
  state.step = static_cast<int>(read_pod<int64_t>(is));

  auto named = state.params.named(lattice);
  const uint32_t count = read_pod<uint32_t>(is);
  if (count != named.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (auto& [name, t] : named) read_tensor_blob(is, name, t);
  for (size_t i = 0; i < named.size(); ++i)
    read_tensor_blob(is, named[i].first + ".velocity", state.velocity[i]);

  state.registry.initialized = read_pod<uint8_t>(is) != 0;
  state.registry.last_update_step = read_pod<int64_t>(is);
  const uint32_t k = read_pod<uint32_t>(is);
  const uint32_t dim = read_pod<uint32_t>(is);
  state.registry.centers.assign(k, std::vector<double>(dim, 0.0));
  for (auto& c : state.registry.centers)
    is.read(reinterpret_cast<char*>(c.data()),
            static_cast<std::streamsize>(c.size() * sizeof(double)));
  if (!is) throw std::runtime_error("truncated checkpoint " + path.string());
  return state;
}

std::string step_record_json(const StepRecord& rec) {
  json j;
  j["type"] = "step";
  j["step"] = rec.step;
  j["task"] = rec.task;
  j["cost"] = rec.cost;
  j["clustering"] = rec.clustering;
  j["total"] = rec.total;
  j["lr"] = rec.lr;
  return j.dump();
}

std::string eval_record_json(const EvalRecord& rec) {
  json j;
  j["type"] = "eval";
  j["step"] = rec.step;
  j["split"] = rec.split;
  j["miou"] = rec.miou;
  j["expected_cost"] = rec.expected_cost;
  j["pruned_cost"] = rec.pruned_cost;
  if (rec.gate_variance) j["gate_variance"] = *rec.gate_variance;
  if (rec.inter) j["inter"] = *rec.inter;
  if (rec.intra) j["intra"] = *rec.intra;
  if (rec.alignment) j["alignment"] = *rec.alignment;
  return j.dump();
}

void append_jsonl(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot append to " + path.string());
  for (const std::string& l : lines) os << l << "\n";
  os.flush();
  if (!os) throw std::runtime_error("failed while writing " + path.string());
}

std::string format_double(double v) {
  // Shortest decimal that round-trips the exact binary value.
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void write_centers_csv(const std::filesystem::path& path, const CenterRegistry& registry) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "center";
  for (int j = 0; j < registry.dim(); ++j) os << ",g_" << j;
  os << "\n";
  for (int i = 0; i < registry.k(); ++i) {
    os << i;
    for (double v : registry.centers[static_cast<size_t>(i)]) os << "," << format_double(v);
    os << "\n";
  }
}

void write_aspace_csv(const std::filesystem::path& path,
                      const std::vector<std::vector<double>>& gates,
                      const std::vector<int>& true_subsets, const std::vector<int>& assignment) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const size_t dim = gates.empty() ? 0 : gates.front().size();
  os << "sample_id,true_subset,assigned_cluster";
  for (size_t j = 0; j < dim; ++j) os << ",g_" << j;
  os << "\n";
  for (size_t i = 0; i < gates.size(); ++i) {
    os << i << "," << true_subsets[i] << "," << (assignment.empty() ? -1 : assignment[i]);
    for (double v : gates[i]) os << "," << format_double(v);
    os << "\n";
  }
}

void write_aspace_pca_csv(const std::filesystem::path& path, const PcaProjection& proj,
                          const std::vector<int>& assignment) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "sample_id,pc1,pc2,assigned_cluster\n";
  for (size_t i = 0; i < proj.pc1.size(); ++i) {
    os << i << "," << format_double(proj.pc1[i]) << "," << format_double(proj.pc2[i]) << ","
       << (assignment.empty() ? -1 : assignment[i]) << "\n";
  }
}

void write_edges_json(const std::filesystem::path& path, const LatticeConfig& lattice) {
  json j;
  j["gate_dim"] = lattice.gate_dim();
  j["order"] = "layer-major, scale ascending, direction up < keep < down";
  json arr = json::array();
  const auto edges = enumerate_edges(lattice);
  for (size_t i = 0; i < edges.size(); ++i) {
    json e;
    e["index"] = i;
    e["layer"] = edges[i].layer;
    e["scale"] = edges[i].scale;
    e["direction"] = dir_name(edges[i].dir);
    e["dst_scale"] = edges[i].dst_scale;
    arr.push_back(e);
  }
  j["edges"] = arr;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace divdr
