// SPDX-License-Identifier: Apache-2.0

#include "divdr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "divdr/rng.hpp"

namespace divdr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct Disc {
  double cy, cx, r;
};

}  // namespace

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::kS: return "S";
    case Subset::kL: return "L";
    case Subset::kX: return "X";
  }
  return "?";
}

Subset subset_from_name(const std::string& name) {
  if (name == "S" || name == "s") return Subset::kS;
  if (name == "L" || name == "l") return Subset::kL;
  if (name == "X" || name == "x") return Subset::kX;
  throw std::invalid_argument("unknown subset \"" + name + "\" (expected S, L or X)");
}

void DatasetSpec::validate() const {
  require(n_train >= 1 && n_val >= 1, "DatasetSpec: n_train and n_val must be positive");
  require(mix >= 0.0 && mix <= 1.0, "DatasetSpec: mix must be in [0,1]");
  require(radius_small_lo > 0 && radius_small_hi >= radius_small_lo,
          "DatasetSpec: bad small radius range");
  require(radius_large_lo > radius_small_hi && radius_large_hi >= radius_large_lo,
          "DatasetSpec: radius ranges must be disjoint with large > small");
  require(noise_std >= 0.0, "DatasetSpec: noise_std must be non-negative");
  require(size >= 4 && 2.0 * radius_large_hi < size,
          "DatasetSpec: image size must fit the largest disc");
}

namespace {

SynthSample make_sample(const DatasetSpec& spec, Subset subset, bool validation, int type,
                        int sample_id) {
  const int sz = spec.size;
  const std::string stream = std::string("data/") + subset_name(subset) + (validation ? "/val" : "/train");
  RngStream rng(spec.seed, stream, static_cast<uint64_t>(sample_id));

  const double rlo = type == 0 ? spec.radius_small_lo : spec.radius_large_lo;
  const double rhi = type == 0 ? spec.radius_small_hi : spec.radius_large_hi;

  const int num_discs = 1 + static_cast<int>(rng.next_below(3));
  std::vector<Disc> discs;
  discs.reserve(static_cast<size_t>(num_discs));
  for (int i = 0; i < num_discs; ++i) {
    const double r = rng.next_uniform(rlo, rhi);
    // Keep the disc fully inside the frame so its pixel count never shrinks
    // below the size-threshold separating S from L.
    const double cy = rng.next_uniform(r, sz - 1 - r);
    const double cx = rng.next_uniform(r, sz - 1 - r);
    discs.push_back({cy, cx, r});
  }

  SynthSample out;
  out.sample_id = sample_id;
  out.true_subset = type;
  out.image.resize(static_cast<size_t>(sz) * sz);
  out.mask.resize(static_cast<size_t>(sz) * sz);
  for (int y = 0; y < sz; ++y) {
    for (int x = 0; x < sz; ++x) {
      double intensity = 0.0;
      bool inside = false;
      for (const Disc& d : discs) {
        const double dist = std::hypot(y - d.cy, x - d.cx);
        intensity = std::max(intensity, std::clamp(d.r + 0.5 - dist, 0.0, 1.0));
        inside = inside || dist <= d.r;
      }
      double v = intensity;
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.next_gaussian();
      out.image[static_cast<size_t>(y) * sz + x] = std::clamp(v, 0.0, 1.0);
      out.mask[static_cast<size_t>(y) * sz + x] = inside ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

Dataset generate(const DatasetSpec& spec, Subset subset, bool validation) {
  spec.validate();
  const int n = validation ? spec.n_val : spec.n_train;
  Dataset ds;
  ds.subset = subset;
  ds.name = std::string(validation ? "val_" : "train_");
  ds.name += static_cast<char>(std::tolower(*subset_name(subset)));
  ds.samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int type;
    if (subset == Subset::kS) {
      type = 0;
    } else if (subset == Subset::kL) {
      type = 1;
    } else {
      // Interleave S- and L-type samples at the exact mix ratio.
      const auto s_before = static_cast<int64_t>(std::floor(i * spec.mix));
      const auto s_after = static_cast<int64_t>(std::floor((i + 1) * spec.mix));
      type = s_after > s_before ? 0 : 1;
    }
    ds.samples.push_back(make_sample(spec, subset, validation, type, i));
  }
  return ds;
}

Dataset make_split(const DatasetSpec& spec, const std::string& split_name) {
  if (split_name == "train" || split_name == "train_x") return generate(spec, Subset::kX, false);
  if (split_name == "train_s") return generate(spec, Subset::kS, false);
  if (split_name == "train_l") return generate(spec, Subset::kL, false);
  if (split_name == "val_s") return generate(spec, Subset::kS, true);
  if (split_name == "val_l") return generate(spec, Subset::kL, true);
  if (split_name == "val_x") return generate(spec, Subset::kX, true);
  throw std::invalid_argument("unknown split \"" + split_name +
                              "\" (expected train, train_s, train_l, val_s, val_l or val_x)");
}

SplitReport split_report(const Dataset& dataset) {
  SplitReport rep;
  double fg_s = 0.0, fg_l = 0.0;
  for (const SynthSample& s : dataset.samples) {
    int fg = 0;
    for (int m : s.mask) fg += m;
    const double frac = static_cast<double>(fg) / static_cast<double>(s.mask.size());
    if (s.true_subset == 0) {
      ++rep.count_s;
      fg_s += frac;
    } else {
      ++rep.count_l;
      fg_l += frac;
    }
  }
  if (rep.count_s > 0) rep.mean_foreground_fraction_s = fg_s / rep.count_s;
  if (rep.count_l > 0) rep.mean_foreground_fraction_l = fg_l / rep.count_l;
  return rep;
}

uint64_t dataset_content_hash(const Dataset& dataset) {
  uint64_t h = 1469598103934665603ULL;
  for (const SynthSample& s : dataset.samples) {
    h = fnv1a64_bytes(&s.sample_id, sizeof(s.sample_id), h);
    h = fnv1a64_bytes(&s.true_subset, sizeof(s.true_subset), h);
    h = fnv1a64_bytes(s.image.data(), s.image.size() * sizeof(double), h);
    h = fnv1a64_bytes(s.mask.data(), s.mask.size() * sizeof(int), h);
  }
  return h;
}

namespace {

constexpr char kCacheMagic[8] = {'D', 'I', 'V', 'D', 'R', 'D', 'S', '1'};

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_dataset_cache(const std::filesystem::path& file, const Dataset& dataset) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + file.string() + " for writing");
  os.write(kCacheMagic, sizeof(kCacheMagic));
  write_pod(os, static_cast<uint32_t>(dataset.subset));
  write_pod(os, static_cast<uint32_t>(dataset.samples.size()));
  for (const SynthSample& s : dataset.samples) {
    const uint32_t side = static_cast<uint32_t>(std::lround(std::sqrt(double(s.mask.size()))));
    const uint32_t record_len = static_cast<uint32_t>(
        sizeof(uint32_t) * 3 + s.image.size() * sizeof(double) + s.mask.size() * sizeof(uint8_t));
    write_pod(os, record_len);
    write_pod(os, static_cast<uint32_t>(s.sample_id));
    write_pod(os, static_cast<uint32_t>(s.true_subset));
    write_pod(os, side);
    os.write(reinterpret_cast<const char*>(s.image.data()),
             static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    for (int m : s.mask) write_pod(os, static_cast<uint8_t>(m));
  }
  if (!os) throw std::runtime_error("failed while writing " + file.string());
}

Dataset load_dataset_cache(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw std::runtime_error(file.string() + " is not a dataset cache");
  Dataset ds;
  ds.subset = static_cast<Subset>(read_pod<uint32_t>(is));
  const uint32_t count = read_pod<uint32_t>(is);
  ds.samples.resize(count);
  for (SynthSample& s : ds.samples) {
    read_pod<uint32_t>(is);  // record length, implied by the fields below
    s.sample_id = static_cast<int>(read_pod<uint32_t>(is));
    s.true_subset = static_cast<int>(read_pod<uint32_t>(is));
    const uint32_t side = read_pod<uint32_t>(is);
    s.image.resize(static_cast<size_t>(side) * side);
    is.read(reinterpret_cast<char*>(s.image.data()),
            static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    s.mask.resize(static_cast<size_t>(side) * side);
    for (int& m : s.mask) m = read_pod<uint8_t>(is);
  }
  if (!is) throw std::runtime_error("truncated dataset cache " + file.string());
  return ds;
}

}  // namespace divdr
