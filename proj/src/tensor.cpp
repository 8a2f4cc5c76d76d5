// SPDX-License-Identifier: Apache-2.0

#include "divdr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace divdr {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  return os.str();
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

Tensor::Tensor(Shape shape, bool requires_grad) : shape_(std::move(shape)) {
  for (int d : shape_) require(d > 0, "Tensor: non-positive dimension in " + shape_str(shape_));
  storage_ = std::make_shared<Storage>();
  storage_->value.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
  storage_->requires_grad = requires_grad;
  if (requires_grad) storage_->grad.assign(storage_->value.size(), 0.0);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  require(shape_numel(shape) == static_cast<int64_t>(values.size()),
          "Tensor::from: " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
              " values");
  Tensor t(std::move(shape), requires_grad);
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

int64_t Tensor::numel() const { return shape_numel(shape_); }

double* Tensor::data() { return storage_->value.data(); }
const double* Tensor::data() const { return storage_->value.data(); }

double Tensor::item() const {
  require(defined() && numel() == 1, "Tensor::item: tensor is not a single element");
  return storage_->value[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

double* Tensor::grad() { return storage_->requires_grad ? storage_->grad.data() : nullptr; }
const double* Tensor::grad() const {
  return storage_->requires_grad ? storage_->grad.data() : nullptr;
}

void Tensor::zero_grad() {
  if (storage_ && storage_->requires_grad) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::reshaped(Shape new_shape) const {
  require(shape_numel(new_shape) == numel(),
          "reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

Tensor randn(Shape shape, RngStream& rng, double stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : t.values()) v = stddev * rng.next_gaussian();
  return t;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kConv3x3: return "conv3x3";
    case Op::kConv1x1: return "conv1x1";
    case Op::kAdd: return "add";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kMean: return "mean";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kUpsample2xNearest: return "upsample2x_nearest";
    case Op::kDownsample2xAvg: return "downsample2x_avg";
    case Op::kConcatChannels: return "concat_channels";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kL2Norm: return "l2_norm";
    case Op::kLogSumExp: return "log_sum_exp";
    case Op::kSlice: return "slice";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

bool Tape::tracked(const Tape* tape, const Tensor& t) {
  return tape != nullptr && ((t.tape_ == tape && t.node_ >= 0) || t.requires_grad());
}

int Tape::ensure_leaf(const Tensor& t) {
  auto it = leaf_ids_.find(t.storage_key());
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.op = Op::kLeaf;
  n.out = t;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaf_ids_.emplace(t.storage_key(), id);
  return id;
}

int Tape::node_id_for_input(const Tensor& t) {
  if (t.tape_ == this && t.node_ >= 0) return t.node_;
  if (t.requires_grad()) return ensure_leaf(t);
  return -1;
}

int Tape::record(Op op, std::vector<Tensor> inputs, Tensor out, double aux, int iaux) {
  Node n;
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) n.inputs.push_back(node_id_for_input(t));
  n.in = std::move(inputs);
  n.out = out;
  n.aux = aux;
  n.iaux = iaux;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::clear() {
  nodes_.clear();
  leaf_ids_.clear();
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace {

// out(oc) += sum_ic conv(x(ic), w(oc,ic)) with 3x3 kernel, stride 1, pad 1.
void conv3x3_plane(const double* x, const double* k, double* out, int h, int w) {
  for (int ky = 0; ky < 3; ++ky) {
    const double k0 = k[ky * 3 + 0], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
    for (int y = 0; y < h; ++y) {
      const int sy = y + ky - 1;
      if (sy < 0 || sy >= h) continue;
      const double* row = x + static_cast<size_t>(sy) * w;
      double* orow = out + static_cast<size_t>(y) * w;
      // left edge
      orow[0] += k1 * row[0] + k2 * (w > 1 ? row[1] : 0.0);
      for (int xi = 1; xi < w - 1; ++xi) {
        orow[xi] += k0 * row[xi - 1] + k1 * row[xi] + k2 * row[xi + 1];
      }
      if (w > 1) orow[w - 1] += k0 * row[w - 2] + k1 * row[w - 1];
    }
  }
}

// Dot product with four independent accumulator chains; the fixed summation
// order keeps results bit-reproducible while avoiding a serial FMA chain.
double dot(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Gradient wrt the 3x3 kernel for one (input plane, output-grad plane) pair.
void conv3x3_plane_wgrad(const double* x, const double* gy, double* gk, int h, int w) {
  for (int ky = 0; ky < 3; ++ky) {
    for (int y = 0; y < h; ++y) {
      const int sy = y + ky - 1;
      if (sy < 0 || sy >= h) continue;
      const double* row = x + static_cast<size_t>(sy) * w;
      const double* grow = gy + static_cast<size_t>(y) * w;
      gk[ky * 3 + 0] += dot(grow + 1, row, w - 1);
      gk[ky * 3 + 1] += dot(grow, row, w);
      gk[ky * 3 + 2] += dot(grow, row + 1, w - 1);
    }
  }
}

void matmul_kernel(const double* a, const double* b, double* out, int m, int k, int n) {
  std::fill(out, out + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

double lse_of(std::span<const Tensor> xs) {
  double m = -HUGE_VAL;
  for (const Tensor& t : xs)
    for (double v : t.values()) m = std::max(m, v);
  double s = 0.0;
  for (const Tensor& t : xs)
    for (double v : t.values()) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          two_shapes("matmul", a.shape(), b.shape()));
  Tensor out({a.dim(0), b.dim(1)});
  matmul_kernel(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  if (Tape::tracked(tape, a) || Tape::tracked(tape, b)) {
    tape->bind(out, tape->record(Op::kMatmul, {a, b}, out));
  }
  return out;
}

Tensor conv3x3(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 3, "conv3x3: input must be (C,H,W), got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3 && w.dim(1) == x.dim(0),
          two_shapes("conv3x3", x.shape(), w.shape()));
  const int cout = w.dim(0), cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  require(b.defined() && b.rank() == 1 && b.dim(0) == cout,
          two_shapes("conv3x3 bias", w.shape(), b.shape()));
  Tensor out({cout, h, wd});
  const size_t plane = static_cast<size_t>(h) * wd;
  for (int oc = 0; oc < cout; ++oc) {
    double* op = out.data() + oc * plane;
    std::fill(op, op + plane, b.data()[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      conv3x3_plane(x.data() + ic * plane, w.data() + (static_cast<size_t>(oc) * cin + ic) * 9, op,
                    h, wd);
    }
  }
  if (Tape::tracked(tape, x) || Tape::tracked(tape, w) || Tape::tracked(tape, b)) {
    tape->bind(out, tape->record(Op::kConv3x3, {x, w, b}, out));
  }
  return out;
}

Tensor conv1x1(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 3, "conv1x1: input must be (C,H,W), got " + shape_str(x.shape()));
  require(w.rank() == 2 && w.dim(1) == x.dim(0), two_shapes("conv1x1", x.shape(), w.shape()));
  const int cout = w.dim(0), cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  require(b.defined() && b.rank() == 1 && b.dim(0) == cout,
          two_shapes("conv1x1 bias", w.shape(), b.shape()));
  Tensor out({cout, h, wd});
  const size_t plane = static_cast<size_t>(h) * wd;
  for (int oc = 0; oc < cout; ++oc) {
    double* op = out.data() + oc * plane;
    std::fill(op, op + plane, b.data()[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      const double wv = w.data()[static_cast<size_t>(oc) * cin + ic];
      const double* xp = x.data() + ic * plane;
      for (size_t i = 0; i < plane; ++i) op[i] += wv * xp[i];
    }
  }
  if (Tape::tracked(tape, x) || Tape::tracked(tape, w) || Tape::tracked(tape, b)) {
    tape->bind(out, tape->record(Op::kConv1x1, {x, w, b}, out));
  }
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), two_shapes("add", a.shape(), b.shape()));
  Tensor out(a.shape());
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (Tape::tracked(tape, a) || Tape::tracked(tape, b)) {
    tape->bind(out, tape->record(Op::kAdd, {a, b}, out));
  }
  return out;
}

Tensor mul_scalar(Tape* tape, const Tensor& x, double c) {
  Tensor out(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * c;
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kMulScalar, {x}, out, c));
  }
  return out;
}

Tensor mul_scalar(Tape* tape, const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "mul_scalar: scale must be a single element, got " + shape_str(s.shape()));
  const double c = s.data()[0];
  Tensor out(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * c;
  if (Tape::tracked(tape, x) || Tape::tracked(tape, s)) {
    tape->bind(out, tape->record(Op::kMulScalar, {x, s}, out, c));
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kRelu, {x}, out));
  }
  return out;
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = 1.0 / (1.0 + std::exp(-xp[i]));
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kSigmoid, {x}, out));
  }
  return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s / static_cast<double>(x.numel()));
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kMean, {x}, out));
  }
  return out;
}

Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  require(x.rank() == 3, "global_avg_pool: input must be (C,H,W), got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = x.data() + ch * plane;
    double s = 0.0;
    for (size_t i = 0; i < plane; ++i) s += xp[i];
    out.data()[ch] = s / static_cast<double>(plane);
  }
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kGlobalAvgPool, {x}, out));
  }
  return out;
}

Tensor upsample2x_nearest(Tape* tape, const Tensor& x) {
  require(x.rank() == 3, "upsample2x_nearest: input must be (C,H,W), got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = x.data() + static_cast<size_t>(ch) * h * w;
    double* op = out.data() + static_cast<size_t>(ch) * 4 * h * w;
    for (int y = 0; y < h; ++y) {
      const double* row = xp + static_cast<size_t>(y) * w;
      double* o0 = op + static_cast<size_t>(2 * y) * 2 * w;
      double* o1 = o0 + 2 * w;
      for (int xi = 0; xi < w; ++xi) {
        const double v = row[xi];
        o0[2 * xi] = v;
        o0[2 * xi + 1] = v;
        o1[2 * xi] = v;
        o1[2 * xi + 1] = v;
      }
    }
  }
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kUpsample2xNearest, {x}, out));
  }
  return out;
}

Tensor downsample2x_avg(Tape* tape, const Tensor& x) {
  require(x.rank() == 3, "downsample2x_avg: input must be (C,H,W), got " + shape_str(x.shape()));
  require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
          "downsample2x_avg: spatial dims must be even, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = x.data() + static_cast<size_t>(ch) * 4 * h * w;
    double* op = out.data() + static_cast<size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const double* r0 = xp + static_cast<size_t>(2 * y) * 2 * w;
      const double* r1 = r0 + 2 * w;
      double* orow = op + static_cast<size_t>(y) * w;
      for (int xi = 0; xi < w; ++xi) {
        orow[xi] = 0.25 * (r0[2 * xi] + r0[2 * xi + 1] + r1[2 * xi] + r1[2 * xi + 1]);
      }
    }
  }
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kDownsample2xAvg, {x}, out));
  }
  return out;
}

Tensor concat_channels(Tape* tape, std::span<const Tensor> xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  const int rank = xs.front().rank();
  require(rank == 1 || rank == 3,
          "concat_channels: inputs must be rank 1 or 3, got " + shape_str(xs.front().shape()));
  int ctotal = 0;
  for (const Tensor& t : xs) {
    require(t.rank() == rank, two_shapes("concat_channels", xs.front().shape(), t.shape()));
    if (rank == 3) {
      require(t.dim(1) == xs.front().dim(1) && t.dim(2) == xs.front().dim(2),
              two_shapes("concat_channels", xs.front().shape(), t.shape()));
    }
    ctotal += t.dim(0);
  }
  Shape os = xs.front().shape();
  os[0] = ctotal;
  Tensor out(os);
  double* op = out.data();
  for (const Tensor& t : xs) {
    std::memcpy(op, t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
    op += t.numel();
  }
  bool track = false;
  for (const Tensor& t : xs) track = track || Tape::tracked(tape, t);
  if (track) {
    tape->bind(out, tape->record(Op::kConcatChannels, {xs.begin(), xs.end()}, out));
  }
  return out;
}

Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const Tensor& labels) {
  require(logits.rank() >= 1, "softmax_cross_entropy: logits rank must be >= 1");
  const int k = logits.dim(0);
  const int64_t pixels = logits.numel() / k;
  require(labels.numel() == pixels,
          two_shapes("softmax_cross_entropy", logits.shape(), labels.shape()));
  // Saved softmax probabilities for the backward rule.
  Tensor probs(logits.shape());
  double total = 0.0;
  for (int64_t p = 0; p < pixels; ++p) {
    const double lv = labels.data()[p];
    const int label = static_cast<int>(lv);
    require(lv == static_cast<double>(label) && label >= 0 && label < k,
            "softmax_cross_entropy: label " + std::to_string(lv) + " outside [0," +
                std::to_string(k) + ")");
    double m = -HUGE_VAL;
    for (int c = 0; c < k; ++c) m = std::max(m, logits.data()[c * pixels + p]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(logits.data()[c * pixels + p] - m);
    for (int c = 0; c < k; ++c)
      probs.data()[c * pixels + p] = std::exp(logits.data()[c * pixels + p] - m) / z;
    total += -(logits.data()[label * pixels + p] - m - std::log(z));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(pixels));
  if (Tape::tracked(tape, logits)) {
    tape->bind(out, tape->record(Op::kSoftmaxCrossEntropy, {logits, labels, probs}, out));
  }
  return out;
}

Tensor l2_norm(Tape* tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  Tensor out = Tensor::scalar(std::sqrt(s));
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kL2Norm, {x}, out));
  }
  return out;
}

Tensor log_sum_exp(Tape* tape, std::span<const Tensor> xs) {
  require(!xs.empty(), "log_sum_exp: no inputs");
  Tensor out = Tensor::scalar(lse_of(xs));
  bool track = false;
  for (const Tensor& t : xs) track = track || Tape::tracked(tape, t);
  if (track) {
    tape->bind(out, tape->record(Op::kLogSumExp, {xs.begin(), xs.end()}, out));
  }
  return out;
}

Tensor slice(Tape* tape, const Tensor& x, int offset, int len) {
  require(x.rank() == 1, "slice: input must be rank 1, got " + shape_str(x.shape()));
  require(offset >= 0 && len > 0 && offset + len <= x.dim(0),
          "slice: range [" + std::to_string(offset) + "," + std::to_string(offset + len) +
              ") outside " + shape_str(x.shape()));
  Tensor out({len});
  std::memcpy(out.data(), x.data() + offset, static_cast<size_t>(len) * sizeof(double));
  if (Tape::tracked(tape, x)) {
    tape->bind(out, tape->record(Op::kSlice, {x}, out, 0.0, offset));
  }
  return out;
}

Tensor forward_op(Tape* tape, Op op, std::span<const Tensor> in, double aux, int iaux) {
  switch (op) {
    case Op::kMatmul: return matmul(tape, in[0], in[1]);
    case Op::kConv3x3: return conv3x3(tape, in[0], in[1], in[2]);
    case Op::kConv1x1: return conv1x1(tape, in[0], in[1], in[2]);
    case Op::kAdd: return add(tape, in[0], in[1]);
    case Op::kMulScalar:
      return in.size() == 2 ? mul_scalar(tape, in[0], in[1]) : mul_scalar(tape, in[0], aux);
    case Op::kRelu: return relu(tape, in[0]);
    case Op::kSigmoid: return sigmoid(tape, in[0]);
    case Op::kMean: return mean(tape, in[0]);
    case Op::kGlobalAvgPool: return global_avg_pool(tape, in[0]);
    case Op::kUpsample2xNearest: return upsample2x_nearest(tape, in[0]);
    case Op::kDownsample2xAvg: return downsample2x_avg(tape, in[0]);
    case Op::kConcatChannels: return concat_channels(tape, in);
    case Op::kSoftmaxCrossEntropy: return softmax_cross_entropy(tape, in[0], in[1]);
    case Op::kL2Norm: return l2_norm(tape, in[0]);
    case Op::kLogSumExp: return log_sum_exp(tape, in);
    case Op::kSlice: return slice(tape, in[0], iaux, static_cast<int>(aux));
    case Op::kLeaf: break;
  }
  fail("forward_op: unsupported op");
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Tape::backward(const Tensor& loss, GradMap* sink) {
  require(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  require(loss.tape_ == this && loss.node_ >= 0, "backward: loss is not recorded on this tape");
  require(!nodes_.empty(), "backward: tape is empty");

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[static_cast<size_t>(loss.node_)] = {1.0};

  // Gradient buffer of node `id`, allocated on first touch.
  auto gbuf = [&](int id, const Tensor& t) -> std::vector<double>& {
    auto& buf = grads[static_cast<size_t>(id)];
    if (buf.empty()) buf.assign(static_cast<size_t>(t.numel()), 0.0);
    return buf;
  };

  for (int id = loss.node_; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const auto& gy = grads[static_cast<size_t>(id)];
    if (gy.empty() || n.op == Op::kLeaf) continue;

    switch (n.op) {
      case Op::kMatmul: {
        const Tensor& a = n.in[0];
        const Tensor& b = n.in[1];
        const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        if (n.inputs[0] >= 0) {
          auto& ga = gbuf(n.inputs[0], a);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < nn; ++j) {
              const double g = gy[static_cast<size_t>(i) * nn + j];
              const double* brow = b.data() + j;
              for (int p = 0; p < k; ++p)
                ga[static_cast<size_t>(i) * k + p] += g * brow[static_cast<size_t>(p) * nn];
            }
        }
        if (n.inputs[1] >= 0) {
          auto& gb = gbuf(n.inputs[1], b);
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double av = a.data()[static_cast<size_t>(i) * k + p];
              const double* gyrow = gy.data() + static_cast<size_t>(i) * nn;
              double* gbrow = gb.data() + static_cast<size_t>(p) * nn;
              for (int j = 0; j < nn; ++j) gbrow[j] += av * gyrow[j];
            }
        }
        break;
      }
      case Op::kConv3x3: {
        const Tensor& x = n.in[0];
        const Tensor& w = n.in[1];
        const int cout = w.dim(0), cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
        const size_t plane = static_cast<size_t>(h) * wd;
        if (n.inputs[0] >= 0) {
          // dx = conv of gy with spatially flipped kernels, summed over oc.
          auto& gx = gbuf(n.inputs[0], x);
          double kflip[9];
          for (int oc = 0; oc < cout; ++oc) {
            const double* gyp = gy.data() + oc * plane;
            for (int ic = 0; ic < cin; ++ic) {
              const double* k = w.data() + (static_cast<size_t>(oc) * cin + ic) * 9;
              for (int i = 0; i < 9; ++i) kflip[8 - i] = k[i];
              conv3x3_plane(gyp, kflip, gx.data() + ic * plane, h, wd);
            }
          }
        }
        if (n.inputs[1] >= 0) {
          auto& gw = gbuf(n.inputs[1], w);
          for (int oc = 0; oc < cout; ++oc)
            for (int ic = 0; ic < cin; ++ic)
              conv3x3_plane_wgrad(x.data() + ic * plane, gy.data() + oc * plane,
                                  gw.data() + (static_cast<size_t>(oc) * cin + ic) * 9, h, wd);
        }
        if (n.inputs[2] >= 0) {
          auto& gb = gbuf(n.inputs[2], n.in[2]);
          for (int oc = 0; oc < cout; ++oc) {
            double s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += gy[oc * plane + i];
            gb[static_cast<size_t>(oc)] += s;
          }
        }
        break;
      }
      case Op::kConv1x1: {
        const Tensor& x = n.in[0];
        const Tensor& w = n.in[1];
        const int cout = w.dim(0), cin = x.dim(0);
        const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
        if (n.inputs[0] >= 0) {
          auto& gx = gbuf(n.inputs[0], x);
          for (int oc = 0; oc < cout; ++oc)
            for (int ic = 0; ic < cin; ++ic) {
              const double wv = w.data()[static_cast<size_t>(oc) * cin + ic];
              const double* gyp = gy.data() + oc * plane;
              double* gxp = gx.data() + ic * plane;
              for (size_t i = 0; i < plane; ++i) gxp[i] += wv * gyp[i];
            }
        }
        if (n.inputs[1] >= 0) {
          auto& gw = gbuf(n.inputs[1], w);
          for (int oc = 0; oc < cout; ++oc)
            for (int ic = 0; ic < cin; ++ic) {
              gw[static_cast<size_t>(oc) * cin + ic] +=
                  dot(gy.data() + oc * plane, x.data() + ic * plane, static_cast<int>(plane));
            }
        }
        if (n.inputs[2] >= 0) {
          auto& gb = gbuf(n.inputs[2], n.in[2]);
          for (int oc = 0; oc < cout; ++oc) {
            double s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += gy[oc * plane + i];
            gb[static_cast<size_t>(oc)] += s;
          }
        }
        break;
      }
      case Op::kAdd: {
        for (int side = 0; side < 2; ++side) {
          if (n.inputs[static_cast<size_t>(side)] < 0) continue;
          auto& g = gbuf(n.inputs[static_cast<size_t>(side)], n.in[static_cast<size_t>(side)]);
          for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
        break;
      }
      case Op::kMulScalar: {
        const double c = n.aux;
        if (n.inputs[0] >= 0) {
          auto& gx = gbuf(n.inputs[0], n.in[0]);
          for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * c;
        }
        if (n.in.size() == 2 && n.inputs[1] >= 0) {
          gbuf(n.inputs[1], n.in[1])[0] +=
              dot(gy.data(), n.in[0].data(), static_cast<int>(gy.size()));
        }
        break;
      }
      case Op::kRelu: {
        if (n.inputs[0] < 0) break;
        auto& gx = gbuf(n.inputs[0], n.in[0]);
        const double* xp = n.in[0].data();
        for (size_t i = 0; i < gy.size(); ++i)
          if (xp[i] > 0.0) gx[i] += gy[i];
        break;
      }
      case Op::kSigmoid: {
        if (n.inputs[0] < 0) break;
        auto& gx = gbuf(n.inputs[0], n.in[0]);
        const double* yp = n.out.data();
        for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yp[i] * (1.0 - yp[i]);
        break;
      }
      case Op::kMean: {
        if (n.inputs[0] < 0) break;
        auto& gx = gbuf(n.inputs[0], n.in[0]);
        const double g = gy[0] / static_cast<double>(n.in[0].numel());
        for (double& v : gx) v += g;
        break;
      }
      case Op::kGlobalAvgPool: {
        if (n.inputs[0] < 0) break;
        const Tensor& x = n.in[0];
        const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
        auto& gx = gbuf(n.inputs[0], x);
        for (int c = 0; c < x.dim(0); ++c) {
          const double g = gy[static_cast<size_t>(c)] / static_cast<double>(plane);
          double* gxp = gx.data() + c * plane;
          for (size_t i = 0; i < plane; ++i) gxp[i] += g;
        }
        break;
      }
      case Op::kUpsample2xNearest: {
        if (n.inputs[0] < 0) break;
        const Tensor& x = n.in[0];
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        auto& gx = gbuf(n.inputs[0], x);
        for (int ch = 0; ch < c; ++ch) {
          const double* gp = gy.data() + static_cast<size_t>(ch) * 4 * h * w;
          double* gxp = gx.data() + static_cast<size_t>(ch) * h * w;
          for (int y = 0; y < h; ++y) {
            const double* g0 = gp + static_cast<size_t>(2 * y) * 2 * w;
            const double* g1 = g0 + 2 * w;
            for (int xi = 0; xi < w; ++xi)
              gxp[static_cast<size_t>(y) * w + xi] +=
                  g0[2 * xi] + g0[2 * xi + 1] + g1[2 * xi] + g1[2 * xi + 1];
          }
        }
        break;
      }
      case Op::kDownsample2xAvg: {
        if (n.inputs[0] < 0) break;
        const Tensor& x = n.in[0];
        const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
        auto& gx = gbuf(n.inputs[0], x);
        for (int ch = 0; ch < c; ++ch) {
          const double* gp = gy.data() + static_cast<size_t>(ch) * h * w;
          double* gxp = gx.data() + static_cast<size_t>(ch) * 4 * h * w;
          for (int y = 0; y < h; ++y)
            for (int xi = 0; xi < w; ++xi) {
              const double g = 0.25 * gp[static_cast<size_t>(y) * w + xi];
              double* r0 = gxp + static_cast<size_t>(2 * y) * 2 * w + 2 * xi;
              double* r1 = r0 + 2 * w;
              r0[0] += g;
              r0[1] += g;
              r1[0] += g;
              r1[1] += g;
            }
        }
        break;
      }
      case Op::kConcatChannels: {
        size_t off = 0;
        for (size_t i = 0; i < n.in.size(); ++i) {
          const size_t len = static_cast<size_t>(n.in[i].numel());
          if (n.inputs[i] >= 0) {
            auto& g = gbuf(n.inputs[i], n.in[i]);
            for (size_t j = 0; j < len; ++j) g[j] += gy[off + j];
          }
          off += len;
        }
        break;
      }
      case Op::kSoftmaxCrossEntropy: {
        if (n.inputs[0] < 0) break;
        const Tensor& logits = n.in[0];
        const Tensor& labels = n.in[1];
        const Tensor& probs = n.in[2];
        const int k = logits.dim(0);
        const int64_t pixels = logits.numel() / k;
        const double g = gy[0] / static_cast<double>(pixels);
        auto& gl = gbuf(n.inputs[0], logits);
        for (int64_t p = 0; p < pixels; ++p) {
          const int label = static_cast<int>(labels.data()[p]);
          for (int c = 0; c < k; ++c) {
            const size_t idx = static_cast<size_t>(c) * pixels + p;
            gl[idx] += g * (probs.data()[idx] - (c == label ? 1.0 : 0.0));
          }
        }
        break;
      }
      case Op::kL2Norm: {
        if (n.inputs[0] < 0) break;
        const double norm = n.out.data()[0];
        if (norm > 0.0) {
          auto& gx = gbuf(n.inputs[0], n.in[0]);
          const double* xp = n.in[0].data();
          for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0] * xp[i] / norm;
        } else {
          gbuf(n.inputs[0], n.in[0]);  // subgradient 0 at the origin
        }
        break;
      }
      case Op::kLogSumExp: {
        const double out = n.out.data()[0];
        for (size_t i = 0; i < n.in.size(); ++i) {
          if (n.inputs[i] < 0) continue;
          auto& gx = gbuf(n.inputs[i], n.in[i]);
          const double* xp = n.in[i].data();
          for (size_t j = 0; j < gx.size(); ++j) gx[j] += gy[0] * std::exp(xp[j] - out);
        }
        break;
      }
      case Op::kSlice: {
        if (n.inputs[0] < 0) break;
        auto& gx = gbuf(n.inputs[0], n.in[0]);
        for (size_t i = 0; i < gy.size(); ++i) gx[static_cast<size_t>(n.iaux) + i] += gy[i];
        break;
      }
      case Op::kLeaf:
        break;
    }
    grads[static_cast<size_t>(id)].clear();
    grads[static_cast<size_t>(id)].shrink_to_fit();
  }

  // Flush leaf gradients.
  for (size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (n.op != Op::kLeaf || grads[id].empty()) continue;
    if (sink != nullptr) {
      auto& buf = (*sink)[n.out.storage_key()];
      if (buf.empty()) buf.assign(static_cast<size_t>(n.out.numel()), 0.0);
      for (size_t i = 0; i < grads[id].size(); ++i) buf[i] += grads[id][i];
    } else if (n.out.requires_grad()) {
      double* g = n.out.grad();
      for (size_t i = 0; i < grads[id].size(); ++i) g[i] += grads[id][i];
    }
  }

  clear();  // the tape is consumed
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor(Tape*)>& f,
                           std::span<const std::pair<std::string, Tensor>> params, double h,
                           double tol) {
  require(h > 0.0 && h <= 1e-2, "grad_check: h must be in (0, 1e-2]");

  const double v1 = f(nullptr).item();
  const double v2 = f(nullptr).item();
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0)
    throw std::runtime_error("grad_check: program is not deterministic (two forward passes disagree)");

  GradMap analytic;
  {
    Tape tape;
    Tensor loss = f(&tape);
    tape.backward(loss, &analytic);
  }

  GradCheckResult res;
  res.max_rel_err = 0.0;
  for (const auto& [name, param] : params) {
    Tensor p = param;  // shared storage: perturb in place
    const auto it = analytic.find(p.storage_key());
    double worst = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double fp = f(nullptr).item();
      p.data()[i] = saved - h;
      const double fm = f(nullptr).item();
      p.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = it != analytic.end() ? it->second[static_cast<size_t>(i)] : 0.0;
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double rel = std::abs(a - numeric) / denom;
      worst = std::max(worst, rel);
    }
    res.per_param.push_back({name, worst});
    res.max_rel_err = std::max(res.max_rel_err, worst);
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

}  // namespace divdr
