// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense-tensor reverse-mode autodiff: 64-bit floats, row-major
// storage, tape-based eager execution. Just enough operators for a gated
// multi-scale routing network and its losses.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "divdr/rng.hpp"

namespace divdr {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Value-semantics handle over shared storage. The shape lives on the handle,
// so reshaping is a free view; gradients live next to the values and exist
// only for requires_grad tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t numel() const;
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }

  double* data();
  const double* data() const;
  std::span<double> values() { return {data(), static_cast<size_t>(numel())}; }
  std::span<const double> values() const { return {data(), static_cast<size_t>(numel())}; }
  double item() const;  // value of a 1-element tensor

  bool requires_grad() const;
  double* grad();
  const double* grad() const;
  std::span<const double> grad_values() const { return {grad(), static_cast<size_t>(numel())}; }
  void zero_grad();

  // View with a new shape over the same storage (and the same tape node).
  Tensor reshaped(Shape new_shape) const;

  const void* storage_key() const { return storage_.get(); }

 private:
  struct Storage {
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
  Shape shape_;
  int node_ = -1;           // producing node on `tape_`, -1 for leaves
  const Tape* tape_ = nullptr;
  friend class Tape;
};

Tensor randn(Shape shape, RngStream& rng, double stddev, bool requires_grad = false);

enum class Op {
  kLeaf,
  kMatmul,
  kConv3x3,
  kConv1x1,
  kAdd,
  kMulScalar,
  kRelu,
  kSigmoid,
  kMean,
  kGlobalAvgPool,
  kUpsample2xNearest,
  kDownsample2xAvg,
  kConcatChannels,
  kSoftmaxCrossEntropy,
  kL2Norm,
  kLogSumExp,
  kSlice,
};

const char* op_name(Op op);

// Per-leaf gradients keyed by storage identity; used for deterministic
// index-ordered reduction across concurrently processed batch elements.
using GradMap = std::unordered_map<const void*, std::vector<double>>;

// Records one training step's operations in topological order. Cleared after
// backward (the tape is consumed) and between steps.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Accumulates d loss / d leaf into each requires_grad tensor's grad buffer,
  // or into `sink` when given. `loss` must be a scalar recorded on this tape.
  void backward(const Tensor& loss, GradMap* sink = nullptr);

  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    std::vector<int> inputs;      // node ids, -1 for untracked constants
    std::vector<Tensor> in;       // input handles (values saved for backward)
    Tensor out;
    double aux = 0.0;             // scalar constant, slice offset, etc.
    int iaux = 0;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_ids_;

  int record(Op op, std::vector<Tensor> inputs, Tensor out, double aux = 0.0, int iaux = 0);
  int node_id_for_input(const Tensor& t);
  int ensure_leaf(const Tensor& t);
  static bool tracked(const Tape* tape, const Tensor& t);
  void bind(Tensor& t, int node) {
    t.node_ = node;
    t.tape_ = this;
  }

  friend Tensor matmul(Tape*, const Tensor&, const Tensor&);
  friend Tensor conv3x3(Tape*, const Tensor&, const Tensor&, const Tensor&);
  friend Tensor conv1x1(Tape*, const Tensor&, const Tensor&, const Tensor&);
  friend Tensor add(Tape*, const Tensor&, const Tensor&);
  friend Tensor mul_scalar(Tape*, const Tensor&, double);
  friend Tensor mul_scalar(Tape*, const Tensor&, const Tensor&);
  friend Tensor relu(Tape*, const Tensor&);
  friend Tensor sigmoid(Tape*, const Tensor&);
  friend Tensor mean(Tape*, const Tensor&);
  friend Tensor global_avg_pool(Tape*, const Tensor&);
  friend Tensor upsample2x_nearest(Tape*, const Tensor&);
  friend Tensor downsample2x_avg(Tape*, const Tensor&);
  friend Tensor concat_channels(Tape*, std::span<const Tensor>);
  friend Tensor softmax_cross_entropy(Tape*, const Tensor&, const Tensor&);
  friend Tensor l2_norm(Tape*, const Tensor&);
  friend Tensor log_sum_exp(Tape*, std::span<const Tensor>);
  friend Tensor slice(Tape*, const Tensor&, int, int);
};

// Forward operators. Pass tape == nullptr for inference (nothing recorded).
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor conv3x3(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);  // stride 1, pad 1
Tensor conv1x1(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul_scalar(Tape* tape, const Tensor& x, double c);
Tensor mul_scalar(Tape* tape, const Tensor& x, const Tensor& s);  // s is a 1-element tensor
Tensor relu(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);
Tensor global_avg_pool(Tape* tape, const Tensor& x);
Tensor upsample2x_nearest(Tape* tape, const Tensor& x);
Tensor downsample2x_avg(Tape* tape, const Tensor& x);
Tensor concat_channels(Tape* tape, std::span<const Tensor> xs);
// logits (K, ...spatial), labels (...spatial) holding integral class ids.
Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const Tensor& labels);
Tensor l2_norm(Tape* tape, const Tensor& x);
Tensor log_sum_exp(Tape* tape, std::span<const Tensor> xs);
Tensor slice(Tape* tape, const Tensor& x, int offset, int len);  // rank-1 only

// Generic dispatcher used by the gradient-check sweeps.
Tensor forward_op(Tape* tape, Op op, std::span<const Tensor> inputs, double aux = 0.0, int iaux = 0);

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central finite differences against the tape gradient. `f` must be a
// deterministic scalar-valued program over the given parameters; two
// disagreeing forward passes are rejected.
GradCheckResult grad_check(const std::function<Tensor(Tape*)>& f,
                           std::span<const std::pair<std::string, Tensor>> params,
                           double h, double tol);

}  // namespace divdr
