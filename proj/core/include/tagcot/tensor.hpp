#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tagcot/errors.hpp"
#include "tagcot/rng.hpp"

namespace tagcot {

// Dense row-major f64 tensor. Owns its storage; `grad` stays empty until a
// backward pass (or ensure_grad) touches it.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor row(std::vector<double> v);                       // [1 x n]
  static Tensor column(std::vector<double> v);                    // [n x 1]
  static Tensor matrix(std::size_t m, std::size_t n, std::vector<double> v);
  static Tensor zeros(std::size_t m, std::size_t n);
  static Tensor randn(std::vector<std::size_t> s, Rng& rng, double sd);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double item() const;  // requires size() == 1

  void ensure_grad();
  void zero_grad();
};

std::string shape_str(std::span<const std::size_t> shape);

enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,      // a * x
  kAddConst,   // x + a
  kRelu,
  kGelu,
  kSigmoid,
  kTanh,
  kLog,
  kExp,
  kClamp,      // clamp into [a, b]
  kMatmul,
  kTranspose,
  kSoftmaxRows,
  kSoftmaxRowsCausal,
  kCausalAttend,
  kLogSoftmaxRows,
  kLayerNormRows,
  kEmbeddingLookup,
  kPickPerRow,
  kConcatRows,
  kConcatCols,
  kSliceCols,
  kMeanRows,
  kSumAll,
};

// Elementwise dispatch tags (public surface; named methods below do the work).
enum class ElemOp { kAdd, kMul, kRelu, kGelu, kSigmoid, kTanh };

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;
  bool valid() const { return tape != nullptr; }
};

// Dynamic computation tape, rebuilt per forward pass. Records operations in
// topological order; one backward() visits each record exactly once. A tape
// and its vars are confined to one thread; distinct tapes may run in
// parallel and share read-only Tensors via constant_ref/leaf bindings.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds an external tensor. Gradients accumulate into t.grad when
  // t.requires_grad is set.
  Var leaf(Tensor& t);
  // Owned constant.
  Var constant(Tensor t);
  Var constant(std::vector<std::size_t> shape, std::vector<double> values);
  Var scalar(double v);
  // External read-only view; never receives gradient, never copied.
  Var constant_ref(const Tensor& t);

  // Elementwise binaries. Broadcasting: equal shapes, or either side size 1.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);

  // Elementwise unaries.
  Var neg(Var a);
  Var scale(Var a, double k);
  Var add_const(Var a, double k);
  Var relu(Var a);
  Var gelu(Var a);     // exact erf form
  Var sigmoid(Var a);  // output clamped into the open interval (0, 1)
  Var tanh_(Var a);
  Var log_(Var a);     // requires strictly positive input
  Var exp_(Var a);
  Var clamp(Var a, double lo, double hi);

  Var matmul(Var a, Var b);  // [m x k] * [k x n]
  Var transpose(Var a);

  Var softmax_rows(Var a);      // max-subtracted; each row sums to 1
  // Softmax over columns j <= i of row i; columns j > i get probability 0.
  // Fused form of add(causal mask) + softmax_rows.
  Var softmax_rows_causal(Var a);
  // out[i] = sum_{j <= i} probs[i, j] * v[j]; the fixed j-order keeps row i
  // bitwise independent of positions beyond i.
  Var causal_attend(Var probs, Var v);
  Var log_softmax_rows(Var a);

  // Per-row affine layer norm: gain/bias are [1 x n] applied to each row.
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

  // Rows of `table` selected by ids; backward scatter-adds into the table.
  Var embedding_lookup(Var table, std::span<const int> ids);
  // One column per row: out[i, 0] = x[i, cols[i]].
  Var pick_per_row(Var x, std::span<const int> cols);

  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t start, std::size_t count);

  Var mean_rows(Var a);  // [m x n] -> [1 x n]
  Var sum_all(Var a);    // -> scalar
  Var mean_all(Var a);   // -> scalar

  // Reverse-mode sweep from a scalar loss. Leaves not on the path to the
  // loss keep zero grad. Repeated identical passes after zero_grad produce
  // bitwise-equal grads.
  void backward(Var loss);

  std::span<const double> values(Var v) const;
  const std::vector<std::size_t>& shape(Var v) const;
  std::span<const double> grad(Var v) const;  // empty if none
  double scalar_value(Var v) const;
  Tensor to_tensor(Var v) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t bytes_in_use() const { return bytes_; }
  // 0 disables the budget. Exceeding it throws BatchMemoryError.
  void set_byte_budget(std::size_t budget) { budget_ = budget; }

 private:
  struct Node {
    Op op = Op::kConst;
    std::vector<std::size_t> shape;
    std::vector<double> own;        // value storage unless ext is set
    const Tensor* ext = nullptr;    // external value storage (leaf/const_ref)
    Tensor* bound = nullptr;        // leaf write-back target
    std::vector<double> grad;
    std::vector<double> aux;        // op scratch kept for backward
    std::vector<std::uint32_t> inputs;
    std::vector<int> ids;           // embedding/pick indices
    double a = 0.0, b = 0.0;        // scale factor, clamp bounds, eps
    std::size_t i0 = 0, i1 = 0;     // slice window
    bool requires_grad = false;
    bool touched = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  std::span<const double> vals(const Node& n) const;
  std::uint32_t push(Node n);
  Var make(Op op, std::vector<std::size_t> shape, std::vector<std::uint32_t> inputs);
  void check_same_tape(Var v) const;
  void add_bytes(std::size_t bytes);
  std::vector<double>& grad_buf(std::uint32_t id);
  void backprop_node(std::uint32_t id);

  std::vector<Node> nodes_;
  std::size_t bytes_ = 0;
  std::size_t budget_ = 0;
  bool backward_done_ = false;
};

// Spec-surface elementwise dispatcher (binary tags take two inputs, unary
// tags one).
Var elementwise(Tape& t, ElemOp tag, std::span<const Var> inputs);

// Max over coordinates of |autodiff - central difference| /
// (|central difference| + 1e-8) for scalar-valued f built on a tape.
// f must be pure and deterministic; eps must lie in [1e-6, 1e-3].
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                         double eps);

// Same check for a parameter embedded in a larger model. `run(true)` must
// rebuild the forward pass and backward into param.grad; `run(false)` must
// return the loss value only. Checks up to max_coords coordinates (all of
// them when the parameter is small, a seeded sample otherwise).
double finite_diff_check_param(Tensor& param, const std::function<double(bool)>& run,
                               double eps, std::size_t max_coords = 64,
                               std::uint64_t seed = 0);

}  // namespace tagcot
