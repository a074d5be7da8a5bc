#include "tagcot/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tagcot {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::size_t shape_product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), values(shape_product(shape), fill) {
  if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.values[0] = v;
  return t;
}

Tensor Tensor::row(std::vector<double> v) {
  Tensor t;
  t.shape = {1, v.size()};
  t.values = std::move(v);
  return t;
}

Tensor Tensor::column(std::vector<double> v) {
  Tensor t;
  t.shape = {v.size(), 1};
  t.values = std::move(v);
  return t;
}

Tensor Tensor::matrix(std::size_t m, std::size_t n, std::vector<double> v) {
  if (v.size() != m * n) throw DimensionError("matrix: value count does not match shape");
  Tensor t;
  t.shape = {m, n};
  t.values = std::move(v);
  return t;
}

Tensor Tensor::zeros(std::size_t m, std::size_t n) { return Tensor({m, n}); }

Tensor Tensor::randn(std::vector<std::size_t> s, Rng& rng, double sd) {
  Tensor t(std::move(s));
  for (auto& v : t.values) v = rng.normal(0.0, sd);
  return t;
}

std::size_t Tensor::rows() const {
  if (shape.size() != 2) throw DimensionError("rows(): tensor is not rank 2");
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() != 2) throw DimensionError("cols(): tensor is not rank 2");
  return shape[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

double Tensor::item() const {
  if (values.size() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(values.size()) + " elements");
  }
  return values[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(values.size(), 0.0); }

std::string shape_str(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ' ';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

Tape::Node& Tape::node(Var v) { return nodes_[v.id]; }
const Tape::Node& Tape::node(Var v) const { return nodes_[v.id]; }

std::span<const double> Tape::vals(const Node& n) const {
  return n.ext ? std::span<const double>(n.ext->values) : std::span<const double>(n.own);
}

void Tape::add_bytes(std::size_t bytes) {
  bytes_ += bytes;
  if (budget_ != 0 && bytes_ > budget_) {
    throw BatchMemoryError("tape byte budget exceeded: " + std::to_string(bytes_) + " > " +
                           std::to_string(budget_));
  }
}

std::uint32_t Tape::push(Node n) {
  add_bytes(n.own.size() * sizeof(double));
  nodes_.push_back(std::move(n));
  return static_cast<std::uint32_t>(nodes_.size() - 1);
}

void Tape::check_same_tape(Var v) const {
  if (v.tape != this) throw ContractError("var belongs to a different tape");
  if (v.id >= nodes_.size()) throw ContractError("dangling var id");
}

Var Tape::make(Op op, std::vector<std::size_t> shape, std::vector<std::uint32_t> inputs) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.inputs = std::move(inputs);
  n.own.resize(shape_product(n.shape));
  for (auto i : n.inputs) {
    if (nodes_[i].requires_grad) n.requires_grad = true;
  }
  return Var{this, push(std::move(n))};
}

Var Tape::leaf(Tensor& t) {
  Node n;
  n.op = Op::kLeaf;
  n.shape = t.shape;
  n.ext = &t;
  n.bound = &t;
  n.requires_grad = t.requires_grad;
  return Var{this, push(std::move(n))};
}

Var Tape::constant(Tensor t) {
  Node n;
  n.op = Op::kConst;
  n.shape = t.shape;
  n.own = std::move(t.values);
  return Var{this, push(std::move(n))};
}

Var Tape::constant(std::vector<std::size_t> shape, std::vector<double> values) {
  if (shape_product(shape) != values.size()) {
    throw DimensionError("constant: value count does not match shape");
  }
  Node n;
  n.op = Op::kConst;
  n.shape = std::move(shape);
  n.own = std::move(values);
  return Var{this, push(std::move(n))};
}

Var Tape::scalar(double v) { return constant({1}, {v}); }

Var Tape::constant_ref(const Tensor& t) {
  Node n;
  n.op = Op::kConst;
  n.shape = t.shape;
  n.ext = &t;
  return Var{this, push(std::move(n))};
}

std::span<const double> Tape::values(Var v) const {
  check_same_tape(v);
  return vals(node(v));
}

const std::vector<std::size_t>& Tape::shape(Var v) const {
  check_same_tape(v);
  return node(v).shape;
}

std::span<const double> Tape::grad(Var v) const {
  check_same_tape(v);
  return node(v).grad;
}

double Tape::scalar_value(Var v) const {
  auto s = values(v);
  if (s.size() != 1) throw ContractError("scalar_value: var has " + std::to_string(s.size()) + " elements");
  return s[0];
}

Tensor Tape::to_tensor(Var v) const {
  Tensor t;
  t.shape = shape(v);
  auto s = values(v);
  t.values.assign(s.begin(), s.end());
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// Broadcast rule: equal shapes, or either side has exactly one element.
bool broadcast_ok(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (shape_product(a) == 1 || shape_product(b) == 1) return true;
  return a == b;
}

}  // namespace

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const auto& na = node(a);
  const auto& nb = node(b);
  if (!broadcast_ok(na.shape, nb.shape)) {
    throw DimensionError("elementwise add: incompatible shapes " + shape_str(na.shape) +
                         " vs " + shape_str(nb.shape));
  }
  auto va = vals(na);
  auto vb = vals(nb);
  auto out = make(Op::kAdd, va.size() >= vb.size() ? na.shape : nb.shape, {a.id, b.id});
  auto& n = node(out);
  const std::size_t m = n.own.size();
  for (std::size_t i = 0; i < m; ++i) {
    n.own[i] = va[va.size() == 1 ? 0 : i] + vb[vb.size() == 1 ? 0 : i];
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const auto& na = node(a);
  const auto& nb = node(b);
  if (!broadcast_ok(na.shape, nb.shape)) {
    throw DimensionError("elementwise sub: incompatible shapes " + shape_str(na.shape) +
                         " vs " + shape_str(nb.shape));
  }
  auto va = vals(na);
  auto vb = vals(nb);
  auto out = make(Op::kSub, va.size() >= vb.size() ? na.shape : nb.shape, {a.id, b.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) {
    n.own[i] = va[va.size() == 1 ? 0 : i] - vb[vb.size() == 1 ? 0 : i];
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const auto& na = node(a);
  const auto& nb = node(b);
  if (!broadcast_ok(na.shape, nb.shape)) {
    throw DimensionError("elementwise mul: incompatible shapes " + shape_str(na.shape) +
                         " vs " + shape_str(nb.shape));
  }
  auto va = vals(na);
  auto vb = vals(nb);
  auto out = make(Op::kMul, va.size() >= vb.size() ? na.shape : nb.shape, {a.id, b.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) {
    n.own[i] = va[va.size() == 1 ? 0 : i] * vb[vb.size() == 1 ? 0 : i];
  }
  return out;
}

namespace {
double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_bwd(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}
double sigmoid_fwd(double x) {
  const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  // keep the output strictly inside (0, 1)
  const double lo = 1e-300;
  const double hi = 1.0 - 1.1102230246251565e-16;
  return std::min(std::max(p, lo), hi);
}
}  // namespace

Var Tape::neg(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kNeg, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = -va[i];
  return out;
}

Var Tape::scale(Var a, double k) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kScale, node(a).shape, {a.id});
  auto& n = node(out);
  n.a = k;
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = k * va[i];
  return out;
}

Var Tape::add_const(Var a, double k) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kAddConst, node(a).shape, {a.id});
  auto& n = node(out);
  n.a = k;
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = va[i] + k;
  return out;
}

Var Tape::relu(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kRelu, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = va[i] > 0.0 ? va[i] : 0.0;
  return out;
}

Var Tape::gelu(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kGelu, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = gelu_fwd(va[i]);
  return out;
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kSigmoid, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = sigmoid_fwd(va[i]);
  return out;
}

Var Tape::tanh_(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kTanh, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = std::tanh(va[i]);
  return out;
}

Var Tape::log_(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kLog, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) {
    if (!(va[i] > 0.0)) {
      throw NumericalError("log: non-positive input " + std::to_string(va[i]) + " at index " +
                           std::to_string(i));
    }
    n.own[i] = std::log(va[i]);
  }
  return out;
}

Var Tape::exp_(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kExp, node(a).shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = std::exp(va[i]);
  return out;
}

Var Tape::clamp(Var a, double lo, double hi) {
  check_same_tape(a);
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  auto va = vals(node(a));
  auto out = make(Op::kClamp, node(a).shape, {a.id});
  auto& n = node(out);
  n.a = lo;
  n.b = hi;
  for (std::size_t i = 0; i < n.own.size(); ++i) n.own[i] = std::min(std::max(va[i], lo), hi);
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const auto& na = node(a);
  const auto& nb = node(b);
  if (na.shape.size() != 2 || nb.shape.size() != 2) {
    throw DimensionError("matmul: both operands must be rank 2, got " + shape_str(na.shape) +
                         " and " + shape_str(nb.shape));
  }
  if (na.shape[1] != nb.shape[0]) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(na.shape) + " vs " +
                         shape_str(nb.shape));
  }
  const std::size_t m = na.shape[0], k = na.shape[1], n_ = nb.shape[1];
  auto va = vals(na);
  auto vb = vals(nb);
  auto out = make(Op::kMatmul, {m, n_}, {a.id, b.id});
  auto& n = node(out);
  CMap A(va.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMap B(vb.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n_));
  MMap C(n.own.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n_));
  C.noalias() = A * B;
  return out;
}

Var Tape::transpose(Var a) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2) throw DimensionError("transpose: operand must be rank 2");
  const std::size_t m = na.shape[0], c = na.shape[1];
  auto va = vals(na);
  auto out = make(Op::kTranspose, {c, m}, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) n.own[j * m + i] = va[i * c + j];
  }
  return out;
}

Var Tape::softmax_rows(Var a) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2) throw DimensionError("softmax_rows: operand must be rank 2");
  const std::size_t m = na.shape[0], c = na.shape[1];
  auto va = vals(na);
  auto out = make(Op::kSoftmaxRows, na.shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = va.data() + i * c;
    double* orow = n.own.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  return out;
}

Var Tape::softmax_rows_causal(Var a) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2 || na.shape[0] != na.shape[1]) {
    throw DimensionError("softmax_rows_causal: operand must be square, got " +
                         shape_str(na.shape));
  }
  const std::size_t m = na.shape[0];
  auto va = vals(na);
  auto out = make(Op::kSoftmaxRowsCausal, na.shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = va.data() + i * m;
    double* orow = n.own.data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j <= i; ++j) orow[j] *= inv;
    for (std::size_t j = i + 1; j < m; ++j) orow[j] = 0.0;
  }
  return out;
}

Var Tape::causal_attend(Var probs, Var v) {
  check_same_tape(probs);
  check_same_tape(v);
  const auto& np = node(probs);
  const auto& nv = node(v);
  if (np.shape.size() != 2 || np.shape[0] != np.shape[1]) {
    throw DimensionError("causal_attend: probs must be square");
  }
  if (nv.shape.size() != 2 || nv.shape[0] != np.shape[0]) {
    throw DimensionError("causal_attend: value rows must match probs: " + shape_str(np.shape) +
                         " vs " + shape_str(nv.shape));
  }
  const std::size_t n = np.shape[0], d = nv.shape[1];
  auto vp = vals(np);
  auto vv = vals(nv);
  auto out = make(Op::kCausalAttend, {n, d}, {probs.id, v.id});
  auto& nn = node(out);
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = nn.own.data() + i * d;
    for (std::size_t j = 0; j <= i; ++j) {
      const double p = vp[i * n + j];
      const double* vrow = vv.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) orow[c] += p * vrow[c];
    }
  }
  return out;
}

Var Tape::log_softmax_rows(Var a) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2) throw DimensionError("log_softmax_rows: operand must be rank 2");
  const std::size_t m = na.shape[0], c = na.shape[1];
  auto va = vals(na);
  auto out = make(Op::kLogSoftmaxRows, na.shape, {a.id});
  auto& n = node(out);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = va.data() + i * c;
    double* orow = n.own.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) orow[j] = row[j] - lse;
  }
  return out;
}

Var Tape::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  check_same_tape(x);
  check_same_tape(gain);
  check_same_tape(bias);
  const auto& nx = node(x);
  const auto& ng = node(gain);
  const auto& nb = node(bias);
  if (nx.shape.size() != 2) throw DimensionError("layer_norm_rows: input must be rank 2");
  const std::size_t m = nx.shape[0], c = nx.shape[1];
  if (shape_product(ng.shape) != c || shape_product(nb.shape) != c) {
    throw DimensionError("layer_norm_rows: gain/bias must have " + std::to_string(c) +
                         " elements");
  }
  auto vx = vals(nx);
  auto vg = vals(ng);
  auto vb = vals(nb);
  auto out = make(Op::kLayerNormRows, nx.shape, {x.id, gain.id, bias.id});
  auto& n = node(out);
  n.a = eps;
  n.aux.resize(2 * m);  // per row: mean, inv_std
  add_bytes(n.aux.size() * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = vx.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    n.aux[2 * i] = mean;
    n.aux[2 * i + 1] = inv;
    double* orow = n.own.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = vg[j] * ((row[j] - mean) * inv) + vb[j];
    }
  }
  return out;
}

Var Tape::embedding_lookup(Var table, std::span<const int> ids) {
  check_same_tape(table);
  const auto& nt = node(table);
  if (nt.shape.size() != 2) throw DimensionError("embedding_lookup: table must be rank 2");
  const std::size_t v = nt.shape[0], d = nt.shape[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ContractError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(v) + ")");
    }
  }
  auto vt = vals(nt);
  auto out = make(Op::kEmbeddingLookup, {ids.size(), d}, {table.id});
  auto& n = node(out);
  n.ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(vt.data() + static_cast<std::size_t>(ids[i]) * d, d, n.own.data() + i * d);
  }
  return out;
}

Var Tape::pick_per_row(Var x, std::span<const int> cols) {
  check_same_tape(x);
  const auto& nx = node(x);
  if (nx.shape.size() != 2) throw DimensionError("pick_per_row: input must be rank 2");
  const std::size_t m = nx.shape[0], c = nx.shape[1];
  if (cols.size() != m) throw DimensionError("pick_per_row: need one column index per row");
  for (int j : cols) {
    if (j < 0 || static_cast<std::size_t>(j) >= c) {
      throw ContractError("pick_per_row: column " + std::to_string(j) + " out of range");
    }
  }
  auto vx = vals(nx);
  auto out = make(Op::kPickPerRow, {m, 1}, {x.id});
  auto& n = node(out);
  n.ids.assign(cols.begin(), cols.end());
  for (std::size_t i = 0; i < m; ++i) n.own[i] = vx[i * c + static_cast<std::size_t>(cols[i])];
  return out;
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  check_same_tape(parts[0]);
  if (node(parts[0]).shape.size() != 2) {
    throw DimensionError("concat_rows: inputs must be rank 2");
  }
  std::size_t rows = 0;
  const std::size_t c = node(parts[0]).shape[1];
  std::vector<std::uint32_t> in;
  for (Var p : parts) {
    check_same_tape(p);
    const auto& np = node(p);
    if (np.shape.size() != 2 || np.shape[1] != c) {
      throw DimensionError("concat_rows: column counts differ");
    }
    rows += np.shape[0];
    in.push_back(p.id);
  }
  auto out = make(Op::kConcatRows, {rows, c}, std::move(in));
  auto& n = node(out);
  std::size_t off = 0;
  for (Var p : parts) {
    auto vp = vals(node(p));
    std::copy(vp.begin(), vp.end(), n.own.begin() + static_cast<std::ptrdiff_t>(off));
    off += vp.size();
  }
  return out;
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto& first = node(parts[0]);
  if (first.shape.size() != 2) throw DimensionError("concat_cols: inputs must be rank 2");
  const std::size_t m = first.shape[0];
  std::size_t cols = 0;
  std::vector<std::uint32_t> in;
  for (Var p : parts) {
    check_same_tape(p);
    const auto& np = node(p);
    if (np.shape.size() != 2 || np.shape[0] != m) {
      throw DimensionError("concat_cols: row counts differ");
    }
    cols += np.shape[1];
    in.push_back(p.id);
  }
  auto out = make(Op::kConcatCols, {m, cols}, std::move(in));
  auto& n = node(out);
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& np = node(p);
    auto vp = vals(np);
    const std::size_t pc = np.shape[1];
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(vp.data() + i * pc, pc, n.own.data() + i * cols + off);
    }
    off += pc;
  }
  return out;
}

Var Tape::slice_cols(Var a, std::size_t start, std::size_t count) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2) throw DimensionError("slice_cols: input must be rank 2");
  const std::size_t m = na.shape[0], c = na.shape[1];
  if (start + count > c) throw DimensionError("slice_cols: window out of range");
  auto va = vals(na);
  auto out = make(Op::kSliceCols, {m, count}, {a.id});
  auto& n = node(out);
  n.i0 = start;
  n.i1 = count;
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(va.data() + i * c + start, count, n.own.data() + i * count);
  }
  return out;
}

Var Tape::mean_rows(Var a) {
  check_same_tape(a);
  const auto& na = node(a);
  if (na.shape.size() != 2) throw DimensionError("mean_rows: input must be rank 2");
  const std::size_t m = na.shape[0], c = na.shape[1];
  auto va = vals(na);
  auto out = make(Op::kMeanRows, {1, c}, {a.id});
  auto& n = node(out);
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += va[i * c + j];
    n.own[j] = s * inv;
  }
  return out;
}

Var Tape::sum_all(Var a) {
  check_same_tape(a);
  auto va = vals(node(a));
  auto out = make(Op::kSumAll, {1}, {a.id});
  node(out).own[0] = std::accumulate(va.begin(), va.end(), 0.0);
  return out;
}

Var Tape::mean_all(Var a) {
  const std::size_t n = values(a).size();
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

std::vector<double>& Tape::grad_buf(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    add_bytes(vals(n).size() * sizeof(double));
    n.grad.assign(vals(n).size(), 0.0);
  }
  return n.grad;
}

namespace {

// Accumulates g into the gradient of a (possibly scalar-broadcast) operand.
void reduce_into(std::vector<double>& dst, std::span<const double> g,
                 const std::function<double(std::size_t)>& term) {
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += term(i);
  } else {
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += term(i);
    dst[0] += s;
  }
}

}  // namespace

void Tape::backprop_node(std::uint32_t id) {
  Node& n = nodes_[id];
  std::span<const double> g(n.grad);
  auto in_vals = [&](int k) { return vals(nodes_[n.inputs[static_cast<std::size_t>(k)]]); };
  auto in_grad = [&](int k) -> std::vector<double>* {
    const std::uint32_t iid = n.inputs[static_cast<std::size_t>(k)];
    if (!nodes_[iid].requires_grad) return nullptr;
    auto& buf = grad_buf(iid);
    nodes_[iid].touched = true;
    return &buf;
  };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      break;
    case Op::kAdd: {
      if (auto* da = in_grad(0)) reduce_into(*da, g, [&](std::size_t i) { return g[i]; });
      if (auto* db = in_grad(1)) reduce_into(*db, g, [&](std::size_t i) { return g[i]; });
      break;
    }
    case Op::kSub: {
      if (auto* da = in_grad(0)) reduce_into(*da, g, [&](std::size_t i) { return g[i]; });
      if (auto* db = in_grad(1)) reduce_into(*db, g, [&](std::size_t i) { return -g[i]; });
      break;
    }
    case Op::kMul: {
      auto va = in_vals(0);
      auto vb = in_vals(1);
      if (auto* da = in_grad(0)) {
        reduce_into(*da, g, [&](std::size_t i) { return g[i] * vb[vb.size() == 1 ? 0 : i]; });
      }
      if (auto* db = in_grad(1)) {
        reduce_into(*db, g, [&](std::size_t i) { return g[i] * va[va.size() == 1 ? 0 : i]; });
      }
      break;
    }
    case Op::kNeg: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] -= g[i];
      }
      break;
    }
    case Op::kScale: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += n.a * g[i];
      }
      break;
    }
    case Op::kAddConst: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
      }
      break;
    }
    case Op::kRelu: {
      auto va = in_vals(0);
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (va[i] > 0.0) (*da)[i] += g[i];
        }
      }
      break;
    }
    case Op::kGelu: {
      auto va = in_vals(0);
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * gelu_bwd(va[i]);
      }
      break;
    }
    case Op::kSigmoid: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double p = n.own[i];
          (*da)[i] += g[i] * p * (1.0 - p);
        }
      }
      break;
    }
    case Op::kTanh: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*da)[i] += g[i] * (1.0 - n.own[i] * n.own[i]);
        }
      }
      break;
    }
    case Op::kLog: {
      auto va = in_vals(0);
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] / va[i];
      }
      break;
    }
    case Op::kExp: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * n.own[i];
      }
      break;
    }
    case Op::kClamp: {
      auto va = in_vals(0);
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (va[i] > n.a && va[i] < n.b) (*da)[i] += g[i];
        }
      }
      break;
    }
    case Op::kMatmul: {
      const auto& sa = nodes_[n.inputs[0]].shape;
      const auto& sb = nodes_[n.inputs[1]].shape;
      const auto m = static_cast<Eigen::Index>(sa[0]);
      const auto k = static_cast<Eigen::Index>(sa[1]);
      const auto c = static_cast<Eigen::Index>(sb[1]);
      CMap G(g.data(), m, c);
      if (auto* da = in_grad(0)) {
        CMap B(in_vals(1).data(), k, c);
        MMap dA(da->data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (auto* db = in_grad(1)) {
        CMap A(in_vals(0).data(), m, k);
        MMap dB(db->data(), k, c);
        dB.noalias() += A.transpose() * G;
      }
      break;
    }
    case Op::kTranspose: {
      const auto& sa = nodes_[n.inputs[0]].shape;
      const std::size_t m = sa[0], c = sa[1];
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += g[j * m + i];
        }
      }
      break;
    }
    // The causal variant shares this rule: masked positions carry p = 0,
    // which zeroes their gradient term automatically.
    case Op::kSoftmaxRows:
    case Op::kSoftmaxRowsCausal: {
      const std::size_t m = n.shape[0], c = n.shape[1];
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* p = n.own.data() + i * c;
          const double* gr = g.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += p[j] * gr[j];
          for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += p[j] * (gr[j] - dot);
        }
      }
      break;
    }
    case Op::kCausalAttend: {
      const auto& sp = nodes_[n.inputs[0]].shape;
      const std::size_t rows = sp[0], d = n.shape[1];
      auto vp = in_vals(0);
      auto vv = in_vals(1);
      auto* dp = in_grad(0);
      auto* dv = in_grad(1);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* gi = g.data() + i * d;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = vv.data() + j * d;
          if (dp) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += gi[c] * vj[c];
            (*dp)[i * rows + j] += dot;
          }
          if (dv) {
            const double p = vp[i * rows + j];
            double* dvj = dv->data() + j * d;
            for (std::size_t c = 0; c < d; ++c) dvj[c] += p * gi[c];
          }
        }
      }
      break;
    }
    case Op::kLogSoftmaxRows: {
      const std::size_t m = n.shape[0], c = n.shape[1];
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* lp = n.own.data() + i * c;
          const double* gr = g.data() + i * c;
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += gr[j];
          for (std::size_t j = 0; j < c; ++j) {
            (*da)[i * c + j] += gr[j] - std::exp(lp[j]) * gsum;
          }
        }
      }
      break;
    }
    case Op::kLayerNormRows: {
      const std::size_t m = n.shape[0], c = n.shape[1];
      auto vx = in_vals(0);
      auto vg = in_vals(1);
      auto* dx = in_grad(0);
      auto* dg = in_grad(1);
      auto* db = in_grad(2);
      const double cn = static_cast<double>(c);
      for (std::size_t i = 0; i < m; ++i) {
        const double mean = n.aux[2 * i];
        const double inv = n.aux[2 * i + 1];
        const double* row = vx.data() + i * c;
        const double* gr = g.data() + i * c;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double xh = (row[j] - mean) * inv;
          const double dxh = gr[j] * vg[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
          if (dg) (*dg)[j] += gr[j] * xh;
          if (db) (*db)[j] += gr[j];
        }
        if (dx) {
          for (std::size_t j = 0; j < c; ++j) {
            const double xh = (row[j] - mean) * inv;
            const double dxh = gr[j] * vg[j];
            (*dx)[i * c + j] += inv * (dxh - sum_dxh / cn - xh * sum_dxh_xh / cn);
          }
        }
      }
      break;
    }
    case Op::kEmbeddingLookup: {
      const std::size_t d = n.shape[1];
      if (auto* dt = in_grad(0)) {
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          double* dst = dt->data() + static_cast<std::size_t>(n.ids[i]) * d;
          const double* src = g.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
      break;
    }
    case Op::kPickPerRow: {
      const auto& sx = nodes_[n.inputs[0]].shape;
      const std::size_t c = sx[1];
      if (auto* dx = in_grad(0)) {
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          (*dx)[i * c + static_cast<std::size_t>(n.ids[i])] += g[i];
        }
      }
      break;
    }
    case Op::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t sz = vals(nodes_[n.inputs[k]]).size();
        if (nodes_[n.inputs[k]].requires_grad) {
          auto& buf = grad_buf(n.inputs[k]);
          nodes_[n.inputs[k]].touched = true;
          for (std::size_t i = 0; i < sz; ++i) buf[i] += g[off + i];
        }
        off += sz;
      }
      break;
    }
    case Op::kConcatCols: {
      const std::size_t m = n.shape[0], cols = n.shape[1];
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t pc = nodes_[n.inputs[k]].shape[1];
        if (nodes_[n.inputs[k]].requires_grad) {
          auto& buf = grad_buf(n.inputs[k]);
          nodes_[n.inputs[k]].touched = true;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < pc; ++j) buf[i * pc + j] += g[i * cols + off + j];
          }
        }
        off += pc;
      }
      break;
    }
    case Op::kSliceCols: {
      const auto& sa = nodes_[n.inputs[0]].shape;
      const std::size_t m = sa[0], c = sa[1];
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n.i1; ++j) {
            (*da)[i * c + n.i0 + j] += g[i * n.i1 + j];
          }
        }
      }
      break;
    }
    case Op::kMeanRows: {
      const auto& sa = nodes_[n.inputs[0]].shape;
      const std::size_t m = sa[0], c = sa[1];
      const double inv = 1.0 / static_cast<double>(m);
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += g[j] * inv;
        }
      }
      break;
    }
    case Op::kSumAll: {
      if (auto* da = in_grad(0)) {
        for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[0];
      }
      break;
    }
  }
}

void Tape::backward(Var loss) {
  check_same_tape(loss);
  if (nodes_.empty()) throw ContractError("backward: empty tape");
  if (backward_done_) throw ContractError("backward: tape already swept; rebuild the tape");
  Node& ln = node(loss);
  if (vals(ln).size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(ln.shape));
  }
  backward_done_ = true;
  grad_buf(loss.id)[0] += 1.0;
  ln.touched = true;
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.touched || !n.requires_grad) continue;
    backprop_node(id);
  }
  // Leaves off the path to the loss still get a zero-filled grad.
  for (Node& n : nodes_) {
    if (n.op == Op::kLeaf && n.bound != nullptr && n.bound->requires_grad) {
      n.bound->ensure_grad();
      if (n.touched) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Spec-surface helpers
// ---------------------------------------------------------------------------

Var elementwise(Tape& t, ElemOp tag, std::span<const Var> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ContractError("elementwise: expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
    }
  };
  switch (tag) {
    case ElemOp::kAdd:
      need(2);
      return t.add(inputs[0], inputs[1]);
    case ElemOp::kMul:
      need(2);
      return t.mul(inputs[0], inputs[1]);
    case ElemOp::kRelu:
      need(1);
      return t.relu(inputs[0]);
    case ElemOp::kGelu:
      need(1);
      return t.gelu(inputs[0]);
    case ElemOp::kSigmoid:
      need(1);
      return t.sigmoid(inputs[0]);
    case ElemOp::kTanh:
      need(1);
      return t.tanh_(inputs[0]);
  }
  throw ContractError("elementwise: unknown tag");
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw ContractError("finite_diff_check: eps must lie in [1e-6, 1e-3]");
  }
  Tensor probe = x;
  probe.requires_grad = true;
  probe.grad.clear();
  Tape t;
  Var loss = f(t, t.leaf(probe));
  if (t.values(loss).size() != 1) {
    throw ContractError("finite_diff_check: f must produce a scalar");
  }
  t.backward(loss);
  probe.ensure_grad();

  auto eval_at = [&](std::size_t i, double delta) {
    Tensor shifted = x;
    shifted.requires_grad = false;
    shifted.values[i] += delta;
    Tape local;
    return local.scalar_value(f(local, local.leaf(shifted)));
  };

  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = (eval_at(i, eps) - eval_at(i, -eps)) / (2.0 * eps);
    const double rel = std::abs(probe.grad[i] - fd) / (std::abs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

double finite_diff_check_param(Tensor& param, const std::function<double(bool)>& run,
                               double eps, std::size_t max_coords, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw ContractError("finite_diff_check_param: eps must lie in [1e-6, 1e-3]");
  }
  const bool was_trainable = param.requires_grad;
  param.requires_grad = true;
  param.zero_grad();
  run(true);
  if (param.grad.size() != param.size()) {
    throw ContractError("finite_diff_check_param: backward did not populate the grad");
  }
  const std::vector<double> autodiff = param.grad;

  std::vector<std::size_t> coords;
  if (param.size() <= max_coords) {
    coords.resize(param.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  } else {
    Rng rng(derive_seed(seed, 0x6664636b));
    auto idx = rng.sample_indices(static_cast<std::uint32_t>(param.size()),
                                  static_cast<std::uint32_t>(max_coords));
    coords.assign(idx.begin(), idx.end());
  }

  param.requires_grad = false;
  double max_rel = 0.0;
  for (std::size_t c : coords) {
    const double keep = param.values[c];
    param.values[c] = keep + eps;
    const double fp = run(false);
    param.values[c] = keep - eps;
    const double fm = run(false);
    param.values[c] = keep;
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(autodiff[c] - fd) / (std::abs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  param.requires_grad = was_trainable;
  return max_rel;
}

}  // namespace tagcot
