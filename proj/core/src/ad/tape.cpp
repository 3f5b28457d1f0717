#include "vfm/ad/tape.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>

#include "vfm/ad/param_store.hpp"
#include "vfm/error.hpp"

namespace vfm::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

MapC view(const Tensor& t) {
  return MapC(t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}
Map view(Tensor& t) {
  return Map(t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw StructuralError(fmt::format("tensor {}x{} given {} values", r, c, data.size()));
  }
}

Tensor Tensor::row_vector(std::span<const double> v) {
  return Tensor(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::column_vector(std::span<const double> v) {
  return Tensor(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

bool Tensor::all_finite() const {
  // Exponent all ones means inf or nan.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double x : data) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(x) & kExp) == kExp);
  return bad == 0;
}

Index make_index(std::vector<std::size_t> idx) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(idx));
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::param: return "param";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::add_row: return "add_row";
    case Op::add_col: return "add_col";
    case Op::mul_col: return "mul_col";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::silu: return "silu";
    case Op::tanh: return "tanh";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::square: return "square";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::sum: return "sum";
    case Op::row_sum: return "row_sum";
    case Op::gather_rows: return "gather_rows";
    case Op::scatter_add_rows: return "scatter_add_rows";
    case Op::center_groups: return "center_groups";
    case Op::pairwise_sq_dist: return "pairwise_sq_dist";
    case Op::row_norm: return "row_norm";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::reshape: return "reshape";
  }
  return "unknown";
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError(fmt::format("variable {} is not recorded on this tape", v.id));
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(Node n) {
  if (!n.value.all_finite()) {
    throw NumericError(
        fmt::format("non-finite value at node {} ({})", nodes_.size(), op_name(n.op)));
  }
  if (n.op != Op::leaf && n.op != Op::param) {
    n.needs_grad = std::any_of(n.in.begin(), n.in.end(),
                               [this](int i) { return nodes_[static_cast<std::size_t>(i)].needs_grad; });
  }
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return Var{static_cast<int>(nodes_.size() - 1)};
}

void Tape::check_same_shape(Var a, Var b, std::string_view what) const {
  const auto& ta = node(a).value;
  const auto& tb = node(b).value;
  if (!ta.same_shape(tb)) {
    throw StructuralError(fmt::format("{}: shape {}x{} vs {}x{}", what, ta.rows, ta.cols, tb.rows, tb.cols));
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::param(const ParamStore& store, std::size_t index) {
  if (index >= store.size()) throw UsageError(fmt::format("param index {} out of range", index));
  Node n;
  n.op = Op::param;
  n.value = store[index].value;
  n.param = static_cast<int>(index);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Node n;
  n.op = Op::add;
  n.in = {a.id, b.id};
  n.value = node(a).value;
  view(n.value) += view(node(b).value);
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Node n;
  n.op = Op::sub;
  n.in = {a.id, b.id};
  n.value = node(a).value;
  view(n.value) -= view(node(b).value);
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Node n;
  n.op = Op::mul;
  n.in = {a.id, b.id};
  n.value = node(a).value;
  view(n.value).array() *= view(node(b).value).array();
  return push(std::move(n));
}

Var Tape::add_row(Var a, Var row) {
  const auto& ta = node(a).value;
  const auto& tr = node(row).value;
  if (tr.rows != 1 || tr.cols != ta.cols) {
    throw StructuralError(fmt::format("add_row: {}x{} + {}x{}", ta.rows, ta.cols, tr.rows, tr.cols));
  }
  Node n;
  n.op = Op::add_row;
  n.in = {a.id, row.id};
  n.value = ta;
  view(n.value).rowwise() += view(tr).row(0);
  return push(std::move(n));
}

Var Tape::add_col(Var a, Var col) {
  const auto& ta = node(a).value;
  const auto& tc = node(col).value;
  if (tc.cols != 1 || tc.rows != ta.rows) {
    throw StructuralError(fmt::format("add_col: {}x{} + {}x{}", ta.rows, ta.cols, tc.rows, tc.cols));
  }
  Node n;
  n.op = Op::add_col;
  n.in = {a.id, col.id};
  n.value = ta;
  view(n.value).colwise() += view(tc).col(0);
  return push(std::move(n));
}

Var Tape::mul_col(Var a, Var col) {
  const auto& ta = node(a).value;
  const auto& tc = node(col).value;
  if (tc.cols != 1 || tc.rows != ta.rows) {
    throw StructuralError(fmt::format("mul_col: {}x{} * {}x{}", ta.rows, ta.cols, tc.rows, tc.cols));
  }
  Node n;
  n.op = Op::mul_col;
  n.in = {a.id, col.id};
  n.value = ta;
  for (std::size_t r = 0; r < ta.rows; ++r) {
    const double s = tc.data[r];
    for (double& x : n.value.row(r)) x *= s;
  }
  return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
  Node n;
  n.op = Op::scale;
  n.in = {a.id};
  n.scalar = s;
  n.value = node(a).value;
  view(n.value) *= s;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const auto& ta = node(a).value;
  const auto& tb = node(b).value;
  if (ta.cols != tb.rows) {
    throw StructuralError(fmt::format("matmul: {}x{} * {}x{}", ta.rows, ta.cols, tb.rows, tb.cols));
  }
  Node n;
  n.op = Op::matmul;
  n.in = {a.id, b.id};
  n.value = Tensor(ta.rows, tb.cols);
  view(n.value).noalias() = view(ta) * view(tb);
  return push(std::move(n));
}

Var Tape::silu(Var a) {
  Node n;
  n.op = Op::silu;
  n.in = {a.id};
  n.value = node(a).value;
  n.saved = Tensor(n.value.rows, n.value.cols);
  for (std::size_t k = 0; k < n.value.size(); ++k) {
    const double s = sigmoid(n.value.data[k]);
    n.saved.data[k] = s;
    n.value.data[k] *= s;
  }
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  Node n;
  n.op = Op::tanh;
  n.in = {a.id};
  n.value = node(a).value;
  for (double& x : n.value.data) x = std::tanh(x);
  return push(std::move(n));
}

Var Tape::log(Var a) {
  Node n;
  n.op = Op::log;
  n.in = {a.id};
  n.value = node(a).value;
  for (double& x : n.value.data) x = std::log(x);
  return push(std::move(n));
}

Var Tape::exp(Var a) {
  Node n;
  n.op = Op::exp;
  n.in = {a.id};
  n.value = node(a).value;
  for (double& x : n.value.data) x = std::exp(x);
  return push(std::move(n));
}

Var Tape::square(Var a) {
  Node n;
  n.op = Op::square;
  n.in = {a.id};
  n.value = node(a).value;
  for (double& x : n.value.data) x = x * x;
  return push(std::move(n));
}

Var Tape::softmax(Var a) {
  Node n;
  n.op = Op::softmax;
  n.in = {a.id};
  n.value = node(a).value;
  for (std::size_t r = 0; r < n.value.rows; ++r) {
    auto row = n.value.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& x : row) z += (x = std::exp(x - m));
    for (double& x : row) x /= z;
  }
  return push(std::move(n));
}

Var Tape::log_softmax(Var a) {
  Node n;
  n.op = Op::log_softmax;
  n.in = {a.id};
  n.value = node(a).value;
  for (std::size_t r = 0; r < n.value.rows; ++r) {
    auto row = n.value.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - m);
    const double lse = m + std::log(z);
    for (double& x : row) x -= lse;
  }
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  Node n;
  n.op = Op::sum;
  n.in = {a.id};
  n.value = Tensor(1, 1, view(node(a).value).sum());
  return push(std::move(n));
}

Var Tape::row_sum(Var a) {
  const auto& ta = node(a).value;
  Node n;
  n.op = Op::row_sum;
  n.in = {a.id};
  n.value = Tensor(ta.rows, 1);
  for (std::size_t r = 0; r < ta.rows; ++r) {
    double s = 0.0;
    for (double x : ta.row(r)) s += x;
    n.value.data[r] = s;
  }
  return push(std::move(n));
}

Var Tape::row_norm(Var a) {
  const auto& ta = node(a).value;
  Node n;
  n.op = Op::row_norm;
  n.in = {a.id};
  n.value = Tensor(ta.rows, 1);
  for (std::size_t r = 0; r < ta.rows; ++r) {
    double s = 0.0;
    for (double x : ta.row(r)) s += x * x;
    n.value.data[r] = std::sqrt(s);
  }
  return push(std::move(n));
}

Var Tape::gather_rows(Var a, Index idx) {
  const auto& ta = node(a).value;
  Node n;
  n.op = Op::gather_rows;
  n.in = {a.id};
  n.value = Tensor(idx->size(), ta.cols);
  for (std::size_t e = 0; e < idx->size(); ++e) {
    const std::size_t src = (*idx)[e];
    if (src >= ta.rows) throw StructuralError(fmt::format("gather_rows: index {} >= {}", src, ta.rows));
    std::copy_n(ta.data.data() + src * ta.cols, ta.cols, n.value.data.data() + e * ta.cols);
  }
  n.idx_a = std::move(idx);
  return push(std::move(n));
}

Var Tape::scatter_add_rows(Var a, Index idx, std::size_t out_rows) {
  const auto& ta = node(a).value;
  if (idx->size() != ta.rows) {
    throw StructuralError(fmt::format("scatter_add_rows: {} indices for {} rows", idx->size(), ta.rows));
  }
  Node n;
  n.op = Op::scatter_add_rows;
  n.in = {a.id};
  n.value = Tensor(out_rows, ta.cols);
  for (std::size_t e = 0; e < idx->size(); ++e) {
    const std::size_t dst = (*idx)[e];
    if (dst >= out_rows) throw StructuralError(fmt::format("scatter_add_rows: index {} >= {}", dst, out_rows));
    const double* src = ta.data.data() + e * ta.cols;
    double* out = n.value.data.data() + dst * ta.cols;
    for (std::size_t c = 0; c < ta.cols; ++c) out[c] += src[c];
  }
  n.idx_a = std::move(idx);
  return push(std::move(n));
}

namespace {

void center_in_place(Tensor& t, std::size_t group) {
  const std::size_t n_groups = t.rows / group;
  std::vector<double> mean(t.cols);
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
      for (std::size_t c = 0; c < t.cols; ++c) mean[c] += t(r, c);
    }
    for (double& m : mean) m /= static_cast<double>(group);
    for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
      for (std::size_t c = 0; c < t.cols; ++c) t(r, c) -= mean[c];
    }
  }
}

}  // namespace

Var Tape::center_groups(Var a, std::size_t group_size) {
  const auto& ta = node(a).value;
  if (group_size == 0 || ta.rows % group_size != 0) {
    throw StructuralError(fmt::format("center_groups: {} rows not divisible by {}", ta.rows, group_size));
  }
  Node n;
  n.op = Op::center_groups;
  n.in = {a.id};
  n.aux = group_size;
  n.value = ta;
  center_in_place(n.value, group_size);
  return push(std::move(n));
}

Var Tape::pairwise_sq_dist(Var a, Index i, Index j) {
  const auto& ta = node(a).value;
  if (i->size() != j->size()) throw StructuralError("pairwise_sq_dist: index lists differ in length");
  Node n;
  n.op = Op::pairwise_sq_dist;
  n.in = {a.id};
  n.value = Tensor(i->size(), 1);
  for (std::size_t e = 0; e < i->size(); ++e) {
    const std::size_t p = (*i)[e];
    const std::size_t q = (*j)[e];
    if (p >= ta.rows || q >= ta.rows) throw StructuralError("pairwise_sq_dist: index out of range");
    double s = 0.0;
    for (std::size_t c = 0; c < ta.cols; ++c) {
      const double d = ta(p, c) - ta(q, c);
      s += d * d;
    }
    n.value.data[e] = s;
  }
  n.idx_a = std::move(i);
  n.idx_b = std::move(j);
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t count) {
  const auto& ta = node(a).value;
  if (begin + count > ta.cols) {
    throw StructuralError(fmt::format("slice_cols: [{}, {}) of {} columns", begin, begin + count, ta.cols));
  }
  Node n;
  n.op = Op::slice_cols;
  n.in = {a.id};
  n.aux = begin;
  n.value = Tensor(ta.rows, count);
  for (std::size_t r = 0; r < ta.rows; ++r) {
    std::copy_n(ta.data.data() + r * ta.cols + begin, count, n.value.data.data() + r * count);
  }
  return push(std::move(n));
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw StructuralError("concat_cols: no inputs");
  const std::size_t rows = node(parts.front()).value.rows;
  std::size_t cols = 0;
  for (Var p : parts) {
    if (node(p).value.rows != rows) throw StructuralError("concat_cols: row counts differ");
    cols += node(p).value.cols;
  }
  Node n;
  n.op = Op::concat_cols;
  n.value = Tensor(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& tp = node(p).value;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(tp.data.data() + r * tp.cols, tp.cols, n.value.data.data() + r * cols + offset);
    }
    offset += tp.cols;
    n.in.push_back(p.id);
  }
  return push(std::move(n));
}

Var Tape::reshape(Var a, std::size_t rows, std::size_t cols) {
  const auto& ta = node(a).value;
  if (rows * cols != ta.size()) {
    throw StructuralError(fmt::format("reshape: {}x{} -> {}x{}", ta.rows, ta.cols, rows, cols));
  }
  Node n;
  n.op = Op::reshape;
  n.in = {a.id};
  n.value = Tensor(rows, cols, ta.data);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  if (!backward_done_) throw UsageError("grad() requested before backward()");
  const Node& n = node(v);
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
  return n.grad;
}

void Tape::backward(Var out) {
  const auto& t = node(out).value;
  if (t.size() != 1) {
    throw UsageError(fmt::format("backward(): output is {}x{}, pass an explicit adjoint", t.rows, t.cols));
  }
  backward(out, Tensor::scalar(1.0));
}

void Tape::backward(Var out, const Tensor& adjoint) {
  if (nodes_.empty()) throw UsageError("backward() called on an empty tape; run the forward pass first");
  const auto& t = node(out).value;
  if (!t.same_shape(adjoint)) {
    throw StructuralError(fmt::format("backward(): adjoint {}x{} for output {}x{}", adjoint.rows,
                                      adjoint.cols, t.rows, t.cols));
  }
  const auto last = static_cast<std::size_t>(out.id);
  for (auto& n : nodes_) {
    if (n.needs_grad) {
      n.grad = Tensor(n.value.rows, n.value.cols);
    } else {
      n.grad = Tensor();
    }
  }
  nodes_[last].grad = adjoint;
  for (std::size_t i = last + 1; i-- > 0;) {
    if (nodes_[i].needs_grad) propagate(i);
  }
  backward_done_ = true;
}

void Tape::propagate(std::size_t i) {
  Node& n = nodes_[i];
  const Tensor& g = n.grad;
  auto input = [&](std::size_t k) -> Node& { return nodes_[static_cast<std::size_t>(n.in[k])]; };

  switch (n.op) {
    case Op::leaf:
    case Op::param:
      break;
    case Op::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (input(k).needs_grad) view(input(k).grad) += view(g);
      }
      break;
    }
    case Op::sub: {
      if (input(0).needs_grad) view(input(0).grad) += view(g);
      if (input(1).needs_grad) view(input(1).grad) -= view(g);
      break;
    }
    case Op::mul: {
      Node& a = input(0);
      Node& b = input(1);
      if (a.needs_grad) view(a.grad).array() += view(g).array() * view(b.value).array();
      if (b.needs_grad) view(b.grad).array() += view(g).array() * view(a.value).array();
      break;
    }
    case Op::add_row: {
      if (input(0).needs_grad) view(input(0).grad) += view(g);
      if (input(1).needs_grad) view(input(1).grad) += view(g).colwise().sum();
      break;
    }
    case Op::add_col: {
      if (input(0).needs_grad) view(input(0).grad) += view(g);
      if (input(1).needs_grad) view(input(1).grad) += view(g).rowwise().sum();
      break;
    }
    case Op::mul_col: {
      Node& a = input(0);
      Node& c = input(1);
      for (std::size_t r = 0; r < g.rows; ++r) {
        const double s = c.value.data[r];
        if (a.needs_grad) {
          auto ga = a.grad.row(r);
          auto gr = g.row(r);
          for (std::size_t k = 0; k < g.cols; ++k) ga[k] += gr[k] * s;
        }
        if (c.needs_grad) {
          double acc = 0.0;
          auto av = a.value.row(r);
          auto gr = g.row(r);
          for (std::size_t k = 0; k < g.cols; ++k) acc += gr[k] * av[k];
          c.grad.data[r] += acc;
        }
      }
      break;
    }
    case Op::scale: {
      if (input(0).needs_grad) view(input(0).grad) += n.scalar * view(g);
      break;
    }
    case Op::matmul: {
      Node& a = input(0);
      Node& b = input(1);
      if (a.needs_grad) view(a.grad).noalias() += view(g) * view(b.value).transpose();
      if (b.needs_grad) view(b.grad).noalias() += view(a.value).transpose() * view(g);
      break;
    }
    case Op::silu: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double x = a.value.data[k];
        const double s = n.saved.data[k];
        a.grad.data[k] += g.data[k] * s * (1.0 + x * (1.0 - s));
      }
      break;
    }
    case Op::tanh: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double y = n.value.data[k];
        a.grad.data[k] += g.data[k] * (1.0 - y * y);
      }
      break;
    }
    case Op::log: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) a.grad.data[k] += g.data[k] / a.value.data[k];
      break;
    }
    case Op::exp: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) a.grad.data[k] += g.data[k] * n.value.data[k];
      break;
    }
    case Op::square: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) a.grad.data[k] += 2.0 * g.data[k] * a.value.data[k];
      break;
    }
    case Op::softmax: {
      Node& a = input(0);
      for (std::size_t r = 0; r < g.rows; ++r) {
        auto y = n.value.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t k = 0; k < g.cols; ++k) dot += gr[k] * y[k];
        auto ga = a.grad.row(r);
        for (std::size_t k = 0; k < g.cols; ++k) ga[k] += y[k] * (gr[k] - dot);
      }
      break;
    }
    case Op::log_softmax: {
      Node& a = input(0);
      for (std::size_t r = 0; r < g.rows; ++r) {
        auto y = n.value.row(r);
        auto gr = g.row(r);
        double total = 0.0;
        for (double v : gr) total += v;
        auto ga = a.grad.row(r);
        for (std::size_t k = 0; k < g.cols; ++k) ga[k] += gr[k] - std::exp(y[k]) * total;
      }
      break;
    }
    case Op::sum: {
      view(input(0).grad).array() += g.data[0];
      break;
    }
    case Op::row_sum: {
      Node& a = input(0);
      for (std::size_t r = 0; r < a.value.rows; ++r) {
        for (double& x : a.grad.row(r)) x += g.data[r];
      }
      break;
    }
    case Op::row_norm: {
      Node& a = input(0);
      for (std::size_t r = 0; r < a.value.rows; ++r) {
        const double s = g.data[r] / n.value.data[r];
        auto av = a.value.row(r);
        auto ga = a.grad.row(r);
        for (std::size_t k = 0; k < a.value.cols; ++k) ga[k] += s * av[k];
      }
      break;
    }
    case Op::gather_rows: {
      Node& a = input(0);
      const auto& idx = *n.idx_a;
      for (std::size_t e = 0; e < idx.size(); ++e) {
        const double* src = g.data.data() + e * g.cols;
        double* dst = a.grad.data.data() + idx[e] * g.cols;
        for (std::size_t c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::scatter_add_rows: {
      Node& a = input(0);
      const auto& idx = *n.idx_a;
      for (std::size_t e = 0; e < idx.size(); ++e) {
        const double* src = g.data.data() + idx[e] * g.cols;
        double* dst = a.grad.data.data() + e * g.cols;
        for (std::size_t c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::center_groups: {
      Tensor centered = g;
      center_in_place(centered, n.aux);
      view(input(0).grad) += view(centered);
      break;
    }
    case Op::pairwise_sq_dist: {
      Node& a = input(0);
      const auto& ii = *n.idx_a;
      const auto& jj = *n.idx_b;
      for (std::size_t e = 0; e < ii.size(); ++e) {
        const double s = 2.0 * g.data[e];
        for (std::size_t c = 0; c < a.value.cols; ++c) {
          const double d = a.value(ii[e], c) - a.value(jj[e], c);
          a.grad(ii[e], c) += s * d;
          a.grad(jj[e], c) -= s * d;
        }
      }
      break;
    }
    case Op::slice_cols: {
      Node& a = input(0);
      for (std::size_t r = 0; r < g.rows; ++r) {
        double* dst = a.grad.data.data() + r * a.value.cols + n.aux;
        const double* src = g.data.data() + r * g.cols;
        for (std::size_t c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        Node& p = input(k);
        if (p.needs_grad) {
          for (std::size_t r = 0; r < g.rows; ++r) {
            double* dst = p.grad.data.data() + r * p.value.cols;
            const double* src = g.data.data() + r * g.cols + offset;
            for (std::size_t c = 0; c < p.value.cols; ++c) dst[c] += src[c];
          }
        }
        offset += p.value.cols;
      }
      break;
    }
    case Op::reshape: {
      Node& a = input(0);
      for (std::size_t k = 0; k < g.size(); ++k) a.grad.data[k] += g.data[k];
      break;
    }
  }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
  if (!backward_done_) throw UsageError("accumulate_param_grads() before backward()");
  for (const auto& n : nodes_) {
    if (n.op != Op::param) continue;
    auto& p = store[static_cast<std::size_t>(n.param)];
    if (p.grad.empty()) p.grad = Tensor(p.value.rows, p.value.cols);
    for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad.data[k] += n.grad.data[k];
  }
}

}  // namespace vfm::ad
