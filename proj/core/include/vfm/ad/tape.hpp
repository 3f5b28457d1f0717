#pragma once

// Define-by-run reverse-mode tape over dense matrices.
//
// Every op evaluates eagerly and appends a node; nodes are therefore in
// topological order by construction. backward() sweeps the nodes in reverse
// and leaves d(output . adjoint)/d(node) in each node's adjoint buffer.

#include <cstdint>
#include <memory>
#include <string_view>
#include <vector>

#include "vfm/ad/tensor.hpp"

namespace vfm::ad {

class ParamStore;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Shared, immutable row index list (gather/scatter/pairwise ops).
using Index = std::shared_ptr<const std::vector<std::size_t>>;
Index make_index(std::vector<std::size_t> idx);

enum class Op : std::uint8_t {
  leaf,
  param,
  add,
  sub,
  mul,
  add_row,
  add_col,
  mul_col,
  scale,
  matmul,
  silu,
  tanh,
  log,
  exp,
  square,
  softmax,
  log_softmax,
  sum,
  row_sum,
  gather_rows,
  scatter_add_rows,
  center_groups,
  pairwise_sq_dist,
  row_norm,
  slice_cols,
  concat_cols,
  reshape,
};

std::string_view op_name(Op op);

class Tape {
 public:
  Tape() = default;

  // Leaves.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var param(const ParamStore& store, std::size_t index);

  // Elementwise binary (equal shapes).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);

  // Broadcasts: b is 1 x cols (row) or rows x 1 (column).
  Var add_row(Var a, Var row);
  Var add_col(Var a, Var col);
  Var mul_col(Var a, Var col);
  Var scale(Var a, double s);

  Var matmul(Var a, Var b);

  // Pointwise.
  Var silu(Var a);
  Var tanh(Var a);
  Var log(Var a);
  Var exp(Var a);
  Var square(Var a);

  // Row-wise over all columns.
  Var softmax(Var a);
  Var log_softmax(Var a);

  // Reductions.
  Var sum(Var a);      // -> 1x1
  Var row_sum(Var a);  // -> rows x 1
  Var row_norm(Var a);  // -> rows x 1, Euclidean

  // Indexing.
  Var gather_rows(Var a, Index idx);
  Var scatter_add_rows(Var a, Index idx, std::size_t out_rows);
  /// Subtracts the column mean within consecutive groups of `group_size` rows.
  Var center_groups(Var a, std::size_t group_size);
  /// out[e] = || a[i[e]] - a[j[e]] ||^2, shape E x 1.
  Var pairwise_sq_dist(Var a, Index i, Index j);

  // Shape.
  Var slice_cols(Var a, std::size_t begin, std::size_t count);
  Var concat_cols(const std::vector<Var>& parts);
  Var reshape(Var a, std::size_t rows, std::size_t cols);

  const Tensor& value(Var v) const;
  /// Adjoint of a node after backward(); zero-filled for nodes that do not
  /// require gradients.
  const Tensor& grad(Var v) const;

  /// Scalar output, unit adjoint.
  void backward(Var out);
  /// General vector-Jacobian product with the given output adjoint.
  void backward(Var out, const Tensor& adjoint);

  /// Adds the adjoints of param leaves into the store's gradient buffers.
  void accumulate_param_grads(ParamStore& store) const;

  std::size_t size() const { return nodes_.size(); }
  bool has_backward() const { return backward_done_; }

 private:
  struct Node {
    Op op = Op::leaf;
    Tensor value;
    mutable Tensor grad;  // allocated lazily for nodes without gradients
    Tensor saved;         // forward intermediates reused by backward
    std::vector<int> in;
    Index idx_a;
    Index idx_b;
    std::size_t aux = 0;
    double scalar = 0.0;
    int param = -1;
    bool needs_grad = false;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void check_same_shape(Var a, Var b, std::string_view what) const;
  void propagate(std::size_t i);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace vfm::ad
