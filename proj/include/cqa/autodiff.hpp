#pragma once
#include <functional>
#include <vector>

namespace cqa {

struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
  size_t numel() const { return a.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double v) { std::fill(a.begin(), a.end(), v); }
  bool operator==(const Matrix&) const = default;
};

Matrix matmul(const Matrix& A, const Matrix& B);     // A B
Matrix matmul_nt(const Matrix& A, const Matrix& B);  // A Bt
Matrix matmul_tn(const Matrix& A, const Matrix& B);  // At B
void add_into(Matrix& dst, const Matrix& src);

// Reverse-mode tape over Matrix values. Build a graph with the ops below,
// call backward(loss) once, then read gradients of the leaves. All shapes
// are validated eagerly; all computation is double precision and
// deterministic.
class Tape {
 public:
  using Id = int;

  // Leaves: values copied in; gradients retrievable after backward().
  Id leaf(const Matrix& v);
  Id leaf(Matrix&& v);

  const Matrix& value(Id id) const { return nodes_[id].val; }
  const Matrix& grad(Id id) const { return nodes_[id].grad; }

  Id matmul(Id a, Id b);
  Id matmul_nt(Id a, Id b);  // A Bt
  Id add(Id a, Id b);        // same shape
  Id add_row_broadcast(Id a, Id bias);  // bias is 1 x cols, added to every row
  Id scale(Id a, double s);
  Id add_const(Id a, const Matrix& m);  // no gradient into m
  Id softmax_rows(Id a);
  Id layer_norm(Id a, Id gamma, Id beta);  // gamma/beta 1 x cols
  Id gelu(Id a);
  Id slice_rows(Id a, int r0, int len);
  Id slice_cols(Id a, int c0, int len);
  Id concat_rows(const std::vector<Id>& parts);
  Id concat_cols(const std::vector<Id>& parts);
  Id gather_rows(Id table, std::vector<int> rows);  // embedding lookup
  Id linear_const(const Matrix& M, Id a);  // M a, M constant
  Id ce_loss(Id logits, int target);       // logits 1 x K -> 1 x 1
  // scores N x 1 against 0/1 labels; mean of stable BCE-with-logits terms.
  Id bce_logits_loss(Id scores, const std::vector<double>& labels);
  Id mse_loss(Id pred, const Matrix& target);  // mean squared error -> 1 x 1

  // Seeds d(loss)=1 and runs every recorded op's vector-Jacobian product in
  // reverse. loss must be 1x1.
  void backward(Id loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix val;
    Matrix grad;
    std::function<void(Tape&)> vjp;  // may be empty for leaves
  };
  std::vector<Node> nodes_;

  Id push(Matrix val, std::function<void(Tape&)> vjp);
  Matrix& g(Id id) { return nodes_[id].grad; }
  const Matrix& v(Id id) const { return nodes_[id].val; }
};

}  // namespace cqa
