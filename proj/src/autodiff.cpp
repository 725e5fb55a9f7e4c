#include "cqa/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cqa {

namespace {
constexpr double kLnEps = 1e-10;

[[noreturn]] void shape_fail(const std::string& what) {
  throw std::invalid_argument("autodiff shape mismatch: " + what);
}
}  // namespace

Matrix matmul(const Matrix& A, const Matrix& B) {
  if (A.cols != B.rows) shape_fail("matmul");
  Matrix C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i)
    for (int k = 0; k < A.cols; ++k) {
      double aik = A.at(i, k);
      if (aik == 0.0) continue;
      for (int j = 0; j < B.cols; ++j) C.at(i, j) += aik * B.at(k, j);
    }
  return C;
}

Matrix matmul_nt(const Matrix& A, const Matrix& B) {
  if (A.cols != B.cols) shape_fail("matmul_nt");
  Matrix C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < B.rows; ++j) {
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += A.at(i, k) * B.at(j, k);
      C.at(i, j) = s;
    }
  return C;
}

Matrix matmul_tn(const Matrix& A, const Matrix& B) {
  if (A.rows != B.rows) shape_fail("matmul_tn");
  Matrix C(A.cols, B.cols);
  for (int k = 0; k < A.rows; ++k)
    for (int i = 0; i < A.cols; ++i) {
      double aki = A.at(k, i);
      if (aki == 0.0) continue;
      for (int j = 0; j < B.cols; ++j) C.at(i, j) += aki * B.at(k, j);
    }
  return C;
}

void add_into(Matrix& dst, const Matrix& src) {
  if (!dst.same_shape(src)) shape_fail("add_into");
  for (size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

Tape::Id Tape::push(Matrix val, std::function<void(Tape&)> vjp) {
  nodes_.push_back(Node{std::move(val), Matrix{}, std::move(vjp)});
  return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Id Tape::leaf(const Matrix& v) { return push(v, nullptr); }
Tape::Id Tape::leaf(Matrix&& v) { return push(std::move(v), nullptr); }

Tape::Id Tape::matmul(Id a, Id b) {
  Matrix out = cqa::matmul(v(a), v(b));
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, b, self](Tape& t) {
    add_into(t.g(a), cqa::matmul_nt(t.g(self), t.v(b)));
    add_into(t.g(b), cqa::matmul_tn(t.v(a), t.g(self)));
  };
  return self;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  Matrix out = cqa::matmul_nt(v(a), v(b));
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, b, self](Tape& t) {
    // C = A Bt: dA += dC B, dB += dCt A
    add_into(t.g(a), cqa::matmul(t.g(self), t.v(b)));
    add_into(t.g(b), cqa::matmul_tn(t.g(self), t.v(a)));
  };
  return self;
}

Tape::Id Tape::add(Id a, Id b) {
  if (!v(a).same_shape(v(b))) shape_fail("add");
  Matrix out = v(a);
  add_into(out, v(b));
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, b, self](Tape& t) {
    add_into(t.g(a), t.g(self));
    add_into(t.g(b), t.g(self));
  };
  return self;
}

Tape::Id Tape::add_row_broadcast(Id a, Id bias) {
  const Matrix& A = v(a);
  const Matrix& B = v(bias);
  if (B.rows != 1 || B.cols != A.cols) shape_fail("add_row_broadcast");
  Matrix out = A;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += B.at(0, j);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, bias, self](Tape& t) {
    const Matrix& dC = t.g(self);
    add_into(t.g(a), dC);
    Matrix& dB = t.g(bias);
    for (int i = 0; i < dC.rows; ++i)
      for (int j = 0; j < dC.cols; ++j) dB.at(0, j) += dC.at(i, j);
  };
  return self;
}

Tape::Id Tape::scale(Id a, double s) {
  Matrix out = v(a);
  for (double& x : out.a) x *= s;
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, s, self](Tape& t) {
    const Matrix& dC = t.g(self);
    Matrix& dA = t.g(a);
    for (size_t i = 0; i < dC.a.size(); ++i) dA.a[i] += s * dC.a[i];
  };
  return self;
}

Tape::Id Tape::add_const(Id a, const Matrix& m) {
  if (!v(a).same_shape(m)) shape_fail("add_const");
  Matrix out = v(a);
  add_into(out, m);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, self](Tape& t) { add_into(t.g(a), t.g(self)); };
  return self;
}

Tape::Id Tape::softmax_rows(Id a) {
  Matrix out = v(a);
  for (int i = 0; i < out.rows; ++i) {
    double mx = out.at(i, 0);
    for (int j = 1; j < out.cols; ++j) mx = std::max(mx, out.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < out.cols; ++j) {
      double e = std::exp(out.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < out.cols; ++j) out.at(i, j) /= sum;
  }
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, self](Tape& t) {
    const Matrix& P = t.v(self);
    const Matrix& dP = t.g(self);
    Matrix& dA = t.g(a);
    for (int i = 0; i < P.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < P.cols; ++j) dot += dP.at(i, j) * P.at(i, j);
      for (int j = 0; j < P.cols; ++j)
        dA.at(i, j) += P.at(i, j) * (dP.at(i, j) - dot);
    }
  };
  return self;
}

Tape::Id Tape::layer_norm(Id a, Id gamma, Id beta) {
  const Matrix& A = v(a);
  const Matrix& G = v(gamma);
  const Matrix& B = v(beta);
  if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols)
    shape_fail("layer_norm");
  int n = A.cols;
  Matrix xhat(A.rows, n);
  Matrix inv_sigma(A.rows, 1);
  for (int i = 0; i < A.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += A.at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = A.at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    double is = 1.0 / std::sqrt(var + kLnEps);
    inv_sigma.at(i, 0) = is;
    for (int j = 0; j < n; ++j) xhat.at(i, j) = (A.at(i, j) - mu) * is;
  }
  Matrix out(A.rows, n);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = xhat.at(i, j) * G.at(0, j) + B.at(0, j);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, gamma, beta, self, xhat = std::move(xhat),
                      inv_sigma = std::move(inv_sigma)](Tape& t) {
    const Matrix& dY = t.g(self);
    const Matrix& G = t.v(gamma);
    Matrix& dA = t.g(a);
    Matrix& dG = t.g(gamma);
    Matrix& dB = t.g(beta);
    int n = dY.cols;
    for (int i = 0; i < dY.rows; ++i) {
      double mean_gdy = 0.0, mean_gdy_xhat = 0.0;
      for (int j = 0; j < n; ++j) {
        double gdy = G.at(0, j) * dY.at(i, j);
        mean_gdy += gdy;
        mean_gdy_xhat += gdy * xhat.at(i, j);
        dG.at(0, j) += dY.at(i, j) * xhat.at(i, j);
        dB.at(0, j) += dY.at(i, j);
      }
      mean_gdy /= n;
      mean_gdy_xhat /= n;
      double is = inv_sigma.at(i, 0);
      for (int j = 0; j < n; ++j) {
        double gdy = G.at(0, j) * dY.at(i, j);
        dA.at(i, j) += is * (gdy - mean_gdy - xhat.at(i, j) * mean_gdy_xhat);
      }
    }
  };
  return self;
}

Tape::Id Tape::gelu(Id a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Matrix out = v(a);
  for (double& x : out.a) {
    double u = kC * (x + kA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, self](Tape& t) {
    const Matrix& X = t.v(a);
    const Matrix& dY = t.g(self);
    Matrix& dA = t.g(a);
    for (size_t i = 0; i < X.a.size(); ++i) {
      double x = X.a[i];
      double u = kC * (x + kA * x * x * x);
      double th = std::tanh(u);
      double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
      dA.a[i] += dY.a[i] * d;
    }
  };
  return self;
}

Tape::Id Tape::slice_rows(Id a, int r0, int len) {
  const Matrix& A = v(a);
  if (r0 < 0 || len < 0 || r0 + len > A.rows) shape_fail("slice_rows");
  Matrix out(len, A.cols);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < A.cols; ++j) out.at(i, j) = A.at(r0 + i, j);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, r0, len, self](Tape& t) {
    const Matrix& dC = t.g(self);
    Matrix& dA = t.g(a);
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < dC.cols; ++j) dA.at(r0 + i, j) += dC.at(i, j);
  };
  return self;
}

Tape::Id Tape::slice_cols(Id a, int c0, int len) {
  const Matrix& A = v(a);
  if (c0 < 0 || len < 0 || c0 + len > A.cols) shape_fail("slice_cols");
  Matrix out(A.rows, len);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < len; ++j) out.at(i, j) = A.at(i, c0 + j);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [a, c0, len, self](Tape& t) {
    const Matrix& dC = t.g(self);
    Matrix& dA = t.g(a);
    for (int i = 0; i < dC.rows; ++i)
      for (int j = 0; j < len; ++j) dA.at(i, c0 + j) += dC.at(i, j);
  };
  return self;
}

Tape::Id Tape::concat_rows(const std::vector<Id>& parts) {
  if (parts.empty()) shape_fail("concat_rows empty");
  int cols = v(parts[0]).cols, rows = 0;
  for (Id p : parts) {
    if (v(p).cols != cols) shape_fail("concat_rows");
    rows += v(p).rows;
  }
  Matrix out(rows, cols);
  int r = 0;
  for (Id p : parts) {
    const Matrix& P = v(p);
    for (int i = 0; i < P.rows; ++i, ++r)
      for (int j = 0; j < cols; ++j) out.at(r, j) = P.at(i, j);
  }
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [parts, self](Tape& t) {
    const Matrix& dC = t.g(self);
    int r = 0;
    for (Id p : parts) {
      Matrix& dP = t.g(p);
      for (int i = 0; i < dP.rows; ++i, ++r)
        for (int j = 0; j < dC.cols; ++j) dP.at(i, j) += dC.at(r, j);
    }
  };
  return self;
}

Tape::Id Tape::concat_cols(const std::vector<Id>& parts) {
  if (parts.empty()) shape_fail("concat_cols empty");
  int rows = v(parts[0]).rows, cols = 0;
  for (Id p : parts) {
    if (v(p).rows != rows) shape_fail("concat_cols");
    cols += v(p).cols;
  }
  Matrix out(rows, cols);
  int c = 0;
  for (Id p : parts) {
    const Matrix& P = v(p);
    for (int j = 0; j < P.cols; ++j, ++c)
      for (int i = 0; i < rows; ++i) out.at(i, c) = P.at(i, j);
  }
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [parts, self](Tape& t) {
    const Matrix& dC = t.g(self);
    int c = 0;
    for (Id p : parts) {
      Matrix& dP = t.g(p);
      for (int j = 0; j < dP.cols; ++j, ++c)
        for (int i = 0; i < dC.rows; ++i) dP.at(i, j) += dC.at(i, c);
    }
  };
  return self;
}

Tape::Id Tape::gather_rows(Id table, std::vector<int> rows) {
  const Matrix& T = v(table);
  for (int r : rows)
    if (r < 0 || r >= T.rows) shape_fail("gather_rows index");
  Matrix out(static_cast<int>(rows.size()), T.cols);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < T.cols; ++j)
      out.at(static_cast<int>(i), j) = T.at(rows[i], j);
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [table, rows = std::move(rows), self](Tape& t) {
    const Matrix& dC = t.g(self);
    Matrix& dT = t.g(table);
    for (size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < dC.cols; ++j)
        dT.at(rows[i], j) += dC.at(static_cast<int>(i), j);
  };
  return self;
}

Tape::Id Tape::linear_const(const Matrix& M, Id a) {
  Matrix out = cqa::matmul(M, v(a));
  Id self = push(std::move(out), nullptr);
  nodes_[self].vjp = [M, a, self](Tape& t) {
    add_into(t.g(a), cqa::matmul_tn(M, t.g(self)));
  };
  return self;
}

Tape::Id Tape::ce_loss(Id logits, int target) {
  const Matrix& L = v(logits);
  if (L.rows != 1 || target < 0 || target >= L.cols) shape_fail("ce_loss");
  double mx = L.at(0, 0);
  for (int j = 1; j < L.cols; ++j) mx = std::max(mx, L.at(0, j));
  double sum = 0.0;
  for (int j = 0; j < L.cols; ++j) sum += std::exp(L.at(0, j) - mx);
  double loss = std::log(sum) + mx - L.at(0, target);
  Id self = push(Matrix(1, 1, loss), nullptr);
  nodes_[self].vjp = [logits, target, self](Tape& t) {
    const Matrix& L = t.v(logits);
    double up = t.g(self).at(0, 0);
    double mx = L.at(0, 0);
    for (int j = 1; j < L.cols; ++j) mx = std::max(mx, L.at(0, j));
    double sum = 0.0;
    for (int j = 0; j < L.cols; ++j) sum += std::exp(L.at(0, j) - mx);
    Matrix& dL = t.g(logits);
    for (int j = 0; j < L.cols; ++j) {
      double p = std::exp(L.at(0, j) - mx) / sum;
      dL.at(0, j) += up * (p - (j == target ? 1.0 : 0.0));
    }
  };
  return self;
}

Tape::Id Tape::bce_logits_loss(Id scores, const std::vector<double>& labels) {
  const Matrix& S = v(scores);
  if (S.cols != 1 || static_cast<size_t>(S.rows) != labels.size() || labels.empty())
    shape_fail("bce_logits_loss");
  double total = 0.0;
  for (int i = 0; i < S.rows; ++i) {
    double s = S.at(i, 0), y = labels[i];
    total += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
  }
  double n = static_cast<double>(labels.size());
  Id self = push(Matrix(1, 1, total / n), nullptr);
  nodes_[self].vjp = [scores, labels, n, self](Tape& t) {
    const Matrix& S = t.v(scores);
    double up = t.g(self).at(0, 0);
    Matrix& dS = t.g(scores);
    for (int i = 0; i < S.rows; ++i) {
      double sig = 1.0 / (1.0 + std::exp(-S.at(i, 0)));
      dS.at(i, 0) += up * (sig - labels[i]) / n;
    }
  };
  return self;
}

Tape::Id Tape::mse_loss(Id pred, const Matrix& target) {
  const Matrix& P = v(pred);
  if (!P.same_shape(target) || P.numel() == 0) shape_fail("mse_loss");
  double total = 0.0;
  for (size_t i = 0; i < P.a.size(); ++i) {
    double d = P.a[i] - target.a[i];
    total += d * d;
  }
  double n = static_cast<double>(P.numel());
  Id self = push(Matrix(1, 1, total / n), nullptr);
  nodes_[self].vjp = [pred, target, n, self](Tape& t) {
    const Matrix& P = t.v(pred);
    double up = t.g(self).at(0, 0);
    Matrix& dP = t.g(pred);
    for (size_t i = 0; i < P.a.size(); ++i)
      dP.a[i] += up * 2.0 * (P.a[i] - target.a[i]) / n;
  };
  return self;
}

void Tape::backward(Id loss) {
  if (v(loss).rows != 1 || v(loss).cols != 1) shape_fail("backward expects 1x1 loss");
  for (Node& n : nodes_) {
    n.grad = Matrix(n.val.rows, n.val.cols);
  }
  nodes_[loss].grad.at(0, 0) = 1.0;
  for (Id id = loss; id >= 0; --id) {
    if (nodes_[id].vjp) nodes_[id].vjp(*this);
  }
}

}  // namespace cqa
