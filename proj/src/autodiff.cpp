#include "nmg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "nmg/error.hpp"

namespace nmg {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

struct OpAccess {
  static Tensor wrap(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }
  static const std::shared_ptr<Node>& ptr(const Tensor& t) { return t.node_; }
};

namespace {

void validate_shape(const Shape& shape, std::size_t size, const char* what) {
  if (shape.empty()) throw ShapeError(std::string(what) + ": empty shape");
  for (auto d : shape) {
    if (d == 0) throw ShapeError(std::string(what) + ": zero extent in " + shape_string(shape));
  }
  if (shape_size(shape) != size) {
    throw ShapeError(std::string(what) + ": shape " + shape_string(shape) + " does not hold " +
                     std::to_string(size) + " values");
  }
}

const std::shared_ptr<Node>& need(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  return OpAccess::ptr(t);
}

std::size_t rows_of(const Node& n) {
  return n.shape.size() == 1 ? 1 : shape_size(n.shape) / n.shape.back();
}
std::size_t cols_of(const Node& n) { return n.shape.back(); }

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Creates the output node, checks finiteness and wires parents.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return OpAccess::wrap(std::move(node));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  validate_shape(shape, values.size(), "constant");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> values(shape_size(shape), 0.0);
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::size_t Tensor::rows() const { return rows_of(*node_); }
std::size_t Tensor::cols() const { return cols_of(*node_); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_string(node_->shape) + " is not a scalar");
  }
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->value[row * cols_of(*node_) + col];
}

Tensor Tensor::clone() const {
  Tensor t = constant(node_->shape, node_->value);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto& pa = need(a, "matmul");
  const auto& pb = need(b, "matmul");
  if (pb->shape.size() != 2) shape_mismatch("matmul", pa->shape, pb->shape);
  const std::size_t m = rows_of(*pa), k = cols_of(*pa);
  const std::size_t kb = transpose_b ? pb->shape[1] : pb->shape[0];
  const std::size_t n = transpose_b ? pb->shape[0] : pb->shape[1];
  if (k != kb) shape_mismatch("matmul", pa->shape, pb->shape);

  std::vector<double> out(m * n, 0.0);
  const double* A = pa->value.data();
  const double* B = pb->value.data();
  if (transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = A + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* br = B + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
        out[i * n + j] = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* br = B + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
      }
    }
  }

  return make_result("matmul", {m, n}, std::move(out), {pa, pb},
                     [m, k, n, transpose_b](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* G = self.grad.data();
    const double* A = na.value.data();
    const double* B = nb.value.data();
    if (na.requires_grad) {
      double* GA = na.grad_buffer().data();
      // dA = G * B^T (or G * B when b was transposed)
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        double* garow = GA + i * k;
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = grow[j];
            const double* br = B + j * k;
            for (std::size_t p = 0; p < k; ++p) garow[p] += g * br[p];
          }
        } else {
          for (std::size_t p = 0; p < k; ++p) {
            const double* br = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * br[j];
            garow[p] += acc;
          }
        }
      }
    }
    if (nb.requires_grad) {
      double* GB = nb.grad_buffer().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        const double* arow = A + i * k;
        if (transpose_b) {
          // dB[j,p] += G[i,j] * A[i,p]
          for (std::size_t j = 0; j < n; ++j) {
            const double g = grow[j];
            if (g == 0.0) continue;
            double* gbrow = GB + j * k;
            for (std::size_t p = 0; p < k; ++p) gbrow[p] += g * arow[p];
          }
        } else {
          // dB[p,j] += A[i,p] * G[i,j]
          for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* gbrow = GB + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    }
  });
}

namespace {

enum class Combine { kAdd, kSub, kMul };

Tensor elementwise(const Tensor& a, const Tensor& b, Combine kind, const char* op) {
  const auto& pa = need(a, op);
  const auto& pb = need(b, op);
  const bool same = pa->shape == pb->shape;
  const bool broadcast = !same && kind != Combine::kMul && rows_of(*pb) == 1 &&
                         pb->value.size() == cols_of(*pa);
  if (!same && !broadcast) shape_mismatch(op, pa->shape, pb->shape);

  const std::size_t n = pa->value.size();
  const std::size_t c = pb->value.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double bv = same ? pb->value[i] : pb->value[i % c];
    switch (kind) {
      case Combine::kAdd: out[i] = pa->value[i] + bv; break;
      case Combine::kSub: out[i] = pa->value[i] - bv; break;
      case Combine::kMul: out[i] = pa->value[i] * bv; break;
    }
  }
  return make_result(op, pa->shape, std::move(out), {pa, pb}, [kind, same, n, c](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += kind == Combine::kMul ? g[i] * nb.value[i] : g[i];
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = same ? i : i % c;
        switch (kind) {
          case Combine::kAdd: gb[j] += g[i]; break;
          case Combine::kSub: gb[j] -= g[i]; break;
          case Combine::kMul: gb[j] += g[i] * na.value[i]; break;
        }
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Combine::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Combine::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Combine::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  const auto& pa = need(a, "scale");
  std::vector<double> out(pa->value);
  for (auto& v : out) v *= factor;
  return make_result("scale", pa->shape, std::move(out), {pa}, [factor](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  const auto& pa = need(a, "add_scalar");
  std::vector<double> out(pa->value);
  for (auto& v : out) v += value;
  return make_result("add_scalar", pa->shape, std::move(out), {pa}, [](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  const auto& pt = need(table, "embedding");
  if (pt->shape.size() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_string(pt->shape));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = pt->shape[0], dim = pt->shape[1];
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(rows[r]) + " outside table " + shape_string(pt->shape));
    }
    std::copy_n(pt->value.data() + rows[r] * dim, dim, out.data() + r * dim);
  }
  const std::size_t n = rows.size();
  return make_result("embedding", {n, dim}, std::move(out), {pt},
                     [rows = std::move(rows), dim](Node& self) {
    auto& gt = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double* dst = gt.data() + rows[r] * dim;
      const double* src = self.grad.data() + r * dim;
      for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
    }
  });
}

namespace {

Tensor softmax_impl(const Tensor& a, const std::vector<bool>* allowed, const char* op) {
  const auto& pa = need(a, op);
  const std::size_t r = rows_of(*pa), c = cols_of(*pa);
  if (allowed && allowed->size() != c) {
    throw ShapeError(std::string(op) + ": mask of length " + std::to_string(allowed->size()) +
                     " vs shape " + shape_string(pa->shape));
  }
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = pa->value.data() + i * c;
    double* y = out.data() + i * c;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) {
      if (!allowed || (*allowed)[j]) mx = std::max(mx, x[j]);
    }
    if (mx == -INFINITY) throw NumericError(std::string(op) + ": no allowed entries in row");
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!allowed || (*allowed)[j]) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= total;
  }
  std::vector<double> saved = out;
  return make_result(op, pa->shape, std::move(out), {pa}, [r, c, saved = std::move(saved)](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = saved.data() + i * c;
      const double* g = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[j] * (g[j] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl(a, nullptr, "softmax"); }

Tensor masked_softmax(const Tensor& a, const std::vector<bool>& allowed) {
  return softmax_impl(a, &allowed, "masked_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& px = need(x, "layer_norm");
  const auto& pg = need(gain, "layer_norm");
  const auto& pb = need(bias, "layer_norm");
  const std::size_t r = rows_of(*px), c = cols_of(*px);
  if (pg->value.size() != c) shape_mismatch("layer_norm", px->shape, pg->shape);
  if (pb->value.size() != c) shape_mismatch("layer_norm", px->shape, pb->shape);

  std::vector<double> out(r * c), xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = px->value.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xr[j] - mean) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * pg->value[j] + pb->value[j];
    }
  }
  return make_result("layer_norm", px->shape, std::move(out), {px, pg, pb},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node& nx = *self.parents[0];
    Node& ng = *self.parents[1];
    Node& nb = *self.parents[2];
    const auto& g = self.grad;
    if (ng.requires_grad || nb.requires_grad) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          if (ng.requires_grad) ng.grad_buffer()[j] += g[i * c + j] * xhat[i * c + j];
          if (nb.requires_grad) nb.grad_buffer()[j] += g[i * c + j];
        }
      }
    }
    if (nx.requires_grad) {
      auto& gx = nx.grad_buffer();
      std::vector<double> dxhat(c);
      for (std::size_t i = 0; i < r; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          dxhat[j] = g[i * c + j] * ng.value[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[i * c + j];
        }
        mean_d /= static_cast<double>(c);
        mean_dx /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
        }
      }
    }
  });
}

double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + kGeluCubic * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  const auto& px = need(x, "gelu");
  std::vector<double> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(px->value[i]);
  return make_result("gelu", px->shape, std::move(out), {px}, [](Node& self) {
    constexpr double k = 0.7978845608028654;
    Node& nx = *self.parents[0];
    auto& gx = nx.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = nx.value[i];
      const double u = k * (v + kGeluCubic * v * v * v);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * kGeluCubic * v * v);
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      gx[i] += self.grad[i] * d;
    }
  });
}

Tensor mean_pool(const Tensor& x) {
  const auto& px = need(x, "mean_pool");
  const std::size_t r = rows_of(*px), c = cols_of(*px);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j] += px->value[i * c + j];
  }
  for (auto& v : out) v /= static_cast<double>(r);
  return make_result("mean_pool", {1, c}, std::move(out), {px}, [r, c](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j] * inv;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const auto& pl = need(logits, "cross_entropy");
  const std::size_t r = rows_of(*pl), c = cols_of(*pl);
  if (targets.size() != r) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(pl->shape));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> probs(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c) {
      throw ShapeError("cross_entropy: target " + std::to_string(tgt[i]) + " outside " + std::to_string(c) + " classes");
    }
    const double* x = pl->value.data() + i * c;
    double mx = *std::max_element(x, x + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(x[j] - lse);
    loss += lse - x[tgt[i]];
  }
  loss /= static_cast<double>(r);
  return make_result("cross_entropy", {1}, {loss}, {pl},
                     [r, c, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
    auto& gl = self.parents[0]->grad_buffer();
    const double g = self.grad[0] / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double onehot = static_cast<int>(j) == tgt[i] ? 1.0 : 0.0;
        gl[i * c + j] += g * (probs[i * c + j] - onehot);
      }
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  std::vector<std::shared_ptr<Node>> nodes;
  const std::size_t r = rows_of(*need(parts[0], "concat_cols"));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& n = need(p, "concat_cols");
    if (rows_of(*n) != r) shape_mismatch("concat_cols", nodes.empty() ? n->shape : nodes[0]->shape, n->shape);
    nodes.push_back(n);
    widths.push_back(cols_of(*n));
    total += widths.back();
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(nodes[k]->value.data() + i * widths[k], widths[k], out.data() + i * total + offset);
    }
    offset += widths[k];
  }
  return make_result("concat_cols", {r, total}, std::move(out), std::move(nodes),
                     [r, total, widths = std::move(widths)](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& nk = *self.parents[k];
      if (nk.requires_grad) {
        auto& g = nk.grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + offset + j];
        }
      }
      offset += widths[k];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto& px = need(x, "slice_cols");
  const std::size_t r = rows_of(*px), c = cols_of(*px);
  if (begin >= end || end > c) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(px->shape));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(px->value.data() + i * c + begin, w, out.data() + i * w);
  return make_result("slice_cols", {r, w}, std::move(out), {px}, [r, c, w, begin](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
    }
  });
}

Tensor log(const Tensor& x) {
  const auto& px = need(x, "log");
  std::vector<double> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(px->value[i] > 0.0)) throw NumericError("log: non-positive input");
    out[i] = std::log(px->value[i]);
  }
  return make_result("log", px->shape, std::move(out), {px}, [](Node& self) {
    Node& nx = *self.parents[0];
    auto& g = nx.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / nx.value[i];
  });
}

Tensor sum(const Tensor& x) {
  const auto& px = need(x, "sum");
  double total = 0.0;
  for (double v : px->value) total += v;
  return make_result("sum", {1}, {total}, {px}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices) {
  const auto& px = need(x, "pick");
  if (flat_indices.empty()) throw ShapeError("pick: empty index list");
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= px->value.size()) {
      throw ShapeError("pick: index " + std::to_string(idx[i]) + " outside " + shape_string(px->shape));
    }
    out[i] = px->value[idx[i]];
  }
  const std::size_t n = idx.size();
  return make_result("pick", {n}, std::move(out), {px}, [idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& px = need(x, "reshape");
  validate_shape(shape, px->value.size(), "reshape");
  return make_result("reshape", std::move(shape), px->value, {px}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  const auto& px = need(x, "dropout");
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw NumericError("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> factor(px->value.size());
  std::vector<double> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = keep(rng) ? inv : 0.0;
    out[i] = px->value[i] * factor[i];
  }
  return make_result("dropout", px->shape, std::move(out), {px}, [factor = std::move(factor)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
  });
}

Tensor detach(const Tensor& x) {
  const auto& px = need(x, "detach");
  return Tensor::constant(px->shape, px->value);
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  const auto& root = need(loss, "backward");
  if (root->value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(root->shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward_fn) n->backward_fn(*n);
  }
}

double finite_difference_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> inputs,
                               double h) {
  std::vector<Tensor> vars(inputs.begin(), inputs.end());
  for (auto& v : vars) v.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& v : vars) {
    auto g = v.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(v.size(), 0.0);
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto data = vars[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradientFloor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  for (auto& v : vars) v.zero_grad();
  return worst;
}

}  // namespace nmg
