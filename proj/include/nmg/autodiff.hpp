#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nmg {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {
struct Node;
}

// Handle to a node of the reverse-mode graph. Copies share the node; the graph
// is rebuilt on every forward pass and released with the last handle to the
// loss. Values are float64 everywhere.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  // Writable view for leaves (parameter updates, finite differences).
  std::span<double> mutable_data();
  // Empty when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;
  double at(std::size_t row, std::size_t col) const;

  // Deep copy of the value into a fresh leaf that keeps requires_grad.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct OpAccess;
};

// Forward ops. Rank-1 tensors behave as a single row where a matrix is needed.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// Same shape, or b a row vector ([c] or [1,c]) broadcast over the rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor softmax(const Tensor& a);
// Softmax over the allowed columns of each row; disallowed entries are exactly 0.
Tensor masked_softmax(const Tensor& a, const std::vector<bool>& allowed);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor mean_pool(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices);
Tensor reshape(const Tensor& x, Shape shape);
Tensor dropout(const Tensor& x, double rate, Rng& rng);
Tensor detach(const Tensor& x);

// tanh approximation used by gelu
double gelu_value(double x);
inline constexpr double kGeluCubic = 0.044715;
inline constexpr double kLayerNormEps = 1e-5;

// Fills grads of every requires_grad ancestor. Leaf grads accumulate across
// calls until zeroed by the caller.
void backward(const Tensor& loss);

// Worst per-coordinate relative error between backward() and central
// differences over all entries of `inputs`. Magnitudes below kGradientFloor
// are compared on an absolute scale (exactly-zero gradients such as attention
// key biases only ever differ by rounding noise). `loss_fn` must rebuild the graph
// from the current input values on each call.
inline constexpr double kGradientFloor = 1e-6;
double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               std::span<const Tensor> inputs, double h);

}  // namespace nmg
