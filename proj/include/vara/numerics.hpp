#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every operation returns a new Tensor that remembers its parents and a
// closure that pushes its gradient back into them. Calling backward() on a
// scalar walks the graph in reverse topological order. Values are stored as
// 64-bit doubles throughout, which keeps finite-difference checks meaningful
// and makes two runs with the same seed bit-identical.
//
// Rank-2 tensors are laid out as [time, channel] for sequence data.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vara {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  // A leaf that accumulates gradients across backward() calls until zero_grad().
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy of the values as a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  // Seeds d(self)/d(self) = 1; self must hold exactly one element.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. Parents and the backward closure are retained only when
// at least one parent requires a gradient.
Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward);

// Counter-based generator: state is (seed, counter), so a checkpoint can
// restore it exactly. splitmix64 over seed ^ counter.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  double uniform();                                   // [0, 1)
  double normal();                                    // Box-Muller, no cached spare
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi);  // inclusive
  // Independent stream derived from this one; advances this generator once.
  Rng fork();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void restore(std::uint64_t seed, std::uint64_t counter) {
    seed_ = seed;
    counter_ = counter;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

struct GaussianParams {
  Tensor mean;
  Tensor log_std;
};

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// a is T x C, row is a length-C vector added to every row.
Tensor add_row(const Tensor& a, const Tensor& row);
// a is T x C, row is a length-C vector multiplied into every row.
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// x * Phi(x) with the exact normal CDF (erf based), in every mode.
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);
double gelu_tanh_scalar(double x);

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// T x C -> length-C vector of column means.
Tensor mean_rows(const Tensor& a);
// Frobenius norm.
Tensor norm2(const Tensor& a);
// Sum of a list of scalars.
Tensor sum_scalars(const std::vector<Tensor>& xs);

// ---- shape --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
// Concatenate rank-2 tensors with equal row count along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Concatenate vectors.
Tensor concat(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
// Length-C vector repeated into a T x C matrix.
Tensor broadcast_rows(const Tensor& v, std::size_t rows);
Tensor take_rows(const Tensor& a, std::size_t count);
// Gathers rows of a V x D table.
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Element i, as a scalar.
Tensor element(const Tensor& a, std::size_t i);

// ---- linear algebra and layers ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x: T x In (or a length-In vector), w: In x Out, b: length Out.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor softmax_rows(const Tensor& m);
// Normalizes over the last axis with epsilon 1e-5, then gain * x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Inverted dropout. Identity when training is false; rate must be in [0, 1).
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

// x: T x Cin, w: k x Cin x Cout (k odd), bias: Cout. Zero "same" padding.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int dilation = 1);
// The same k-tap temporal kernel applied independently to every column of x.
Tensor conv_time_shared(const Tensor& x, const Tensor& kernel);

// Mean over windows of `factor` frames; the tail is zero-padded to a full window.
Tensor average_pool_time(const Tensor& x, int factor);
// Repeats each frame `factor` times, then truncates to target_len when given.
Tensor nearest_upsample_time(const Tensor& x, int factor,
                             std::optional<std::size_t> target_len = std::nullopt);

// ---- Gaussians ----------------------------------------------------------

// Elementwise KL(q || p) between diagonal Gaussians.
Tensor gaussian_kl(const GaussianParams& q, const GaussianParams& p);
// mean + exp(log_std) * eps with eps ~ N(0, 1) drawn from rng.
Tensor reparameterize(const GaussianParams& g, Rng& rng);

// ---- gradient checking -----------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise a deterministic sample per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of a scalar function against the fourth
// order central difference (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h.
// Relative error is |a - b| / max(|a|, |b|, 1e-8). `f` must rebuild its graph
// from the current parameter values on every call and be deterministic.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options = {});
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps);

}  // namespace vara
