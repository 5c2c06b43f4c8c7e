#include "vara/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "vara/errors.hpp"

namespace vara {

using detail::Node;

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw InvalidArgument(std::string(op) + ": expected rank-2 tensor, got " +
                                           shape_string(a.shape()));
}

std::vector<double>& pgrad(Node& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
  if (shape_size(shape) != values.size())
    throw InvalidArgument("Tensor: shape " + shape_string(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return node_->shape[1];
}

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw InvalidArgument("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

std::span<const double> Tensor::grad() const {
  if (node_->grad.size() != node_->value.size()) return {};
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->value); }

Tensor Tensor::clone() const {
  Tensor t(shape(), node_->value);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

void Tensor::backward() const {
  if (size() != 1) throw InvalidArgument("backward: root must be a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; graphs can be thousands of nodes deep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.contains(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& p) { return p.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.shared_node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---- Rng ----------------------------------------------------------------

std::uint64_t Rng::next_u64() {
  std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ull * (++counter_);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::uniform_int(std::uint64_t lo, std::uint64_t hi) {
  if (hi < lo) throw InvalidArgument("uniform_int: empty range");
  std::uint64_t span = hi - lo + 1;
  if (span == 0) return next_u64();
  return lo + next_u64() % span;
}

Rng Rng::fork() { return Rng(next_u64()); }

// ---- elementwise --------------------------------------------------------------

namespace {

template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx_from_x_y) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_op(a.shape(), std::move(out), {a}, [dfdx_from_x_y](Node& self) {
    auto& ga = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * dfdx_from_x_y(x[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (wants(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (wants(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank2(a, "add_row");
  const std::size_t T = a.rows(), C = a.cols();
  require(row.size() == C, "add_row: row length " + std::to_string(row.size()) +
                               " does not match " + std::to_string(C) + " columns");
  std::vector<double> out(a.size());
  auto av = a.values(), rv = row.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[t * C + c] = av[t * C + c] + rv[c];
  return make_op(a.shape(), std::move(out), {a, row}, [T, C](Node& self) {
    if (wants(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[t * C + c];
    }
  });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  require_rank2(a, "mul_row");
  const std::size_t T = a.rows(), C = a.cols();
  require(row.size() == C, "mul_row: row length mismatch");
  std::vector<double> out(a.size());
  auto av = a.values(), rv = row.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[t * C + c] = av[t * C + c] * rv[c];
  return make_op(a.shape(), std::move(out), {a, row}, [T, C](Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& r = self.parents[1]->value;
    if (wants(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) g[t * C + c] += self.grad[t * C + c] * r[c];
    }
    if (wants(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[t * C + c] * x[t * C + c];
    }
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_tanh_scalar(double x) {
  constexpr double k = 0.79788456080286535588;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  return unary(x, gelu_scalar, [](double v, double) {
    double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    return cdf + v * pdf;
  });
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op(Shape{1}, {s}, {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.size());
  return make_op(Shape{1}, {s / n}, {a}, [n](Node& self) {
    auto& g = pgrad(self, 0);
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor mean_rows(const Tensor& a) {
  require_rank2(a, "mean_rows");
  const std::size_t T = a.rows(), C = a.cols();
  std::vector<double> out(C, 0.0);
  auto av = a.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[c] += av[t * C + c];
  for (auto& v : out) v /= static_cast<double>(T);
  return make_op(Shape{C}, std::move(out), {a}, [T, C](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) g[t * C + c] += self.grad[c] / static_cast<double>(T);
  });
}

Tensor norm2(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return make_op(Shape{1}, {std::sqrt(s)}, {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    const double n = self.value[0];
    if (n == 0.0) return;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * x[i] / n;
  });
}

Tensor sum_scalars(const std::vector<Tensor>& xs) {
  if (xs.empty()) return Tensor::scalar(0.0);
  double s = 0.0;
  for (const auto& x : xs) s += x.item();
  return make_op(Shape{1}, {s}, xs, [](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (wants(self, k)) pgrad(self, k)[0] += self.grad[0];
  });
}

// ---- shape --------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_size(shape) == a.size(), "reshape: size mismatch");
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
  return make_op(Shape{C, R}, std::move(out), {a}, [R, C](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[c * R + r];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t T = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t C = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.rows() == T, "concat_cols: row count mismatch");
    widths.push_back(p.cols());
    C += p.cols();
  }
  std::vector<double> out(T * C);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(pv.begin() + t * widths[k], widths[k], out.begin() + t * C + off);
    off += widths[k];
  }
  return make_op(Shape{T, C}, std::move(out), parts, [T, C, widths](Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (wants(self, k)) {
        auto& g = pgrad(self, k);
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < widths[k]; ++c) g[t * widths[k] + c] += self.grad[t * C + o + c];
      }
      o += widths[k];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  const std::size_t T = a.rows(), C = a.cols();
  require(begin < end && end <= C, "slice_cols: bad range");
  const std::size_t W = end - begin;
  std::vector<double> out(T * W);
  auto av = a.values();
  for (std::size_t t = 0; t < T; ++t)
    std::copy_n(av.begin() + t * C + begin, W, out.begin() + t * W);
  return make_op(Shape{T, W}, std::move(out), {a}, [T, C, W, begin](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < W; ++c) g[t * C + begin + c] += self.grad[t * W + c];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    sizes.push_back(p.size());
  }
  Shape s{out.size()};
  return make_op(std::move(s), std::move(out), parts, [sizes](Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (wants(self, k)) {
        auto& g = pgrad(self, k);
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[o + i];
      }
      o += sizes[k];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  require(begin < end && end <= a.size(), "slice: bad range");
  std::vector<double> out(a.values().begin() + begin, a.values().begin() + end);
  return make_op(Shape{end - begin}, std::move(out), {a}, [begin](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin + i] += self.grad[i];
  });
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  const std::size_t C = v.size();
  std::vector<double> out(rows * C);
  auto vv = v.values();
  for (std::size_t t = 0; t < rows; ++t) std::copy(vv.begin(), vv.end(), out.begin() + t * C);
  return make_op(Shape{rows, C}, std::move(out), {v}, [rows, C](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t c = 0; c < C; ++c) g[c] += self.grad[t * C + c];
  });
}

Tensor take_rows(const Tensor& a, std::size_t count) {
  require_rank2(a, "take_rows");
  require(count >= 1 && count <= a.rows(), "take_rows: count out of range");
  if (count == a.rows()) return a;
  const std::size_t C = a.cols();
  std::vector<double> out(a.values().begin(), a.values().begin() + count * C);
  return make_op(Shape{count, C}, std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t V = table.rows(), D = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * D);
  auto tv = table.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= V)
      throw InvalidInput("embedding: token id " + std::to_string(idx[i]) +
                         " outside vocabulary of size " + std::to_string(V));
    std::copy_n(tv.begin() + idx[i] * D, D, out.begin() + i * D);
  }
  return make_op(Shape{idx.size(), D}, std::move(out), {table}, [idx, D](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < D; ++c) g[idx[i] * D + c] += self.grad[i * D + c];
  });
}

Tensor element(const Tensor& a, std::size_t i) { return slice(a, i, i + 1); }

// ---- linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  require(b.rows() == K, "matmul: inner dimensions " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  std::vector<double> out(M * N, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < M; ++i) {
    double* o = out.data() + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double x = av[i * K + k];
      const double* br = bv.data() + k * N;
      for (std::size_t j = 0; j < N; ++j) o[j] += x * br[j];
    }
  }
  return make_op(Shape{M, N}, std::move(out), {a, b}, [M, K, N](Node& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    const double* go = self.grad.data();
    if (wants(self, 0)) {
      auto& ga = pgrad(self, 0);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double* yr = y.data() + k * N;
          const double* gr = go + i * N;
          double s = 0.0;
          for (std::size_t j = 0; j < N; ++j) s += gr[j] * yr[j];
          ga[i * K + k] += s;
        }
    }
    if (wants(self, 1)) {
      auto& gb = pgrad(self, 1);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double xv = x[i * K + k];
          double* gbr = gb.data() + k * N;
          const double* gr = go + i * N;
          for (std::size_t j = 0; j < N; ++j) gbr[j] += xv * gr[j];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() == 1) {
    Tensor row = reshape(x, Shape{1, x.size()});
    Tensor y = add_row(matmul(row, w), b);
    return reshape(y, Shape{y.size()});
  }
  return add_row(matmul(x, w), b);
}

Tensor softmax_rows(const Tensor& m) {
  require_rank2(m, "softmax_rows");
  const std::size_t R = m.rows(), C = m.cols();
  std::vector<double> out(m.size());
  auto mv = m.values();
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = mv.data() + r * C;
    double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out[r * C + c] = std::exp(row[c] - mx);
      s += out[r * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= s;
  }
  return make_op(m.shape(), std::move(out), {m}, [R, C](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < R; ++r) {
      const double* y = self.value.data() + r * C;
      const double* gy = self.grad.data() + r * C;
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += y[c] * (gy[c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  const std::size_t C = x.shape().back();
  const std::size_t R = x.size() / C;
  require(gain.size() == C && bias.size() == C, "layer_norm: gain/bias length mismatch");
  std::vector<double> xhat(x.size()), inv_std(R), out(x.size());
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = xv.data() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(C);
    inv_std[r] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (row[c] - mu) * inv_std[r];
      out[r * C + c] = gv[c] * xhat[r * C + c] + bv[c];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const auto& gv = self.parents[1]->value;
                   if (wants(self, 0)) {
                     auto& gx = pgrad(self, 0);
                     for (std::size_t r = 0; r < R; ++r) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t c = 0; c < C; ++c) {
                         double d = self.grad[r * C + c] * gv[c];
                         s1 += d;
                         s2 += d * xhat[r * C + c];
                       }
                       const double n = static_cast<double>(C);
                       for (std::size_t c = 0; c < C; ++c) {
                         double d = self.grad[r * C + c] * gv[c];
                         gx[r * C + c] += inv_std[r] * (d - s1 / n - xhat[r * C + c] * s2 / n);
                       }
                     }
                   }
                   if (wants(self, 1)) {
                     auto& gg = pgrad(self, 1);
                     for (std::size_t r = 0; r < R; ++r)
                       for (std::size_t c = 0; c < C; ++c)
                         gg[c] += self.grad[r * C + c] * xhat[r * C + c];
                   }
                   if (wants(self, 2)) {
                     auto& gb = pgrad(self, 2);
                     for (std::size_t r = 0; r < R; ++r)
                       for (std::size_t c = 0; c < C; ++c) gb[c] += self.grad[r * C + c];
                   }
                 });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw InvalidArgument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  std::vector<double> mask(x.size());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int dilation) {
  require_rank2(x, "conv1d");
  require(w.rank() == 3, "conv1d: kernel must be k x Cin x Cout");
  const std::size_t K = w.shape()[0], Cin = w.shape()[1], Cout = w.shape()[2];
  if (K % 2 == 0) throw InvalidArgument("conv1d: kernel size must be odd, got " + std::to_string(K));
  if (dilation < 1) throw InvalidArgument("conv1d: dilation must be >= 1");
  require(x.cols() == Cin, "conv1d: input has " + std::to_string(x.cols()) + " channels, kernel expects " +
                               std::to_string(Cin));
  require(bias.size() == Cout, "conv1d: bias length mismatch");
  const std::size_t T = x.rows();
  const long half = static_cast<long>(K / 2);
  const long dil = dilation;
  std::vector<double> out(T * Cout);
  auto xv = x.values(), wv = w.values(), bv = bias.values();
  for (std::size_t t = 0; t < T; ++t) {
    double* o = out.data() + t * Cout;
    std::copy(bv.begin(), bv.end(), o);
    for (std::size_t k = 0; k < K; ++k) {
      long ti = static_cast<long>(t) + (static_cast<long>(k) - half) * dil;
      if (ti < 0 || ti >= static_cast<long>(T)) continue;
      const double* xr = xv.data() + ti * Cin;
      const double* wk = wv.data() + k * Cin * Cout;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double xval = xr[ci];
        const double* wr = wk + ci * Cout;
        for (std::size_t co = 0; co < Cout; ++co) o[co] += xval * wr[co];
      }
    }
  }
  return make_op(Shape{T, Cout}, std::move(out), {x, w, bias},
                 [T, K, Cin, Cout, half, dil](Node& self) {
                   const auto& xv = self.parents[0]->value;
                   const auto& wv = self.parents[1]->value;
                   const double* go = self.grad.data();
                   const bool gx_on = wants(self, 0), gw_on = wants(self, 1);
                   double* gx = gx_on ? pgrad(self, 0).data() : nullptr;
                   double* gw = gw_on ? pgrad(self, 1).data() : nullptr;
                   for (std::size_t t = 0; t < T; ++t) {
                     const double* gr = go + t * Cout;
                     for (std::size_t k = 0; k < K; ++k) {
                       long ti = static_cast<long>(t) + (static_cast<long>(k) - half) * dil;
                       if (ti < 0 || ti >= static_cast<long>(T)) continue;
                       for (std::size_t ci = 0; ci < Cin; ++ci) {
                         const std::size_t wo = (k * Cin + ci) * Cout;
                         if (gx_on) {
                           const double* wr = wv.data() + wo;
                           double s = 0.0;
                           for (std::size_t co = 0; co < Cout; ++co) s += gr[co] * wr[co];
                           gx[ti * Cin + ci] += s;
                         }
                         if (gw_on) {
                           const double xval = xv[ti * Cin + ci];
                           double* gwr = gw + wo;
                           for (std::size_t co = 0; co < Cout; ++co) gwr[co] += xval * gr[co];
                         }
                       }
                     }
                   }
                   if (wants(self, 2)) {
                     auto& gb = pgrad(self, 2);
                     for (std::size_t t = 0; t < T; ++t)
                       for (std::size_t co = 0; co < Cout; ++co) gb[co] += go[t * Cout + co];
                   }
                 });
}

Tensor conv_time_shared(const Tensor& x, const Tensor& kernel) {
  require_rank2(x, "conv_time_shared");
  const std::size_t K = kernel.size();
  if (K % 2 == 0) throw InvalidArgument("conv_time_shared: kernel size must be odd");
  const std::size_t T = x.rows(), L = x.cols();
  const long half = static_cast<long>(K / 2);
  std::vector<double> out(T * L, 0.0);
  auto xv = x.values(), kv = kernel.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      long ti = static_cast<long>(t) + static_cast<long>(k) - half;
      if (ti < 0 || ti >= static_cast<long>(T)) continue;
      for (std::size_t l = 0; l < L; ++l) out[t * L + l] += kv[k] * xv[ti * L + l];
    }
  return make_op(x.shape(), std::move(out), {x, kernel}, [T, L, K, half](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        long ti = static_cast<long>(t) + static_cast<long>(k) - half;
        if (ti < 0 || ti >= static_cast<long>(T)) continue;
        if (wants(self, 0)) {
          auto& gx = pgrad(self, 0);
          for (std::size_t l = 0; l < L; ++l) gx[ti * L + l] += kv[k] * self.grad[t * L + l];
        }
        if (wants(self, 1)) {
          auto& gk = pgrad(self, 1);
          double s = 0.0;
          for (std::size_t l = 0; l < L; ++l) s += xv[ti * L + l] * self.grad[t * L + l];
          gk[k] += s;
        }
      }
  });
}

Tensor average_pool_time(const Tensor& x, int factor) {
  if (factor < 1) throw InvalidArgument("average_pool_time: factor must be >= 1");
  require_rank2(x, "average_pool_time");
  if (factor == 1) return x;
  const std::size_t T = x.rows(), C = x.cols(), f = static_cast<std::size_t>(factor);
  const std::size_t To = (T + f - 1) / f;
  std::vector<double> out(To * C, 0.0);
  auto xv = x.values();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[(t / f) * C + c] += xv[t * C + c];
  for (auto& v : out) v /= static_cast<double>(f);
  return make_op(Shape{To, C}, std::move(out), {x}, [T, C, f](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) g[t * C + c] += self.grad[(t / f) * C + c] / static_cast<double>(f);
  });
}

Tensor nearest_upsample_time(const Tensor& x, int factor, std::optional<std::size_t> target_len) {
  if (factor < 1) throw InvalidArgument("nearest_upsample_time: factor must be >= 1");
  require_rank2(x, "nearest_upsample_time");
  const std::size_t T = x.rows(), C = x.cols(), f = static_cast<std::size_t>(factor);
  const std::size_t full = T * f;
  const std::size_t To = target_len.value_or(full);
  if (To > full || To == 0)
    throw InvalidArgument("nearest_upsample_time: target length " + std::to_string(To) +
                          " outside [1, " + std::to_string(full) + "]");
  if (f == 1 && To == T) return x;
  std::vector<double> out(To * C);
  auto xv = x.values();
  for (std::size_t t = 0; t < To; ++t)
    std::copy_n(xv.begin() + (t / f) * C, C, out.begin() + t * C);
  return make_op(Shape{To, C}, std::move(out), {x}, [To, C, f](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t c = 0; c < C; ++c) g[(t / f) * C + c] += self.grad[t * C + c];
  });
}

// ---- Gaussians ----------------------------------------------------------------

Tensor gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  require_same_shape(q.mean, p.mean, "gaussian_kl");
  require_same_shape(q.mean, q.log_std, "gaussian_kl");
  require_same_shape(p.mean, p.log_std, "gaussian_kl");
  // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2, written in log-std form.
  const std::size_t n = q.mean.size();
  std::vector<double> out(n);
  auto qm = q.mean.values(), qs = q.log_std.values(), pm = p.mean.values(), ps = p.log_std.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double ratio = std::exp(2.0 * (qs[i] - ps[i]));
    const double d = qm[i] - pm[i];
    out[i] = ps[i] - qs[i] + 0.5 * (ratio + d * d * std::exp(-2.0 * ps[i])) - 0.5;
  }
  return make_op(q.mean.shape(), std::move(out), {q.mean, q.log_std, p.mean, p.log_std}, [n](Node& self) {
    const auto& qm = self.parents[0]->value;
    const auto& qs = self.parents[1]->value;
    const auto& pm = self.parents[2]->value;
    const auto& ps = self.parents[3]->value;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i];
      const double ratio = std::exp(2.0 * (qs[i] - ps[i]));
      const double inv_var_p = std::exp(-2.0 * ps[i]);
      const double d = qm[i] - pm[i];
      if (wants(self, 0)) pgrad(self, 0)[i] += g * d * inv_var_p;
      if (wants(self, 1)) pgrad(self, 1)[i] += g * (ratio - 1.0);
      if (wants(self, 2)) pgrad(self, 2)[i] -= g * d * inv_var_p;
      if (wants(self, 3)) pgrad(self, 3)[i] += g * (1.0 - ratio - d * d * inv_var_p);
    }
  });
}

Tensor reparameterize(const GaussianParams& g, Rng& rng) {
  require_same_shape(g.mean, g.log_std, "reparameterize");
  std::vector<double> noise(g.mean.size());
  for (auto& e : noise) e = rng.normal();
  Tensor eps(g.mean.shape(), std::move(noise));
  return add(g.mean, mul(exp(g.log_std), eps));
}

// ---- gradient checking ----------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3))
    throw InvalidArgument("grad_check: eps must be in [1e-7, 1e-3]");
  for (auto& p : params) p.zero_grad();
  Tensor y = f();
  if (!std::isfinite(y.item())) throw NumericError("grad_check: function value is not finite");
  y.backward();

  auto eval = [&]() {
    double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return v;
  };

  GradCheckResult result;
  Rng picker(options.sample_seed);
  const double h = options.eps;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> analytic(p.size(), 0.0);
    auto g = p.grad();
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());

    std::vector<std::size_t> coords;
    if (options.max_coords_per_param == 0 || options.max_coords_per_param >= p.size()) {
      for (std::size_t i = 0; i < p.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < options.max_coords_per_param; ++k)
        coords.push_back(static_cast<std::size_t>(picker.uniform_int(0, p.size() - 1)));
    }

    auto vals = p.mutable_values();
    for (std::size_t i : coords) {
      const double x0 = vals[i];
      vals[i] = x0 + h;
      const double f1 = eval();
      vals[i] = x0 - h;
      const double fm1 = eval();
      vals[i] = x0 + 2 * h;
      const double f2 = eval();
      vals[i] = x0 - 2 * h;
      const double fm2 = eval();
      vals[i] = x0;
      // Grouped as differences so a flat direction yields exactly zero.
      const double numeric = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coords_checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = "param[" + std::to_string(pi) + "]";
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  GradCheckOptions o;
  o.eps = eps;
  return grad_check(f, params, o).max_rel_error;
}

}  // namespace vara
