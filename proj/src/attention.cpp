#include "vara/attention.hpp"

#include <algorithm>
#include <cmath>

#include "vara/errors.hpp"

namespace vara {

Tensor initial_alignment(std::size_t t_red, std::size_t n_tokens, double g) {
  if (!(g > 0.0)) throw InvalidArgument("initial_alignment: g must be positive");
  if (t_red < 1 || n_tokens < 1) throw InvalidArgument("initial_alignment: empty alignment");
  const double T = static_cast<double>(t_red), L = static_cast<double>(n_tokens);
  std::vector<double> a(t_red * n_tokens);
  for (std::size_t t = 0; t < t_red; ++t) {
    double* row = a.data() + t * n_tokens;
    // Normalize in the log domain: for tiny g every raw entry can underflow.
    double top = -INFINITY;
    for (std::size_t l = 0; l < n_tokens; ++l) {
      const double d = static_cast<double>(t) / T - static_cast<double>(l) / L;
      row[l] = -d * d / (2.0 * g * g);
      top = std::max(top, row[l]);
    }
    double s = 0.0;
    for (std::size_t l = 0; l < n_tokens; ++l) s += (row[l] = std::exp(row[l] - top));
    for (std::size_t l = 0; l < n_tokens; ++l) row[l] /= s;
  }
  return Tensor(Shape{t_red, n_tokens}, std::move(a));
}

InitialContext initial_context(const Tensor& values, std::size_t t_red, std::span<const double> g_list,
                               const Tensor& proj_w, const Tensor& proj_b) {
  if (g_list.empty()) throw InvalidArgument("initial_context: g_list must not be empty");
  std::vector<Tensor> parts;
  std::vector<double> mean_a(t_red * values.rows(), 0.0);
  for (double g : g_list) {
    Tensor a = initial_alignment(t_red, values.rows(), g);
    parts.push_back(matmul(a, values));
    auto av = a.values();
    for (std::size_t i = 0; i < mean_a.size(); ++i) mean_a[i] += av[i] / static_cast<double>(g_list.size());
  }
  InitialContext out;
  out.concat = concat_cols(parts);
  out.context = linear(out.concat, proj_w, proj_b);
  out.alignment = Tensor(Shape{t_red, values.rows()}, std::move(mean_a));
  return out;
}

HeadOutput residual_attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& a_prev,
                                   double gain) {
  if (q.cols() != k.cols()) throw InvalidArgument("residual_attention_head: query and key widths differ");
  if (k.rows() != v.rows()) throw InvalidArgument("residual_attention_head: key and value lengths differ");
  if (a_prev.rank() != 2 || a_prev.rows() != q.rows() || a_prev.cols() != k.rows())
    throw InvalidArgument("residual_attention_head: A_prev is " + shape_string(a_prev.shape()) + ", scores are [" +
                          std::to_string(q.rows()) + "," + std::to_string(k.rows()) + "]");
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor w = softmax_rows(add(scores, gain == 1.0 ? a_prev : scale(a_prev, gain)));
  return {matmul(w, v), w};
}

AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t q_dim, std::size_t kv_dim,
                               std::size_t attn_dim, std::size_t out_dim, int heads, Rng& rng) {
  AttentionParams p;
  p.heads = heads;
  p.wq = store.normal(prefix + ".wq", {q_dim, attn_dim}, 1.0 / std::sqrt(static_cast<double>(q_dim)), rng);
  p.wk = store.normal(prefix + ".wk", {kv_dim, attn_dim}, 1.0 / std::sqrt(static_cast<double>(kv_dim)), rng);
  p.wv = store.normal(prefix + ".wv", {kv_dim, attn_dim}, 1.0 / std::sqrt(static_cast<double>(kv_dim)), rng);
  p.wo = store.normal(prefix + ".wo", {attn_dim, out_dim}, 1.0 / std::sqrt(static_cast<double>(attn_dim)), rng);
  p.bo = store.constant(prefix + ".bo", {out_dim}, 0.0);
  std::vector<double> kernel{0.0, 1.0, 0.0};
  for (auto& x : kernel) x += 0.01 * rng.normal();
  p.refine_kernel = store.add(prefix + ".refine", {3}, std::move(kernel));
  return p;
}

MultiHeadOutput residual_multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& a_prev,
                                    const AttentionParams& p, double gain) {
  const std::size_t A = p.wq.cols();
  const std::size_t dk = A / static_cast<std::size_t>(p.heads);
  const Tensor qp = matmul(q, p.wq), kp = matmul(k, p.wk), vp = matmul(v, p.wv);
  std::vector<Tensor> outs;
  Tensor mean_a;
  for (int h = 0; h < p.heads; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * dk;
    HeadOutput o = residual_attention_head(slice_cols(qp, b, b + dk), slice_cols(kp, b, b + dk),
                                           slice_cols(vp, b, b + dk), a_prev, gain);
    outs.push_back(o.out);
    mean_a = h == 0 ? o.weights : add(mean_a, o.weights);
  }
  mean_a = scale(mean_a, 1.0 / static_cast<double>(p.heads));
  Tensor context = linear(p.heads == 1 ? outs[0] : concat_cols(outs), p.wo, p.bo);
  return {context, mean_a};
}

Tensor refine_prev_alignment(const Tensor& a_prev, std::size_t t_new, const Tensor& kernel) {
  const std::size_t t_prev = a_prev.rows();
  if (t_new < t_prev)
    throw InvalidArgument("refine_prev_alignment: cannot shrink " + std::to_string(t_prev) + " rows to " +
                          std::to_string(t_new));
  const int factor = static_cast<int>((t_new + t_prev - 1) / t_prev);
  return conv_time_shared(nearest_upsample_time(a_prev, factor, t_new), kernel);
}

double mean_row_entropy(const Tensor& a) {
  double total = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const double p = a.at(r, c);
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return total / static_cast<double>(a.rows());
}

}  // namespace vara
