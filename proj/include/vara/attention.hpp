#pragma once

#include <span>

#include "vara/numerics.hpp"
#include "vara/params.hpp"

namespace vara {

// Near-diagonal T x L alignment: exp(-(t/T - l/L)^2 / 2g^2), rows normalized.
Tensor initial_alignment(std::size_t t_red, std::size_t n_tokens, double g);

struct InitialContext {
  Tensor context;    // T x Dout after projection
  Tensor alignment;  // mean of the per-g matrices
  Tensor concat;     // T x (|g| * D) before projection
};

InitialContext initial_context(const Tensor& values, std::size_t t_red, std::span<const double> g_list,
                               const Tensor& proj_w, const Tensor& proj_b);

struct HeadOutput {
  Tensor out;      // T x dv
  Tensor weights;  // T x L, row-stochastic
};

// softmax(Q K^T / sqrt(dk) + gain * A_prev) V.
HeadOutput residual_attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& a_prev,
                                   double gain = 1.0);

struct AttentionParams {
  Tensor wq;  // Dq x A
  Tensor wk;  // D x A
  Tensor wv;  // D x A
  Tensor wo;  // A x Dout
  Tensor bo;  // Dout
  Tensor refine_kernel;  // temporal taps applied to every text column of A_prev
  int heads = 1;
};

AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t q_dim, std::size_t kv_dim,
                               std::size_t attn_dim, std::size_t out_dim, int heads, Rng& rng);

struct MultiHeadOutput {
  Tensor context;    // T x Dout
  Tensor alignment;  // mean of the head weights
};

MultiHeadOutput residual_multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& a_prev,
                                    const AttentionParams& p, double gain = 1.0);

// Nearest upsample along time to t_new rows, then the shared temporal kernel.
// The result is an additive bias and is deliberately not renormalized.
Tensor refine_prev_alignment(const Tensor& a_prev, std::size_t t_new, const Tensor& kernel);

// Mean Shannon entropy (nats) of the rows of a row-stochastic matrix.
double mean_row_entropy(const Tensor& a);

}  // namespace vara
