#include "vara/text_encoder.hpp"

#include <cmath>

#include "vara/errors.hpp"

namespace vara {

TextEncoderParams make_text_encoder(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  TextEncoderParams p;
  const std::size_t D = static_cast<std::size_t>(cfg.text_dim), H = static_cast<std::size_t>(cfg.text_conv_hidden);
  const std::size_t K = static_cast<std::size_t>(cfg.text_kernel);
  p.embedding = store.normal("text.embedding", {static_cast<std::size_t>(cfg.vocab_size), D}, 1.0, rng);
  if (cfg.n_speakers > 1) {
    const std::size_t S = static_cast<std::size_t>(cfg.speaker_dim);
    p.speaker_table = store.normal("text.speaker_table", {static_cast<std::size_t>(cfg.n_speakers), S}, 1.0, rng);
    const double s = 0.1 / std::sqrt(static_cast<double>(S));
    p.film_scale_w = store.normal("text.film.scale_w", {S, D}, s, rng);
    p.film_scale_b = store.constant("text.film.scale_b", {D}, 1.0);
    p.film_shift_w = store.normal("text.film.shift_w", {S, D}, s, rng);
    p.film_shift_b = store.constant("text.film.shift_b", {D}, 0.0);
  }
  const std::size_t plan[5] = {D, H, H, H, D};
  for (int i = 0; i < 4; ++i) {
    const std::size_t cin = plan[i], cout = plan[i + 1];
    p.conv_w[i] = store.normal("text.conv" + std::to_string(i) + ".w", {K, cin, cout},
                               1.0 / std::sqrt(static_cast<double>(K * cin)), rng);
    p.conv_b[i] = store.constant("text.conv" + std::to_string(i) + ".b", {cout}, 0.0);
  }
  p.pe_scale = cfg.pe_scale;
  return p;
}

Tensor film(const Tensor& u, const Tensor& spk_emb, const Tensor& w_scale, const Tensor& b_scale,
            const Tensor& w_shift, const Tensor& b_shift) {
  const Tensor gamma = linear(spk_emb, w_scale, b_scale);
  const Tensor xi = linear(spk_emb, w_shift, b_shift);
  return add_row(mul_row(u, gamma), xi);
}

Tensor positional_encoding(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw InvalidArgument("positional_encoding: dimension must be even, got " + std::to_string(dim));
  std::vector<double> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
      v[pos * dim + 2 * i] = std::sin(angle);
      v[pos * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor(Shape{length, dim}, std::move(v));
}

TextEncoding encode_text(std::span<const int> tokens, std::optional<int> speaker_id, const TextEncoderParams& p) {
  if (tokens.empty()) throw InvalidInput("encode_text: empty token sequence");
  const int vocab = static_cast<int>(p.embedding.rows());
  for (int t : tokens)
    if (t < 0 || t >= vocab)
      throw InvalidInput("encode_text: token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(vocab));
  Tensor h = embedding(p.embedding, tokens);
  if (p.speaker_table && speaker_id) {
    const int n = static_cast<int>(p.speaker_table->rows());
    if (*speaker_id < 0 || *speaker_id >= n)
      throw InvalidInput("encode_text: speaker id " + std::to_string(*speaker_id) + " outside table of " +
                         std::to_string(n));
    const int id = *speaker_id;
    Tensor spk = reshape(embedding(*p.speaker_table, std::span<const int>(&id, 1)), {p.speaker_table->cols()});
    h = film(h, spk, p.film_scale_w, p.film_scale_b, p.film_shift_w, p.film_shift_b);
  }
  for (int i = 0; i < 4; ++i) {
    if (i > 0) h = gelu(h);
    h = conv1d(h, p.conv_w[i], p.conv_b[i]);
  }
  Tensor pe = positional_encoding(tokens.size(), p.embedding.cols());
  Tensor kv = add(h, p.pe_scale == 1.0 ? pe : scale(pe, p.pe_scale));
  return {kv, mean_rows(kv)};
}

}  // namespace vara
