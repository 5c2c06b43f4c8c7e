#pragma once

#include <optional>
#include <span>

#include "vara/config.hpp"
#include "vara/numerics.hpp"
#include "vara/params.hpp"

namespace vara {

struct TextEncoding {
  Tensor kv;      // L x D
  Tensor pooled;  // D, temporal mean of kv (t0)
};

struct TextEncoderParams {
  Tensor embedding;  // V x D
  // Present only in multi-speaker mode.
  std::optional<Tensor> speaker_table;  // S x Dspk
  Tensor film_scale_w, film_scale_b, film_shift_w, film_shift_b;
  Tensor conv_w[4], conv_b[4];
  double pe_scale = 1.0;
};

TextEncoderParams make_text_encoder(ParamStore& store, const ModelConfig& cfg, Rng& rng);

// gamma * U + xi with gamma = FC_scale(spk), xi = FC_shift(spk), broadcast over rows.
Tensor film(const Tensor& u, const Tensor& spk_emb, const Tensor& w_scale, const Tensor& b_scale,
            const Tensor& w_shift, const Tensor& b_shift);

// Sinusoidal table; D must be even.
Tensor positional_encoding(std::size_t length, std::size_t dim);

TextEncoding encode_text(std::span<const int> tokens, std::optional<int> speaker_id, const TextEncoderParams& p);

}  // namespace vara
