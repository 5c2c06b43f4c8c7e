#pragma once

#include <optional>
#include <span>
#include <vector>

#include "vara/config.hpp"
#include "vara/numerics.hpp"

namespace vara {

// ||x - x_hat||_F / ||x||_F + mean |log x - log x_hat| for one utterance.
Tensor recon_loss(const Tensor& x, const Tensor& x_hat);

// Sum of per-layer KL terms divided by the batch size.
Tensor kl_total(std::span<const Tensor> kl_per_layer, std::size_t batch_size);

// KL_ref = c / (N + 1) * sum KL_i, held constant; gain = sum max(0, KL_ref - KL_i).
// With printed_form the as-printed sum |max(KL_i, KL_ref) - KL_ref| is used instead.
// A given reference replaces the one computed from the inputs.
Tensor detailed_kl_gain(std::span<const Tensor> kl_per_frame, double c, bool printed_form = false,
                        std::optional<double> reference = std::nullopt);
double kl_reference(std::span<const double> kl_per_frame, double c);

struct LossTerms {
  Tensor speed, recon, kl, gain;
};

struct LossBreakdown {
  double speed = 0.0;
  double recon = 0.0;
  double kl_total = 0.0;
  double gain = 0.0;
  double total = 0.0;
  std::vector<double> kl_per_layer;  // per-frame nats, N + 1 entries
  double alpha = 1.0, beta = 1.8, lambda = 1.0, c = 0.5;
};

// alpha * speed + recon + beta * kl + lambda * gain.
Tensor total_loss(const LossTerms& parts, const LossConfig& w);
LossBreakdown breakdown(const LossTerms& parts, const Tensor& total, std::vector<double> kl_per_layer,
                        const LossConfig& w);

}  // namespace vara
