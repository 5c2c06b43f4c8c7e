#include "vara/losses.hpp"

#include <cmath>

#include "vara/errors.hpp"

namespace vara {

Tensor recon_loss(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape())
    throw InvalidArgument("recon_loss: target " + shape_string(x.shape()) + " vs prediction " +
                          shape_string(x_hat.shape()));
  // The target carries no gradient, so its norm is a constant.
  double nx = 0.0;
  for (double v : x.values()) nx += v * v;
  nx = std::sqrt(nx);
  Tensor ratio = scale(norm2(sub(x, x_hat)), 1.0 / nx);
  Tensor log_term = mean(abs(sub(log(x), log(x_hat))));
  return add(ratio, log_term);
}

Tensor kl_total(std::span<const Tensor> kl_per_layer, std::size_t batch_size) {
  if (batch_size < 1) throw InvalidArgument("kl_total: batch size must be >= 1");
  std::vector<Tensor> parts;
  for (const auto& k : kl_per_layer) {
    if (k.item() < 0.0) throw NumericError("kl_total: negative layer KL " + std::to_string(k.item()));
    parts.push_back(reshape(k, {1}));
  }
  if (parts.empty()) return Tensor::scalar(0.0);
  return scale(sum_scalars(parts), 1.0 / static_cast<double>(batch_size));
}

double kl_reference(std::span<const double> kl_per_frame, double c) {
  double s = 0.0;
  for (double k : kl_per_frame) s += k;
  return c / static_cast<double>(kl_per_frame.size()) * s;
}

Tensor detailed_kl_gain(std::span<const Tensor> kl_per_frame, double c, bool printed_form,
                        std::optional<double> reference) {
  if (!(c > 0.0)) throw InvalidArgument("detailed_kl_gain: c must be positive");
  if (kl_per_frame.empty()) return Tensor::scalar(0.0);
  std::vector<double> values;
  for (const auto& k : kl_per_frame) values.push_back(k.item());
  const double ref = reference ? *reference : kl_reference(values, c);
  std::vector<Tensor> terms;
  for (const auto& k : kl_per_frame) {
    Tensor ki = reshape(k, {1});
    terms.push_back(printed_form ? relu(add_scalar(ki, -ref)) : relu(add_scalar(scale(ki, -1.0), ref)));
  }
  return sum_scalars(terms);
}

Tensor total_loss(const LossTerms& parts, const LossConfig& w) {
  if (w.alpha < 0 || w.beta < 0 || w.lambda < 0) throw InvalidArgument("total_loss: weights must be >= 0");
  std::vector<Tensor> terms{reshape(parts.recon, {1})};
  if (w.alpha != 0.0) terms.push_back(scale(reshape(parts.speed, {1}), w.alpha));
  if (w.beta != 0.0) terms.push_back(scale(reshape(parts.kl, {1}), w.beta));
  if (w.lambda != 0.0) terms.push_back(scale(reshape(parts.gain, {1}), w.lambda));
  return sum_scalars(terms);
}

LossBreakdown breakdown(const LossTerms& parts, const Tensor& total, std::vector<double> kl_per_layer,
                        const LossConfig& w) {
  LossBreakdown b;
  b.speed = parts.speed.item();
  b.recon = parts.recon.item();
  b.kl_total = parts.kl.item();
  b.gain = parts.gain.item();
  b.total = total.item();
  b.kl_per_layer = std::move(kl_per_layer);
  b.alpha = w.alpha;
  b.beta = w.beta;
  b.lambda = w.lambda;
  b.c = w.c;
  return b;
}

}  // namespace vara
