#include "vara/speed.hpp"

#include <cmath>

#include "vara/errors.hpp"

namespace vara {

SpeedPredictorParams make_speed_predictor(ParamStore& store, std::size_t in_dim, std::size_t hidden,
                                          double dropout, Rng& rng) {
  SpeedPredictorParams p;
  p.w1 = store.normal("speed.fc1.w", {in_dim, hidden}, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
  p.b1 = store.constant("speed.fc1.b", {hidden}, 0.0);
  p.ln_g = store.constant("speed.ln.g", {hidden}, 1.0);
  p.ln_b = store.constant("speed.ln.b", {hidden}, 0.0);
  p.w2 = store.normal("speed.fc2.w", {hidden, 1}, 0.1 / std::sqrt(static_cast<double>(hidden)), rng);
  p.b2 = store.constant("speed.fc2.b", {1}, 0.0);
  p.dropout = dropout;
  return p;
}

Tensor predict_speed(const Tensor& input, const SpeedPredictorParams& p, Rng& rng, bool training) {
  Tensor h = relu(linear(input, p.w1, p.b1));
  h = dropout(layer_norm(h, p.ln_g, p.ln_b), p.dropout, rng, training);
  return sigmoid(linear(h, p.w2, p.b2));
}

double denormalize_speed(double d, const SpeedStats& stats) {
  validate(stats);
  return stats.min_ratio + d * (stats.max_ratio - stats.min_ratio);
}

FrameBudget frames_from_speed(double d, std::size_t n_tokens, const SpeedStats& stats, int max_reduction) {
  if (n_tokens < 1) throw InvalidArgument("frames_from_speed: empty token sequence");
  if (max_reduction < 1) throw InvalidArgument("frames_from_speed: max_reduction must be >= 1");
  const double ratio = denormalize_speed(d, stats);
  FrameBudget b;
  const double raw = std::round(ratio * static_cast<double>(n_tokens));
  const auto floor_frames = static_cast<std::size_t>(max_reduction);
  if (!(raw >= static_cast<double>(floor_frames))) {
    b.t_mel = floor_frames;
    b.clamped = true;
  } else {
    b.t_mel = static_cast<std::size_t>(raw);
  }
  b.t_max_red = (b.t_mel + floor_frames - 1) / floor_frames;
  return b;
}

Tensor speed_loss(std::span<const Tensor> d_hat, std::span<const double> d) {
  if (d_hat.size() != d.size() || d.empty()) throw InvalidArgument("speed_loss: batch size mismatch");
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < d.size(); ++i) terms.push_back(square(add_scalar(reshape(d_hat[i], {1}), -d[i])));
  return scale(sum_scalars(terms), 1.0 / static_cast<double>(d.size()));
}

}  // namespace vara
