#pragma once

#include <span>

#include "vara/data.hpp"
#include "vara/numerics.hpp"
#include "vara/params.hpp"

namespace vara {

struct SpeedPredictorParams {
  Tensor w1, b1;       // In x H
  Tensor ln_g, ln_b;   // H
  Tensor w2, b2;       // H x 1
  double dropout = 0.1;
};

SpeedPredictorParams make_speed_predictor(ParamStore& store, std::size_t in_dim, std::size_t hidden,
                                          double dropout, Rng& rng);

// sigmoid(FC2(dropout(LN(relu(FC1(x)))))) as a one-element tensor.
Tensor predict_speed(const Tensor& input, const SpeedPredictorParams& p, Rng& rng, bool training);

// Inverse of the min-max normalization.
double denormalize_speed(double d, const SpeedStats& stats);

struct FrameBudget {
  std::size_t t_mel = 0;
  std::size_t t_max_red = 0;
  bool clamped = false;  // the raw estimate fell below max_reduction
};

FrameBudget frames_from_speed(double d, std::size_t n_tokens, const SpeedStats& stats, int max_reduction);

// Mean of (d - d_hat)^2 over the batch.
Tensor speed_loss(std::span<const Tensor> d_hat, std::span<const double> d);

}  // namespace vara
