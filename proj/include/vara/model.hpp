#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vara/attention.hpp"
#include "vara/config.hpp"
#include "vara/data.hpp"
#include "vara/numerics.hpp"
#include "vara/params.hpp"
#include "vara/speed.hpp"
#include "vara/text_encoder.hpp"

namespace vara {

// k1 -> k3 -> k3 -> k1 bottleneck with GELU before each conv and a skip connection.
struct ResBlockParams {
  Tensor w[4], b[4];
  int mid_dilation = 1;
};
Tensor res_block(const Tensor& x, const ResBlockParams& p);

// Four convs of the same odd kernel with GELU before each.
struct ConvHeadParams {
  Tensor w[4], b[4];
};
Tensor conv_head(const Tensor& x, const ConvHeadParams& p);

struct TopDownBlockParams {
  ConvHeadParams prior;      // bias -> [p_mean, p_log_std, features]
  ConvHeadParams posterior;  // [activation, bias] -> correction to the prior parameters
  Tensor z_w, z_b;           // k=1 latent -> channels
  ResBlockParams res;
  int layer = 0;             // latent layer index (z0 is 0)
  bool pinned = false;
};

struct GroupParams {
  AttentionParams attn;
  std::vector<TopDownBlockParams> blocks;
  int stack = 0;  // the bottom-up stack this group mirrors
};

// Parameter names starting with "bu." belong to the bottom-up encoder; the
// posterior heads live under "post." prefixes. Neither is read at inference.
class VaraModel {
 public:
  static VaraModel create(const ModelConfig& cfg, std::uint64_t seed);
  VaraModel(VaraModel&&) = default;
  VaraModel& operator=(VaraModel&&) = default;
  VaraModel(const VaraModel&) = delete;
  VaraModel& operator=(const VaraModel&) = delete;
  // Independent copy of every parameter value.
  VaraModel clone() const;

  ModelConfig cfg;
  SpeedStats speed_stats;
  ParamStore store;

  TextEncoderParams text;
  Tensor precon_w, precon_b;
  std::vector<std::vector<ResBlockParams>> bottom;  // [stack][block]
  Tensor top_p_w, top_p_b;  // t0 -> prior of z0
  Tensor top_q_w, top_q_b;  // [x0, t0] -> posterior correction for z0
  Tensor z0_w, z0_b;        // z0 -> channels
  Tensor ctx_w, ctx_b;      // concatenated initial contexts -> channels
  std::vector<GroupParams> groups;
  Tensor out_w, out_b;      // k=1 channels -> mel bands
  SpeedPredictorParams speed;

 private:
  VaraModel() = default;
};

// kTrain samples from the posterior, kEval takes posterior means and never
// touches the generator, kInfer samples from the prior without any mel input.
enum class Mode { kTrain, kEval, kInfer };

struct LatentLayer {
  Tensor z;
  GaussianParams q, p;
  Tensor kl;  // raw sum over time and channels (zero at inference)
  std::size_t length = 0;
  int group = -1;  // -1 for z0
};

struct BottomUp {
  std::vector<Tensor> acts;  // per stack, ceil(T / cumulative reduction) rows
  Tensor x0;                 // temporal mean of the last activation
};

BottomUp bottom_up(const Tensor& mel, const VaraModel& m);

struct TopDistributions {
  GaussianParams q, p;
};
TopDistributions top_group_distributions(const Tensor& x0, const Tensor& t0, const VaraModel& m);
GaussianParams top_prior(const Tensor& t0, const VaraModel& m);

struct TopDownState {
  Tensor state;    // running activation at the previous group's scale
  Tensor query;    // last latent of the previous group (queries the text)
  Tensor a_prev;   // alignment handed down from the previous attention
};

struct GroupResult {
  std::vector<LatentLayer> layers;
  Tensor alignment;
};

// One coarse-to-fine group. `activation` must be present for kTrain/kEval and
// absent for kInfer.
GroupResult top_down_group(TopDownState& st, const std::optional<Tensor>& activation, std::size_t length,
                           const TextEncoding& text, std::size_t group, Mode mode, Rng& rng, const VaraModel& m);

Tensor decode_head(const Tensor& state, std::size_t t_mel, const VaraModel& m);

struct ForwardResult {
  Tensor mel_hat;                    // T x M, strictly positive
  std::vector<LatentLayer> layers;   // z0 first, then coarse to fine
  std::vector<Tensor> alignments;    // initial, then one per group
  Tensor speed;                      // predicted d, one element
  TextEncoding text;
  std::size_t t_mel = 0;
  bool clamped = false;
};

// Lengths of every scale for T mel frames: entry s is ceil(T / prod(r_0..r_s)).
std::vector<std::size_t> scale_lengths(std::size_t t_mel, const ModelConfig& cfg);

ForwardResult forward_train(std::span<const int> tokens, std::optional<int> speaker, const Tensor& mel,
                            const VaraModel& m, Rng& rng, Mode mode = Mode::kTrain);
ForwardResult forward_infer(const TextEncoding& text, const VaraModel& m, Rng& rng,
                            std::optional<std::size_t> override_frames = std::nullopt);

}  // namespace vara
