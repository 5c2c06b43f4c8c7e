#include "vara/model.hpp"

#include <algorithm>
#include <cmath>

#include "vara/errors.hpp"

namespace vara {

namespace {

double fan_in_std(std::size_t k, std::size_t cin) { return 1.0 / std::sqrt(static_cast<double>(k * cin)); }

ResBlockParams make_res_block(ParamStore& s, const std::string& prefix, std::size_t C, std::size_t mid,
                              double out_scale, int mid_dilation, Rng& rng) {
  ResBlockParams p;
  p.mid_dilation = mid_dilation;
  const std::size_t ks[4] = {1, 3, 3, 1};
  const std::size_t plan[5] = {C, mid, mid, mid, C};
  for (int i = 0; i < 4; ++i) {
    const double sd = fan_in_std(ks[i], plan[i]) * (i == 3 ? out_scale : 1.0);
    p.w[i] = s.normal(prefix + ".c" + std::to_string(i) + ".w", {ks[i], plan[i], plan[i + 1]}, sd, rng);
    p.b[i] = s.constant(prefix + ".c" + std::to_string(i) + ".b", {plan[i + 1]}, 0.0);
  }
  return p;
}

ConvHeadParams make_head(ParamStore& s, const std::string& prefix, std::size_t in, std::size_t mid, std::size_t out,
                         std::size_t k, double out_scale, Rng& rng) {
  ConvHeadParams p;
  const std::size_t plan[5] = {in, mid, mid, mid, out};
  for (int i = 0; i < 4; ++i) {
    const double sd = fan_in_std(k, plan[i]) * (i == 3 ? out_scale : 1.0);
    p.w[i] = s.normal(prefix + ".c" + std::to_string(i) + ".w", {k, plan[i], plan[i + 1]}, sd, rng);
    p.b[i] = s.constant(prefix + ".c" + std::to_string(i) + ".b", {plan[i + 1]}, 0.0);
  }
  return p;
}

void zero_fill(Tensor& t) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), 0.0);
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// Splits a [.., 2L] tensor into mean / log-std halves.
GaussianParams split_gaussian(const Tensor& t, std::size_t latent) {
  if (t.rank() == 1) return {slice(t, 0, latent), slice(t, latent, 2 * latent)};
  return {slice_cols(t, 0, latent), slice_cols(t, latent, 2 * latent)};
}

}  // namespace

Tensor res_block(const Tensor& x, const ResBlockParams& p) {
  Tensor h = conv1d(gelu(x), p.w[0], p.b[0]);
  h = conv1d(gelu(h), p.w[1], p.b[1], p.mid_dilation);
  h = conv1d(gelu(h), p.w[2], p.b[2], p.mid_dilation);
  h = conv1d(gelu(h), p.w[3], p.b[3]);
  return add(x, h);
}

Tensor conv_head(const Tensor& x, const ConvHeadParams& p) {
  Tensor h = x;
  for (int i = 0; i < 4; ++i) h = conv1d(gelu(h), p.w[i], p.b[i]);
  return h;
}

VaraModel VaraModel::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VaraModel m;
  m.cfg = cfg;
  Rng rng(seed);
  ParamStore& s = m.store;
  const std::size_t C = static_cast<std::size_t>(cfg.channels), mid = static_cast<std::size_t>(cfg.bottleneck);
  const std::size_t M = static_cast<std::size_t>(cfg.n_mels), Lz = static_cast<std::size_t>(cfg.latent_dim);
  const std::size_t D = static_cast<std::size_t>(cfg.text_dim), K = static_cast<std::size_t>(cfg.head_kernel);
  const std::size_t kpre = static_cast<std::size_t>(cfg.precon_kernel);
  const int n_blocks = cfg.n_latent_layers() - 1;
  const double res_scale = 1.0 / std::sqrt(static_cast<double>(n_blocks));

  m.text = make_text_encoder(s, cfg, rng);

  m.precon_w = s.normal("bu.precon.w", {kpre, M, C}, fan_in_std(kpre, M), rng);
  m.precon_b = s.constant("bu.precon.b", {C}, 0.0);
  for (int st = 0; st < cfg.n_stacks; ++st) {
    std::vector<ResBlockParams> blocks;
    for (int b = 0; b < cfg.blocks[static_cast<std::size_t>(st)]; ++b)
      blocks.push_back(make_res_block(s, "bu.s" + std::to_string(st) + ".b" + std::to_string(b), C, mid, res_scale, 1,
                                      rng));
    m.bottom.push_back(std::move(blocks));
  }

  m.top_p_w = s.normal("td.top.prior.w", {D, 2 * Lz}, 0.1 * fan_in_std(1, D), rng);
  m.top_p_b = s.constant("td.top.prior.b", {2 * Lz}, 0.0);
  m.top_q_w = s.normal("post.top.w", {C + D, 2 * Lz}, fan_in_std(1, C + D), rng);
  m.top_q_b = s.constant("post.top.b", {2 * Lz}, 0.0);
  if (contains(cfg.collapsed_init_layers, 0)) {
    zero_fill(m.top_q_w);
  }
  m.z0_w = s.normal("td.z0.w", {Lz, C}, fan_in_std(1, Lz), rng);
  m.z0_b = s.constant("td.z0.b", {C}, 0.0);
  const std::size_t G = cfg.g_list.size();
  m.ctx_w = s.normal("td.ctx.w", {G * D, C}, fan_in_std(1, G * D), rng);
  m.ctx_b = s.constant("td.ctx.b", {C}, 0.0);

  int layer = 1;
  for (int g = 0; g < cfg.n_stacks; ++g) {
    GroupParams gp;
    gp.stack = cfg.n_stacks - 1 - g;
    const std::string gname = "g" + std::to_string(g);
    gp.attn = make_attention(s, "td." + gname + ".attn", Lz, D, static_cast<std::size_t>(cfg.attn_dim), C, cfg.heads,
                             rng);
    for (int b = 0; b < cfg.blocks[static_cast<std::size_t>(gp.stack)]; ++b, ++layer) {
      const std::string bname = gname + ".b" + std::to_string(b);
      TopDownBlockParams bp;
      bp.layer = layer;
      bp.pinned = contains(cfg.pinned_layers, layer);
      bp.prior = make_head(s, "td." + bname + ".prior", C, mid, 2 * Lz + C, K, 0.1, rng);
      bp.posterior = make_head(s, "post." + bname, 2 * C, mid, 2 * Lz, K, 0.1, rng);
      bp.z_w = s.normal("td." + bname + ".z.w", {1, Lz, C}, fan_in_std(1, Lz) * res_scale, rng);
      bp.z_b = s.constant("td." + bname + ".z.b", {C}, 0.0);
      if (contains(cfg.collapsed_init_layers, layer)) {
        zero_fill(bp.posterior.w[3]);
        zero_fill(bp.z_w);
      }
      bp.res = make_res_block(s, "td." + bname + ".res", C, mid, res_scale, 2, rng);
      gp.blocks.push_back(std::move(bp));
    }
    m.groups.push_back(std::move(gp));
  }

  m.out_w = s.normal("td.out.w", {1, C, M}, 0.1 * fan_in_std(1, C), rng);
  m.out_b = s.constant("td.out.b", {M}, 0.0);
  const std::size_t speed_in = cfg.separate_speed ? D : Lz;
  m.speed = make_speed_predictor(s, speed_in, static_cast<std::size_t>(cfg.speed_hidden), cfg.speed_dropout, rng);
  return m;
}

VaraModel VaraModel::clone() const {
  VaraModel c = create(cfg, 0);
  c.store.copy_values_from(store);
  c.speed_stats = speed_stats;
  return c;
}

std::vector<std::size_t> scale_lengths(std::size_t t_mel, const ModelConfig& cfg) {
  std::vector<std::size_t> out;
  std::size_t cum = 1;
  for (int r : cfg.reductions) {
    cum *= static_cast<std::size_t>(r);
    out.push_back((t_mel + cum - 1) / cum);
  }
  return out;
}

BottomUp bottom_up(const Tensor& mel, const VaraModel& m) {
  const auto& cfg = m.cfg;
  if (mel.rank() != 2 || mel.cols() != static_cast<std::size_t>(cfg.n_mels))
    throw InvalidInput("bottom_up: expected T x " + std::to_string(cfg.n_mels) + " mel, got " +
                       shape_string(mel.shape()));
  if (mel.rows() < static_cast<std::size_t>(cfg.max_reduction()))
    throw InvalidInput("bottom_up: " + std::to_string(mel.rows()) + " frames is below the minimum of " +
                       std::to_string(cfg.max_reduction()) + " required by the reductions");
  BottomUp out;
  Tensor h = conv1d(log(mel), m.precon_w, m.precon_b);
  for (int s = 0; s < cfg.n_stacks; ++s) {
    for (const auto& b : m.bottom[static_cast<std::size_t>(s)]) h = res_block(h, b);
    h = average_pool_time(h, cfg.reductions[static_cast<std::size_t>(s)]);
    out.acts.push_back(h);
  }
  out.x0 = mean_rows(h);
  return out;
}

GaussianParams top_prior(const Tensor& t0, const VaraModel& m) {
  return split_gaussian(linear(t0, m.top_p_w, m.top_p_b), static_cast<std::size_t>(m.cfg.latent_dim));
}

TopDistributions top_group_distributions(const Tensor& x0, const Tensor& t0, const VaraModel& m) {
  const std::size_t Lz = static_cast<std::size_t>(m.cfg.latent_dim);
  Tensor prior = linear(t0, m.top_p_w, m.top_p_b);
  GaussianParams p = split_gaussian(prior, Lz);
  if (contains(m.cfg.pinned_layers, 0)) return {p, p};
  Tensor delta = linear(concat({x0, t0}), m.top_q_w, m.top_q_b);
  return {split_gaussian(add(prior, delta), Lz), p};
}

namespace {

Tensor sample_latent(const GaussianParams& g, Mode mode, Rng& rng) {
  return mode == Mode::kEval ? g.mean : reparameterize(g, rng);
}

}  // namespace

GroupResult top_down_group(TopDownState& st, const std::optional<Tensor>& activation, std::size_t length,
                           const TextEncoding& text, std::size_t group, Mode mode, Rng& rng, const VaraModel& m) {
  const bool infer = mode == Mode::kInfer;
  if (infer && activation) throw InvalidArgument("top_down_group: inference must not receive bottom-up activations");
  if (!infer && !activation) throw InvalidArgument("top_down_group: training requires bottom-up activations");
  if (activation && activation->rows() != length)
    throw InvalidArgument("top_down_group: activation has " + std::to_string(activation->rows()) + " rows, expected " +
                          std::to_string(length));
  const auto& gp = m.groups.at(group);
  const std::size_t Lz = static_cast<std::size_t>(m.cfg.latent_dim), C = static_cast<std::size_t>(m.cfg.channels);
  const std::size_t t_prev = st.state.rows();
  if (length < t_prev) throw InvalidArgument("top_down_group: groups must not shrink in time");
  const int factor = static_cast<int>((length + t_prev - 1) / t_prev);

  Tensor state_up = nearest_upsample_time(st.state, factor, length);
  Tensor query = nearest_upsample_time(st.query, factor, length);
  Tensor a_prev = refine_prev_alignment(st.a_prev, length, gp.attn.refine_kernel);
  MultiHeadOutput att = residual_multi_head(query, text.kv, text.kv, a_prev, gp.attn, m.cfg.a_prev_gain);

  GroupResult out;
  Tensor state = state_up;
  for (std::size_t b = 0; b < gp.blocks.size(); ++b) {
    const auto& bp = gp.blocks[b];
    Tensor bias = b == 0 ? add(state_up, att.context) : state;
    Tensor prior_out = conv_head(bias, bp.prior);
    GaussianParams p = split_gaussian(prior_out, Lz);
    Tensor feat = slice_cols(prior_out, 2 * Lz, 2 * Lz + C);

    LatentLayer layer;
    layer.length = length;
    layer.group = static_cast<int>(group);
    layer.p = p;
    if (infer) {
      layer.q = p;
      layer.z = reparameterize(p, rng);
      layer.kl = Tensor::scalar(0.0);
    } else {
      if (bp.pinned) {
        layer.q = p;
      } else {
        Tensor delta = conv_head(concat_cols({*activation, bias}), bp.posterior);
        Tensor qparams = add(slice_cols(prior_out, 0, 2 * Lz), delta);
        layer.q = split_gaussian(qparams, Lz);
      }
      layer.z = sample_latent(layer.q, mode, rng);
      layer.kl = sum(gaussian_kl(layer.q, layer.p));
    }
    state = res_block(add(add(bias, feat), conv1d(layer.z, bp.z_w, bp.z_b)), bp.res);
    st.query = layer.z;
    out.layers.push_back(std::move(layer));
  }
  st.state = state;
  st.a_prev = att.alignment;
  out.alignment = att.alignment;
  return out;
}

Tensor decode_head(const Tensor& state, std::size_t t_mel, const VaraModel& m) {
  Tensor s = state;
  if (s.rows() < t_mel) {
    const int factor = static_cast<int>((t_mel + s.rows() - 1) / s.rows());
    s = nearest_upsample_time(s, factor, t_mel);
  } else if (s.rows() > t_mel) {
    s = take_rows(s, t_mel);
  }
  return exp(conv1d(s, m.out_w, m.out_b));
}

namespace {

// Shared by both entry points once z0 and the frame count are known.
void run_top_down(ForwardResult& r, const Tensor& z0, const BottomUp* bu, Mode mode, Rng& rng, const VaraModel& m) {
  const auto& cfg = m.cfg;
  const auto lengths = scale_lengths(r.t_mel, cfg);
  const std::size_t t_top = lengths.back();
  InitialContext init = initial_context(r.text.kv, t_top, cfg.g_list, m.ctx_w, m.ctx_b);
  r.alignments.push_back(init.alignment);

  TopDownState st;
  st.state = add(broadcast_rows(linear(z0, m.z0_w, m.z0_b), t_top), init.context);
  st.query = broadcast_rows(z0, t_top);
  st.a_prev = init.alignment;
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    const std::size_t stack = static_cast<std::size_t>(m.groups[g].stack);
    std::optional<Tensor> act;
    if (bu) act = bu->acts[stack];
    GroupResult gr = top_down_group(st, act, lengths[stack], r.text, g, mode, rng, m);
    for (auto& l : gr.layers) r.layers.push_back(std::move(l));
    r.alignments.push_back(gr.alignment);
  }
  r.mel_hat = decode_head(st.state, r.t_mel, m);
}

Tensor speed_input(const Tensor& z0, const TextEncoding& text, const VaraModel& m) {
  return m.cfg.separate_speed ? text.pooled.detach() : z0;
}

}  // namespace

ForwardResult forward_train(std::span<const int> tokens, std::optional<int> speaker, const Tensor& mel,
                            const VaraModel& m, Rng& rng, Mode mode) {
  if (mode == Mode::kInfer) throw InvalidArgument("forward_train: use forward_infer for prior sampling");
  ForwardResult r;
  r.t_mel = mel.rows();
  r.text = encode_text(tokens, speaker, m.text);
  // Dropout draws come from a side stream so latent draws line up with inference.
  Rng side = mode == Mode::kTrain ? rng.fork() : Rng(0);
  BottomUp bu = bottom_up(mel, m);

  TopDistributions top = top_group_distributions(bu.x0, r.text.pooled, m);
  LatentLayer l0;
  l0.q = top.q;
  l0.p = top.p;
  l0.z = sample_latent(top.q, mode, rng);
  l0.kl = sum(gaussian_kl(top.q, top.p));
  l0.length = 1;
  const Tensor z0 = l0.z;
  r.layers.push_back(std::move(l0));
  r.speed = predict_speed(speed_input(z0, r.text, m), m.speed, side, mode == Mode::kTrain);

  run_top_down(r, z0, &bu, mode, rng, m);
  return r;
}

ForwardResult forward_infer(const TextEncoding& text, const VaraModel& m, Rng& rng,
                            std::optional<std::size_t> override_frames) {
  ForwardResult r;
  r.text = text;
  Rng side = rng.fork();
  GaussianParams p0 = top_prior(text.pooled, m);
  LatentLayer l0;
  l0.q = p0;
  l0.p = p0;
  l0.z = reparameterize(p0, rng);
  l0.kl = Tensor::scalar(0.0);
  l0.length = 1;
  const Tensor z0 = l0.z;
  r.layers.push_back(std::move(l0));
  r.speed = predict_speed(speed_input(z0, text, m), m.speed, side, false);

  if (override_frames) {
    if (*override_frames < 1) throw InvalidArgument("forward_infer: frame override must be >= 1");
    r.t_mel = *override_frames;
  } else {
    FrameBudget fb = frames_from_speed(r.speed.item(), text.kv.rows(), m.speed_stats, m.cfg.max_reduction());
    r.t_mel = fb.t_mel;
    r.clamped = fb.clamped;
  }
  run_top_down(r, z0, nullptr, Mode::kInfer, rng, m);
  return r;
}

}  // namespace vara
