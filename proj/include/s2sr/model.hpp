#pragma once

// The restoration network: shallow conv features, a stack of residual SwinV2
// transformer blocks over window-padded tokens, reconstruction convs with
// pixel-shuffle (static or dynamic multi-factor) upsampling, and an optional
// bicubic skip that carries the basic upscaled image.
//
// count_params/count_macs provide the analytic accounting; MACs cover conv
// and linear multiplies (attention score/value products and normalizations
// are excluded, matching how restoration papers report mult-adds).

#include <json.hpp>

#include "s2sr/attention.hpp"
#include "s2sr/bicubic.hpp"

namespace s2sr {

enum class Upsampler { pixelshuffle, dynamic, none };

inline std::string upsampler_name(Upsampler u) {
  switch (u) {
    case Upsampler::pixelshuffle: return "pixelshuffle";
    case Upsampler::dynamic: return "dynamic";
    default: return "none";
  }
}

inline Upsampler upsampler_from_name(const std::string& s) {
  if (s == "pixelshuffle") return Upsampler::pixelshuffle;
  if (s == "dynamic") return Upsampler::dynamic;
  if (s == "none") return Upsampler::none;
  throw UsageError("unknown upsampler: " + s);
}

struct ModelConfig {
  int64_t rstb_count = 6;
  int64_t layers_per_rstb = 6;
  int64_t window = 8;
  int64_t channels = 180;
  int64_t heads = 6;
  double mlp_ratio = 2.0;
  int64_t scale = 2;
  Upsampler upsampler = Upsampler::pixelshuffle;
  bool bicubic_skip = true;
  int64_t in_channels = 3;

  static ModelConfig base() { return ModelConfig{}; }

  static ModelConfig lightweight() {
    ModelConfig c;
    c.rstb_count = 4;
    c.channels = 60;
    return c;
  }

  // JPEG artifact removal: same-resolution restoration.
  static ModelConfig color_dejpeg(int64_t ch = 180) {
    ModelConfig c;
    c.channels = ch;
    c.scale = 1;
    c.upsampler = Upsampler::none;
    c.bicubic_skip = false;
    return c;
  }

  void validate() const {
    if (rstb_count < 1 || layers_per_rstb < 1) throw UsageError("block counts must be >= 1");
    if (window < 2 || window % 2 != 0) throw UsageError("window must be even and >= 2");
    if (channels % heads != 0) throw UsageError("channels must be divisible by heads");
    if (scale < 1 || scale > 4) throw UsageError("scale must be in {1,2,3,4}");
    if (scale == 1 && upsampler != Upsampler::none)
      throw UsageError("scale 1 requires upsampler \"none\"");
    if (scale > 1 && upsampler == Upsampler::none)
      throw UsageError("upsampler \"none\" requires scale 1");
    if (in_channels != 1 && in_channels != 3) throw UsageError("in_channels must be 1 or 3");
    if (mlp_ratio <= 0) throw UsageError("mlp_ratio must be positive");
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"rstb_count", c.rstb_count},
                        {"layers_per_rstb", c.layers_per_rstb},
                        {"window", c.window},
                        {"channels", c.channels},
                        {"heads", c.heads},
                        {"mlp_ratio", c.mlp_ratio},
                        {"scale", c.scale},
                        {"upsampler", upsampler_name(c.upsampler)},
                        {"bicubic_skip", c.bicubic_skip},
                        {"in_channels", c.in_channels}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"rstb_count", "layers_per_rstb", "window",       "channels",
                                "heads",      "mlp_ratio",       "scale",        "upsampler",
                                "bicubic_skip", "in_channels"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw DataError("unknown config key: " + it.key());
  }
  ModelConfig c;
  c.rstb_count = j.at("rstb_count").get<int64_t>();
  c.layers_per_rstb = j.at("layers_per_rstb").get<int64_t>();
  c.window = j.at("window").get<int64_t>();
  c.channels = j.at("channels").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.scale = j.at("scale").get<int64_t>();
  c.upsampler = upsampler_from_name(j.at("upsampler").get<std::string>());
  c.bicubic_skip = j.at("bicubic_skip").get<bool>();
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Pixel shuffle: [B, r^2*C, H, W] -> [B, C, rH, rW] with
// out[b,c,r*i+a,r*j+b'] = in[b, c*r^2 + a*r + b', i, j]. A bijection.

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int64_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle expects [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % (r * r) != 0) throw ShapeError("pixel_shuffle channels not divisible by r^2");
  int64_t Co = C / (r * r);
  auto v = reshape(x, {B, Co, r, r, H, W});
  auto p = permute(v, {0, 1, 4, 2, 5, 3});
  return reshape(p, {B, Co, H * r, W * r});
}

template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int64_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_unshuffle expects [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % r != 0 || W % r != 0) throw ShapeError("pixel_unshuffle dims not divisible by r");
  auto v = reshape(x, {B, C, H / r, r, W / r, r});
  auto p = permute(v, {0, 1, 3, 5, 2, 4});
  return reshape(p, {B, C * r * r, H / r, W / r});
}

// ---------------------------------------------------------------------------

template <class T>
struct Conv2dLayer {
  Tensor<T> w, b;

  Conv2dLayer() = default;
  Conv2dLayer(int64_t cin, int64_t cout, Rng& rng) {
    std::vector<T> wv(size_t(cout * cin * 9));
    double bound = 1.0 / std::sqrt(double(cin * 9));
    for (auto& v : wv) v = T(rng.uniform(-bound, bound));
    w = Tensor<T>::from({cout, cin, 3, 3}, std::move(wv));
    w.set_requires_grad(true);
    b = Tensor<T>::zeros({cout});
    b.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, 1); }

  void named_params(const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

// Residual SwinV2 transformer block: layers_per_rstb S2TLs with alternating
// shift (starting unshifted), one 3x3 conv, wrapped in a residual add.
template <class T>
struct RSTB {
  std::vector<S2TL<T>> layers;
  Conv2dLayer<T> conv;

  RSTB() = default;
  RSTB(const ModelConfig& cfg, Rng& rng) : conv(cfg.channels, cfg.channels, rng) {
    for (int64_t i = 0; i < cfg.layers_per_rstb; ++i)
      layers.emplace_back(cfg.channels, cfg.heads, cfg.window,
                          i % 2 == 0 ? 0 : cfg.window / 2, cfg.mlp_ratio, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, int64_t H, int64_t W) const {
    int64_t B = x.dim(0), C = x.dim(2);
    auto y = x;
    for (const auto& layer : layers) y = layer.forward(y, H, W);
    auto img = permute(reshape(y, {B, H, W, C}), {0, 3, 1, 2});
    auto c = conv.forward(img);
    auto tokens = reshape(permute(c, {0, 2, 3, 1}), {B, H * W, C});
    return add(x, tokens);
  }

  void named_params(const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].named_params(prefix + ".layers." + std::to_string(i), out);
    conv.named_params(prefix + ".conv", out);
  }
};

template <class T>
struct Swin2SR {
  ModelConfig cfg;
  Conv2dLayer<T> conv_first;
  std::vector<RSTB<T>> blocks;
  Conv2dLayer<T> conv_body;
  // reconstruction (presence depends on config)
  Conv2dLayer<T> conv_last;                  // scale-1 path
  Conv2dLayer<T> up_stage1, up_stage2;       // pixelshuffle path
  Conv2dLayer<T> up_final;
  Conv2dLayer<T> dyn_trunk;                  // dynamic path
  std::vector<Conv2dLayer<T>> dyn_head, dyn_final;  // r = 2,3,4

  explicit Swin2SR(const ModelConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    int64_t C = cfg.channels, in = cfg.in_channels;
    conv_first = Conv2dLayer<T>(in, C, rng);
    for (int64_t i = 0; i < cfg.rstb_count; ++i) blocks.emplace_back(cfg, rng);
    conv_body = Conv2dLayer<T>(C, C, rng);
    switch (cfg.upsampler) {
      case Upsampler::none:
        conv_last = Conv2dLayer<T>(C, in, rng);
        break;
      case Upsampler::pixelshuffle:
        if (cfg.scale == 4) {
          up_stage1 = Conv2dLayer<T>(C, 4 * C, rng);
          up_stage2 = Conv2dLayer<T>(C, 4 * in, rng);
        } else {
          up_stage1 = Conv2dLayer<T>(C, cfg.scale * cfg.scale * in, rng);
        }
        up_final = Conv2dLayer<T>(in, in, rng);
        break;
      case Upsampler::dynamic:
        dyn_trunk = Conv2dLayer<T>(C, C, rng);
        for (int64_t r = 2; r <= 4; ++r) {
          dyn_head.emplace_back(C, r * r * in, rng);
          dyn_final.emplace_back(in, in, rng);
        }
        break;
    }
  }

  // Per-channel dataset mean subtracted before the convs (DIV2K statistic).
  Tensor<T> channel_mean() const {
    if (cfg.in_channels == 3)
      return Tensor<T>::from({1, 3, 1, 1}, {T(0.4488), T(0.4371), T(0.4040)});
    return Tensor<T>::zeros({1, 1, 1, 1});
  }

  // Shallow conv, then the padded transformer body with global residual.
  Tensor<T> features(const Tensor<T>& lq_centered) const {
    auto f0 = conv_first.forward(lq_centered);
    int64_t B = f0.dim(0), C = f0.dim(1), H = f0.dim(2), W = f0.dim(3);
    int64_t Hp = ceil_to(H, cfg.window), Wp = ceil_to(W, cfg.window);
    auto padded = (Hp == H && Wp == W) ? f0 : reflect_pad_hw(f0, 0, Hp - H, 0, Wp - W);
    auto tokens = reshape(permute(padded, {0, 2, 3, 1}), {B, Hp * Wp, C});
    for (const auto& blk : blocks) tokens = blk.forward(tokens, Hp, Wp);
    auto img = permute(reshape(tokens, {B, Hp, Wp, C}), {0, 3, 1, 2});
    auto body = conv_body.forward(img);
    if (Hp != H || Wp != W) body = crop_hw(body, 0, 0, H, W);
    return add(body, f0);
  }

  int64_t resolve_scale(int64_t r) const {
    if (cfg.upsampler == Upsampler::dynamic) {
      if (r < 2 || r > 4) throw UsageError("dynamic upsampler needs r in {2,3,4}");
      return r;
    }
    if (r != 0 && r != cfg.scale)
      throw UsageError("model is fixed at scale " + std::to_string(cfg.scale));
    return cfg.scale;
  }

  // Network output without the bicubic skip branch.
  Tensor<T> forward_residual(const Tensor<T>& lq, int64_t r = 0) const {
    if (lq.rank() != 4 || lq.dim(1) != cfg.in_channels)
      throw ShapeError("forward expects [B," + std::to_string(cfg.in_channels) + ",H,W]");
    int64_t scale = resolve_scale(r);
    auto feat = features(sub(lq, channel_mean()));
    switch (cfg.upsampler) {
      case Upsampler::none:
        return conv_last.forward(feat);
      case Upsampler::pixelshuffle:
        if (cfg.scale == 4) {
          auto s1 = pixel_shuffle(up_stage1.forward(feat), 2);
          auto s2 = pixel_shuffle(up_stage2.forward(s1), 2);
          return up_final.forward(s2);
        } else {
          auto s1 = pixel_shuffle(up_stage1.forward(feat), cfg.scale);
          return up_final.forward(s1);
        }
      case Upsampler::dynamic: {
        auto trunk = dyn_trunk.forward(feat);
        auto head = pixel_shuffle(dyn_head[size_t(scale - 2)].forward(trunk), scale);
        return dyn_final[size_t(scale - 2)].forward(head);
      }
    }
    throw UsageError("unreachable upsampler kind");
  }

  // r is only consulted for the dynamic upsampler; other paths use the
  // configured scale.
  Tensor<T> forward(const Tensor<T>& lq, int64_t r = 0) const {
    auto out = forward_residual(lq, r);
    if (cfg.bicubic_skip) {
      int64_t scale = resolve_scale(r);
      auto skip =
          bicubic_resize_nchw(lq, lq.dim(2) * scale, lq.dim(3) * scale, /*antialias=*/false);
      out = add(out, skip);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    conv_first.named_params("conv_first", out);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].named_params("blocks." + std::to_string(i), out);
    conv_body.named_params("conv_body", out);
    switch (cfg.upsampler) {
      case Upsampler::none:
        conv_last.named_params("conv_last", out);
        break;
      case Upsampler::pixelshuffle:
        up_stage1.named_params("up.stage1", out);
        if (cfg.scale == 4) up_stage2.named_params("up.stage2", out);
        up_final.named_params("up.final", out);
        break;
      case Upsampler::dynamic:
        dyn_trunk.named_params("dyn.trunk", out);
        for (int64_t r = 2; r <= 4; ++r) {
          dyn_head[size_t(r - 2)].named_params("dyn.head" + std::to_string(r), out);
          dyn_final[size_t(r - 2)].named_params("dyn.final" + std::to_string(r), out);
        }
        break;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Analytic accounting.

namespace detail {

inline int64_t conv_params(int64_t cin, int64_t cout) { return cin * cout * 9 + cout; }

inline int64_t s2tl_params(int64_t C, int64_t heads, double ratio) {
  int64_t hidden = int64_t(ratio * double(C));
  int64_t attn = 4 * (C * C + C) + heads;                                  // projections + tau
  int64_t cpb = (2 * kCpbHidden + kCpbHidden) + (kCpbHidden * heads + heads);
  int64_t mlp = C * hidden + hidden + hidden * C + C;
  int64_t norms = 4 * C;
  return attn + cpb + mlp + norms;
}

inline int64_t conv_macs(int64_t cin, int64_t cout, int64_t h, int64_t w) {
  return 9 * cin * cout * h * w;
}

}  // namespace detail

inline int64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  int64_t C = cfg.channels, in = cfg.in_channels;
  int64_t total = detail::conv_params(in, C);
  total += cfg.rstb_count * (cfg.layers_per_rstb * detail::s2tl_params(C, cfg.heads, cfg.mlp_ratio) +
                             detail::conv_params(C, C));
  total += detail::conv_params(C, C);
  switch (cfg.upsampler) {
    case Upsampler::none:
      total += detail::conv_params(C, in);
      break;
    case Upsampler::pixelshuffle:
      if (cfg.scale == 4)
        total += detail::conv_params(C, 4 * C) + detail::conv_params(C, 4 * in);
      else
        total += detail::conv_params(C, cfg.scale * cfg.scale * in);
      total += detail::conv_params(in, in);
      break;
    case Upsampler::dynamic:
      total += detail::conv_params(C, C);
      for (int64_t r = 2; r <= 4; ++r)
        total += detail::conv_params(C, r * r * in) + detail::conv_params(in, in);
      break;
  }
  return total;
}

// Multiply-accumulates of one forward at input H x W (conv + linear scope;
// for the dynamic upsampler only the executed head counts).
inline int64_t count_macs(const ModelConfig& cfg, int64_t H, int64_t W, int64_t dynamic_r = 0) {
  cfg.validate();
  int64_t C = cfg.channels, in = cfg.in_channels;
  int64_t scale = cfg.scale;
  if (cfg.upsampler == Upsampler::dynamic) {
    if (dynamic_r < 2 || dynamic_r > 4) throw UsageError("dynamic MACs need r in {2,3,4}");
    scale = dynamic_r;
  }
  int64_t Hp = ceil_to(H, cfg.window), Wp = ceil_to(W, cfg.window);
  int64_t tokens = Hp * Wp;
  int64_t hidden = int64_t(cfg.mlp_ratio * double(C));
  int64_t R = 2 * cfg.window - 1;

  int64_t s2tl = 4 * tokens * C * C                       // q,k,v,o projections
                 + 2 * tokens * C * hidden                // mlp
                 + R * R * (2 * kCpbHidden + kCpbHidden * cfg.heads);  // position-bias mlp
  int64_t total = detail::conv_macs(in, C, H, W);
  total += cfg.rstb_count * (cfg.layers_per_rstb * s2tl + detail::conv_macs(C, C, Hp, Wp));
  total += detail::conv_macs(C, C, Hp, Wp);
  switch (cfg.upsampler) {
    case Upsampler::none:
      total += detail::conv_macs(C, in, H, W);
      break;
    case Upsampler::pixelshuffle:
      if (cfg.scale == 4) {
        total += detail::conv_macs(C, 4 * C, H, W);
        total += detail::conv_macs(C, 4 * in, 2 * H, 2 * W);
      } else {
        total += detail::conv_macs(C, scale * scale * in, H, W);
      }
      total += detail::conv_macs(in, in, scale * H, scale * W);
      break;
    case Upsampler::dynamic:
      total += detail::conv_macs(C, C, H, W);
      total += detail::conv_macs(C, scale * scale * in, H, W);
      total += detail::conv_macs(in, in, scale * H, scale * W);
      break;
  }
  return total;
}

}  // namespace s2sr
