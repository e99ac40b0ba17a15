#pragma once

// Scaled cosine window attention and the SwinV2 transformer layer (S2TL):
// attention logits are pairwise cosine similarities scaled by a learnable
// per-head 1/tau, plus a continuous relative position bias produced by a
// small MLP over log-spaced displacements. Residual layout is post-norm.

#include "s2sr/window.hpp"

namespace s2sr {

constexpr int64_t kCpbHidden = 512;
inline double max_log_inv_tau() { return std::log(100.0); }

// Multiplies of the closed-form complexity expressions: windowed attention
// costs 4hwC^2 + 2M^2hwC, global attention 4hwC^2 + 2(hw)^2C.
inline int64_t attention_flops(int64_t h, int64_t w, int64_t C, int64_t M) {
  if ((h * w) % (M * M) != 0) throw UsageError("attention_flops: h*w must be divisible by M^2");
  return 4 * h * w * C * C + 2 * M * M * h * w * C;
}
inline int64_t msa_flops(int64_t h, int64_t w, int64_t C) {
  return 4 * h * w * C * C + 2 * (h * w) * (h * w) * C;
}

// L2-normalize the last axis with a norm floor so zero rows stay finite.
// Fused forward/backward: gx = s*(gy - (gy.y) y) per row, gx = gy/floor on
// floored rows.
template <class T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T floor = T(1e-12)) {
  int64_t d = x.dim(-1);
  int64_t rows = x.numel() / d;
  std::vector<T> out(x.data().size());
  std::vector<T> inv_n(static_cast<size_t>(rows));
  std::vector<uint8_t> floored(static_cast<size_t>(rows));
  const T* px = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T n2 = 0;
    for (int64_t j = 0; j < d; ++j) n2 += row[j] * row[j];
    T n = std::sqrt(n2);
    bool fl = n <= floor;
    T s = T(1) / (fl ? floor : n);
    inv_n[size_t(r)] = s;
    floored[size_t(r)] = fl ? 1 : 0;
    T* orow = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = row[j] * s;
  }
  Tensor<T> res(x.shape(), std::move(out));
  if (!tracing<T>({&x})) return res;
  res.set_requires_grad(true);
  auto xn = x.node();
  auto on = res.node();
  Tape<T>::current()->record(on, [xn, on, inv_n = std::move(inv_n),
                                  floored = std::move(floored), rows, d]() {
    xn->ensure_grad();
    const T* gy = on->grad.data();
    const T* y = on->data.data();
    T* gx = xn->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* gyr = gy + r * d;
      const T* yr = y + r * d;
      T* gxr = gx + r * d;
      T s = inv_n[size_t(r)];
      if (floored[size_t(r)]) {
        for (int64_t j = 0; j < d; ++j) gxr[j] += gyr[j] * s;
      } else {
        T dot = 0;
        for (int64_t j = 0; j < d; ++j) dot += gyr[j] * yr[j];
        for (int64_t j = 0; j < d; ++j) gxr[j] += s * (gyr[j] - dot * yr[j]);
      }
    }
  });
  return res;
}

// Fused attention logit assembly: cos*(1/tau) + S + mask, with 1/tau =
// exp(clamp(log_inv_tau, max=ln 100)) per head. Keeps the [nWB,heads,N,N]
// intermediates to one tensor instead of a chain of broadcast ops.
template <class T>
Tensor<T> attention_logits(const Tensor<T>& cos_sim, const Tensor<T>& log_inv_tau,
                           const Tensor<T>& S, const Tensor<T>& mask, int64_t batch) {
  int64_t nWB = cos_sim.dim(0), heads = cos_sim.dim(1), N = cos_sim.dim(2);
  if (cos_sim.rank() != 4 || cos_sim.dim(3) != N)
    throw ShapeError("attention_logits expects [nWB,heads,N,N]");
  if (log_inv_tau.numel() != heads) throw ShapeError("log_inv_tau must be [heads]");
  if (S.defined() && S.shape() != Shape({heads, N, N}))
    throw ShapeError("position bias must be [heads,N,N]");
  int64_t nW = mask.defined() ? mask.dim(0) : 0;
  if (mask.defined()) {
    if (mask.shape() != Shape({nW, N, N}) || nW * batch != nWB)
      throw ShapeError("mask must be [nW,N,N] with nW*batch == nWB");
  }

  const double max_lit = max_log_inv_tau();
  std::vector<T> inv_tau(static_cast<size_t>(heads));
  std::vector<uint8_t> clamped(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    T v = log_inv_tau.ptr()[h];
    clamped[size_t(h)] = v > T(max_lit) ? 1 : 0;
    inv_tau[size_t(h)] = std::exp(std::min(v, T(max_lit)));
  }

  int64_t nn = N * N;
  std::vector<T> out(cos_sim.data().size());
  const T* pc = cos_sim.ptr();
  const T* ps = S.defined() ? S.ptr() : nullptr;
  const T* pm = mask.defined() ? mask.ptr() : nullptr;
  for (int64_t bw = 0; bw < nWB; ++bw) {
    const T* mrow = pm ? pm + (bw % nW) * nn : nullptr;
    for (int64_t h = 0; h < heads; ++h) {
      T it = inv_tau[size_t(h)];
      const T* crow = pc + (bw * heads + h) * nn;
      const T* srow = ps ? ps + h * nn : nullptr;
      T* orow = out.data() + (bw * heads + h) * nn;
      for (int64_t i = 0; i < nn; ++i) {
        T v = crow[i] * it;
        if (srow) v += srow[i];
        if (mrow) v += mrow[i];
        orow[i] = v;
      }
    }
  }
  Tensor<T> res(cos_sim.shape(), std::move(out));
  check_finite(res, "attention_logits");
  if (!tracing<T>({&cos_sim, &log_inv_tau, &S})) return res;
  res.set_requires_grad(true);
  auto cn = cos_sim.node();
  auto tn = log_inv_tau.node();
  auto sn = S.defined() ? S.node() : nullptr;
  auto on = res.node();
  bool need_c = cos_sim.requires_grad();
  bool need_t = log_inv_tau.requires_grad();
  bool need_s = S.defined() && S.requires_grad();
  Tape<T>::current()->record(on, [cn, tn, sn, on, inv_tau = std::move(inv_tau),
                                  clamped = std::move(clamped), nWB, heads, nn, need_c, need_t,
                                  need_s]() {
    const T* gy = on->grad.data();
    const T* pc = cn->data.data();
    if (need_c) cn->ensure_grad();
    if (need_t) tn->ensure_grad();
    if (need_s) sn->ensure_grad();
    for (int64_t bw = 0; bw < nWB; ++bw)
      for (int64_t h = 0; h < heads; ++h) {
        T it = inv_tau[size_t(h)];
        int64_t base = (bw * heads + h) * nn;
        const T* grow = gy + base;
        if (need_c) {
          T* gc = cn->grad.data() + base;
          for (int64_t i = 0; i < nn; ++i) gc[i] += grow[i] * it;
        }
        if (need_t && !clamped[size_t(h)]) {
          tn->grad[size_t(h)] += it * detail::dotv(grow, pc + base, nn);
        }
        if (need_s) {
          T* gs = sn->grad.data() + h * nn;
          for (int64_t i = 0; i < nn; ++i) gs[i] += grow[i];
        }
      }
  });
  return res;
}

// softmax(cos(q,k)/tau + S + mask) v over per-window token sets.
// q,k,v: [nW*B, heads, N, d]; S: [heads, N, N]; mask: [nW, N, N] or
// undefined; log_inv_tau: [heads]. batch is B (window batches are
// batch-major), needed to line the mask up with windows.
template <class T>
Tensor<T> scaled_cosine_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  const Tensor<T>& log_inv_tau, const Tensor<T>& S,
                                  const Tensor<T>& mask, int64_t batch) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
    throw ShapeError("attention operands must be [nW*B, heads, N, d]");
  int64_t nWB = q.dim(0), heads = q.dim(1), N = q.dim(2);
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("q/k/v shapes must match");
  if (log_inv_tau.numel() != heads) throw ShapeError("log_inv_tau must have one entry per head");

  auto qn = l2_normalize_lastdim(q);
  auto kn = l2_normalize_lastdim(k);
  auto cos_sim = matmul(qn, permute(kn, {0, 1, 3, 2}));  // [nWB, heads, N, N]
  auto logits = attention_logits(cos_sim, log_inv_tau, S, mask, batch);
  return matmul(softmax_lastdim(logits), v);
}

// Parameters of one window-attention block (projections, per-head
// temperature, position-bias MLP).
template <class T>
struct WindowAttention {
  int64_t channels = 0;
  int64_t heads = 0;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> bq, bk, bv, bo;
  Tensor<T> log_inv_tau;            // stores ln(1/tau), clamped above at ln(100)
  Tensor<T> cpb_w1, cpb_b1, cpb_w2, cpb_b2;  // 2 -> hidden -> heads

  WindowAttention() = default;
  WindowAttention(int64_t C, int64_t n_heads, Rng& rng) : channels(C), heads(n_heads) {
    if (C % n_heads != 0) throw UsageError("channels must be divisible by heads");
    auto lin = [&](int64_t in, int64_t out) -> Tensor<T> {
      std::vector<T> w(size_t(in * out));
      for (auto& v : w) v = T(rng.trunc_normal(0.02));
      return Tensor<T>::from({in, out}, std::move(w)).set_requires_grad(true);
    };
    wq = lin(C, C);
    wk = lin(C, C);
    wv = lin(C, C);
    wo = lin(C, C);
    bq = Tensor<T>::zeros({C}).set_requires_grad(true);
    bk = Tensor<T>::zeros({C}).set_requires_grad(true);
    bv = Tensor<T>::zeros({C}).set_requires_grad(true);
    bo = Tensor<T>::zeros({C}).set_requires_grad(true);
    log_inv_tau = Tensor<T>::full({n_heads}, T(std::log(10.0))).set_requires_grad(true);
    cpb_w1 = lin(2, kCpbHidden);
    cpb_b1 = Tensor<T>::zeros({kCpbHidden}).set_requires_grad(true);
    cpb_w2 = lin(kCpbHidden, n_heads);
    cpb_b2 = Tensor<T>::zeros({n_heads}).set_requires_grad(true);
  }

  // Continuous position bias table [heads, M^2, M^2]. Inputs to the MLP are
  // sign(d)*ln(1+|d|)/ln(M) per displacement axis; outputs map through
  // 16*sigmoid into (0,16).
  Tensor<T> cpb_bias(int64_t M) const {
    int64_t R = 2 * M - 1;
    std::vector<T> coords(size_t(R * R * 2));
    double norm = std::log(double(M));
    for (int64_t dy = -(M - 1); dy <= M - 1; ++dy)
      for (int64_t dx = -(M - 1); dx <= M - 1; ++dx) {
        size_t row = size_t((dy + M - 1) * R + (dx + M - 1));
        auto enc = [&](int64_t d) {
          double v = std::log1p(double(std::abs(d))) / norm;
          return T(d >= 0 ? v : -v);
        };
        coords[row * 2 + 0] = enc(dy);
        coords[row * 2 + 1] = enc(dx);
      }
    auto table = Tensor<T>::from({R * R, 2}, std::move(coords));
    auto hidden = gelu(add(matmul(table, cpb_w1), cpb_b1));
    auto out = mul_scalar(sigmoid(add(matmul(hidden, cpb_w2), cpb_b2)), T(16));  // [R^2, heads]

    std::vector<int64_t> idx(size_t(M * M * M * M));
    for (int64_t i = 0; i < M * M; ++i)
      for (int64_t j = 0; j < M * M; ++j) {
        int64_t dy = i / M - j / M, dx = i % M - j % M;
        idx[size_t(i * M * M + j)] = (dy + M - 1) * R + (dx + M - 1);
      }
    auto gathered = gather_rows(out, std::move(idx));          // [M^4, heads]
    return permute(reshape(gathered, {M * M, M * M, heads}), {2, 0, 1});
  }

  // windows: [nW*B, M^2, C] -> same shape. S must be [heads, M^2, M^2].
  Tensor<T> forward(const Tensor<T>& windows, const Tensor<T>& S, const Tensor<T>& mask,
                    int64_t batch) const {
    int64_t nWB = windows.dim(0), N = windows.dim(1), C = windows.dim(2);
    if (C != channels) throw ShapeError("window channel mismatch");
    int64_t d = C / heads;
    auto split = [&](const Tensor<T>& t) {
      return permute(reshape(t, {nWB, N, heads, d}), {0, 2, 1, 3});
    };
    auto q = split(add(matmul(windows, wq), bq));
    auto k = split(add(matmul(windows, wk), bk));
    auto v = split(add(matmul(windows, wv), bv));
    auto att = scaled_cosine_attention(q, k, v, log_inv_tau, S, mask, batch);
    auto merged = reshape(permute(att, {0, 2, 1, 3}), {nWB, N, C});
    return add(matmul(merged, wo), bo);
  }

  void named_params(const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
    out.emplace_back(prefix + ".log_inv_tau", log_inv_tau);
    out.emplace_back(prefix + ".cpb.w1", cpb_w1);
    out.emplace_back(prefix + ".cpb.b1", cpb_b1);
    out.emplace_back(prefix + ".cpb.w2", cpb_w2);
    out.emplace_back(prefix + ".cpb.b2", cpb_b2);
  }
};

// One SwinV2 transformer layer: shifted window attention and a 2x-expansion
// MLP, each wrapped as x + LN(f(x)).
template <class T>
struct S2TL {
  int64_t channels = 0;
  int64_t window = 0;
  int64_t shift = 0;  // 0 or window/2
  double mlp_ratio = 2.0;
  WindowAttention<T> attn;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  S2TL() = default;
  S2TL(int64_t C, int64_t heads, int64_t M, int64_t shift_, double ratio, Rng& rng)
      : channels(C), window(M), shift(shift_), mlp_ratio(ratio), attn(C, heads, rng) {
    int64_t hidden = int64_t(ratio * double(C));
    auto lin = [&](int64_t in, int64_t out) -> Tensor<T> {
      std::vector<T> w(size_t(in * out));
      for (auto& v : w) v = T(rng.trunc_normal(0.02));
      return Tensor<T>::from({in, out}, std::move(w)).set_requires_grad(true);
    };
    mlp_w1 = lin(C, hidden);
    mlp_b1 = Tensor<T>::zeros({hidden}).set_requires_grad(true);
    mlp_w2 = lin(hidden, C);
    mlp_b2 = Tensor<T>::zeros({C}).set_requires_grad(true);
    ln1_g = Tensor<T>::full({C}, T(1)).set_requires_grad(true);
    ln1_b = Tensor<T>::zeros({C}).set_requires_grad(true);
    ln2_g = Tensor<T>::full({C}, T(1)).set_requires_grad(true);
    ln2_b = Tensor<T>::zeros({C}).set_requires_grad(true);
  }

  // x: [B, H*W, C]; H and W must be multiples of the window size.
  Tensor<T> forward(const Tensor<T>& x, int64_t H, int64_t W) const {
    int64_t B = x.dim(0);
    int64_t M = window;
    auto canvas = reshape(x, {B, H, W, channels});
    if (shift > 0) canvas = cyclic_shift(canvas, shift);
    auto wins = window_partition(canvas, M);
    auto S = attn.cpb_bias(M);
    Tensor<T> mask;
    if (shift > 0) mask = build_shift_mask<T>(H, W, M, shift);
    auto att = attn.forward(wins, S, mask, B);
    auto merged = window_reverse(att, M, H, W);
    if (shift > 0) merged = cyclic_shift(merged, -shift);
    auto att_tokens = reshape(merged, {B, H * W, channels});
    auto x1 = add(x, layer_norm(att_tokens, ln1_g, ln1_b, T(1e-5)));

    auto h = gelu(add(matmul(x1, mlp_w1), mlp_b1));
    auto m = add(matmul(h, mlp_w2), mlp_b2);
    return add(x1, layer_norm(m, ln2_g, ln2_b, T(1e-5)));
  }

  void named_params(const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    attn.named_params(prefix + ".attn", out);
    out.emplace_back(prefix + ".ln1.g", ln1_g);
    out.emplace_back(prefix + ".ln1.b", ln1_b);
    out.emplace_back(prefix + ".mlp.w1", mlp_w1);
    out.emplace_back(prefix + ".mlp.b1", mlp_b1);
    out.emplace_back(prefix + ".mlp.w2", mlp_w2);
    out.emplace_back(prefix + ".mlp.b2", mlp_b2);
    out.emplace_back(prefix + ".ln2.g", ln2_g);
    out.emplace_back(prefix + ".ln2.b", ln2_b);
  }
};

}  // namespace s2sr
