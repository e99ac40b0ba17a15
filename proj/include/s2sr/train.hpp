#pragma once

// Training loop: Adam (beta1 0.9, beta2 0.99, eps 1e-8), initial lr 2e-4
// halved at 50/75/90% of the run, global-norm gradient clipping at 5.
//
// Batches are prepared and differentiated per sample; with more than one
// worker thread each sample runs its forward/backward on a private model
// replica and a private tape, and gradients are reduced in sample order, so
// results do not depend on thread scheduling. A single-threaded run reuses
// the master model directly and is bit-reproducible from (seed, config,
// corpus). The per-iteration RNG is derived from (seed, iteration), so a
// resumed run consumes the identical sample stream.

#include <fstream>
#include <thread>

#include "s2sr/checkpoint.hpp"
#include "s2sr/dataset.hpp"
#include "s2sr/losses.hpp"

namespace s2sr {

struct TrainOptions {
  int64_t iters = 500;           // total planned iterations (schedule base)
  int64_t start_iter = 0;        // resume point
  int64_t batch_size = 2;
  double lr = 2e-4;
  double lambda_aux = 0.0;
  double lambda_hf = 0.0;
  double blur_sigma = 1.0;
  int quality = 10;              // 0 = mixed {10,20,30,40} per batch
  uint64_t seed = 0;
  int threads = 0;               // 0 = S2SR_THREADS or hardware
  double clip_norm = 5.0;
  std::string loss_csv;          // per-iteration loss log, empty = none
};

struct TrainResult {
  std::vector<double> losses;  // one entry per iteration
};

struct Adam {
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;

  void init(const std::vector<std::pair<std::string, Tensor<float>>>& params) {
    m.clear();
    v.clear();
    for (auto& [name, p] : params) {
      (void)name;
      m.emplace_back(size_t(p.numel()), 0.0f);
      v.emplace_back(size_t(p.numel()), 0.0f);
    }
  }

  void step(std::vector<std::pair<std::string, Tensor<float>>>& params,
            const std::vector<std::vector<float>>& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& data = params[pi].second.data();
      const auto& g = grads[pi];
      for (size_t i = 0; i < data.size(); ++i) {
        float gi = g[i];
        m[pi][i] = float(beta1 * m[pi][i] + (1.0 - beta1) * gi);
        v[pi][i] = float(beta2 * v[pi][i] + (1.0 - beta2) * double(gi) * double(gi));
        double mh = m[pi][i] / bc1, vh = v[pi][i] / bc2;
        data[i] -= float(lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }
};

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  int env = env_threads();
  if (env > 0) return env;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

namespace detail {

// Forward + backward for one sample; returns loss, leaves grads on params.
inline double sample_pass(const Swin2SR<float>& model, const TrainSample& s, double lambda_aux,
                          double lambda_hf, const BlurKernel5& blur) {
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto lq = image_to_tensor<float>(s.lq);
  auto hr = image_to_tensor<float>(s.hr);
  auto pred = model.forward(lq);
  auto loss =
      total_loss(pred, hr, lambda_aux, lambda_hf, int64_t(model.cfg.scale), blur);
  tape.backward(loss);
  return double(loss.item());
}

inline void copy_weights(const Swin2SR<float>& from, Swin2SR<float>& to) {
  auto src = from.named_params();
  auto dst = to.named_params();
  for (size_t i = 0; i < src.size(); ++i) dst[i].second.data() = src[i].second.data();
}

}  // namespace detail

inline TrainResult train(Swin2SR<float>& model, const std::vector<ImageU8>& corpus,
                         const TrainOptions& opts) {
  if (opts.iters <= opts.start_iter) throw UsageError("iters must exceed start_iter");
  auto params = model.named_params();
  Adam adam;
  adam.init(params);
  BlurKernel5 blur(opts.blur_sigma);

  int threads = resolve_threads(opts.threads);
  int workers = int(std::min<int64_t>(threads, opts.batch_size));

  // Worker replicas (worker 0 is the master model itself).
  std::vector<std::unique_ptr<Swin2SR<float>>> replicas;
  for (int wkr = 1; wkr < workers; ++wkr) {
    Rng dummy(0);
    replicas.push_back(std::make_unique<Swin2SR<float>>(model.cfg, dummy));
  }

  std::ofstream csv;
  if (!opts.loss_csv.empty()) {
    csv.open(opts.loss_csv, opts.start_iter == 0 ? std::ios::trunc : std::ios::app);
    if (!csv) throw DataError("cannot open loss log: " + opts.loss_csv);
    if (opts.start_iter == 0) csv << "iter,loss,lr\n";
  }

  TrainResult result;
  const int qualities[4] = {10, 20, 30, 40};

  for (int64_t iter = opts.start_iter; iter < opts.iters; ++iter) {
    Rng rng = Rng::child(opts.seed, uint64_t(iter));
    int q = opts.quality != 0 ? opts.quality : qualities[rng.uniform_int(4)];
    auto batch = sample_batch(corpus, opts.batch_size, model.cfg.scale, q, rng);

    double progress_lr = opts.lr;
    double frac = double(iter) / double(opts.iters);
    if (frac >= 0.5) progress_lr *= 0.5;
    if (frac >= 0.75) progress_lr *= 0.5;
    if (frac >= 0.9) progress_lr *= 0.5;

    for (auto& [name, p] : params) p.clear_grad();
    std::vector<std::vector<float>> grads(params.size());
    for (size_t pi = 0; pi < params.size(); ++pi)
      grads[pi].assign(size_t(params[pi].second.numel()), 0.0f);
    std::vector<double> losses(size_t(opts.batch_size), 0.0);

    if (workers <= 1) {
      for (int64_t i = 0; i < opts.batch_size; ++i) {
        losses[size_t(i)] =
            detail::sample_pass(model, batch[size_t(i)], opts.lambda_aux, opts.lambda_hf, blur);
        for (size_t pi = 0; pi < params.size(); ++pi) {
          if (!params[pi].second.has_grad()) continue;
          const auto& g = params[pi].second.grad();
          for (size_t j = 0; j < g.size(); ++j) grads[pi][j] += g[j];
        }
        for (auto& [name, p] : params) p.clear_grad();
      }
    } else {
      for (auto& rep : replicas) detail::copy_weights(model, *rep);
      // per-worker grad buffers, reduced in sample order afterwards
      std::vector<std::vector<std::vector<float>>> wgrads(size_t(opts.batch_size));
      std::exception_ptr err;
      std::vector<std::thread> pool;
      for (int wkr = 0; wkr < workers; ++wkr) {
        pool.emplace_back([&, wkr]() {
          try {
            Swin2SR<float>& net = wkr == 0 ? model : *replicas[size_t(wkr - 1)];
            auto wparams = net.named_params();
            for (int64_t i = wkr; i < opts.batch_size; i += workers) {
              for (auto& [name, p] : wparams) p.clear_grad();
              losses[size_t(i)] = detail::sample_pass(net, batch[size_t(i)], opts.lambda_aux,
                                                      opts.lambda_hf, blur);
              auto& slot = wgrads[size_t(i)];
              slot.resize(wparams.size());
              for (size_t pi = 0; pi < wparams.size(); ++pi) {
                if (wparams[pi].second.has_grad())
                  slot[pi] = wparams[pi].second.grad();
                else
                  slot[pi].assign(size_t(wparams[pi].second.numel()), 0.0f);
              }
            }
          } catch (...) {
            err = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      if (err) std::rethrow_exception(err);
      for (int64_t i = 0; i < opts.batch_size; ++i)
        for (size_t pi = 0; pi < params.size(); ++pi)
          for (size_t j = 0; j < grads[pi].size(); ++j) grads[pi][j] += wgrads[size_t(i)][pi][j];
    }

    double mean_loss = 0;
    for (double l : losses) mean_loss += l;
    mean_loss /= double(opts.batch_size);

    if (!std::isfinite(mean_loss)) {
      std::string dump = "non-finite loss at iteration " + std::to_string(iter) + "; param norms:";
      for (size_t pi = 0; pi < std::min<size_t>(params.size(), 8); ++pi) {
        double n2 = 0;
        for (float v : params[pi].second.data()) n2 += double(v) * double(v);
        dump += " " + params[pi].first + "=" + std::to_string(std::sqrt(n2));
      }
      throw NumericError(dump);
    }

    double inv_batch = 1.0 / double(opts.batch_size);
    double norm2 = 0;
    for (auto& g : grads)
      for (auto& v : g) {
        v = float(v * inv_batch);
        norm2 += double(v) * double(v);
      }
    double gnorm = std::sqrt(norm2);
    if (opts.clip_norm > 0 && gnorm > opts.clip_norm) {
      float scale = float(opts.clip_norm / gnorm);
      for (auto& g : grads)
        for (auto& v : g) v *= scale;
    }

    adam.step(params, grads, progress_lr);
    result.losses.push_back(mean_loss);
    if (csv.is_open()) csv << iter << "," << mean_loss << "," << progress_lr << "\n";
  }
  return result;
}

}  // namespace s2sr
