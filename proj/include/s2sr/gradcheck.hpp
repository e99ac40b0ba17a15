#pragma once

// Central finite-difference gradient verification. Works on the double
// instantiation of the op stack: evaluates the loss under a tape to collect
// reverse-mode gradients, then perturbs every parameter element by +/-step
// and compares (f(p+h) - f(p-h)) / 2h against the tape gradient.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "s2sr/ops.hpp"

namespace s2sr {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double tape_grad = 0.0;
  double fd_grad = 0.0;
  int64_t checked = 0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Relative error with a floor so near-zero gradient pairs do not blow up.
inline double grad_rel_err(double a, double b) {
  double denom = std::max({1e-2, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / denom;
}

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

template <class F>
GradCheckReport grad_check(F&& f, const NamedParams& params, double step = 1e-3) {
  for (auto& [name, p] : params) {
    (void)name;
    const_cast<Tensor<double>&>(p).clear_grad();
  }

  std::vector<std::vector<double>> tape_grads;
  {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    Tensor<double> loss = f();
    if (loss.numel() != 1)
      throw UsageError("grad_check objective must be scalar, got " + shape_str(loss.shape()));
    tape.backward(loss);
    for (auto& [name, p] : params) {
      (void)name;
      if (p.has_grad())
        tape_grads.push_back(p.grad());
      else
        tape_grads.push_back(std::vector<double>(size_t(p.numel()), 0.0));
    }
  }

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = const_cast<Tensor<double>&>(params[pi].second);
    for (int64_t i = 0; i < p.numel(); ++i) {
      double orig = p.data()[size_t(i)];
      p.data()[size_t(i)] = orig + step;
      double fp = f().item();
      p.data()[size_t(i)] = orig - step;
      double fm = f().item();
      p.data()[size_t(i)] = orig;
      double fd = (fp - fm) / (2.0 * step);
      double g = tape_grads[pi][size_t(i)];
      double rel = grad_rel_err(fd, g);
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi].first;
        rep.worst_index = i;
        rep.tape_grad = g;
        rep.fd_grad = fd;
      }
    }
  }
  for (auto& [name, p] : params) {
    (void)name;
    const_cast<Tensor<double>&>(p).clear_grad();
  }
  return rep;
}

}  // namespace s2sr
