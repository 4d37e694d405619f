#pragma once

#include "saelab/common.hpp"

#include <numbers>

namespace saelab {

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay to zero at `total_steps`.
struct WarmupCosineSchedule {
  double peak = 1e-3;
  std::int64_t warmup_steps = 200;
  std::int64_t total_steps = 1000;

  double at(std::int64_t step) const {
    if (step < warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter tensor.
template <class S, int Rows, int Cols, int Opts>
struct AdamSlot {
  using Tensor = Eigen::Matrix<S, Rows, Cols, Opts>;
  Tensor m, v;

  explicit AdamSlot(const Tensor& like)
      : m(Tensor::Zero(like.rows(), like.cols())), v(Tensor::Zero(like.rows(), like.cols())) {}

  /// In-place update of `param` with gradient `grad`; `t` is the 1-based step count.
  void step(Tensor& param, const Tensor& grad, double lr, std::int64_t t, const AdamConfig& cfg) {
    const auto b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    m = b1 * m + (S(1) - b1) * grad;
    v = b2 * v + (S(1) - b2) * grad.cwiseAbs2();
    const auto c1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const auto c2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    const auto step_size = static_cast<S>(lr) / c1;
    const auto eps = static_cast<S>(cfg.eps);
    param.array() -= step_size * m.array() / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace saelab
