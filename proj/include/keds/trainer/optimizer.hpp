#pragma once

#include <cstdint>
#include <vector>

#include "keds/numeric/tensor.hpp"

namespace keds::trainer {

struct Schedule {
  double lr = 5e-5;
  std::uint64_t warmup_steps = 10000;
  std::uint64_t total_steps = 0;
};

/// Linear warmup then cosine decay to 0 at total_steps. Throws ScheduleError
/// if step > total_steps.
double lr_at_step(std::uint64_t step, const Schedule& schedule);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// AdamW with decoupled weight decay. Moments mirror the parameter list given
/// at construction; the list order is part of the state.
template <typename T>
class AdamW {
 public:
  using Tensor = numeric::Tensor<T>;

  AdamW(std::vector<Tensor> params, AdamWConfig config = {});

  /// Applies one update with learning rate `lr` from the accumulated grads,
  /// then clears them. Parameters that received no grad this step are left
  /// untouched (no decay, no moment update); bias correction uses the global
  /// step count.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  /// Restores state; shapes must mirror the parameters.
  void set_state(std::uint64_t t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v);
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace keds::trainer
