#include "keds/trainer/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "keds/error.hpp"

namespace keds::trainer {

double lr_at_step(std::uint64_t step, const Schedule& s) {
  if (step > s.total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " beyond total " +
                        std::to_string(s.total_steps));
  }
  if (s.warmup_steps == 0) throw ScheduleError("warmup_steps must be >= 1");
  if (step < s.warmup_steps) return s.lr * double(step) / double(s.warmup_steps);
  if (s.total_steps <= s.warmup_steps) return s.lr;
  const double progress = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  return s.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw GraphError("AdamW parameters must be leaves");
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_values();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t e = 0; e < w.size(); ++e) {
      const double ge = double(g[e]);
      const double me = b1 * double(m[e]) + (1.0 - b1) * ge;
      const double ve = b2 * double(v[e]) + (1.0 - b2) * ge * ge;
      m[e] = static_cast<T>(me);
      v[e] = static_cast<T>(ve);
      const double update = (me / c1) / (std::sqrt(ve / c2) + config_.eps);
      w[e] = static_cast<T>(double(w[e]) - lr * (update + config_.weight_decay * double(w[e])));
    }
    p.zero_grad();
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void AdamW<T>::set_state(std::uint64_t t, std::vector<std::vector<T>> m,
                         std::vector<std::vector<T>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw FormatError("optimizer state holds " + std::to_string(m.size()) + " tensors, expected " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel()) {
      throw FormatError("optimizer moment " + std::to_string(i) + " does not mirror its parameter");
    }
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace keds::trainer
