#include "etd/optim.hpp"

#include <cmath>

namespace etd {

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Tensor& p : params) {
    Slot s;
    s.param = p;
    s.m.assign(p.data().size(), 0.0);
    s.v.assign(p.data().size(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Slot& s : slots_) {
    if (!s.param.has_grad()) continue;
    const std::vector<double>& g = s.param.grad();
    std::vector<double>& x = s.param.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    s.param.zero_grad();
  }
}

double lr_at(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr) {
  if (total_steps < 1) throw ConfigError("lr schedule needs at least one step");
  const std::int64_t warmup =
      static_cast<std::int64_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) {
    return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total_steps == warmup) return peak_lr;
  return peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

}  // namespace etd
