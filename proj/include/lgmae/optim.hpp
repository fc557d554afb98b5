#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lgmae/core.hpp"

namespace lgmae {

// Linear warmup from zero to the scaled peak, then cosine decay to min_lr.
// Peak follows the batch-size scaling rule lr = base_lr * batch / 256.
struct LrSchedule {
  double base_lr = 3e-4;
  int batch_size = 256;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double min_lr = 0.0;

  double peak() const { return base_lr * batch_size / 256.0; }

  double at(std::int64_t step) const {
    const double pk = peak();
    if (step < warmup_steps)
      return pk * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t span = total_steps - warmup_steps;
    if (span <= 0) return min_lr;
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    progress = std::min(1.0, std::max(0.0, progress));
    return min_lr + 0.5 * (pk - min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
  }
};

// Decoupled weight decay Adam. Moments are stored flat in registry order,
// which is also how they serialize into checkpoints for exact resume.
template <typename T>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::int64_t steps = 0;
  std::vector<T> m, v;

  void init(const std::vector<ParamRef<T>>& params) {
    size_t total = 0;
    for (const auto& p : params) total += p.size;
    m.assign(total, T(0));
    v.assign(total, T(0));
    steps = 0;
  }

  void step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads,
            double lr) {
    require_shape(params.size() == grads.size(), "AdamW::step: param/grad registry mismatch");
    ++steps;
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T one_m_b1 = static_cast<T>(1.0 - beta1), one_m_b2 = static_cast<T>(1.0 - beta2);
    const T inv_bc1 = static_cast<T>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(steps))));
    const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(steps))));
    const T lr_t = static_cast<T>(lr), wd = static_cast<T>(weight_decay), eps_t = static_cast<T>(eps);
    size_t o = 0;
    for (size_t p = 0; p < params.size(); ++p) {
      require_shape(params[p].size == grads[p].size, "AdamW::step: size mismatch at " + params[p].name);
      T* __restrict__ w = params[p].data;
      const T* __restrict__ g = grads[p].data;
      T* __restrict__ mo = m.data() + o;
      T* __restrict__ vo = v.data() + o;
      const size_t count = params[p].size;
      for (size_t i = 0; i < count; ++i) {
        const T gi = g[i];
        const T mi = b1 * mo[i] + one_m_b1 * gi;
        const T vi = b2 * vo[i] + one_m_b2 * gi * gi;
        mo[i] = mi;
        vo[i] = vi;
        w[i] -= lr_t * ((mi * inv_bc1) / (std::sqrt(vi * inv_bc2) + eps_t) + wd * w[i]);
      }
      o += count;
    }
    require_shape(o == m.size(), "AdamW::step: registry does not cover moment buffers");
  }
};

}  // namespace lgmae
