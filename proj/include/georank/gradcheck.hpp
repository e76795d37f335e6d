#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "georank/optim.hpp"
#include "georank/tensor.hpp"

namespace georank {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
};

// Central-difference comparison of analytic gradients. Errors are reported
// per parameter tensor as |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
// with |.| the Euclidean norm over the tensor, which keeps the ratio meaningful
// for individual weights whose true gradient is near zero.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> per_param;
};

// `loss` must be a deterministic function of the current parameter values.
// `params[i].grad` holds the analytic gradient to verify. Default step:
// 1e-3 for 32-bit storage, 1e-6 when run on the 64-bit instantiation.
template <class T>
GradCheckReport grad_check(const std::function<double()>& loss, std::vector<ParamRef<T>>& params,
                           double eps) {
  GradCheckReport report;
  for (auto& p : params) {
    Tensor<T>& v = *p.value;
    const Tensor<T>& g = *p.grad;
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T saved = v[i];
      v[i] = static_cast<T>(static_cast<double>(saved) + eps);
      const double up = loss();
      v[i] = static_cast<T>(static_cast<double>(saved) - eps);
      const double down = loss();
      v[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("grad_check: non-finite loss at " + p.name);
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = static_cast<double>(g[i]);
      const double d = analytic - numeric;
      diff_sq += d * d;
      a_sq += analytic * analytic;
      n_sq += numeric * numeric;
    }
    const double denom = std::max(1e-8, std::sqrt(a_sq) + std::sqrt(n_sq));
    GradCheckEntry entry{p.name, std::sqrt(diff_sq) / denom};
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.per_param.push_back(entry);
  }
  return report;
}

template <class T>
inline double default_gradcheck_eps() {
  return sizeof(T) >= 8 ? 1e-6 : 1e-3;
}

}  // namespace georank
