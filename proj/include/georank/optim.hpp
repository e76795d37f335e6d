#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "georank/tensor.hpp"

namespace georank {

// A named view of one parameter tensor and its gradient buffer.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.0;
};

// Velocity buffers, lazily sized to the parameter list.
template <class T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

template <class T>
void sgd_step(std::vector<ParamRef<T>>& params, const SgdConfig& cfg, SgdState<T>* state = nullptr) {
  if (state && state->velocity.size() != params.size()) {
    state->velocity.clear();
    for (const auto& p : params) state->velocity.emplace_back(p.value->shape(), T(0));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& v = *params[i].value;
    const Tensor<T>& g = *params[i].grad;
    if (!v.same_shape(g)) throw std::invalid_argument("sgd_step: grad shape mismatch for " + params[i].name);
    if (cfg.momentum != 0.0 && state) {
      Tensor<T>& vel = state->velocity[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        vel[j] = static_cast<T>(cfg.momentum) * vel[j] + g[j];
        v[j] -= static_cast<T>(cfg.lr) * vel[j];
      }
    } else {
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= static_cast<T>(cfg.lr) * g[j];
    }
  }
}

}  // namespace georank
