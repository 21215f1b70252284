#pragma once

#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace sagecc::testing {

inline Matrix random_matrix(Index rows, Index cols, nn::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  int checked = 0;
};

/// Compares tape gradients of every trainable parameter with central
/// differences. Error per tensor is ||g - n|| / max(||g|| + ||n||, 1e-4); the floor keeps
/// analytically zero gradients (e.g. key biases under softmax) from reading as noise.
/// At most `per_param` entries of each tensor are probed.
inline GradCheck grad_check(nn::ParameterStore& store,
                            const std::function<ad::Var(ad::Tape&)>& loss, int per_param = 12,
                            double h = 1e-6) {
  auto params = store.trainable();
  store.zero_grad();
  {
    ad::Tape tape;
    const ad::Var l = loss(tape);
    tape.backward(l);
  }
  auto eval = [&] {
    ad::Tape tape;
    return loss(tape).scalar();
  };
  GradCheck out;
  for (Parameter* p : params) {
    const Index n = p->value.size();
    const Index step = std::max<Index>(1, n / per_param);
    std::vector<double> analytic, numeric;
    for (Index i = 0; i < n; i += step) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = eval();
      x = saved - h;
      const double down = eval();
      x = saved;
      numeric.push_back((up - down) / (2.0 * h));
      analytic.push_back(p->grad.size() == 0 ? 0.0 : p->grad.data()[i]);
      ++out.checked;
    }
    double diff = 0.0, na = 0.0, nn_ = 0.0;
    for (size_t k = 0; k < analytic.size(); ++k) {
      diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      na += analytic[k] * analytic[k];
      nn_ += numeric[k] * numeric[k];
    }
    const double rel = std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn_), 1e-4);
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst = p->name;
    }
  }
  return out;
}

}  // namespace sagecc::testing
