#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "clinfuse/tensor.hpp"

namespace clinfuse {

struct GradCheckResult {
  double max_relative_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
  Index coordinates = 0;
  Index refined = 0;  // coordinates whose step was shrunk to stay off a ReLU kink
};

enum class DifferenceScheme {
  Central,     // (f(x+h) - f(x-h)) / 2h
  Richardson,  // (4 D(h/2) - D(h)) / 3 over central differences D; O(h^4)
};

namespace detail {

// Sign pattern of every ReLU input reachable from `loss` through recorded
// operations.
template <typename Scalar>
std::vector<bool> relu_pattern(const BasicTensor<Scalar>& loss) {
  std::vector<bool> bits;
  const auto record = ComputationRecord<Scalar>::trace(loss);
  for (const auto* node : record.nodes()) {
    if (node->op != "relu") continue;
    const auto& v = node->inputs.front()->value;
    for (Index i = 0; i < v.size(); ++i) bits.push_back(v(i) > Scalar(0));
  }
  return bits;
}

}  // namespace detail

/// Compares backward() against central differences for the leaf `x`.
///
/// `f` must rebuild the scalar loss from the current contents of `x` (it may
/// ignore its argument and read `x` through a capture). Relative error per
/// coordinate is |a - n| / max(|a|, |n|, 1e-8). When `coords` is given only
/// those coordinates are perturbed.
///
/// If some ReLU changes sign between x - h and x + h the difference
/// straddles a kink; the step for that coordinate is divided by 10 (at most
/// `max_refinements` times) until the activation pattern is stable.
template <typename Scalar>
GradCheckResult finite_difference_check(const std::function<BasicTensor<Scalar>(const BasicTensor<Scalar>&)>& f,
                                        BasicTensor<Scalar> x, Scalar h = Scalar(1e-5),
                                        std::optional<std::vector<Index>> coords = std::nullopt,
                                        DifferenceScheme scheme = DifferenceScheme::Central,
                                        int max_refinements = 3) {
  if (!x.requires_grad() || !x.is_leaf()) throw std::invalid_argument("finite_difference_check: x must be a grad leaf");
  x.zero_grad();
  const auto base_loss = f(x);
  const auto base_pattern = detail::relu_pattern(base_loss);
  backward(base_loss);
  const auto analytic = x.grad();

  std::vector<Index> which;
  if (coords) {
    which = *coords;
  } else {
    which.resize(static_cast<std::size_t>(x.numel()));
    for (Index i = 0; i < x.numel(); ++i) which[static_cast<std::size_t>(i)] = i;
  }

  GradCheckResult res;
  res.coordinates = static_cast<Index>(which.size());
  auto& v = x.mutable_value();
  auto probe = [&](Index i, Scalar value, bool& stable) {
    v(i) = value;
    const auto loss = f(x);
    if (!base_pattern.empty() && detail::relu_pattern(loss) != base_pattern) stable = false;
    return loss.item();
  };
  for (const Index i : which) {
    const Scalar saved = v(i);
    Scalar step = h;
    Scalar numeric_s{};
    for (int attempt = 0;; ++attempt) {
      bool stable = true;
      const Scalar up = probe(i, saved + step, stable);
      const Scalar down = probe(i, saved - step, stable);
      numeric_s = (up - down) / (Scalar(2) * step);
      if (stable && scheme == DifferenceScheme::Richardson) {
        const Scalar half = step / Scalar(2);
        const Scalar up2 = probe(i, saved + half, stable);
        const Scalar down2 = probe(i, saved - half, stable);
        numeric_s = (Scalar(4) * ((up2 - down2) / (Scalar(2) * half)) - numeric_s) / Scalar(3);
      }
      if (stable || attempt == max_refinements) break;
      step /= Scalar(10);
      if (attempt == 0) ++res.refined;
    }
    v(i) = saved;
    const double numeric = static_cast<double>(numeric_s);
    const double a = static_cast<double>(analytic(i));
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double err = std::abs(a - numeric) / denom;
    if (res.worst_index < 0 || err > res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_index = i;
      res.analytic = a;
      res.numeric = numeric;
    }
  }
  x.zero_grad();
  return res;
}

}  // namespace clinfuse
