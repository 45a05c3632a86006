#pragma once

// Central finite-difference gradient checker used by the unit and acceptance
// suites. The scalar probed is sum(f(leaves) o R) for a fixed random R.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stlab/ops.hpp"
#include "stlab/tensor.hpp"

namespace stlab::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct GradCheckResult {
  bool ok = true;
  std::size_t checked = 0;
  // Entries whose one-sided slopes disagree, i.e. a ReLU kink lies within h.
  std::size_t kinks = 0;
  double worst_error = 0.0;
  std::string detail;
};

using LeafFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline GradCheckResult gradcheck(std::vector<Tensor> leaves, const LeafFn& f, std::uint64_t seed,
                                 double h = 1e-5, double rtol = 1e-4, double atol = 1e-8) {
  GradCheckResult res;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);

  Tensor probe;
  auto loss_of = [&](const Tensor& out) {
    if (!probe.defined()) probe = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    return ops::sum(ops::hadamard(out, probe));
  };

  for (auto& l : leaves) l.clear_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    auto loss = loss_of(f(leaves));
    tape.backward(loss);
  }
  auto eval = [&]() { return loss_of(f(leaves)).item(); };
  double f0 = eval();

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    if (!leaf.requires_grad()) continue;
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) {
      auto g = leaf.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      auto vals = leaf.values_mut();
      double orig = vals[i];
      vals[i] = orig + h;
      double fp = eval();
      vals[i] = orig - h;
      double fm = eval();
      vals[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double err = std::abs(numeric - analytic[i]);
      double scale = std::max(std::abs(numeric), std::abs(analytic[i]));
      ++res.checked;
      if (err <= atol || err <= rtol * scale) continue;
      double right = (fp - f0) / h;
      double left = (f0 - fm) / h;
      if (std::abs(right - left) > 1e3 * (rtol * std::max(std::abs(right), std::abs(left)) + atol)) {
        ++res.kinks;
        continue;
      }
      res.ok = false;
      if (err > res.worst_error) {
        res.worst_error = err;
        std::ostringstream os;
        os << "leaf " << li << " entry " << i << ": analytic " << analytic[i] << " numeric "
           << numeric;
        res.detail = os.str();
      }
    }
  }
  return res;
}

}  // namespace stlab::testing
