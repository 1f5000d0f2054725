#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duettest {

inline std::string data_dir() { return DUET_DATA_DIR; }
inline std::string data_path(const std::string& name) { return data_dir() + "/" + name; }

// Central finite-difference check. `f` must rebuild the scalar loss from
// the leaf tensors on every call and be deterministic; it is evaluated
// with no active tape, so it costs a pure forward pass.
//
// Returns max over leaf entries of |analytic - fd| / (|analytic| + 1e-8).
inline double fd_max_rel_error(const std::vector<duet::TensorPtr>& leaves,
                               const std::function<duet::TensorPtr()>& f,
                               double h = 1e-5) {
  using namespace duet;
  for (const auto& t : leaves) {
    t->requires_grad = true;
    t->ensure_grad();
    t->zero_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    auto loss = f();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (const auto& t : leaves) {
    for (size_t i = 0; i < t->data.size(); ++i) {
      const double keep = t->data[i];
      t->data[i] = keep + h;
      const double fp = f()->value();
      t->data[i] = keep - h;
      const double fm = f()->value();
      t->data[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = t->grad[i];
      worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + 1e-8));
    }
  }
  return worst;
}

// Same check restricted to `per_leaf` randomly chosen entries of each leaf;
// used for large parameter sets where the full sweep would be slow.
inline double fd_sampled_rel_error(const std::vector<duet::TensorPtr>& leaves,
                                   const std::function<duet::TensorPtr()>& f,
                                   int per_leaf, duet::Rng& rng, double h = 1e-5) {
  using namespace duet;
  for (const auto& t : leaves) {
    t->requires_grad = true;
    t->ensure_grad();
    t->zero_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    auto loss = f();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (const auto& t : leaves) {
    for (int s = 0; s < per_leaf; ++s) {
      const size_t i = static_cast<size_t>(rng.randint(t->data.size()));
      const double keep = t->data[i];
      t->data[i] = keep + h;
      const double fp = f()->value();
      t->data[i] = keep - h;
      const double fm = f()->value();
      t->data[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = t->grad[i];
      worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + 1e-8));
    }
  }
  return worst;
}

inline duet::TensorPtr make_uniform(std::vector<int> shape, duet::Rng& rng, double lo = -2.0,
                                    double hi = 2.0) {
  auto t = duet::Tensor::create(std::move(shape));
  for (auto& v : t->data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace duettest
