#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "act/errors.hpp"
#include "act/param_store.hpp"
#include "act/tensor.hpp"

namespace act {

// Linear warmup from 0 to base, then cosine decay to 0 at total_steps.
inline double cosine_lr(int64_t step, int64_t warmup_steps, int64_t total_steps,
                        double base_lr) {
  if (total_steps <= 0) throw ConfigError("total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("warmup_steps must lie in [0, total_steps]");
  }
  if (step < 0) throw ArgumentError("negative step");
  if (step >= total_steps) return 0.0;
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// AdamW with decoupled weight decay. Moment buffers exist only for
// parameters that were trainable at construction time; frozen parameters are
// never touched, decayed, or given moments.
template <typename T>
class AdamWT {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamWT(ParamStoreT<T>& params, Options opt) : params_(params), opt_(opt) {
    if (opt_.lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (opt_.beta1 < 0.0 || opt_.beta1 >= 1.0 || opt_.beta2 < 0.0 || opt_.beta2 >= 1.0) {
      throw ConfigError("adam betas must lie in [0,1)");
    }
    if (opt_.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    for (const auto& e : params_.entries()) {
      if (!e.trainable) continue;
      slots_.push_back(Slot{e.name, e.tensor,
                            std::vector<T>(static_cast<size_t>(e.tensor.numel()), T(0)),
                            std::vector<T>(static_cast<size_t>(e.tensor.numel()), T(0))});
    }
  }

  void set_lr(double lr) {
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    opt_.lr = lr;
  }
  double lr() const { return opt_.lr; }
  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto& val = s.tensor.v();
      auto& grad = s.tensor.g();
      for (size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        double m = static_cast<double>(s.m[i]);
        double v = static_cast<double>(s.v[i]);
        m = opt_.beta1 * m + (1.0 - opt_.beta1) * g;
        v = opt_.beta2 * v + (1.0 - opt_.beta2) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double x = static_cast<double>(val[i]);
        x -= opt_.lr * opt_.weight_decay * x;
        x -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        val[i] = static_cast<T>(x);
      }
    }
  }

  void zero_grad() { params_.zero_grad(); }

  // Moment buffers in slot order, for checkpointing.
  struct MomentView {
    const std::string& name;
    const std::vector<T>& m;
    const std::vector<T>& v;
  };
  std::vector<MomentView> moments() const {
    std::vector<MomentView> out;
    out.reserve(slots_.size());
    for (const auto& s : slots_) out.push_back(MomentView{s.name, s.m, s.v});
    return out;
  }
  void load_moments(const std::string& name, const std::vector<T>& m,
                    const std::vector<T>& v, int64_t step) {
    for (auto& s : slots_) {
      if (s.name == name) {
        if (m.size() != s.m.size() || v.size() != s.v.size()) {
          throw CheckpointMismatchError("optimizer moment size mismatch for " + name);
        }
        s.m = m;
        s.v = v;
        t_ = step;
        return;
      }
    }
    throw CheckpointMismatchError("optimizer moments for unknown parameter " + name);
  }

 private:
  struct Slot {
    std::string name;
    TensorT<T> tensor;
    std::vector<T> m;
    std::vector<T> v;
  };

  ParamStoreT<T>& params_;
  Options opt_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace act
