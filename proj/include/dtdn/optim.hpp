#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dtdn/tensor.hpp"

namespace dtdn {

/// One Nesterov momentum step, in the form used by most deep learning
/// frameworks:
///   v <- momentum * v + g
///   p <- p - lr * (g + momentum * v)
/// With momentum = 0 this is plain SGD.
inline void sgd_nesterov_step(std::span<double> params, std::span<const double> grads,
                              std::span<double> velocity, double lr, double momentum) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw ShapeError("sgd_nesterov_step: params/grads/velocity sizes " +
                         std::to_string(params.size()) + "/" + std::to_string(grads.size()) + "/" +
                         std::to_string(velocity.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * (grads[i] + momentum * velocity[i]);
    }
}

/// Owns one velocity buffer per parameter; buffers persist across steps.
class NesterovSGD {
  public:
    NesterovSGD(std::vector<Tensor> params, double momentum) : params_(std::move(params)), momentum_(momentum) {
        for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
    }

    /// Parameters without a gradient (not reached by the loss) are skipped.
    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            for (double g : p.grad())
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in optimizer step");
            sgd_nesterov_step(p.mutable_data(), p.grad(), velocity_[i], lr, momentum_);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::vector<std::vector<double>>& velocities() { return velocity_; }
    const std::vector<std::vector<double>>& velocities() const { return velocity_; }
    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
};

}  // namespace dtdn
