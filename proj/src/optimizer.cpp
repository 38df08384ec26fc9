#include "tinydistill/optimizer.hpp"

#include <cmath>

#include "tinydistill/error.hpp"

namespace tinydistill {

Adam::Adam(std::vector<Tensor> parameters, AdamConfig config)
    : params_(std::move(parameters)), config_(config) {
    if (config_.learning_rate <= 0.0) throw ConfigError("adam: learning_rate must be positive");
    if (config_.warmup_fraction < 0.0 || config_.warmup_fraction >= 1.0) {
        throw ConfigError("adam: warmup_fraction must be in [0,1)");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

double Adam::next_lr() const {
    if (config_.total_steps == 0) return config_.learning_rate;
    double total = static_cast<double>(config_.total_steps);
    double warmup = std::ceil(config_.warmup_fraction * total);
    double s = static_cast<double>(step_ + 1);  // 1-based step about to run
    double factor;
    if (warmup > 0.0 && s <= warmup) {
        factor = s / warmup;
    } else if (total > warmup) {
        factor = (total - s + 1.0) / (total - warmup);
    } else {
        factor = 1.0;
    }
    if (factor < 0.0) factor = 0.0;
    return config_.learning_rate * factor;
}

void Adam::step() {
    double lr = next_lr();
    ++step_;
    double clip_scale = 1.0;
    if (config_.clip_norm > 0.0) {
        double sq = 0.0;
        for (Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) sq += g * g;
        }
        double norm = std::sqrt(sq);
        if (norm > config_.clip_norm) clip_scale = config_.clip_norm / norm;
    }
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        auto grad = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < grad.size(); ++j) {
            double g = grad[j] * clip_scale;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
        p.zero_grad();
    }
}

}  // namespace tinydistill
