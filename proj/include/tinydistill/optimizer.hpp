#pragma once

#include <cstdint>
#include <vector>

#include "tinydistill/tensor.hpp"

namespace tinydistill {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double warmup_fraction = 0.1;  // linear warmup, then linear decay to 0
    double clip_norm = 1.0;        // global gradient norm; 0 disables
    std::size_t total_steps = 0;   // schedule horizon
};

// Adam with linear warmup/decay and global-norm clipping. step() consumes
// the gradients accumulated on the parameters and zeroes them afterwards.
class Adam {
public:
    Adam(std::vector<Tensor> parameters, AdamConfig config);

    void step();
    std::size_t step_count() const { return step_; }
    // Learning rate the next step() call will use.
    double next_lr() const;

private:
    std::vector<Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t step_ = 0;
};

}  // namespace tinydistill
