#pragma once

#include <cstdint>
#include <vector>

#include "tinydistill/mapping.hpp"
#include "tinydistill/tensor.hpp"
#include "tinydistill/transformer.hpp"

namespace tinydistill {

// Weights, temperature and width-matching projections of the layer-wise
// distillation objective. The projections are trained jointly with the
// student and discarded at export time.
struct DistillParams {
    std::vector<double> lambda;          // M+2 layer weights
    double temperature = 1.0;
    bool include_prediction = false;     // off for general distillation
    bool shared_hidden_projection = false;
    bool use_attn = true;                // ablation switches for the interior branch
    bool use_hidn = true;

    Tensor embedding_projection;         // W_e [d',d]
    std::vector<Tensor> hidden_projections;  // one W_h [d',d] per interior layer,
                                             // or a single shared one

    // lambda defaults to all ones. projection_identity requires d' == d and
    // initializes W_e/W_h to the identity instead of normal(0, 0.02).
    static DistillParams create(std::size_t student_layers,
                                std::size_t student_hidden,
                                std::size_t teacher_hidden, std::uint64_t seed,
                                bool shared_hidden_projection = false,
                                bool projection_identity = false);

    // W_h for interior student layer m (1-based).
    const Tensor& hidden_projection(std::size_t m) const;

    // Projections, in a fixed order (what the optimizer sees beyond the
    // student parameters).
    std::vector<Tensor> trainable() const;

    void validate(std::size_t student_layers) const;
};

// (1/h) sum_i MSE(A_i^S, A_i^T) over unpadded (query, key) positions of the
// pre-softmax score matrices. Student and teacher must share head count and
// sequence length.
Tensor attn_loss(const Tensor& student_attn, const Tensor& teacher_attn,
                 const std::vector<std::uint8_t>& pad_mask);

// MSE(H^S W_h, H^T) over unpadded positions.
Tensor hidn_loss(const Tensor& student_hidden, const Tensor& teacher_hidden,
                 const Tensor& w_h, const std::vector<std::uint8_t>& pad_mask);

// MSE(E^S W_e, E^T) over unpadded positions.
Tensor embd_loss(const Tensor& student_embed, const Tensor& teacher_embed,
                 const Tensor& w_e, const std::vector<std::uint8_t>& pad_mask);

// CE(z^T/t, z^S/t); gradients reach the student only.
Tensor pred_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                 double temperature);

// The per-layer selector: embedding loss at m = 0, hidden + attention loss
// for interior m, prediction loss at m = M+1 (zero when include_prediction
// is off).
Tensor layer_loss(std::size_t m, const LayerMapping& mapping,
                  const ModelActivations& student, const ModelActivations& teacher,
                  const DistillParams& params,
                  const std::vector<std::uint8_t>& pad_mask);

struct ModelLossBreakdown {
    Tensor total;                      // scalar on the tape
    std::vector<double> layer_losses;  // unweighted per-layer values (M+2)
    double embd = 0.0;                 // lambda-weighted aggregates per kind
    double attn = 0.0;
    double hidn = 0.0;
    double pred = 0.0;
};

// sum_m lambda_m * layer_loss(m). Branches with lambda_m == 0 are skipped
// (their logged value is 0).
ModelLossBreakdown model_loss(const LayerMapping& mapping,
                              const ModelActivations& student,
                              const ModelActivations& teacher,
                              const DistillParams& params,
                              const std::vector<std::uint8_t>& pad_mask);

}  // namespace tinydistill
