#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tinydistill/tensor.hpp"

namespace tinydistill {

// Architecture hyperparameters of an encoder stack.
struct TransformerConfig {
    std::size_t num_layers = 2;   // M
    std::size_t hidden = 16;      // d
    std::size_t ffn = 32;         // d_i
    std::size_t heads = 2;        // h; hidden % heads == 0
    std::size_t vocab_size = 8;   // V; ids 0..3 reserved (pad/mask/cls/sep)
    std::size_t max_len = 32;
    std::size_t num_classes = 2;  // c
    double dropout = 0.0;
    std::uint64_t seed = 0;
    bool mlm_head = false;        // adds a vocab-sized output head per position

    std::size_t head_dim() const { return hidden / heads; }
    void validate() const;
};

// Deterministic arithmetic over the config; degenerate cases (num_layers == 0
// or num_classes == 0) count an embedding-only / head-less model.
std::int64_t parameter_count(const TransformerConfig& config);

struct LayerWeights {
    Tensor wq, wk, wv, wo;                            // [d,d] each, no bias
    Tensor w1, b1, w2, b2;                            // [d,d_i], [d_i], [d_i,d], [d]
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;    // [d] each
};

// The behavior-function outputs of one forward pass.
struct ModelActivations {
    Tensor embeddings;               // [b,l,d]
    std::vector<Tensor> attentions;  // per layer [b,h,l,l], scaled scores
                                     // QK^T/sqrt(d_k) BEFORE softmax, unmasked
    std::vector<Tensor> hiddens;     // per layer [b,l,d]
    Tensor logits;                   // [b,c]
};

// A = QK^T / sqrt(d_k) for q,k shaped [b,h,l,d_k].
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t d_k);

// Additive attention bias: 0 at real key positions, -1e9 at padded ones,
// expanded to [b,h,l,l]. Constant (no gradient).
Tensor attention_mask_bias(const std::vector<std::uint8_t>& pad_mask,
                           std::size_t batch, std::size_t heads, std::size_t len);

struct MhaResult {
    Tensor output;  // [b,l,d]
    Tensor scores;  // [b,h,l,l] pre-softmax, unmasked
};

// Multi-head attention; the padding bias is applied inside the softmax while
// the returned scores stay unmasked (they are the distillation target).
MhaResult mha(const Tensor& x, const LayerWeights& w, std::size_t heads,
              const Tensor& mask_bias);

// max(0, x W1 + b1) W2 + b2.
Tensor ffn(const Tensor& x, const LayerWeights& w);

class TransformerModel {
public:
    explicit TransformerModel(TransformerConfig config);

    const TransformerConfig& config() const { return config_; }

    // E = token + position embeddings; per layer MHA -> add&norm -> FFN ->
    // add&norm (post-layer-norm); logits from the position-0 hidden state.
    // tokens/pad_mask are row-major [batch, len]. dropout_rng enables the
    // configured dropout rate (training only); null means no dropout.
    ModelActivations forward(const std::vector<std::int32_t>& tokens,
                             const std::vector<std::uint8_t>& pad_mask,
                             std::size_t batch, std::size_t len,
                             Rng* dropout_rng = nullptr) const;

    // [b,l,V] masked-language-model logits from the final hidden states.
    // Requires config.mlm_head.
    Tensor mlm_logits(const Tensor& last_hidden) const;

    // All learnable tensors in a fixed canonical order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;

    std::int64_t parameter_count() const { return tinydistill::parameter_count(config_); }

    Tensor token_embedding;     // [V,d]
    Tensor position_embedding;  // [max_len,d]
    std::vector<LayerWeights> layers;
    Tensor classifier_weight;   // [d,c]
    Tensor classifier_bias;     // [c]
    Tensor mlm_weight;          // [d,V] when mlm_head
    Tensor mlm_bias;            // [V]

private:
    TransformerConfig config_;
};

}  // namespace tinydistill
