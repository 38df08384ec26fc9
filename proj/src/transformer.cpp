#include "tinydistill/transformer.hpp"

#include <cmath>

#include "tinydistill/error.hpp"

namespace tinydistill {

void TransformerConfig::validate() const {
    if (num_layers < 1) throw ConfigError("transformer: num_layers must be >= 1");
    if (heads < 1) throw ConfigError("transformer: heads must be >= 1");
    if (hidden < heads || hidden % heads != 0) {
        throw ConfigError("transformer: hidden (" + std::to_string(hidden) +
                          ") must be a positive multiple of heads (" +
                          std::to_string(heads) + ")");
    }
    if (ffn < 1) throw ConfigError("transformer: ffn must be >= 1");
    if (vocab_size < 4) {
        throw ConfigError("transformer: vocab_size must be >= 4 (pad/mask/cls/sep)");
    }
    if (max_len < 1) throw ConfigError("transformer: max_len must be >= 1");
    if (num_classes < 1) throw ConfigError("transformer: num_classes must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("transformer: dropout must be in [0,1)");
    }
}

std::int64_t parameter_count(const TransformerConfig& c) {
    std::int64_t d = static_cast<std::int64_t>(c.hidden);
    std::int64_t di = static_cast<std::int64_t>(c.ffn);
    std::int64_t v = static_cast<std::int64_t>(c.vocab_size);
    std::int64_t total = v * d + static_cast<std::int64_t>(c.max_len) * d;
    std::int64_t per_layer = 4 * d * d          // W_Q, W_K, W_V, W
                             + d * di + di      // W1, b1
                             + di * d + d       // W2, b2
                             + 4 * d;           // two layer norms
    total += static_cast<std::int64_t>(c.num_layers) * per_layer;
    if (c.num_classes > 0) total += d * static_cast<std::int64_t>(c.num_classes) +
                                    static_cast<std::int64_t>(c.num_classes);
    if (c.mlm_head) total += d * v + v;
    return total;
}

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t d_k) {
    if (q.shape() != k.shape() || q.rank() != 4) {
        throw ShapeError("attention_scores: q and k must share shape [b,h,l,d_k], got " +
                         shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    }
    return scale(matmul(q, transpose_last_two(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
}

Tensor attention_mask_bias(const std::vector<std::uint8_t>& pad_mask,
                           std::size_t batch, std::size_t heads, std::size_t len) {
    if (pad_mask.size() != batch * len) {
        throw ShapeError("attention_mask_bias: mask length " +
                         std::to_string(pad_mask.size()) + " != batch*len");
    }
    std::vector<double> bias(batch * heads * len * len, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < len; ++k) {
            if (pad_mask[b * len + k]) continue;
            for (std::size_t h = 0; h < heads; ++h) {
                double* row0 = bias.data() + ((b * heads + h) * len) * len;
                for (std::size_t q = 0; q < len; ++q) row0[q * len + k] = -1e9;
            }
        }
    }
    return Tensor::from({batch, heads, len, len}, std::move(bias));
}

MhaResult mha(const Tensor& x, const LayerWeights& w, std::size_t heads,
              const Tensor& mask_bias) {
    std::size_t d = x.dim(2);
    std::size_t d_k = d / heads;
    Tensor qh = split_heads(matmul(x, w.wq), heads);
    Tensor kh = split_heads(matmul(x, w.wk), heads);
    Tensor vh = split_heads(matmul(x, w.wv), heads);
    Tensor scores = attention_scores(qh, kh, d_k);
    Tensor weights = softmax_rows(add(scores, mask_bias));
    Tensor context = merge_heads(matmul(weights, vh));
    return MhaResult{matmul(context, w.wo), scores};
}

Tensor ffn(const Tensor& x, const LayerWeights& w) {
    Tensor h = relu(add_bias(matmul(x, w.w1), w.b1));
    return add_bias(matmul(h, w.w2), w.b2);
}

TransformerModel::TransformerModel(TransformerConfig config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    std::size_t d = config_.hidden, di = config_.ffn, v = config_.vocab_size;
    auto weight = [&rng](Shape shape) {
        Tensor t = Tensor::randn(std::move(shape), rng, 0.0, 0.02);
        t.set_requires_grad(true);
        return t;
    };
    auto constant = [](Shape shape, double value) {
        Tensor t = Tensor::full(std::move(shape), value);
        t.set_requires_grad(true);
        return t;
    };
    token_embedding = weight({v, d});
    position_embedding = weight({config_.max_len, d});
    layers.reserve(config_.num_layers);
    for (std::size_t i = 0; i < config_.num_layers; ++i) {
        LayerWeights lw;
        lw.wq = weight({d, d});
        lw.wk = weight({d, d});
        lw.wv = weight({d, d});
        lw.wo = weight({d, d});
        lw.w1 = weight({d, di});
        lw.b1 = constant({di}, 0.0);
        lw.w2 = weight({di, d});
        lw.b2 = constant({d}, 0.0);
        lw.ln1_gain = constant({d}, 1.0);
        lw.ln1_bias = constant({d}, 0.0);
        lw.ln2_gain = constant({d}, 1.0);
        lw.ln2_bias = constant({d}, 0.0);
        layers.push_back(std::move(lw));
    }
    classifier_weight = weight({d, config_.num_classes});
    classifier_bias = constant({config_.num_classes}, 0.0);
    if (config_.mlm_head) {
        mlm_weight = weight({d, v});
        mlm_bias = constant({v}, 0.0);
    }
}

ModelActivations TransformerModel::forward(const std::vector<std::int32_t>& tokens,
                                           const std::vector<std::uint8_t>& pad_mask,
                                           std::size_t batch, std::size_t len,
                                           Rng* dropout_rng) const {
    if (tokens.size() != batch * len || pad_mask.size() != batch * len) {
        throw ShapeError("forward: tokens/pad_mask must be batch*len = " +
                         std::to_string(batch * len) + " entries");
    }
    if (len > config_.max_len) {
        throw ValueError("forward: sequence length " + std::to_string(len) +
                         " exceeds max_len " + std::to_string(config_.max_len));
    }
    for (std::int32_t id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            throw ValueError("forward: token id " + std::to_string(id) +
                             " out of range [0," + std::to_string(config_.vocab_size) + ")");
        }
    }
    double p = dropout_rng ? config_.dropout : 0.0;
    auto maybe_drop = [&](const Tensor& t) {
        return p > 0.0 ? dropout(t, p, *dropout_rng) : t;
    };

    std::vector<std::int32_t> positions(batch * len);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i)
            positions[b * len + i] = static_cast<std::int32_t>(i);

    ModelActivations acts;
    acts.embeddings = add(gather_rows(token_embedding, tokens, {batch, len}),
                          gather_rows(position_embedding, positions, {batch, len}));
    Tensor mask_bias = attention_mask_bias(pad_mask, batch, config_.heads, len);

    Tensor x = acts.embeddings;
    acts.attentions.reserve(config_.num_layers);
    acts.hiddens.reserve(config_.num_layers);
    for (const LayerWeights& lw : layers) {
        MhaResult att = mha(x, lw, config_.heads, mask_bias);
        acts.attentions.push_back(att.scores);
        x = layer_norm(add(x, maybe_drop(att.output)), lw.ln1_gain, lw.ln1_bias);
        Tensor f = ffn(x, lw);
        x = layer_norm(add(x, maybe_drop(f)), lw.ln2_gain, lw.ln2_bias);
        acts.hiddens.push_back(x);
    }
    Tensor cls = select_dim1(x, 0);  // [b,d], the CLS slot
    acts.logits = add_bias(matmul(cls, classifier_weight), classifier_bias);
    return acts;
}

Tensor TransformerModel::mlm_logits(const Tensor& last_hidden) const {
    if (!config_.mlm_head) {
        throw ConfigError("transformer: model has no MLM head (set mlm_head in the config)");
    }
    return add_bias(matmul(last_hidden, mlm_weight), mlm_bias);
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding.token", token_embedding);
    out.emplace_back("embedding.position", position_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::string prefix = "layer" + std::to_string(i) + ".";
        const LayerWeights& lw = layers[i];
        out.emplace_back(prefix + "attn.wq", lw.wq);
        out.emplace_back(prefix + "attn.wk", lw.wk);
        out.emplace_back(prefix + "attn.wv", lw.wv);
        out.emplace_back(prefix + "attn.wo", lw.wo);
        out.emplace_back(prefix + "ffn.w1", lw.w1);
        out.emplace_back(prefix + "ffn.b1", lw.b1);
        out.emplace_back(prefix + "ffn.w2", lw.w2);
        out.emplace_back(prefix + "ffn.b2", lw.b2);
        out.emplace_back(prefix + "ln1.gain", lw.ln1_gain);
        out.emplace_back(prefix + "ln1.bias", lw.ln1_bias);
        out.emplace_back(prefix + "ln2.gain", lw.ln2_gain);
        out.emplace_back(prefix + "ln2.bias", lw.ln2_bias);
    }
    out.emplace_back("classifier.weight", classifier_weight);
    out.emplace_back("classifier.bias", classifier_bias);
    if (config_.mlm_head) {
        out.emplace_back("mlm.weight", mlm_weight);
        out.emplace_back("mlm.bias", mlm_bias);
    }
    return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

}  // namespace tinydistill
