#include "tinydistill/distill.hpp"

#include "tinydistill/error.hpp"

namespace tinydistill {

namespace {

Tensor as_constant(const Tensor& t) {
    return t.participates_in_grad() ? t.detach() : t;
}

// 0/1 weights over (query, key) pairs, broadcast across heads.
Tensor attention_pair_weights(const std::vector<std::uint8_t>& pad_mask,
                              std::size_t batch, std::size_t heads, std::size_t len) {
    std::vector<double> w(batch * heads * len * len, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t q = 0; q < len; ++q) {
            if (!pad_mask[b * len + q]) continue;
            for (std::size_t k = 0; k < len; ++k) {
                if (!pad_mask[b * len + k]) continue;
                for (std::size_t h = 0; h < heads; ++h)
                    w[((b * heads + h) * len + q) * len + k] = 1.0;
            }
        }
    }
    return Tensor::from({batch, heads, len, len}, std::move(w));
}

// 0/1 weights over positions, broadcast across the feature dimension.
Tensor position_weights(const std::vector<std::uint8_t>& pad_mask, std::size_t batch,
                        std::size_t len, std::size_t dim) {
    std::vector<double> w(batch * len * dim, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i)
            if (pad_mask[b * len + i])
                for (std::size_t j = 0; j < dim; ++j) w[(b * len + i) * dim + j] = 1.0;
    return Tensor::from({batch, len, dim}, std::move(w));
}

Tensor projected_mse(const Tensor& student, const Tensor& teacher,
                     const Tensor& projection,
                     const std::vector<std::uint8_t>& pad_mask, const char* what) {
    if (student.rank() != 3 || teacher.rank() != 3) {
        throw ShapeError(std::string(what) + ": expected [batch,len,dim] inputs, got " +
                         shape_str(student.shape()) + " and " + shape_str(teacher.shape()));
    }
    if (projection.rank() != 2 || projection.dim(0) != student.dim(2) ||
        projection.dim(1) != teacher.dim(2)) {
        throw ShapeError(std::string(what) + ": projection " + shape_str(projection.shape()) +
                         " does not map student dim " + std::to_string(student.dim(2)) +
                         " to teacher dim " + std::to_string(teacher.dim(2)));
    }
    if (student.dim(0) != teacher.dim(0) || student.dim(1) != teacher.dim(1)) {
        throw ShapeError(std::string(what) + ": batch/length mismatch " +
                         shape_str(student.shape()) + " vs " + shape_str(teacher.shape()));
    }
    std::size_t batch = student.dim(0), len = student.dim(1);
    if (pad_mask.size() != batch * len) {
        throw ShapeError(std::string(what) + ": pad mask length mismatch");
    }
    Tensor projected = matmul(student, projection);
    Tensor weights = position_weights(pad_mask, batch, len, teacher.dim(2));
    return masked_mse(projected, as_constant(teacher), weights);
}

}  // namespace

DistillParams DistillParams::create(std::size_t student_layers,
                                    std::size_t student_hidden,
                                    std::size_t teacher_hidden, std::uint64_t seed,
                                    bool shared_hidden_projection,
                                    bool projection_identity) {
    if (projection_identity && student_hidden != teacher_hidden) {
        throw ConfigError("distill: identity projections require matching hidden sizes, got " +
                          std::to_string(student_hidden) + " vs " +
                          std::to_string(teacher_hidden));
    }
    DistillParams params;
    params.lambda.assign(student_layers + 2, 1.0);
    params.shared_hidden_projection = shared_hidden_projection;
    Rng rng(mix_seed(seed, 0x70726f6aULL));  // projection stream
    auto make_projection = [&]() {
        Tensor t;
        if (projection_identity) {
            std::vector<double> eye(student_hidden * teacher_hidden, 0.0);
            for (std::size_t i = 0; i < student_hidden; ++i)
                eye[i * teacher_hidden + i] = 1.0;
            t = Tensor::from({student_hidden, teacher_hidden}, std::move(eye));
        } else {
            t = Tensor::randn({student_hidden, teacher_hidden}, rng, 0.0, 0.02);
        }
        t.set_requires_grad(true);
        return t;
    };
    params.embedding_projection = make_projection();
    std::size_t count = shared_hidden_projection ? 1 : student_layers;
    params.hidden_projections.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        params.hidden_projections.push_back(make_projection());
    return params;
}

const Tensor& DistillParams::hidden_projection(std::size_t m) const {
    if (m < 1) throw ConfigError("distill: interior layer index must be >= 1");
    if (shared_hidden_projection) return hidden_projections.at(0);
    if (m > hidden_projections.size()) {
        throw ConfigError("distill: no hidden projection for layer " + std::to_string(m));
    }
    return hidden_projections[m - 1];
}

std::vector<Tensor> DistillParams::trainable() const {
    std::vector<Tensor> out;
    out.push_back(embedding_projection);
    for (const Tensor& t : hidden_projections) out.push_back(t);
    return out;
}

void DistillParams::validate(std::size_t student_layers) const {
    if (lambda.size() != student_layers + 2) {
        throw ConfigError("distill: lambda has " + std::to_string(lambda.size()) +
                          " entries, expected M+2 = " + std::to_string(student_layers + 2));
    }
    for (double l : lambda) {
        if (l < 0.0) throw ConfigError("distill: lambda weights must be non-negative");
    }
    if (temperature <= 0.0) {
        throw ConfigError("distill: temperature must be positive, got " +
                          std::to_string(temperature));
    }
    std::size_t expected = shared_hidden_projection ? 1 : student_layers;
    if (hidden_projections.size() != expected) {
        throw ConfigError("distill: expected " + std::to_string(expected) +
                          " hidden projections, got " +
                          std::to_string(hidden_projections.size()));
    }
}

Tensor attn_loss(const Tensor& student_attn, const Tensor& teacher_attn,
                 const std::vector<std::uint8_t>& pad_mask) {
    if (student_attn.rank() != 4 || teacher_attn.rank() != 4) {
        throw ShapeError("attn_loss: expected [batch,heads,len,len] scores");
    }
    if (student_attn.dim(1) != teacher_attn.dim(1)) {
        throw ConfigError("attn_loss: head count mismatch, student " +
                          std::to_string(student_attn.dim(1)) + " vs teacher " +
                          std::to_string(teacher_attn.dim(1)));
    }
    if (student_attn.shape() != teacher_attn.shape()) {
        throw ShapeError("attn_loss: shape mismatch " + shape_str(student_attn.shape()) +
                         " vs " + shape_str(teacher_attn.shape()));
    }
    std::size_t batch = student_attn.dim(0), heads = student_attn.dim(1),
                len = student_attn.dim(2);
    if (pad_mask.size() != batch * len) {
        throw ShapeError("attn_loss: pad mask length mismatch");
    }
    Tensor weights = attention_pair_weights(pad_mask, batch, heads, len);
    return masked_mse(student_attn, as_constant(teacher_attn), weights);
}

Tensor hidn_loss(const Tensor& student_hidden, const Tensor& teacher_hidden,
                 const Tensor& w_h, const std::vector<std::uint8_t>& pad_mask) {
    return projected_mse(student_hidden, teacher_hidden, w_h, pad_mask, "hidn_loss");
}

Tensor embd_loss(const Tensor& student_embed, const Tensor& teacher_embed,
                 const Tensor& w_e, const std::vector<std::uint8_t>& pad_mask) {
    return projected_mse(student_embed, teacher_embed, w_e, pad_mask, "embd_loss");
}

Tensor pred_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                 double temperature) {
    return soft_cross_entropy(teacher_logits, student_logits, temperature);
}

Tensor layer_loss(std::size_t m, const LayerMapping& mapping,
                  const ModelActivations& student, const ModelActivations& teacher,
                  const DistillParams& params,
                  const std::vector<std::uint8_t>& pad_mask) {
    std::size_t m_layers = mapping.student_layers();
    if (m > m_layers + 1) {
        throw ValueError("layer_loss: index " + std::to_string(m) + " out of range [0," +
                         std::to_string(m_layers + 1) + "]");
    }
    if (student.hiddens.size() != m_layers ||
        teacher.hiddens.size() != mapping.teacher_layers()) {
        throw ConfigError("layer_loss: activation counts do not match the mapping (student " +
                          std::to_string(student.hiddens.size()) + "/" +
                          std::to_string(m_layers) + ", teacher " +
                          std::to_string(teacher.hiddens.size()) + "/" +
                          std::to_string(mapping.teacher_layers()) + ")");
    }
    if (m == 0) {
        return embd_loss(student.embeddings, teacher.embeddings,
                         params.embedding_projection, pad_mask);
    }
    if (m == m_layers + 1) {
        if (!params.include_prediction) return Tensor::scalar(0.0);
        return pred_loss(teacher.logits, student.logits, params.temperature);
    }
    std::size_t n = mapping(m);  // teacher layer, 1-based
    Tensor loss = Tensor::scalar(0.0);
    bool first = true;
    if (params.use_hidn) {
        loss = hidn_loss(student.hiddens[m - 1], teacher.hiddens[n - 1],
                         params.hidden_projection(m), pad_mask);
        first = false;
    }
    if (params.use_attn) {
        Tensor a = attn_loss(student.attentions[m - 1], teacher.attentions[n - 1], pad_mask);
        loss = first ? a : add(loss, a);
    }
    return loss;
}

ModelLossBreakdown model_loss(const LayerMapping& mapping,
                              const ModelActivations& student,
                              const ModelActivations& teacher,
                              const DistillParams& params,
                              const std::vector<std::uint8_t>& pad_mask) {
    std::size_t m_layers = mapping.student_layers();
    params.validate(m_layers);
    ModelLossBreakdown out;
    out.layer_losses.assign(m_layers + 2, 0.0);
    Tensor total;
    bool have = false;
    auto accumulate = [&](const Tensor& term) {
        total = have ? add(total, term) : term;
        have = true;
    };
    // m = 0: embedding layer
    if (params.lambda[0] != 0.0) {
        Tensor l = layer_loss(0, mapping, student, teacher, params, pad_mask);
        out.layer_losses[0] = l.value();
        out.embd = params.lambda[0] * l.value();
        accumulate(scale(l, params.lambda[0]));
    }
    // interior layers
    for (std::size_t m = 1; m <= m_layers; ++m) {
        if (params.lambda[m] == 0.0) continue;
        Tensor h, a;
        double hv = 0.0, av = 0.0;
        if (params.use_hidn) {
            std::size_t n = mapping(m);
            h = hidn_loss(student.hiddens[m - 1], teacher.hiddens[n - 1],
                          params.hidden_projection(m), pad_mask);
            hv = h.value();
        }
        if (params.use_attn) {
            std::size_t n = mapping(m);
            a = attn_loss(student.attentions[m - 1], teacher.attentions[n - 1], pad_mask);
            av = a.value();
        }
        out.layer_losses[m] = hv + av;
        out.hidn += params.lambda[m] * hv;
        out.attn += params.lambda[m] * av;
        if (params.use_hidn && params.use_attn) {
            accumulate(scale(add(h, a), params.lambda[m]));
        } else if (params.use_hidn) {
            accumulate(scale(h, params.lambda[m]));
        } else if (params.use_attn) {
            accumulate(scale(a, params.lambda[m]));
        }
    }
    // m = M+1: prediction layer
    if (params.lambda[m_layers + 1] != 0.0 && params.include_prediction) {
        Tensor l = layer_loss(m_layers + 1, mapping, student, teacher, params, pad_mask);
        out.layer_losses[m_layers + 1] = l.value();
        out.pred = params.lambda[m_layers + 1] * l.value();
        accumulate(scale(l, params.lambda[m_layers + 1]));
    }
    out.total = have ? total : Tensor::scalar(0.0);
    return out;
}

}  // namespace tinydistill
