#include "tinydistill/augment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tinydistill/error.hpp"

namespace tinydistill {

void AugmentConfig::validate() const {
    if (p_t < 0.0 || p_t > 1.0) {
        throw ConfigError("augment: p_t must be in [0,1], got " + std::to_string(p_t));
    }
    if (n_a < 1) throw ConfigError("augment: n_a must be >= 1");
    if (k < 1) throw ConfigError("augment: k must be >= 1");
}

// --- EmbeddingStore ---------------------------------------------------------

EmbeddingStore EmbeddingStore::load(const std::string& path, std::size_t limit) {
    std::ifstream in(path);
    if (!in) throw IoError("glove: cannot open " + path);
    std::vector<std::pair<std::string, std::vector<double>>> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (limit > 0 && entries.size() >= limit) break;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word.empty()) {
            throw ParseError("glove: " + path + " line " + std::to_string(line_no) +
                             ": missing word");
        }
        std::vector<double> vec;
        double v;
        while (ss >> v) vec.push_back(v);
        if (!ss.eof()) {
            throw ParseError("glove: " + path + " line " + std::to_string(line_no) +
                             ": malformed vector component");
        }
        if (vec.empty()) {
            throw ParseError("glove: " + path + " line " + std::to_string(line_no) +
                             ": no vector components");
        }
        if (!entries.empty() && vec.size() != entries.front().second.size()) {
            throw ParseError("glove: " + path + " line " + std::to_string(line_no) +
                             ": dimension " + std::to_string(vec.size()) +
                             " differs from " +
                             std::to_string(entries.front().second.size()));
        }
        entries.emplace_back(std::move(word), std::move(vec));
    }
    return from_entries(std::move(entries));
}

EmbeddingStore EmbeddingStore::from_entries(
    std::vector<std::pair<std::string, std::vector<double>>> entries) {
    EmbeddingStore store;
    for (auto& [word, vec] : entries) {
        if (store.dim_ == 0) store.dim_ = vec.size();
        if (vec.size() != store.dim_) {
            throw ParseError("glove: inconsistent dimension for '" + word + "'");
        }
        std::string key;
        key.reserve(word.size());
        for (char c : word)
            key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        if (store.index_.count(key)) continue;  // first occurrence wins
        store.index_.emplace(key, store.words_.size());
        store.words_.push_back(std::move(key));
        store.vectors_.push_back(std::move(vec));
    }
    return store;
}

const std::vector<double>* EmbeddingStore::find(const std::string& word) const {
    std::string key;
    key.reserve(word.size());
    for (char c : word)
        key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    auto it = index_.find(key);
    return it == index_.end() ? nullptr : &vectors_[it->second];
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<std::string> EmbeddingStore::neighbors(const std::string& word,
                                                   std::size_t k) const {
    const std::vector<double>* query = find(word);
    if (!query) return {};
    std::string key;
    for (char c : word)
        key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(words_.size());
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (words_[i] == key) continue;
        scored.emplace_back(cosine(*query, vectors_[i]), i);
    }
    std::sort(scored.begin(), scored.end(), [this](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return words_[a.second] < words_[b.second];
    });
    std::vector<std::string> out;
    out.reserve(std::min(k, scored.size()));
    for (std::size_t i = 0; i < scored.size() && out.size() < k; ++i)
        out.push_back(words_[scored[i].second]);
    return out;
}

// --- MLM candidates ---------------------------------------------------------

std::vector<std::string> mlm_candidates(const TransformerModel& model,
                                        const Vocab& vocab,
                                        const std::vector<std::string>& words,
                                        std::size_t index, std::size_t k) {
    if (!model.config().mlm_head) {
        throw ConfigError("augment: teacher model has no MLM head");
    }
    if (index >= words.size()) {
        throw ValueError("augment: word index " + std::to_string(index) + " out of range");
    }
    std::vector<std::int32_t> ids;
    ids.push_back(Vocab::kCls);
    std::size_t mask_pos = 0;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i == index) mask_pos = ids.size();
        for (std::int32_t id : tokenize(vocab, words[i])) ids.push_back(id);
    }
    ids.push_back(Vocab::kSep);
    if (ids.size() > model.config().max_len) {
        ids.resize(model.config().max_len);
        ids.back() = Vocab::kSep;
        if (mask_pos + 1 >= ids.size()) return {};  // masked word truncated away
    }
    std::vector<std::uint8_t> mask(ids.size(), 1);

    NoGradGuard no_grad;
    ModelActivations acts = model.forward(ids, mask, 1, ids.size());
    Tensor logits = model.mlm_logits(acts.hiddens.back());  // [1,l,V]
    std::size_t v = vocab.size();
    const double* row = logits.data().data() + mask_pos * v;

    std::vector<std::int32_t> order;
    order.reserve(v);
    for (std::size_t id = 4; id < v; ++id) {
        if (vocab.piece(static_cast<std::int32_t>(id)).rfind("##", 0) == 0) continue;
        order.push_back(static_cast<std::int32_t>(id));
    }
    std::sort(order.begin(), order.end(), [row](std::int32_t a, std::int32_t b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    if (order.size() > k) order.resize(k);
    std::vector<std::string> out;
    out.reserve(order.size());
    for (std::int32_t id : order) out.push_back(vocab.piece(id));
    return out;
}

ModelReplacementSource::ModelReplacementSource(const TransformerModel& model,
                                               const Vocab& vocab,
                                               const EmbeddingStore* store,
                                               std::size_t k)
    : model_(model), vocab_(vocab), store_(store), k_(k) {
    if (!model.config().mlm_head) {
        throw ConfigError("augment: teacher model has no MLM head");
    }
}

bool ModelReplacementSource::single_piece(const std::string& word) const {
    return is_single_piece(vocab_, word);
}

std::vector<std::string> ModelReplacementSource::mlm_candidates(
    const std::vector<std::string>& words, std::size_t index) const {
    return tinydistill::mlm_candidates(model_, vocab_, words, index, k_);
}

std::vector<std::string> ModelReplacementSource::neighbor_candidates(
    const std::string& word) const {
    if (!store_) return {};
    return store_->neighbors(word, k_);
}

// --- the augmentation procedure ---------------------------------------------

std::vector<std::vector<std::string>> augment_example(
    const std::vector<std::string>& words, const AugmentConfig& config,
    const ReplacementSource& source, Rng& rng) {
    config.validate();
    std::vector<std::vector<std::string>> variants;
    variants.reserve(config.n_a);
    for (std::size_t n = 0; n < config.n_a; ++n) {
        std::vector<std::string> working = words;
        for (std::size_t i = 0; i < working.size(); ++i) {
            std::vector<std::string> candidates;
            if (source.single_piece(words[i])) {
                // Mask position i on the working copy for candidate
                // generation, then restore it; earlier replacements stay.
                std::string original = working[i];
                working[i] = Vocab::kMaskPiece;
                candidates = source.mlm_candidates(working, i);
                working[i] = original;
            } else {
                candidates = source.neighbor_candidates(words[i]);
            }
            double p = uniform01(rng);
            if (p <= config.p_t && !candidates.empty()) {
                working[i] = candidates[bounded(rng, candidates.size())];
            }
        }
        variants.push_back(std::move(working));
    }
    return variants;
}

namespace {

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

}  // namespace

std::vector<Example> augment_dataset(const std::vector<Example>& examples,
                                     const AugmentConfig& config,
                                     const ReplacementSource& source) {
    config.validate();
    std::vector<Example> out;
    out.reserve(examples.size() * (config.n_a + (config.include_original ? 1 : 0)));
    for (std::size_t idx = 0; idx < examples.size(); ++idx) {
        const Example& ex = examples[idx];
        std::vector<std::string> words_a = split_words(ex.text_a);
        std::vector<std::string> words_b = split_words(ex.text_b);

        if (config.include_original) out.push_back(ex);

        Rng rng_a(mix_seed(config.seed, 2 * idx));
        Rng rng_b(mix_seed(config.seed, 2 * idx + 1));
        std::vector<std::vector<std::string>> variants_a, variants_b;
        if (!words_a.empty()) {
            variants_a = augment_example(words_a, config, source, rng_a);
        }
        if (!words_b.empty()) {
            variants_b = augment_example(words_b, config, source, rng_b);
        }
        for (std::size_t n = 0; n < config.n_a; ++n) {
            Example variant;
            variant.label = ex.label;
            variant.text_a = variants_a.empty() ? ex.text_a : join_words(variants_a[n]);
            variant.text_b = variants_b.empty() ? ex.text_b : join_words(variants_b[n]);
            out.push_back(std::move(variant));
        }
    }
    return out;
}

}  // namespace tinydistill
