#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinydistill/data.hpp"
#include "tinydistill/rng.hpp"
#include "tinydistill/transformer.hpp"

namespace tinydistill {

struct AugmentConfig {
    double p_t = 0.4;        // replacement threshold probability
    std::size_t n_a = 20;    // variants per example
    std::size_t k = 15;      // candidate set size
    std::uint64_t seed = 0;
    bool include_original = true;

    void validate() const;
};

// Word -> vector store in GloVe text format ("word v1 ... vD" per line).
// Lookup is case-insensitive (keys are stored lowercased).
class EmbeddingStore {
public:
    EmbeddingStore() = default;

    // Loads at most limit entries (0 = all). Malformed lines and dimension
    // changes raise ParseError with the line number.
    static EmbeddingStore load(const std::string& path, std::size_t limit = 0);
    static EmbeddingStore from_entries(
        std::vector<std::pair<std::string, std::vector<double>>> entries);

    std::size_t size() const { return words_.size(); }
    std::size_t dim() const { return dim_; }
    const std::vector<double>* find(const std::string& word) const;

    // Top-k neighbors by cosine similarity, excluding the query itself; ties
    // broken lexicographically. Unknown words yield an empty list.
    std::vector<std::string> neighbors(const std::string& word, std::size_t k) const;

private:
    std::size_t dim_ = 0;
    std::vector<std::string> words_;
    std::vector<std::vector<double>> vectors_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Candidate provider for the augmentation procedure: a language model for
// single-piece words, embedding neighbors for multi-piece words. Lists have
// at most K entries and never contain the MASK token.
class ReplacementSource {
public:
    virtual ~ReplacementSource() = default;
    virtual bool single_piece(const std::string& word) const = 0;
    // words holds the working copy with "[MASK]" at the queried index.
    virtual std::vector<std::string> mlm_candidates(
        const std::vector<std::string>& words, std::size_t index) const = 0;
    virtual std::vector<std::string> neighbor_candidates(const std::string& word) const = 0;
};

// Top-k vocabulary words by MLM logit at the masked position, excluding
// reserved tokens and continuation pieces. The model must have an MLM head.
std::vector<std::string> mlm_candidates(const TransformerModel& model,
                                        const Vocab& vocab,
                                        const std::vector<std::string>& words,
                                        std::size_t index, std::size_t k);

// The production source: a teacher with an MLM head plus an optional
// embedding store (null disables multi-piece replacements).
class ModelReplacementSource : public ReplacementSource {
public:
    ModelReplacementSource(const TransformerModel& model, const Vocab& vocab,
                           const EmbeddingStore* store, std::size_t k);

    bool single_piece(const std::string& word) const override;
    std::vector<std::string> mlm_candidates(const std::vector<std::string>& words,
                                            std::size_t index) const override;
    std::vector<std::string> neighbor_candidates(const std::string& word) const override;

private:
    const TransformerModel& model_;
    const Vocab& vocab_;
    const EmbeddingStore* store_;
    std::size_t k_;
};

// One run of the word-replacement procedure: returns exactly n_a variants of
// words. Per position, candidates come from the language model (single-piece
// words, queried on the working copy with only that position masked) or from
// embedding neighbors (multi-piece words); the position is replaced by a
// uniformly random candidate when p <= p_t, and left alone when the
// candidate set is empty.
std::vector<std::vector<std::string>> augment_example(
    const std::vector<std::string>& words, const AugmentConfig& config,
    const ReplacementSource& source, Rng& rng);

// Expands a dataset: per input example the original (when include_original)
// plus n_a variants, all carrying the original label. Deterministic given
// config.seed; per-example streams are derived from (seed, example index).
std::vector<Example> augment_dataset(const std::vector<Example>& examples,
                                     const AugmentConfig& config,
                                     const ReplacementSource& source);

}  // namespace tinydistill
