#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinydistill/data.hpp"

namespace tinydistill {

// Synthetic token-pattern classification corpora.
//
// kBigram: label 1 iff the trigger bigram "zig zag" occurs (in order,
// adjacent). Negatives may contain both triggers non-adjacent, one trigger,
// or none, so unigram presence is not sufficient.
//
// kUnigram: linearly separable sentiment toy; each sentence carries exactly
// one of "good"/"bad" and the label follows it.
struct ToyTaskSpec {
    enum class Kind { kBigram, kUnigram };
    Kind kind = Kind::kBigram;
    std::size_t filler_words = 20;
    std::size_t min_words = 6;
    std::size_t max_words = 10;
    std::size_t train_examples = 64;
    std::size_t dev_examples = 160;
    std::size_t test_examples = 160;
    std::size_t unlabeled_examples = 512;
    std::uint64_t seed = 0;
};

std::vector<Example> generate_toy_examples(const ToyTaskSpec& spec, std::size_t count,
                                           Rng& rng);

struct ToyTaskFiles {
    std::string train;
    std::string dev;
    std::string test;
    std::string general;  // unlabeled-corpus stand-in (labels present, ignored)
    std::string vocab;
};

// Writes train/dev/test/general TSVs plus a full-coverage vocabulary into
// dir and returns the paths. Deterministic given spec.seed.
ToyTaskFiles write_toy_task(const std::string& dir, const ToyTaskSpec& spec);

}  // namespace tinydistill
