#include "tinydistill/toycorpus.hpp"

#include <filesystem>

#include "tinydistill/error.hpp"

namespace tinydistill {

namespace {

std::vector<std::string> filler_vocabulary(std::size_t count) {
    static const char* syllables[] = {"ba", "do", "fi", "gu", "ka", "lo", "mi", "nu",
                                      "pa", "re", "si", "tu", "va", "wo", "ye", "bo"};
    constexpr std::size_t n = sizeof(syllables) / sizeof(syllables[0]);
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; out.size() < count && i < n * n; ++i) {
        out.push_back(std::string(syllables[i / n]) + syllables[i % n]);
    }
    if (out.size() < count) {
        throw ConfigError("toycorpus: at most " + std::to_string(n * n) +
                          " filler words available");
    }
    return out;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

Example bigram_example(const ToyTaskSpec& spec,
                       const std::vector<std::string>& fillers, Rng& rng) {
    std::size_t len = spec.min_words + bounded(rng, spec.max_words - spec.min_words + 1);
    std::vector<std::string> words(len);
    for (auto& w : words) w = fillers[bounded(rng, fillers.size())];
    Example ex;
    ex.label = static_cast<std::int32_t>(bounded(rng, 2));
    if (ex.label == 1) {
        std::size_t pos = bounded(rng, len - 1);
        words[pos] = "zig";
        words[pos + 1] = "zag";
    } else {
        double u = uniform01(rng);
        if (u < 0.5) {
            // both triggers, never as the ordered adjacent pair
            for (;;) {
                std::size_t i = bounded(rng, len);
                std::size_t j = bounded(rng, len);
                if (i == j || j == i + 1) continue;
                words[i] = "zig";
                words[j] = "zag";
                break;
            }
        } else if (u < 0.75) {
            words[bounded(rng, len)] = uniform01(rng) < 0.5 ? "zig" : "zag";
        }
    }
    ex.text_a = join(words);
    return ex;
}

Example unigram_example(const ToyTaskSpec& spec,
                        const std::vector<std::string>& fillers, Rng& rng) {
    std::size_t len = spec.min_words + bounded(rng, spec.max_words - spec.min_words + 1);
    std::vector<std::string> words(len);
    for (auto& w : words) w = fillers[bounded(rng, fillers.size())];
    Example ex;
    ex.label = static_cast<std::int32_t>(bounded(rng, 2));
    words[bounded(rng, len)] = ex.label == 1 ? "good" : "bad";
    ex.text_a = join(words);
    return ex;
}

}  // namespace

std::vector<Example> generate_toy_examples(const ToyTaskSpec& spec, std::size_t count,
                                           Rng& rng) {
    if (spec.min_words < 2 || spec.max_words < spec.min_words) {
        throw ConfigError("toycorpus: need 2 <= min_words <= max_words");
    }
    std::vector<std::string> fillers = filler_vocabulary(spec.filler_words);
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(spec.kind == ToyTaskSpec::Kind::kBigram
                          ? bigram_example(spec, fillers, rng)
                          : unigram_example(spec, fillers, rng));
    }
    return out;
}

ToyTaskFiles write_toy_task(const std::string& dir, const ToyTaskSpec& spec) {
    std::filesystem::create_directories(dir);
    Rng rng(mix_seed(spec.seed, 0x746f79ULL));
    std::vector<Example> train = generate_toy_examples(spec, spec.train_examples, rng);
    std::vector<Example> dev = generate_toy_examples(spec, spec.dev_examples, rng);
    std::vector<Example> test = generate_toy_examples(spec, spec.test_examples, rng);
    std::vector<Example> general =
        generate_toy_examples(spec, spec.unlabeled_examples, rng);

    std::vector<std::string> texts;
    texts.reserve(train.size() + dev.size() + test.size() + general.size());
    for (const auto* split : {&train, &dev, &test, &general})
        for (const Example& ex : *split) texts.push_back(ex.text_a);
    // All task words become whole pieces, so every word is single-piece.
    Vocab vocab = Vocab::build(texts, 4096);

    ToyTaskFiles files;
    files.train = (std::filesystem::path(dir) / "train.tsv").string();
    files.dev = (std::filesystem::path(dir) / "dev.tsv").string();
    files.test = (std::filesystem::path(dir) / "test.tsv").string();
    files.general = (std::filesystem::path(dir) / "general.tsv").string();
    files.vocab = (std::filesystem::path(dir) / "vocab.txt").string();
    save_tsv(files.train, train, false);
    save_tsv(files.dev, dev, false);
    save_tsv(files.test, test, false);
    save_tsv(files.general, general, false);
    vocab.save(files.vocab);
    return files;
}

}  // namespace tinydistill
