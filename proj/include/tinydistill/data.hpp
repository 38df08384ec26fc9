#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tinydistill/rng.hpp"

namespace tinydistill {

// Fixed subword vocabulary. Ids 0..3 are reserved; continuation pieces carry
// a "##" prefix. Tokenization never fails as long as every character of the
// corpus alphabet is present both as a plain piece and as a "##" piece.
class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kMask = 1;
    static constexpr std::int32_t kCls = 2;
    static constexpr std::int32_t kSep = 3;
    static const char* kPadPiece;   // "[PAD]"
    static const char* kMaskPiece;  // "[MASK]"
    static const char* kClsPiece;   // "[CLS]"
    static const char* kSepPiece;   // "[SEP]"

    // pieces[0..3] must be the reserved tokens; all pieces unique.
    static Vocab from_pieces(std::vector<std::string> pieces);

    // One piece per line, line number = id.
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    // Frequency-built vocabulary: reserved tokens, every character of the
    // texts' alphabet (plain and ## form), then the max_words most frequent
    // whole words.
    static Vocab build(const std::vector<std::string>& texts, std::size_t max_words);

    std::size_t size() const { return pieces_.size(); }
    const std::string& piece(std::int32_t id) const;
    const std::vector<std::string>& pieces() const { return pieces_; }
    // -1 when absent.
    std::int32_t id(const std::string& piece) const;
    bool is_reserved(std::int32_t id) const { return id >= 0 && id <= 3; }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, std::int32_t> index_;
};

// Greedy longest-match-first decomposition of a non-empty, lowercase word.
std::vector<std::int32_t> tokenize(const Vocab& vocab, const std::string& word);

// True iff tokenize yields exactly one piece.
bool is_single_piece(const Vocab& vocab, const std::string& word);

// Concatenate pieces, stripping "##" prefixes.
std::string detokenize(const Vocab& vocab, const std::vector<std::int32_t>& ids);

// Lowercase and split on whitespace.
std::vector<std::string> split_words(const std::string& text);

struct Example {
    std::string text_a;
    std::string text_b;  // empty for single-sentence tasks
    std::int32_t label = 0;
};

// GLUE-style TSV with a header naming text_a[, text_b], label. A zero-byte
// file yields an empty list; malformed rows raise ParseError with the
// 1-based line number.
std::vector<Example> load_tsv(const std::string& path);
void save_tsv(const std::string& path, const std::vector<Example>& examples,
              bool pair_task);
// Whether the file's header declares a text_b column.
bool tsv_has_pair_column(const std::string& path);

struct Batch {
    std::size_t batch = 0;
    std::size_t len = 0;
    std::vector<std::int32_t> tokens;    // [batch*len], row-major
    std::vector<std::uint8_t> pad_mask;  // true on non-PAD positions
    std::vector<std::int32_t> labels;    // [batch]
};

// [CLS] a [SEP] (b [SEP]) truncated to max_len; pairs trim the longer text
// first.
std::vector<std::int32_t> encode_example(const Vocab& vocab, const Example& example,
                                         std::size_t max_len);

// Shuffles by seed, then packs into batches padded to the per-batch maximum
// length. The multiset of examples is preserved.
std::vector<Batch> make_batches(const std::vector<Example>& examples,
                                const Vocab& vocab, std::size_t max_len,
                                std::size_t batch_size, std::uint64_t seed);

// File-order batches for evaluation.
std::vector<Batch> make_eval_batches(const std::vector<Example>& examples,
                                     const Vocab& vocab, std::size_t max_len,
                                     std::size_t batch_size);

}  // namespace tinydistill
