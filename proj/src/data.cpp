#include "tinydistill/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tinydistill/error.hpp"

namespace tinydistill {

const char* Vocab::kPadPiece = "[PAD]";
const char* Vocab::kMaskPiece = "[MASK]";
const char* Vocab::kClsPiece = "[CLS]";
const char* Vocab::kSepPiece = "[SEP]";

Vocab Vocab::from_pieces(std::vector<std::string> pieces) {
    if (pieces.size() < 4 || pieces[0] != kPadPiece || pieces[1] != kMaskPiece ||
        pieces[2] != kClsPiece || pieces[3] != kSepPiece) {
        throw ConfigError("vocab: ids 0..3 must be [PAD], [MASK], [CLS], [SEP]");
    }
    Vocab v;
    v.index_.reserve(pieces.size());
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (pieces[i].empty()) {
            throw ConfigError("vocab: empty piece at id " + std::to_string(i));
        }
        auto [it, inserted] = v.index_.emplace(pieces[i], static_cast<std::int32_t>(i));
        if (!inserted) {
            throw ConfigError("vocab: duplicate piece '" + pieces[i] + "' at id " +
                              std::to_string(i));
        }
    }
    v.pieces_ = std::move(pieces);
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocab: cannot open " + path);
    std::vector<std::string> pieces;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pieces.push_back(line);
    }
    return from_pieces(std::move(pieces));
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("vocab: cannot write " + path);
    for (const std::string& p : pieces_) out << p << "\n";
}

Vocab Vocab::build(const std::vector<std::string>& texts, std::size_t max_words) {
    std::map<std::string, std::size_t> freq;
    std::set<char> alphabet;
    for (const std::string& text : texts) {
        for (const std::string& word : split_words(text)) {
            ++freq[word];
            for (char c : word) alphabet.insert(c);
        }
    }
    std::vector<std::string> pieces = {kPadPiece, kMaskPiece, kClsPiece, kSepPiece};
    std::set<std::string> seen(pieces.begin(), pieces.end());
    for (char c : alphabet) {
        std::string plain(1, c);
        if (seen.insert(plain).second) pieces.push_back(plain);
        std::string cont = "##" + plain;
        if (seen.insert(cont).second) pieces.push_back(cont);
    }
    std::vector<std::pair<std::string, std::size_t>> words(freq.begin(), freq.end());
    std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::size_t added = 0;
    for (const auto& [word, count] : words) {
        if (added >= max_words) break;
        if (seen.insert(word).second) {
            pieces.push_back(word);
            ++added;
        }
    }
    return from_pieces(std::move(pieces));
}

const std::string& Vocab::piece(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        throw ValueError("vocab: id " + std::to_string(id) + " out of range");
    }
    return pieces_[static_cast<std::size_t>(id)];
}

std::int32_t Vocab::id(const std::string& piece) const {
    auto it = index_.find(piece);
    return it == index_.end() ? -1 : it->second;
}

std::vector<std::int32_t> tokenize(const Vocab& vocab, const std::string& word) {
    if (word.empty()) throw ValueError("tokenize: empty word");
    std::vector<std::int32_t> out;
    std::size_t pos = 0;
    while (pos < word.size()) {
        std::int32_t match = -1;
        std::size_t match_end = pos;
        for (std::size_t end = word.size(); end > pos; --end) {
            std::string candidate = word.substr(pos, end - pos);
            if (pos > 0) candidate = "##" + candidate;
            std::int32_t id = vocab.id(candidate);
            if (id >= 0) {
                match = id;
                match_end = end;
                break;
            }
        }
        if (match < 0) {
            throw ValueError("tokenize: vocabulary does not cover character '" +
                             word.substr(pos, 1) + "' of word '" + word + "'");
        }
        out.push_back(match);
        pos = match_end;
    }
    return out;
}

bool is_single_piece(const Vocab& vocab, const std::string& word) {
    return tokenize(vocab, word).size() == 1;
}

std::string detokenize(const Vocab& vocab, const std::vector<std::int32_t>& ids) {
    std::string out;
    for (std::int32_t id : ids) {
        const std::string& p = vocab.piece(id);
        if (p.rfind("##", 0) == 0) {
            out += p.substr(2);
        } else {
            out += p;
        }
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) {
                out.push_back(std::move(current));
                current.clear();
            }
        } else {
            current.push_back(static_cast<char>(
                std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!current.empty()) out.push_back(std::move(current));
    return out;
}

// --- TSV --------------------------------------------------------------------

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::string sanitize_field(std::string s) {
    for (char& c : s)
        if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    return s;
}

}  // namespace

std::vector<Example> load_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("tsv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) return {};  // empty file
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header = split_tabs(line);
    std::int64_t col_a = -1, col_b = -1, col_label = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "text_a") col_a = static_cast<std::int64_t>(i);
        else if (header[i] == "text_b") col_b = static_cast<std::int64_t>(i);
        else if (header[i] == "label") col_label = static_cast<std::int64_t>(i);
        else throw ParseError("tsv: " + path + " line 1: unknown column '" + header[i] + "'");
    }
    if (col_a < 0) throw ParseError("tsv: " + path + " line 1: missing column text_a");
    if (col_label < 0) throw ParseError("tsv: " + path + " line 1: missing column label");

    std::vector<Example> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields = split_tabs(line);
        if (fields.size() != header.size()) {
            throw ParseError("tsv: " + path + " line " + std::to_string(line_no) + ": " +
                             std::to_string(fields.size()) + " fields, expected " +
                             std::to_string(header.size()));
        }
        Example ex;
        ex.text_a = fields[static_cast<std::size_t>(col_a)];
        if (col_b >= 0) ex.text_b = fields[static_cast<std::size_t>(col_b)];
        const std::string& label = fields[static_cast<std::size_t>(col_label)];
        try {
            std::size_t consumed = 0;
            ex.label = std::stoi(label, &consumed);
            if (consumed != label.size()) throw std::invalid_argument(label);
        } catch (const std::exception&) {
            throw ParseError("tsv: " + path + " line " + std::to_string(line_no) +
                             ": bad label '" + label + "'");
        }
        out.push_back(std::move(ex));
    }
    return out;
}

bool tsv_has_pair_column(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("tsv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    for (const std::string& col : split_tabs(line)) {
        if (col == "text_b") return true;
    }
    return false;
}

void save_tsv(const std::string& path, const std::vector<Example>& examples,
              bool pair_task) {
    std::ofstream out(path);
    if (!out) throw IoError("tsv: cannot write " + path);
    out << (pair_task ? "text_a\ttext_b\tlabel\n" : "text_a\tlabel\n");
    for (const Example& ex : examples) {
        out << sanitize_field(ex.text_a);
        if (pair_task) out << '\t' << sanitize_field(ex.text_b);
        out << '\t' << ex.label << '\n';
    }
}

// --- batching ---------------------------------------------------------------

std::vector<std::int32_t> encode_example(const Vocab& vocab, const Example& example,
                                         std::size_t max_len) {
    std::vector<std::int32_t> a, b;
    for (const std::string& w : split_words(example.text_a)) {
        for (std::int32_t id : tokenize(vocab, w)) a.push_back(id);
    }
    bool pair = !example.text_b.empty();
    if (pair) {
        for (const std::string& w : split_words(example.text_b)) {
            for (std::int32_t id : tokenize(vocab, w)) b.push_back(id);
        }
    }
    std::size_t specials = pair ? 3 : 2;  // CLS + SEP (+ SEP)
    if (max_len < specials + 1) {
        throw ConfigError("batch: max_len " + std::to_string(max_len) +
                          " too small for special tokens");
    }
    std::size_t budget = max_len - specials;
    while (a.size() + b.size() > budget) {
        // trim the longer text first
        if (b.size() > a.size()) {
            b.pop_back();
        } else {
            a.pop_back();
        }
    }
    std::vector<std::int32_t> row;
    row.reserve(max_len);
    row.push_back(Vocab::kCls);
    row.insert(row.end(), a.begin(), a.end());
    row.push_back(Vocab::kSep);
    if (pair) {
        row.insert(row.end(), b.begin(), b.end());
        row.push_back(Vocab::kSep);
    }
    return row;
}

namespace {

std::vector<Batch> pack_batches(const std::vector<Example>& examples,
                                const std::vector<std::size_t>& order,
                                const Vocab& vocab, std::size_t max_len,
                                std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch: batch_size must be >= 1");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t count = std::min(batch_size, order.size() - start);
        std::vector<std::vector<std::int32_t>> rows(count);
        std::size_t len = 1;
        for (std::size_t i = 0; i < count; ++i) {
            rows[i] = encode_example(vocab, examples[order[start + i]], max_len);
            len = std::max(len, rows[i].size());
        }
        Batch b;
        b.batch = count;
        b.len = len;
        b.tokens.assign(count * len, Vocab::kPad);
        b.pad_mask.assign(count * len, 0);
        b.labels.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < rows[i].size(); ++j) {
                b.tokens[i * len + j] = rows[i][j];
                b.pad_mask[i * len + j] = 1;
            }
            b.labels[i] = examples[order[start + i]].label;
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<Example>& examples,
                                const Vocab& vocab, std::size_t max_len,
                                std::size_t batch_size, std::uint64_t seed) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    shuffle_vector(order, rng);
    return pack_batches(examples, order, vocab, max_len, batch_size);
}

std::vector<Batch> make_eval_batches(const std::vector<Example>& examples,
                                     const Vocab& vocab, std::size_t max_len,
                                     std::size_t batch_size) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    return pack_batches(examples, order, vocab, max_len, batch_size);
}

}  // namespace tinydistill
