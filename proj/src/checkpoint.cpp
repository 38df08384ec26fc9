#include "tinydistill/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tinydistill/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace tinydistill {

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

constexpr const char* kMagic = "tinydistill-checkpoint 1";

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct ManifestWriter {
    std::string text;
    void line(const std::string& s) { text += s + "\n"; }
};

std::string build_manifest(const TransformerModel& model, const Vocab& vocab,
                           const CheckpointMeta& meta, std::uint64_t blob_hash,
                           std::size_t blob_bytes) {
    const TransformerConfig& c = model.config();
    ManifestWriter w;
    w.line(kMagic);
    w.line("stage " + meta.stage);
    w.line("parent " + meta.parent_hash);
    w.line("config.num_layers " + std::to_string(c.num_layers));
    w.line("config.hidden " + std::to_string(c.hidden));
    w.line("config.ffn " + std::to_string(c.ffn));
    w.line("config.heads " + std::to_string(c.heads));
    w.line("config.vocab_size " + std::to_string(c.vocab_size));
    w.line("config.max_len " + std::to_string(c.max_len));
    w.line("config.num_classes " + std::to_string(c.num_classes));
    w.line("config.dropout " + format_double(c.dropout));
    w.line("config.seed " + std::to_string(c.seed));
    w.line("config.mlm_head " + std::to_string(c.mlm_head ? 1 : 0));
    if (meta.dev_accuracy) w.line("dev_accuracy " + format_double(*meta.dev_accuracy));
    w.line("vocab " + std::to_string(vocab.size()));
    for (const std::string& piece : vocab.pieces()) w.line(piece);
    std::size_t offset = 0;
    for (const auto& [name, tensor] : model.named_parameters()) {
        std::string l = "tensor " + name + " " + std::to_string(tensor.rank());
        for (std::size_t d : tensor.shape()) l += " " + std::to_string(d);
        l += " " + std::to_string(offset);
        w.line(l);
        offset += tensor.numel() * sizeof(double);
    }
    w.line("blob " + std::to_string(blob_bytes) + " " + hex64(blob_hash));
    return w.text;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const Vocab& vocab, const CheckpointMeta& meta) {
    if (vocab.size() != model.config().vocab_size) {
        throw ConfigError("checkpoint: vocab size " + std::to_string(vocab.size()) +
                          " does not match config.vocab_size " +
                          std::to_string(model.config().vocab_size));
    }
    std::vector<double> blob;
    for (const auto& [name, tensor] : model.named_parameters()) {
        auto d = tensor.data();
        blob.insert(blob.end(), d.begin(), d.end());
    }
    std::size_t blob_bytes = blob.size() * sizeof(double);
    std::uint64_t blob_hash = fnv1a(blob.data(), blob_bytes);
    std::string manifest = build_manifest(model, vocab, meta, blob_hash, blob_bytes);
    // Self hash covers the manifest so far plus the blob.
    std::uint64_t self = fnv1a(manifest.data(), manifest.size());
    self = fnv1a(blob.data(), blob_bytes, self);
    manifest += "self " + hex64(self) + "\n---\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob_bytes));
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

namespace {

struct ParsedManifest {
    TransformerConfig config;
    CheckpointMeta meta;
    std::vector<std::string> vocab_pieces;
    std::vector<std::pair<std::string, Shape>> tensors;
    std::vector<std::size_t> offsets;
    std::size_t blob_bytes = 0;
    std::uint64_t blob_hash = 0;
    std::string self_hash;
    std::size_t hashed_prefix = 0;  // manifest bytes covered by the self hash
    std::size_t body_offset = 0;    // file offset of the blob
};

[[noreturn]] void corrupt(const std::string& path, std::size_t offset,
                          const std::string& what) {
    throw ParseError("checkpoint: " + path + ": corrupt manifest at byte offset " +
                     std::to_string(offset) + ": " + what);
}

ParsedManifest parse_manifest(const std::string& path, const std::string& content) {
    ParsedManifest m;
    std::size_t pos = 0;
    std::size_t line_start = 0;
    auto next_line = [&](std::string& line) -> bool {
        if (pos >= content.size()) return false;
        line_start = pos;
        std::size_t nl = content.find('\n', pos);
        if (nl == std::string::npos) corrupt(path, pos, "unterminated line");
        line = content.substr(pos, nl - pos);
        pos = nl + 1;
        return true;
    };
    std::string line;
    if (!next_line(line) || line != kMagic) corrupt(path, line_start, "bad magic");

    std::size_t vocab_expected = 0;
    bool saw_blob = false;
    while (next_line(line)) {
        if (line == "---") {
            if (m.self_hash.empty()) corrupt(path, line_start, "missing self hash");
            m.body_offset = pos;
            return m;
        }
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "stage") {
            ss >> m.meta.stage;
        } else if (key == "parent") {
            ss >> m.meta.parent_hash;
        } else if (key == "dev_accuracy") {
            double v;
            if (!(ss >> v)) corrupt(path, line_start, "bad dev_accuracy");
            m.meta.dev_accuracy = v;
        } else if (key.rfind("config.", 0) == 0) {
            std::string field = key.substr(7);
            if (field == "dropout") {
                if (!(ss >> m.config.dropout)) corrupt(path, line_start, "bad dropout");
            } else if (field == "seed") {
                unsigned long long v;
                if (!(ss >> v)) corrupt(path, line_start, "bad " + key);
                m.config.seed = static_cast<std::uint64_t>(v);
            } else {
                long long v;
                if (!(ss >> v) || v < 0) corrupt(path, line_start, "bad " + key);
                auto u = static_cast<std::size_t>(v);
                if (field == "num_layers") m.config.num_layers = u;
                else if (field == "hidden") m.config.hidden = u;
                else if (field == "ffn") m.config.ffn = u;
                else if (field == "heads") m.config.heads = u;
                else if (field == "vocab_size") m.config.vocab_size = u;
                else if (field == "max_len") m.config.max_len = u;
                else if (field == "num_classes") m.config.num_classes = u;
                else if (field == "mlm_head") m.config.mlm_head = v != 0;
                else corrupt(path, line_start, "unknown config field " + field);
            }
        } else if (key == "vocab") {
            if (!(ss >> vocab_expected)) corrupt(path, line_start, "bad vocab count");
            for (std::size_t i = 0; i < vocab_expected; ++i) {
                if (!next_line(line)) corrupt(path, pos, "truncated vocab section");
                m.vocab_pieces.push_back(line);
            }
        } else if (key == "tensor") {
            std::string name;
            std::size_t rank;
            if (!(ss >> name >> rank)) corrupt(path, line_start, "bad tensor line");
            Shape shape(rank);
            for (std::size_t i = 0; i < rank; ++i) {
                if (!(ss >> shape[i])) corrupt(path, line_start, "bad tensor shape");
            }
            std::size_t offset;
            if (!(ss >> offset)) corrupt(path, line_start, "bad tensor offset");
            m.tensors.emplace_back(name, std::move(shape));
            m.offsets.push_back(offset);
        } else if (key == "blob") {
            if (!(ss >> m.blob_bytes >> std::hex >> m.blob_hash)) {
                corrupt(path, line_start, "bad blob line");
            }
            saw_blob = true;
        } else if (key == "self") {
            if (!saw_blob) corrupt(path, line_start, "self hash before blob line");
            if (!(ss >> m.self_hash) || m.self_hash.size() != 16) {
                corrupt(path, line_start, "bad self hash");
            }
            m.hashed_prefix = line_start;
        } else {
            corrupt(path, line_start, "unknown key '" + key + "'");
        }
    }
    corrupt(path, pos, "missing --- separator");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ParsedManifest parse_and_verify(const std::string& path, const std::string& content) {
    ParsedManifest m = parse_manifest(path, content);
    if (content.size() - m.body_offset != m.blob_bytes) {
        throw ParseError("checkpoint: " + path + ": blob is " +
                         std::to_string(content.size() - m.body_offset) +
                         " bytes, manifest declares " + std::to_string(m.blob_bytes));
    }
    const char* blob = content.data() + m.body_offset;
    std::uint64_t blob_hash = fnv1a(blob, m.blob_bytes);
    if (blob_hash != m.blob_hash) {
        throw ValueError("checkpoint: " + path + ": blob checksum mismatch (" +
                         hex64(blob_hash) + " != " + hex64(m.blob_hash) + ")");
    }
    std::uint64_t self = fnv1a(content.data(), m.hashed_prefix);
    self = fnv1a(blob, m.blob_bytes, self);
    if (hex64(self) != m.self_hash) {
        throw ValueError("checkpoint: " + path + ": self hash mismatch (" +
                         hex64(self) + " != " + m.self_hash + ")");
    }
    return m;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::string content = read_file(path);
    ParsedManifest m = parse_and_verify(path, content);
    m.config.validate();
    TransformerModel model(m.config);
    Vocab vocab = Vocab::from_pieces(m.vocab_pieces);
    if (vocab.size() != m.config.vocab_size) {
        throw ParseError("checkpoint: " + path + ": vocab section has " +
                         std::to_string(vocab.size()) + " pieces, config declares " +
                         std::to_string(m.config.vocab_size));
    }

    auto params = model.named_parameters();
    if (params.size() != m.tensors.size()) {
        throw ParseError("checkpoint: " + path + ": expected " +
                         std::to_string(params.size()) + " tensors, manifest has " +
                         std::to_string(m.tensors.size()));
    }
    const char* blob = content.data() + m.body_offset;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, tensor] = params[i];
        if (m.tensors[i].first != name || m.tensors[i].second != tensor.shape()) {
            throw ParseError("checkpoint: " + path + ": tensor " + std::to_string(i) +
                             " is '" + m.tensors[i].first + "' " +
                             shape_str(m.tensors[i].second) + ", expected '" + name +
                             "' " + shape_str(tensor.shape()));
        }
        std::size_t bytes = tensor.numel() * sizeof(double);
        if (m.offsets[i] + bytes > m.blob_bytes) {
            throw ParseError("checkpoint: " + path + ": tensor '" + name +
                             "' overruns the blob");
        }
        std::memcpy(tensor.mutable_data().data(), blob + m.offsets[i], bytes);
    }
    return LoadedCheckpoint{std::move(model), std::move(vocab), std::move(m.meta),
                            m.self_hash};
}

CheckpointSummary inspect_checkpoint(const std::string& path) {
    std::string content = read_file(path);
    ParsedManifest m = parse_and_verify(path, content);
    CheckpointSummary s;
    s.config = m.config;
    s.meta = m.meta;
    s.self_hash = m.self_hash;
    s.param_count = parameter_count(m.config);
    s.vocab_size = m.vocab_pieces.size();
    s.blob_bytes = m.blob_bytes;
    s.tensors = m.tensors;
    return s;
}

std::string checkpoint_hash(const std::string& path) {
    return inspect_checkpoint(path).self_hash;
}

void verify_lineage(const std::vector<std::string>& paths) {
    if (paths.empty()) throw ValueError("lineage: no checkpoints given");
    for (std::size_t i = 0; i < paths.size(); ++i) {
        CheckpointSummary s = inspect_checkpoint(paths[i]);
        if (i + 1 < paths.size()) {
            CheckpointSummary parent = inspect_checkpoint(paths[i + 1]);
            if (s.meta.parent_hash != parent.self_hash) {
                throw ValueError("lineage: " + paths[i] + " declares parent " +
                                 s.meta.parent_hash + " but " + paths[i + 1] +
                                 " has self hash " + parent.self_hash);
            }
        } else if (s.meta.parent_hash != "root") {
            throw ValueError("lineage: chain does not end at root; " + paths[i] +
                             " has parent " + s.meta.parent_hash);
        }
    }
}

}  // namespace tinydistill
