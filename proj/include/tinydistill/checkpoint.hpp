#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tinydistill/data.hpp"
#include "tinydistill/transformer.hpp"

namespace tinydistill {

// FNV-1a 64-bit, chainable through the seed argument.
std::uint64_t fnv1a(const void* data, std::size_t size,
                    std::uint64_t seed = 1469598103934665603ULL);

struct CheckpointMeta {
    std::string stage = "init";        // init | teacher-mlm | teacher-finetune |
                                       // general | task-intermediate | task-prediction
    std::string parent_hash = "root";  // self hash of the parent checkpoint
    std::optional<double> dev_accuracy;
};

struct CheckpointSummary {
    TransformerConfig config;
    CheckpointMeta meta;
    std::string self_hash;
    std::int64_t param_count = 0;
    std::size_t vocab_size = 0;
    std::size_t blob_bytes = 0;
    std::vector<std::pair<std::string, Shape>> tensors;
};

// Checkpoint file = text manifest (config fields, vocab, tensor names with
// shapes and byte offsets, checksums) followed by "---\n" and a raw
// little-endian 64-bit-float blob. Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const Vocab& vocab, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    TransformerModel model;
    Vocab vocab;
    CheckpointMeta meta;
    std::string self_hash;
};

// Verifies the blob checksum and the manifest self hash; raises ParseError
// (with the byte offset) on a corrupt manifest and ValueError on checksum
// mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Manifest-level inspection plus checksum verification.
CheckpointSummary inspect_checkpoint(const std::string& path);

// The self hash recorded in a checkpoint, for lineage chaining.
std::string checkpoint_hash(const std::string& path);

// paths ordered child-first; verifies each parent_hash equals the next
// checkpoint's self hash and that the chain ends at "root".
void verify_lineage(const std::vector<std::string>& paths);

}  // namespace tinydistill
