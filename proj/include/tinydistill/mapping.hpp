#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace tinydistill {

// Layer mapping n = g(m) from student layer indices {0..M+1} to teacher
// layer indices {0..N+1}. Index 0 is the embedding layer, M+1 (resp. N+1)
// the prediction layer; interior indices are transformer layers.
class LayerMapping {
public:
    // table must have length M+2 with table[0] == 0, table[M+1] == N+1 and
    // strictly increasing interior values in [1, N].
    LayerMapping(std::size_t student_layers, std::size_t teacher_layers,
                 std::vector<std::size_t> table);

    // g(m) = m * N / M; requires N divisible by M.
    static LayerMapping uniform(std::size_t student_layers, std::size_t teacher_layers);
    // g(m) = m + N - M for 0 < m <= M.
    static LayerMapping top(std::size_t student_layers, std::size_t teacher_layers);
    // g(m) = m for 0 < m <= M.
    static LayerMapping bottom(std::size_t student_layers, std::size_t teacher_layers);

    // Builds the named strategy ("uniform" | "top" | "bottom").
    static LayerMapping from_strategy(const std::string& name,
                                      std::size_t student_layers,
                                      std::size_t teacher_layers);

    std::size_t student_layers() const { return student_layers_; }
    std::size_t teacher_layers() const { return teacher_layers_; }
    const std::vector<std::size_t>& table() const { return table_; }

    // Teacher index for student index m (0 <= m <= M+1).
    std::size_t operator()(std::size_t m) const;

    // Asserts every invariant; throws ConfigError with the violation named.
    void validate() const;

private:
    std::size_t student_layers_;
    std::size_t teacher_layers_;
    std::vector<std::size_t> table_;
};

}  // namespace tinydistill
