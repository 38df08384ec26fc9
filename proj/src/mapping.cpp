#include "tinydistill/mapping.hpp"

#include "tinydistill/error.hpp"

namespace tinydistill {

LayerMapping::LayerMapping(std::size_t student_layers, std::size_t teacher_layers,
                           std::vector<std::size_t> table)
    : student_layers_(student_layers),
      teacher_layers_(teacher_layers),
      table_(std::move(table)) {
    validate();
}

LayerMapping LayerMapping::uniform(std::size_t m_layers, std::size_t n_layers) {
    if (m_layers == 0 || m_layers > n_layers) {
        throw ConfigError("mapping: uniform requires 1 <= M <= N, got M=" +
                          std::to_string(m_layers) + " N=" + std::to_string(n_layers));
    }
    if (n_layers % m_layers != 0) {
        throw ConfigError("mapping: uniform requires N divisible by M, got M=" +
                          std::to_string(m_layers) + " N=" + std::to_string(n_layers));
    }
    std::vector<std::size_t> table(m_layers + 2);
    table[0] = 0;
    for (std::size_t m = 1; m <= m_layers; ++m) table[m] = m * n_layers / m_layers;
    table[m_layers + 1] = n_layers + 1;
    return LayerMapping(m_layers, n_layers, std::move(table));
}

LayerMapping LayerMapping::top(std::size_t m_layers, std::size_t n_layers) {
    if (m_layers == 0 || m_layers > n_layers) {
        throw ConfigError("mapping: top requires 1 <= M <= N, got M=" +
                          std::to_string(m_layers) + " N=" + std::to_string(n_layers));
    }
    std::vector<std::size_t> table(m_layers + 2);
    table[0] = 0;
    for (std::size_t m = 1; m <= m_layers; ++m) table[m] = m + n_layers - m_layers;
    table[m_layers + 1] = n_layers + 1;
    return LayerMapping(m_layers, n_layers, std::move(table));
}

LayerMapping LayerMapping::bottom(std::size_t m_layers, std::size_t n_layers) {
    if (m_layers == 0 || m_layers > n_layers) {
        throw ConfigError("mapping: bottom requires 1 <= M <= N, got M=" +
                          std::to_string(m_layers) + " N=" + std::to_string(n_layers));
    }
    std::vector<std::size_t> table(m_layers + 2);
    table[0] = 0;
    for (std::size_t m = 1; m <= m_layers; ++m) table[m] = m;
    table[m_layers + 1] = n_layers + 1;
    return LayerMapping(m_layers, n_layers, std::move(table));
}

LayerMapping LayerMapping::from_strategy(const std::string& name,
                                         std::size_t m_layers, std::size_t n_layers) {
    if (name == "uniform") return uniform(m_layers, n_layers);
    if (name == "top") return top(m_layers, n_layers);
    if (name == "bottom") return bottom(m_layers, n_layers);
    throw ConfigError("mapping: unknown strategy '" + name +
                      "' (expected uniform, top or bottom)");
}

std::size_t LayerMapping::operator()(std::size_t m) const {
    if (m >= table_.size()) {
        throw ConfigError("mapping: student index " + std::to_string(m) +
                          " out of range [0," + std::to_string(table_.size() - 1) + "]");
    }
    return table_[m];
}

void LayerMapping::validate() const {
    std::size_t m_layers = student_layers_, n_layers = teacher_layers_;
    if (m_layers == 0 || m_layers > n_layers) {
        throw ConfigError("mapping: requires 1 <= M <= N, got M=" +
                          std::to_string(m_layers) + " N=" + std::to_string(n_layers));
    }
    if (table_.size() != m_layers + 2) {
        throw ConfigError("mapping: table length " + std::to_string(table_.size()) +
                          " != M+2 = " + std::to_string(m_layers + 2));
    }
    if (table_[0] != 0) {
        throw ConfigError("mapping: table[0] must be 0 (embedding endpoint), got " +
                          std::to_string(table_[0]));
    }
    if (table_[m_layers + 1] != n_layers + 1) {
        throw ConfigError("mapping: table[M+1] must be N+1 (prediction endpoint), got " +
                          std::to_string(table_[m_layers + 1]));
    }
    for (std::size_t m = 1; m <= m_layers; ++m) {
        if (table_[m] < 1 || table_[m] > n_layers) {
            throw ConfigError("mapping: table[" + std::to_string(m) + "] = " +
                              std::to_string(table_[m]) + " outside [1," +
                              std::to_string(n_layers) + "]");
        }
        if (m > 1 && table_[m] <= table_[m - 1]) {
            throw ConfigError("mapping: interior values must be strictly increasing, "
                              "table[" + std::to_string(m - 1) + "]=" +
                              std::to_string(table_[m - 1]) + " >= table[" +
                              std::to_string(m) + "]=" + std::to_string(table_[m]));
        }
    }
}

}  // namespace tinydistill
