#pragma once

// Independent straight-line reimplementations of the matrix math and the
// distillation losses. No tape, no Tensor: plain loops over row-major
// vectors, kept deliberately separate from the library implementation so
// the two can cross-check each other.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

// C[p,r] = A[p,q] * B[q,r]
inline Vec matmul(const Vec& a, std::size_t p, std::size_t q, const Vec& b,
                  std::size_t r) {
    Vec c(p * r, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < q; ++k)
            for (std::size_t j = 0; j < r; ++j)
                c[i * r + j] += a[i * q + k] * b[k * r + j];
    return c;
}

inline Vec softmax_row(const Vec& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    Vec y(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
    }
    for (double& v : y) v /= sum;
    return y;
}

inline double mse(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

// sum(w * (a-b)^2) / sum(w)
inline double masked_mse(const Vec& a, const Vec& b, const Vec& w) {
    double s = 0.0, z = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += w[i] * (a[i] - b[i]) * (a[i] - b[i]);
        z += w[i];
    }
    return z == 0.0 ? 0.0 : s / z;
}

// (1/h) sum_heads masked MSE over (query,key) pairs of unpadded positions.
inline double attn_loss(const Vec& s, const Vec& t, std::size_t batch, std::size_t heads,
                        std::size_t len, const std::vector<unsigned char>& pad_mask) {
    double sum = 0.0, count = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < len; ++q)
                for (std::size_t k = 0; k < len; ++k) {
                    if (!pad_mask[b * len + q] || !pad_mask[b * len + k]) continue;
                    std::size_t at = ((b * heads + h) * len + q) * len + k;
                    double d = s[at] - t[at];
                    sum += d * d;
                    count += 1.0;
                }
    return count == 0.0 ? 0.0 : sum / count;
}

// MSE(student * W, teacher) over unpadded positions.
inline double projected_loss(const Vec& student, std::size_t batch, std::size_t len,
                             std::size_t d_s, const Vec& w, std::size_t d_t,
                             const Vec& teacher,
                             const std::vector<unsigned char>& pad_mask) {
    double sum = 0.0, count = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i) {
            if (!pad_mask[b * len + i]) continue;
            for (std::size_t j = 0; j < d_t; ++j) {
                double proj = 0.0;
                for (std::size_t k = 0; k < d_s; ++k)
                    proj += student[(b * len + i) * d_s + k] * w[k * d_t + j];
                double diff = proj - teacher[(b * len + i) * d_t + j];
                sum += diff * diff;
                count += 1.0;
            }
        }
    return count == 0.0 ? 0.0 : sum / count;
}

// mean over rows of -sum_c softmax(teacher/t)_c log softmax(student/t)_c
inline double soft_cross_entropy(const Vec& teacher, const Vec& student,
                                 std::size_t rows, std::size_t classes, double t) {
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        Vec zt(classes), zs(classes);
        for (std::size_t c = 0; c < classes; ++c) {
            zt[c] = teacher[r * classes + c] / t;
            zs[c] = student[r * classes + c] / t;
        }
        Vec pt = softmax_row(zt);
        Vec ps = softmax_row(zs);
        for (std::size_t c = 0; c < classes; ++c) loss -= pt[c] * std::log(ps[c]);
    }
    return loss / static_cast<double>(rows);
}

// mean over rows of -log softmax(row)[target]
inline double cross_entropy(const Vec& logits, std::size_t rows, std::size_t classes,
                            const std::vector<int>& targets) {
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        Vec row(logits.begin() + static_cast<long>(r * classes),
                logits.begin() + static_cast<long>((r + 1) * classes));
        Vec p = softmax_row(row);
        loss -= std::log(p[static_cast<std::size_t>(targets[r])]);
    }
    return loss / static_cast<double>(rows);
}

// max(0, x W1 + b1) W2 + b2 for one row vector x.
inline Vec ffn_row(const Vec& x, const Vec& w1, const Vec& b1, std::size_t d,
                   std::size_t di, const Vec& w2, const Vec& b2) {
    Vec h(di, 0.0);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t j = 0; j < di; ++j) h[j] += x[k] * w1[k * di + j];
    for (std::size_t j = 0; j < di; ++j) h[j] = std::max(0.0, h[j] + b1[j]);
    Vec y(d, 0.0);
    for (std::size_t k = 0; k < di; ++k)
        for (std::size_t j = 0; j < d; ++j) y[j] += h[k] * w2[k * d + j];
    for (std::size_t j = 0; j < d; ++j) y[j] += b2[j];
    return y;
}

}  // namespace oracle
