#include "tinydistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "tinydistill/error.hpp"

namespace tinydistill {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

namespace detail {

void TensorNode::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw ValueError(std::string(op) +
                             ": non-finite value in result (overflow or invalid input)");
        }
    }
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* br = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ar = a + p * m;
        const double* br = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c + i * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// --- Tensor basics ----------------------------------------------------------

Tensor::Tensor() : node_(nullptr) {}
Tensor::Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape) {
    auto n = std::make_shared<detail::TensorNode>();
    n->data.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value) {
    auto n = std::make_shared<detail::TensorNode>();
    n->data.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double mean, double stddev,
                     bool truncate_2sigma) {
    std::vector<double> data(shape_numel(shape));
    for (double& x : data) {
        x = truncate_2sigma ? truncated_normal(rng, mean, stddev)
                            : normal(rng, mean, stddev);
    }
    return from(std::move(shape), std::move(data));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::rank() const { return node_->shape.size(); }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::participates_in_grad() const { return node_->needs_grad; }

void Tensor::set_requires_grad(bool value) {
    node_->requires_grad = value;
    node_->needs_grad = value || node_->backward_fn != nullptr;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (node_->grad.empty()) throw ValueError("tensor: gradient not populated");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ValueError("tensor: value() requires a scalar, got shape " +
                         shape_str(node_->shape));
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) {
        throw ShapeError("tensor: index rank mismatch for shape " + shape_str(node_->shape));
    }
    std::size_t off = 0;
    std::size_t i = 0;
    for (std::size_t idx : index) {
        if (idx >= node_->shape[i]) throw ShapeError("tensor: index out of range");
        off = off * node_->shape[i] + idx;
        ++i;
    }
    return node_->data[off];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = node_->requires_grad;
    n->needs_grad = node_->requires_grad;
    return Tensor(std::move(n));
}

// Builds the result node of a primitive; records the backward rule only when
// gradients are enabled and some input can receive them.
Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backward_fn,
                      const char* op_name) {
    check_finite(data, op_name);
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parents) {
            if (p.node()->needs_grad) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        n->needs_grad = true;
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

namespace {

void accumulate(detail::TensorNode& parent, const double* contrib, std::size_t n) {
    if (!parent.needs_grad) return;
    parent.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) parent.grad[i] += contrib[i];
}

}  // namespace

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](detail::TensorNode& self) {
            accumulate(*self.parents[0], self.grad.data(), self.grad.size());
            accumulate(*self.parents[1], self.grad.data(), self.grad.size());
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](detail::TensorNode& self) {
            accumulate(*self.parents[0], self.grad.data(), self.grad.size());
            auto& p1 = *self.parents[1];
            if (p1.needs_grad) {
                p1.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    p1.grad[i] -= self.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](detail::TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.needs_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa.grad[i] += self.grad[i] * pb.data[i];
            }
            if (pb.needs_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] += self.grad[i] * pa.data[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make_op_result(
        a.shape(), std::move(out), {a},
        [c](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] * c;
        },
        "scale");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require(bias.rank() == 1 && x.rank() >= 1 &&
                x.dim(x.rank() - 1) == bias.dim(0),
            "add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                shape_str(x.shape()));
    std::size_t n = bias.dim(0);
    std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xv = x.data(), bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] + bv[j];
    return make_op_result(
        x.shape(), std::move(out), {x, bias},
        [n, rows](detail::TensorNode& self) {
            accumulate(*self.parents[0], self.grad.data(), self.grad.size());
            auto& pb = *self.parents[1];
            if (pb.needs_grad) {
                pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j)
                        pb.grad[j] += self.grad[r * n + j];
            }
        },
        "add_bias");
}

// --- matmul -----------------------------------------------------------------

namespace {

struct MatmulPlan {
    Shape out_shape;
    std::size_t batches = 1;
    std::size_t p = 0, q = 0, r = 0;
    std::vector<std::size_t> a_offsets;  // per output batch, in units of matrices
    std::vector<std::size_t> b_offsets;
};

MatmulPlan plan_matmul(const Shape& sa, const Shape& sb) {
    require(sa.size() >= 2 && sb.size() >= 2,
            "matmul: inputs must have rank >= 2, got " + shape_str(sa) + " and " +
                shape_str(sb));
    MatmulPlan plan;
    plan.p = sa[sa.size() - 2];
    plan.q = sa[sa.size() - 1];
    plan.r = sb[sb.size() - 1];
    require(sb[sb.size() - 2] == plan.q, "matmul: inner dimensions disagree: " +
                                             shape_str(sa) + " @ " + shape_str(sb));

    std::size_t ab = sa.size() - 2, bb = sb.size() - 2;
    std::size_t nb = std::max(ab, bb);
    Shape batch(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        std::size_t da = i < nb - ab ? 1 : sa[i - (nb - ab)];
        std::size_t db = i < nb - bb ? 1 : sb[i - (nb - bb)];
        require(da == db || da == 1 || db == 1,
                "matmul: batch dimensions not broadcastable: " + shape_str(sa) +
                    " @ " + shape_str(sb));
        batch[i] = std::max(da, db);
    }
    plan.out_shape = batch;
    plan.out_shape.push_back(plan.p);
    plan.out_shape.push_back(plan.r);

    std::size_t batches = shape_numel(batch);
    plan.batches = batches;
    plan.a_offsets.resize(batches);
    plan.b_offsets.resize(batches);
    // Row-major strides in matrix units, 0 where a side broadcasts.
    std::vector<std::size_t> astr(nb, 0), bstr(nb, 0);
    std::size_t acc = 1;
    for (std::size_t i = ab; i-- > 0;) {
        astr[i + (nb - ab)] = sa[i] == 1 ? 0 : acc;
        acc *= sa[i];
    }
    acc = 1;
    for (std::size_t i = bb; i-- > 0;) {
        bstr[i + (nb - bb)] = sb[i] == 1 ? 0 : acc;
        acc *= sb[i];
    }
    for (std::size_t flat = 0; flat < batches; ++flat) {
        std::size_t rem = flat, ao = 0, bo = 0;
        for (std::size_t i = nb; i-- > 0;) {
            std::size_t idx = rem % batch[i];
            rem /= batch[i];
            ao += idx * astr[i];
            bo += idx * bstr[i];
        }
        plan.a_offsets[flat] = ao;
        plan.b_offsets[flat] = bo;
    }
    return plan;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    MatmulPlan plan = plan_matmul(a.shape(), b.shape());
    const std::size_t p = plan.p, q = plan.q, r = plan.r;
    std::vector<double> out(plan.batches * p * r, 0.0);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < plan.batches; ++i) {
        gemm_nn(av.data() + plan.a_offsets[i] * p * q,
                bv.data() + plan.b_offsets[i] * q * r, out.data() + i * p * r, p, q, r);
    }
    return make_op_result(
        plan.out_shape, std::move(out), {a, b},
        [plan](detail::TensorNode& self) {
            const std::size_t p = plan.p, q = plan.q, r = plan.r;
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.needs_grad) pa.ensure_grad();
            if (pb.needs_grad) pb.ensure_grad();
            for (std::size_t i = 0; i < plan.batches; ++i) {
                const double* g = self.grad.data() + i * p * r;
                if (pa.needs_grad) {
                    // dA += G * B^T
                    gemm_nt(g, pb.data.data() + plan.b_offsets[i] * q * r,
                            pa.grad.data() + plan.a_offsets[i] * p * q, p, r, q);
                }
                if (pb.needs_grad) {
                    // dB += A^T * G
                    gemm_tn(pa.data.data() + plan.a_offsets[i] * p * q, g,
                            pb.grad.data() + plan.b_offsets[i] * q * r, q, p, r);
                }
            }
        },
        "matmul");
}

Tensor transpose_last_two(const Tensor& a) {
    require(a.rank() >= 2, "transpose_last_two: rank >= 2 required, got " +
                               shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::size_t p = out_shape[out_shape.size() - 2];
    std::size_t q = out_shape[out_shape.size() - 1];
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::size_t mats = a.numel() / (p * q);
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t m = 0; m < mats; ++m) {
        const double* src = av.data() + m * p * q;
        double* dst = out.data() + m * p * q;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) dst[j * p + i] = src[i * q + j];
    }
    return make_op_result(
        out_shape, std::move(out), {a},
        [p, q, mats](detail::TensorNode& self) {
            auto& pa = *self.parents[0];
            if (!pa.needs_grad) return;
            pa.ensure_grad();
            for (std::size_t m = 0; m < mats; ++m) {
                const double* g = self.grad.data() + m * p * q;
                double* dst = pa.grad.data() + m * p * q;
                for (std::size_t j = 0; j < q; ++j)
                    for (std::size_t i = 0; i < p; ++i) dst[i * q + j] += g[j * p + i];
            }
        },
        "transpose_last_two");
}

// --- nonlinearities ---------------------------------------------------------

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return make_op_result(
        a.shape(), std::move(out), {a},
        [](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            // subgradient 0 at x == 0
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
        },
        "relu");
}

Tensor softmax_rows(const Tensor& a) {
    require(a.rank() >= 1 && a.dim(a.rank() - 1) >= 1,
            "softmax_rows: last dimension must be >= 1");
    std::size_t n = a.dim(a.rank() - 1);
    std::size_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    return make_op_result(
        a.shape(), std::move(out), {a},
        [n, rows](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.data.data() + r * n;
                const double* g = self.grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
                double* d = p.grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dot);
            }
        },
        "softmax_rows");
}

Tensor log_softmax_rows(const Tensor& a) {
    require(a.rank() >= 1 && a.dim(a.rank() - 1) >= 1,
            "log_softmax_rows: last dimension must be >= 1");
    std::size_t n = a.dim(a.rank() - 1);
    std::size_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
        double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    return make_op_result(
        a.shape(), std::move(out), {a},
        [n, rows](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.data.data() + r * n;
                const double* g = self.grad.data() + r * n;
                double gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) gsum += g[j];
                double* d = p.grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) d[j] += g[j] - std::exp(y[j]) * gsum;
            }
        },
        "log_softmax_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    std::size_t n = x.dim(x.rank() - 1);
    require(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 &&
                bias.dim(0) == n,
            "layer_norm: gain/bias must be length " + std::to_string(n));
    std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv(rows);
    auto xv = x.data(), gv = gain.data(), bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        double iv = 1.0 / std::sqrt(var + eps);
        inv[r] = iv;
        for (std::size_t j = 0; j < n; ++j) {
            double h = (xr[j] - mu) * iv;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gv[j] + bv[j];
        }
    }
    return make_op_result(
        x.shape(), std::move(out), {x, gain, bias},
        [n, rows, xhat = std::move(xhat), inv = std::move(inv)](detail::TensorNode& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.needs_grad) pg.ensure_grad();
            if (pb.needs_grad) pb.ensure_grad();
            if (px.needs_grad) px.ensure_grad();
            std::vector<double> t(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * n;
                const double* h = xhat.data() + r * n;
                if (pg.needs_grad || pb.needs_grad) {
                    for (std::size_t j = 0; j < n; ++j) {
                        if (pg.needs_grad) pg.grad[j] += g[j] * h[j];
                        if (pb.needs_grad) pb.grad[j] += g[j];
                    }
                }
                if (!px.needs_grad) continue;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    t[j] = g[j] * pg.data[j];
                    m1 += t[j];
                    m2 += t[j] * h[j];
                }
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                double* d = px.grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j)
                    d[j] += inv[r] * (t[j] - m1 - h[j] * m2);
            }
        },
        "layer_norm");
}

// --- indexing / reshaping ---------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<std::int32_t>& ids,
                   Shape id_shape) {
    require(table.rank() == 2, "gather_rows: table must be 2-D, got " +
                                   shape_str(table.shape()));
    if (shape_numel(id_shape) != ids.size()) {
        throw ShapeError("gather_rows: id shape " + shape_str(id_shape) +
                         " does not match id count " + std::to_string(ids.size()));
    }
    std::size_t v = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ValueError("gather_rows: id " + std::to_string(id) +
                             " out of range [0," + std::to_string(v) + ")");
        }
    }
    Shape out_shape = std::move(id_shape);
    out_shape.push_back(d);
    std::vector<double> out(ids.size() * d);
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.data() + i * d, tv.data() + static_cast<std::size_t>(ids[i]) * d,
                    d * sizeof(double));
    }
    return make_op_result(
        out_shape, std::move(out), {table},
        [ids, d](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const double* g = self.grad.data() + i * d;
                double* dst = p.grad.data() + static_cast<std::size_t>(ids[i]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        },
        "gather_rows");
}

Tensor select_dim1(const Tensor& x, std::size_t index) {
    require(x.rank() >= 2, "select_dim1: rank >= 2 required, got " +
                               shape_str(x.shape()));
    std::size_t d0 = x.dim(0), n = x.dim(1);
    require(index < n, "select_dim1: index " + std::to_string(index) +
                           " out of range for " + shape_str(x.shape()));
    std::size_t block = x.numel() / (d0 * n);
    Shape out_shape;
    out_shape.push_back(d0);
    for (std::size_t i = 2; i < x.rank(); ++i) out_shape.push_back(x.dim(i));
    std::vector<double> out(d0 * block);
    auto xv = x.data();
    for (std::size_t i = 0; i < d0; ++i) {
        std::memcpy(out.data() + i * block, xv.data() + (i * n + index) * block,
                    block * sizeof(double));
    }
    return make_op_result(
        out_shape, std::move(out), {x},
        [d0, n, block, index](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < d0; ++i) {
                const double* g = self.grad.data() + i * block;
                double* dst = p.grad.data() + (i * n + index) * block;
                for (std::size_t j = 0; j < block; ++j) dst[j] += g[j];
            }
        },
        "select_dim1");
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    require(x.rank() == 3, "split_heads: expected [batch,len,dim], got " +
                               shape_str(x.shape()));
    std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
    require(heads >= 1 && d % heads == 0,
            "split_heads: dim " + std::to_string(d) + " not divisible by heads " +
                std::to_string(heads));
    std::size_t dk = d / heads;
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < l; ++t)
                std::memcpy(out.data() + ((i * heads + h) * l + t) * dk,
                            xv.data() + (i * l + t) * d + h * dk, dk * sizeof(double));
    return make_op_result(
        Shape{b, heads, l, dk}, std::move(out), {x},
        [b, heads, l, d, dk](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < l; ++t) {
                        const double* g = self.grad.data() + ((i * heads + h) * l + t) * dk;
                        double* dst = p.grad.data() + (i * l + t) * d + h * dk;
                        for (std::size_t j = 0; j < dk; ++j) dst[j] += g[j];
                    }
        },
        "split_heads");
}

Tensor concat_last_dim(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_last_dim: no inputs");
    const Shape& s0 = parts[0].shape();
    require(!s0.empty(), "concat_last_dim: rank >= 1 required");
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == s0.size(), "concat_last_dim: rank mismatch");
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
            require(s[i] == s0[i], "concat_last_dim: leading dims disagree: " +
                                       shape_str(s0) + " vs " + shape_str(s));
        total += s.back();
    }
    Shape out_shape = s0;
    out_shape.back() = total;
    std::size_t rows = shape_numel(out_shape) / total;
    std::vector<double> out(rows * total);
    std::vector<std::size_t> widths;
    widths.reserve(parts.size());
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::size_t w = p.shape().back();
        widths.push_back(w);
        auto pv = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(out.data() + r * total + off, pv.data() + r * w,
                        w * sizeof(double));
        off += w;
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_op_result(
        out_shape, std::move(out), std::move(parents),
        [rows, total, widths](detail::TensorNode& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < widths.size(); ++k) {
                auto& p = *self.parents[k];
                std::size_t w = widths[k];
                if (p.needs_grad) {
                    p.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* g = self.grad.data() + r * total + off;
                        double* dst = p.grad.data() + r * w;
                        for (std::size_t j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                off += w;
            }
        },
        "concat_last_dim");
}

Tensor merge_heads(const Tensor& x) {
    require(x.rank() == 4, "merge_heads: expected [batch,heads,len,dk], got " +
                               shape_str(x.shape()));
    std::size_t heads = x.dim(1);
    std::vector<Tensor> slices;
    slices.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) slices.push_back(select_dim1(x, h));
    return concat_last_dim(slices);
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ValueError("dropout: probability must be in [0,1), got " + std::to_string(p));
    if (p == 0.0) return x;
    double keep = 1.0 - p;
    std::vector<double> mask(x.numel());
    for (double& m : mask) m = uniform01(rng) < keep ? 1.0 / keep : 0.0;
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return make_op_result(
        x.shape(), std::move(out), {x},
        [mask = std::move(mask)](detail::TensorNode& self) {
            auto& px = *self.parents[0];
            if (!px.needs_grad) return;
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                px.grad[i] += self.grad[i] * mask[i];
        },
        "dropout");
}

// --- reductions and losses --------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op_result(
        Shape{1}, {s}, {a},
        [](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            double g = self.grad[0];
            for (double& d : p.grad) d += g;
        },
        "sum_all");
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    double n = static_cast<double>(a.numel());
    return make_op_result(
        Shape{1}, {s / n}, {a},
        [n](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            double g = self.grad[0] / n;
            for (double& d : p.grad) d += g;
        },
        "mean_all");
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    auto av = a.data(), bv = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        s += d * d;
    }
    double n = static_cast<double>(a.numel());
    return make_op_result(
        Shape{1}, {s / n}, {a, b},
        [n](detail::TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            double g = 2.0 * self.grad[0] / n;
            if (pa.needs_grad) pa.ensure_grad();
            if (pb.needs_grad) pb.ensure_grad();
            for (std::size_t i = 0; i < pa.data.size(); ++i) {
                double d = g * (pa.data[i] - pb.data[i]);
                if (pa.needs_grad) pa.grad[i] += d;
                if (pb.needs_grad) pb.grad[i] -= d;
            }
        },
        "mse");
}

Tensor masked_mse(const Tensor& a, const Tensor& b, const Tensor& weight) {
    require(a.shape() == b.shape() && a.shape() == weight.shape(),
            "masked_mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()) + " vs " + shape_str(weight.shape()));
    auto av = a.data(), bv = b.data(), wv = weight.data();
    double s = 0.0, z = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        s += wv[i] * d * d;
        z += wv[i];
    }
    if (z == 0.0) return Tensor::scalar(0.0);
    return make_op_result(
        Shape{1}, {s / z}, {a, b, weight},
        [z](detail::TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            auto& pw = *self.parents[2];
            double g = 2.0 * self.grad[0] / z;
            if (pa.needs_grad) pa.ensure_grad();
            if (pb.needs_grad) pb.ensure_grad();
            for (std::size_t i = 0; i < pa.data.size(); ++i) {
                double d = g * pw.data[i] * (pa.data[i] - pb.data[i]);
                if (pa.needs_grad) pa.grad[i] += d;
                if (pb.needs_grad) pb.grad[i] -= d;
            }
        },
        "masked_mse");
}

Tensor soft_cross_entropy(const Tensor& teacher_logits,
                          const Tensor& student_logits, double temperature) {
    if (temperature <= 0.0) {
        throw ValueError("soft_cross_entropy: temperature must be positive, got " +
                         std::to_string(temperature));
    }
    require(teacher_logits.shape() == student_logits.shape(),
            "soft_cross_entropy: shape mismatch " + shape_str(teacher_logits.shape()) +
                " vs " + shape_str(student_logits.shape()));
    std::size_t c = student_logits.dim(student_logits.rank() - 1);
    std::size_t rows = student_logits.numel() / c;
    auto tv = teacher_logits.data(), sv = student_logits.data();
    // Teacher probabilities are baked in as constants; the teacher side of
    // the loss never receives gradients.
    std::vector<double> tp(rows * c), sq(rows * c);
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double tmx = tv[r * c], smx = sv[r * c];
        for (std::size_t j = 1; j < c; ++j) {
            tmx = std::max(tmx, tv[r * c + j]);
            smx = std::max(smx, sv[r * c + j]);
        }
        double tsum = 0.0, ssum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            tp[r * c + j] = std::exp((tv[r * c + j] - tmx) / temperature);
            tsum += tp[r * c + j];
            sq[r * c + j] = std::exp((sv[r * c + j] - smx) / temperature);
            ssum += sq[r * c + j];
        }
        double slse = smx / temperature + std::log(ssum);
        for (std::size_t j = 0; j < c; ++j) {
            tp[r * c + j] /= tsum;
            sq[r * c + j] /= ssum;
            loss -= tp[r * c + j] * (sv[r * c + j] / temperature - slse);
        }
    }
    loss /= static_cast<double>(rows);
    return make_op_result(
        Shape{1}, {loss}, {student_logits},
        [rows, c, temperature, tp = std::move(tp),
         sq = std::move(sq)](detail::TensorNode& self) {
            auto& ps = *self.parents[0];
            if (!ps.needs_grad) return;
            ps.ensure_grad();
            double g = self.grad[0] / (static_cast<double>(rows) * temperature);
            for (std::size_t i = 0; i < ps.data.size(); ++i)
                ps.grad[i] += g * (sq[i] - tp[i]);
        },
        "soft_cross_entropy");
}

namespace {

Tensor cross_entropy_impl(const Tensor& logits,
                          const std::vector<std::int32_t>& targets,
                          const std::vector<std::uint8_t>* include) {
    require(logits.rank() >= 1, "cross_entropy: rank >= 1 required");
    std::size_t c = logits.dim(logits.rank() - 1);
    std::size_t rows = logits.numel() / c;
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets");
    }
    if (include && include->size() != rows) {
        throw ShapeError("cross_entropy: include mask length mismatch");
    }
    auto lv = logits.data();
    std::vector<double> probs(rows * c);
    double loss = 0.0;
    std::size_t z = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = lv.data() + r * c;
        double* p = probs.data() + r * c;
        double mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            p[j] = std::exp(x[j] - mx);
            sum += p[j];
        }
        for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
        if (include && !(*include)[r]) continue;
        std::int32_t t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw ValueError("cross_entropy: target " + std::to_string(t) +
                             " out of range [0," + std::to_string(c) + ")");
        }
        loss -= x[t] - mx - std::log(sum);
        ++z;
    }
    if (z == 0) return Tensor::scalar(0.0);
    loss /= static_cast<double>(z);
    std::vector<std::uint8_t> inc =
        include ? *include : std::vector<std::uint8_t>(rows, 1);
    return make_op_result(
        Shape{1}, {loss}, {logits},
        [rows, c, z, targets, probs = std::move(probs),
         inc = std::move(inc)](detail::TensorNode& self) {
            auto& p = *self.parents[0];
            if (!p.needs_grad) return;
            p.ensure_grad();
            double g = self.grad[0] / static_cast<double>(z);
            for (std::size_t r = 0; r < rows; ++r) {
                if (!inc[r]) continue;
                double* d = p.grad.data() + r * c;
                const double* pr = probs.data() + r * c;
                for (std::size_t j = 0; j < c; ++j) d[j] += g * pr[j];
                d[targets[r]] -= g;
            }
        },
        "cross_entropy");
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets) {
    return cross_entropy_impl(logits, targets, nullptr);
}

Tensor cross_entropy_masked(const Tensor& logits,
                            const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& include) {
    return cross_entropy_impl(logits, targets, &include);
}

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ValueError("backward: undefined tensor");
    auto root = loss.node();
    if (root->data.size() != 1) {
        throw ValueError("backward: loss must be scalar, got shape " +
                         shape_str(root->shape));
    }
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            detail::TensorNode* p = f.node->parents[f.next++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace tinydistill
