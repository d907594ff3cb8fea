#include "paumer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace paumer {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_seq_counter{0};

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value,
                                       bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = ++g_seq_counter;
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    if (s.empty()) os << "scalar";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor make_op_result(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward,
                      const char* op_name) {
    bool track = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) {
            if (p.defined() && p.requires_grad()) {
                track = true;
                break;
            }
        }
    }
    auto n = new_node(std::move(shape), std::move(value), track);
    n->op = op_name;
    if (track) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(new_node(shape,
                           std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0),
                           requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return Tensor(new_node(shape,
                           std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value),
                           requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    return Tensor(new_node(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(new_node(Shape{1}, std::vector<double>{value}, requires_grad));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double sigma, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.truncated_normal(sigma);
    return Tensor(new_node(shape, std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::numel() const { return node_->numel(); }
std::vector<double>& Tensor::data() { return node_->value; }
const std::vector<double>& Tensor::data() const { return node_->value; }
const std::vector<double>& Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
    }
    return node_->value[0];
}

Tensor Tensor::clone_detached() const {
    return Tensor(new_node(node_->shape, node_->value, false));
}

// ---- grad mode -------------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- Graph -----------------------------------------------------------------

Graph Graph::trace(const Tensor& loss) {
    Graph g;
    g.root_ = loss.node();
    if (!g.root_) throw ContractError("backward: undefined tensor");

    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{g.root_.get()};
    seen.insert(g.root_.get());
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        g.order_.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) {
                stack.push_back(p.get());
            }
        }
    }
    std::sort(g.order_.begin(), g.order_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
    return g;
}

void Graph::backward() {
    if (root_->numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(root_->shape));
    }
    for (auto* n : order_) {
        n->ensure_grad();
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    root_->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        auto* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

std::vector<std::uint64_t> Graph::sequence_ids() const {
    std::vector<std::uint64_t> ids;
    ids.reserve(order_.size());
    for (auto* n : order_) ids.push_back(n->seq);
    return ids;
}

void backward(const Tensor& loss) { Graph::trace(loss).backward(); }

// ---- kernels ---------------------------------------------------------------

namespace detail {

void mm_nn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (std::int64_t p = 0; p < k; ++p) {
        double* cp = c + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const double av = a[i * k + p];
            const double* bi = b + i * n;
            for (std::int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    return make_op_result(
        a.shape(), std::move(v), {a, b},
        [](detail::Node& self) {
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *self.parents[static_cast<std::size_t>(pi)];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
            }
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    return make_op_result(
        a.shape(), std::move(v), {a, b},
        [](detail::Node& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
    return make_op_result(
        a.shape(), std::move(v), {a, b},
        [](detail::Node& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa.grad[i] += self.grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] += self.grad[i] * pa.value[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.data().size());
    const auto& av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * c;
    return make_op_result(
        a.shape(), std::move(v), {a},
        [c](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
        },
        "scale");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last dim of " + shape_str(x.shape()));
    }
    const auto k = static_cast<std::size_t>(bias.dim(0));
    std::vector<double> v(x.data().size());
    const auto& xv = x.data();
    const auto& bv = bias.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] + bv[i % k];
    return make_op_result(
        x.shape(), std::move(v), {x, bias},
        [k](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pb = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i % k] += self.grad[i];
            }
        },
        "add_bias");
}

// ---- matmul ----------------------------------------------------------------

namespace {

// Flattens [B,m,k] to [(B*m),k]; rank-2 passes through.
struct MatView {
    std::int64_t rows, cols;
};

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() == 2 && (sa.size() == 2 || sa.size() == 3)) {
        // [m,k]x[k,n] or [B,m,k]x[k,n]: single flattened kernel call.
        const std::int64_t k = sa.back();
        if (k != sb[0]) {
            throw ShapeError("matmul: inner dimensions mismatch " + shape_str(sa) +
                             " vs " + shape_str(sb));
        }
        const std::int64_t rows = shape_numel(sa) / k;
        const std::int64_t n = sb[1];
        Shape out_shape = sa;
        out_shape.back() = n;
        std::vector<double> v(static_cast<std::size_t>(rows * n), 0.0);
        detail::mm_nn(a.data().data(), b.data().data(), v.data(), rows, k, n);
        return make_op_result(
            std::move(out_shape), std::move(v), {a, b},
            [rows, k, n](detail::Node& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    detail::mm_nt(self.grad.data(), pb.value.data(), pa.grad.data(),
                                  rows, n, k);
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    detail::mm_tn(pa.value.data(), self.grad.data(), pb.grad.data(),
                                  rows, k, n);
                }
            },
            "matmul");
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1]) {
            throw ShapeError("matmul: batched shapes mismatch " + shape_str(sa) +
                             " vs " + shape_str(sb));
        }
        const std::int64_t B = sa[0], m = sa[1], k = sa[2], n = sb[2];
        std::vector<double> v(static_cast<std::size_t>(B * m * n), 0.0);
        const double* ap = a.data().data();
        const double* bp = b.data().data();
#pragma omp parallel for schedule(static) if (B > 1)
        for (std::int64_t i = 0; i < B; ++i) {
            detail::mm_nn(ap + i * m * k, bp + i * k * n, v.data() + i * m * n, m, k, n);
        }
        return make_op_result(
            Shape{B, m, n}, std::move(v), {a, b},
            [B, m, k, n](detail::Node& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                if (pa.requires_grad) pa.ensure_grad();
                if (pb.requires_grad) pb.ensure_grad();
#pragma omp parallel for schedule(static) if (B > 1)
                for (std::int64_t i = 0; i < B; ++i) {
                    const double* g = self.grad.data() + i * m * n;
                    if (pa.requires_grad) {
                        detail::mm_nt(g, pb.value.data() + i * k * n,
                                      pa.grad.data() + i * m * k, m, n, k);
                    }
                    if (pb.requires_grad) {
                        detail::mm_tn(pa.value.data() + i * m * k, g,
                                      pb.grad.data() + i * k * n, m, k, n);
                    }
                }
            },
            "matmul");
    }
    throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " vs " + shape_str(sb));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() == 2 && sb.size() == 2) {
        if (sa[1] != sb[1]) {
            throw ShapeError("matmul_nt: inner dimensions mismatch " + shape_str(sa) +
                             " vs " + shape_str(sb));
        }
        const std::int64_t m = sa[0], k = sa[1], n = sb[0];
        std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
        detail::mm_nt(a.data().data(), b.data().data(), v.data(), m, k, n);
        return make_op_result(
            Shape{m, n}, std::move(v), {a, b},
            [m, k, n](detail::Node& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    detail::mm_nn(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    detail::mm_tn(self.grad.data(), pa.value.data(), pb.grad.data(), m, n, k);
                }
            },
            "matmul_nt");
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[2]) {
            throw ShapeError("matmul_nt: batched shapes mismatch " + shape_str(sa) +
                             " vs " + shape_str(sb));
        }
        const std::int64_t B = sa[0], m = sa[1], k = sa[2], n = sb[1];
        std::vector<double> v(static_cast<std::size_t>(B * m * n), 0.0);
        const double* ap = a.data().data();
        const double* bp = b.data().data();
#pragma omp parallel for schedule(static) if (B > 1)
        for (std::int64_t i = 0; i < B; ++i) {
            detail::mm_nt(ap + i * m * k, bp + i * n * k, v.data() + i * m * n, m, k, n);
        }
        return make_op_result(
            Shape{B, m, n}, std::move(v), {a, b},
            [B, m, k, n](detail::Node& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                if (pa.requires_grad) pa.ensure_grad();
                if (pb.requires_grad) pb.ensure_grad();
#pragma omp parallel for schedule(static) if (B > 1)
                for (std::int64_t i = 0; i < B; ++i) {
                    const double* g = self.grad.data() + i * m * n;
                    if (pa.requires_grad) {
                        detail::mm_nn(g, pb.value.data() + i * n * k,
                                      pa.grad.data() + i * m * k, m, n, k);
                    }
                    if (pb.requires_grad) {
                        detail::mm_tn(g, pa.value.data() + i * m * k,
                                      pb.grad.data() + i * n * k, m, n, k);
                    }
                }
            },
            "matmul_nt");
    }
    throw ShapeError("matmul_nt: unsupported ranks " + shape_str(sa) + " vs " +
                     shape_str(sb));
}

// ---- shape ops -------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<double> v = x.data();
    return make_op_result(
        shape, std::move(v), {x},
        [](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        },
        "reshape");
}

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
    const auto& s = x.shape();
    if (perm.size() != s.size()) {
        throw ShapeError("transpose: permutation rank " + std::to_string(perm.size()) +
                         " does not match tensor " + shape_str(s));
    }
    const std::size_t r = s.size();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];

    // in-strides permuted into out-axis order.
    std::vector<std::int64_t> in_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * s[i];
    std::vector<std::int64_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) src_strides[i] = in_strides[perm[i]];

    const std::int64_t total = x.numel();
    std::vector<double> v(static_cast<std::size_t>(total));
    const auto& xv = x.data();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < total; ++o) {
        v[static_cast<std::size_t>(o)] = xv[static_cast<std::size_t>(src)];
        for (std::size_t ax = r; ax-- > 0;) {
            idx[ax]++;
            src += src_strides[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    return make_op_result(
        std::move(out_shape), std::move(v), {x},
        [src_strides, r](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            std::vector<std::int64_t> idx2(r, 0);
            std::int64_t src2 = 0;
            const std::int64_t total2 = self.numel();
            for (std::int64_t o = 0; o < total2; ++o) {
                p.grad[static_cast<std::size_t>(src2)] += self.grad[static_cast<std::size_t>(o)];
                for (std::size_t ax = r; ax-- > 0;) {
                    idx2[ax]++;
                    src2 += src_strides[ax];
                    if (idx2[ax] < self.shape[ax]) break;
                    src2 -= src_strides[ax] * self.shape[ax];
                    idx2[ax] = 0;
                }
            }
        },
        "transpose");
}

// ---- nonlinearities ---------------------------------------------------------

Tensor softmax(const Tensor& x) {
    const std::int64_t k = x.shape().back();
    const std::int64_t rows = x.numel() / k;
    std::vector<double> v(x.data().size());
    const auto& xv = x.data();
#ifndef NDEBUG
    for (double xx : xv) assert(!std::isnan(xx) && "softmax: NaN input");
#endif
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * k;
        double* out = v.data() + r * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            out[j] = std::exp(row[j] - mx);
            sum += out[j];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < k; ++j) out[j] *= inv;
    }
    return make_op_result(
        x.shape(), std::move(v), {x},
        [k, rows](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* s = self.value.data() + r * k;
                const double* dy = self.grad.data() + r * k;
                double* dx = p.grad.data() + r * k;
                double dot = 0.0;
                for (std::int64_t j = 0; j < k; ++j) dot += dy[j] * s[j];
                for (std::int64_t j = 0; j < k; ++j) dx[j] += s[j] * (dy[j] - dot);
            }
        },
        "softmax");
}

Tensor gelu(const Tensor& x) {
    std::vector<double> v(x.data().size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double t = xv[i];
        v[i] = 0.5 * t * (1.0 + std::tanh(kGeluC * (t + kGeluA * t * t * t)));
    }
    return make_op_result(
        x.shape(), std::move(v), {x},
        [](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double t = p.value[i];
                const double u = kGeluC * (t + kGeluA * t * t * t);
                const double th = std::tanh(u);
                const double sech2 = 1.0 - th * th;
                const double du = kGeluC * (1.0 + 3.0 * kGeluA * t * t);
                const double d = 0.5 * (1.0 + th) + 0.5 * t * sech2 * du;
                p.grad[i] += self.grad[i] * d;
            }
        },
        "gelu");
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const std::int64_t d = x.shape().back();
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw ShapeError("layernorm: affine shapes " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
    }
    const std::int64_t rows = x.numel() / d;
    std::vector<double> v(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<std::size_t>(r)] = inv;
        double* xh = xhat.data() + r * d;
        double* out = v.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * inv;
            out[j] = gv[j] * xh[j] + bv[j];
        }
    }
    return make_op_result(
        x.shape(), std::move(v), {x, gamma, beta},
        [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (pg.requires_grad) pg.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            const double invd = 1.0 / static_cast<double>(d);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (pg.requires_grad) {
                    for (std::int64_t j = 0; j < d; ++j) pg.grad[j] += dy[j] * xh[j];
                }
                if (pb.requires_grad) {
                    for (std::int64_t j = 0; j < d; ++j) pb.grad[j] += dy[j];
                }
                if (px.requires_grad) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * pg.value[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat *= invd;
                    mean_dxhat_xhat *= invd;
                    const double inv = inv_std[static_cast<std::size_t>(r)];
                    double* dx = px.grad.data() + r * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * pg.value[j];
                        dx[j] += inv * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        },
        "layernorm");
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op_result(
        Shape{1}, std::vector<double>{s}, {x},
        [](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            const double g = self.grad[0];
            for (auto& pg : p.grad) pg += g;
        },
        "sum");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     std::optional<int> ignore_index) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: expected [P,K] logits, got " +
                         shape_str(logits.shape()));
    }
    const std::int64_t p_count = logits.dim(0);
    const std::int64_t k = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != p_count) {
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(p_count) + " positions");
    }
    for (std::int64_t i = 0; i < p_count; ++i) {
        const int lab = labels[static_cast<std::size_t>(i)];
        if (ignore_index && lab == *ignore_index) continue;
        if (lab < 0 || lab >= k) {
            throw InvalidLabelError("cross_entropy: label " + std::to_string(lab) +
                                    " at position " + std::to_string(i) +
                                    " outside [0," + std::to_string(k) + ")");
        }
    }

    std::vector<double> probs(logits.data().size());
    const auto& zv = logits.data();
    double loss = 0.0;
    std::int64_t m = 0;
    for (std::int64_t i = 0; i < p_count; ++i) {
        const double* row = zv.data() + i * k;
        double* pr = probs.data() + i * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            pr[j] = std::exp(row[j] - mx);
            s += pr[j];
        }
        const double inv = 1.0 / s;
        for (std::int64_t j = 0; j < k; ++j) pr[j] *= inv;
        const int lab = labels[static_cast<std::size_t>(i)];
        if (ignore_index && lab == *ignore_index) continue;
        const double lse = std::log(s) + mx;
        loss += lse - row[lab];
        ++m;
    }
    if (m > 0) loss /= static_cast<double>(m);

    return make_op_result(
        Shape{1}, std::vector<double>{loss}, {logits},
        [labels, ignore_index, probs = std::move(probs), k, p_count, m](detail::Node& self) {
            if (m == 0) return;  // all positions ignored: zero gradient
            auto& p = *self.parents[0];
            p.ensure_grad();
            const double g = self.grad[0] / static_cast<double>(m);
            for (std::int64_t i = 0; i < p_count; ++i) {
                const int lab = labels[static_cast<std::size_t>(i)];
                if (ignore_index && lab == *ignore_index) continue;
                const double* pr = probs.data() + i * k;
                double* dz = p.grad.data() + i * k;
                for (std::int64_t j = 0; j < k; ++j) dz[j] += g * pr[j];
                dz[lab] -= g;
            }
        },
        "cross_entropy");
}

// ---- gather / scatter --------------------------------------------------------

namespace {

void check_row_indices(const std::vector<std::int64_t>& idx, std::int64_t n,
                       const char* op) {
    for (auto i : idx) {
        if (i < 0 || i >= n) {
            throw IndexError(std::string(op) + ": index " + std::to_string(i) +
                                 " out of range [0," + std::to_string(n) + ")",
                             i);
        }
    }
}

void check_distinct(const std::vector<std::int64_t>& idx, const char* op) {
    std::vector<std::int64_t> s(idx);
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
        throw ContractError(std::string(op) + ": duplicate target indices");
    }
}

}  // namespace

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
    if (x.rank() != 2) {
        throw ShapeError("gather_rows: expected [n,D], got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.dim(0), d = x.dim(1);
    check_row_indices(idx, n, "gather_rows");
    const auto m = static_cast<std::int64_t>(idx.size());
    std::vector<double> v(static_cast<std::size_t>(m * d));
    const auto& xv = x.data();
    for (std::int64_t i = 0; i < m; ++i) {
        std::memcpy(v.data() + i * d, xv.data() + idx[static_cast<std::size_t>(i)] * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    return make_op_result(
        Shape{m, d}, std::move(v), {x},
        [idx, d, m](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* g = self.grad.data() + i * d;
                double* dst = p.grad.data() + idx[static_cast<std::size_t>(i)] * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        },
        "gather_rows");
}

Tensor scatter_rows(const Tensor& base, const Tensor& rows,
                    const std::vector<std::int64_t>& idx) {
    if (base.rank() != 2 || rows.rank() != 2 || base.dim(1) != rows.dim(1)) {
        throw ShapeError("scatter_rows: incompatible shapes " + shape_str(base.shape()) +
                         " vs " + shape_str(rows.shape()));
    }
    if (static_cast<std::int64_t>(idx.size()) != rows.dim(0)) {
        throw ContractError("scatter_rows: " + std::to_string(idx.size()) +
                            " indices for " + std::to_string(rows.dim(0)) + " rows");
    }
    const std::int64_t n = base.dim(0), d = base.dim(1);
    check_row_indices(idx, n, "scatter_rows");
    check_distinct(idx, "scatter_rows");
    std::vector<double> v = base.data();
    const auto& rv = rows.data();
    const auto m = static_cast<std::int64_t>(idx.size());
    for (std::int64_t i = 0; i < m; ++i) {
        std::memcpy(v.data() + idx[static_cast<std::size_t>(i)] * d, rv.data() + i * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    return make_op_result(
        base.shape(), std::move(v), {base, rows},
        [idx, d, m](detail::Node& self) {
            auto& pb = *self.parents[0];
            auto& pr = *self.parents[1];
            if (pr.requires_grad) {
                pr.ensure_grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* g = self.grad.data() + idx[static_cast<std::size_t>(i)] * d;
                    double* dst = pr.grad.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                std::vector<bool> overwritten(static_cast<std::size_t>(pb.numel() / d), false);
                for (auto i : idx) overwritten[static_cast<std::size_t>(i)] = true;
                const std::int64_t nrows = pb.numel() / d;
                for (std::int64_t r = 0; r < nrows; ++r) {
                    if (overwritten[static_cast<std::size_t>(r)]) continue;
                    const double* g = self.grad.data() + r * d;
                    double* dst = pb.grad.data() + r * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
            }
        },
        "scatter_rows");
}

Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<std::int64_t>>& idx) {
    if (x.rank() != 3) {
        throw ShapeError("gather_tokens: expected [B,n,D], got " + shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (static_cast<std::int64_t>(idx.size()) != b) {
        throw ContractError("gather_tokens: " + std::to_string(idx.size()) +
                            " index lists for batch " + std::to_string(b));
    }
    const auto m = static_cast<std::int64_t>(idx.empty() ? 0 : idx[0].size());
    for (const auto& il : idx) {
        if (static_cast<std::int64_t>(il.size()) != m) {
            throw ContractError("gather_tokens: ragged index lists");
        }
        check_row_indices(il, n, "gather_tokens");
    }
    std::vector<double> v(static_cast<std::size_t>(b * m * d));
    const auto& xv = x.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const double* src = xv.data() + bi * n * d;
        double* dst = v.data() + bi * m * d;
        for (std::int64_t i = 0; i < m; ++i) {
            std::memcpy(dst + i * d, src + idx[static_cast<std::size_t>(bi)][static_cast<std::size_t>(i)] * d,
                        static_cast<std::size_t>(d) * sizeof(double));
        }
    }
    return make_op_result(
        Shape{b, m, d}, std::move(v), {x},
        [idx, b, n, m, d](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const double* g = self.grad.data() + bi * m * d;
                double* dst = p.grad.data() + bi * n * d;
                for (std::int64_t i = 0; i < m; ++i) {
                    double* row = dst + idx[static_cast<std::size_t>(bi)][static_cast<std::size_t>(i)] * d;
                    const double* gr = g + i * d;
                    for (std::int64_t j = 0; j < d; ++j) row[j] += gr[j];
                }
            }
        },
        "gather_tokens");
}

Tensor scatter_tokens(const Tensor& base, const Tensor& rows,
                      const std::vector<std::vector<std::int64_t>>& idx) {
    if (base.rank() != 3 || rows.rank() != 3 || base.dim(0) != rows.dim(0) ||
        base.dim(2) != rows.dim(2)) {
        throw ShapeError("scatter_tokens: incompatible shapes " + shape_str(base.shape()) +
                         " vs " + shape_str(rows.shape()));
    }
    const std::int64_t b = base.dim(0), n = base.dim(1), d = base.dim(2);
    const std::int64_t m = rows.dim(1);
    if (static_cast<std::int64_t>(idx.size()) != b) {
        throw ContractError("scatter_tokens: " + std::to_string(idx.size()) +
                            " index lists for batch " + std::to_string(b));
    }
    for (const auto& il : idx) {
        if (static_cast<std::int64_t>(il.size()) != m) {
            throw ContractError("scatter_tokens: index list length " +
                                std::to_string(il.size()) + " != rows " + std::to_string(m));
        }
        check_row_indices(il, n, "scatter_tokens");
        check_distinct(il, "scatter_tokens");
    }
    std::vector<double> v = base.data();
    const auto& rv = rows.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        double* dst = v.data() + bi * n * d;
        const double* src = rv.data() + bi * m * d;
        for (std::int64_t i = 0; i < m; ++i) {
            std::memcpy(dst + idx[static_cast<std::size_t>(bi)][static_cast<std::size_t>(i)] * d,
                        src + i * d, static_cast<std::size_t>(d) * sizeof(double));
        }
    }
    return make_op_result(
        base.shape(), std::move(v), {base, rows},
        [idx, b, n, m, d](detail::Node& self) {
            auto& pb = *self.parents[0];
            auto& pr = *self.parents[1];
            if (pr.requires_grad) {
                pr.ensure_grad();
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const double* g = self.grad.data() + bi * n * d;
                    double* dst = pr.grad.data() + bi * m * d;
                    for (std::int64_t i = 0; i < m; ++i) {
                        const double* gr = g + idx[static_cast<std::size_t>(bi)][static_cast<std::size_t>(i)] * d;
                        double* row = dst + i * d;
                        for (std::int64_t j = 0; j < d; ++j) row[j] += gr[j];
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                std::vector<bool> overwritten(static_cast<std::size_t>(n));
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    overwritten.assign(static_cast<std::size_t>(n), false);
                    for (auto i : idx[static_cast<std::size_t>(bi)])
                        overwritten[static_cast<std::size_t>(i)] = true;
                    const double* g = self.grad.data() + bi * n * d;
                    double* dst = pb.grad.data() + bi * n * d;
                    for (std::int64_t r = 0; r < n; ++r) {
                        if (overwritten[static_cast<std::size_t>(r)]) continue;
                        const double* gr = g + r * d;
                        double* row = dst + r * d;
                        for (std::int64_t j = 0; j < d; ++j) row[j] += gr[j];
                    }
                }
            }
        },
        "scatter_tokens");
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
        throw ShapeError("concat_tokens: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    const std::int64_t bsz = a.dim(0), na = a.dim(1), nb = b.dim(1), d = a.dim(2);
    std::vector<double> v(static_cast<std::size_t>(bsz * (na + nb) * d));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::int64_t bi = 0; bi < bsz; ++bi) {
        std::memcpy(v.data() + bi * (na + nb) * d, av.data() + bi * na * d,
                    static_cast<std::size_t>(na * d) * sizeof(double));
        std::memcpy(v.data() + bi * (na + nb) * d + na * d, bv.data() + bi * nb * d,
                    static_cast<std::size_t>(nb * d) * sizeof(double));
    }
    return make_op_result(
        Shape{bsz, na + nb, d}, std::move(v), {a, b},
        [bsz, na, nb, d](detail::Node& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            for (std::int64_t bi = 0; bi < bsz; ++bi) {
                const double* g = self.grad.data() + bi * (na + nb) * d;
                if (pa.requires_grad) {
                    double* dst = pa.grad.data() + bi * na * d;
                    for (std::int64_t i = 0; i < na * d; ++i) dst[i] += g[i];
                }
                if (pb.requires_grad) {
                    double* dst = pb.grad.data() + bi * nb * d;
                    const double* gb = g + na * d;
                    for (std::int64_t i = 0; i < nb * d; ++i) dst[i] += gb[i];
                }
            }
        },
        "concat_tokens");
}

Tensor slice_tokens(const Tensor& x, std::int64_t start, std::int64_t len) {
    if (x.rank() != 3) {
        throw ShapeError("slice_tokens: expected [B,n,D], got " + shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (start < 0 || len < 0 || start + len > n) {
        throw ContractError("slice_tokens: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") outside n=" + std::to_string(n));
    }
    std::vector<double> v(static_cast<std::size_t>(b * len * d));
    const auto& xv = x.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        std::memcpy(v.data() + bi * len * d, xv.data() + (bi * n + start) * d,
                    static_cast<std::size_t>(len * d) * sizeof(double));
    }
    return make_op_result(
        Shape{b, len, d}, std::move(v), {x},
        [b, n, d, start, len](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const double* g = self.grad.data() + bi * len * d;
                double* dst = p.grad.data() + (bi * n + start) * d;
                for (std::int64_t i = 0; i < len * d; ++i) dst[i] += g[i];
            }
        },
        "slice_tokens");
}

Tensor add_tokenwise(const Tensor& x, const Tensor& t) {
    if (x.rank() != 3 || t.rank() != 2 || x.dim(1) != t.dim(0) || x.dim(2) != t.dim(1)) {
        throw ShapeError("add_tokenwise: incompatible shapes " + shape_str(x.shape()) +
                         " vs " + shape_str(t.shape()));
    }
    const std::int64_t b = x.dim(0);
    const std::int64_t nd = t.numel();
    std::vector<double> v(x.data().size());
    const auto& xv = x.data();
    const auto& tv = t.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const double* src = xv.data() + bi * nd;
        double* dst = v.data() + bi * nd;
        for (std::int64_t i = 0; i < nd; ++i) dst[i] = src[i] + tv[static_cast<std::size_t>(i)];
    }
    return make_op_result(
        x.shape(), std::move(v), {x, t},
        [b, nd](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pt = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
            }
            if (pt.requires_grad) {
                pt.ensure_grad();
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const double* g = self.grad.data() + bi * nd;
                    for (std::int64_t i = 0; i < nd; ++i)
                        pt.grad[static_cast<std::size_t>(i)] += g[i];
                }
            }
        },
        "add_tokenwise");
}

Tensor tile_batch(const Tensor& t, std::int64_t batch) {
    if (t.rank() != 2) {
        throw ShapeError("tile_batch: expected [n,D], got " + shape_str(t.shape()));
    }
    const std::int64_t nd = t.numel();
    std::vector<double> v(static_cast<std::size_t>(batch * nd));
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        std::memcpy(v.data() + bi * nd, t.data().data(),
                    static_cast<std::size_t>(nd) * sizeof(double));
    }
    return make_op_result(
        Shape{batch, t.dim(0), t.dim(1)}, std::move(v), {t},
        [batch, nd](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                const double* g = self.grad.data() + bi * nd;
                for (std::int64_t i = 0; i < nd; ++i)
                    p.grad[static_cast<std::size_t>(i)] += g[i];
            }
        },
        "tile_batch");
}

// ---- bilinear upsample -------------------------------------------------------

namespace {

struct LinTap {
    std::int64_t lo, hi;
    double frac;  // weight of hi
};

std::vector<LinTap> upsample_taps(std::int64_t in_size, std::int64_t out_size) {
    std::vector<LinTap> taps(static_cast<std::size_t>(out_size));
    const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
    for (std::int64_t o = 0; o < out_size; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const double f = std::floor(src);
        auto lo = static_cast<std::int64_t>(f);
        double frac = src - f;
        std::int64_t hi = lo + 1;
        if (lo < 0) {
            lo = 0;
            hi = 0;
            frac = 0.0;
        } else if (hi >= in_size) {
            hi = in_size - 1;
            lo = hi;
            frac = 0.0;
        }
        taps[static_cast<std::size_t>(o)] = {lo, hi, frac};
    }
    return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    if (x.rank() != 4) {
        throw ShapeError("bilinear_upsample: expected [B,h,w,C], got " +
                         shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const auto row_taps = upsample_taps(h, out_h);
    const auto col_taps = upsample_taps(w, out_w);
    std::vector<double> v(static_cast<std::size_t>(b * out_h * out_w * c));
    const auto& xv = x.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const double* src = xv.data() + bi * h * w * c;
        double* dst = v.data() + bi * out_h * out_w * c;
        for (std::int64_t r = 0; r < out_h; ++r) {
            const auto& rt = row_taps[static_cast<std::size_t>(r)];
            for (std::int64_t q = 0; q < out_w; ++q) {
                const auto& ct = col_taps[static_cast<std::size_t>(q)];
                const double w00 = (1.0 - rt.frac) * (1.0 - ct.frac);
                const double w01 = (1.0 - rt.frac) * ct.frac;
                const double w10 = rt.frac * (1.0 - ct.frac);
                const double w11 = rt.frac * ct.frac;
                const double* p00 = src + (rt.lo * w + ct.lo) * c;
                const double* p01 = src + (rt.lo * w + ct.hi) * c;
                const double* p10 = src + (rt.hi * w + ct.lo) * c;
                const double* p11 = src + (rt.hi * w + ct.hi) * c;
                double* out = dst + (r * out_w + q) * c;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    out[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
                }
            }
        }
    }
    return make_op_result(
        Shape{b, out_h, out_w, c}, std::move(v), {x},
        [b, h, w, c, out_h, out_w, row_taps, col_taps](detail::Node& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const double* g = self.grad.data() + bi * out_h * out_w * c;
                double* dst = p.grad.data() + bi * h * w * c;
                for (std::int64_t r = 0; r < out_h; ++r) {
                    const auto& rt = row_taps[static_cast<std::size_t>(r)];
                    for (std::int64_t q = 0; q < out_w; ++q) {
                        const auto& ct = col_taps[static_cast<std::size_t>(q)];
                        const double w00 = (1.0 - rt.frac) * (1.0 - ct.frac);
                        const double w01 = (1.0 - rt.frac) * ct.frac;
                        const double w10 = rt.frac * (1.0 - ct.frac);
                        const double w11 = rt.frac * ct.frac;
                        const double* gr = g + (r * out_w + q) * c;
                        for (std::int64_t ch = 0; ch < c; ++ch) {
                            dst[(rt.lo * w + ct.lo) * c + ch] += w00 * gr[ch];
                            dst[(rt.lo * w + ct.hi) * c + ch] += w01 * gr[ch];
                            dst[(rt.hi * w + ct.lo) * c + ch] += w10 * gr[ch];
                            dst[(rt.hi * w + ct.hi) * c + ch] += w11 * gr[ch];
                        }
                    }
                }
            }
        },
        "bilinear_upsample");
}

}  // namespace paumer
