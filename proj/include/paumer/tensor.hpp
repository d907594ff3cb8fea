#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "paumer/errors.hpp"
#include "paumer/rng.hpp"

namespace paumer {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {
struct Node;
}

// Dense 64-bit float tensor, row-major. Copying a Tensor copies the handle,
// not the storage; ops return fresh tensors. When grad tracking is enabled
// and an input requires grad, the op records itself for reverse mode.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // i.i.d. truncated normal(0, sigma) entries.
    static Tensor randn(const Shape& shape, Rng& rng, double sigma,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(std::size_t axis) const { return shape()[axis]; }
    std::size_t rank() const { return shape().size(); }
    std::int64_t numel() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    // Gradient of the last backward pass; empty when untouched.
    const std::vector<double>& grad() const;
    void zero_grad();

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    // Value of a scalar tensor.
    double item() const;

    // Deep copy of the value; the copy is a fresh leaf.
    Tensor clone_detached() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op_result(Shape shape, std::vector<double> value,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::Node&)> backward,
                                 const char* op_name);
};

// Disables graph recording for the current thread while alive. Forward-only
// evaluation should run under this guard.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// The recorded backward graph for one scalar loss: every grad-tracked node
// reachable from the root, ordered by execution (record) order.
class Graph {
public:
    static Graph trace(const Tensor& loss);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // grad-tracked node, leaves included. Existing grads are overwritten.
    void backward();

    std::size_t num_nodes() const { return order_.size(); }
    // Record sequence numbers in execution order (ascending).
    std::vector<std::uint64_t> sequence_ids() const;

private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_;  // ascending seq
};

// Convenience: trace + backward.
void backward(const Tensor& loss);

// ---- Differentiable ops ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor sub(const Tensor& a, const Tensor& b);          // same shape
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
// Broadcasts bias over every leading axis; bias length must equal the last dim.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// matmul supports [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs) and [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a . b^T for [m,k]x[n,k] and [B,m,k]x[B,n,k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);

Tensor softmax(const Tensor& x);  // last axis, max-subtracted
Tensor gelu(const Tensor& x);     // tanh approximation
// Normalizes the last axis; gamma/beta have length = last dim. eps fixed 1e-5.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor sum(const Tensor& x);  // scalar

// Mean negative log-softmax of the true class over non-ignored positions.
// logits [P,K], labels length P. All-ignored batches give loss 0, grad 0.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     std::optional<int> ignore_index = std::nullopt);

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
// Copy of base with rows[i] written at idx[i]; indices must be distinct.
Tensor scatter_rows(const Tensor& base, const Tensor& rows,
                    const std::vector<std::int64_t>& idx);

// Batched variants over [B,n,D] with per-item index lists (equal lengths).
Tensor gather_tokens(const Tensor& x,
                     const std::vector<std::vector<std::int64_t>>& idx);
Tensor scatter_tokens(const Tensor& base, const Tensor& rows,
                      const std::vector<std::vector<std::int64_t>>& idx);

Tensor concat_tokens(const Tensor& a, const Tensor& b);  // axis 1 of [B,n,D]
Tensor slice_tokens(const Tensor& x, std::int64_t start, std::int64_t len);

// x[B,n,D] + t[n,D], broadcast over batch.
Tensor add_tokenwise(const Tensor& x, const Tensor& t);
// Repeats t[n,D] into [B,n,D]; backward sums over the batch axis.
Tensor tile_batch(const Tensor& t, std::int64_t batch);

// [B,h,w,C] -> [B,H,W,C], align_corners=false.
Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Building block for custom differentiable ops: wraps a computed value,
// recording parents and the backward closure when grad tracking is active.
Tensor make_op_result(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward,
                      const char* op_name);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Raw kernels (row-major, contiguous). c is accumulated into, caller zeroes.
void mm_nn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n);  // c[m,n] += a[m,k] . b[k,n]
void mm_nt(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n);  // c[m,n] += a[m,k] . b[n,k]^T
void mm_tn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n);  // c[k,n] += a[m,k]^T . b[m,n]

}  // namespace detail

}  // namespace paumer
