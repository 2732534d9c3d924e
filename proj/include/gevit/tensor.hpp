#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace gevit {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad{false};
    uint64_t id{0};
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Dense double-precision tensor. Value type over a shared node; ops build a
// dynamic graph that backward() walks in reverse creation order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int numel() const { return static_cast<int>(node_->data.size()); }
    int rows() const;
    int cols() const;

    double value() const;  // scalar tensors only
    double& at(int i) { return node_->data[static_cast<size_t>(i)]; }
    double at(int i) const { return node_->data[static_cast<size_t>(i)]; }
    double& at2(int r, int c);
    double at2(int r, int c) const;

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() {
        if (node_) node_->grad.clear();
    }

    Tensor detach() const;  // same values, fresh leaf, no graph

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> node_ptr() const { return node_; }
    uint64_t id() const { return node_->id; }

    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

// Graph recording is on by default; evaluation paths disable it.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

struct BackwardTrace {
    std::vector<uint64_t> visit_order;  // node ids in visit order
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively into
// every reachable tensor with requires_grad set.
void backward(const Tensor& loss, BackwardTrace* trace = nullptr);

// ---- elementwise / reduction ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [m x n] + [n], broadcast over rows
Tensor mul_rowvec(const Tensor& a, const Tensor& v);
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);          // [m x k][k x n]
Tensor transpose(const Tensor& a);                        // 2-D
Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b);  // w[m x n] * x[n] + b[m]
Tensor matvec(const Tensor& w, const Tensor& x);                   // w[m x n] * x[n]

// ---- structure ----
Tensor slice_cols(const Tensor& a, int c0, int n);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor take_row(const Tensor& a, int r);

// ---- normalization / probability ----
// Rows of a 2-D tensor are treated independently; 1-D input is a single row.
Tensor softmax(const Tensor& a);                // over last dim
Tensor softmax_axis(const Tensor& a, int axis); // 2-D: axis 0 or 1
Tensor layernorm(const Tensor& a, double eps = 1e-6);  // pre-affine
Tensor l2_normalize(const Tensor& a);

// log clamp shared by cross_entropy and entropy
inline constexpr double kLogEps = 1e-12;

Tensor cross_entropy(const Tensor& p, int target_class);
Tensor cross_entropy(const Tensor& p, const Tensor& target_dist);
Tensor entropy(const Tensor& p);  // 1-D probability vector

// Identity forward; backward multiplies the incoming gradient by -lambda.
Tensor grad_reverse(const Tensor& a, double lambda);

// Central-difference oracle: max relative error between analytic and numeric
// gradient of f with respect to theta. Relative error uses a unit floor so
// near-zero gradients are compared absolutely.
double finite_diff_check(const std::function<Tensor()>& f, Tensor theta, double h = 1e-5);

}  // namespace gevit
