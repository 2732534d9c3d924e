#include "gevit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace gevit {

namespace {

std::atomic<uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int e : s) n *= static_cast<size_t>(e);
    return n;
}

void check_shape_valid(const Shape& s, const char* who) {
    if (s.empty()) throw std::invalid_argument(std::string(who) + ": empty shape");
    for (int e : s)
        if (e < 1) throw std::invalid_argument(std::string(who) + ": extent < 1 in " + shape_str(s));
}

bool recording(const Tensor& a) { return g_grad_enabled && a.requires_grad(); }
bool recording(const Tensor& a, const Tensor& b) {
    return g_grad_enabled && (a.requires_grad() || b.requires_grad());
}

// Mark `out` as produced from `parents` with the given backward closure.
void attach(Tensor& out, std::vector<Tensor> parents, std::function<void(TensorNode&)> fn) {
    TensorNode* n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(fn);
}

void require_2d(const Tensor& a, const char* who) {
    if (a.shape().size() != 2)
        throw std::invalid_argument(std::string(who) + ": expected 2-D tensor, got " + shape_str(a.shape()));
}

// Rows/cols view: 1-D tensors are a single row.
void row_view(const Tensor& a, int& rows, int& cols) {
    if (a.shape().size() == 1) {
        rows = 1;
        cols = a.shape()[0];
    } else if (a.shape().size() == 2) {
        rows = a.shape()[0];
        cols = a.shape()[1];
    } else {
        throw std::invalid_argument("expected 1-D or 2-D tensor, got " + shape_str(a.shape()));
    }
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape, "zeros");
    size_t n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    check_shape_valid(shape, "full");
    size_t n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, v));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape_valid(shape, "from_data");
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("from_data: shape " + shape_str(shape) + " does not match data length " +
                                    std::to_string(data.size()));
    auto node = make_node(std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({1}, {v}, requires_grad); }

int Tensor::rows() const {
    require_2d(*this, "rows");
    return shape()[0];
}

int Tensor::cols() const {
    require_2d(*this, "cols");
    return shape()[1];
}

double Tensor::value() const {
    if (numel() != 1)
        throw std::invalid_argument("value: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
}

double& Tensor::at2(int r, int c) {
    require_2d(*this, "at2");
    return node_->data[static_cast<size_t>(r) * shape()[1] + c];
}

double Tensor::at2(int r, int c) const {
    require_2d(*this, "at2");
    return node_->data[static_cast<size_t>(r) * shape()[1] + c];
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw std::runtime_error("grad: no gradient present; run backward() first");
    return node_->grad;
}

Tensor Tensor::detach() const {
    auto node = make_node(node_->shape, node_->data);
    return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

void backward(const Tensor& loss, BackwardTrace* trace) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar");

    // Reachable subgraph, then reverse creation order. Creation ids are
    // strictly increasing, so descending id order is a reverse topological
    // order of the tape.
    std::vector<TensorNode*> order;
    {
        std::unordered_set<TensorNode*> seen;
        std::vector<TensorNode*> stack{loss.node()};
        seen.insert(loss.node());
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (auto& p : n->parents) {
                if (seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
    }
    std::sort(order.begin(), order.end(), [](TensorNode* a, TensorNode* b) { return a->id > b->id; });

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;

    for (TensorNode* n : order) {
        if (trace) trace->visit_order.push_back(n->id);
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (recording(a, b)) {
        attach(out, {a, b}, [](TensorNode& o) {
            for (int side = 0; side < 2; ++side) {
                TensorNode& p = *o.parents[side];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (recording(a, b)) {
        attach(out, {a, b}, [](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (recording(a, b)) {
        attach(out, {a, b}, [](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
            }
        });
    }
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = c * av[i];
    if (recording(a)) {
        attach(out, {a}, [c](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += c * o.grad[i];
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    int rows, cols;
    row_view(a, rows, cols);
    if (v.shape().size() != 1 || v.shape()[0] != cols)
        throw std::invalid_argument("add_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) ov[static_cast<size_t>(r) * cols + c] = av[static_cast<size_t>(r) * cols + c] + vv[c];
    if (recording(a, v)) {
        attach(out, {a, v}, [rows, cols](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pv = *o.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
            }
            if (pv.requires_grad) {
                pv.ensure_grad();
                for (int c = 0; c < cols; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < rows; ++r) s += o.grad[static_cast<size_t>(r) * cols + c];
                    pv.grad[c] += s;
                }
            }
        });
    }
    return out;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    int rows, cols;
    row_view(a, rows, cols);
    if (v.shape().size() != 1 || v.shape()[0] != cols)
        throw std::invalid_argument("mul_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) ov[static_cast<size_t>(r) * cols + c] = av[static_cast<size_t>(r) * cols + c] * vv[c];
    if (recording(a, v)) {
        attach(out, {a, v}, [rows, cols](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pv = *o.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        pa.grad[static_cast<size_t>(r) * cols + c] += o.grad[static_cast<size_t>(r) * cols + c] * pv.data[c];
            }
            if (pv.requires_grad) {
                pv.ensure_grad();
                for (int c = 0; c < cols; ++c) {
                    double s = 0.0;
                    for (int r = 0; r < rows; ++r)
                        s += o.grad[static_cast<size_t>(r) * cols + c] * pa.data[static_cast<size_t>(r) * cols + c];
                    pv.grad[c] += s;
                }
            }
        });
    }
    return out;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
    if (recording(a)) {
        attach(out, {a}, [](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) {
                const double x = p.data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                p.grad[i] += o.grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;  // sequential for bit-determinism
    Tensor out = Tensor::scalar(s);
    if (recording(a)) {
        attach(out, {a}, [](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(s * inv_n);
    if (recording(a)) {
        attach(out, {a}, [inv_n](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0] * inv_n;
        });
    }
    return out;
}

// ------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = Tensor::zeros({m, n});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.data().data();
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = Ai[p];
            const double* Bp = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
        }
    }
    if (recording(a, b)) {
        attach(out, {a, b}, [m, k, n](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            const double* G = o.grad.data();
            if (pa.requires_grad) {
                pa.ensure_grad();
                // dA = G * B^T
                const double* B = pb.data.data();
                for (int i = 0; i < m; ++i) {
                    const double* Gi = G + static_cast<size_t>(i) * n;
                    double* dAi = pa.grad.data() + static_cast<size_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const double* Bp = B + static_cast<size_t>(p) * n;
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += Gi[j] * Bp[j];
                        dAi[p] += s;
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                // dB = A^T * G
                const double* A = pa.data.data();
                for (int p = 0; p < k; ++p) {
                    double* dBp = pb.grad.data() + static_cast<size_t>(p) * n;
                    for (int i = 0; i < m; ++i) {
                        const double aip = A[static_cast<size_t>(i) * k + p];
                        const double* Gi = G + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    const auto& av = a.data();
    auto& ov = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ov[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    if (recording(a)) {
        attach(out, {a}, [m, n](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    p.grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

Tensor matvec(const Tensor& w, const Tensor& x) {
    require_2d(w, "matvec");
    if (x.shape().size() != 1 || x.shape()[0] != w.shape()[1])
        throw std::invalid_argument("matvec: " + shape_str(w.shape()) + " vs " + shape_str(x.shape()));
    const int m = w.shape()[0], n = w.shape()[1];
    Tensor out = Tensor::zeros({m});
    const auto& W = w.data();
    const auto& X = x.data();
    auto& O = out.data();
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        const double* Wi = W.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) s += Wi[j] * X[j];
        O[i] = s;
    }
    if (recording(w, x)) {
        attach(out, {w, x}, [m, n](TensorNode& o) {
            TensorNode& pw = *o.parents[0];
            TensorNode& px = *o.parents[1];
            if (pw.requires_grad) {
                pw.ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const double g = o.grad[i];
                    double* dWi = pw.grad.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) dWi[j] += g * px.data[j];
                }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const double g = o.grad[i];
                    const double* Wi = pw.data.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) px.grad[j] += g * Wi[j];
                }
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b) {
    Tensor y = matvec(w, x);
    if (b.shape().size() != 1 || b.shape()[0] != y.shape()[0])
        throw std::invalid_argument("affine: bias " + shape_str(b.shape()) + " vs output " + shape_str(y.shape()));
    return add(y, b);
}

// ------------------------------------------------------------------ structure

Tensor slice_cols(const Tensor& a, int c0, int n) {
    require_2d(a, "slice_cols");
    const int rows = a.shape()[0], cols = a.shape()[1];
    if (c0 < 0 || n < 1 || c0 + n > cols)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c0 + n) +
                                    ") out of " + shape_str(a.shape()));
    Tensor out = Tensor::zeros({rows, n});
    const auto& av = a.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < n; ++c) ov[static_cast<size_t>(r) * n + c] = av[static_cast<size_t>(r) * cols + c0 + c];
    if (recording(a)) {
        attach(out, {a}, [rows, cols, c0, n](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < n; ++c)
                    p.grad[static_cast<size_t>(r) * cols + c0 + c] += o.grad[static_cast<size_t>(r) * n + c];
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int rows = parts[0].shape()[0];
    int cols = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.shape()[0] != rows)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(p.shape()));
        cols += p.shape()[1];
    }
    Tensor out = Tensor::zeros({rows, cols});
    auto& ov = out.data();
    int off = 0;
    for (const auto& p : parts) {
        const int pc = p.shape()[1];
        const auto& pv = p.data();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c) ov[static_cast<size_t>(r) * cols + off + c] = pv[static_cast<size_t>(r) * pc + c];
        off += pc;
    }
    bool rec = g_grad_enabled;
    if (rec) {
        rec = false;
        for (const auto& p : parts) rec = rec || p.requires_grad();
    }
    if (rec) {
        std::vector<int> widths;
        for (const auto& p : parts) widths.push_back(p.shape()[1]);
        attach(out, parts, [rows, cols, widths](TensorNode& o) {
            int off2 = 0;
            for (size_t k = 0; k < o.parents.size(); ++k) {
                TensorNode& p = *o.parents[k];
                const int pc = widths[k];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < pc; ++c)
                            p.grad[static_cast<size_t>(r) * pc + c] += o.grad[static_cast<size_t>(r) * cols + off2 + c];
                }
                off2 += pc;
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_rows");
    require_2d(b, "concat_rows");
    if (a.shape()[1] != b.shape()[1])
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int ra = a.shape()[0], rb = b.shape()[0], cols = a.shape()[1];
    Tensor out = Tensor::zeros({ra + rb, cols});
    auto& ov = out.data();
    std::copy(a.data().begin(), a.data().end(), ov.begin());
    std::copy(b.data().begin(), b.data().end(), ov.begin() + static_cast<size_t>(ra) * cols);
    if (recording(a, b)) {
        attach(out, {a, b}, [ra, rb, cols](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < static_cast<size_t>(ra) * cols; ++i) pa.grad[i] += o.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                const size_t base = static_cast<size_t>(ra) * cols;
                for (size_t i = 0; i < static_cast<size_t>(rb) * cols; ++i) pb.grad[i] += o.grad[base + i];
            }
        });
    }
    return out;
}

Tensor take_row(const Tensor& a, int r) {
    require_2d(a, "take_row");
    const int rows = a.shape()[0], cols = a.shape()[1];
    if (r < 0 || r >= rows)
        throw std::invalid_argument("take_row: row " + std::to_string(r) + " out of " + shape_str(a.shape()));
    Tensor out = Tensor::zeros({cols});
    const auto& av = a.data();
    auto& ov = out.data();
    for (int c = 0; c < cols; ++c) ov[c] = av[static_cast<size_t>(r) * cols + c];
    if (recording(a)) {
        attach(out, {a}, [r, cols](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int c = 0; c < cols; ++c) p.grad[static_cast<size_t>(r) * cols + c] += o.grad[c];
        });
    }
    return out;
}

// ------------------------------------------------- normalization / probability

Tensor softmax(const Tensor& a) {
    int rows, cols;
    row_view(a, rows, cols);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * cols;
        double* y = ov.data() + static_cast<size_t>(r) * cols;
        double mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        const double inv_z = 1.0 / z;
        for (int c = 0; c < cols; ++c) y[c] *= inv_z;
    }
    if (recording(a)) {
        attach(out, {a}, [rows, cols](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double* s = o.data.data() + static_cast<size_t>(r) * cols;
                const double* g = o.grad.data() + static_cast<size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += g[c] * s[c];
                double* dx = p.grad.data() + static_cast<size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) dx[c] += s[c] * (g[c] - dot);
            }
        });
    }
    return out;
}

Tensor softmax_axis(const Tensor& a, int axis) {
    if (a.shape().size() == 1) {
        if (axis != 0) throw std::invalid_argument("softmax_axis: axis out of range for 1-D input");
        return softmax(a);
    }
    require_2d(a, "softmax_axis");
    if (axis == 1) return softmax(a);
    if (axis == 0) return transpose(softmax(transpose(a)));
    throw std::invalid_argument("softmax_axis: axis must be 0 or 1");
}

Tensor layernorm(const Tensor& a, double eps) {
    int rows, cols;
    row_view(a, rows, cols);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    std::vector<double> inv_std(rows);
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * cols;
        double m = 0.0;
        for (int c = 0; c < cols; ++c) m += x[c];
        m /= cols;
        double v = 0.0;
        for (int c = 0; c < cols; ++c) v += (x[c] - m) * (x[c] - m);
        v /= cols;
        const double is = 1.0 / std::sqrt(v + eps);
        inv_std[r] = is;
        double* y = ov.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) y[c] = (x[c] - m) * is;
    }
    if (recording(a)) {
        attach(out, {a}, [rows, cols, inv_std](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double* y = o.data.data() + static_cast<size_t>(r) * cols;
                const double* g = o.grad.data() + static_cast<size_t>(r) * cols;
                double gm = 0.0, gym = 0.0;
                for (int c = 0; c < cols; ++c) {
                    gm += g[c];
                    gym += g[c] * y[c];
                }
                gm /= cols;
                gym /= cols;
                double* dx = p.grad.data() + static_cast<size_t>(r) * cols;
                const double is = inv_std[r];
                for (int c = 0; c < cols; ++c) dx[c] += is * (g[c] - gm - y[c] * gym);
            }
        });
    }
    return out;
}

Tensor l2_normalize(const Tensor& a) {
    int rows, cols;
    row_view(a, rows, cols);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    std::vector<double> inv_norm(rows);
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * cols;
        double n2 = 0.0;
        for (int c = 0; c < cols; ++c) n2 += x[c] * x[c];
        const double n = std::sqrt(n2);
        if (!(n > 0.0))
            throw std::domain_error("l2_normalize: zero-norm input row " + std::to_string(r));
        inv_norm[r] = 1.0 / n;
        double* y = ov.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) y[c] = x[c] * inv_norm[r];
    }
    if (recording(a)) {
        attach(out, {a}, [rows, cols, inv_norm](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double* y = o.data.data() + static_cast<size_t>(r) * cols;
                const double* g = o.grad.data() + static_cast<size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
                double* dx = p.grad.data() + static_cast<size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) dx[c] += inv_norm[r] * (g[c] - y[c] * dot);
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& p, int target_class) {
    if (p.shape().size() != 1)
        throw std::invalid_argument("cross_entropy: expected 1-D probabilities, got " + shape_str(p.shape()));
    const int k = p.shape()[0];
    if (target_class < 0 || target_class >= k)
        throw std::invalid_argument("cross_entropy: target " + std::to_string(target_class) + " out of [0," +
                                    std::to_string(k) + ")");
    const double pj = p.data()[target_class];
    Tensor out = Tensor::scalar(-std::log(std::max(pj, kLogEps)));
    if (recording(p)) {
        attach(out, {p}, [target_class](TensorNode& o) {
            TensorNode& pp = *o.parents[0];
            if (!pp.requires_grad) return;
            pp.ensure_grad();
            const double pj2 = pp.data[target_class];
            if (pj2 > kLogEps) pp.grad[target_class] += o.grad[0] * (-1.0 / pj2);
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& p, const Tensor& target_dist) {
    if (p.shape() != target_dist.shape() || p.shape().size() != 1)
        throw std::invalid_argument("cross_entropy: " + shape_str(p.shape()) + " vs " + shape_str(target_dist.shape()));
    const int k = p.shape()[0];
    double s = 0.0;
    for (int j = 0; j < k; ++j) s -= target_dist.data()[j] * std::log(std::max(p.data()[j], kLogEps));
    Tensor out = Tensor::scalar(s);
    if (recording(p, target_dist)) {
        attach(out, {p, target_dist}, [k](TensorNode& o) {
            TensorNode& pp = *o.parents[0];
            TensorNode& pt = *o.parents[1];
            if (pp.requires_grad) {
                pp.ensure_grad();
                for (int j = 0; j < k; ++j)
                    if (pp.data[j] > kLogEps) pp.grad[j] += o.grad[0] * (-pt.data[j] / pp.data[j]);
            }
            if (pt.requires_grad) {
                pt.ensure_grad();
                for (int j = 0; j < k; ++j)
                    pt.grad[j] += o.grad[0] * (-std::log(std::max(pp.data[j], kLogEps)));
            }
        });
    }
    return out;
}

Tensor entropy(const Tensor& p) {
    if (p.shape().size() != 1)
        throw std::invalid_argument("entropy: expected 1-D probabilities, got " + shape_str(p.shape()));
    const int k = p.shape()[0];
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
        const double pj = p.data()[j];
        if (pj > 0.0) s -= pj * std::log(std::max(pj, kLogEps));
    }
    Tensor out = Tensor::scalar(s);
    if (recording(p)) {
        attach(out, {p}, [k](TensorNode& o) {
            TensorNode& pp = *o.parents[0];
            if (!pp.requires_grad) return;
            pp.ensure_grad();
            for (int j = 0; j < k; ++j) {
                const double pj = pp.data[j];
                const double d = pj > kLogEps ? -(std::log(pj) + 1.0) : -std::log(kLogEps);
                pp.grad[j] += o.grad[0] * d;
            }
        });
    }
    return out;
}

Tensor grad_reverse(const Tensor& a, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("grad_reverse: lambda must be >= 0");
    Tensor out = Tensor::from_data(a.shape(), a.data());
    if (recording(a)) {
        attach(out, {a}, [lambda](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += -lambda * o.grad[i];
        });
    }
    return out;
}

double finite_diff_check(const std::function<Tensor()>& f, Tensor theta, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
    theta.zero_grad();
    Tensor loss = f();
    backward(loss);
    std::vector<double> analytic(theta.numel(), 0.0);
    if (theta.has_grad()) analytic = theta.grad();
    theta.zero_grad();

    double worst = 0.0;
    NoGradGuard ng;
    auto& vals = theta.data();
    for (int i = 0; i < theta.numel(); ++i) {
        const double saved = vals[i];
        vals[i] = saved + h;
        const double fp = f().value();
        vals[i] = saved - h;
        const double fm = f().value();
        vals[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace gevit
