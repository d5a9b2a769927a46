#pragma once

// Dense f64 tensor with tape-style reverse-mode differentiation.
// Tensors are shared handles to graph nodes; a node's value is immutable
// after the op that produced it, only the grad buffer mutates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace lfr {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;  // null for leaves

    int numel() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int>(data.size()))
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(shape_numel(shape)), v);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int numel() const { return n_->numel(); }
    int rows() const { return n_->shape.at(0); }
    int cols() const { return n_->shape.at(1); }
    const std::vector<double>& data() const { return n_->value; }
    std::vector<double>& mutable_data() { return n_->value; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    double item() const {
        if (n_->numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(n_->shape));
        return n_->value[0];
    }
    double at(int i) const { return n_->value.at(static_cast<size_t>(i)); }
    double at(int r, int c) const { return n_->value.at(static_cast<size_t>(r) * cols() + c); }
    NodePtr node() const { return n_; }

    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    // Reverse sweep from this scalar. Interior grads are reset per sweep;
    // leaf grads accumulate across sweeps.
    void backward() const;

private:
    NodePtr n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                      std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward = std::move(bw);
    return Tensor(n);
}

inline void topo_sort(const NodePtr& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* in = node->inputs[idx++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

inline void Tensor::backward() const {
    if (numel() != 1) throw DimensionError("backward() requires a scalar root, got " + shape_str(shape()));
    if (!n_->requires_grad) return;
    std::vector<Node*> order;
    detail::topo_sort(n_, order);
    for (Node* node : order) {
        node->ensure_grad();
        if (node->backward) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward) node->backward(*node);
    }
}

// ---- elementwise ----

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.data());
    for (int i = 0; i < a.numel(); ++i) v[i] += b.data()[i];
    return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *n.inputs[k];
            if (!in.requires_grad) continue;
            in.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.data());
    for (int i = 0; i < a.numel(); ++i) v[i] -= b.data()[i];
    return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *n.inputs[k];
            if (!in.requires_grad) continue;
            in.ensure_grad();
            const double s = k == 0 ? 1.0 : -1.0;
            for (size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += s * n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.data());
    for (int i = 0; i < a.numel(); ++i) v[i] *= b.data()[i];
    return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](Node& n) {
        Node& x = *n.inputs[0];
        Node& y = *n.inputs[1];
        if (x.requires_grad) {
            x.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += n.grad[i] * y.value[i];
        }
        if (y.requires_grad) {
            y.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) y.grad[i] += n.grad[i] * x.value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.data());
    for (auto& x : v) x *= s;
    return detail::make_op(a.shape(), std::move(v), {a.node()}, [s](Node& n) {
        Node& in = *n.inputs[0];
        in.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += s * n.grad[i];
    });
}

// Broadcast-multiply by a scalar tensor (gate path).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale_by: scale must be a scalar, got " + shape_str(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> v(a.data());
    for (auto& x : v) x *= sv;
    return detail::make_op(a.shape(), std::move(v), {a.node(), s.node()}, [](Node& n) {
        Node& x = *n.inputs[0];
        Node& sc = *n.inputs[1];
        const double sv = sc.value[0];
        if (x.requires_grad) {
            x.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += sv * n.grad[i];
        }
        if (sc.requires_grad) {
            sc.ensure_grad();
            double acc = 0.0;
            for (size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * x.value[i];
            sc.grad[0] += acc;
        }
    });
}

enum class Pointwise { Tanh, Gelu, Relu, Log, Exp, Sigmoid };

inline Tensor pointwise(Pointwise kind, const Tensor& x) {
    const auto& in = x.data();
    std::vector<double> v(in.size());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < in.size(); ++i) {
        const double z = in[i];
        switch (kind) {
            case Pointwise::Tanh: v[i] = std::tanh(z); break;
            case Pointwise::Gelu: v[i] = 0.5 * z * (1.0 + std::erf(z * inv_sqrt2)); break;
            case Pointwise::Relu: v[i] = z > 0.0 ? z : 0.0; break;
            case Pointwise::Log:
                if (!(z > 0.0))
                    throw DomainError("log: non-positive entry " + std::to_string(z) + " at index " +
                                      std::to_string(i));
                v[i] = std::log(z);
                break;
            case Pointwise::Exp: v[i] = std::exp(z); break;
            case Pointwise::Sigmoid: v[i] = 1.0 / (1.0 + std::exp(-z)); break;
        }
    }
    return detail::make_op(x.shape(), std::move(v), {x.node()}, [kind](Node& n) {
        Node& in = *n.inputs[0];
        in.ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double z = in.value[i];
            const double y = n.value[i];
            double d = 0.0;
            switch (kind) {
                case Pointwise::Tanh: d = 1.0 - y * y; break;
                case Pointwise::Gelu:
                    d = 0.5 * (1.0 + std::erf(z * inv_sqrt2)) + z * inv_sqrt2pi * std::exp(-0.5 * z * z);
                    break;
                case Pointwise::Relu: d = z > 0.0 ? 1.0 : 0.0; break;
                case Pointwise::Log: d = 1.0 / z; break;
                case Pointwise::Exp: d = y; break;
                case Pointwise::Sigmoid: d = y * (1.0 - y); break;
            }
            in.grad[i] += d * n.grad[i];
        }
    });
}

inline Tensor tanh_t(const Tensor& x) { return pointwise(Pointwise::Tanh, x); }
inline Tensor gelu(const Tensor& x) { return pointwise(Pointwise::Gelu, x); }
inline Tensor relu(const Tensor& x) { return pointwise(Pointwise::Relu, x); }
inline Tensor sigmoid(const Tensor& x) { return pointwise(Pointwise::Sigmoid, x); }

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw DimensionError("matmul: both operands must be rank-2, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> v(static_cast<size_t>(m) * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double aip = av[static_cast<size_t>(i) * k + p];
            const double* brow = &bv[static_cast<size_t>(p) * n];
            double* crow = &v[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    return detail::make_op({m, n}, std::move(v), {a.node(), b.node()}, [m, k, n](Node& nd) {
        Node& a = *nd.inputs[0];
        Node& b = *nd.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            // dA = dC * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = nd.grad[static_cast<size_t>(i) * n + j];
                    if (g == 0.0) continue;
                    const double* brow = &b.value[0];
                    for (int p = 0; p < k; ++p)
                        a.grad[static_cast<size_t>(i) * k + p] += g * brow[static_cast<size_t>(p) * n + j];
                }
        }
        if (b.requires_grad) {
            b.ensure_grad();
            // dB = A^T * dC
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double aip = a.value[static_cast<size_t>(i) * k + p];
                    if (aip == 0.0) continue;
                    const double* grow = &nd.grad[static_cast<size_t>(i) * n];
                    double* brow = &b.grad[static_cast<size_t>(p) * n];
                    for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("transpose: rank-2 required");
    const int m = a.rows(), n = a.cols();
    std::vector<double> v(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) v[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    return detail::make_op({n, m}, std::move(v), {a.node()}, [m, n](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                in.grad[static_cast<size_t>(i) * n + j] += nd.grad[static_cast<size_t>(j) * m + i];
    });
}

// Broadcast-add a 1xC row vector to every row of an NxC matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    if (a.shape().size() != 2 || bias.shape().size() != 2 || bias.rows() != 1 || bias.cols() != a.cols())
        throw DimensionError("add_rowvec: need NxC plus 1xC, got " + shape_str(a.shape()) + " and " +
                             shape_str(bias.shape()));
    const int m = a.rows(), c = a.cols();
    std::vector<double> v(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) v[static_cast<size_t>(i) * c + j] += bias.data()[j];
    return detail::make_op(a.shape(), std::move(v), {a.node(), bias.node()}, [m, c](Node& nd) {
        Node& a = *nd.inputs[0];
        Node& b = *nd.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (size_t i = 0; i < nd.grad.size(); ++i) a.grad[i] += nd.grad[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) b.grad[j] += nd.grad[static_cast<size_t>(i) * c + j];
        }
    });
}

inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("softmax_rows: rank-2 required");
    const int m = a.rows(), n = a.cols();
    if (n == 0) throw DomainError("softmax: empty vector");
    std::vector<double> v(a.data());
    for (int i = 0; i < m; ++i) {
        double* row = &v[static_cast<size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= s;
    }
    return detail::make_op(a.shape(), std::move(v), {a.node()}, [m, n](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = &nd.value[static_cast<size_t>(i) * n];
            const double* g = &nd.grad[static_cast<size_t>(i) * n];
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += y[j] * g[j];
            double* gx = &in.grad[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    });
}

// softmax over a flat vector (any shape, treated as one row)
inline Tensor softmax(const Tensor& a) {
    if (a.numel() == 0) throw DomainError("softmax: empty vector");
    const int n = a.numel();
    std::vector<double> v(a.data());
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (auto& x : v) {
        x = std::exp(x - mx);
        s += x;
    }
    for (auto& x : v) x /= s;
    return detail::make_op(a.shape(), std::move(v), {a.node()}, [n](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += nd.value[j] * nd.grad[j];
        for (int j = 0; j < n; ++j) in.grad[j] += nd.value[j] * (nd.grad[j] - dot);
    });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.rows() != b.rows())
        throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int m = a.rows(), c1 = a.cols(), c2 = b.cols();
    std::vector<double> v(static_cast<size_t>(m) * (c1 + c2));
    for (int i = 0; i < m; ++i) {
        std::copy_n(&a.data()[static_cast<size_t>(i) * c1], c1, &v[static_cast<size_t>(i) * (c1 + c2)]);
        if (c2 > 0)
            std::copy_n(&b.data()[static_cast<size_t>(i) * c2], c2,
                        &v[static_cast<size_t>(i) * (c1 + c2) + c1]);
    }
    return detail::make_op({m, c1 + c2}, std::move(v), {a.node(), b.node()}, [m, c1, c2](Node& nd) {
        Node& a = *nd.inputs[0];
        Node& b = *nd.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c1; ++j)
                    a.grad[static_cast<size_t>(i) * c1 + j] += nd.grad[static_cast<size_t>(i) * (c1 + c2) + j];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c2; ++j)
                    b.grad[static_cast<size_t>(i) * c2 + j] +=
                        nd.grad[static_cast<size_t>(i) * (c1 + c2) + c1 + j];
        }
    });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int r1 = a.rows(), r2 = b.rows(), c = a.cols();
    std::vector<double> v;
    v.reserve(static_cast<size_t>(r1 + r2) * c);
    v.insert(v.end(), a.data().begin(), a.data().end());
    v.insert(v.end(), b.data().begin(), b.data().end());
    return detail::make_op({r1 + r2, c}, std::move(v), {a.node(), b.node()}, [r1, r2, c](Node& nd) {
        Node& a = *nd.inputs[0];
        Node& b = *nd.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += nd.grad[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            const size_t off = static_cast<size_t>(r1) * c;
            for (size_t i = 0; i < b.grad.size(); ++i) b.grad[i] += nd.grad[off + i];
        }
    });
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.shape().size() != 2 || r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") for " + shape_str(a.shape()));
    const int c = a.cols();
    std::vector<double> v(a.data().begin() + static_cast<size_t>(r0) * c,
                          a.data().begin() + static_cast<size_t>(r1) * c);
    return detail::make_op({r1 - r0, c}, std::move(v), {a.node()}, [r0, c](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        const size_t off = static_cast<size_t>(r0) * c;
        for (size_t i = 0; i < nd.grad.size(); ++i) in.grad[off + i] += nd.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.shape().size() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw DimensionError("slice_cols: bad range for " + shape_str(a.shape()));
    const int m = a.rows(), c = a.cols(), w = c1 - c0;
    std::vector<double> v(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        std::copy_n(&a.data()[static_cast<size_t>(i) * c + c0], w, &v[static_cast<size_t>(i) * w]);
    return detail::make_op({m, w}, std::move(v), {a.node()}, [m, c, c0, w](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                in.grad[static_cast<size_t>(i) * c + c0 + j] += nd.grad[static_cast<size_t>(i) * w + j];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> v(a.data());
    return detail::make_op(std::move(shape), std::move(v), {a.node()}, [](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        for (size_t i = 0; i < nd.grad.size(); ++i) in.grad[i] += nd.grad[i];
    });
}

// out[i] = in[map[i]]; map need not be a bijection.
inline Tensor gather(const Tensor& a, std::vector<int> map, Shape out_shape) {
    if (static_cast<int>(map.size()) != shape_numel(out_shape))
        throw DimensionError("gather: map length does not match output shape");
    std::vector<double> v(map.size());
    for (size_t i = 0; i < map.size(); ++i) v[i] = a.data().at(static_cast<size_t>(map[i]));
    auto mp = std::make_shared<std::vector<int>>(std::move(map));
    return detail::make_op(std::move(out_shape), std::move(v), {a.node()}, [mp](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        for (size_t i = 0; i < nd.grad.size(); ++i) in.grad[(*mp)[i]] += nd.grad[i];
    });
}

inline Tensor sum_all(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return detail::make_op({1}, {s}, {a.node()}, [](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        const double g = nd.grad[0];
        for (auto& x : in.grad) x += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    const int n = a.numel();
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) / n;
    return detail::make_op({1}, {s}, {a.node()}, [n](Node& nd) {
        Node& in = *nd.inputs[0];
        in.ensure_grad();
        const double g = nd.grad[0] / n;
        for (auto& x : in.grad) x += g;
    });
}

// Row-wise layer normalization with learned 1xC gain/shift.
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6) {
    if (x.shape().size() != 2 || gamma.cols() != x.cols() || beta.cols() != x.cols())
        throw DimensionError("layernorm_rows: inconsistent shapes");
    const int m = x.rows(), c = x.cols();
    std::vector<double> v(static_cast<size_t>(m) * c);
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * 2);  // mu, inv_sigma per row
    for (int i = 0; i < m; ++i) {
        const double* row = &x.data()[static_cast<size_t>(i) * c];
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>(i) * 2] = mu;
        (*stats)[static_cast<size_t>(i) * 2 + 1] = inv;
        for (int j = 0; j < c; ++j)
            v[static_cast<size_t>(i) * c + j] = (row[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
    }
    return detail::make_op(x.shape(), std::move(v), {x.node(), gamma.node(), beta.node()},
                           [m, c, stats](Node& nd) {
                               Node& x = *nd.inputs[0];
                               Node& gm = *nd.inputs[1];
                               Node& bt = *nd.inputs[2];
                               if (gm.requires_grad) gm.ensure_grad();
                               if (bt.requires_grad) bt.ensure_grad();
                               if (x.requires_grad) x.ensure_grad();
                               for (int i = 0; i < m; ++i) {
                                   const double mu = (*stats)[static_cast<size_t>(i) * 2];
                                   const double inv = (*stats)[static_cast<size_t>(i) * 2 + 1];
                                   const double* xr = &x.value[static_cast<size_t>(i) * c];
                                   const double* gr = &nd.grad[static_cast<size_t>(i) * c];
                                   if (gm.requires_grad || bt.requires_grad) {
                                       for (int j = 0; j < c; ++j) {
                                           const double xh = (xr[j] - mu) * inv;
                                           if (gm.requires_grad) gm.grad[j] += gr[j] * xh;
                                           if (bt.requires_grad) bt.grad[j] += gr[j];
                                       }
                                   }
                                   if (x.requires_grad) {
                                       double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                       for (int j = 0; j < c; ++j) {
                                           const double xh = (xr[j] - mu) * inv;
                                           const double dxh = gr[j] * gm.value[j];
                                           mean_dxh += dxh;
                                           mean_dxh_xh += dxh * xh;
                                       }
                                       mean_dxh /= c;
                                       mean_dxh_xh /= c;
                                       for (int j = 0; j < c; ++j) {
                                           const double xh = (xr[j] - mu) * inv;
                                           const double dxh = gr[j] * gm.value[j];
                                           x.grad[static_cast<size_t>(i) * c + j] +=
                                               inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                                       }
                                   }
                               }
                           });
}

// 2x2 stride-2 transpose convolution: {ci,H,W} -> {co,2H,2W}.
// weight shape {co, ci, 2, 2}, bias shape {co}.
inline Tensor tconv2x2(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 3 || w.shape().size() != 4 || w.shape()[2] != 2 || w.shape()[3] != 2)
        throw DimensionError("tconv2x2: need {ci,H,W} input and {co,ci,2,2} weight");
    const int ci = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int co = w.shape()[0];
    if (w.shape()[1] != ci || b.numel() != co) throw DimensionError("tconv2x2: channel mismatch");
    const int OH = 2 * H, OW = 2 * W;
    std::vector<double> v(static_cast<size_t>(co) * OH * OW);
    for (int o = 0; o < co; ++o) {
        const double bo = b.data()[o];
        for (int i = 0; i < OH; ++i)
            for (int j = 0; j < OW; ++j) {
                const int si = i / 2, sj = j / 2, di = i % 2, dj = j % 2;
                double acc = bo;
                for (int c = 0; c < ci; ++c)
                    acc += w.data()[((static_cast<size_t>(o) * ci + c) * 2 + di) * 2 + dj] *
                           x.data()[(static_cast<size_t>(c) * H + si) * W + sj];
                v[(static_cast<size_t>(o) * OH + i) * OW + j] = acc;
            }
    }
    return detail::make_op({co, OH, OW}, std::move(v), {x.node(), w.node(), b.node()},
                           [ci, H, W, co](Node& nd) {
                               const int OH = 2 * H, OW = 2 * W;
                               Node& x = *nd.inputs[0];
                               Node& w = *nd.inputs[1];
                               Node& b = *nd.inputs[2];
                               if (x.requires_grad) x.ensure_grad();
                               if (w.requires_grad) w.ensure_grad();
                               if (b.requires_grad) b.ensure_grad();
                               for (int o = 0; o < co; ++o)
                                   for (int i = 0; i < OH; ++i)
                                       for (int j = 0; j < OW; ++j) {
                                           const double g = nd.grad[(static_cast<size_t>(o) * OH + i) * OW + j];
                                           if (g == 0.0) continue;
                                           const int si = i / 2, sj = j / 2, di = i % 2, dj = j % 2;
                                           if (b.requires_grad) b.grad[o] += g;
                                           for (int c = 0; c < ci; ++c) {
                                               const size_t wi =
                                                   ((static_cast<size_t>(o) * ci + c) * 2 + di) * 2 + dj;
                                               const size_t xi = (static_cast<size_t>(c) * H + si) * W + sj;
                                               if (w.requires_grad) w.grad[wi] += g * x.value[xi];
                                               if (x.requires_grad) x.grad[xi] += g * w.value[wi];
                                           }
                                       }
                           });
}

inline bool all_finite(const Tensor& t) {
    for (double x : t.data())
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace lfr
