// Dense tensor storage with a reverse-mode gradient tape, plus the
// differentiable operation set used by the models in this project.
#pragma once

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

namespace dnerv {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw TensorError(msg);
}

// Thread-local switch: when grad mode is off, ops do not record parents and
// outputs are plain buffers. Used for evaluation passes and finite differences.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

// Diagnostic: number of graph nodes currently alive (leak canary for tests).
inline int64_t& live_node_count() {
    static int64_t n = 0;
    return n;
}

#ifdef DNERV_NODE_DEBUG
inline std::unordered_set<void*>& live_node_set() {
    static std::unordered_set<void*> s;
    return s;
}
#endif

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // accumulates into parents' grads
    bool backward_done = false;

    Node() {
        ++live_node_count();
#ifdef DNERV_NODE_DEBUG
        live_node_set().insert(this);
#endif
    }
    ~Node() {
        --live_node_count();
#ifdef DNERV_NODE_DEBUG
        live_node_set().erase(this);
#endif
    }
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from(std::move(shape), {}, requires_grad);
    }
    // Non-owning view of an existing node. Backward closures hold one of
    // these so a node never keeps itself alive through its own closure.
    static Tensor unowned(const std::shared_ptr<Node<T>>& n) {
        Tensor t;
        t.n_ = std::shared_ptr<Node<T>>(n.get(), [](Node<T>*) {});
        return t;
    }
    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        for (int64_t d : shape)
            check(d > 0, "tensor dimension must be positive, got shape " + shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        if (data.empty())
            n->value.assign(numel(n->shape), T(0));
        else {
            check((int64_t)data.size() == numel(n->shape),
                  "data length " + std::to_string(data.size()) + " does not match shape " +
                      shape_str(n->shape));
            n->value = std::move(data);
        }
        n->requires_grad = requires_grad;
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return (bool)n_; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return (int64_t)n_->value.size(); }
    int64_t dim(int i) const { return n_->shape[(size_t)i]; }
    std::vector<T>& data() { return n_->value; }
    const std::vector<T>& data() const { return n_->value; }
    // A Tensor is a shared handle; gradient accumulation mutates the node
    // even through const handles captured in backward closures.
    std::vector<T>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }
    T item() const {
        check(size() == 1, "item() requires a scalar tensor, got " + shape_str(shape()));
        return n_->value[0];
    }
    std::shared_ptr<Node<T>> node() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

// ---------------------------------------------------------------------------
// Tape: reverse topological order over the graph reachable from a root.

template <typename T>
class Tape {
public:
    explicit Tape(const Tensor<T>& root) : root_(root.node()) {
        check((bool)root_, "backward on an undefined tensor");
        check(root_->value.size() == 1, "backward root must be scalar, got " +
                                            shape_str(root_->shape));
        // Iterative post-order DFS; creation order is not tracked globally, so
        // we derive the topological order from the parent links.
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.push_back({root_.get(), 0});
        seen.insert(root_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node<T>* p = node->parents[idx++].get();
                if (!seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    void backward() {
        check(!root_->backward_done, "backward called twice without re-running forward");
        root_->backward_done = true;
        root_->ensure_grad();
        root_->grad[0] = T(1);
        // order_ is post-order, so iterating it in reverse visits every node
        // before any of its parents.
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn) n->backward_fn();
        }
    }

private:
    std::shared_ptr<Node<T>> root_;
    std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>(loss).backward();
}

// ---------------------------------------------------------------------------
// Op plumbing.

template <typename T>
bool any_requires_grad(const std::vector<Tensor<T>>& inputs) {
    for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Creates the output node and, when grad mode is on and some input needs
// gradients, wires parents and the backward closure.
template <typename T, typename BackwardFactory>
Tensor<T> record(Shape shape, std::vector<T> value,
                 const std::vector<Tensor<T>>& inputs, BackwardFactory make_backward) {
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
    if (grad_mode() && any_requires_grad(inputs)) {
        auto n = out.node();
        n->requires_grad = true;
        for (const auto& in : inputs)
            if (in.defined()) n->parents.push_back(in.node());
        // The closure lives on the node itself, so hand the factory a
        // non-owning self handle: an owning one would be a reference cycle
        // that leaks every graph not consumed by backward().
        Tensor<T> self = Tensor<T>::unowned(n);
        n->backward_fn = make_backward(self);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Small deterministic GEMM helpers (row-major). Each output row is written by
// exactly one thread so results are bit-identical for any thread count.

#if defined(_OPENMP)
#define DNERV_PRAGMA_PARALLEL_FOR _Pragma("omp parallel for schedule(static)")
#else
#define DNERV_PRAGMA_PARALLEL_FOR
#endif

// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    DNERV_PRAGMA_PARALLEL_FOR
    for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        const T* a = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            T av = a[p];
            if (av == T(0)) continue;
            const T* b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    DNERV_PRAGMA_PARALLEL_FOR
    for (int64_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* b = B + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] += acc;
        }
    }
}

// C(m,n) += A(k,m)^T * B(k,n)
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    DNERV_PRAGMA_PARALLEL_FOR
    for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = A[p * m + i];
            if (av == T(0)) continue;
            const T* b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops.

enum class EwKind { add, sub, mul, scale };

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    return record<T>(a.shape(), std::move(v), {a, b}, [a, b](Tensor<T>& out) {
        auto on = out.node();
        return [a, b, on]() mutable {
            if (a.requires_grad()) {
                auto& g = a.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
            if (b.requires_grad()) {
                auto& g = b.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
        };
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    return record<T>(a.shape(), std::move(v), {a, b}, [a, b](Tensor<T>& out) {
        auto on = out.node();
        return [a, b, on]() mutable {
            if (a.requires_grad()) {
                auto& g = a.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
            }
            if (b.requires_grad()) {
                auto& g = b.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
            }
        };
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    return record<T>(a.shape(), std::move(v), {a, b}, [a, b](Tensor<T>& out) {
        auto on = out.node();
        return [a, b, on]() mutable {
            if (a.requires_grad()) {
                auto& g = a.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& g = b.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * a.data()[i];
            }
        };
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "div");
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] / b.data()[i];
    return record<T>(a.shape(), std::move(v), {a, b}, [a, b](Tensor<T>& out) {
        auto on = out.node();
        return [a, b, on]() mutable {
            if (a.requires_grad()) {
                auto& g = a.grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] / b.data()[i];
            }
            if (b.requires_grad()) {
                auto& g = b.grad();
                for (size_t i = 0; i < g.size(); ++i) {
                    T bv = b.data()[i];
                    g[i] -= on->grad[i] * a.data()[i] / (bv * bv);
                }
            }
        };
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * s;
    return record<T>(a.shape(), std::move(v), {a}, [a, s](Tensor<T>& out) {
        auto on = out.node();
        return [a, s, on]() mutable {
            if (!a.requires_grad()) return;
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * s;
        };
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + s;
    return record<T>(a.shape(), std::move(v), {a}, [a](Tensor<T>& out) {
        auto on = out.node();
        return [a, on]() mutable {
            if (!a.requires_grad()) return;
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        };
    });
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
    switch (kind) {
        case EwKind::add: return add(a, b);
        case EwKind::sub: return sub(a, b);
        case EwKind::mul: return mul(a, b);
        case EwKind::scale:
            check(b.size() == 1, "elementwise scale expects a scalar second operand, got " +
                                     shape_str(b.shape()));
            return scale(a, b.data()[0]);
    }
    throw TensorError("unknown elementwise kind");
}

template <typename T>
Tensor<T> absval(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = std::abs(a.data()[i]);
    return record<T>(a.shape(), std::move(v), {a}, [a](Tensor<T>& out) {
        auto on = out.node();
        return [a, on]() mutable {
            if (!a.requires_grad()) return;
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                T x = a.data()[i];
                g[i] += on->grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
            }
        };
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T x : a.data()) acc += x;
    return record<T>({1}, {acc}, {a}, [a](Tensor<T>& out) {
        auto on = out.node();
        return [a, on]() mutable {
            if (!a.requires_grad()) return;
            T g0 = on->grad[0];
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
        };
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / (T)a.size());
}

// ---------------------------------------------------------------------------
// Activations.

template <typename T>
T gauss_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
}

// Exact x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * gauss_cdf(a.data()[i]);
    return record<T>(a.shape(), std::move(v), {a}, [a](Tensor<T>& out) {
        auto on = out.node();
        return [a, on]() mutable {
            if (!a.requires_grad()) return;
            const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * (T)M_PI);
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                T x = a.data()[i];
                T pdf = inv_sqrt2pi * std::exp(-x * x / T(2));
                g[i] += on->grad[i] * (gauss_cdf(x) + x * pdf);
            }
        };
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.size());
    for (int64_t i = 0; i < a.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
    return record<T>(a.shape(), std::move(v), {a}, [a](Tensor<T>& out) {
        auto on = out.node();
        return [a, on]() mutable {
            if (!a.requires_grad()) return;
            auto& g = a.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                T y = on->value[i];
                g[i] += on->grad[i] * y * (T(1) - y);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, x[B,Cin,H,W] * w[Cout,Cin,k,k] (+ b[Cout]).

template <typename T>
void im2col(const T* x, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* cols) {
    for (int64_t c = 0; c < cin; ++c) {
        const T* plane = x + c * h * w;
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
                        continue;
                    }
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* cols, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride,
                int64_t pad, int64_t oh, int64_t ow, T* x) {
    for (int64_t c = 0; c < cin; ++c) {
        T* plane = x + c * h * w;
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((c * k + ky) * k + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) plane[iy * w + ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int64_t stride = 1, int64_t pad = 0) {
    check(x.shape().size() == 4, "conv2d: input must be 4-D, got " + shape_str(x.shape()));
    check(w.shape().size() == 4, "conv2d: weight must be 4-D, got " + shape_str(w.shape()));
    int64_t bs = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    int64_t cout = w.dim(0), k = w.dim(2);
    check(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
    check(k % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(k));
    check(stride >= 1 && pad >= 0, "conv2d: stride >= 1 and pad >= 0 required");
    check(w.dim(1) == cin, "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                               " vs weight " + shape_str(w.shape()));
    check((h + 2 * pad - k) % stride == 0 && (ww + 2 * pad - k) % stride == 0,
          "conv2d: non-integral output size for input " + shape_str(x.shape()) +
              " kernel " + std::to_string(k) + " stride " + std::to_string(stride) +
              " pad " + std::to_string(pad));
    int64_t oh = (h + 2 * pad - k) / stride + 1;
    int64_t ow = (ww + 2 * pad - k) / stride + 1;
    if (b.defined())
        check(b.shape() == Shape{cout}, "conv2d: bias shape " + shape_str(b.shape()) +
                                            " does not match " + std::to_string(cout) +
                                            " output channels");

    int64_t ck2 = cin * k * k, on = oh * ow;
    std::vector<T> out((size_t)(bs * cout * on), T(0));
    std::vector<T> cols((size_t)(ck2 * on));
    for (int64_t bi = 0; bi < bs; ++bi) {
        im2col(x.data().data() + bi * cin * h * ww, cin, h, ww, k, stride, pad, oh, ow,
               cols.data());
        gemm_nn(w.data().data(), cols.data(), out.data() + bi * cout * on, cout, ck2, on);
        if (b.defined()) {
            T* o = out.data() + bi * cout * on;
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t i = 0; i < on; ++i) o[co * on + i] += b.data()[co];
        }
    }

    std::vector<Tensor<T>> inputs = b.defined() ? std::vector<Tensor<T>>{x, w, b}
                                                : std::vector<Tensor<T>>{x, w};
    return record<T>({bs, cout, oh, ow}, std::move(out), inputs,
                     [=](Tensor<T>& o) {
        auto on_node = o.node();
        return [=]() mutable {
            const auto& go = on_node->grad;
            std::vector<T> cols2((size_t)(ck2 * on));
            std::vector<T> gcols((size_t)(ck2 * on));
            for (int64_t bi = 0; bi < bs; ++bi) {
                const T* g = go.data() + bi * cout * on;
                if (b.defined() && b.requires_grad()) {
                    auto& gb = const_cast<Tensor<T>&>(b).grad();
                    for (int64_t co = 0; co < cout; ++co) {
                        T acc = T(0);
                        for (int64_t i = 0; i < on; ++i) acc += g[co * on + i];
                        gb[co] += acc;
                    }
                }
                if (w.requires_grad() || x.requires_grad()) {
                    if (w.requires_grad()) {
                        im2col(x.data().data() + bi * cin * h * ww, cin, h, ww, k, stride,
                               pad, oh, ow, cols2.data());
                        gemm_nt(g, cols2.data(), const_cast<Tensor<T>&>(w).grad().data(),
                                cout, on, ck2);
                    }
                    if (x.requires_grad()) {
                        std::fill(gcols.begin(), gcols.end(), T(0));
                        gemm_tn(w.data().data(), g, gcols.data(), ck2, cout, on);
                        col2im_acc(gcols.data(), cin, h, ww, k, stride, pad, oh, ow,
                                   const_cast<Tensor<T>&>(x).grad().data() + bi * cin * h * ww);
                    }
                }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// linear: affine map over the last axis, leading axes flattened.

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check(x.shape().size() >= 1 && w.shape().size() == 2,
          "linear: x must have >=1 dims and w exactly 2");
    int64_t din = w.dim(0), dout = w.dim(1);
    check(x.shape().back() == din, "linear: last dim of x " + shape_str(x.shape()) +
                                       " does not match w " + shape_str(w.shape()));
    if (b.defined())
        check(b.shape() == Shape{dout}, "linear: bias shape mismatch");
    int64_t rows = x.size() / din;
    std::vector<T> out((size_t)(rows * dout), T(0));
    gemm_nn(x.data().data(), w.data().data(), out.data(), rows, din, dout);
    if (b.defined())
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < dout; ++j) out[r * dout + j] += b.data()[j];
    Shape os = x.shape();
    os.back() = dout;
    std::vector<Tensor<T>> inputs = b.defined() ? std::vector<Tensor<T>>{x, w, b}
                                                : std::vector<Tensor<T>>{x, w};
    return record<T>(std::move(os), std::move(out), inputs, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            const T* g = on->grad.data();
            if (x.requires_grad())
                gemm_nt(g, w.data().data(), const_cast<Tensor<T>&>(x).grad().data(), rows,
                        dout, din);
            if (w.requires_grad())
                gemm_tn(x.data().data(), g, const_cast<Tensor<T>&>(w).grad().data(), din,
                        rows, dout);
            if (b.defined() && b.requires_grad()) {
                auto& gb = const_cast<Tensor<T>&>(b).grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
            }
        };
    });
}

// ---------------------------------------------------------------------------
// PixelShuffle and its inverse (space-to-depth).

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int64_t r) {
    check(x.shape().size() == 4, "pixel_shuffle: input must be 4-D");
    int64_t bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    check(r >= 1 && c % (r * r) == 0,
          "pixel_shuffle: channel count " + std::to_string(c) + " not divisible by r^2=" +
              std::to_string(r * r));
    int64_t co = c / (r * r);
    std::vector<T> out((size_t)x.size());
    const T* in = x.data().data();
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t cc = 0; cc < co; ++cc)
            for (int64_t dy = 0; dy < r; ++dy)
                for (int64_t dx = 0; dx < r; ++dx) {
                    const T* src = in + (((bi * c) + cc * r * r + dy * r + dx) * h) * w;
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t xx = 0; xx < w; ++xx)
                            out[((bi * co + cc) * h * r + (y * r + dy)) * (w * r) +
                                (xx * r + dx)] = src[y * w + xx];
                }
    return record<T>({bs, co, h * r, w * r}, std::move(out), {x}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            if (!x.requires_grad()) return;
            T* gx = const_cast<Tensor<T>&>(x).grad().data();
            const T* g = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi)
                for (int64_t cc = 0; cc < co; ++cc)
                    for (int64_t dy = 0; dy < r; ++dy)
                        for (int64_t dx = 0; dx < r; ++dx) {
                            T* dst = gx + (((bi * c) + cc * r * r + dy * r + dx) * h) * w;
                            for (int64_t y = 0; y < h; ++y)
                                for (int64_t xx = 0; xx < w; ++xx)
                                    dst[y * w + xx] +=
                                        g[((bi * co + cc) * h * r + (y * r + dy)) * (w * r) +
                                          (xx * r + dx)];
                        }
        };
    });
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int64_t r) {
    check(x.shape().size() == 4, "pixel_unshuffle: input must be 4-D");
    int64_t bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    check(r >= 1 && h % r == 0 && w % r == 0,
          "pixel_unshuffle: spatial size " + shape_str(x.shape()) + " not divisible by r=" +
              std::to_string(r));
    int64_t co = c * r * r, ho = h / r, wo = w / r;
    std::vector<T> out((size_t)x.size());
    const T* in = x.data().data();
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t cc = 0; cc < c; ++cc)
            for (int64_t dy = 0; dy < r; ++dy)
                for (int64_t dx = 0; dx < r; ++dx) {
                    T* dst = out.data() + ((bi * co + cc * r * r + dy * r + dx) * ho) * wo;
                    const T* src = in + ((bi * c + cc) * h) * w;
                    for (int64_t y = 0; y < ho; ++y)
                        for (int64_t xx = 0; xx < wo; ++xx)
                            dst[y * wo + xx] = src[(y * r + dy) * w + (xx * r + dx)];
                }
    return record<T>({bs, co, ho, wo}, std::move(out), {x}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            if (!x.requires_grad()) return;
            T* gx = const_cast<Tensor<T>&>(x).grad().data();
            const T* g = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi)
                for (int64_t cc = 0; cc < c; ++cc)
                    for (int64_t dy = 0; dy < r; ++dy)
                        for (int64_t dx = 0; dx < r; ++dx) {
                            const T* src =
                                g + ((bi * co + cc * r * r + dy * r + dx) * ho) * wo;
                            T* dst = gx + ((bi * c + cc) * h) * w;
                            for (int64_t y = 0; y < ho; ++y)
                                for (int64_t xx = 0; xx < wo; ++xx)
                                    dst[(y * r + dy) * w + (xx * r + dx)] += src[y * wo + xx];
                        }
        };
    });
}

// ---------------------------------------------------------------------------
// bilinear_sample: out(p) = bilinear(src, p + flow(p)), border-clamped.
// flow[B,2,H,W] holds (dx, dy) pixel displacements.

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& src, const Tensor<T>& flow) {
    check(src.shape().size() == 4 && flow.shape().size() == 4,
          "bilinear_sample: 4-D tensors expected");
    int64_t bs = src.dim(0), c = src.dim(1), h = src.dim(2), w = src.dim(3);
    check(flow.dim(0) == bs && flow.dim(1) == 2 && flow.dim(2) == h && flow.dim(3) == w,
          "bilinear_sample: flow shape " + shape_str(flow.shape()) +
              " does not match src " + shape_str(src.shape()));
    std::vector<T> out((size_t)src.size());
    auto clampf = [](T v, T lo, T hi) { return v < lo ? lo : (v > hi ? hi : v); };
    const T* s = src.data().data();
    const T* f = flow.data().data();
    int64_t plane = h * w;
    for (int64_t bi = 0; bi < bs; ++bi) {
        const T* fx = f + (bi * 2 + 0) * plane;
        const T* fy = f + (bi * 2 + 1) * plane;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                int64_t p = y * w + x;
                T sx = clampf((T)x + fx[p], T(0), (T)(w - 1));
                T sy = clampf((T)y + fy[p], T(0), (T)(h - 1));
                int64_t x0 = (int64_t)std::floor(sx), y0 = (int64_t)std::floor(sy);
                int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                T wx = sx - (T)x0, wy = sy - (T)y0;
                for (int64_t cc = 0; cc < c; ++cc) {
                    const T* pl = s + (bi * c + cc) * plane;
                    T v = (T(1) - wy) * ((T(1) - wx) * pl[y0 * w + x0] + wx * pl[y0 * w + x1]) +
                          wy * ((T(1) - wx) * pl[y1 * w + x0] + wx * pl[y1 * w + x1]);
                    out[(bi * c + cc) * plane + p] = v;
                }
            }
    }
    return record<T>(src.shape(), std::move(out), {src, flow}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            const T* g = on->grad.data();
            T* gs = src.requires_grad() ? const_cast<Tensor<T>&>(src).grad().data() : nullptr;
            T* gf = flow.requires_grad() ? const_cast<Tensor<T>&>(flow).grad().data() : nullptr;
            const T* sd = src.data().data();
            const T* f2 = flow.data().data();
            auto clampf2 = [](T v, T lo, T hi) { return v < lo ? lo : (v > hi ? hi : v); };
            for (int64_t bi = 0; bi < bs; ++bi) {
                const T* fx = f2 + (bi * 2 + 0) * plane;
                const T* fy = f2 + (bi * 2 + 1) * plane;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x) {
                        int64_t p = y * w + x;
                        T rawx = (T)x + fx[p], rawy = (T)y + fy[p];
                        T sx = clampf2(rawx, T(0), (T)(w - 1));
                        T sy = clampf2(rawy, T(0), (T)(h - 1));
                        bool cx = (rawx == sx), cy = (rawy == sy);  // inside range
                        int64_t x0 = (int64_t)std::floor(sx), y0 = (int64_t)std::floor(sy);
                        int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                        T wx = sx - (T)x0, wy = sy - (T)y0;
                        T dfx = T(0), dfy = T(0);
                        for (int64_t cc = 0; cc < c; ++cc) {
                            int64_t base = (bi * c + cc) * plane;
                            T go = g[base + p];
                            if (go == T(0)) continue;
                            const T* pl = sd + base;
                            if (gs) {
                                T* gp = gs + base;
                                gp[y0 * w + x0] += go * (T(1) - wy) * (T(1) - wx);
                                gp[y0 * w + x1] += go * (T(1) - wy) * wx;
                                gp[y1 * w + x0] += go * wy * (T(1) - wx);
                                gp[y1 * w + x1] += go * wy * wx;
                            }
                            if (gf) {
                                T dvdx = (T(1) - wy) * (pl[y0 * w + x1] - pl[y0 * w + x0]) +
                                         wy * (pl[y1 * w + x1] - pl[y1 * w + x0]);
                                T dvdy = (T(1) - wx) * (pl[y1 * w + x0] - pl[y0 * w + x0]) +
                                         wx * (pl[y1 * w + x1] - pl[y0 * w + x1]);
                                dfx += go * dvdx;
                                dfy += go * dvdy;
                            }
                        }
                        if (gf) {
                            if (cx) gf[(bi * 2 + 0) * plane + p] += dfx;
                            if (cy) gf[(bi * 2 + 1) * plane + p] += dfy;
                        }
                    }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// time_matmul: out[b,c,h,w,:] = x[b,c,h,w,:] . w[c,:,:]

template <typename T>
Tensor<T> time_matmul(const Tensor<T>& x, const Tensor<T>& w) {
    check(x.shape().size() == 5, "time_matmul: input must be 5-D");
    check(w.shape().size() == 3, "time_matmul: weight must be 3-D");
    int64_t bs = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3), t = x.dim(4);
    check(w.dim(0) == c && w.dim(1) == t && w.dim(2) == t,
          "time_matmul: weight " + shape_str(w.shape()) + " does not match input " +
              shape_str(x.shape()));
    std::vector<T> out((size_t)x.size(), T(0));
    int64_t plane = h * ww;
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t cc = 0; cc < c; ++cc) {
            const T* wm = w.data().data() + cc * t * t;
            const T* xin = x.data().data() + (bi * c + cc) * plane * t;
            T* o = out.data() + (bi * c + cc) * plane * t;
            gemm_nn(xin, wm, o, plane, t, t);
        }
    return record<T>(x.shape(), std::move(out), {x, w}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            const T* g = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi)
                for (int64_t cc = 0; cc < c; ++cc) {
                    const T* wm = w.data().data() + cc * t * t;
                    const T* xin = x.data().data() + (bi * c + cc) * plane * t;
                    const T* go = g + (bi * c + cc) * plane * t;
                    if (x.requires_grad())
                        gemm_nt(go, wm, const_cast<Tensor<T>&>(x).grad().data() +
                                            (bi * c + cc) * plane * t,
                                plane, t, t);
                    if (w.requires_grad())
                        gemm_tn(xin, go, const_cast<Tensor<T>&>(w).grad().data() + cc * t * t,
                                t, plane, t);
                }
        };
    });
}

// ---------------------------------------------------------------------------
// Structural ops: concat along channels, channel slices, reshape, and
// stack/select along a trailing clip axis.

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape().size() == 4 && b.shape().size() == 4, "concat_channels: 4-D expected");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()) + " differ outside the channel axis");
    int64_t bs = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
    std::vector<T> out((size_t)((ca + cb) * bs * plane));
    for (int64_t bi = 0; bi < bs; ++bi) {
        std::copy(a.data().begin() + bi * ca * plane, a.data().begin() + (bi + 1) * ca * plane,
                  out.begin() + bi * (ca + cb) * plane);
        std::copy(b.data().begin() + bi * cb * plane, b.data().begin() + (bi + 1) * cb * plane,
                  out.begin() + bi * (ca + cb) * plane + ca * plane);
    }
    return record<T>({bs, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                     [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            const T* g = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi) {
                if (a.requires_grad()) {
                    T* ga = const_cast<Tensor<T>&>(a).grad().data() + bi * ca * plane;
                    const T* gsrc = g + bi * (ca + cb) * plane;
                    for (int64_t i = 0; i < ca * plane; ++i) ga[i] += gsrc[i];
                }
                if (b.requires_grad()) {
                    T* gb = const_cast<Tensor<T>&>(b).grad().data() + bi * cb * plane;
                    const T* gsrc = g + bi * (ca + cb) * plane + ca * plane;
                    for (int64_t i = 0; i < cb * plane; ++i) gb[i] += gsrc[i];
                }
            }
        };
    });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
    check(x.shape().size() == 4, "slice_channels: 4-D expected");
    check(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_channels: bad range [" +
                                                    std::to_string(c0) + "," +
                                                    std::to_string(c1) + ") for " +
                                                    shape_str(x.shape()));
    int64_t bs = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3), cs = c1 - c0;
    std::vector<T> out((size_t)(bs * cs * plane));
    for (int64_t bi = 0; bi < bs; ++bi)
        std::copy(x.data().begin() + (bi * c + c0) * plane,
                  x.data().begin() + (bi * c + c1) * plane, out.begin() + bi * cs * plane);
    return record<T>({bs, cs, x.dim(2), x.dim(3)}, std::move(out), {x}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            if (!x.requires_grad()) return;
            T* gx = const_cast<Tensor<T>&>(x).grad().data();
            const T* g = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi) {
                T* dst = gx + (bi * c + c0) * plane;
                const T* src = g + bi * cs * plane;
                for (int64_t i = 0; i < cs * plane; ++i) dst[i] += src[i];
            }
        };
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " +
                                        shape_str(shape) + " changes element count");
    std::vector<T> v = x.data();
    return record<T>(std::move(shape), std::move(v), {x}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            if (!x.requires_grad()) return;
            auto& g = const_cast<Tensor<T>&>(x).grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        };
    });
}

// Stacks S same-shaped [B,C,H,W] tensors into [B,C,H,W,S].
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& frames) {
    check(!frames.empty(), "stack_last: empty input");
    Shape fs = frames[0].shape();
    check(fs.size() == 4, "stack_last: 4-D frames expected");
    int64_t s = (int64_t)frames.size(), n = numel(fs);
    for (const auto& f : frames) check_same_shape(frames[0], f, "stack_last");
    std::vector<T> out((size_t)(n * s));
    for (int64_t t = 0; t < s; ++t) {
        const auto& d = frames[t].data();
        for (int64_t i = 0; i < n; ++i) out[i * s + t] = d[i];
    }
    Shape os = fs;
    os.push_back(s);
    Tensor<T> result = Tensor<T>::from(std::move(os), std::move(out));
    bool needs = false;
    for (const auto& f : frames)
        if (f.requires_grad()) needs = true;
    if (grad_mode() && needs) {
        auto rn = result.node();
        rn->requires_grad = true;
        for (const auto& f : frames) rn->parents.push_back(f.node());
        std::vector<Tensor<T>> fr = frames;
        // Non-owning self handle, same as record(): the node must not keep
        // itself alive through its own closure.
        rn = Tensor<T>::unowned(rn).node();
        rn->backward_fn = [fr, rn, n, s]() mutable {
            for (int64_t t = 0; t < s; ++t) {
                if (!fr[t].requires_grad()) continue;
                auto& g = fr[t].grad();
                for (int64_t i = 0; i < n; ++i) g[i] += rn->grad[i * s + t];
            }
        };
    }
    return result;
}

// Selects frame t from a [B,C,H,W,S] tensor.
template <typename T>
Tensor<T> select_last(const Tensor<T>& x, int64_t t) {
    check(x.shape().size() == 5, "select_last: 5-D expected");
    int64_t s = x.shape().back();
    check(0 <= t && t < s, "select_last: index " + std::to_string(t) + " out of range");
    int64_t n = x.size() / s;
    std::vector<T> out((size_t)n);
    for (int64_t i = 0; i < n; ++i) out[i] = x.data()[i * s + t];
    Shape os(x.shape().begin(), x.shape().end() - 1);
    return record<T>(std::move(os), std::move(out), {x}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            if (!x.requires_grad()) return;
            auto& g = const_cast<Tensor<T>&>(x).grad();
            for (int64_t i = 0; i < n; ++i) g[i * s + t] += on->grad[i];
        };
    });
}

// Per-pixel affine modulation: out[b,c,h,w] = g[b,0,h,w]*x[b,c,h,w] + bta[b,0,h,w].
template <typename T>
Tensor<T> scale_bias_pixelwise(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& bta) {
    check(x.shape().size() == 4 && g.shape().size() == 4 && bta.shape().size() == 4,
          "scale_bias_pixelwise: 4-D expected");
    int64_t bs = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    check(g.dim(0) == bs && g.dim(1) == 1 && g.dim(2) == x.dim(2) && g.dim(3) == x.dim(3),
          "scale_bias_pixelwise: gamma shape " + shape_str(g.shape()) + " vs x " +
              shape_str(x.shape()));
    check_same_shape(g, bta, "scale_bias_pixelwise");
    std::vector<T> out((size_t)x.size());
    for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t cc = 0; cc < c; ++cc) {
            const T* xp = x.data().data() + (bi * c + cc) * plane;
            const T* gp = g.data().data() + bi * plane;
            const T* bp = bta.data().data() + bi * plane;
            T* op = out.data() + (bi * c + cc) * plane;
            for (int64_t i = 0; i < plane; ++i) op[i] = gp[i] * xp[i] + bp[i];
        }
    return record<T>(x.shape(), std::move(out), {x, g, bta}, [=](Tensor<T>& o) {
        auto on = o.node();
        return [=]() mutable {
            const T* go = on->grad.data();
            for (int64_t bi = 0; bi < bs; ++bi) {
                for (int64_t cc = 0; cc < c; ++cc) {
                    const T* gp = g.data().data() + bi * plane;
                    const T* xp = x.data().data() + (bi * c + cc) * plane;
                    const T* gop = go + (bi * c + cc) * plane;
                    if (x.requires_grad()) {
                        T* gx = const_cast<Tensor<T>&>(x).grad().data() + (bi * c + cc) * plane;
                        for (int64_t i = 0; i < plane; ++i) gx[i] += gop[i] * gp[i];
                    }
                    if (g.requires_grad()) {
                        T* gg = const_cast<Tensor<T>&>(g).grad().data() + bi * plane;
                        for (int64_t i = 0; i < plane; ++i) gg[i] += gop[i] * xp[i];
                    }
                    if (bta.requires_grad()) {
                        T* gb = const_cast<Tensor<T>&>(bta).grad().data() + bi * plane;
                        for (int64_t i = 0; i < plane; ++i) gb[i] += gop[i];
                    }
                }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle. f must rebuild its graph from the given
// parameter tensors on every call and return a scalar.

template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, const std::vector<Tensor<T>>& params,
                  double eps = 1e-5) {
    for (auto& p : params) const_cast<Tensor<T>&>(p).zero_grad();
    Tensor<T> loss = f();
    check(loss.size() == 1, "grad_check: f must return a scalar");
    backward(loss);
    double max_rel = 0.0;
    for (auto& pc : params) {
        auto& p = const_cast<Tensor<T>&>(pc);
        for (int64_t i = 0; i < p.size(); ++i) {
            T orig = p.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                p.data()[i] = orig + (T)eps;
                fp = (double)f().item();
                p.data()[i] = orig - (T)eps;
                fm = (double)f().item();
                p.data()[i] = orig;
            }
            double num = (fp - fm) / (2.0 * eps);
            double ana = p.grad().empty() ? 0.0 : (double)p.grad()[i];
            double rel = std::abs(ana - num) / std::max(1.0, std::abs(num));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace dnerv
