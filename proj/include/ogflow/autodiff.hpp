#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <limits>
#include <unordered_set>
#include <vector>

#include "ogflow/errors.hpp"
#include "ogflow/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors. Each operation
// builds a node holding its output data, the parent handles, and a closure
// that routes the node's gradient back into the parents. backward() walks
// one forward pass's DAG in reverse topological order.

namespace ogflow {

template <typename T>
struct Node {
    Tensor<T> data;
    Tensor<T> grad; // lazily allocated, always shaped like data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn; // empty for leaves
    const char* op = "leaf";

    bool has_grad() const { return !grad.v.empty(); }
    Tensor<T>& ensure_grad() {
        if (grad.v.empty()) grad = Tensor<T>::zeros(data.shape);
        return grad;
    }
    void reset_grad() { grad = Tensor<T>(); }
};

/// Handle to a node in the computation graph. Cheap to copy.
template <typename T>
class Value {
public:
    Value() = default;

    static Value leaf(Tensor<T> data, bool requires_grad) {
        Value v;
        v.node_ = std::make_shared<Node<T>>();
        v.node_->data = std::move(data);
        v.node_->requires_grad = requires_grad;
        return v;
    }
    static Value constant(Tensor<T> data) { return leaf(std::move(data), false); }
    static Value constant_scalar(T x) { return constant(Tensor<T>::scalar(x)); }

    bool valid() const { return node_ != nullptr; }
    const Tensor<T>& data() const { return node_->data; }
    Tensor<T>& data() { return node_->data; }
    const Shape& shape() const { return node_->data.shape; }
    std::size_t numel() const { return node_->data.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->has_grad(); }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& ensure_grad() { return node_->ensure_grad(); }
    void reset_grad() { node_->reset_grad(); }
    const char* op() const { return node_->op; }

    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
    template <typename U>
    friend Value<U> make_op(const char* name, Tensor<U> out,
                            std::initializer_list<Value<U>> parents,
                            std::function<void(Node<U>&)> bwd);
};

template <typename T>
Value<T> make_op(const char* name, Tensor<T> out, std::initializer_list<Value<T>> parents,
                 std::function<void(Node<T>&)> bwd) {
    Value<T> v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->data = std::move(out);
    v.node_->op = name;
    bool req = false;
    for (const auto& p : parents) req = req || p.requires_grad();
    v.node_->requires_grad = req;
    if (req) {
        v.node_->parents.reserve(parents.size());
        for (const auto& p : parents) v.node_->parents.push_back(p.node());
        v.node_->backward_fn = std::move(bwd);
    }
    return v;
}

/// One forward pass's reachable subgraph in topological order
/// (parents before consumers). Built from the backward seed.
template <typename T>
struct Graph {
    std::vector<Node<T>*> order;
    Node<T>* seed = nullptr;

    static Graph build(const Value<T>& seed_value) {
        Graph g;
        g.seed = seed_value.node().get();
        std::unordered_set<const Node<T>*> visited;
        // Iterative post-order DFS over parent edges.
        struct Frame {
            Node<T>* n;
            std::size_t next;
        };
        std::vector<Frame> stack;
        if (g.seed->requires_grad) stack.push_back({g.seed, 0});
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next == 0 && visited.count(f.n)) {
                stack.pop_back();
                continue;
            }
            if (f.next < f.n->parents.size()) {
                Node<T>* p = f.n->parents[f.next++].get();
                if (p->requires_grad && !visited.count(p)) stack.push_back({p, 0});
            } else {
                visited.insert(f.n);
                g.order.push_back(f.n);
                stack.pop_back();
            }
        }
        return g;
    }

    /// Seeds grad 1 at the root and visits nodes in exact reverse
    /// topological order. Interior gradients are recomputed from scratch;
    /// leaf gradients accumulate across runs.
    void run() {
        if (seed->data.numel() != 1)
            throw ShapeError("backward: seed must be scalar, got shape " +
                             shape_str(seed->data.shape));
        for (Node<T>* n : order)
            if (n->backward_fn && n->has_grad())
                std::fill(n->grad.v.begin(), n->grad.v.end(), T(0));
        seed->ensure_grad().v[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
        }
    }
};

template <typename T>
void backward(const Value<T>& seed) {
    auto g = Graph<T>::build(seed);
    g.run();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.data(), b.data(), "add");
    Tensor<T> out = a.data();
    const auto& bv = b.data().v;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
    return make_op<T>("add", std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node<T>& self) {
        const auto& g = self.grad.v;
        if (an->requires_grad) {
            auto& ga = an->ensure_grad().v;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->ensure_grad().v;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.data(), b.data(), "sub");
    Tensor<T> out = a.data();
    const auto& bv = b.data().v;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv[i];
    return make_op<T>("sub", std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node<T>& self) {
        const auto& g = self.grad.v;
        if (an->requires_grad) {
            auto& ga = an->ensure_grad().v;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->ensure_grad().v;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.data(), b.data(), "mul");
    Tensor<T> out = a.data();
    const auto& bv = b.data().v;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
    return make_op<T>("mul", std::move(out), {a, b}, [an = a.node().get(), bn = b.node().get()](Node<T>& self) {
        const auto& g = self.grad.v;
        if (an->requires_grad) {
            auto& ga = an->ensure_grad().v;
            const auto& bd = bn->data.v;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->ensure_grad().v;
            const auto& ad = an->data.v;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
        }
    });
}

/// out = scale * x + offset (scalar coefficients).
template <typename T>
Value<T> affine(const Value<T>& x, T scale, T offset) {
    Tensor<T> out = x.data();
    for (auto& v : out.v) v = scale * v + offset;
    return make_op<T>("affine", std::move(out), {x}, [xn = x.node().get(), scale](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    });
}

template <typename T>
Value<T> scale(const Value<T>& x, T s) {
    return affine(x, s, T(0));
}

/// Elementwise a / (b + eps).
template <typename T>
Value<T> div_eps(const Value<T>& a, const Value<T>& b, T eps) {
    check_same_shape(a.data(), b.data(), "div_eps");
    Tensor<T> out = a.data();
    const auto& bv = b.data().v;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] /= (bv[i] + eps);
    return make_op<T>("div_eps", std::move(out), {a, b},
                      [an = a.node().get(), bn = b.node().get(), eps](Node<T>& self) {
                          const auto& g = self.grad.v;
                          const auto& ad = an->data.v;
                          const auto& bd = bn->data.v;
                          if (an->requires_grad) {
                              auto& ga = an->ensure_grad().v;
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (bd[i] + eps);
                          }
                          if (bn->requires_grad) {
                              auto& gb = bn->ensure_grad().v;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const T d = bd[i] + eps;
                                  gb[i] -= g[i] * ad[i] / (d * d);
                              }
                          }
                      });
}

/// Elementwise 1 / (x + eps).
template <typename T>
Value<T> reciprocal_eps(const Value<T>& x, T eps) {
    Tensor<T> out = x.data();
    for (auto& v : out.v) v = T(1) / (v + eps);
    return make_op<T>("reciprocal_eps", std::move(out), {x}, [xn = x.node().get(), eps](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        const auto& xd = xn->data.v;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T d = xd[i] + eps;
            gx[i] -= g[i] / (d * d);
        }
    });
}

template <typename T>
Value<T> abs(const Value<T>& x) {
    Tensor<T> out = x.data();
    for (auto& v : out.v) v = std::abs(v);
    return make_op<T>("abs", std::move(out), {x}, [xn = x.node().get()](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        const auto& xd = xn->data.v;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xd[i] > T(0))
                gx[i] += g[i];
            else if (xd[i] < T(0))
                gx[i] -= g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Activations

/// Subgradient at 0 uses the positive branch.
template <typename T>
Value<T> leaky_relu(const Value<T>& x, T slope) {
    if (!(slope > T(0) && slope < T(1)))
        throw ConfigError("leaky_relu: slope must be in (0,1)");
    Tensor<T> out = x.data();
    for (auto& v : out.v)
        if (v < T(0)) v *= slope;
    return make_op<T>("leaky_relu", std::move(out), {x}, [xn = x.node().get(), slope](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        const auto& xd = xn->data.v;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (xd[i] >= T(0) ? g[i] : slope * g[i]);
    });
}

/// Output is clamped to the open interval (0,1): deep saturation would
/// otherwise round to exactly 0 or 1 and break the strict-range contract.
template <typename T>
Value<T> sigmoid(const Value<T>& x) {
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    const T lo = std::numeric_limits<T>::min();
    Tensor<T> out = x.data();
    for (auto& v : out.v) {
        // Overflow-safe in both tails.
        if (v >= T(0)) {
            v = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            v = e / (T(1) + e);
        }
        v = std::min(hi, std::max(lo, v));
    }
    return make_op<T>("sigmoid", std::move(out), {x}, [xn = x.node().get()](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        const auto& od = self.data.v;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * od[i] * (T(1) - od[i]);
    });
}

// ---------------------------------------------------------------------------
// Linear map (shared 1x1 convolution over points)

/// out[r, j] = sum_i x[r, i] * W[i, j] + b[j], where r runs over all leading
/// dimensions of x flattened. x: [..., Din], W: [Din, Dout], b: [Dout].
template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& W, const Value<T>& b) {
    const auto& xs = x.shape();
    const auto& ws = W.shape();
    const auto& bs = b.shape();
    if (xs.empty() || ws.size() != 2 || bs.size() != 1 || xs.back() != ws[0] || ws[1] != bs[0])
        throw ShapeError("linear: incompatible shapes x=" + shape_str(xs) + " W=" +
                         shape_str(ws) + " b=" + shape_str(bs));
    const std::size_t din = ws[0], dout = ws[1];
    const std::size_t rows = x.numel() / std::max<std::size_t>(din, 1);

    Shape out_shape(xs.begin(), xs.end() - 1);
    out_shape.push_back(dout);
    Tensor<T> out(out_shape);
    const T* xd = x.data().v.data();
    const T* wd = W.data().v.data();
    const T* bd = b.data().v.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* o = out.v.data() + r * dout;
        for (std::size_t j = 0; j < dout; ++j) o[j] = bd[j];
        const T* xr = xd + r * din;
        for (std::size_t i = 0; i < din; ++i) {
            const T xv = xr[i];
            const T* wrow = wd + i * dout;
            for (std::size_t j = 0; j < dout; ++j) o[j] += xv * wrow[j];
        }
    }
    return make_op<T>("linear", std::move(out), {x, W, b},
                      [xn = x.node().get(), wn = W.node().get(), bn = b.node().get(), rows, din,
                       dout](Node<T>& self) {
                          const T* g = self.grad.v.data();
                          const T* xd2 = xn->data.v.data();
                          const T* wd2 = wn->data.v.data();
                          if (xn->requires_grad) {
                              T* gx = xn->ensure_grad().v.data();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * dout;
                                  T* gxr = gx + r * din;
                                  for (std::size_t i = 0; i < din; ++i) {
                                      const T* wrow = wd2 + i * dout;
                                      T acc = T(0);
                                      for (std::size_t j = 0; j < dout; ++j) acc += gr[j] * wrow[j];
                                      gxr[i] += acc;
                                  }
                              }
                          }
                          if (wn->requires_grad) {
                              T* gw = wn->ensure_grad().v.data();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * dout;
                                  const T* xr = xd2 + r * din;
                                  for (std::size_t i = 0; i < din; ++i) {
                                      const T xv = xr[i];
                                      T* gwrow = gw + i * dout;
                                      for (std::size_t j = 0; j < dout; ++j) gwrow[j] += xv * gr[j];
                                  }
                              }
                          }
                          if (bn->requires_grad) {
                              T* gb = bn->ensure_grad().v.data();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* gr = g + r * dout;
                                  for (std::size_t j = 0; j < dout; ++j) gb[j] += gr[j];
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Value<T> reshape(const Value<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Tensor<T> out(std::move(new_shape), x.data().v);
    return make_op<T>("reshape", std::move(out), {x}, [xn = x.node().get()](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const auto& g = self.grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Concatenation along the last axis. All parts share leading dimensions.
template <typename T>
Value<T> concat_last(const std::vector<Value<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_last: no parts");
    const Shape& s0 = parts[0].shape();
    if (s0.empty()) throw ShapeError("concat_last: scalar parts unsupported");
    Shape lead(s0.begin(), s0.end() - 1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size() || !std::equal(lead.begin(), lead.end(), s.begin()))
            throw ShapeError("concat_last: leading-dimension mismatch " + shape_str(s0) +
                             " vs " + shape_str(s));
        total += s.back();
    }
    const std::size_t rows = shape_numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor<T> out(out_shape);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape().back();
        const T* src = p.data().v.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(src + r * w, src + (r + 1) * w, out.v.data() + r * total + off);
        off += w;
    }

    std::vector<std::shared_ptr<Node<T>>> parent_nodes;
    bool req = false;
    for (const auto& p : parts) {
        parent_nodes.push_back(p.node());
        req = req || p.requires_grad();
    }
    Value<T> v = make_op<T>("concat_last", std::move(out), {}, nullptr);
    if (req) {
        auto* n = v.node().get();
        n->requires_grad = true;
        n->parents = parent_nodes;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) widths.push_back(p.shape().back());
        n->backward_fn = [widths, rows, total](Node<T>& self) {
            const T* g = self.grad.v.data();
            std::size_t off2 = 0;
            for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                Node<T>* p = self.parents[pi].get();
                const std::size_t w = widths[pi];
                if (p->requires_grad) {
                    T* gp = p->ensure_grad().v.data();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const T* gr = g + r * total + off2;
                        T* dst = gp + r * w;
                        for (std::size_t j = 0; j < w; ++j) dst[j] += gr[j];
                    }
                }
                off2 += w;
            }
        };
    }
    return v;
}

template <typename T>
Value<T> concat_last(std::initializer_list<Value<T>> parts) {
    return concat_last(std::vector<Value<T>>(parts));
}

// ---------------------------------------------------------------------------
// Gather / scatter

/// out[n, k, ...] = x[idx[n*K + k], ...]; x is [M, tail...]. Backward
/// scatter-adds, so duplicated indices accumulate.
template <typename T>
Value<T> gather(const Value<T>& x, const std::vector<std::uint32_t>& idx, std::size_t N,
                std::size_t K) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw ShapeError("gather: input must have a leading row axis");
    if (idx.size() != N * K) throw ShapeError("gather: index count does not match N*K");
    const std::size_t M = xs[0];
    const std::size_t tail = x.numel() / std::max<std::size_t>(M, 1);
    for (std::uint32_t i : idx)
        if (i >= M)
            throw IndexError("gather: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(M) + ")");
    Shape out_shape{N, K};
    out_shape.insert(out_shape.end(), xs.begin() + 1, xs.end());
    Tensor<T> out(out_shape);
    const T* xd = x.data().v.data();
    for (std::size_t r = 0; r < N * K; ++r)
        std::copy(xd + idx[r] * tail, xd + (idx[r] + 1) * tail, out.v.data() + r * tail);
    return make_op<T>("gather", std::move(out), {x}, [xn = x.node().get(), idx, N, K, tail](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        for (std::size_t r = 0; r < N * K; ++r) {
            T* dst = gx + idx[r] * tail;
            const T* src = g + r * tail;
            for (std::size_t t = 0; t < tail; ++t) dst[t] += src[t];
        }
    });
}

/// out[n, ...] = x[idx[n], ...] (gather with K = 1, middle axis dropped).
template <typename T>
Value<T> gather_rows(const Value<T>& x, const std::vector<std::uint32_t>& idx) {
    Value<T> g = gather(x, idx, idx.size(), 1);
    Shape s = g.shape();
    s.erase(s.begin() + 1);
    return reshape(g, s);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

/// Max over the middle axis of [N, K, D] (or last axis of [N, K]). Gradient
/// routes to the argmax slot only; ties pick the lowest K index.
template <typename T>
Value<T> max_over_axis(const Value<T>& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 3 && xs.size() != 2)
        throw ShapeError("max_over_axis: expected rank 2 or 3, got " + shape_str(xs));
    const std::size_t N = xs[0];
    const std::size_t K = xs[1];
    const std::size_t D = xs.size() == 3 ? xs[2] : 1;
    if (K < 1) throw ShapeError("max_over_axis: reduction axis is empty");
    Shape out_shape = xs.size() == 3 ? Shape{N, D} : Shape{N};
    Tensor<T> out(out_shape);
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(N * D);
    const T* xd = x.data().v.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t d = 0; d < D; ++d) {
            T best = xd[(n * K) * D + d];
            std::uint32_t bk = 0;
            for (std::size_t k = 1; k < K; ++k) {
                const T v = xd[(n * K + k) * D + d];
                if (v > best) {
                    best = v;
                    bk = static_cast<std::uint32_t>(k);
                }
            }
            out.v[n * D + d] = best;
            (*argmax)[n * D + d] = bk;
        }
    }
    return make_op<T>("max_over_axis", std::move(out), {x},
                      [xn = x.node().get(), argmax, N, K, D](Node<T>& self) {
                          if (!xn->requires_grad) return;
                          T* gx = xn->ensure_grad().v.data();
                          const T* g = self.grad.v.data();
                          for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t d = 0; d < D; ++d) {
                                  const std::uint32_t k = (*argmax)[n * D + d];
                                  gx[(n * K + k) * D + d] += g[n * D + d];
                              }
                      });
}

template <typename T>
Value<T> sum_all(const Value<T>& x) {
    T acc = T(0);
    for (const T& v : x.data().v) acc += v;
    return make_op<T>("sum_all", Tensor<T>::scalar(acc), {x}, [xn = x.node().get()](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const T g = self.grad.v[0];
        for (auto& v : gx) v += g;
    });
}

template <typename T>
Value<T> mean_all(const Value<T>& x) {
    const std::size_t n = x.numel();
    T acc = T(0);
    for (const T& v : x.data().v) acc += v;
    acc /= static_cast<T>(n);
    return make_op<T>("mean_all", Tensor<T>::scalar(acc), {x}, [xn = x.node().get(), n](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad().v;
        const T g = self.grad.v[0] / static_cast<T>(n);
        for (auto& v : gx) v += g;
    });
}

/// Sum over the last axis: [..., K] -> [...].
template <typename T>
Value<T> sum_last(const Value<T>& x) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw ShapeError("sum_last: scalar input");
    const std::size_t K = xs.back();
    const std::size_t rows = x.numel() / std::max<std::size_t>(K, 1);
    Shape out_shape(xs.begin(), xs.end() - 1);
    Tensor<T> out(out_shape);
    const T* xd = x.data().v.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (std::size_t k = 0; k < K; ++k) acc += xd[r * K + k];
        out.v[r] = acc;
    }
    return make_op<T>("sum_last", std::move(out), {x}, [xn = x.node().get(), rows, K](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < K; ++k) gx[r * K + k] += g[r];
    });
}

/// Sum over the middle axis: [N, K, D] -> [N, D].
template <typename T>
Value<T> sum_mid(const Value<T>& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 3) throw ShapeError("sum_mid: expected rank 3, got " + shape_str(xs));
    const std::size_t N = xs[0], K = xs[1], D = xs[2];
    Tensor<T> out(Shape{N, D});
    const T* xd = x.data().v.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t d = 0; d < D; ++d) out.v[n * D + d] += xd[(n * K + k) * D + d];
    return make_op<T>("sum_mid", std::move(out), {x}, [xn = x.node().get(), N, K, D](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t d = 0; d < D; ++d) gx[(n * K + k) * D + d] += g[n * D + d];
    });
}

/// Appends a size-D axis by repetition: [dims...] -> [dims..., D].
template <typename T>
Value<T> expand_last(const Value<T>& x, std::size_t D) {
    Shape out_shape = x.shape();
    out_shape.push_back(D);
    Tensor<T> out(out_shape);
    const T* xd = x.data().v.data();
    const std::size_t rows = x.numel();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) out.v[r * D + d] = xd[r];
    return make_op<T>("expand_last", std::move(out), {x}, [xn = x.node().get(), rows, D](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        for (std::size_t r = 0; r < rows; ++r) {
            T acc = T(0);
            for (std::size_t d = 0; d < D; ++d) acc += g[r * D + d];
            gx[r] += acc;
        }
    });
}

/// Repeats each row along a new middle axis: [N, D] -> [N, K, D].
template <typename T>
Value<T> expand_mid(const Value<T>& x, std::size_t K) {
    const Shape& xs = x.shape();
    if (xs.size() != 2) throw ShapeError("expand_mid: expected rank 2, got " + shape_str(xs));
    const std::size_t N = xs[0], D = xs[1];
    Tensor<T> out(Shape{N, K, D});
    const T* xd = x.data().v.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
            std::copy(xd + n * D, xd + (n + 1) * D, out.v.data() + (n * K + k) * D);
    return make_op<T>("expand_mid", std::move(out), {x}, [xn = x.node().get(), N, K, D](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += g[(n * K + k) * D + d];
    });
}

/// Per-row L2 norm with epsilon guard: out[...] = sqrt(sum_d x[..., d]^2 + eps^2).
/// The guard keeps the derivative finite at exact-zero rows.
template <typename T>
Value<T> rownorm_eps(const Value<T>& x, T eps) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw ShapeError("rownorm_eps: scalar input");
    const std::size_t D = xs.back();
    const std::size_t rows = x.numel() / std::max<std::size_t>(D, 1);
    Shape out_shape(xs.begin(), xs.end() - 1);
    Tensor<T> out(out_shape);
    const T* xd = x.data().v.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = eps * eps;
        for (std::size_t d = 0; d < D; ++d) acc += xd[r * D + d] * xd[r * D + d];
        out.v[r] = std::sqrt(acc);
    }
    return make_op<T>("rownorm_eps", std::move(out), {x}, [xn = x.node().get(), rows, D](Node<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().v.data();
        const T* g = self.grad.v.data();
        const T* xd2 = xn->data.v.data();
        const T* od = self.data.v.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const T s = g[r] / od[r];
            for (std::size_t d = 0; d < D; ++d) gx[r * D + d] += xd2[r * D + d] * s;
        }
    });
}

/// Stop-gradient: identical data, no op record, no gradient flow.
template <typename T>
Value<T> detach(const Value<T>& x) {
    return Value<T>::leaf(x.data(), false);
}

// ---------------------------------------------------------------------------
// Convenience compositions (not primitives)

/// Scales every row of x [N, D] by s [N] or [N, 1].
template <typename T>
Value<T> rowwise_scale(const Value<T>& x, const Value<T>& s) {
    const std::size_t N = x.shape()[0];
    const std::size_t D = x.shape()[1];
    Value<T> sv = s;
    if (s.shape().size() == 2) sv = reshape(s, Shape{N});
    return mul(x, expand_last(sv, D));
}

template <typename T>
Value<T> add_many(const std::vector<Value<T>>& terms) {
    if (terms.empty()) throw ShapeError("add_many: no terms");
    Value<T> acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

} // namespace ogflow
