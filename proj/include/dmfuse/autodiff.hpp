#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dmfuse/rng.hpp"
#include "dmfuse/tensor.hpp"

namespace dmfuse {

// Reverse-mode autodiff over dense tensors, define-by-run. The Tape owns the
// graph; a Var is a handle into it. The tape is rebuilt every forward pass.

template <class T>
class Tape;

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<Node*> parents;
    std::function<void(Node&)> backfn;  // pushes this->grad into parents' grads
};

template <class T>
using Var = Node<T>*;

namespace detail {
[[noreturn]] inline void op_error(const char* kind, const std::string& what) {
    throw std::invalid_argument(std::string(kind) + ": " + what);
}
}  // namespace detail

template <class T>
class Tape {
public:
    Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
        auto n = std::make_unique<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return nodes_.back().get();
    }

    Var<T> make(Tensor<T> value, std::vector<Var<T>> parents,
                std::function<void(Node<T>&)> backfn) {
        auto n = std::make_unique<Node<T>>();
        n->value = std::move(value);
        for (Var<T> p : parents)
            if (p && p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backfn = std::move(backfn);
        }
        nodes_.push_back(std::move(n));
        return nodes_.back().get();
    }

    // grad = d(loss)/d(node) for every requires_grad node; off-path nodes get zeros.
    void backward(Var<T> loss) {
        if (loss->value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss->value.shape));
        if (!loss->requires_grad)
            throw std::invalid_argument("backward: loss is detached from all parameters");
        for (auto& n : nodes_)
            if (n->requires_grad) n->grad.assign(n->value.size(), T(0));
        loss->grad.assign(1, T(1));
        bool seen_loss = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>* n = it->get();
            if (n == loss) seen_loss = true;
            if (!seen_loss || !n->requires_grad || !n->backfn) continue;
            bool live = false;
            for (T g : n->grad)
                if (g != T(0)) { live = true; break; }
            if (live || n == loss) n->backfn(*n);
        }
    }

    static const std::vector<T>& grad(Var<T> v) {
        if (v->grad.size() != v->value.size())
            const_cast<Node<T>*>(v)->grad.assign(v->value.size(), T(0));
        return v->grad;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    std::vector<std::unique_ptr<Node<T>>> nodes_;
};

namespace detail {
template <class T>
std::vector<T>& acc(Node<T>& parent) {
    if (parent.grad.size() != parent.value.size())
        parent.grad.assign(parent.value.size(), T(0));
    return parent.grad;
}
}  // namespace detail

// ---- elementwise / reduction primitives -----------------------------------

template <class T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
    if (a->value.shape != b->value.shape)
        detail::op_error("add", "shape mismatch " + shape_str(a->value.shape) + " vs " +
                                    shape_str(b->value.shape));
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return t.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            auto& ga = detail::acc(*a);
            for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
            auto& gb = detail::acc(*b);
            for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i];
        }
    });
}

// Elementwise product; either operand may be a 1-element scalar.
template <class T>
Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b) {
    const bool a_scalar = a->value.size() == 1;
    const bool b_scalar = b->value.size() == 1;
    if (!a_scalar && !b_scalar && a->value.shape != b->value.shape)
        detail::op_error("elementwise-mul", "shape mismatch " + shape_str(a->value.shape) +
                                                " vs " + shape_str(b->value.shape));
    const Tensor<T>& big = a_scalar && !b_scalar ? b->value : a->value;
    Tensor<T> out(big.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        T av = a_scalar ? a->value[0] : a->value[i];
        T bv = b_scalar ? b->value[0] : b->value[i];
        out[i] = av * bv;
    }
    return t.make(std::move(out), {a, b}, [a, b, a_scalar, b_scalar](Node<T>& n) {
        if (a->requires_grad) {
            auto& ga = detail::acc(*a);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                T bv = b_scalar ? b->value[0] : b->value[i];
                ga[a_scalar ? 0 : i] += n.grad[i] * bv;
            }
        }
        if (b->requires_grad) {
            auto& gb = detail::acc(*b);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                T av = a_scalar ? a->value[0] : a->value[i];
                gb[b_scalar ? 0 : i] += n.grad[i] * av;
            }
        }
    });
}

// a*x + b with constant coefficients
template <class T>
Var<T> scale(Tape<T>& t, Var<T> x, T a, T b = T(0)) {
    Tensor<T> out = x->value;
    for (auto& v : out.values) v = a * v + b;
    return t.make(std::move(out), {x}, [x, a](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += a * n.grad[i];
    });
}

template <class T>
Var<T> relu(Tape<T>& t, Var<T> x) {
    Tensor<T> out = x->value;
    for (auto& v : out.values) v = v > T(0) ? v : T(0);
    return t.make(std::move(out), {x}, [x](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (x->value[i] > T(0)) gx[i] += n.grad[i];
    });
}

template <class T>
Var<T> tanh_op(Tape<T>& t, Var<T> x) {
    Tensor<T> out = x->value;
    for (auto& v : out.values) v = std::tanh(v);
    Tensor<T> saved = out;
    return t.make(std::move(out), {x}, [x, saved](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            gx[i] += n.grad[i] * (T(1) - saved[i] * saved[i]);
    });
}

template <class T>
Var<T> log_op(Tape<T>& t, Var<T> x) {
    Tensor<T> out = x->value;
    for (auto& v : out.values) {
        if (!(v > T(0))) detail::op_error("log", "nonpositive input " + std::to_string((double)v));
        v = std::log(v);
    }
    return t.make(std::move(out), {x}, [x](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] / x->value[i];
    });
}

template <class T>
Var<T> sum(Tape<T>& t, Var<T> x) {
    T s = T(0);
    for (T v : x->value.values) s += v;
    return t.make(Tensor<T>::scalar(s), {x}, [x](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (auto& g : gx) g += n.grad[0];
    });
}

template <class T>
Var<T> mean(Tape<T>& t, Var<T> x) {
    T s = T(0);
    for (T v : x->value.values) s += v;
    T inv = T(1) / static_cast<T>(x->value.size());
    return t.make(Tensor<T>::scalar(s * inv), {x}, [x, inv](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (auto& g : gx) g += n.grad[0] * inv;
    });
}

// Stable softmax over the last axis.
template <class T>
Var<T> softmax(Tape<T>& t, Var<T> x) {
    if (x->value.rank() == 0 || x->value.shape.back() == 0)
        detail::op_error("softmax", "empty input");
    const std::size_t k = x->value.shape.back();
    const std::size_t rows = x->value.size() / k;
    Tensor<T> out = x->value;
    for (std::size_t r = 0; r < rows; ++r) {
        T* p = out.values.data() + r * k;
        T mx = p[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, p[i]);
        T denom = T(0);
        for (std::size_t i = 0; i < k; ++i) {
            p[i] = std::exp(p[i] - mx);
            denom += p[i];
        }
        for (std::size_t i = 0; i < k; ++i) p[i] /= denom;
    }
    Tensor<T> saved = out;
    return t.make(std::move(out), {x}, [x, saved, k, rows](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* s = saved.values.data() + r * k;
            const T* g = n.grad.data() + r * k;
            T dot = T(0);
            for (std::size_t i = 0; i < k; ++i) dot += s[i] * g[i];
            for (std::size_t i = 0; i < k; ++i) gx[r * k + i] += s[i] * (g[i] - dot);
        }
    });
}

// 1-D concat
template <class T>
Var<T> concat(Tape<T>& t, const std::vector<Var<T>>& parts) {
    if (parts.empty()) detail::op_error("concat", "no inputs");
    std::vector<T> vals;
    std::vector<std::size_t> offsets;
    for (Var<T> p : parts) {
        if (p->value.rank() != 1)
            detail::op_error("concat", "expects rank-1 inputs, got " + shape_str(p->value.shape));
        offsets.push_back(vals.size());
        vals.insert(vals.end(), p->value.values.begin(), p->value.values.end());
    }
    const std::size_t total = vals.size();
    Tensor<T> out({total}, std::move(vals));
    return t.make(std::move(out), parts, [parts, offsets](Node<T>& n) {
        for (std::size_t j = 0; j < parts.size(); ++j) {
            Var<T> p = parts[j];
            if (!p->requires_grad) continue;
            auto& gp = detail::acc(*p);
            for (std::size_t i = 0; i < p->value.size(); ++i)
                gp[i] += n.grad[offsets[j] + i];
        }
    });
}

// scalar pick out of a rank-1 tensor
template <class T>
Var<T> index(Tape<T>& t, Var<T> x, std::size_t i) {
    if (x->value.rank() != 1 || i >= x->value.size())
        detail::op_error("index", "index " + std::to_string(i) + " out of range for shape " +
                                      shape_str(x->value.shape));
    return t.make(Tensor<T>::scalar(x->value[i]), {x}, [x, i](Node<T>& n) {
        detail::acc(*x)[i] += n.grad[0];
    });
}

// Inverted dropout: kept activations divided by keep-prob, eval mode is identity.
template <class T>
Var<T> dropout(Tape<T>& t, Var<T> x, double rate, bool train_mode, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        detail::op_error("dropout", "rate must be in [0,1), got " + std::to_string(rate));
    if (!train_mode || rate == 0.0) return scale(t, x, T(1));
    const T inv_keep = T(1.0 / (1.0 - rate));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<T> mask(x->value.size());
    for (auto& m : mask) m = u(rng) < rate ? T(0) : inv_keep;
    Tensor<T> out = x->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return t.make(std::move(out), {x}, [x, mask](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * mask[i];
    });
}

// ---- dense / conv / pooling ------------------------------------------------

// x: [D], w: [K,D], b: [K] (optional) -> [K]
template <class T>
Var<T> dense(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b) {
    if (x->value.rank() != 1 || w->value.rank() != 2 || w->value.shape[1] != x->value.shape[0])
        detail::op_error("dense", "x " + shape_str(x->value.shape) + " incompatible with w " +
                                      shape_str(w->value.shape));
    const std::size_t K = w->value.shape[0], D = w->value.shape[1];
    if (b && (b->value.rank() != 1 || b->value.shape[0] != K))
        detail::op_error("dense", "bias " + shape_str(b->value.shape) + " must be [" +
                                      std::to_string(K) + "]");
    Tensor<T> out({K});
    for (std::size_t k = 0; k < K; ++k) {
        T s = b ? b->value[k] : T(0);
        const T* wr = w->value.values.data() + k * D;
        for (std::size_t d = 0; d < D; ++d) s += wr[d] * x->value[d];
        out[k] = s;
    }
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return t.make(std::move(out), parents, [x, w, b, K, D](Node<T>& n) {
        if (x->requires_grad) {
            auto& gx = detail::acc(*x);
            for (std::size_t k = 0; k < K; ++k) {
                const T* wr = w->value.values.data() + k * D;
                for (std::size_t d = 0; d < D; ++d) gx[d] += n.grad[k] * wr[d];
            }
        }
        if (w->requires_grad) {
            auto& gw = detail::acc(*w);
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t d = 0; d < D; ++d) gw[k * D + d] += n.grad[k] * x->value[d];
        }
        if (b && b->requires_grad) {
            auto& gb = detail::acc(*b);
            for (std::size_t k = 0; k < K; ++k) gb[k] += n.grad[k];
        }
    });
}

// x: [C,H,W], k: [O,C,kh,kw], b: [O] optional, zero padding
template <class T>
Var<T> conv2d(Tape<T>& t, Var<T> x, Var<T> kern, Var<T> b, std::size_t stride,
              std::size_t pad) {
    if (x->value.rank() != 3 || kern->value.rank() != 4)
        detail::op_error("conv2d", "x rank " + std::to_string(x->value.rank()) +
                                       ", kernel rank " + std::to_string(kern->value.rank()));
    const std::size_t C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    const std::size_t O = kern->value.shape[0], KC = kern->value.shape[1],
                      KH = kern->value.shape[2], KW = kern->value.shape[3];
    if (KC != C)
        detail::op_error("conv2d", "input channels " + std::to_string(C) +
                                       " != kernel channels " + std::to_string(KC));
    if (stride == 0) detail::op_error("conv2d", "stride must be >= 1");
    if (H + 2 * pad < KH || W + 2 * pad < KW)
        detail::op_error("conv2d", "kernel " + shape_str(kern->value.shape) +
                                       " larger than padded input " + shape_str(x->value.shape));
    if (b && (b->value.rank() != 1 || b->value.shape[0] != O))
        detail::op_error("conv2d", "bias must be [" + std::to_string(O) + "]");
    const std::size_t HO = (H + 2 * pad - KH) / stride + 1;
    const std::size_t WO = (W + 2 * pad - KW) / stride + 1;
    Tensor<T> out({O, HO, WO});
    const T* xv = x->value.values.data();
    const T* kv = kern->value.values.data();
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oy = 0; oy < HO; ++oy)
            for (std::size_t ox = 0; ox < WO; ++ox) {
                T s = b ? b->value[o] : T(0);
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t ky = 0; ky < KH; ++ky) {
                        const std::ptrdiff_t iy =
                            (std::ptrdiff_t)(oy * stride + ky) - (std::ptrdiff_t)pad;
                        if (iy < 0 || iy >= (std::ptrdiff_t)H) continue;
                        const T* xrow = xv + (c * H + iy) * W;
                        const T* krow = kv + ((o * C + c) * KH + ky) * KW;
                        for (std::size_t kx = 0; kx < KW; ++kx) {
                            const std::ptrdiff_t ix =
                                (std::ptrdiff_t)(ox * stride + kx) - (std::ptrdiff_t)pad;
                            if (ix < 0 || ix >= (std::ptrdiff_t)W) continue;
                            s += xrow[ix] * krow[kx];
                        }
                    }
                out.values[(o * HO + oy) * WO + ox] = s;
            }
    std::vector<Var<T>> parents =
        b ? std::vector<Var<T>>{x, kern, b} : std::vector<Var<T>>{x, kern};
    return t.make(std::move(out), parents,
                  [x, kern, b, C, H, W, O, KH, KW, HO, WO, stride, pad](Node<T>& n) {
        const T* kv = kern->value.values.data();
        const T* xv = x->value.values.data();
        T* gx = x->requires_grad ? detail::acc(*x).data() : nullptr;
        T* gk = kern->requires_grad ? detail::acc(*kern).data() : nullptr;
        T* gb = (b && b->requires_grad) ? detail::acc(*b).data() : nullptr;
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oy = 0; oy < HO; ++oy)
                for (std::size_t ox = 0; ox < WO; ++ox) {
                    const T g = n.grad[(o * HO + oy) * WO + ox];
                    if (g == T(0)) continue;
                    if (gb) gb[o] += g;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const std::ptrdiff_t iy =
                                (std::ptrdiff_t)(oy * stride + ky) - (std::ptrdiff_t)pad;
                            if (iy < 0 || iy >= (std::ptrdiff_t)H) continue;
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const std::ptrdiff_t ix =
                                    (std::ptrdiff_t)(ox * stride + kx) - (std::ptrdiff_t)pad;
                                if (ix < 0 || ix >= (std::ptrdiff_t)W) continue;
                                const std::size_t xi = (c * H + iy) * W + ix;
                                const std::size_t ki = ((o * C + c) * KH + ky) * KW + kx;
                                if (gx) gx[xi] += g * kv[ki];
                                if (gk) gk[ki] += g * xv[xi];
                            }
                        }
                }
    });
}

// non-overlapping max pool, window == stride
template <class T>
Var<T> maxpool2d(Tape<T>& t, Var<T> x, std::size_t window) {
    if (x->value.rank() != 3)
        detail::op_error("maxpool2d", "expects [C,H,W], got " + shape_str(x->value.shape));
    if (window == 0) detail::op_error("maxpool2d", "window must be >= 1");
    const std::size_t C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    if (H < window || W < window)
        detail::op_error("maxpool2d", "window " + std::to_string(window) + " larger than input " +
                                          shape_str(x->value.shape));
    const std::size_t HO = H / window, WO = W / window;
    Tensor<T> out({C, HO, WO});
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < HO; ++oy)
            for (std::size_t ox = 0; ox < WO; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = 0;
                for (std::size_t wy = 0; wy < window; ++wy)
                    for (std::size_t wx = 0; wx < window; ++wx) {
                        std::size_t i = (c * H + oy * window + wy) * W + ox * window + wx;
                        if (x->value[i] > best) {
                            best = x->value[i];
                            best_i = i;
                        }
                    }
                const std::size_t oi = (c * HO + oy) * WO + ox;
                out.values[oi] = best;
                argmax[oi] = best_i;
            }
    return t.make(std::move(out), {x}, [x, argmax](Node<T>& n) {
        auto& gx = detail::acc(*x);
        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[argmax[i]] += n.grad[i];
    });
}

// [C,H,W] -> [C]
template <class T>
Var<T> global_avg_pool(Tape<T>& t, Var<T> x) {
    if (x->value.rank() != 3)
        detail::op_error("global_avg_pool", "expects [C,H,W], got " + shape_str(x->value.shape));
    const std::size_t C = x->value.shape[0];
    const std::size_t HW = x->value.shape[1] * x->value.shape[2];
    Tensor<T> out({C});
    for (std::size_t c = 0; c < C; ++c) {
        T s = T(0);
        for (std::size_t i = 0; i < HW; ++i) s += x->value[c * HW + i];
        out[c] = s / static_cast<T>(HW);
    }
    return t.make(std::move(out), {x}, [x, C, HW](Node<T>& n) {
        auto& gx = detail::acc(*x);
        const T inv = T(1) / static_cast<T>(HW);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += n.grad[c] * inv;
    });
}

// ---- gradient verification -------------------------------------------------

// f evaluates a scalar function and its analytic gradient at a point (both
// typically via a fresh Tape). Returns the max over coordinates of
// |analytic - central difference| / max(|analytic|, |central|, 1e-12).
template <class T>
double finite_diff_check(
    const std::function<std::pair<T, Tensor<T>>(const Tensor<T>&)>& f,
    const Tensor<T>& point, T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("finite_diff_check: eps must be > 0");
    auto [f0, analytic] = f(point);
    if (!std::isfinite((double)f0))
        throw std::runtime_error("finite_diff_check: non-finite function value");
    double worst = 0.0;
    Tensor<T> p = point;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T orig = p[i];
        p[i] = orig + eps;
        const T fp = f(p).first;
        p[i] = orig - eps;
        const T fm = f(p).first;
        p[i] = orig;
        if (!std::isfinite((double)fp) || !std::isfinite((double)fm))
            throw std::runtime_error("finite_diff_check: non-finite perturbed value");
        const double numeric = ((double)fp - (double)fm) / (2.0 * (double)eps);
        const double a = (double)analytic[i];
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace dmfuse
