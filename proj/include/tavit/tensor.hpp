#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
// Scalar is float for training and double for gradient-oracle tests.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>

#include "tavit/common.hpp"

namespace tavit {

template <typename S>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    bool leaf = true;  // false for op outputs; backward zeroes non-leaf grads

    int64_t numel() const {
        int64_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }
    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg)
            grad.assign(data.size(), S(0));
        else
            grad.clear();
    }
    void zero_grad() {
        std::fill(grad.begin(), grad.end(), S(0));
    }
};

template <typename S>
using Tensor = std::shared_ptr<TensorNode<S>>;

template <typename S>
Tensor<S> make_tensor(std::vector<int64_t> shape, S fill = S(0)) {
    auto t = std::make_shared<TensorNode<S>>();
    int64_t n = 1;
    for (auto e : shape) {
        if (e <= 0) throw ContractError("tensor extent must be positive, got shape " + shape_str(shape));
        n *= e;
    }
    t->shape = std::move(shape);
    t->data.assign(size_t(n), fill);
    return t;
}

template <typename S>
Tensor<S> from_values(std::vector<int64_t> shape, std::vector<S> values) {
    auto t = make_tensor<S>(std::move(shape));
    if (int64_t(values.size()) != t->numel())
        throw ContractError("value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(t->shape));
    t->data = std::move(values);
    return t;
}

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class Tape {
public:
    void record(Tensor<S> out, std::function<void()> adjoint) {
        nodes_.push_back(std::move(out));
        steps_.push_back(std::move(adjoint));
    }

    // Reverse replay from a scalar loss with upstream gradient 1.
    void backward(const Tensor<S>& loss) {
        if (loss->numel() != 1)
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
        backward_seeded(loss, {S(1)});
    }

    // Non-scalar roots need an explicit upstream gradient.
    void backward_seeded(const Tensor<S>& root, const std::vector<S>& upstream) {
        if (int64_t(upstream.size()) != root->numel())
            throw ContractError("upstream gradient shape mismatch");
        for (auto& n : nodes_)
            if (!n->leaf) n->zero_grad();
        if (!root->requires_grad) return;  // nothing reachable
        if (root->grad.empty()) root->grad.assign(root->data.size(), S(0));
        for (size_t i = 0; i < upstream.size(); ++i) root->grad[i] += upstream[i];
        for (size_t i = steps_.size(); i > 0; --i) steps_[i - 1]();
    }

    void clear() {
        nodes_.clear();
        steps_.clear();
    }
    size_t size() const { return steps_.size(); }

private:
    std::vector<Tensor<S>> nodes_;
    std::vector<std::function<void()>> steps_;
};

template <typename S>
inline thread_local Tape<S>* g_tape = nullptr;

template <typename S>
struct TapeScope {
    Tape<S>* prev;
    explicit TapeScope(Tape<S>& t) : prev(g_tape<S>) { g_tape<S> = &t; }
    ~TapeScope() { g_tape<S> = prev; }
};

namespace detail {

template <typename S>
bool tracing_any(std::initializer_list<Tensor<S>> inputs) {
    if (!g_tape<S>) return false;
    for (auto& t : inputs)
        if (t && t->requires_grad) return true;
    return false;
}

template <typename S>
void mark_output(const Tensor<S>& out) {
    out->leaf = false;
    out->requires_grad = true;
    out->grad.assign(out->data.size(), S(0));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Broadcasting: equal shapes, a scalar operand, or b a
// trailing-suffix of a (used for positional embeddings and biases).

enum class EwOp { add, sub, mul };

template <typename S>
Tensor<S> elementwise(const Tensor<S>& a, const Tensor<S>& b, EwOp op) {
    const int64_t na = a->numel(), nb = b->numel();
    enum class Mode { same, scalar_a, scalar_b, suffix_b } mode;
    if (a->shape == b->shape)
        mode = Mode::same;
    else if (nb == 1)
        mode = Mode::scalar_b;
    else if (na == 1)
        mode = Mode::scalar_a;
    else if (b->shape.size() < a->shape.size() &&
             std::equal(b->shape.begin(), b->shape.end(), a->shape.end() - b->shape.size()))
        mode = Mode::suffix_b;
    else
        throw ContractError("elementwise shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));

    auto out = make_tensor<S>(mode == Mode::scalar_a ? b->shape : a->shape);
    S* o = out->data.data();
    const S* pa = a->data.data();
    const S* pb = b->data.data();
    const int64_t n = out->numel();
    auto apply = [op](S x, S y) -> S {
        switch (op) {
            case EwOp::add: return x + y;
            case EwOp::sub: return x - y;
            default: return x * y;
        }
    };
    switch (mode) {
        case Mode::same:
            for (int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[i]);
            break;
        case Mode::scalar_b:
            for (int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[0]);
            break;
        case Mode::scalar_a:
            for (int64_t i = 0; i < n; ++i) o[i] = apply(pa[0], pb[i]);
            break;
        case Mode::suffix_b:
            for (int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[i % nb]);
            break;
    }

    if (detail::tracing_any<S>({a, b})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [a, b, out, op, mode, nb, apply] {
            const S* go = out->grad.data();
            const int64_t n = out->numel();
            const S sgn = (op == EwOp::sub) ? S(-1) : S(1);
            if (a->requires_grad) {
                S* ga = a->grad.data();
                if (mode == Mode::scalar_a) {
                    S acc = 0;
                    if (op == EwOp::mul)
                        for (int64_t i = 0; i < n; ++i) acc += go[i] * b->data[i];
                    else
                        for (int64_t i = 0; i < n; ++i) acc += go[i];
                    ga[0] += acc;
                } else {
                    if (op == EwOp::mul) {
                        if (mode == Mode::scalar_b)
                            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * b->data[0];
                        else if (mode == Mode::suffix_b)
                            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * b->data[i % nb];
                        else
                            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * b->data[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
                    }
                }
            }
            if (b->requires_grad) {
                S* gb = b->grad.data();
                if (mode == Mode::scalar_b) {
                    S acc = 0;
                    if (op == EwOp::mul)
                        for (int64_t i = 0; i < n; ++i) acc += go[i] * a->data[i];
                    else
                        for (int64_t i = 0; i < n; ++i) acc += go[i];
                    gb[0] += sgn * acc;
                } else if (mode == Mode::suffix_b) {
                    if (op == EwOp::mul)
                        for (int64_t i = 0; i < n; ++i) gb[i % nb] += go[i] * a->data[i];
                    else
                        for (int64_t i = 0; i < n; ++i) gb[i % nb] += sgn * go[i];
                } else {
                    // same-shape, or a is the scalar operand
                    if (op == EwOp::mul) {
                        if (mode == Mode::scalar_a)
                            for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * a->data[0];
                        else
                            for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * a->data[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) gb[i] += sgn * go[i];
                    }
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return elementwise(a, b, EwOp::add); }
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) { return elementwise(a, b, EwOp::sub); }
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return elementwise(a, b, EwOp::mul); }

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    auto out = make_tensor<S>(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
    if (detail::tracing_any<S>({a})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [a, out, c] {
            if (!a->requires_grad) return;
            const int64_t n = a->numel();
            for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul: a [..,m,k] x b [..,k,n]; batch dims must match exactly, or b may be
// a plain matrix shared across the batch.

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a->shape.size() < 2 || b->shape.size() < 2)
        throw ContractError("matmul requires rank >= 2 operands");
    const int64_t m = a->shape[a->shape.size() - 2];
    const int64_t k = a->shape[a->shape.size() - 1];
    const int64_t kb = b->shape[b->shape.size() - 2];
    const int64_t n = b->shape[b->shape.size() - 1];
    if (k != kb)
        throw ContractError("matmul inner-dimension mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const bool b_shared = (b->shape.size() == 2 && a->shape.size() > 2);
    std::vector<int64_t> batch_dims(a->shape.begin(), a->shape.end() - 2);
    if (!b_shared) {
        std::vector<int64_t> bb(b->shape.begin(), b->shape.end() - 2);
        if (bb != batch_dims)
            throw ContractError("matmul batch-dimension mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    int64_t batch = 1;
    for (auto e : batch_dims) batch *= e;
    auto out_shape = batch_dims;
    out_shape.push_back(m);
    out_shape.push_back(n);
    auto out = make_tensor<S>(out_shape);

    auto gemm = [m, n, k](const S* A, const S* B, S* C) {
        // C += A * B, row-major, ikj order for contiguous inner loop
        for (int64_t i = 0; i < m; ++i) {
            S* c = C + i * n;
            const S* arow = A + i * k;
            for (int64_t p = 0; p < k; ++p) {
                const S av = arow[p];
                const S* brow = B + p * n;
                for (int64_t j = 0; j < n; ++j) c[j] += av * brow[j];
            }
        }
    };
    for (int64_t bi = 0; bi < batch; ++bi) {
        gemm(a->data.data() + bi * m * k, b->data.data() + (b_shared ? 0 : bi * k * n),
             out->data.data() + bi * m * n);
    }

    if (detail::tracing_any<S>({a, b})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [a, b, out, m, n, k, batch, b_shared] {
            for (int64_t bi = 0; bi < batch; ++bi) {
                const S* A = a->data.data() + bi * m * k;
                const S* B = b->data.data() + (b_shared ? 0 : bi * k * n);
                const S* gC = out->grad.data() + bi * m * n;
                if (a->requires_grad) {
                    S* gA = a->grad.data() + bi * m * k;
                    // dA = dC * B^T
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t p = 0; p < k; ++p) {
                            S acc = 0;
                            const S* gc = gC + i * n;
                            const S* br = B + p * n;
                            for (int64_t j = 0; j < n; ++j) acc += gc[j] * br[j];
                            gA[i * k + p] += acc;
                        }
                }
                if (b->requires_grad) {
                    S* gB = b->grad.data() + (b_shared ? 0 : bi * k * n);
                    // dB = A^T * dC
                    for (int64_t p = 0; p < k; ++p) {
                        S* gb = gB + p * n;
                        for (int64_t i = 0; i < m; ++i) {
                            const S av = A[i * k + p];
                            const S* gc = gC + i * n;
                            for (int64_t j = 0; j < n; ++j) gb[j] += av * gc[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// y = x W^T + b,  x: [.., din], W: [dout, din], b: [dout] (optional)
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x->shape.empty() || w->shape.size() != 2)
        throw ContractError("linear expects x rank >= 1 and 2-D weight");
    const int64_t din = x->shape.back();
    const int64_t dout = w->shape[0];
    if (w->shape[1] != din)
        throw ContractError("linear dimension mismatch: x " + shape_str(x->shape) + " w " + shape_str(w->shape));
    if (b && b->numel() != dout) throw ContractError("linear bias length mismatch");
    const int64_t rows = x->numel() / din;
    auto out_shape = x->shape;
    out_shape.back() = dout;
    auto out = make_tensor<S>(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xi = x->data.data() + r * din;
        S* yo = out->data.data() + r * dout;
        if (b)
            std::copy(b->data.begin(), b->data.end(), yo);
        for (int64_t i = 0; i < din; ++i) {
            const S xv = xi[i];
            if (xv == S(0)) continue;
            const S* wc = w->data.data() + i;  // column i strided by din
            for (int64_t o = 0; o < dout; ++o) yo[o] += xv * wc[o * din];
        }
    }

    if (detail::tracing_any<S>({x, w, b})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, w, b, out, rows, din, dout] {
            for (int64_t r = 0; r < rows; ++r) {
                const S* gy = out->grad.data() + r * dout;
                const S* xi = x->data.data() + r * din;
                if (x->requires_grad) {
                    S* gx = x->grad.data() + r * din;
                    for (int64_t o = 0; o < dout; ++o) {
                        const S g = gy[o];
                        const S* wr = w->data.data() + o * din;
                        for (int64_t i = 0; i < din; ++i) gx[i] += g * wr[i];
                    }
                }
                if (w->requires_grad) {
                    for (int64_t o = 0; o < dout; ++o) {
                        const S g = gy[o];
                        S* gw = w->grad.data() + o * din;
                        for (int64_t i = 0; i < din; ++i) gw[i] += g * xi[i];
                    }
                }
                if (b && b->requires_grad)
                    for (int64_t o = 0; o < dout; ++o) b->grad[o] += gy[o];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int64_t stride, int64_t pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw ContractError("conv2d expects 4-D input and weight");
    const int64_t n = x->shape[0], cin = x->shape[1], h = x->shape[2], ww = x->shape[3];
    const int64_t cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != cin)
        throw ContractError("conv2d channel mismatch: input " + shape_str(x->shape) + " weight " + shape_str(w->shape));
    if (h + 2 * pad - kh < 0 || ww + 2 * pad - kw < 0)
        throw ContractError("conv2d kernel exceeds padded input: input " + shape_str(x->shape) +
                            " kernel " + shape_str(w->shape) + " stride " + std::to_string(stride));
    // floor division: windows that do not fit are dropped (120 -> 60 at stride 2)
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (ww + 2 * pad - kw) / stride + 1;
    if (bias && bias->numel() != cout) throw ContractError("conv2d bias length mismatch");
    auto out = make_tensor<S>({n, cout, ho, wo});

    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t co = 0; co < cout; ++co) {
            S* op = out->data.data() + ((ni * cout + co) * ho) * wo;
            if (bias) {
                const S bv = bias->data[co];
                for (int64_t i = 0; i < ho * wo; ++i) op[i] = bv;
            }
            for (int64_t ci = 0; ci < cin; ++ci) {
                const S* xp = x->data.data() + ((ni * cin + ci) * h) * ww;
                const S* wp = w->data.data() + ((co * cin + ci) * kh) * kw;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy0 = oy * stride - pad;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const int64_t iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const S* xrow = xp + iy * ww;
                        const S* wrow = wp + ky * kw;
                        S* orow = op + oy * wo;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const S wv = wrow[kx];
                            if (wv == S(0)) continue;
                            const int64_t ix0 = kx - pad;
                            int64_t ox_lo = std::max<int64_t>(0, (-ix0 + stride - 1) / stride);
                            int64_t ox_hi = std::min(wo, (ww - ix0 + stride - 1) / stride);
                            for (int64_t ox = ox_lo; ox < ox_hi; ++ox)
                                orow[ox] += wv * xrow[ox * stride + ix0];
                        }
                    }
                }
            }
        }
    }

    if (detail::tracing_any<S>({x, w, bias})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, w, bias, out, n, cin, cout, h, ww, kh, kw, ho, wo, stride, pad] {
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t co = 0; co < cout; ++co) {
                    const S* gp = out->grad.data() + ((ni * cout + co) * ho) * wo;
                    if (bias && bias->requires_grad) {
                        S acc = 0;
                        for (int64_t i = 0; i < ho * wo; ++i) acc += gp[i];
                        bias->grad[co] += acc;
                    }
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const S* xp = x->data.data() + ((ni * cin + ci) * h) * ww;
                        const S* wp = w->data.data() + ((co * cin + ci) * kh) * kw;
                        S* gx = x->requires_grad ? x->grad.data() + ((ni * cin + ci) * h) * ww : nullptr;
                        S* gw = w->requires_grad ? w->grad.data() + ((co * cin + ci) * kh) * kw : nullptr;
                        for (int64_t oy = 0; oy < ho; ++oy) {
                            const int64_t iy0 = oy * stride - pad;
                            const S* grow = gp + oy * wo;
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                const int64_t iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                const S* xrow = xp + iy * ww;
                                S* gxrow = gx ? gx + iy * ww : nullptr;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t ix0 = kx - pad;
                                    int64_t ox_lo = std::max<int64_t>(0, (-ix0 + stride - 1) / stride);
                                    int64_t ox_hi = std::min(wo, (ww - ix0 + stride - 1) / stride);
                                    if (gx) {
                                        const S wv = wp[ky * kw + kx];
                                        for (int64_t ox = ox_lo; ox < ox_hi; ++ox)
                                            gxrow[ox * stride + ix0] += wv * grow[ox];
                                    }
                                    if (gw) {
                                        S acc = 0;
                                        for (int64_t ox = ox_lo; ox < ox_hi; ++ox)
                                            acc += grow[ox] * xrow[ox * stride + ix0];
                                        gw[ky * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
        });
    }
    return out;
}

// Transposed conv, weight [cin, cout, kh, kw]. Restricted to the configurations
// used here: output spatial extents exactly double the input.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           int64_t stride, int64_t pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw ContractError("conv_transpose2d expects 4-D input and weight");
    if (stride != 2)
        throw ContractError("conv_transpose2d supports stride 2 only, got " + std::to_string(stride));
    const int64_t n = x->shape[0], cin = x->shape[1], h = x->shape[2], ww = x->shape[3];
    const int64_t cout = w->shape[1], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[0] != cin)
        throw ContractError("conv_transpose2d channel mismatch: input " + shape_str(x->shape) +
                            " weight " + shape_str(w->shape));
    const int64_t ho = (h - 1) * stride + kh - 2 * pad;
    const int64_t wo = (ww - 1) * stride + kw - 2 * pad;
    if (ho != 2 * h || wo != 2 * ww)
        throw ContractError("conv_transpose2d kernel/pad must double spatial extents");
    if (bias && bias->numel() != cout) throw ContractError("conv_transpose2d bias length mismatch");
    auto out = make_tensor<S>({n, cout, ho, wo});

    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t co = 0; co < cout; ++co) {
            S* op = out->data.data() + ((ni * cout + co) * ho) * wo;
            if (bias) {
                const S bv = bias->data[co];
                for (int64_t i = 0; i < ho * wo; ++i) op[i] = bv;
            }
            for (int64_t ci = 0; ci < cin; ++ci) {
                const S* xp = x->data.data() + ((ni * cin + ci) * h) * ww;
                const S* wp = w->data.data() + ((ci * cout + co) * kh) * kw;
                for (int64_t iy = 0; iy < h; ++iy)
                    for (int64_t ix = 0; ix < ww; ++ix) {
                        const S xv = xp[iy * ww + ix];
                        if (xv == S(0)) continue;
                        const int64_t oy0 = iy * stride - pad;
                        const int64_t ox0 = ix * stride - pad;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t oy = oy0 + ky;
                            if (oy < 0 || oy >= ho) continue;
                            S* orow = op + oy * wo;
                            const S* wrow = wp + ky * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ox = ox0 + kx;
                                if (ox < 0 || ox >= wo) continue;
                                orow[ox] += xv * wrow[kx];
                            }
                        }
                    }
            }
        }

    if (detail::tracing_any<S>({x, w, bias})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, w, bias, out, n, cin, cout, h, ww, kh, kw, ho, wo, stride, pad] {
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t co = 0; co < cout; ++co) {
                    const S* gp = out->grad.data() + ((ni * cout + co) * ho) * wo;
                    if (bias && bias->requires_grad) {
                        S acc = 0;
                        for (int64_t i = 0; i < ho * wo; ++i) acc += gp[i];
                        bias->grad[co] += acc;
                    }
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const S* xp = x->data.data() + ((ni * cin + ci) * h) * ww;
                        const S* wp = w->data.data() + ((ci * cout + co) * kh) * kw;
                        S* gx = x->requires_grad ? x->grad.data() + ((ni * cin + ci) * h) * ww : nullptr;
                        S* gw = w->requires_grad ? w->grad.data() + ((ci * cout + co) * kh) * kw : nullptr;
                        for (int64_t iy = 0; iy < h; ++iy)
                            for (int64_t ix = 0; ix < ww; ++ix) {
                                const int64_t oy0 = iy * stride - pad;
                                const int64_t ox0 = ix * stride - pad;
                                S gacc = 0;
                                const S xv = xp[iy * ww + ix];
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t oy = oy0 + ky;
                                    if (oy < 0 || oy >= ho) continue;
                                    const S* grow = gp + oy * wo;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t ox = ox0 + kx;
                                        if (ox < 0 || ox >= wo) continue;
                                        const S g = grow[ox];
                                        if (gx) gacc += g * wp[ky * kw + kx];
                                        if (gw) gw[ky * kw + kx] += g * xv;
                                    }
                                }
                                if (gx) gx[iy * ww + ix] += gacc;
                            }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

template <typename S>
struct BatchNormState {
    Tensor<S> running_mean;
    Tensor<S> running_var;
    S momentum = S(0.1);
    S eps = S(1e-5);
};

template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       BatchNormState<S>& state, bool training) {
    if (x->shape.size() != 4) throw ContractError("batch_norm2d expects 4-D input");
    const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (n == 0) throw ContractError("batch_norm2d on zero batch");
    if (gamma->numel() != c || beta->numel() != c)
        throw ContractError("batch_norm2d gamma/beta length must equal channel count " + std::to_string(c));
    const int64_t plane = h * w;
    const int64_t cnt = n * plane;
    auto out = make_tensor<S>(x->shape);
    std::vector<S> mean(c), invstd(c);
    for (int64_t ci = 0; ci < c; ++ci) {
        S mu, var;
        if (training) {
            S acc = 0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const S* xp = x->data.data() + ((ni * c + ci) * plane);
                for (int64_t i = 0; i < plane; ++i) acc += xp[i];
            }
            mu = acc / S(cnt);
            S vacc = 0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const S* xp = x->data.data() + ((ni * c + ci) * plane);
                for (int64_t i = 0; i < plane; ++i) {
                    const S d = xp[i] - mu;
                    vacc += d * d;
                }
            }
            var = vacc / S(cnt);
            state.running_mean->data[ci] = (S(1) - state.momentum) * state.running_mean->data[ci] + state.momentum * mu;
            state.running_var->data[ci] = (S(1) - state.momentum) * state.running_var->data[ci] + state.momentum * var;
        } else {
            mu = state.running_mean->data[ci];
            var = state.running_var->data[ci];
        }
        mean[ci] = mu;
        invstd[ci] = S(1) / std::sqrt(var + state.eps);
        const S g = gamma->data[ci], b = beta->data[ci], is = invstd[ci];
        for (int64_t ni = 0; ni < n; ++ni) {
            const S* xp = x->data.data() + ((ni * c + ci) * plane);
            S* op = out->data.data() + ((ni * c + ci) * plane);
            for (int64_t i = 0; i < plane; ++i) op[i] = g * (xp[i] - mu) * is + b;
        }
    }

    if (detail::tracing_any<S>({x, gamma, beta})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, gamma, beta, out, mean, invstd, n, c, plane, cnt, training] {
            for (int64_t ci = 0; ci < c; ++ci) {
                const S mu = mean[ci], is = invstd[ci], g = gamma->data[ci];
                S sum_g = 0, sum_gx = 0;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const S* gp = out->grad.data() + ((ni * c + ci) * plane);
                    const S* xp = x->data.data() + ((ni * c + ci) * plane);
                    for (int64_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * (xp[i] - mu) * is;
                    }
                }
                if (gamma->requires_grad) gamma->grad[ci] += sum_gx;
                if (beta->requires_grad) beta->grad[ci] += sum_g;
                if (x->requires_grad) {
                    for (int64_t ni = 0; ni < n; ++ni) {
                        const S* gp = out->grad.data() + ((ni * c + ci) * plane);
                        const S* xp = x->data.data() + ((ni * c + ci) * plane);
                        S* gx = x->grad.data() + ((ni * c + ci) * plane);
                        if (training) {
                            for (int64_t i = 0; i < plane; ++i) {
                                const S xhat = (xp[i] - mu) * is;
                                gx[i] += g * is * (gp[i] - sum_g / S(cnt) - xhat * sum_gx / S(cnt));
                            }
                        } else {
                            for (int64_t i = 0; i < plane; ++i) gx[i] += g * is * gp[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Normalizes over the last extent. With sqrt_form=false this divides by
// (variance + eps) directly; with sqrt_form=true by sqrt(variance + eps).
// gamma/beta may be null for the parameterless form.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps, bool sqrt_form) {
    if (x->shape.empty()) throw ContractError("layer_norm expects rank >= 1");
    if (eps <= S(0)) throw ContractError("layer_norm eps must be positive");
    const int64_t d = x->shape.back();
    if (gamma && gamma->numel() != d) throw ContractError("layer_norm gamma length mismatch");
    if (beta && beta->numel() != d) throw ContractError("layer_norm beta length mismatch");
    const int64_t rows = x->numel() / d;
    auto out = make_tensor<S>(x->shape);
    std::vector<S> mus(rows), denoms(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xp = x->data.data() + r * d;
        S* op = out->data.data() + r * d;
        S mu = 0;
        for (int64_t i = 0; i < d; ++i) mu += xp[i];
        mu /= S(d);
        S var = 0;
        for (int64_t i = 0; i < d; ++i) {
            const S dv = xp[i] - mu;
            var += dv * dv;
        }
        var /= S(d);
        const S denom = sqrt_form ? std::sqrt(var + eps) : (var + eps);
        mus[r] = mu;
        denoms[r] = denom;
        for (int64_t i = 0; i < d; ++i) {
            S v = (xp[i] - mu) / denom;
            if (gamma) v *= gamma->data[i];
            if (beta) v += beta->data[i];
            op[i] = v;
        }
    }

    if (detail::tracing_any<S>({x, gamma, beta})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, gamma, beta, out, mus, denoms, rows, d, sqrt_form] {
            for (int64_t r = 0; r < rows; ++r) {
                const S* xp = x->data.data() + r * d;
                const S* gp = out->grad.data() + r * d;
                const S mu = mus[r], denom = denoms[r];
                // gg_i = upstream * gamma_i
                S sum_gg = 0, sum_ggx = 0;
                for (int64_t i = 0; i < d; ++i) {
                    const S gg = gp[i] * (gamma ? gamma->data[i] : S(1));
                    const S xc = xp[i] - mu;
                    sum_gg += gg;
                    sum_ggx += gg * xc;
                    if (gamma && gamma->requires_grad) gamma->grad[i] += gp[i] * xc / denom;
                    if (beta && beta->requires_grad) beta->grad[i] += gp[i];
                }
                if (x->requires_grad) {
                    S* gx = x->grad.data() + r * d;
                    if (sqrt_form) {
                        // standard form: denom = s = sqrt(var+eps)
                        const S s = denom;
                        for (int64_t i = 0; i < d; ++i) {
                            const S gg = gp[i] * (gamma ? gamma->data[i] : S(1));
                            const S xc = xp[i] - mu;
                            gx[i] += (gg - sum_gg / S(d) - xc * sum_ggx / (S(d) * s * s)) / s;
                        }
                    } else {
                        // literal form: denom = var + eps; d(var)/dx_j = 2 xc_j / d
                        for (int64_t i = 0; i < d; ++i) {
                            const S gg = gp[i] * (gamma ? gamma->data[i] : S(1));
                            const S xc = xp[i] - mu;
                            gx[i] += (gg - sum_gg / S(d)) / denom -
                                     S(2) * xc * sum_ggx / (S(d) * denom * denom);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations and softmax

enum class Activation { relu, tanh, gelu };

template <typename S>
Tensor<S> activation(const Tensor<S>& x, Activation kind) {
    auto out = make_tensor<S>(x->shape);
    const int64_t n = x->numel();
    switch (kind) {
        case Activation::relu:
            for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
            break;
        case Activation::tanh:
            for (int64_t i = 0; i < n; ++i) out->data[i] = std::tanh(x->data[i]);
            break;
        case Activation::gelu:
            for (int64_t i = 0; i < n; ++i) {
                const S v = x->data[i];
                out->data[i] = S(0.5) * v * (S(1) + std::erf(v * S(0.70710678118654752440)));
            }
            break;
    }
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, kind] {
            if (!x->requires_grad) return;
            const int64_t n = x->numel();
            switch (kind) {
                case Activation::relu:
                    for (int64_t i = 0; i < n; ++i)
                        if (x->data[i] > S(0)) x->grad[i] += out->grad[i];
                    break;
                case Activation::tanh:
                    for (int64_t i = 0; i < n; ++i) {
                        const S t = out->data[i];
                        x->grad[i] += out->grad[i] * (S(1) - t * t);
                    }
                    break;
                case Activation::gelu:
                    for (int64_t i = 0; i < n; ++i) {
                        const S v = x->data[i];
                        const S cdf = S(0.5) * (S(1) + std::erf(v * S(0.70710678118654752440)));
                        const S pdf = std::exp(S(-0.5) * v * v) * S(0.39894228040143267794);
                        x->grad[i] += out->grad[i] * (cdf + v * pdf);
                    }
                    break;
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) { return activation(x, Activation::relu); }
template <typename S>
Tensor<S> tanh_op(const Tensor<S>& x) { return activation(x, Activation::tanh); }
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) { return activation(x, Activation::gelu); }

// Softmax over the last extent, max-subtracted.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
    const int64_t d = x->shape.back();
    const int64_t rows = x->numel() / d;
    auto out = make_tensor<S>(x->shape);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xp = x->data.data() + r * d;
        S* op = out->data.data() + r * d;
        S mx = xp[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xp[i]);
        S sum = 0;
        for (int64_t i = 0; i < d; ++i) {
            op[i] = std::exp(xp[i] - mx);
            sum += op[i];
        }
        for (int64_t i = 0; i < d; ++i) op[i] /= sum;
    }
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, rows, d] {
            if (!x->requires_grad) return;
            for (int64_t r = 0; r < rows; ++r) {
                const S* p = out->data.data() + r * d;
                const S* gp = out->grad.data() + r * d;
                S* gx = x->grad.data() + r * d;
                S dot = 0;
                for (int64_t i = 0; i < d; ++i) dot += p[i] * gp[i];
                for (int64_t i = 0; i < d; ++i) gx[i] += p[i] * (gp[i] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and loss

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    auto out = make_tensor<S>({1});
    S acc = 0;
    for (auto v : x->data) acc += v;
    out->data[0] = acc;
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out] {
            if (!x->requires_grad) return;
            const S g = out->grad[0];
            for (auto& gv : x->grad) gv += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / S(x->numel()));
}

// Mean absolute difference; subgradient 0 at ties.
template <typename S>
Tensor<S> l1_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    if (pred->shape != target->shape)
        throw ContractError("l1_loss shape mismatch: " + shape_str(pred->shape) + " vs " + shape_str(target->shape));
    auto out = make_tensor<S>({1});
    const int64_t n = pred->numel();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += std::abs(pred->data[i] - target->data[i]);
    out->data[0] = acc / S(n);
    if (detail::tracing_any<S>({pred, target})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [pred, target, out, n] {
            const S g = out->grad[0] / S(n);
            for (int64_t i = 0; i < n; ++i) {
                const S d = pred->data[i] - target->data[i];
                const S s = d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0));
                if (pred->requires_grad) pred->grad[i] += g * s;
                if (target->requires_grad) target->grad[i] -= g * s;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int64_t> shape) {
    auto out = make_tensor<S>(std::move(shape));
    if (out->numel() != x->numel())
        throw ContractError("reshape element-count mismatch: " + shape_str(x->shape) + " -> " + shape_str(out->shape));
    out->data = x->data;
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out] {
            if (!x->requires_grad) return;
            const int64_t n = x->numel();
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int64_t>& perm) {
    const size_t rank = x->shape.size();
    if (perm.size() != rank) throw ContractError("permute rank mismatch");
    std::vector<int64_t> out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = x->shape[perm[i]];
    auto out = make_tensor<S>(out_shape);
    std::vector<int64_t> in_strides(rank, 1), out_strides(rank, 1);
    for (size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x->shape[i];
    for (size_t i = rank - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];
    const int64_t n = x->numel();
    // map: out flat index -> in flat index
    std::vector<int64_t> strides_for_out(rank);
    for (size_t i = 0; i < rank; ++i) strides_for_out[i] = in_strides[perm[i]];
    std::vector<int64_t> idx(rank, 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        for (size_t i = 0; i < rank; ++i) src += idx[i] * strides_for_out[i];
        out->data[o] = x->data[src];
        for (size_t i = rank; i > 0; --i) {
            if (++idx[i - 1] < out_shape[i - 1]) break;
            idx[i - 1] = 0;
        }
    }
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, out_shape, strides_for_out, n] {
            if (!x->requires_grad) return;
            const size_t rank = out_shape.size();
            std::vector<int64_t> idx(rank, 0);
            for (int64_t o = 0; o < n; ++o) {
                int64_t src = 0;
                for (size_t i = 0; i < rank; ++i) src += idx[i] * strides_for_out[i];
                x->grad[src] += out->grad[o];
                for (size_t i = rank; i > 0; --i) {
                    if (++idx[i - 1] < out_shape[i - 1]) break;
                    idx[i - 1] = 0;
                }
            }
        });
    }
    return out;
}

// Slice along the last extent: x[.., start:start+len]
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, int64_t start, int64_t len) {
    const int64_t d = x->shape.back();
    if (start < 0 || len <= 0 || start + len > d) throw ContractError("slice_last out of range");
    auto shape = x->shape;
    shape.back() = len;
    auto out = make_tensor<S>(shape);
    const int64_t rows = x->numel() / d;
    for (int64_t r = 0; r < rows; ++r)
        std::copy_n(x->data.data() + r * d + start, len, out->data.data() + r * len);
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, start, len, d, rows] {
            if (!x->requires_grad) return;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < len; ++i)
                    x->grad[r * d + start + i] += out->grad[r * len + i];
        });
    }
    return out;
}

// Nearest-neighbor 2x spatial upsample on (n,c,h,w).
template <typename S>
Tensor<S> nearest_upsample2x(const Tensor<S>& x) {
    if (x->shape.size() != 4) throw ContractError("nearest_upsample2x expects 4-D input");
    const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    auto out = make_tensor<S>({n, c, 2 * h, 2 * w});
    for (int64_t p = 0; p < n * c; ++p) {
        const S* xp = x->data.data() + p * h * w;
        S* op = out->data.data() + p * 4 * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x2 = 0; x2 < w; ++x2) {
                const S v = xp[y * w + x2];
                S* row0 = op + (2 * y) * 2 * w + 2 * x2;
                S* row1 = op + (2 * y + 1) * 2 * w + 2 * x2;
                row0[0] = row0[1] = row1[0] = row1[1] = v;
            }
    }
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, n, c, h, w] {
            if (!x->requires_grad) return;
            for (int64_t p = 0; p < n * c; ++p) {
                S* gx = x->grad.data() + p * h * w;
                const S* gp = out->grad.data() + p * 4 * h * w;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x2 = 0; x2 < w; ++x2) {
                        const S* row0 = gp + (2 * y) * 2 * w + 2 * x2;
                        const S* row1 = gp + (2 * y + 1) * 2 * w + 2 * x2;
                        gx[y * w + x2] += row0[0] + row0[1] + row1[0] + row1[1];
                    }
            }
        });
    }
    return out;
}

// (n,c,H,W) -> (n,T,c*p*p) with T=(H/p)*(W/p); token layout (c, py, px).
template <typename S>
Tensor<S> patchify(const Tensor<S>& x, int64_t p) {
    if (x->shape.size() != 4) throw ContractError("patchify expects 4-D input");
    const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (h % p != 0 || w % p != 0)
        throw ContractError("patchify: spatial extents " + shape_str(x->shape) +
                            " not divisible by patch " + std::to_string(p));
    const int64_t gh = h / p, gw = w / p, T = gh * gw, D = c * p * p;
    auto out = make_tensor<S>({n, T, D});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ty = 0; ty < gh; ++ty)
            for (int64_t tx = 0; tx < gw; ++tx) {
                S* tok = out->data.data() + ((ni * T + ty * gw + tx) * D);
                for (int64_t ci = 0; ci < c; ++ci)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            tok[(ci * p + py) * p + px] =
                                x->data[((ni * c + ci) * h + ty * p + py) * w + tx * p + px];
            }
    if (detail::tracing_any<S>({x})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [x, out, n, c, h, w, p] {
            if (!x->requires_grad) return;
            const int64_t gh = h / p, gw = w / p, T = gh * gw, D = c * p * p;
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t ty = 0; ty < gh; ++ty)
                    for (int64_t tx = 0; tx < gw; ++tx) {
                        const S* tok = out->grad.data() + ((ni * T + ty * gw + tx) * D);
                        for (int64_t ci = 0; ci < c; ++ci)
                            for (int64_t py = 0; py < p; ++py)
                                for (int64_t px = 0; px < p; ++px)
                                    x->grad[((ni * c + ci) * h + ty * p + py) * w + tx * p + px] +=
                                        tok[(ci * p + py) * p + px];
                    }
        });
    }
    return out;
}

// Inverse of patchify: (n,T,c*p*p) -> (n,c,H,W).
template <typename S>
Tensor<S> depatchify(const Tensor<S>& tokens, int64_t p, int64_t c, int64_t h, int64_t w) {
    if (tokens->shape.size() != 3) throw ContractError("depatchify expects 3-D tokens");
    const int64_t n = tokens->shape[0], T = tokens->shape[1], D = tokens->shape[2];
    const int64_t gh = h / p, gw = w / p;
    if (T != gh * gw || D != c * p * p)
        throw ContractError("depatchify shape mismatch for tokens " + shape_str(tokens->shape));
    auto out = make_tensor<S>({n, c, h, w});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ty = 0; ty < gh; ++ty)
            for (int64_t tx = 0; tx < gw; ++tx) {
                const S* tok = tokens->data.data() + ((ni * T + ty * gw + tx) * D);
                for (int64_t ci = 0; ci < c; ++ci)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            out->data[((ni * c + ci) * h + ty * p + py) * w + tx * p + px] =
                                tok[(ci * p + py) * p + px];
            }
    if (detail::tracing_any<S>({tokens})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [tokens, out, p, c, h, w] {
            if (!tokens->requires_grad) return;
            const int64_t n = tokens->shape[0], T = tokens->shape[1], D = tokens->shape[2];
            const int64_t gh = h / p, gw = w / p;
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t ty = 0; ty < gh; ++ty)
                    for (int64_t tx = 0; tx < gw; ++tx) {
                        S* tok = tokens->grad.data() + ((ni * T + ty * gw + tx) * D);
                        for (int64_t ci = 0; ci < c; ++ci)
                            for (int64_t py = 0; py < p; ++py)
                                for (int64_t px = 0; px < p; ++px)
                                    tok[(ci * p + py) * p + px] +=
                                        out->grad[((ni * c + ci) * h + ty * p + py) * w + tx * p + px];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Initializers

template <typename S>
void fill_kaiming_uniform(Tensor<S>& t, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    for (auto& v : t->data) v = S(rng.uniform(-bound, bound));
}

template <typename S>
void fill_xavier_uniform(Tensor<S>& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& v : t->data) v = S(rng.uniform(-bound, bound));
}

template <typename S>
void fill_normal(Tensor<S>& t, double stddev, Rng& rng) {
    for (auto& v : t->data) v = S(rng.normal() * stddev);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle. Runs f under a private tape, backprops,
// then compares against central differences. 64-bit use only.

template <typename S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                         Tensor<S> x, double h) {
    if (h < 1e-6 || h > 1e-3) throw ContractError("finite_diff_check: h must lie in [1e-6, 1e-3]");
    x->set_requires_grad(true);
    Tape<S> tape;
    {
        TapeScope<S> scope(tape);
        auto loss = f(x);
        if (loss->numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
        tape.backward(loss);
    }
    std::vector<S> analytic = x->grad;

    double max_rel = 0.0;
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) {
        const S orig = x->data[i];
        x->data[i] = orig + S(h);
        const double fp = double(f(x)->data[0]);
        x->data[i] = orig - S(h);
        const double fm = double(f(x)->data[0]);
        x->data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = double(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
    return max_rel;
}

}  // namespace tavit
