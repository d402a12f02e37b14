#pragma once

// Architectural building blocks: residual conv blocks, patch embedding,
// naive and tiled exact attention, plain and adaLN-zero transformer layers.

#include "tavit/tensor.hpp"

namespace tavit {

// ---------------------------------------------------------------------------
// Parameter registry. Each parameter's initializer is seeded from the root
// seed and its name, so identically named parameters in two models built from
// the same root seed receive identical values.

template <typename S>
struct ParamStore {
    uint64_t root_seed = 0;
    std::vector<std::pair<std::string, Tensor<S>>> params;
    std::vector<std::pair<std::string, Tensor<S>>> buffers;

    Tensor<S> conv_weight(const std::string& name, int64_t cout, int64_t cin, int64_t k) {
        auto t = make_tensor<S>({cout, cin, k, k});
        Rng rng(derive_seed(root_seed, name));
        fill_kaiming_uniform(t, cin * k * k, rng);
        return reg(name, t);
    }
    Tensor<S> convT_weight(const std::string& name, int64_t cin, int64_t cout, int64_t k) {
        auto t = make_tensor<S>({cin, cout, k, k});
        Rng rng(derive_seed(root_seed, name));
        fill_kaiming_uniform(t, cin * k * k, rng);
        return reg(name, t);
    }
    Tensor<S> linear_weight(const std::string& name, int64_t dout, int64_t din) {
        auto t = make_tensor<S>({dout, din});
        Rng rng(derive_seed(root_seed, name));
        fill_xavier_uniform(t, din, dout, rng);
        return reg(name, t);
    }
    Tensor<S> pos_embed(const std::string& name, int64_t tokens, int64_t dim) {
        auto t = make_tensor<S>({tokens, dim});
        Rng rng(derive_seed(root_seed, name));
        fill_normal(t, 0.02, rng);
        return reg(name, t);
    }
    Tensor<S> zeros(const std::string& name, std::vector<int64_t> shape) {
        return reg(name, make_tensor<S>(std::move(shape), S(0)));
    }
    Tensor<S> ones(const std::string& name, std::vector<int64_t> shape) {
        return reg(name, make_tensor<S>(std::move(shape), S(1)));
    }
    Tensor<S> buffer(const std::string& name, std::vector<int64_t> shape, S fill) {
        auto t = make_tensor<S>(std::move(shape), fill);
        buffers.emplace_back(name, t);
        return t;
    }

private:
    Tensor<S> reg(const std::string& name, Tensor<S> t) {
        t->set_requires_grad(true);
        params.emplace_back(name, t);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Attention. Q,K,V: (n,H,T,dh).

template <typename S>
void check_attention_shapes(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
    if (q->shape.size() != 4 || k->shape != q->shape || v->shape != q->shape)
        throw ContractError("attention expects matching 4-D Q/K/V, got " + shape_str(q->shape) +
                            " " + shape_str(k->shape) + " " + shape_str(v->shape));
}

// softmax(QK^T/sqrt(dh)) V, materializing the T x T matrix.
template <typename S>
Tensor<S> attention_naive(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
    check_attention_shapes(q, k, v);
    const int64_t n = q->shape[0], H = q->shape[1], T = q->shape[2], dh = q->shape[3];
    const int64_t heads = n * H;
    const S inv_sqrt = S(1) / S(std::sqrt(double(dh)));
    auto out = make_tensor<S>(q->shape);
    auto probs = std::make_shared<std::vector<S>>(size_t(heads * T * T));
    for (int64_t hd = 0; hd < heads; ++hd) {
        const S* Q = q->data.data() + hd * T * dh;
        const S* K = k->data.data() + hd * T * dh;
        const S* V = v->data.data() + hd * T * dh;
        S* O = out->data.data() + hd * T * dh;
        S* P = probs->data() + hd * T * T;
        for (int64_t i = 0; i < T; ++i) {
            S* prow = P + i * T;
            S mx = -std::numeric_limits<S>::infinity();
            for (int64_t j = 0; j < T; ++j) {
                S s = 0;
                const S* qi = Q + i * dh;
                const S* kj = K + j * dh;
                for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                prow[j] = s * inv_sqrt;
                mx = std::max(mx, prow[j]);
            }
            S sum = 0;
            for (int64_t j = 0; j < T; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                sum += prow[j];
            }
            S* orow = O + i * dh;
            for (int64_t j = 0; j < T; ++j) {
                prow[j] /= sum;
                const S p = prow[j];
                const S* vj = V + j * dh;
                for (int64_t d = 0; d < dh; ++d) orow[d] += p * vj[d];
            }
        }
    }
    if (detail::tracing_any<S>({q, k, v})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [q, k, v, out, probs, heads, T, dh, inv_sqrt] {
            std::vector<S> dS(T);
            for (int64_t hd = 0; hd < heads; ++hd) {
                const S* Q = q->data.data() + hd * T * dh;
                const S* K = k->data.data() + hd * T * dh;
                const S* V = v->data.data() + hd * T * dh;
                const S* gO = out->grad.data() + hd * T * dh;
                const S* P = probs->data() + hd * T * T;
                for (int64_t i = 0; i < T; ++i) {
                    const S* prow = P + i * T;
                    const S* go = gO + i * dh;
                    // dP_ij = dO_i . V_j ; dS = P o (dP - sum_j P dP)
                    S dot = 0;
                    for (int64_t j = 0; j < T; ++j) {
                        S dp = 0;
                        const S* vj = V + j * dh;
                        for (int64_t d = 0; d < dh; ++d) dp += go[d] * vj[d];
                        dS[j] = dp;
                        dot += prow[j] * dp;
                    }
                    for (int64_t j = 0; j < T; ++j) dS[j] = prow[j] * (dS[j] - dot);
                    if (v->requires_grad) {
                        S* gV = v->grad.data() + hd * T * dh;
                        for (int64_t j = 0; j < T; ++j) {
                            const S p = prow[j];
                            S* gvj = gV + j * dh;
                            for (int64_t d = 0; d < dh; ++d) gvj[d] += p * go[d];
                        }
                    }
                    if (q->requires_grad) {
                        S* gq = q->grad.data() + hd * T * dh + i * dh;
                        for (int64_t j = 0; j < T; ++j) {
                            const S c = dS[j] * inv_sqrt;
                            const S* kj = K + j * dh;
                            for (int64_t d = 0; d < dh; ++d) gq[d] += c * kj[d];
                        }
                    }
                    if (k->requires_grad) {
                        S* gK = k->grad.data() + hd * T * dh;
                        const S* qi = Q + i * dh;
                        for (int64_t j = 0; j < T; ++j) {
                            const S c = dS[j] * inv_sqrt;
                            S* gkj = gK + j * dh;
                            for (int64_t d = 0; d < dh; ++d) gkj[d] += c * qi[d];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Streaming-softmax tiled attention; never materializes the T x T matrix and
// matches attention_naive exactly up to floating-point rounding. tile_order,
// when given, selects the key/value tile processing order (used to check that
// the online-softmax result is order independent).
template <typename S>
Tensor<S> attention_tiled(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                          int64_t tile, const std::vector<int64_t>* tile_order = nullptr) {
    check_attention_shapes(q, k, v);
    if (tile < 1) throw ContractError("attention_tiled: tile must be >= 1");
    const int64_t n = q->shape[0], H = q->shape[1], T = q->shape[2], dh = q->shape[3];
    const int64_t heads = n * H;
    const int64_t ntiles = (T + tile - 1) / tile;
    const S inv_sqrt = S(1) / S(std::sqrt(double(dh)));
    std::vector<int64_t> order(ntiles);
    if (tile_order) {
        if (int64_t(tile_order->size()) != ntiles) throw ContractError("attention_tiled: bad tile order");
        order = *tile_order;
    } else {
        std::iota(order.begin(), order.end(), 0);
    }
    auto out = make_tensor<S>(q->shape);
    // per-row softmax statistics, kept for the backward recomputation
    auto row_max = std::make_shared<std::vector<S>>(size_t(heads * T));
    auto row_sum = std::make_shared<std::vector<S>>(size_t(heads * T));

    std::vector<S> acc(dh);
    for (int64_t hd = 0; hd < heads; ++hd) {
        const S* Q = q->data.data() + hd * T * dh;
        const S* K = k->data.data() + hd * T * dh;
        const S* V = v->data.data() + hd * T * dh;
        S* O = out->data.data() + hd * T * dh;
        for (int64_t i = 0; i < T; ++i) {
            const S* qi = Q + i * dh;
            S m = -std::numeric_limits<S>::infinity();
            S l = 0;
            std::fill(acc.begin(), acc.end(), S(0));
            for (int64_t tix : order) {
                const int64_t j0 = tix * tile;
                const int64_t j1 = std::min(T, j0 + tile);
                for (int64_t j = j0; j < j1; ++j) {
                    const S* kj = K + j * dh;
                    S s = 0;
                    for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    s *= inv_sqrt;
                    if (s > m) {
                        const S r = (m == -std::numeric_limits<S>::infinity()) ? S(0) : std::exp(m - s);
                        l *= r;
                        for (int64_t d = 0; d < dh; ++d) acc[d] *= r;
                        m = s;
                    }
                    const S p = std::exp(s - m);
                    l += p;
                    const S* vj = V + j * dh;
                    for (int64_t d = 0; d < dh; ++d) acc[d] += p * vj[d];
                }
            }
            S* orow = O + i * dh;
            for (int64_t d = 0; d < dh; ++d) orow[d] = acc[d] / l;
            (*row_max)[hd * T + i] = m;
            (*row_sum)[hd * T + i] = l;
        }
    }

    if (detail::tracing_any<S>({q, k, v})) {
        detail::mark_output(out);
        g_tape<S>->record(out, [q, k, v, out, row_max, row_sum, heads, T, dh, tile, ntiles, inv_sqrt] {
            // FlashAttention-style backward: recompute probabilities per tile
            // from the saved row statistics.
            for (int64_t hd = 0; hd < heads; ++hd) {
                const S* Q = q->data.data() + hd * T * dh;
                const S* K = k->data.data() + hd * T * dh;
                const S* V = v->data.data() + hd * T * dh;
                const S* O = out->data.data() + hd * T * dh;
                const S* gO = out->grad.data() + hd * T * dh;
                for (int64_t i = 0; i < T; ++i) {
                    const S* qi = Q + i * dh;
                    const S* oi = O + i * dh;
                    const S* goi = gO + i * dh;
                    const S m = (*row_max)[hd * T + i];
                    const S l = (*row_sum)[hd * T + i];
                    S D = 0;  // dO_i . O_i
                    for (int64_t d = 0; d < dh; ++d) D += goi[d] * oi[d];
                    for (int64_t tix = 0; tix < ntiles; ++tix) {
                        const int64_t j0 = tix * tile;
                        const int64_t j1 = std::min(T, j0 + tile);
                        for (int64_t j = j0; j < j1; ++j) {
                            const S* kj = K + j * dh;
                            S s = 0;
                            for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                            const S p = std::exp(s * inv_sqrt - m) / l;
                            S dp = 0;
                            const S* vj = V + j * dh;
                            for (int64_t d = 0; d < dh; ++d) dp += goi[d] * vj[d];
                            const S ds = p * (dp - D) * inv_sqrt;
                            if (v->requires_grad) {
                                S* gvj = v->grad.data() + hd * T * dh + j * dh;
                                for (int64_t d = 0; d < dh; ++d) gvj[d] += p * goi[d];
                            }
                            if (q->requires_grad) {
                                S* gqi = q->grad.data() + hd * T * dh + i * dh;
                                for (int64_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                            }
                            if (k->requires_grad) {
                                S* gkj = k->grad.data() + hd * T * dh + j * dh;
                                for (int64_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conv blocks

template <typename S>
struct Conv2dLayer {
    Tensor<S> w, b;
    int64_t stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout,
                int64_t k, int64_t stride_, int64_t pad_ = -1)
        : stride(stride_), pad(pad_ < 0 ? k / 2 : pad_) {
        w = ps.conv_weight(name + ".w", cout, cin, k);
        b = ps.zeros(name + ".b", {cout});
    }
    Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename S>
struct ConvT2dLayer {
    Tensor<S> w, b;

    ConvT2dLayer() = default;
    ConvT2dLayer(ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout) {
        // 4x4 kernel, stride 2, pad 1: doubles the spatial extents
        w = ps.convT_weight(name + ".w", cin, cout, 4);
        b = ps.zeros(name + ".b", {cout});
    }
    Tensor<S> operator()(const Tensor<S>& x) const { return conv_transpose2d(x, w, b, 2, 1); }
};

template <typename S>
struct BatchNormLayer {
    Tensor<S> gamma, beta;
    BatchNormState<S> state;

    BatchNormLayer() = default;
    BatchNormLayer(ParamStore<S>& ps, const std::string& name, int64_t c) {
        gamma = ps.ones(name + ".gamma", {c});
        beta = ps.zeros(name + ".beta", {c});
        state.running_mean = ps.buffer(name + ".running_mean", {c}, S(0));
        state.running_var = ps.buffer(name + ".running_var", {c}, S(1));
    }
    Tensor<S> operator()(const Tensor<S>& x, bool training) {
        return batch_norm2d(x, gamma, beta, state, training);
    }
};

// activation(batchnorm(conv(x))) + projected skip. The 1x1 skip projection is
// present iff channels or spatial extent change. Upsampling variants use a
// transposed conv on the main path and nearest-upsample + 1x1 conv on the skip.
template <typename S>
struct ResidualBlock {
    Conv2dLayer<S> conv;
    ConvT2dLayer<S> convT;
    BatchNormLayer<S> bn;
    Conv2dLayer<S> skip_proj;
    bool upsample = false;
    bool has_proj = false;
    int64_t cin = 0, cout = 0;

    ResidualBlock() = default;
    ResidualBlock(ParamStore<S>& ps, const std::string& name, int64_t cin_, int64_t cout_,
                  int64_t k, int64_t stride, bool upsample_)
        : upsample(upsample_), cin(cin_), cout(cout_) {
        if (upsample) {
            convT = ConvT2dLayer<S>(ps, name + ".convt", cin, cout);
        } else {
            conv = Conv2dLayer<S>(ps, name + ".conv", cin, cout, k, stride);
        }
        bn = BatchNormLayer<S>(ps, name + ".bn", cout);
        has_proj = (cin != cout) || stride != 1 || upsample;
        if (has_proj)
            skip_proj = Conv2dLayer<S>(ps, name + ".proj", cin, cout, 1, upsample ? 1 : stride);
    }

    Tensor<S> forward(const Tensor<S>& x, bool training) {
        if (x->shape.size() != 4 || x->shape[1] != cin)
            throw ContractError("residual block expects " + std::to_string(cin) +
                                " input channels, got " + shape_str(x->shape));
        Tensor<S> main = upsample ? convT(x) : conv(x);
        main = relu(bn(main, training));
        Tensor<S> skip = x;
        if (upsample) skip = nearest_upsample2x(skip);
        if (has_proj) skip = skip_proj(skip);
        return add(main, skip);
    }
};

// Exactly three residual blocks; spatial change happens in the final one.
template <typename S>
struct CombinedResidualBlock {
    ResidualBlock<S> blocks[3];

    CombinedResidualBlock() = default;
    CombinedResidualBlock(ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout,
                          int64_t first_kernel, int64_t final_stride, bool final_upsample) {
        blocks[0] = ResidualBlock<S>(ps, name + ".res0", cin, cout, first_kernel, 1, false);
        blocks[1] = ResidualBlock<S>(ps, name + ".res1", cout, cout, 3, 1, false);
        blocks[2] = ResidualBlock<S>(ps, name + ".res2", cout, cout, 3, final_stride, final_upsample);
    }

    Tensor<S> forward(Tensor<S> x, bool training) {
        for (auto& b : blocks) x = b.forward(x, training);
        return x;
    }
};

// Bottleneck conv block: x + conv2(relu(conv1(x))), both 3x3, channels fixed.
template <typename S>
struct ConvBlock {
    Conv2dLayer<S> conv1, conv2;

    ConvBlock() = default;
    ConvBlock(ParamStore<S>& ps, const std::string& name, int64_t c) {
        conv1 = Conv2dLayer<S>(ps, name + ".conv1", c, c, 3, 1);
        conv2 = Conv2dLayer<S>(ps, name + ".conv2", c, c, 3, 1);
    }
    Tensor<S> forward(const Tensor<S>& x, bool) {
        return add(conv2(relu(conv1(x))), x);
    }
};

// ---------------------------------------------------------------------------
// Transformer

enum class ConditioningMode { none, adaln_zero };

struct TransformerConfig {
    int64_t embed_dim = 256;
    int64_t heads = 8;
    int64_t layers = 4;
    int64_t mlp_ratio = 4;
    int64_t patch = 1;
    int64_t tile = 16;
    bool use_tiled = true;
    bool gelu_mlp = true;
    bool layernorm_sqrt = false;  // Eq.-literal (variance+eps) by default
    double ln_eps = 1e-5;
    ConditioningMode cond = ConditioningMode::none;

    void validate() const {
        if (embed_dim <= 0 || heads <= 0 || layers <= 0 || mlp_ratio <= 0 || patch <= 0)
            throw ContractError("transformer config extents must be positive");
        if (embed_dim % heads != 0)
            throw ContractError("embed_dim " + std::to_string(embed_dim) +
                                " not divisible by head count " + std::to_string(heads));
    }
};

// Learned linear patch projection plus learned additive positional embedding.
template <typename S>
struct PatchEmbed {
    Tensor<S> proj_w, proj_b, pos;
    int64_t patch = 1, channels = 0, hw = 0;

    PatchEmbed() = default;
    PatchEmbed(ParamStore<S>& ps, const std::string& name, int64_t c, int64_t hw_,
               int64_t patch_, int64_t dim)
        : patch(patch_), channels(c), hw(hw_) {
        if (hw % patch != 0)
            throw ContractError("patch " + std::to_string(patch) + " does not divide extent " +
                                std::to_string(hw));
        const int64_t T = (hw / patch) * (hw / patch);
        proj_w = ps.linear_weight(name + ".proj.w", dim, c * patch * patch);
        proj_b = ps.zeros(name + ".proj.b", {dim});
        pos = ps.pos_embed(name + ".pos", T, dim);
    }
    Tensor<S> operator()(const Tensor<S>& x) const {
        return add(linear(patchify(x, patch), proj_w, proj_b), pos);
    }
};

// Token -> patch projection back to image space. Zero-initialized so a fresh
// ViT block contributes nothing to its residual stream.
template <typename S>
struct DePatchify {
    Tensor<S> proj_w, proj_b;
    int64_t patch = 1, channels = 0, hw = 0;

    DePatchify() = default;
    DePatchify(ParamStore<S>& ps, const std::string& name, int64_t c, int64_t hw_,
               int64_t patch_, int64_t dim)
        : patch(patch_), channels(c), hw(hw_) {
        proj_w = ps.zeros(name + ".proj.w", {c * patch * patch, dim});
        proj_b = ps.zeros(name + ".proj.b", {c * patch * patch});
    }
    Tensor<S> operator()(const Tensor<S>& tokens) const {
        return depatchify(linear(tokens, proj_w, proj_b), patch, channels, hw, hw);
    }
};

template <typename S>
struct MultiHeadAttention {
    Tensor<S> qkv_w, qkv_b, out_w, out_b;
    int64_t dim = 0, heads = 0;
    int64_t tile = 16;
    bool use_tiled = true;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<S>& ps, const std::string& name, const TransformerConfig& cfg)
        : dim(cfg.embed_dim), heads(cfg.heads), tile(cfg.tile), use_tiled(cfg.use_tiled) {
        qkv_w = ps.linear_weight(name + ".qkv.w", 3 * dim, dim);
        qkv_b = ps.zeros(name + ".qkv.b", {3 * dim});
        out_w = ps.linear_weight(name + ".out.w", dim, dim);
        out_b = ps.zeros(name + ".out.b", {dim});
    }

    Tensor<S> forward(const Tensor<S>& tokens) const {
        const int64_t n = tokens->shape[0], T = tokens->shape[1];
        const int64_t dh = dim / heads;
        auto qkv = linear(tokens, qkv_w, qkv_b);  // (n,T,3D)
        auto split_heads = [&](int64_t off) {
            auto t = slice_last(qkv, off * dim, dim);
            return permute(reshape(t, {n, T, heads, dh}), {0, 2, 1, 3});  // (n,H,T,dh)
        };
        auto q = split_heads(0), k = split_heads(1), v = split_heads(2);
        auto att = use_tiled ? attention_tiled(q, k, v, tile) : attention_naive(q, k, v);
        auto merged = reshape(permute(att, {0, 2, 1, 3}), {n, T, dim});
        return linear(merged, out_w, out_b);
    }
};

// Maps a conditioning token to the six adaLN-zero modulation vectors.
// Weights and biases start at exactly zero.
template <typename S>
struct AdaLNParams {
    Tensor<S> w, b;
    int64_t dim = 0;

    AdaLNParams() = default;
    AdaLNParams(ParamStore<S>& ps, const std::string& name, int64_t dim_) : dim(dim_) {
        w = ps.zeros(name + ".w", {6 * dim, dim});
        b = ps.zeros(name + ".b", {6 * dim});
    }
};

template <typename S>
struct AdaLNModulation {
    Tensor<S> gamma1, beta1, alpha1, gamma2, beta2, alpha2;
};

template <typename S>
AdaLNModulation<S> adaln_regress(const Tensor<S>& c_token, const AdaLNParams<S>& p) {
    auto all = linear(c_token, p.w, p.b);  // (..,6D)
    AdaLNModulation<S> m;
    m.gamma1 = slice_last(all, 0 * p.dim, p.dim);
    m.beta1 = slice_last(all, 1 * p.dim, p.dim);
    m.alpha1 = slice_last(all, 2 * p.dim, p.dim);
    m.gamma2 = slice_last(all, 3 * p.dim, p.dim);
    m.beta2 = slice_last(all, 4 * p.dim, p.dim);
    m.alpha2 = slice_last(all, 5 * p.dim, p.dim);
    return m;
}

// Pre-norm transformer layer. Plain mode: x += Attn(LN(x)); x += MLP(LN(x)).
// adaLN-zero mode: modulations regressed from (x + seg_tokens) and applied at
// the four sites (pre-attention scale/shift, post-attention gate, pre-MLP
// scale/shift, post-MLP gate); zero-initialized, so the layer starts as the
// identity map.
template <typename S>
struct TransformerLayer {
    TransformerConfig cfg;
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;  // plain mode only
    MultiHeadAttention<S> attn;
    Tensor<S> fc1_w, fc1_b, fc2_w, fc2_b;
    AdaLNParams<S> ada;

    TransformerLayer() = default;
    TransformerLayer(ParamStore<S>& ps, const std::string& name, const TransformerConfig& cfg_)
        : cfg(cfg_) {
        const int64_t D = cfg.embed_dim, hidden = D * cfg.mlp_ratio;
        if (cfg.cond == ConditioningMode::none) {
            ln1_g = ps.ones(name + ".ln1.gamma", {D});
            ln1_b = ps.zeros(name + ".ln1.beta", {D});
            ln2_g = ps.ones(name + ".ln2.gamma", {D});
            ln2_b = ps.zeros(name + ".ln2.beta", {D});
        } else {
            ada = AdaLNParams<S>(ps, name + ".ada", D);
        }
        attn = MultiHeadAttention<S>(ps, name + ".attn", cfg);
        fc1_w = ps.linear_weight(name + ".mlp.fc1.w", hidden, D);
        fc1_b = ps.zeros(name + ".mlp.fc1.b", {hidden});
        fc2_w = ps.linear_weight(name + ".mlp.fc2.w", D, hidden);
        fc2_b = ps.zeros(name + ".mlp.fc2.b", {D});
    }

    Tensor<S> mlp(const Tensor<S>& x) const {
        auto h = linear(x, fc1_w, fc1_b);
        h = cfg.gelu_mlp ? gelu(h) : relu(h);
        return linear(h, fc2_w, fc2_b);
    }

    Tensor<S> ln(const Tensor<S>& x, const Tensor<S>& g, const Tensor<S>& b) const {
        return layer_norm(x, g, b, S(cfg.ln_eps), cfg.layernorm_sqrt);
    }

    Tensor<S> forward_plain(Tensor<S> x) const {
        x = add(x, attn.forward(ln(x, ln1_g, ln1_b)));
        x = add(x, mlp(ln(x, ln2_g, ln2_b)));
        return x;
    }

    Tensor<S> forward_adaln(Tensor<S> x, const Tensor<S>& seg_tokens) const {
        if (seg_tokens->shape != x->shape)
            throw ContractError("adaLN layer: seg token shape " + shape_str(seg_tokens->shape) +
                                " does not match tokens " + shape_str(x->shape));
        auto m = adaln_regress(add(x, seg_tokens), ada);
        Tensor<S> nog, nob;  // parameterless layer norm inside adaLN
        auto a = attn.forward(add(mul(m.gamma1, ln(x, nog, nob)), m.beta1));
        x = add(x, mul(m.alpha1, a));
        auto f = mlp(add(mul(m.gamma2, ln(x, nog, nob)), m.beta2));
        x = add(x, mul(m.alpha2, f));
        return x;
    }
};

// ---------------------------------------------------------------------------
// ViT block operating on (n,c,hw,hw) feature maps at the bottleneck.
// tavit mode: patchify -> adaLN-conditioned layers -> depatchify, plus the
// block-level residual skip. mprvit mode wraps the plain transformer path in
// a 3x3 conv before and after.

enum class VitMode { mprvit, tavit };

template <typename S>
struct VitBlock {
    VitMode mode;
    TransformerConfig cfg;
    PatchEmbed<S> embed;
    PatchEmbed<S> seg_embed;  // tavit only
    DePatchify<S> depatch;
    std::vector<TransformerLayer<S>> layers;
    Conv2dLayer<S> conv_pre, conv_post;  // mprvit only

    VitBlock() = default;
    VitBlock(ParamStore<S>& ps, const std::string& name, VitMode mode_, int64_t channels,
             int64_t hw, const TransformerConfig& cfg_)
        : mode(mode_), cfg(cfg_) {
        cfg.cond = (mode == VitMode::tavit) ? ConditioningMode::adaln_zero : ConditioningMode::none;
        cfg.validate();
        embed = PatchEmbed<S>(ps, name + ".embed", channels, hw, cfg.patch, cfg.embed_dim);
        if (mode == VitMode::tavit)
            seg_embed = PatchEmbed<S>(ps, name + ".seg_embed", channels, hw, cfg.patch, cfg.embed_dim);
        depatch = DePatchify<S>(ps, name + ".depatch", channels, hw, cfg.patch, cfg.embed_dim);
        for (int64_t l = 0; l < cfg.layers; ++l)
            layers.emplace_back(ps, name + ".layer" + std::to_string(l), cfg);
        if (mode == VitMode::mprvit) {
            conv_pre = Conv2dLayer<S>(ps, name + ".conv_pre", channels, channels, 3, 1);
            conv_post = Conv2dLayer<S>(ps, name + ".conv_post", channels, channels, 3, 1);
        }
    }

    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& seg_latent) const {
        if (mode == VitMode::tavit && !seg_latent)
            throw ContractError("tavit ViT block requires a segmentation latent");
        Tensor<S> h = x;
        if (mode == VitMode::mprvit) h = relu(conv_pre(h));
        auto tokens = embed(h);
        if (mode == VitMode::tavit) {
            auto seg_tokens = seg_embed(seg_latent);
            for (auto& layer : layers) tokens = layer.forward_adaln(tokens, seg_tokens);
        } else {
            for (auto& layer : layers) tokens = layer.forward_plain(tokens);
        }
        Tensor<S> y = depatch(tokens);
        if (mode == VitMode::mprvit) y = conv_post(y);
        return add(y, x);
    }
};

}  // namespace tavit
