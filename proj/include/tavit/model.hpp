#pragma once

// MPR-ViT / TA-ViT assembly: residual encoder, conv+ViT information
// bottleneck with shared ViT weights, mirrored decoder, tanh head.

#include <map>
#include <sstream>

#include "tavit/nn.hpp"

namespace tavit {

struct ModelConfig {
    int64_t in_channels = 2;
    int64_t base_width = 64;           // encoder channel plan: base, 2*base, bottleneck
    int64_t bottleneck_channels = 256;
    int64_t image_size = 120;
    ConditioningMode cond = ConditioningMode::none;
    TransformerConfig tf;

    void validate() const {
        if (in_channels != 1 && in_channels != 2)
            throw ContractError("in_channels must be 1 or 2");
        if (base_width <= 0 || bottleneck_channels <= 0)
            throw ContractError("channel widths must be positive");
        if (image_size <= 0 || image_size % 4 != 0)
            throw ContractError("image_size must be a positive multiple of 4, got " +
                                std::to_string(image_size));
        tf.validate();
        if ((image_size / 4) % tf.patch != 0)
            throw ContractError("patch size must divide the bottleneck extent " +
                                std::to_string(image_size / 4));
    }

    int64_t bottleneck_size() const { return image_size / 4; }

    std::string serialize() const {
        std::ostringstream os;
        os << "in_channels = " << in_channels << "\n"
           << "base_width = " << base_width << "\n"
           << "bottleneck_channels = " << bottleneck_channels << "\n"
           << "image_size = " << image_size << "\n"
           << "cond = " << (cond == ConditioningMode::adaln_zero ? "adaln_zero" : "none") << "\n"
           << "embed_dim = " << tf.embed_dim << "\n"
           << "heads = " << tf.heads << "\n"
           << "layers = " << tf.layers << "\n"
           << "mlp_ratio = " << tf.mlp_ratio << "\n"
           << "patch = " << tf.patch << "\n"
           << "tile = " << tf.tile << "\n"
           << "use_tiled = " << (tf.use_tiled ? 1 : 0) << "\n"
           << "gelu_mlp = " << (tf.gelu_mlp ? 1 : 0) << "\n"
           << "layernorm_sqrt = " << (tf.layernorm_sqrt ? 1 : 0) << "\n";
        return os.str();
    }

    static ModelConfig deserialize(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                s.erase(0, s.find_first_not_of(" \t"));
                auto e = s.find_last_not_of(" \t\r");
                s.erase(e == std::string::npos ? 0 : e + 1);
                return s;
            };
            kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        ModelConfig c;
        auto geti = [&](const std::string& k, int64_t dflt) {
            auto it = kv.find(k);
            return it == kv.end() ? dflt : std::stoll(it->second);
        };
        c.in_channels = geti("in_channels", c.in_channels);
        c.base_width = geti("base_width", c.base_width);
        c.bottleneck_channels = geti("bottleneck_channels", c.bottleneck_channels);
        c.image_size = geti("image_size", c.image_size);
        c.cond = kv.count("cond") && kv["cond"] == "adaln_zero" ? ConditioningMode::adaln_zero
                                                                : ConditioningMode::none;
        c.tf.embed_dim = geti("embed_dim", c.tf.embed_dim);
        c.tf.heads = geti("heads", c.tf.heads);
        c.tf.layers = geti("layers", c.tf.layers);
        c.tf.mlp_ratio = geti("mlp_ratio", c.tf.mlp_ratio);
        c.tf.patch = geti("patch", c.tf.patch);
        c.tf.tile = geti("tile", c.tf.tile);
        c.tf.use_tiled = geti("use_tiled", 1) != 0;
        c.tf.gelu_mlp = geti("gelu_mlp", 1) != 0;
        c.tf.layernorm_sqrt = geti("layernorm_sqrt", 0) != 0;
        return c;
    }
};

template <typename S>
class Model {
public:
    ModelConfig cfg;
    ParamStore<S> store;

    Model(const ModelConfig& cfg_, uint64_t root_seed) : cfg(cfg_) {
        cfg.validate();
        store.root_seed = root_seed;
        const int64_t c1 = cfg.base_width, c2 = 2 * cfg.base_width, c3 = cfg.bottleneck_channels;
        enc_[0] = CombinedResidualBlock<S>(store, "enc.cb0", cfg.in_channels, c1, 7, 1, false);
        enc_[1] = CombinedResidualBlock<S>(store, "enc.cb1", c1, c2, 3, 2, false);
        enc_[2] = CombinedResidualBlock<S>(store, "enc.cb2", c2, c3, 3, 2, false);
        for (int i = 0; i < 3; ++i)
            bneck_conv_[i] = ConvBlock<S>(store, "bneck.cb" + std::to_string(i), c3);
        const VitMode vm = (cfg.cond == ConditioningMode::adaln_zero) ? VitMode::tavit : VitMode::mprvit;
        // one parameter set, referenced at both ViT sites
        vit_ = std::make_shared<VitBlock<S>>(store, "vit", vm, c3, cfg.bottleneck_size(), cfg.tf);
        dec_[0] = CombinedResidualBlock<S>(store, "dec.cb0", c3, c2, 3, 1, true);
        dec_[1] = CombinedResidualBlock<S>(store, "dec.cb1", c2, c1, 3, 1, true);
        dec_[2] = CombinedResidualBlock<S>(store, "dec.cb2", c1, c1, 3, 1, false);
        head_ = Conv2dLayer<S>(store, "head", c1, 1, 7, 1);
        // Global residual: 1x1 projection of the model input added to the
        // pre-tanh activation. The head conv is zero-initialized and the
        // projection starts as the identity on channel 0, so a fresh model
        // outputs exactly tanh(x[:,0]) and training learns corrections.
        std::fill(head_.w->data.begin(), head_.w->data.end(), S(0));
        in_proj_ = Conv2dLayer<S>(store, "in_proj", cfg.in_channels, 1, 1, 1);
        std::fill(in_proj_.w->data.begin(), in_proj_.w->data.end(), S(0));
        in_proj_.w->data[0] = S(1);
    }

    bool is_conditioned() const { return cfg.cond == ConditioningMode::adaln_zero; }

    // Encoder + information bottleneck; returns the latent tap (post final
    // conv-block skip). When `taps` is given, the encoder stage outputs are
    // stored for the decoder's long skip connections.
    Tensor<S> forward_bottleneck(const Tensor<S>& x, const Tensor<S>& seg_latent,
                                 bool training, bool bypass_vit = false,
                                 Tensor<S>* taps = nullptr) {
        check_input(x, seg_latent);
        Tensor<S> h = x;
        for (int i = 0; i < 3; ++i) {
            h = enc_[i].forward(h, training);
            if (taps && i < 2) taps[i] = h;
        }
        h = bneck_conv_[0].forward(h, training);
        if (!bypass_vit) h = vit_->forward(h, seg_latent);
        h = bneck_conv_[1].forward(h, training);
        if (!bypass_vit) h = vit_->forward(h, seg_latent);  // same seg tokens into both blocks
        h = bneck_conv_[2].forward(h, training);
        return h;
    }

    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& seg_latent = nullptr,
                      bool training = false, bool bypass_vit = false) {
        Tensor<S> taps[2];  // encoder stage outputs at full and half resolution
        Tensor<S> h = forward_bottleneck(x, seg_latent, training, bypass_vit, taps);
        // mirrored decoder with parameter-free long skips from the encoder
        h = add(dec_[0].forward(h, training), taps[1]);
        h = add(dec_[1].forward(h, training), taps[0]);
        h = dec_[2].forward(h, training);
        return tanh_op(add(head_(h), in_proj_(x)));
    }

    // Bottleneck activations for a constructed (typically identity-trained)
    // encoder; the decoder is not executed.
    Tensor<S> extract_latent(const Tensor<S>& seg_image) {
        return forward_bottleneck(seg_image, nullptr, /*training=*/false);
    }

    // Unique parameter count: shared tensors are counted once.
    int64_t parameter_count() const {
        int64_t n = 0;
        for (auto& [name, t] : store.params) n += t->numel();
        return n;
    }
    int64_t transformer_parameter_count() const {
        int64_t n = 0;
        for (auto& [name, t] : store.params)
            if (name.rfind("vit.", 0) == 0) n += t->numel();
        return n;
    }

private:
    void check_input(const Tensor<S>& x, const Tensor<S>& seg_latent) const {
        if (x->shape.size() != 4 || x->shape[1] != cfg.in_channels ||
            x->shape[2] != cfg.image_size || x->shape[3] != cfg.image_size)
            throw ContractError("model expects input (B," + std::to_string(cfg.in_channels) + "," +
                                std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                                "), got " + shape_str(x->shape));
        if (is_conditioned() && !seg_latent)
            throw ContractError("TA-ViT forward requires a segmentation latent");
        if (!is_conditioned() && seg_latent)
            throw ContractError("unconditioned model given a segmentation latent");
        if (seg_latent) {
            const int64_t bs = cfg.bottleneck_size();
            if (seg_latent->shape.size() != 4 || seg_latent->shape[0] != x->shape[0] ||
                seg_latent->shape[1] != cfg.bottleneck_channels ||
                seg_latent->shape[2] != bs || seg_latent->shape[3] != bs)
                throw ContractError("segmentation latent shape " + shape_str(seg_latent->shape) +
                                    " does not match (B," + std::to_string(cfg.bottleneck_channels) +
                                    "," + std::to_string(bs) + "," + std::to_string(bs) + ")");
        }
    }

    CombinedResidualBlock<S> enc_[3];
    ConvBlock<S> bneck_conv_[3];
    std::shared_ptr<VitBlock<S>> vit_;
    CombinedResidualBlock<S> dec_[3];
    Conv2dLayer<S> head_;
    Conv2dLayer<S> in_proj_;
};

inline ModelConfig mprvit_config(int64_t in_channels, int64_t image_size, int64_t base_width,
                                 int64_t bottleneck, const TransformerConfig& tf) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.image_size = image_size;
    c.base_width = base_width;
    c.bottleneck_channels = bottleneck;
    c.cond = ConditioningMode::none;
    c.tf = tf;
    c.tf.cond = ConditioningMode::none;
    return c;
}

inline ModelConfig tavit_config(int64_t in_channels, int64_t image_size, int64_t base_width,
                                int64_t bottleneck, const TransformerConfig& tf) {
    ModelConfig c = mprvit_config(in_channels, image_size, base_width, bottleneck, tf);
    c.cond = ConditioningMode::adaln_zero;
    c.tf.cond = ConditioningMode::adaln_zero;
    return c;
}

template <typename S>
Model<S> build_mprvit(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.cond != ConditioningMode::none)
        throw ContractError("build_mprvit requires conditioning mode none");
    return Model<S>(cfg, seed);
}

template <typename S>
Model<S> build_tavit(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.cond != ConditioningMode::adaln_zero)
        throw ContractError("build_tavit requires conditioning mode adaln_zero");
    return Model<S>(cfg, seed);
}

// Identity-trained MPR-ViT whose latent tap provides the compressed
// segmentation representation.
template <typename S>
Model<S> build_latent_encoder(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.in_channels != 1)
        throw ContractError("latent encoder requires a single input channel");
    return build_mprvit<S>(cfg, seed);
}

}  // namespace tavit
