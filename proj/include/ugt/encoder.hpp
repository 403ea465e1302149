#pragma once

// Multi-way transformer: one multi-head self-attention block shared by all
// modalities and one feed-forward expert per modality in every layer.
//
//   h(l) = LN( h(l-1) + MHSA(h(l-1)) + FFN_tag(h(l-1)) )
//
// The item embedding of a modality is the final [CLS] row of its sequence.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "ugt/data.hpp"
#include "ugt/errors.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

struct EncoderConfig {
    std::size_t embed_dim = 32;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 64;
    std::size_t itc_dim = 16;
    std::size_t num_layers = 2;
    std::size_t patch_size = 4;
    std::size_t image_size = 16;
    std::size_t channels = 3;
    std::size_t vocab_size = 256;
    std::size_t max_text_len = 16;  // longer texts are truncated
    double ln_eps = 1e-5;

    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t num_patches() const {
        const std::size_t g = image_size / patch_size;
        return g * g;
    }

    void validate() const {
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
            throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") must be a positive multiple of num_heads (" +
                              std::to_string(num_heads) + ")");
        }
        if (patch_size == 0 || image_size % patch_size != 0) {
            throw ConfigError("image_size must be divisible by patch_size");
        }
        if (ffn_dim == 0 || itc_dim == 0 || vocab_size == 0) throw ConfigError("encoder dimensions must be positive");
    }
};

struct ExpertParams {
    Tensor w1, b1, w2, b2;
};

struct MultiwayLayerParams {
    Tensor w_q, w_k, w_v, w_o;  // shared by every modality
    std::array<ExpertParams, kNumModalities> experts;
    Tensor ln_gamma, ln_beta;
};

struct EncoderParams {
    Tensor patch_proj, patch_bias;
    Tensor token_embedding;
    Tensor cls_visual, cls_textual;
    Tensor pos_visual, pos_textual;
    std::vector<MultiwayLayerParams> layers;
    Tensor itc_visual, itc_textual;  // projection heads for the contrastive loss
};

/// Parameter handle plus the metadata optimisers and checkpoints need.
struct NamedParam {
    std::string name;
    Tensor tensor;
    bool regularized = true;
};

namespace detail {

inline Tensor random_param(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = normal(rng);
    return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor zero_param(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

inline double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

inline EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    EncoderParams p;
    p.patch_proj = detail::random_param({cfg.patch_dim(), d}, detail::fan_in_std(cfg.patch_dim()), rng);
    p.patch_bias = detail::zero_param({d});
    p.token_embedding = detail::random_param({cfg.vocab_size, d}, detail::fan_in_std(d), rng);
    p.cls_visual = detail::random_param({1, d}, 0.02, rng);
    p.cls_textual = detail::random_param({1, d}, 0.02, rng);
    p.pos_visual = detail::random_param({cfg.num_patches() + 1, d}, 0.02, rng);
    p.pos_textual = detail::random_param({cfg.max_text_len + 1, d}, 0.02, rng);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        MultiwayLayerParams layer;
        layer.w_q = detail::random_param({d, d}, detail::fan_in_std(d), rng);
        layer.w_k = detail::random_param({d, d}, detail::fan_in_std(d), rng);
        layer.w_v = detail::random_param({d, d}, detail::fan_in_std(d), rng);
        layer.w_o = detail::random_param({d, d}, detail::fan_in_std(d), rng);
        for (auto& e : layer.experts) {
            e.w1 = detail::random_param({d, cfg.ffn_dim}, detail::fan_in_std(d), rng);
            e.b1 = detail::zero_param({cfg.ffn_dim});
            e.w2 = detail::random_param({cfg.ffn_dim, d}, detail::fan_in_std(cfg.ffn_dim), rng);
            e.b2 = detail::zero_param({d});
        }
        layer.ln_gamma = Tensor::parameter({d}, std::vector<double>(d, 1.0));
        layer.ln_beta = detail::zero_param({d});
        p.layers.push_back(std::move(layer));
    }
    p.itc_visual = detail::random_param({d, cfg.itc_dim}, detail::fan_in_std(d), rng);
    p.itc_textual = detail::random_param({d, cfg.itc_dim}, detail::fan_in_std(d), rng);
    return p;
}

/// Every encoder tensor; biases and layer-norm parameters are not regularised.
inline void collect_params(const EncoderParams& p, std::vector<NamedParam>& out) {
    out.push_back({"encoder.patch_proj", p.patch_proj, true});
    out.push_back({"encoder.patch_bias", p.patch_bias, false});
    out.push_back({"encoder.token_embedding", p.token_embedding, true});
    out.push_back({"encoder.cls_visual", p.cls_visual, true});
    out.push_back({"encoder.cls_textual", p.cls_textual, true});
    out.push_back({"encoder.pos_visual", p.pos_visual, true});
    out.push_back({"encoder.pos_textual", p.pos_textual, true});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        const std::string pre = "encoder.layer" + std::to_string(l) + ".";
        out.push_back({pre + "w_q", L.w_q, true});
        out.push_back({pre + "w_k", L.w_k, true});
        out.push_back({pre + "w_v", L.w_v, true});
        out.push_back({pre + "w_o", L.w_o, true});
        for (std::size_t m = 0; m < kNumModalities; ++m) {
            const std::string e = pre + "ffn_" + modality_name(static_cast<Modality>(m)) + ".";
            out.push_back({e + "w1", L.experts[m].w1, true});
            out.push_back({e + "b1", L.experts[m].b1, false});
            out.push_back({e + "w2", L.experts[m].w2, true});
            out.push_back({e + "b2", L.experts[m].b2, false});
        }
        out.push_back({pre + "ln_gamma", L.ln_gamma, false});
        out.push_back({pre + "ln_beta", L.ln_beta, false});
    }
    out.push_back({"encoder.itc_visual", p.itc_visual, true});
    out.push_back({"encoder.itc_textual", p.itc_textual, true});
}

// ---------------------------------------------------------------------------
// Input embeddings

inline std::vector<std::size_t> position_range(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t k = 0; k < n; ++k) idx[k] = k;
    return idx;
}

/// [CLS] followed by linearly projected patches, plus position embeddings.
inline Tensor embed_visual(const PatchSequence& patches, const EncoderParams& params) {
    if (patches.patch_dim != params.patch_proj.dim(0)) {
        throw ShapeError("patch_dim " + std::to_string(patches.patch_dim) + " does not match projection input " +
                         std::to_string(params.patch_proj.dim(0)));
    }
    if (patches.count() + 1 > params.pos_visual.dim(0)) {
        throw ShapeError("too many patches for the visual position table");
    }
    Tensor raw = Tensor::constant({patches.count(), patches.patch_dim}, patches.patches);
    Tensor projected = add(matmul(raw, params.patch_proj), params.patch_bias);
    Tensor seq = stack_rows({params.cls_visual, projected});
    std::vector<std::size_t> pos{0};
    for (std::size_t p : patches.positions) pos.push_back(p + 1);
    return add(seq, gather(params.pos_visual, pos));
}

/// [CLS] followed by token-table rows, plus position embeddings.
inline Tensor embed_textual(const TokenSequence& tokens, const EncoderParams& params) {
    const std::size_t vocab = params.token_embedding.dim(0);
    const std::size_t len = std::min(tokens.tokens.size(), params.pos_textual.dim(0) - 1);
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < len; ++k) {
        if (tokens.tokens[k] >= vocab) {
            throw FormatError("token " + std::to_string(tokens.tokens[k]) + " out of range for vocabulary of " +
                              std::to_string(vocab));
        }
        ids.push_back(tokens.tokens[k]);
    }
    Tensor seq = params.cls_textual;
    if (len > 0) seq = stack_rows({params.cls_textual, gather(params.token_embedding, ids)});
    return add(seq, gather(params.pos_textual, position_range(len + 1)));
}

// ---------------------------------------------------------------------------
// Multi-way layer

/// Bidirectional multi-head self-attention with 1/sqrt(d_head) scaling. When
/// `probs` is given, the per-head attention matrices are appended to it.
inline Tensor multi_head_attention(const Tensor& h, const MultiwayLayerParams& layer, std::size_t num_heads,
                                   std::vector<Tensor>* probs = nullptr) {
    const std::size_t d = h.cols();
    const std::size_t dh = d / num_heads;
    const std::vector<std::size_t> widths(num_heads, dh);
    const auto qs = split(matmul(h, layer.w_q), widths);
    const auto ks = split(matmul(h, layer.w_k), widths);
    const auto vs = split(matmul(h, layer.w_v), widths);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(num_heads);
    for (std::size_t k = 0; k < num_heads; ++k) {
        Tensor attn = softmax(scale(matmul(qs[k], transpose(ks[k])), inv_sqrt_dh), 1);
        if (probs) probs->push_back(attn);
        heads.push_back(matmul(attn, vs[k]));
    }
    Tensor merged = num_heads == 1 ? heads[0] : concat(heads);
    return matmul(merged, layer.w_o);
}

inline Tensor expert_ffn(const Tensor& h, const ExpertParams& e) {
    return add(matmul(gelu(add(matmul(h, e.w1), e.b1)), e.w2), e.b2);
}

inline Tensor multiway_layer(const Tensor& h, Modality tag, std::size_t layer_index, const EncoderParams& params,
                             const EncoderConfig& cfg, std::vector<Tensor>* probs = nullptr) {
    if (layer_index >= params.layers.size()) {
        throw ContractError("layer index " + std::to_string(layer_index) + " >= " + std::to_string(params.layers.size()));
    }
    const auto expert = static_cast<std::size_t>(tag);
    if (expert >= kNumModalities) throw ContractError("unknown modality tag " + std::to_string(expert));
    const auto& layer = params.layers[layer_index];
    Tensor attended = multi_head_attention(h, layer, cfg.num_heads, probs);
    Tensor expert_out = expert_ffn(h, layer.experts[expert]);
    return layer_norm(add(add(h, attended), expert_out), layer.ln_gamma, layer.ln_beta, cfg.ln_eps);
}

/// Runs a tagged sequence through every layer and returns its [CLS] row (1 x d).
inline Tensor encode_sequence(Tensor h, Modality tag, const EncoderParams& params, const EncoderConfig& cfg) {
    for (std::size_t l = 0; l < params.layers.size(); ++l) h = multiway_layer(h, tag, l, params, cfg);
    return gather(h, {0});
}

struct ItemEmbedding {
    Tensor visual;   // 1 x d
    Tensor textual;  // 1 x d
};

inline ItemEmbedding encode_item(const PatchSequence& patches, const TokenSequence& tokens, const EncoderParams& params,
                                 const EncoderConfig& cfg) {
    return {encode_sequence(embed_visual(patches, params), Modality::visual, params, cfg),
            encode_sequence(embed_textual(tokens, params), Modality::textual, params, cfg)};
}

inline ItemEmbedding encode_item(std::size_t item, const Dataset& dataset, const EncoderParams& params,
                                 const EncoderConfig& cfg) {
    if (item >= dataset.num_items) throw ContractError("item id " + std::to_string(item) + " out of range");
    return encode_item(patchify(dataset.image(item), dataset.image_size, dataset.channels, cfg.patch_size),
                       tokenize(dataset.texts[item], dataset.vocab_size), params, cfg);
}

/// Linear head followed by L2 normalisation (zero rows stay zero). Accepts a
/// single row or a stack of rows.
inline Tensor itc_project(const Tensor& h, Modality tag, const EncoderParams& params) {
    switch (tag) {
        case Modality::visual: return l2_normalize(matmul(h, params.itc_visual));
        case Modality::textual: return l2_normalize(matmul(h, params.itc_textual));
    }
    throw ContractError("unknown modality tag");
}

}  // namespace ugt
