#pragma once

// Full model: feature extractor (multi-way transformer, or frozen random maps
// when the transformer is ablated), attentive fusion and the unified GNN.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugt/checkpoint.hpp"
#include "ugt/data.hpp"
#include "ugt/encoder.hpp"
#include "ugt/errors.hpp"
#include "ugt/fusion.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

/// Component switches; `false` removes the component (Table-3 style variants).
struct Ablation {
    bool attn_fuse = true;
    bool unified_gnn = true;
    bool transformer = true;
    bool contrastive = true;

    bool full() const { return attn_fuse && unified_gnn && transformer && contrastive; }
    bool operator==(const Ablation&) const = default;
};

/// Names accepted by --ablate and the `ablation` config key.
inline void disable_component(Ablation& a, const std::string& name) {
    if (name == "attn_fuse") a.attn_fuse = false;
    else if (name == "ugnn") a.unified_gnn = false;
    else if (name == "trans") a.transformer = false;
    else if (name == "cl") a.contrastive = false;
    else throw ConfigError("unknown ablation '" + name + "' (expected attn_fuse, ugnn, trans or cl)");
}

inline std::vector<std::string> disabled_components(const Ablation& a) {
    std::vector<std::string> out;
    if (!a.attn_fuse) out.emplace_back("attn_fuse");
    if (!a.unified_gnn) out.emplace_back("ugnn");
    if (!a.transformer) out.emplace_back("trans");
    if (!a.contrastive) out.emplace_back("cl");
    return out;
}

struct ModelConfig {
    EncoderConfig encoder;
    std::size_t gnn_layers = 2;
    double epsilon = 0.4;
    Ablation ablation;
    double id_init_std = 0.1;

    FusionConfig fusion() const { return {encoder.embed_dim, gnn_layers, epsilon}; }

    void validate() const {
        encoder.validate();
        fusion().validate();
    }

    nlohmann::json to_json() const {
        return {{"embed_dim", encoder.embed_dim},   {"num_heads", encoder.num_heads},
                {"ffn_dim", encoder.ffn_dim},       {"itc_dim", encoder.itc_dim},
                {"transformer_layers", encoder.num_layers}, {"patch_size", encoder.patch_size},
                {"image_size", encoder.image_size}, {"channels", encoder.channels},
                {"vocab_size", encoder.vocab_size}, {"max_text_len", encoder.max_text_len},
                {"ln_eps", encoder.ln_eps},         {"gnn_layers", gnn_layers},
                {"epsilon", epsilon},               {"id_init_std", id_init_std},
                {"ablation", disabled_components(ablation)}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.encoder.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.encoder.num_heads = j.at("num_heads").get<std::size_t>();
        c.encoder.ffn_dim = j.at("ffn_dim").get<std::size_t>();
        c.encoder.itc_dim = j.at("itc_dim").get<std::size_t>();
        c.encoder.num_layers = j.at("transformer_layers").get<std::size_t>();
        c.encoder.patch_size = j.at("patch_size").get<std::size_t>();
        c.encoder.image_size = j.at("image_size").get<std::size_t>();
        c.encoder.channels = j.at("channels").get<std::size_t>();
        c.encoder.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.encoder.max_text_len = j.at("max_text_len").get<std::size_t>();
        c.encoder.ln_eps = j.at("ln_eps").get<double>();
        c.gnn_layers = j.at("gnn_layers").get<std::size_t>();
        c.epsilon = j.at("epsilon").get<double>();
        c.id_init_std = j.at("id_init_std").get<double>();
        for (const auto& name : j.at("ablation")) disable_component(c.ablation, name.get<std::string>());
        return c;
    }
};

/// Fixed random maps standing in for the transformer when it is ablated.
struct FrozenExtractor {
    Tensor visual_map;   // patch_dim x d
    Tensor token_table;  // vocab x d
};

struct ModelParams {
    EncoderParams encoder;
    FusionParams fusion;
    FrozenExtractor frozen;
};

inline ModelParams init_model(const ModelConfig& cfg, std::size_t num_users, std::size_t num_items, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.encoder = init_encoder(cfg.encoder, rng);
    p.fusion = init_fusion(cfg.fusion(), num_users, num_items, rng, cfg.id_init_std);
    p.frozen.visual_map = detail::random_param({cfg.encoder.patch_dim(), cfg.encoder.embed_dim},
                                               detail::fan_in_std(cfg.encoder.patch_dim()), rng)
                              .detach();
    p.frozen.token_table = detail::random_param({cfg.encoder.vocab_size, cfg.encoder.embed_dim}, 1.0, rng).detach();
    return p;
}

/// Every tensor, in checkpoint order.
inline std::vector<NamedParam> all_params(const ModelParams& p) {
    std::vector<NamedParam> out;
    collect_params(p.encoder, out);
    collect_params(p.fusion, out);
    out.push_back({"frozen.visual_map", p.frozen.visual_map, false});
    out.push_back({"frozen.token_table", p.frozen.token_table, false});
    return out;
}

/// Tensors the optimiser updates under the given ablation.
inline std::vector<NamedParam> trainable_params(const ModelParams& p, const ModelConfig& cfg) {
    std::vector<NamedParam> out;
    if (cfg.ablation.transformer) {
        collect_params(p.encoder, out);
    } else {
        out.push_back({"encoder.itc_visual", p.encoder.itc_visual, true});
        out.push_back({"encoder.itc_textual", p.encoder.itc_textual, true});
    }
    if (!cfg.ablation.contrastive) {
        std::erase_if(out, [](const NamedParam& n) { return n.name.starts_with("encoder.itc_"); });
    }
    collect_params(p.fusion, out);
    if (!cfg.ablation.attn_fuse) {
        std::erase_if(out, [](const NamedParam& n) { return n.name == "fusion.alpha_logit"; });
    }
    return out;
}

// ---------------------------------------------------------------------------

/// Per-dataset inputs that do not change during training.
struct ModelInputs {
    std::vector<PatchSequence> patches;
    std::vector<TokenSequence> tokens;
    Tensor mean_patch;     // |I| x patch_dim, mean over each item's patches
    Tensor bag_of_tokens;  // |I| x vocab, token frequencies normalised by length
};

inline ModelInputs prepare_inputs(const Dataset& ds, const ModelConfig& cfg) {
    if (ds.image_size != cfg.encoder.image_size || ds.channels != cfg.encoder.channels ||
        ds.vocab_size != cfg.encoder.vocab_size) {
        throw ConfigError("dataset modality shapes do not match the model configuration");
    }
    ModelInputs in;
    const std::size_t pd = cfg.encoder.patch_dim();
    std::vector<double> mean_patch(ds.num_items * pd, 0.0), bag(ds.num_items * ds.vocab_size, 0.0);
    for (std::size_t i = 0; i < ds.num_items; ++i) {
        in.patches.push_back(patchify(ds.image(i), ds.image_size, ds.channels, cfg.encoder.patch_size));
        in.tokens.push_back(tokenize(ds.texts[i], ds.vocab_size));
        const auto& seq = in.patches.back();
        for (std::size_t k = 0; k < seq.count(); ++k)
            for (std::size_t j = 0; j < pd; ++j) mean_patch[i * pd + j] += seq.patches[k * pd + j] / static_cast<double>(seq.count());
        const auto& text = ds.texts[i];
        for (TokenId t : text) bag[i * ds.vocab_size + t] += 1.0 / static_cast<double>(text.size());
    }
    in.mean_patch = Tensor::constant({ds.num_items, pd}, std::move(mean_patch));
    in.bag_of_tokens = Tensor::constant({ds.num_items, ds.vocab_size}, std::move(bag));
    return in;
}

struct ItemFeatures {
    Tensor visual;   // |I| x d, h_v per item
    Tensor textual;  // |I| x d, h_t per item
};

inline ItemFeatures extract_features(const ModelParams& p, const ModelConfig& cfg, const ModelInputs& in) {
    if (!cfg.ablation.transformer) {
        return {matmul(in.mean_patch, p.frozen.visual_map), matmul(in.bag_of_tokens, p.frozen.token_table)};
    }
    std::vector<Tensor> visual, textual;
    visual.reserve(in.patches.size());
    textual.reserve(in.patches.size());
    for (std::size_t i = 0; i < in.patches.size(); ++i) {
        auto h = encode_item(in.patches[i], in.tokens[i], p.encoder, cfg.encoder);
        visual.push_back(std::move(h.visual));
        textual.push_back(std::move(h.textual));
    }
    return {stack_rows(visual), stack_rows(textual)};
}

struct ForwardOutput {
    NodeEmbeddings embeddings;
    ItemFeatures features;
    Tensor alpha;
};

inline ForwardOutput forward(const ModelParams& p, const ModelConfig& cfg, const ModelInputs& in,
                             const InteractionGraph& graph) {
    ForwardOutput out;
    out.features = extract_features(p, cfg, in);
    out.alpha = fusion_alpha(p.fusion, cfg.ablation.attn_fuse);
    const IdLayers ids = propagate_id(graph, p.fusion.id_embedding, cfg.gnn_layers);
    if (cfg.ablation.unified_gnn) {
        Tensor item_vt = attentive_fuse(out.features.visual, out.features.textual, out.alpha, p.fusion.fuse_visual,
                                        p.fusion.fuse_textual);
        out.embeddings = final_embeddings(ids, unified_propagate(graph, item_vt, ids, cfg.epsilon, cfg.gnn_layers));
    } else {
        // Separate LightGCN stream per modality, concatenated at readout.
        Tensor vis = mul(matmul(out.features.visual, p.fusion.fuse_visual), out.alpha);
        Tensor txt = mul(matmul(out.features.textual, p.fusion.fuse_textual), sub(Tensor::scalar(1.0), out.alpha));
        const NodeEmbeddings rv = lightgcn_readout(graph, vis, cfg.gnn_layers);
        const NodeEmbeddings rt = lightgcn_readout(graph, txt, cfg.gnn_layers);
        out.embeddings.user = add(detail::layer_mean(ids.user), concat({rv.user, rt.user}));
        out.embeddings.item = add(detail::layer_mean(ids.item), concat({rv.item, rt.item}));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

struct LoadedModel {
    ModelConfig config;
    ModelParams params;
    nlohmann::json meta;
};

inline void save_model(const std::filesystem::path& path, const ModelParams& p, const ModelConfig& cfg,
                       nlohmann::json meta = nlohmann::json::object()) {
    meta["model_config"] = cfg.to_json();
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto& n : all_params(p)) tensors.emplace_back(n.name, n.tensor);
    save_checkpoint(path, tensors, meta);
}

inline LoadedModel load_model(const std::filesystem::path& path, std::size_t num_users, std::size_t num_items) {
    Checkpoint ck = load_checkpoint(path);
    LoadedModel out;
    try {
        out.config = ModelConfig::from_json(ck.meta.at("model_config"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad model_config: " + e.what());
    }
    out.meta = ck.meta;
    out.config.validate();
    out.params = init_model(out.config, num_users, num_items, 0);
    for (auto& n : all_params(out.params)) {
        auto it = ck.tensors.find(n.name);
        if (it == ck.tensors.end()) throw FormatError(path.string() + ": missing tensor " + n.name);
        if (it->second.shape != n.tensor.shape()) {
            throw FormatError(path.string() + ": tensor " + n.name + " has shape " + shape_str(it->second.shape) +
                              ", model expects " + shape_str(n.tensor.shape()));
        }
        auto dst = n.tensor.mutable_values();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
    return out;
}

/// Value snapshot of a parameter list (for best-checkpoint tracking).
inline std::vector<std::vector<double>> snapshot(const std::vector<NamedParam>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& n : params) out.emplace_back(n.tensor.values().begin(), n.tensor.values().end());
    return out;
}

inline void restore(std::vector<NamedParam>& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto dst = params[k].tensor.mutable_values();
        std::copy(values[k].begin(), values[k].end(), dst.begin());
    }
}

}  // namespace ugt
