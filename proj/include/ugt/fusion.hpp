#pragma once

// Unified GNN over the user-item graph.
//
// ID stream (LightGCN, symmetric normalisation):
//   x_u(l) = sum_{i in N_u} x_i(l-1) / sqrt(|N_u||N_i|)        (and mirrored for items)
//
// Modal stream, seeded with the attentively fused item features and the
// degree-normalised mean of them for users:
//   m_i(l) = (1 + eps) m_i(l-1) + sum_{u in N_i} m_u(l-1) / sqrt(|N_u||N_i|)
//
// Per-layer unified output x_i(l) = m_i(l) + x_i-id(l), where x_i-id(l) is the
// neighbour aggregate of the ID stream. The readout is the mean over layers
// of both streams, summed per node.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ugt/data.hpp"
#include "ugt/encoder.hpp"
#include "ugt/errors.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

struct InteractionGraph {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<Interaction> edges;  // sorted, unique
    std::vector<std::size_t> user_degree, item_degree;
    std::vector<double> coefficients;  // 1/sqrt(|N_u||N_i|) per edge
    std::vector<std::vector<Id>> user_items;  // sorted adjacency lists
    Tensor user_from_item;   // |U| x |I| normalised adjacency (constant)
    Tensor item_from_user;   // its transpose
    Tensor user_item_mean;   // |U| x |I|, row-normalised by 1/|N_u|

    bool has_edge(Id u, Id i) const {
        const auto& items = user_items.at(u);
        return std::binary_search(items.begin(), items.end(), i);
    }
};

inline InteractionGraph build_graph(std::size_t num_users, std::size_t num_items, std::span<const Interaction> edges) {
    InteractionGraph g;
    g.num_users = num_users;
    g.num_items = num_items;
    g.edges.assign(edges.begin(), edges.end());
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    g.user_degree.assign(num_users, 0);
    g.item_degree.assign(num_items, 0);
    g.user_items.assign(num_users, {});
    for (const auto& e : g.edges) {
        if (e.user >= num_users || e.item >= num_items) throw ContractError("edge references unknown node");
        ++g.user_degree[e.user];
        ++g.item_degree[e.item];
        g.user_items[e.user].push_back(e.item);
    }
    std::vector<double> adj(num_users * num_items, 0.0), adj_t(num_items * num_users, 0.0),
        mean(num_users * num_items, 0.0);
    for (const auto& e : g.edges) {
        const double c = 1.0 / std::sqrt(static_cast<double>(g.user_degree[e.user]) *
                                         static_cast<double>(g.item_degree[e.item]));
        g.coefficients.push_back(c);
        adj[e.user * num_items + e.item] = c;
        adj_t[e.item * num_users + e.user] = c;
        mean[e.user * num_items + e.item] = 1.0 / static_cast<double>(g.user_degree[e.user]);
    }
    g.user_from_item = Tensor::constant({num_users, num_items}, std::move(adj));
    g.item_from_user = Tensor::constant({num_items, num_users}, std::move(adj_t));
    g.user_item_mean = Tensor::constant({num_users, num_items}, std::move(mean));
    return g;
}

/// Training interactions only; held-out pairs never enter propagation.
inline InteractionGraph build_graph(const SplitDataset& split) {
    return build_graph(split.dataset.num_users, split.dataset.num_items, split.train);
}

// ---------------------------------------------------------------------------

struct FusionConfig {
    std::size_t embed_dim = 32;
    std::size_t gnn_layers = 2;
    double epsilon = 0.4;

    void validate() const {
        if (embed_dim == 0 || embed_dim % 2 != 0) {
            throw ConfigError("embed_dim must be even for attentive fusion, got " + std::to_string(embed_dim));
        }
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    }
};

struct FusionParams {
    Tensor id_embedding;  // (|U| + |I|) x d, users first
    Tensor alpha_logit;   // alpha = sigmoid(alpha_logit)
    Tensor fuse_visual;   // d x d/2
    Tensor fuse_textual;  // d x d/2
};

inline FusionParams init_fusion(const FusionConfig& cfg, std::size_t num_users, std::size_t num_items,
                                std::mt19937_64& rng, double id_std = 0.1) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    FusionParams p;
    p.id_embedding = detail::random_param({num_users + num_items, d}, id_std, rng);
    p.alpha_logit = Tensor::parameter({1}, {0.0});
    p.fuse_visual = detail::random_param({d, d / 2}, detail::fan_in_std(d), rng);
    p.fuse_textual = detail::random_param({d, d / 2}, detail::fan_in_std(d), rng);
    return p;
}

inline void collect_params(const FusionParams& p, std::vector<NamedParam>& out) {
    out.push_back({"fusion.id_embedding", p.id_embedding, true});
    out.push_back({"fusion.alpha_logit", p.alpha_logit, false});
    out.push_back({"fusion.fuse_visual", p.fuse_visual, true});
    out.push_back({"fusion.fuse_textual", p.fuse_textual, true});
}

// ---------------------------------------------------------------------------
// ID propagation

struct IdLayers {
    std::vector<Tensor> user, item;          // layer 0 .. L
    std::vector<Tensor> user_agg, item_agg;  // raw neighbour aggregates, index 0 unused
};

namespace detail {

/// Constant |rows| x d mask with ones on isolated rows, or an undefined
/// tensor when nothing is isolated.
inline Tensor isolated_mask(const std::vector<std::size_t>& degree, std::size_t d) {
    bool any = false;
    std::vector<double> m(degree.size() * d, 0.0);
    for (std::size_t r = 0; r < degree.size(); ++r)
        if (degree[r] == 0) {
            any = true;
            std::fill_n(&m[r * d], d, 1.0);
        }
    return any ? Tensor::constant({degree.size(), d}, std::move(m)) : Tensor();
}

inline Tensor keep_isolated(const Tensor& agg, const Tensor& previous, const Tensor& mask) {
    return mask.defined() ? add(agg, mul(previous, mask)) : agg;
}

}  // namespace detail

/// Symmetric LightGCN propagation of the stacked ID table. Isolated nodes
/// keep their layer-0 embedding at every layer.
inline IdLayers propagate_id(const InteractionGraph& graph, const Tensor& id_embedding, std::size_t num_layers) {
    if (id_embedding.rank() != 2 || id_embedding.dim(0) != graph.num_users + graph.num_items) {
        throw ShapeError("id table " + shape_str(id_embedding.shape()) + " does not cover " +
                         std::to_string(graph.num_users) + " users and " + std::to_string(graph.num_items) + " items");
    }
    const std::size_t d = id_embedding.dim(1);
    std::vector<std::size_t> user_rows = position_range(graph.num_users), item_rows(graph.num_items);
    for (std::size_t i = 0; i < graph.num_items; ++i) item_rows[i] = graph.num_users + i;
    IdLayers out;
    out.user.push_back(gather(id_embedding, user_rows));
    out.item.push_back(gather(id_embedding, item_rows));
    out.user_agg.emplace_back();
    out.item_agg.emplace_back();
    const Tensor user_mask = detail::isolated_mask(graph.user_degree, d);
    const Tensor item_mask = detail::isolated_mask(graph.item_degree, d);
    for (std::size_t l = 1; l <= num_layers; ++l) {
        Tensor ua = matmul(graph.user_from_item, out.item[l - 1]);
        Tensor ia = matmul(graph.item_from_user, out.user[l - 1]);
        out.user.push_back(detail::keep_isolated(ua, out.user[l - 1], user_mask));
        out.item.push_back(detail::keep_isolated(ia, out.item[l - 1], item_mask));
        out.user_agg.push_back(std::move(ua));
        out.item_agg.push_back(std::move(ia));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attentive fusion

/// alpha * (h_v P_v) || (1 - alpha) * (h_t P_t); rows are items, output width d.
inline Tensor attentive_fuse(const Tensor& h_visual, const Tensor& h_textual, const Tensor& alpha,
                             const Tensor& fuse_visual, const Tensor& fuse_textual) {
    if (alpha.numel() != 1) throw ShapeError("alpha must be a scalar");
    Tensor one_minus = sub(Tensor::scalar(1.0), alpha);
    return concat({mul(matmul(h_visual, fuse_visual), alpha), mul(matmul(h_textual, fuse_textual), one_minus)});
}

inline Tensor fusion_alpha(const FusionParams& p, bool learned) {
    return learned ? sigmoid(p.alpha_logit) : Tensor::scalar(0.5);
}

// ---------------------------------------------------------------------------
// Unified propagation

struct ModalLayers {
    std::vector<Tensor> user, item;          // modal stream, layer 0 .. L
    std::vector<Tensor> user_out, item_out;  // unified per-layer outputs x(l)
};

inline ModalLayers unified_propagate(const InteractionGraph& graph, const Tensor& item_vt, const IdLayers& ids,
                                     double epsilon, std::size_t num_layers) {
    if (item_vt.rank() != 2 || item_vt.dim(0) != graph.num_items) {
        throw ShapeError("joint item features " + shape_str(item_vt.shape()) + " do not match " +
                         std::to_string(graph.num_items) + " items");
    }
    if (ids.user.size() < num_layers + 1) throw ContractError("ID stream has fewer layers than requested");
    ModalLayers out;
    out.item.push_back(item_vt);
    out.user.push_back(matmul(graph.user_item_mean, item_vt));
    out.item_out.push_back(add(out.item[0], ids.item[0]));
    out.user_out.push_back(add(out.user[0], ids.user[0]));
    const double self_weight = 1.0 + epsilon;
    for (std::size_t l = 1; l <= num_layers; ++l) {
        out.item.push_back(add(scale(out.item[l - 1], self_weight), matmul(graph.item_from_user, out.user[l - 1])));
        out.user.push_back(add(scale(out.user[l - 1], self_weight), matmul(graph.user_from_item, out.item[l - 1])));
        out.item_out.push_back(add(out.item[l], ids.item_agg[l]));
        out.user_out.push_back(add(out.user[l], ids.user_agg[l]));
    }
    return out;
}

struct NodeEmbeddings {
    Tensor user;  // |U| x d
    Tensor item;  // |I| x d
};

namespace detail {

inline Tensor layer_mean(const std::vector<Tensor>& layers) {
    Tensor acc = layers[0];
    for (std::size_t l = 1; l < layers.size(); ++l) acc = add(acc, layers[l]);
    return scale(acc, 1.0 / static_cast<double>(layers.size()));
}

}  // namespace detail

/// Mean over layers of the ID stream plus mean over layers of the modal stream.
inline NodeEmbeddings final_embeddings(const IdLayers& ids, const ModalLayers& modal) {
    return {add(detail::layer_mean(ids.user), detail::layer_mean(modal.user)),
            add(detail::layer_mean(ids.item), detail::layer_mean(modal.item))};
}

/// Plain LightGCN propagation of a feature table (no self term, no ID mixing),
/// used by the per-modality streams when the unified GNN is ablated.
inline NodeEmbeddings lightgcn_readout(const InteractionGraph& graph, const Tensor& item_features,
                                       std::size_t num_layers) {
    std::vector<Tensor> users{matmul(graph.user_item_mean, item_features)}, items{item_features};
    for (std::size_t l = 1; l <= num_layers; ++l) {
        users.push_back(matmul(graph.user_from_item, items[l - 1]));
        items.push_back(matmul(graph.item_from_user, users[l - 1]));
    }
    return {detail::layer_mean(users), detail::layer_mean(items)};
}

inline double score(std::size_t u, std::size_t i, const Tensor& user_emb, const Tensor& item_emb) {
    if (u >= user_emb.rows() || i >= item_emb.rows()) {
        throw ContractError("score: id out of range (" + std::to_string(u) + ", " + std::to_string(i) + ")");
    }
    const std::size_t d = user_emb.cols();
    auto uv = user_emb.values().subspan(u * d, d);
    auto iv = item_emb.values().subspan(i * d, d);
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += uv[k] * iv[k];
    return s;
}

}  // namespace ugt
