#pragma once

// Headless self-checks behind `ugt verify`: gradient fidelity of the joint
// loss, metric and LightGCN reference comparisons, ITC closed forms and
// checkpoint integrity. Each check yields one row of the printed table.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ugt/checkpoint.hpp"
#include "ugt/data.hpp"
#include "ugt/errors.hpp"
#include "ugt/eval.hpp"
#include "ugt/fusion.hpp"
#include "ugt/grad_check.hpp"
#include "ugt/model.hpp"
#include "ugt/train.hpp"

namespace ugt {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string expected;
    std::string actual;
    double seconds = 0.0;
};

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

inline CheckResult timed(const std::string& name, const std::function<CheckResult()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
        r = body();
    } catch (const std::exception& e) {
        r.passed = false;
        r.actual = std::string("exception: ") + e.what();
    }
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient fidelity

/// Small end-to-end instance: `users` x `items`, every user with at least
/// one positive and one negative.
struct ToyInstance {
    SplitDataset split;
    ModelConfig config;
    ModelParams params;
    ModelInputs inputs;
    InteractionGraph graph;
    std::vector<BprTriple> triples;
};

inline ToyInstance make_toy_instance(std::uint64_t seed, std::size_t users = 5, std::size_t items = 5,
                                     std::size_t embed_dim = 8) {
    SyntheticConfig sc;
    sc.num_users = users;
    sc.num_items = items;
    sc.latent_dim = 2;
    sc.density = 0.4;
    sc.seed = seed;
    sc.image_size = 4;
    sc.channels = 1;
    sc.vocab_size = 12;
    sc.max_text_len = 4;
    Dataset ds = generate_synthetic(sc);
    // Guarantee one positive and one negative per user.
    std::set<Interaction> edges(ds.interactions.begin(), ds.interactions.end());
    for (Id u = 0; u < users; ++u) {
        std::size_t n = 0;
        for (Id i = 0; i < items; ++i) n += edges.count({u, i});
        if (n == 0) edges.insert({u, static_cast<Id>(u % items)});
        if (n == items) edges.erase({u, static_cast<Id>(u % items)});
    }
    ds.interactions.assign(edges.begin(), edges.end());

    ToyInstance t;
    t.split = split(ds, {1, 0, 0}, seed);
    t.config.encoder.embed_dim = embed_dim;
    t.config.encoder.num_heads = 2;
    t.config.encoder.ffn_dim = 2 * embed_dim;
    t.config.encoder.itc_dim = 4;
    t.config.encoder.num_layers = 1;
    t.config.encoder.patch_size = 2;
    t.config.encoder.image_size = ds.image_size;
    t.config.encoder.channels = ds.channels;
    t.config.encoder.vocab_size = ds.vocab_size;
    t.config.encoder.max_text_len = 4;
    t.config.gnn_layers = 1;
    t.config.epsilon = 0.4;
    t.params = init_model(t.config, users, items, seed);
    t.inputs = prepare_inputs(ds, t.config);
    t.graph = build_graph(t.split);
    std::mt19937_64 rng(seed);
    t.triples = sample_triples(t.graph, 8, rng).triples;
    return t;
}

/// Central-difference check of the full joint loss over every trainable tensor.
inline GradCheckReport joint_loss_grad_check(std::uint64_t seed, double step = 1e-4, double tolerance = 1e-4,
                                             double temperature = 0.07) {
    ToyInstance t = make_toy_instance(seed);
    std::vector<NamedParam> named = trainable_params(t.params, t.config);
    std::vector<Tensor> tensors;
    for (const auto& p : named) tensors.push_back(p.tensor);
    std::vector<std::size_t> items = position_range(t.split.dataset.num_items);
    auto loss = [&] {
        const ForwardOutput out = forward(t.params, t.config, t.inputs, t.graph);
        Tensor bpr = bpr_loss(t.triples, out.embeddings.user, out.embeddings.item);
        Tensor itc = itc_loss(items, out.features, t.params.encoder, temperature);
        return joint_loss(bpr, itc, named, 0.4, 1e-3);
    };
    GradCheckOptions opt;
    opt.step = step;
    opt.tolerance = tolerance;
    return grad_check(loss, tensors, opt);
}

// ---------------------------------------------------------------------------
// Metric reference

namespace detail {

/// Straightforward evaluator: full sort with an explicit comparator, then
/// counting hits with a linear scan.
inline std::pair<double, double> reference_metrics(const std::vector<double>& scores, const std::vector<bool>& excluded,
                                                   const std::vector<bool>& positive, std::size_t k) {
    std::vector<Id> order;
    for (Id i = 0; i < scores.size(); ++i)
        if (!excluded[i]) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](Id a, Id b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
    std::size_t total = 0;
    for (bool p : positive) total += p ? 1 : 0;
    std::size_t hits = 0;
    double dcg = 0.0, idcg = 0.0;
    for (std::size_t p = 0; p < k && p < order.size(); ++p)
        if (positive[order[p]]) {
            ++hits;
            dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
        }
    for (std::size_t p = 0; p < k && p < total; ++p) idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    return {static_cast<double>(hits) / static_cast<double>(total), dcg / idcg};
}

}  // namespace detail

/// Random instances with at most `max_items` items; counts mismatches against
/// the reference evaluator (exact comparison).
inline std::size_t metric_mismatches(std::size_t instances, std::size_t max_items, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t bad = 0;
    for (std::size_t t = 0; t < instances; ++t) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(2, max_items)(rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, n)(rng);
        Embeddings emb{1, n, 1, {1.0}, std::vector<double>(n)};
        // Coarse scores so ties occur.
        for (auto& s : emb.item) s = std::uniform_int_distribution<int>(0, 5)(rng);
        std::vector<bool> excluded(n), positive(n);
        std::vector<Id> excl, pos;
        for (Id i = 0; i < n; ++i) {
            const int roll = std::uniform_int_distribution<int>(0, 3)(rng);
            if (roll == 0) {
                excluded[i] = true;
                excl.push_back(i);
            } else if (roll == 1) {
                positive[i] = true;
                pos.push_back(i);
            }
        }
        if (pos.empty()) {
            const Id i = excl.empty() ? 0 : excl.back();
            if (!excl.empty()) {
                excl.pop_back();
                excluded[i] = false;
            }
            positive[i] = true;
            pos.push_back(i);
            std::sort(pos.begin(), pos.end());
        }
        const auto ranked = rank_items(0, emb, excl, k);
        const auto [r_ref, n_ref] = detail::reference_metrics(emb.item, excluded, positive, k);
        if (recall_at_k(ranked, pos, k) != r_ref || ndcg_at_k(ranked, pos, k) != n_ref) ++bad;
    }
    return bad;
}

// ---------------------------------------------------------------------------
// LightGCN degeneration

namespace detail {

/// Edge-list LightGCN over a stacked (users + items) table, mean readout.
inline std::pair<std::vector<double>, std::vector<double>> reference_lightgcn(std::size_t nu, std::size_t ni,
                                                                              const std::vector<Interaction>& edges,
                                                                              const std::vector<double>& table, std::size_t d,
                                                                              std::size_t layers) {
    std::vector<std::size_t> du(nu, 0), di(ni, 0);
    for (const auto& e : edges) {
        ++du[e.user];
        ++di[e.item];
    }
    std::vector<double> u(table.begin(), table.begin() + static_cast<std::ptrdiff_t>(nu * d));
    std::vector<double> it(table.begin() + static_cast<std::ptrdiff_t>(nu * d), table.end());
    std::vector<double> su = u, si = it;
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> nu_(nu * d, 0.0), ni_(ni * d, 0.0);
        for (const auto& e : edges) {
            const double c = 1.0 / std::sqrt(static_cast<double>(du[e.user]) * static_cast<double>(di[e.item]));
            for (std::size_t k = 0; k < d; ++k) {
                nu_[e.user * d + k] += c * it[e.item * d + k];
                ni_[e.item * d + k] += c * u[e.user * d + k];
            }
        }
        for (std::size_t x = 0; x < nu; ++x)
            if (du[x] == 0) std::copy_n(&u[x * d], d, &nu_[x * d]);
        for (std::size_t x = 0; x < ni; ++x)
            if (di[x] == 0) std::copy_n(&it[x * d], d, &ni_[x * d]);
        u = std::move(nu_);
        it = std::move(ni_);
        for (std::size_t k = 0; k < su.size(); ++k) su[k] += u[k];
        for (std::size_t k = 0; k < si.size(); ++k) si[k] += it[k];
    }
    for (auto& v : su) v /= static_cast<double>(layers + 1);
    for (auto& v : si) v /= static_cast<double>(layers + 1);
    return {su, si};
}

inline std::vector<Id> full_ranking(const std::vector<double>& users, const std::vector<double>& items, std::size_t d,
                                    std::size_t u) {
    const std::size_t n = items.size() / d;
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) s[i] += users[u * d + k] * items[i * d + k];
    std::vector<Id> order(n);
    for (Id i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](Id a, Id b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    return order;
}

}  // namespace detail

/// Runs the full model with epsilon = 0 and zeroed modal projections on
/// `graphs` random graphs; returns the number whose per-user rankings differ
/// from the edge-list LightGCN path.
inline std::size_t lightgcn_mismatches(std::size_t graphs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t bad = 0;
    for (std::size_t g = 0; g < graphs; ++g) {
        const std::size_t nu = std::uniform_int_distribution<std::size_t>(2, 12)(rng);
        const std::size_t ni = std::uniform_int_distribution<std::size_t>(2, 12)(rng);
        const double p = std::uniform_real_distribution<double>(0.1, 0.6)(rng);
        std::vector<Interaction> edges;
        std::bernoulli_distribution coin(p);
        for (Id u = 0; u < nu; ++u)
            for (Id i = 0; i < ni; ++i)
                if (coin(rng)) edges.push_back({u, i});

        ModelConfig cfg;
        cfg.encoder.embed_dim = 8;
        cfg.encoder.num_heads = 2;
        cfg.encoder.ffn_dim = 8;
        cfg.encoder.itc_dim = 4;
        cfg.encoder.num_layers = 1;
        cfg.encoder.patch_size = 2;
        cfg.encoder.image_size = 4;
        cfg.encoder.channels = 1;
        cfg.encoder.vocab_size = 8;
        cfg.encoder.max_text_len = 3;
        cfg.gnn_layers = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
        cfg.epsilon = 0.0;
        cfg.id_init_std = 1.0;

        Dataset ds;
        ds.num_users = nu;
        ds.num_items = ni;
        ds.vocab_size = 8;
        ds.image_size = 4;
        ds.channels = 1;
        ds.interactions = edges;
        ds.images.resize(ni * 16);
        for (auto& px : ds.images) px = std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng);
        ds.texts.resize(ni);
        for (auto& t : ds.texts) t = {static_cast<TokenId>(rng() % 8), static_cast<TokenId>(rng() % 8)};

        ModelParams params = init_model(cfg, nu, ni, rng());
        for (Tensor* t : {&params.fusion.fuse_visual, &params.fusion.fuse_textual}) {
            auto v = t->mutable_values();
            std::fill(v.begin(), v.end(), 0.0);
        }
        const InteractionGraph graph = build_graph(nu, ni, edges);
        const ModelInputs inputs = prepare_inputs(ds, cfg);
        NoGradGuard no_grad;
        const ForwardOutput out = forward(params, cfg, inputs, graph);
        const Embeddings model = Embeddings::from(out.embeddings.user, out.embeddings.item);

        const auto table = params.fusion.id_embedding.values();
        const auto [ru, ri] = detail::reference_lightgcn(nu, ni, edges, {table.begin(), table.end()}, 8, cfg.gnn_layers);
        for (std::size_t u = 0; u < nu; ++u) {
            if (detail::full_ranking(model.user, model.item, 8, u) != detail::full_ranking(ru, ri, 8, u)) {
                ++bad;
                break;
            }
        }
    }
    return bad;
}

// ---------------------------------------------------------------------------
// ITC closed forms

/// Loss with all projected embeddings equal (expected ln N).
inline double itc_coincident(std::size_t n, double temperature = 0.07) {
    std::vector<double> row(4, 0.5);
    std::vector<double> all;
    for (std::size_t i = 0; i < n; ++i) all.insert(all.end(), row.begin(), row.end());
    return itc_loss(Tensor::constant({n, 4}, all), Tensor::constant({n, 4}, all), temperature).item();
}

/// N = 2 with orthogonal unit pairs and tau = 1: S = I, each direction gives
/// -ln(e / (e + 1)).
inline double itc_two_orthogonal() {
    Tensor e = Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
    return itc_loss(e, e, 1.0).item();
}

// ---------------------------------------------------------------------------
// Checkpoint integrity

/// Saves a checkpoint, checks the round trip, then flips one payload byte and
/// expects the load to be rejected.
inline CheckResult checkpoint_corruption_check(const std::filesystem::path& dir) {
    CheckResult r;
    const auto path = dir / "verify_checkpoint.bin";
    Tensor t = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    save_checkpoint(path, {{"t", t}}, {{"kind", "verify"}});
    const Checkpoint ok = load_checkpoint(path);
    const bool round_trip = ok.tensors.at("t").values == std::vector<double>{1, 2, 3, 4, 5, 6};
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(-3, std::ios::end);
        char c = 0;
        f.get(c);
        f.seekp(-3, std::ios::end);
        f.put(static_cast<char>(c ^ 0x5A));
    }
    std::string error;
    try {
        load_checkpoint(path);
    } catch (const FormatError& e) {
        error = e.what();
    }
    std::filesystem::remove(path);
    r.passed = round_trip && !error.empty();
    r.expected = "round trip, then FormatError on corruption";
    r.actual = (round_trip ? std::string("round trip ok; ") : std::string("round trip FAILED; ")) +
               (error.empty() ? "corrupted file accepted" : "rejected: " + error);
    return r;
}

// ---------------------------------------------------------------------------

struct VerifyOptions {
    std::filesystem::path scratch = std::filesystem::temp_directory_path();
    std::filesystem::path checkpoint;  // optional: validate this file as well
    std::uint64_t seed = 0;
};

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt = {}) {
    using detail::fmt;
    std::vector<CheckResult> rows;
    rows.push_back(detail::timed("gradient check (joint loss, toy model)", [&] {
        const auto g = joint_loss_grad_check(opt.seed + 1);
        return CheckResult{"", g.passed && g.max_rel_error < 1e-4, "max rel error < 1e-4",
                           fmt(g.max_rel_error) + " over " + std::to_string(g.num_coords) + " coords"};
    }));
    rows.push_back(detail::timed("metrics vs reference evaluator", [&] {
        const std::size_t bad = metric_mismatches(1000, 50, opt.seed + 2);
        return CheckResult{"", bad == 0, "0 mismatches / 1000", std::to_string(bad) + " mismatches"};
    }));
    rows.push_back(detail::timed("LightGCN degeneration", [&] {
        const std::size_t bad = lightgcn_mismatches(100, opt.seed + 3);
        return CheckResult{"", bad == 0, "0 differing graphs / 100", std::to_string(bad) + " differing"};
    }));
    rows.push_back(detail::timed("ITC coincident embeddings = ln N", [&] {
        const double v = itc_coincident(7);
        return CheckResult{"", std::abs(v - std::log(7.0)) < 1e-9, fmt(std::log(7.0)), fmt(v)};
    }));
    rows.push_back(detail::timed("ITC two-item closed form", [&] {
        const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
        const double v = itc_two_orthogonal();
        return CheckResult{"", std::abs(v - want) < 1e-9, fmt(want), fmt(v)};
    }));
    rows.push_back(detail::timed("BPR equal scores = ln 2", [&] {
        Tensor u = Tensor::constant({1, 2}, {1.0, 0.5});
        Tensor it = Tensor::constant({2, 2}, {0.3, 0.3, 0.3, 0.3});
        const std::vector<BprTriple> t{{0, 0, 1}};
        const double v = bpr_loss(t, u, it).item();
        return CheckResult{"", std::abs(v - std::log(2.0)) < 1e-12, fmt(std::log(2.0)), fmt(v)};
    }));
    rows.push_back(detail::timed("checkpoint integrity", [&] { return checkpoint_corruption_check(opt.scratch); }));
    if (!opt.checkpoint.empty()) {
        rows.push_back(detail::timed("checkpoint " + opt.checkpoint.filename().string(), [&] {
            const Checkpoint ck = load_checkpoint(opt.checkpoint);
            return CheckResult{"", true, "loads and validates", std::to_string(ck.tensors.size()) + " tensors"};
        }));
    }
    return rows;
}

inline void print_verification(std::ostream& os, const std::vector<CheckResult>& rows) {
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    os << std::left << std::setw(static_cast<int>(w)) << "check" << "  status  expected | actual  (seconds)\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << (r.passed ? "PASS  " : "FAIL  ") << "  "
           << r.expected << " | " << r.actual << "  (" << std::fixed << std::setprecision(2) << r.seconds << "s)\n";
        os.unsetf(std::ios::fixed);
    }
}

}  // namespace ugt
