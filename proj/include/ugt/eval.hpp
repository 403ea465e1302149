#pragma once

// Full-ranking top-K evaluation (Recall@K, NDCG@K with binary relevance),
// visual/textual alignment MSE and a popularity baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugt/data.hpp"
#include "ugt/errors.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

/// Materialised user/item embedding tables; score = dot product.
struct Embeddings {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t dim = 0;
    std::vector<double> user;  // num_users x dim
    std::vector<double> item;  // num_items x dim

    static Embeddings from(const Tensor& user_emb, const Tensor& item_emb) {
        if (user_emb.cols() != item_emb.cols()) throw ShapeError("user and item embeddings differ in width");
        return {user_emb.rows(), item_emb.rows(), user_emb.cols(),
                {user_emb.values().begin(), user_emb.values().end()},
                {item_emb.values().begin(), item_emb.values().end()}};
    }

    double score(std::size_t u, std::size_t i) const {
        if (u >= num_users || i >= num_items) {
            throw ContractError("score: id out of range (" + std::to_string(u) + ", " + std::to_string(i) + ")");
        }
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += user[u * dim + k] * item[i * dim + k];
        return s;
    }
};

/// Items by descending score, ties by ascending id, `exclusions` (sorted)
/// removed. At most `max_len` entries; 0 means all candidates.
inline std::vector<Id> rank_items(std::size_t u, const Embeddings& emb, std::span<const Id> exclusions,
                                  std::size_t max_len = 0) {
    std::vector<std::pair<double, Id>> cand;
    cand.reserve(emb.num_items);
    for (std::size_t i = 0; i < emb.num_items; ++i) {
        if (std::binary_search(exclusions.begin(), exclusions.end(), static_cast<Id>(i))) continue;
        cand.emplace_back(emb.score(u, i), static_cast<Id>(i));
    }
    auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
    const std::size_t n = (max_len == 0 || max_len > cand.size()) ? cand.size() : max_len;
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(), better);
    std::vector<Id> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = cand[k].second;
    return out;
}

/// |top-K ∩ positives| / |positives|; `positives` must be sorted and non-empty.
inline double recall_at_k(std::span<const Id> ranked, std::span<const Id> positives, std::size_t k) {
    if (k == 0) throw ContractError("K must be >= 1");
    if (positives.empty()) throw ContractError("recall needs at least one positive");
    std::size_t hits = 0;
    for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p)
        if (std::binary_search(positives.begin(), positives.end(), ranked[p])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(positives.size());
}

inline double ndcg_at_k(std::span<const Id> ranked, std::span<const Id> positives, std::size_t k) {
    if (k == 0) throw ContractError("K must be >= 1");
    if (positives.empty()) throw ContractError("NDCG needs at least one positive");
    double dcg = 0.0;
    for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p)
        if (std::binary_search(positives.begin(), positives.end(), ranked[p]))
            dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    double idcg = 0.0;
    for (std::size_t p = 0; p < std::min(k, positives.size()); ++p) idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    return dcg / idcg;
}

/// Mean over items of ||h_v - h_t||^2 / d. Inputs are |I| x d row tables.
inline double alignment_mse(std::span<const double> visual, std::span<const double> textual, std::size_t dim) {
    if (visual.size() != textual.size() || dim == 0 || visual.size() % dim != 0) {
        throw ShapeError("alignment_mse: mismatched embedding tables");
    }
    const std::size_t n = visual.size() / dim;
    if (n == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            const double diff = visual[i * dim + k] - textual[i * dim + k];
            sq += diff * diff;
        }
        total += sq / static_cast<double>(dim);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

enum class EvalTarget { validation, test, train };

struct UserMetrics {
    Id user = 0;
    std::size_t num_positives = 0;
    std::vector<double> recall, ndcg;  // per K
};

struct MetricsReport {
    std::vector<std::size_t> ks;
    std::vector<double> recall, ndcg;  // macro averages per K
    std::optional<double> alignment_mse;      // ITC-projected unit vectors
    std::optional<double> alignment_mse_raw;  // encoder output space
    std::size_t num_users = 0;
    std::vector<UserMetrics> per_user;
    nlohmann::json config = nlohmann::json::object();
    double wall_clock_seconds = 0.0;

    double recall_at(std::size_t k) const {
        for (std::size_t j = 0; j < ks.size(); ++j)
            if (ks[j] == k) return recall[j];
        throw ContractError("K=" + std::to_string(k) + " was not evaluated");
    }
    double ndcg_at(std::size_t k) const {
        for (std::size_t j = 0; j < ks.size(); ++j)
            if (ks[j] == k) return ndcg[j];
        throw ContractError("K=" + std::to_string(k) + " was not evaluated");
    }
};

namespace detail {

inline std::vector<std::vector<Id>> items_by_user(std::size_t num_users, std::span<const Interaction> pairs) {
    std::vector<std::vector<Id>> out(num_users);
    for (const auto& e : pairs) out.at(e.user).push_back(e.item);
    for (auto& v : out) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    return out;
}

}  // namespace detail

/// Macro-averaged metrics over users with at least one held-out positive.
/// Training positives are excluded from rankings (except when evaluating on
/// the training set itself); held-out items without any training interaction
/// (cold items) are not counted as positives.
inline MetricsReport evaluate(const SplitDataset& split, const Embeddings& emb, EvalTarget target = EvalTarget::test,
                              std::vector<std::size_t> ks = {10, 20}) {
    if (ks.empty()) throw ContractError("no cutoffs requested");
    const std::size_t nu = split.dataset.num_users;
    const auto train = detail::items_by_user(nu, split.train);
    std::vector<bool> warm(split.dataset.num_items, false);
    for (const auto& e : split.train) warm[e.item] = true;

    std::span<const Interaction> held = target == EvalTarget::test         ? std::span<const Interaction>(split.test)
                                        : target == EvalTarget::validation ? std::span<const Interaction>(split.validation)
                                                                           : std::span<const Interaction>(split.train);
    auto positives = detail::items_by_user(nu, held);
    const std::size_t max_k = *std::max_element(ks.begin(), ks.end());

    MetricsReport report;
    report.ks = ks;
    report.recall.assign(ks.size(), 0.0);
    report.ndcg.assign(ks.size(), 0.0);
    const std::vector<Id> none;
    for (std::size_t u = 0; u < nu; ++u) {
        auto& pos = positives[u];
        if (target != EvalTarget::train) std::erase_if(pos, [&](Id i) { return !warm[i]; });
        if (pos.empty() || train[u].empty()) continue;
        const auto& excl = target == EvalTarget::train ? none : train[u];
        const auto ranked = rank_items(u, emb, excl, max_k);
        UserMetrics m{static_cast<Id>(u), pos.size(), {}, {}};
        for (std::size_t k : ks) {
            m.recall.push_back(recall_at_k(ranked, pos, k));
            m.ndcg.push_back(ndcg_at_k(ranked, pos, k));
        }
        report.per_user.push_back(std::move(m));
    }
    if (report.per_user.empty()) throw ReportError("no users with held-out positives to evaluate");
    report.num_users = report.per_user.size();
    for (const auto& m : report.per_user)
        for (std::size_t j = 0; j < ks.size(); ++j) {
            report.recall[j] += m.recall[j];
            report.ndcg[j] += m.ndcg[j];
        }
    for (std::size_t j = 0; j < ks.size(); ++j) {
        report.recall[j] /= static_cast<double>(report.num_users);
        report.ndcg[j] /= static_cast<double>(report.num_users);
    }
    return report;
}

/// Scores every item by its training interaction count.
inline Embeddings popularity_scores(const SplitDataset& split) {
    Embeddings emb;
    emb.num_users = split.dataset.num_users;
    emb.num_items = split.dataset.num_items;
    emb.dim = 1;
    emb.user.assign(emb.num_users, 1.0);
    emb.item.assign(emb.num_items, 0.0);
    for (const auto& e : split.train) emb.item[e.item] += 1.0;
    return emb;
}

inline MetricsReport popularity_baseline(const SplitDataset& split, EvalTarget target = EvalTarget::test,
                                         std::vector<std::size_t> ks = {10, 20}) {
    return evaluate(split, popularity_scores(split), target, std::move(ks));
}

// ---------------------------------------------------------------------------
// Report files

inline nlohmann::ordered_json metrics_json(const MetricsReport& r) {
    nlohmann::ordered_json m;
    for (std::size_t j = 0; j < r.ks.size(); ++j) m["recall@" + std::to_string(r.ks[j])] = r.recall[j];
    for (std::size_t j = 0; j < r.ks.size(); ++j) m["ndcg@" + std::to_string(r.ks[j])] = r.ndcg[j];
    if (r.alignment_mse) m["alignment_mse"] = *r.alignment_mse;
    if (r.alignment_mse_raw) m["alignment_mse_raw"] = *r.alignment_mse_raw;
    m["num_users"] = r.num_users;
    return m;
}

/// report.json: metrics, config echo, run id, seed and wall-clock.
inline void write_report_json(const std::filesystem::path& path, const MetricsReport& r, const std::string& run_id,
                              std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::ordered_json j;
    j["run_id"] = run_id;
    j["seed"] = seed;
    j["metrics"] = metrics_json(r);
    j["config"] = r.config;
    for (const auto& [k, v] : extra.items()) j[k] = v;
    nlohmann::ordered_json users = nlohmann::ordered_json::array();
    for (const auto& m : r.per_user) users.push_back({{"user", m.user}, {"positives", m.num_positives}, {"recall", m.recall}, {"ndcg", m.ndcg}});
    j["per_user"] = std::move(users);
    j["wall_clock_seconds"] = r.wall_clock_seconds;
    std::ofstream os(path);
    os << j.dump(2) << '\n';
}

/// metrics.csv: one row per (K, metric, value).
inline void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& r) {
    std::ofstream os(path);
    os << "K,metric,value\n";
    os.precision(17);
    for (std::size_t j = 0; j < r.ks.size(); ++j) {
        os << r.ks[j] << ",recall," << r.recall[j] << '\n';
        os << r.ks[j] << ",ndcg," << r.ndcg[j] << '\n';
    }
    if (r.alignment_mse) os << ",alignment_mse," << *r.alignment_mse << '\n';
    if (r.alignment_mse_raw) os << ",alignment_mse_raw," << *r.alignment_mse_raw << '\n';
}

}  // namespace ugt
