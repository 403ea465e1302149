#include <gtest/gtest.h>

#include <cmath>

#include "oracle.hpp"
#include "ugt/eval.hpp"

using namespace ugt;

namespace {

/// Embeddings whose score(u, i) is exactly scores[u][i]: identity item table.
Embeddings from_scores(const std::vector<std::vector<double>>& scores) {
    Embeddings e;
    e.num_users = scores.size();
    e.num_items = scores.empty() ? 0 : scores[0].size();
    e.dim = e.num_items;
    for (const auto& row : scores) e.user.insert(e.user.end(), row.begin(), row.end());
    e.item.assign(e.num_items * e.num_items, 0.0);
    for (std::size_t i = 0; i < e.num_items; ++i) e.item[i * e.num_items + i] = 1.0;
    return e;
}

SplitDataset bare_split(std::size_t users, std::size_t items) {
    SplitDataset s;
    s.dataset.num_users = users;
    s.dataset.num_items = items;
    return s;
}

struct RandomInstance {
    SplitDataset split;
    std::vector<oracle::UserCase> cases;  // only evaluated users
    Embeddings emb;
};

/// Random split where every held-out item is warm and every evaluated user
/// has training items; scores drawn from a small set to force ties.
RandomInstance random_instance(oracle::Rng& rng) {
    RandomInstance r;
    const std::size_t users = oracle::index(rng, 1, 8), items = oracle::index(rng, 3, 50);
    r.split = bare_split(users, items);
    std::vector<std::vector<double>> scores(users, std::vector<double>(items));
    for (auto& row : scores)
        for (auto& v : row) v = static_cast<double>(oracle::index(rng, 0, 6));
    // Item 0 is warm through a dedicated user so held-out positives are never cold.
    for (Id u = 0; u < users; ++u) {
        oracle::UserCase c;
        c.scores = scores[u];
        for (Id i = 0; i < items; ++i) {
            const double p = oracle::uniform(rng, 0, 1);
            if (p < 0.2) c.train.insert(i);
        }
        for (Id i = 0; i < items; ++i)
            if (!c.train.count(i) && oracle::uniform(rng, 0, 1) < 0.2) c.held.insert(i);
        for (auto i : c.train) r.split.train.push_back({u, i});
        for (auto i : c.held) r.split.test.push_back({u, i});
        if (!c.train.empty() && !c.held.empty()) r.cases.push_back(c);
    }
    // Make every item warm via an extra user with no held-out items.
    r.split.dataset.num_users = users + 1;
    for (Id i = 0; i < items; ++i) r.split.train.push_back({static_cast<Id>(users), i});
    scores.emplace_back(items, 0.0);
    r.emb = from_scores(scores);
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ranking

TEST(RankItems, EqualScoresGiveIdOrder) {
    const auto emb = from_scores({{1, 1, 1, 1, 1}});
    EXPECT_EQ(rank_items(0, emb, {}), (std::vector<Id>{0, 1, 2, 3, 4}));
}

TEST(RankItems, ExcludedTopItemPromotesNext) {
    const auto emb = from_scores({{0.1, 0.9, 0.5}});
    const std::vector<Id> excl{1};
    EXPECT_EQ(rank_items(0, emb, excl), (std::vector<Id>{2, 0}));
}

TEST(RankItems, MatchesFullSortOracle) {
    oracle::Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s = oracle::uniform_vec(rng, 20);
        const auto emb = from_scores({s});
        oracle::UserCase c{s, {}, {}};
        const auto expected = oracle::top_k(c, 20);
        EXPECT_EQ(rank_items(0, emb, {}), std::vector<Id>(expected.begin(), expected.end()));
        EXPECT_EQ(rank_items(0, emb, {}, 5), std::vector<Id>(expected.begin(), expected.begin() + 5));
    }
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Recall, Examples) {
    const std::vector<Id> ranked{3, 1, 4, 0, 2};
    const std::vector<Id> one{3}, two{2, 3};
    EXPECT_DOUBLE_EQ(recall_at_k(ranked, one, 10), 1.0);
    EXPECT_DOUBLE_EQ(recall_at_k(ranked, two, 3), 0.5);
    EXPECT_THROW(recall_at_k(ranked, one, 0), ContractError);
}

TEST(Ndcg, Examples) {
    const std::vector<Id> ranked{3, 1, 4, 0, 2};
    const std::vector<Id> first{3}, second{1}, none{2};
    EXPECT_DOUBLE_EQ(ndcg_at_k(ranked, first, 10), 1.0);
    EXPECT_NEAR(ndcg_at_k(ranked, second, 2), 1.0 / std::log2(3.0), 1e-15);
    EXPECT_NEAR(ndcg_at_k(ranked, second, 2), 0.6309, 5e-5);
    EXPECT_DOUBLE_EQ(ndcg_at_k(ranked, none, 3), 0.0);
}

TEST(Ndcg, OneIffPositivesFillTheTop) {
    oracle::Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Id> ranked(12);
        for (Id k = 0; k < 12; ++k) ranked[k] = k;
        std::shuffle(ranked.begin(), ranked.end(), rng);
        std::vector<Id> pos;
        for (Id k = 0; k < 12; ++k)
            if (oracle::uniform(rng, 0, 1) < 0.3) pos.push_back(k);
        if (pos.empty()) continue;
        const std::size_t k = oracle::index(rng, 1, 12);
        const std::size_t need = std::min(k, pos.size());
        bool top = true;
        for (std::size_t p = 0; p < need; ++p) top = top && std::binary_search(pos.begin(), pos.end(), ranked[p]);
        EXPECT_EQ(std::abs(ndcg_at_k(ranked, pos, k) - 1.0) < 1e-12, top);
    }
}

TEST(Metrics, RecallNonDecreasingInK) {
    oracle::Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Id> ranked(15);
        for (Id k = 0; k < 15; ++k) ranked[k] = k;
        std::shuffle(ranked.begin(), ranked.end(), rng);
        std::vector<Id> pos;
        for (Id k = 0; k < 15; ++k)
            if (oracle::uniform(rng, 0, 1) < 0.25) pos.push_back(k);
        if (pos.empty()) continue;
        for (std::size_t k = 1; k < 15; ++k) {
            EXPECT_LE(recall_at_k(ranked, pos, k), recall_at_k(ranked, pos, k + 1));
        }
    }
}

TEST(AlignmentMse, Examples) {
    const std::vector<double> a{0.6, 0.8, 1.0, 0.0};
    EXPECT_EQ(alignment_mse(a, a, 2), 0.0);
    EXPECT_DOUBLE_EQ(alignment_mse(std::vector<double>{1.0}, std::vector<double>{-1.0}, 1), 4.0);
    EXPECT_THROW(alignment_mse(a, std::vector<double>{1.0}, 2), ShapeError);
}

// ---------------------------------------------------------------------------
// evaluate

TEST(Evaluate, PerfectModelOnOneUser) {
    // User 1 only exists to make item 3 warm; it has nothing held out.
    auto s = bare_split(2, 5);
    s.train = {{0, 0}, {1, 3}};
    s.test = {{0, 3}};
    const auto emb = from_scores({{0, 0, 0, 9, 0}, {0, 0, 0, 0, 0}});
    const auto r = evaluate(s, emb, EvalTarget::test, {10});
    EXPECT_EQ(r.num_users, 1u);
    EXPECT_DOUBLE_EQ(r.recall_at(10), 1.0);
    EXPECT_DOUBLE_EQ(r.ndcg_at(10), 1.0);
    EXPECT_THROW(r.recall_at(20), ContractError);
}

TEST(Evaluate, TrainingPositivesNeverRanked) {
    auto s = bare_split(2, 4);
    s.train = {{0, 0}, {1, 2}};
    s.test = {{0, 2}};
    // Item 0 outscores item 2 but is a training positive, so item 2 leads the list.
    const auto emb = from_scores({{9, 1, 5, 3}, {0, 0, 0, 0}});
    const auto r = evaluate(s, emb, EvalTarget::test, {1});
    EXPECT_DOUBLE_EQ(r.recall_at(1), 1.0);
    EXPECT_DOUBLE_EQ(r.ndcg_at(1), 1.0);
}

TEST(Evaluate, ColdItemsAreNotPositives) {
    auto s = bare_split(2, 4);
    s.train = {{0, 0}, {1, 1}};
    s.test = {{0, 1}, {0, 3}};  // item 3 has no training interaction
    const auto emb = from_scores({{0, 9, 0, 0}, {0, 0, 0, 0}});
    const auto r = evaluate(s, emb, EvalTarget::test, {1});
    EXPECT_EQ(r.per_user.at(0).num_positives, 1u);
    EXPECT_DOUBLE_EQ(r.recall_at(1), 1.0);
}

TEST(Evaluate, NoEligibleUsersIsReportError) {
    auto s = bare_split(2, 3);
    s.train = {{0, 0}};
    EXPECT_THROW(evaluate(s, from_scores({{0, 0, 0}, {0, 0, 0}})), ReportError);
}

TEST(Evaluate, MatchesOracleOnRandomInstances) {
    oracle::Rng rng(4);
    std::size_t compared = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto inst = random_instance(rng);
        if (inst.cases.empty()) continue;
        const auto r = evaluate(inst.split, inst.emb, EvalTarget::test, {1, 5, 10, 20});
        ASSERT_EQ(r.num_users, inst.cases.size());
        for (std::size_t j = 0; j < r.ks.size(); ++j) {
            double rec = 0.0, nd = 0.0;
            for (const auto& c : inst.cases) {
                rec += oracle::recall(c, r.ks[j]);
                nd += oracle::ndcg(c, r.ks[j]);
            }
            EXPECT_NEAR(r.recall[j], rec / static_cast<double>(inst.cases.size()), 1e-12);
            EXPECT_NEAR(r.ndcg[j], nd / static_cast<double>(inst.cases.size()), 1e-12);
        }
        ++compared;
    }
    EXPECT_GT(compared, 500u);
}

TEST(Evaluate, RandomScoresGiveExpectedRecall) {
    // 200 items, one held-out positive per user: E[recall@10] = 10/200.
    oracle::Rng rng(5);
    const std::size_t users = 2000, items = 200;
    auto s = bare_split(users + 1, items);
    std::vector<std::vector<double>> scores;
    for (Id u = 0; u < users; ++u) {
        s.test.push_back({u, static_cast<Id>(oracle::index(rng, 0, items - 1))});
        scores.push_back(oracle::uniform_vec(rng, items));
    }
    // One extra user owns every training edge so no evaluated user has exclusions
    // beyond an item that is never its positive.
    for (Id i = 0; i < items; ++i) s.train.push_back({static_cast<Id>(users), i});
    scores.emplace_back(items, 0.0);
    // Evaluated users need a training item of their own: give each a unique
    // dummy item outside the ranking by widening the catalogue.
    s.dataset.num_items = items + 1;
    for (auto& row : scores) row.push_back(-1e9);
    for (Id u = 0; u < users; ++u) s.train.push_back({u, static_cast<Id>(items)});
    const auto r = evaluate(s, from_scores(scores), EvalTarget::test, {10});
    const double p = 10.0 / items;
    const double sigma = std::sqrt(p * (1 - p) / users);
    EXPECT_NEAR(r.recall_at(10), p, 3 * sigma);
}

TEST(Evaluate, InvariantUnderUserRelabelling) {
    oracle::Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto inst = random_instance(rng);
        if (inst.cases.empty()) continue;
        const std::size_t nu = inst.split.dataset.num_users;
        std::vector<Id> perm(nu);
        for (Id u = 0; u < nu; ++u) perm[u] = u;
        std::shuffle(perm.begin(), perm.end(), rng);
        SplitDataset s = inst.split;
        for (auto& e : s.train) e.user = perm[e.user];
        for (auto& e : s.test) e.user = perm[e.user];
        Embeddings emb = inst.emb;
        for (Id u = 0; u < nu; ++u)
            std::copy_n(&inst.emb.user[u * emb.dim], emb.dim, &emb.user[perm[u] * emb.dim]);
        const auto a = evaluate(inst.split, inst.emb, EvalTarget::test, {5});
        const auto b = evaluate(s, emb, EvalTarget::test, {5});
        EXPECT_NEAR(a.recall[0], b.recall[0], 1e-12);
        EXPECT_NEAR(a.ndcg[0], b.ndcg[0], 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Popularity

TEST(Popularity, UniformCountsFollowIdOrder) {
    auto s = bare_split(3, 4);
    s.train = {{0, 0}, {1, 1}, {2, 2}, {2, 3}, {0, 3}, {1, 2}, {0, 1}, {1, 0}};
    s.test = {{2, 0}};
    // Item counts: 0->2, 1->2, 2->2, 3->2.
    const auto r = popularity_baseline(s, EvalTarget::test, {1});
    EXPECT_DOUBLE_EQ(r.recall_at(1), 1.0);  // user 2 excludes 2,3; item 0 wins the tie
}

TEST(Popularity, DominantItemHitsAtOne) {
    auto s = bare_split(4, 5);
    for (Id u = 0; u < 3; ++u) s.train.push_back({u, static_cast<Id>(u + 1)});
    s.train.push_back({3, 0});
    s.train.push_back({3, 4});
    s.train.push_back({3, 1});
    // Item 0 warm once; make it dominant.
    s.train.push_back({3, 2});
    for (Id u = 0; u < 3; ++u) s.test.push_back({u, 0});
    auto pop = popularity_scores(s);
    pop.item[0] = 100.0;
    const auto r = evaluate(s, pop, EvalTarget::test, {1});
    EXPECT_DOUBLE_EQ(r.recall_at(1), 1.0);
}

TEST(Popularity, MatchesOracle) {
    oracle::Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto inst = random_instance(rng);
        if (inst.cases.empty()) continue;
        std::vector<double> counts(inst.split.dataset.num_items, 0.0);
        for (const auto& e : inst.split.train) counts[e.item] += 1.0;
        for (auto& c : inst.cases) c.scores = counts;
        const auto r = popularity_baseline(inst.split, EvalTarget::test, {10});
        double rec = 0.0;
        for (const auto& c : inst.cases) rec += oracle::recall(c, 10);
        EXPECT_NEAR(r.recall[0], rec / static_cast<double>(inst.cases.size()), 1e-12);
    }
}

TEST(Reports, JsonAndCsvContainMetrics) {
    auto s = bare_split(2, 3);
    s.train = {{0, 0}, {1, 1}};
    s.test = {{0, 1}};
    auto r = evaluate(s, from_scores({{0, 1, 0}, {0, 0, 0}}), EvalTarget::test, {10, 20});
    r.alignment_mse = 0.25;
    const auto j = metrics_json(r);
    EXPECT_DOUBLE_EQ(j["recall@10"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(j["alignment_mse"].get<double>(), 0.25);
    const auto dir = std::filesystem::temp_directory_path() / "ugt_eval_reports";
    std::filesystem::create_directories(dir);
    write_report_json(dir / "report.json", r, "abc123", 7);
    write_metrics_csv(dir / "metrics.csv", r);
    std::ifstream is(dir / "report.json");
    const auto parsed = nlohmann::json::parse(is);
    EXPECT_EQ(parsed["run_id"], "abc123");
    EXPECT_EQ(parsed["seed"], 7);
    std::ifstream csv(dir / "metrics.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "K,metric,value");
}
