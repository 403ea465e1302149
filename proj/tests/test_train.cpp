#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "oracle.hpp"
#include "ugt/train.hpp"

using namespace ugt;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

/// 4 users x 4 items, each user likes two items; tiny modalities.
SplitDataset toy_split() {
    Dataset ds;
    ds.num_users = 4;
    ds.num_items = 4;
    ds.vocab_size = 8;
    ds.image_size = 4;
    ds.channels = 1;
    ds.interactions = {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 2}, {2, 3}, {3, 3}, {3, 0}};
    oracle::Rng rng(1);
    for (std::size_t k = 0; k < 4 * 16; ++k) ds.images.push_back(static_cast<float>(oracle::uniform(rng, 0, 1)));
    ds.texts = {{0, 1, 2}, {3, 4}, {5, 6, 7}, {1, 3, 5}};
    return split(ds, {1, 0, 0}, 0);
}

TrainConfig toy_config() {
    TrainConfig c;
    c.embed_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 16;
    c.itc_dim = 4;
    c.transformer_layers = 1;
    c.gnn_layers = 1;
    c.patch_size = 2;
    c.max_text_len = 4;
    c.batch_size = 64;
    c.max_epochs = 20;
    c.seed = 5;
    return c;
}

SplitDataset synthetic_split(std::size_t users, std::size_t items, double density, std::uint64_t seed) {
    SyntheticConfig sc;
    sc.num_users = users;
    sc.num_items = items;
    sc.density = density;
    sc.image_size = 4;
    sc.channels = 1;
    sc.vocab_size = 8;
    sc.latent_dim = 2;
    sc.max_text_len = 4;
    sc.seed = seed;
    return split(generate_synthetic(sc), {}, seed);
}

}  // namespace

// ---------------------------------------------------------------------------
// Sampling

TEST(SampleTriples, ForcedNegative) {
    const auto g = build_graph(1, 2, std::vector<Interaction>{{0, 0}});
    std::mt19937_64 rng(1);
    for (const auto& t : sample_triples(g, 50, rng).triples) {
        EXPECT_EQ(t.positive, 0u);
        EXPECT_EQ(t.negative, 1u);
    }
}

TEST(SampleTriples, ExactBatchSizeWithSkippedUsers) {
    // User 1 likes every item and is skipped; user 0 has a negative.
    const auto g = build_graph(2, 2, std::vector<Interaction>{{0, 0}, {1, 0}, {1, 1}});
    std::mt19937_64 rng(2);
    const auto batch = sample_triples(g, 37, rng);
    EXPECT_EQ(batch.triples.size(), 37u);
    EXPECT_GT(batch.skipped, 0u);
    for (const auto& t : batch.triples) EXPECT_EQ(t.user, 0u);
}

TEST(SampleTriples, NoValidUserIsContractError) {
    const auto g = build_graph(1, 1, std::vector<Interaction>{{0, 0}});
    std::mt19937_64 rng(3);
    EXPECT_THROW(sample_triples(g, 4, rng), ContractError);
}

TEST(SampleTriples, NegativesAreUniform) {
    // One positive, three candidate negatives; each count within 3 sigma of n/3.
    const auto g = build_graph(1, 4, std::vector<Interaction>{{0, 2}});
    std::mt19937_64 rng(4);
    const std::size_t n = 10000;
    std::map<Id, std::size_t> counts;
    for (const auto& t : sample_triples(g, n, rng).triples) ++counts[t.negative];
    EXPECT_EQ(counts.count(2), 0u);
    const double sigma = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
    for (Id j : {0u, 1u, 3u}) EXPECT_NEAR(static_cast<double>(counts[j]), n / 3.0, 3 * sigma);
}

TEST(SampleTriples, NegativesNeverTrainingPositives) {
    oracle::Rng og(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto graph = oracle::random_graph(og, 8, 8, 0.2, 0.6);
        std::vector<Interaction> edges;
        for (auto [u, i] : graph.edges) edges.push_back({u, i});
        const auto g = build_graph(graph.users, graph.items, edges);
        std::mt19937_64 rng(og());
        try {
            for (const auto& t : sample_triples(g, 100, rng).triples) {
                EXPECT_TRUE(g.has_edge(t.user, t.positive));
                EXPECT_FALSE(g.has_edge(t.user, t.negative));
            }
        } catch (const ContractError&) {
            // graph with no samplable user
        }
    }
}

// ---------------------------------------------------------------------------
// Losses

TEST(BprLoss, EqualScoresGiveLnTwo) {
    const Tensor users = Tensor::constant({1, 2}, {1, 0});
    const Tensor items = Tensor::constant({2, 2}, {0.5, 1, 0.5, -3});
    const std::vector<BprTriple> t{{0, 0, 1}};
    EXPECT_NEAR(bpr_loss(t, users, items).item(), std::log(2.0), 1e-15);
}

TEST(BprLoss, UnitMarginClosedForm) {
    const Tensor users = Tensor::constant({1, 1}, {1});
    const Tensor items = Tensor::constant({2, 1}, {1, 0});
    const std::vector<BprTriple> t{{0, 0, 1}};
    EXPECT_NEAR(bpr_loss(t, users, items).item(), -std::log(oracle::sigmoid(1.0)), 1e-15);
    EXPECT_NEAR(bpr_loss(t, users, items).item(), 0.3133, 5e-5);
}

TEST(BprLoss, LargeMarginTendsToZero) {
    const std::vector<BprTriple> t{{0, 0, 1}};
    const double loss = bpr_loss(t, Tensor::constant({1, 1}, {1}), Tensor::constant({2, 1}, {40, 0})).item();
    EXPECT_LT(loss, 1e-15);
    EXPECT_GE(loss, 0.0);
}

TEST(BprLoss, StrictlyDecreasingInMargin) {
    const std::vector<BprTriple> t{{0, 0, 1}};
    double previous = std::numeric_limits<double>::infinity();
    for (double m = -5.0; m <= 5.0; m += 0.25) {
        const double loss = bpr_loss(t, Tensor::constant({1, 1}, {1}), Tensor::constant({2, 1}, {m, 0})).item();
        EXPECT_LT(loss, previous);
        previous = loss;
    }
}

TEST(ItcLoss, IdentitySimilaritiesClosedForm) {
    const Tensor eye = Tensor::identity(2);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    EXPECT_NEAR(itc_loss(eye, eye, 1.0).item(), expected, 1e-15);
    EXPECT_NEAR(itc_loss(eye, eye, 1.0).item(), 0.3133, 5e-5);
}

TEST(ItcLoss, CoincidentEmbeddingsGiveLnN) {
    for (std::size_t n : {2u, 3u, 7u, 16u}) {
        std::vector<double> rows;
        for (std::size_t r = 0; r < n; ++r) rows.insert(rows.end(), {0.6, 0.8});
        const Tensor t = Tensor::constant({n, 2}, rows);
        EXPECT_NEAR(itc_loss(t, t, 0.07).item(), std::log(static_cast<double>(n)), 1e-12);
    }
}

TEST(ItcLoss, SeparatedSmallTemperatureTendsToZero) {
    const Tensor eye = Tensor::identity(3);
    EXPECT_LT(itc_loss(eye, eye, 0.01).item(), 1e-40);
}

TEST(ItcLoss, SingleItemIsContractError) {
    EXPECT_THROW(itc_loss(Tensor::identity(1), Tensor::identity(1), 0.07), ContractError);
}

TEST(ItcLoss, MatchesOracleSymmetricAndNonNegative) {
    oracle::Rng rng(6);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = oracle::index(rng, 2, 8), d = oracle::index(rng, 1, 5);
        const double tau = oracle::uniform(rng, 0.05, 2.0);
        std::vector<std::vector<double>> v(n), t(n);
        std::vector<double> vf, tf;
        for (std::size_t r = 0; r < n; ++r) {
            v[r] = oracle::uniform_vec(rng, d);
            t[r] = oracle::uniform_vec(rng, d);
            vf.insert(vf.end(), v[r].begin(), v[r].end());
            tf.insert(tf.end(), t[r].begin(), t[r].end());
        }
        const Tensor vt = Tensor::constant({n, d}, vf), tt = Tensor::constant({n, d}, tf);
        const double loss = itc_loss(vt, tt, tau).item();
        EXPECT_NEAR(loss, oracle::info_nce(v, t, tau), 1e-10);
        EXPECT_NEAR(loss, itc_loss(tt, vt, tau).item(), 1e-12);
        EXPECT_GE(loss, 0.0);
    }
}

TEST(ItcLoss, ExcludePositiveVariant) {
    // N=2, identity similarities, tau=1: each direction is -log(e / 1) = -1.
    const Tensor eye = Tensor::identity(2);
    EXPECT_NEAR(itc_loss(eye, eye, 1.0, true).item(), -1.0, 1e-15);
}

TEST(JointLoss, Arithmetic) {
    const Tensor bpr = Tensor::scalar(0.5), itc = Tensor::scalar(0.3);
    EXPECT_DOUBLE_EQ(joint_loss(bpr, itc, Tensor::scalar(4.0), 0.0, 0.0).item(), 0.5);
    EXPECT_DOUBLE_EQ(joint_loss(bpr, Tensor(), Tensor::scalar(4.0), 0.0, 0.0).item(), 0.5);
    EXPECT_DOUBLE_EQ(joint_loss(bpr, itc, Tensor::scalar(4.0), 1.0, 0.0).item(), 0.8);
    EXPECT_NEAR(joint_loss(bpr, itc, Tensor::scalar(4.0), 0.0, 0.1).item(), 0.9, 1e-15);
    EXPECT_THROW(joint_loss(bpr, Tensor(), Tensor::scalar(0.0), 0.5, 0.0), ContractError);
}

TEST(JointLoss, PenaltySkipsUnregularizedTensors) {
    const std::vector<NamedParam> ps{{"w", Tensor::parameter({2}, {1, 1}), true},
                                     {"b", Tensor::parameter({1}, {5}), false}};
    EXPECT_DOUBLE_EQ(l2_penalty(ps).item(), 2.0);
    EXPECT_DOUBLE_EQ(joint_loss(Tensor::scalar(0.0), Tensor(), ps, 0.0, 0.1).item(), 0.2);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradLeavesParametersAndDecaysMoments) {
    std::vector<NamedParam> ps{{"w", Tensor::parameter({2}, {1.0, -2.0}), true}};
    AdamState st(ps);
    st.m[0] = {0.5, 0.5};
    st.v[0] = {0.25, 0.25};
    ps[0].tensor.zero_grad();
    // Parameters move by the stale moments, so check with fresh state.
    AdamState fresh(ps);
    adam_step(ps, fresh, {});
    EXPECT_EQ(vals(ps[0].tensor), (std::vector<double>{1.0, -2.0}));
    adam_step(ps, st, {});
    EXPECT_DOUBLE_EQ(st.m[0][0], 0.45);
    EXPECT_DOUBLE_EQ(st.v[0][0], 0.25 * 0.999);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    for (double g : {3.0, -0.01, 250.0}) {
        Tensor w = Tensor::parameter({1}, {0.0});
        std::vector<NamedParam> ps{{"w", w, true}};
        AdamState st(ps);
        backward(scale(sum(w), g));
        adam_step(ps, st, {0.01});
        EXPECT_NEAR(w[0], -0.01 * (g > 0 ? 1 : -1), 1e-8);
    }
}

TEST(Adam, ConstantGradientApproachesLearningRateSteps) {
    Tensor w = Tensor::parameter({1}, {0.0});
    std::vector<NamedParam> ps{{"w", w, true}};
    AdamState st(ps);
    double previous = 0.0, last_step = 0.0;
    for (int t = 0; t < 2000; ++t) {
        w.zero_grad();
        backward(scale(sum(w), 0.7));
        adam_step(ps, st, {0.001});
        last_step = w[0] - previous;
        previous = w[0];
    }
    EXPECT_NEAR(last_step, -0.001, 1e-6);
}

TEST(Adam, MismatchedStateIsContractError) {
    std::vector<NamedParam> ps{{"w", Tensor::parameter({1}, {0.0}), true}};
    AdamState st;
    EXPECT_THROW(adam_step(ps, st, {}), ContractError);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParsesKeysListsAndComments) {
    std::istringstream is(
        "# comment\n"
        "lr = 0.005\n"
        "batch_size=128  # trailing\n"
        "\n"
        "ablation = ugnn, cl\n"
        "grid_epsilon = 0, 0.5,1\n"
        "itc_exclude_positive = true\n");
    const auto c = parse_config(is);
    EXPECT_DOUBLE_EQ(c.lr, 0.005);
    EXPECT_EQ(c.batch_size, 128u);
    EXPECT_FALSE(c.ablation.unified_gnn);
    EXPECT_FALSE(c.ablation.contrastive);
    EXPECT_TRUE(c.ablation.transformer);
    EXPECT_EQ(c.grid_epsilon, (std::vector<double>{0, 0.5, 1}));
    EXPECT_TRUE(c.itc_exclude_positive);
    EXPECT_EQ(c.effective_lambda_c(), 0.0);
}

TEST(Config, ErrorsCarryLineNumbers) {
    auto message = [](const std::string& text) {
        std::istringstream is(text);
        try {
            parse_config(is);
        } catch (const FormatError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(message("lr = 0.1\nbogus_key = 3\n").find("line 2"), std::string::npos);
    EXPECT_NE(message("lr = fast\n").find("line 1"), std::string::npos);
    EXPECT_NE(message("\n\nno equals sign\n").find("line 3"), std::string::npos);
    EXPECT_NE(message("ablation = dropout\n").find("line 1"), std::string::npos);
}

TEST(Config, InvariantsValidated) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.itc_temperature = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lambda_c = -0.1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.patience = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, DefaultGridsAreTenths) {
    const TrainConfig c;
    ASSERT_EQ(c.grid_epsilon.size(), 11u);
    EXPECT_DOUBLE_EQ(c.grid_epsilon.back(), 1.0);
    EXPECT_DOUBLE_EQ(c.grid_lambda_c[3], 0.3);
    EXPECT_EQ(c.patience, 50u);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, ZeroEpochsReturnsInitialState) {
    const auto s = toy_split();
    auto c = toy_config();
    c.max_epochs = 0;
    const auto r = train(s, c);
    EXPECT_TRUE(r.history.empty());
    const auto mc = c.model_config(s.dataset);
    const auto fresh = init_model(mc, 4, 4, c.seed);
    EXPECT_EQ(vals(r.state.params.fusion.id_embedding), vals(fresh.fusion.id_embedding));
}

TEST(Train, OverfitsToySet) {
    const auto s = toy_split();
    auto c = toy_config();
    c.max_epochs = 200;
    c.lr = 0.01;
    c.lambda_c = 0.0;
    c.lambda_reg = 0.0;
    c.patience = 200;
    const auto r = train(s, c);
    ASSERT_EQ(r.history.size(), 200u);
    EXPECT_LT(r.history.back().bpr, 0.1);
}

TEST(Train, DeterministicHistory) {
    const auto s = synthetic_split(12, 10, 0.3, 4);
    auto c = toy_config();
    c.max_epochs = 5;
    const auto a = train(s, c), b = train(s, c);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t k = 0; k < a.history.size(); ++k) {
        EXPECT_EQ(a.history[k].train_loss, b.history[k].train_loss);
        EXPECT_EQ(a.history[k].val_loss, b.history[k].val_loss);
        EXPECT_EQ(a.history[k].itc, b.history[k].itc);
    }
    EXPECT_EQ(vals(a.state.params.fusion.id_embedding), vals(b.state.params.fusion.id_embedding));
}

TEST(Train, ReturnedCheckpointHasLowestValidationLoss) {
    const auto s = synthetic_split(20, 15, 0.3, 8);
    auto c = toy_config();
    c.max_epochs = 30;
    c.patience = 3;
    c.lr = 0.05;
    const auto r = train(s, c);
    ASSERT_FALSE(r.history.empty());
    double min_val = std::numeric_limits<double>::infinity();
    for (const auto& e : r.history) min_val = std::min(min_val, e.val_loss);
    ASSERT_GE(r.best_epoch, 1u);
    EXPECT_EQ(r.history[r.best_epoch - 1].val_loss, min_val);
    if (r.early_stopped) EXPECT_EQ(r.history.size(), r.best_epoch + c.patience);

    // Recompute the validation loss of the restored parameters.
    const auto graph = build_graph(s);
    const auto inputs = prepare_inputs(s.dataset, r.state.model_config);
    NoGradGuard no_grad;
    const auto out = forward(r.state.params, r.state.model_config, inputs, graph);
    const double restored = bpr_loss(validation_triples(s, c.seed + 1), out.embeddings.user, out.embeddings.item).item();
    EXPECT_NEAR(restored, min_val, 1e-12);
    for (const auto& e : r.history) EXPECT_LE(restored, e.val_loss + 1e-12);
}

TEST(Train, ContrastiveAblationForcesZeroWeight) {
    const auto s = toy_split();
    auto c = toy_config();
    c.max_epochs = 3;
    c.ablation.contrastive = false;
    EXPECT_EQ(c.to_json()["lambda_c"], 0.0);
    const auto r = train(s, c);
    for (const auto& e : r.history) EXPECT_EQ(e.itc, 0.0);
}

TEST(Train, EveryAblationRuns) {
    const auto s = synthetic_split(10, 8, 0.4, 9);
    for (const char* name : {"attn_fuse", "ugnn", "trans", "cl"}) {
        auto c = toy_config();
        c.max_epochs = 2;
        disable_component(c.ablation, name);
        const auto r = train(s, c);
        EXPECT_EQ(r.history.size(), 2u) << name;
        EXPECT_TRUE(std::isfinite(r.history.back().train_loss)) << name;
    }
}

TEST(Train, BatchItemsAreDistinctAndSorted) {
    const std::vector<BprTriple> t{{0, 3, 1}, {1, 1, 2}, {2, 3, 0}};
    EXPECT_EQ(batch_items(t), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Train, ValidationTriplesAvoidKnownPositives) {
    const auto s = synthetic_split(30, 20, 0.3, 10);
    const auto triples = validation_triples(s, 3);
    EXPECT_FALSE(triples.empty());
    std::set<std::pair<Id, Id>> known;
    for (const auto& e : s.train) known.insert({e.user, e.item});
    for (const auto& e : s.validation) known.insert({e.user, e.item});
    for (const auto& t : triples) {
        EXPECT_TRUE(known.count({t.user, t.positive}));
        EXPECT_FALSE(known.count({t.user, t.negative}));
    }
    EXPECT_EQ(triples, validation_triples(s, 3));
}

// ---------------------------------------------------------------------------
// Grid search

TEST(Grid, TieRulePrefersSmallerEpsilonThenLambda) {
    std::vector<GridCell> cells;
    for (double e : {0.0, 0.5})
        for (double l : {0.0, 0.5}) cells.push_back({e, l, 0.25});
    EXPECT_EQ(select_best(cells), 0u);
    cells[3].val_recall10 = 0.3;
    EXPECT_EQ(select_best(cells), 3u);
    cells[1].val_recall10 = 0.3;
    EXPECT_EQ(select_best(cells), 1u);
    std::vector<GridCell> reversed{{0.5, 0.5, 0.1}, {0.5, 0.0, 0.1}, {0.0, 0.5, 0.1}};
    EXPECT_EQ(select_best(reversed), 2u);
    EXPECT_THROW(select_best({}), ContractError);
}

TEST(Grid, SingleCellEqualsOneTrainingRun) {
    const auto s = synthetic_split(15, 12, 0.3, 11);
    auto c = toy_config();
    c.max_epochs = 3;
    c.grid_epsilon = {0.3};
    c.grid_lambda_c = {0.2};
    const auto g = grid_search(s, c);
    ASSERT_EQ(g.cells.size(), 1u);
    EXPECT_EQ(g.best, 0u);
    EXPECT_EQ(g.cells[0].val_recall10, evaluate_cell(s, c, 0.3, 0.2));
}

TEST(Grid, ThreadedMatchesSequential) {
    const auto s = synthetic_split(15, 12, 0.3, 12);
    auto c = toy_config();
    c.max_epochs = 2;
    c.grid_epsilon = {0.0, 1.0};
    c.grid_lambda_c = {0.0, 0.5};
    const auto a = grid_search(s, c, 1), b = grid_search(s, c, 3);
    ASSERT_EQ(a.cells.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(a.cells[k].val_recall10, b.cells[k].val_recall10);
    EXPECT_EQ(a.best, b.best);
    c.grid_epsilon.clear();
    EXPECT_THROW(grid_search(s, c), ConfigError);
}
