#pragma once

// Joint BPR + ITC training with Adam, early stopping on validation loss and
// an (epsilon, lambda_c) grid search scored by validation Recall@10.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugt/data.hpp"
#include "ugt/dataset_io.hpp"
#include "ugt/encoder.hpp"
#include "ugt/errors.hpp"
#include "ugt/eval.hpp"
#include "ugt/fusion.hpp"
#include "ugt/model.hpp"
#include "ugt/tensor.hpp"

namespace ugt {

// ---------------------------------------------------------------------------
// Configuration

inline std::vector<double> tenths() {
    std::vector<double> v;
    for (int k = 0; k <= 10; ++k) v.push_back(k / 10.0);
    return v;
}

struct TrainConfig {
    double lr = 0.001;
    std::size_t batch_size = 2048;
    double lambda_c = 0.4;
    double lambda_reg = 1e-4;
    double epsilon = 0.4;
    double itc_temperature = 0.07;
    std::size_t max_epochs = 200;
    std::size_t patience = 50;
    std::uint64_t seed = 0;
    Ablation ablation;
    std::vector<double> grid_epsilon = tenths();
    std::vector<double> grid_lambda_c = tenths();
    bool itc_exclude_positive = false;

    std::size_t embed_dim = 32;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 64;
    std::size_t itc_dim = 16;
    std::size_t transformer_layers = 2;
    std::size_t gnn_layers = 2;
    std::size_t patch_size = 4;
    std::size_t max_text_len = 16;

    /// lambda_c after the contrastive ablation is applied.
    double effective_lambda_c() const { return ablation.contrastive ? lambda_c : 0.0; }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (lambda_c < 0.0 || lambda_reg < 0.0) throw ConfigError("lambda_c and lambda_reg must be >= 0");
        if (!(itc_temperature > 0.0)) throw ConfigError("itc_temperature must be > 0");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    }

    ModelConfig model_config(const Dataset& ds) const {
        ModelConfig mc;
        mc.encoder.embed_dim = embed_dim;
        mc.encoder.num_heads = num_heads;
        mc.encoder.ffn_dim = ffn_dim;
        mc.encoder.itc_dim = itc_dim;
        mc.encoder.num_layers = transformer_layers;
        mc.encoder.patch_size = patch_size;
        mc.encoder.max_text_len = max_text_len;
        mc.encoder.image_size = ds.image_size;
        mc.encoder.channels = ds.channels;
        mc.encoder.vocab_size = ds.vocab_size;
        mc.gnn_layers = gnn_layers;
        mc.epsilon = epsilon;
        mc.ablation = ablation;
        mc.validate();
        return mc;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["lr"] = lr;
        j["batch_size"] = batch_size;
        j["lambda_c"] = effective_lambda_c();
        j["lambda_reg"] = lambda_reg;
        j["epsilon"] = epsilon;
        j["itc_temperature"] = itc_temperature;
        j["max_epochs"] = max_epochs;
        j["patience"] = patience;
        j["seed"] = seed;
        j["ablation"] = disabled_components(ablation);
        j["grid_epsilon"] = grid_epsilon;
        j["grid_lambda_c"] = grid_lambda_c;
        j["itc_exclude_positive"] = itc_exclude_positive;
        j["embed_dim"] = embed_dim;
        j["num_heads"] = num_heads;
        j["ffn_dim"] = ffn_dim;
        j["itc_dim"] = itc_dim;
        j["transformer_layers"] = transformer_layers;
        j["gnn_layers"] = gnn_layers;
        j["patch_size"] = patch_size;
        j["max_text_len"] = max_text_len;
        return j;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "': not a number: '" + v + "'");
    }
}

inline std::size_t parse_count(const std::string& v, const std::string& key) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw FormatError("config key '" + key + "': not a non-negative integer: '" + v + "'");
    }
    return static_cast<std::size_t>(std::stoull(v));
}

inline std::vector<std::string> comma_list(const std::string& v) {
    std::vector<std::string> out;
    for (const auto& part : split_on(v, ',')) {
        const auto t = trim(part);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw FormatError("config key '" + key + "': not a boolean: '" + v + "'");
}

}  // namespace detail

/// Applies one `key = value` setting; unknown keys are rejected.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
    using namespace detail;
    auto doubles = [&](std::vector<double>& out) {
        out.clear();
        for (const auto& s : comma_list(value)) out.push_back(parse_double(s, key));
    };
    if (key == "lr") c.lr = parse_double(value, key);
    else if (key == "batch_size") c.batch_size = parse_count(value, key);
    else if (key == "lambda_c") c.lambda_c = parse_double(value, key);
    else if (key == "lambda_reg") c.lambda_reg = parse_double(value, key);
    else if (key == "epsilon") c.epsilon = parse_double(value, key);
    else if (key == "itc_temperature") c.itc_temperature = parse_double(value, key);
    else if (key == "max_epochs") c.max_epochs = parse_count(value, key);
    else if (key == "patience") c.patience = parse_count(value, key);
    else if (key == "seed") c.seed = parse_count(value, key);
    else if (key == "ablation") {
        c.ablation = {};
        for (const auto& name : comma_list(value)) {
            try {
                disable_component(c.ablation, name);
            } catch (const ConfigError& e) {
                throw FormatError(e.what());
            }
        }
    } else if (key == "grid_epsilon") doubles(c.grid_epsilon);
    else if (key == "grid_lambda_c") doubles(c.grid_lambda_c);
    else if (key == "itc_exclude_positive") c.itc_exclude_positive = parse_bool(value, key);
    else if (key == "embed_dim") c.embed_dim = parse_count(value, key);
    else if (key == "num_heads") c.num_heads = parse_count(value, key);
    else if (key == "ffn_dim") c.ffn_dim = parse_count(value, key);
    else if (key == "itc_dim") c.itc_dim = parse_count(value, key);
    else if (key == "transformer_layers") c.transformer_layers = parse_count(value, key);
    else if (key == "gnn_layers") c.gnn_layers = parse_count(value, key);
    else if (key == "patch_size") c.patch_size = parse_count(value, key);
    else if (key == "max_text_len") c.max_text_len = parse_count(value, key);
    else throw FormatError("unknown config key '" + key + "'");
}

/// Flat `key = value` lines, `#` starts a comment, lists are comma-separated.
inline TrainConfig parse_config(std::istream& is) {
    TrainConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
        try {
            apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const FormatError& e) {
            throw FormatError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config " + path.string());
    return parse_config(is);
}

// ---------------------------------------------------------------------------
// Sampling

struct BprTriple {
    Id user = 0;
    Id positive = 0;
    Id negative = 0;
    bool operator==(const BprTriple&) const = default;
};

struct TripleBatch {
    std::vector<BprTriple> triples;
    std::size_t skipped = 0;  // draws of users with no negative candidate
};

/// Uniform user among those with a training edge, uniform positive, negative
/// by rejection against the training set. Always returns `batch_size` triples.
inline TripleBatch sample_triples(const InteractionGraph& graph, std::size_t batch_size, std::mt19937_64& rng) {
    std::vector<Id> users;
    for (std::size_t u = 0; u < graph.num_users; ++u)
        if (graph.user_degree[u] > 0) users.push_back(static_cast<Id>(u));
    const bool any_valid = std::any_of(users.begin(), users.end(), [&](Id u) { return graph.user_degree[u] < graph.num_items; });
    if (!any_valid) throw ContractError("no user has both a positive and a negative item");

    std::uniform_int_distribution<std::size_t> pick_user(0, users.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_item(0, graph.num_items - 1);
    TripleBatch batch;
    batch.triples.reserve(batch_size);
    while (batch.triples.size() < batch_size) {
        const Id u = users[pick_user(rng)];
        const auto& pos = graph.user_items[u];
        if (pos.size() == graph.num_items) {
            ++batch.skipped;
            continue;
        }
        std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
        const Id i = pos[pick_pos(rng)];
        Id j = 0;
        do {
            j = static_cast<Id>(pick_item(rng));
        } while (std::binary_search(pos.begin(), pos.end(), j));
        batch.triples.push_back({u, i, j});
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Losses

/// -(1/|B|) sum log sigmoid(x_u.x_i - x_u.x_j)
inline Tensor bpr_loss(std::span<const BprTriple> triples, const Tensor& user_emb, const Tensor& item_emb) {
    if (triples.empty()) throw ContractError("bpr_loss needs at least one triple");
    std::vector<std::size_t> us, is, js;
    for (const auto& t : triples) {
        us.push_back(t.user);
        is.push_back(t.positive);
        js.push_back(t.negative);
    }
    Tensor xu = gather(user_emb, us);
    Tensor pos = sum(mul(xu, gather(item_emb, is)), 1);
    Tensor neg = sum(mul(xu, gather(item_emb, js)), 1);
    return scale(mean(log(sigmoid(sub(pos, neg)))), -1.0);
}

/// Symmetric image-text InfoNCE over unit rows: similarities S = V T^T / tau,
/// loss = (CE over rows + CE over columns) / 2 with the diagonal as targets.
/// With `exclude_positive` the softmax probability of the matched pair is
/// divided by the summed probability of the mismatched pairs instead.
inline Tensor itc_loss(const Tensor& visual_unit, const Tensor& textual_unit, double temperature,
                       bool exclude_positive = false) {
    const std::size_t n = visual_unit.rows();
    if (n < 2) throw ContractError("itc_loss needs at least two items (contrastive negatives)");
    if (visual_unit.shape() != textual_unit.shape()) throw ShapeError("itc_loss: modality tables differ in shape");
    Tensor sim = scale(matmul(visual_unit, transpose(textual_unit)), 1.0 / temperature);
    Tensor eye = Tensor::identity(n);
    Tensor off = sub(Tensor::filled({n, n}, 1.0), eye);
    auto direction = [&](std::size_t axis) {
        Tensor p = softmax(sim, axis);
        Tensor matched = log(sum(mul(p, eye), axis));
        if (exclude_positive) matched = sub(matched, log(sum(mul(p, off), axis)));
        return scale(mean(matched), -1.0);
    };
    return scale(add(direction(1), direction(0)), 0.5);
}

inline Tensor l2_penalty(const std::vector<NamedParam>& params) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& p : params)
        if (p.regularized) total = add(total, squared_norm(p.tensor));
    return total;
}

/// L = L_BPR + lambda_c L_ITC + lambda ||Theta||^2. `itc` may be undefined
/// when lambda_c is zero.
inline Tensor joint_loss(const Tensor& bpr, const Tensor& itc, const Tensor& squared_norm_theta, double lambda_c,
                         double lambda_reg) {
    Tensor total = bpr;
    if (lambda_c != 0.0) {
        if (!itc.defined()) throw ContractError("joint_loss: lambda_c > 0 but no ITC term");
        total = add(total, scale(itc, lambda_c));
    }
    if (lambda_reg != 0.0) total = add(total, scale(squared_norm_theta, lambda_reg));
    return total;
}

inline Tensor joint_loss(const Tensor& bpr, const Tensor& itc, const std::vector<NamedParam>& params, double lambda_c,
                         double lambda_reg) {
    return joint_loss(bpr, itc, lambda_reg != 0.0 ? l2_penalty(params) : Tensor::scalar(0.0), lambda_c, lambda_reg);
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;

    explicit AdamState(const std::vector<NamedParam>& params = {}) {
        for (const auto& p : params) {
            m.emplace_back(p.tensor.numel(), 0.0);
            v.emplace_back(p.tensor.numel(), 0.0);
        }
    }
};

struct AdamHyper {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update from the gradients currently held by `params`.
inline void adam_step(std::vector<NamedParam>& params, AdamState& state, const AdamHyper& h) {
    if (state.m.size() != params.size()) throw ContractError("Adam moments do not match parameter list");
    ++state.step;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& t = params[k].tensor;
        auto values = t.mutable_values();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = t.grad_at(i);
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            values[i] -= h.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double bpr = 0.0;
    double itc = 0.0;
    double val_loss = 0.0;
    double val_recall10 = 0.0;
};

struct TrainState {
    ModelConfig model_config;
    ModelParams params;
    AdamState adam;
    std::size_t epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::size_t epochs_since_improvement = 0;
};

struct TrainResult {
    TrainState state;
    std::vector<EpochLog> history;
    std::size_t best_epoch = 0;  // 0: initial parameters
    bool early_stopped = false;
};

/// ITC batch: the distinct items that appear in a set of triples.
inline std::vector<std::size_t> batch_items(std::span<const BprTriple> triples) {
    std::vector<std::size_t> items;
    for (const auto& t : triples) {
        items.push_back(t.positive);
        items.push_back(t.negative);
    }
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    return items;
}

/// Contrastive loss over the ITC-projected embeddings of `items`.
inline Tensor itc_loss(std::span<const std::size_t> items, const ItemFeatures& features, const EncoderParams& enc,
                       double temperature, bool exclude_positive = false) {
    return itc_loss(itc_project(gather(features.visual, items), Modality::visual, enc),
                    itc_project(gather(features.textual, items), Modality::textual, enc), temperature, exclude_positive);
}

/// Fixed validation triples: each held-out pair with one negative that is
/// neither a training nor a held-out positive of the user.
inline std::vector<BprTriple> validation_triples(const SplitDataset& split, std::uint64_t seed) {
    std::vector<std::vector<Id>> known(split.dataset.num_users);
    for (const auto& e : split.train) known[e.user].push_back(e.item);
    for (const auto& e : split.validation) known[e.user].push_back(e.item);
    for (auto& k : known) std::sort(k.begin(), k.end());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, split.dataset.num_items - 1);
    std::vector<BprTriple> out;
    for (const auto& e : split.validation) {
        const auto& k = known[e.user];
        if (k.size() >= split.dataset.num_items) continue;
        Id j = 0;
        do {
            j = static_cast<Id>(pick(rng));
        } while (std::binary_search(k.begin(), k.end(), j));
        out.push_back({e.user, e.item, j});
    }
    return out;
}

/// Embeddings plus projected/raw modality tables, computed without taping.
struct Materialized {
    Embeddings embeddings;
    std::vector<double> visual, textual;          // |I| x d
    std::vector<double> visual_itc, textual_itc;  // |I| x d_itc
    std::size_t dim = 0, itc_dim = 0;
    double alpha = 0.5;
};

inline Materialized materialize(const ModelParams& p, const ModelConfig& cfg, const ModelInputs& in,
                                const InteractionGraph& graph) {
    NoGradGuard no_grad;
    const ForwardOutput out = forward(p, cfg, in, graph);
    Materialized m;
    m.embeddings = Embeddings::from(out.embeddings.user, out.embeddings.item);
    m.dim = out.features.visual.cols();
    m.itc_dim = cfg.encoder.itc_dim;
    m.visual.assign(out.features.visual.values().begin(), out.features.visual.values().end());
    m.textual.assign(out.features.textual.values().begin(), out.features.textual.values().end());
    const Tensor pv = itc_project(out.features.visual, Modality::visual, p.encoder);
    const Tensor pt = itc_project(out.features.textual, Modality::textual, p.encoder);
    m.visual_itc.assign(pv.values().begin(), pv.values().end());
    m.textual_itc.assign(pt.values().begin(), pt.values().end());
    m.alpha = out.alpha.item();
    return m;
}

/// Evaluates a materialised model and fills in both alignment figures.
inline MetricsReport evaluate_model(const SplitDataset& split, const Materialized& m, EvalTarget target,
                                    std::vector<std::size_t> ks = {10, 20}) {
    MetricsReport r = evaluate(split, m.embeddings, target, std::move(ks));
    r.alignment_mse = alignment_mse(m.visual_itc, m.textual_itc, m.itc_dim);
    r.alignment_mse_raw = alignment_mse(m.visual, m.textual, m.dim);
    return r;
}

struct TrainOptions {
    std::function<void(const EpochLog&)> on_epoch;  // optional progress hook
};

/// Trains until `max_epochs` or `patience` epochs without a decrease in
/// validation loss, then restores the best-validation parameters. When the
/// split has no validation pairs the training loss is monitored instead.
inline TrainResult train(const SplitDataset& split, TrainConfig cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    if (!cfg.ablation.contrastive) cfg.lambda_c = 0.0;
    const ModelConfig mc = cfg.model_config(split.dataset);
    const ModelInputs inputs = prepare_inputs(split.dataset, mc);
    const InteractionGraph graph = build_graph(split);

    TrainResult result;
    TrainState& st = result.state;
    st.model_config = mc;
    st.params = init_model(mc, split.dataset.num_users, split.dataset.num_items, cfg.seed);
    std::vector<NamedParam> params = trainable_params(st.params, mc);
    st.adam = AdamState(params);
    if (cfg.max_epochs == 0) return result;
    if (split.train.empty()) throw ContractError("training split is empty");

    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto val_triples = validation_triples(split, cfg.seed + 1);
    const AdamHyper hyper{cfg.lr};
    const std::size_t steps = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const bool use_itc = cfg.lambda_c > 0.0;
    auto best = snapshot(params);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t s = 0; s < steps; ++s) {
            for (auto& p : params) p.tensor.zero_grad();
            const ForwardOutput out = forward(st.params, mc, inputs, graph);
            const TripleBatch batch = sample_triples(graph, cfg.batch_size, rng);
            Tensor bpr = bpr_loss(batch.triples, out.embeddings.user, out.embeddings.item);
            Tensor itc;
            if (use_itc) {
                itc = itc_loss(batch_items(batch.triples), out.features, st.params.encoder, cfg.itc_temperature,
                               cfg.itc_exclude_positive);
            }
            Tensor loss = joint_loss(bpr, itc, params, cfg.lambda_c, cfg.lambda_reg);
            if (!std::isfinite(loss.item())) {
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                                      " (bpr=" + std::to_string(bpr.item()) + ")");
            }
            backward(loss);
            adam_step(params, st.adam, hyper);
            log.train_loss += loss.item() / static_cast<double>(steps);
            log.bpr += bpr.item() / static_cast<double>(steps);
            if (use_itc) log.itc += itc.item() / static_cast<double>(steps);
        }

        {
            NoGradGuard no_grad;
            const ForwardOutput out = forward(st.params, mc, inputs, graph);
            log.val_loss = val_triples.empty() ? log.train_loss
                                               : bpr_loss(val_triples, out.embeddings.user, out.embeddings.item).item();
            if (!split.validation.empty()) {
                try {
                    log.val_recall10 =
                        evaluate(split, Embeddings::from(out.embeddings.user, out.embeddings.item), EvalTarget::validation, {10})
                            .recall[0];
                } catch (const ReportError&) {
                    log.val_recall10 = 0.0;
                }
            }
        }
        if (!std::isfinite(log.val_loss)) throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));

        st.epoch = epoch;
        result.history.push_back(log);
        if (opts.on_epoch) opts.on_epoch(log);
        if (log.val_loss < st.best_val_loss) {
            st.best_val_loss = log.val_loss;
            st.epochs_since_improvement = 0;
            result.best_epoch = epoch;
            best = snapshot(params);
        } else if (++st.epochs_since_improvement >= cfg.patience) {
            result.early_stopped = true;
            break;
        }
    }
    restore(params, best);
    return result;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& history) {
    std::ofstream os(path);
    os << "epoch,train_loss,bpr,itc,val_loss,val_recall@10\n";
    os.precision(17);
    for (const auto& e : history)
        os << e.epoch << ',' << e.train_loss << ',' << e.bpr << ',' << e.itc << ',' << e.val_loss << ',' << e.val_recall10
           << '\n';
}

// ---------------------------------------------------------------------------
// Grid search

struct GridCell {
    double epsilon = 0.0;
    double lambda_c = 0.0;
    double val_recall10 = 0.0;
};

struct GridResult {
    std::vector<GridCell> cells;  // epsilon-major, in grid order
    std::size_t best = 0;
};

/// Highest validation Recall@10; ties go to smaller epsilon, then smaller lambda_c.
inline std::size_t select_best(const std::vector<GridCell>& cells) {
    if (cells.empty()) throw ContractError("empty grid");
    std::size_t best = 0;
    for (std::size_t k = 1; k < cells.size(); ++k) {
        const auto& c = cells[k];
        const auto& b = cells[best];
        if (c.val_recall10 > b.val_recall10 ||
            (c.val_recall10 == b.val_recall10 &&
             (c.epsilon < b.epsilon || (c.epsilon == b.epsilon && c.lambda_c < b.lambda_c)))) {
            best = k;
        }
    }
    return best;
}

/// Validation Recall@10 of one (epsilon, lambda_c) configuration.
inline double evaluate_cell(const SplitDataset& split, TrainConfig cfg, double epsilon, double lambda_c) {
    cfg.epsilon = epsilon;
    cfg.lambda_c = lambda_c;
    const TrainResult r = train(split, cfg);
    const InteractionGraph graph = build_graph(split);
    const ModelInputs inputs = prepare_inputs(split.dataset, r.state.model_config);
    const Materialized m = materialize(r.state.params, r.state.model_config, inputs, graph);
    return evaluate(split, m.embeddings, EvalTarget::validation, {10}).recall[0];
}

/// One independent training run per grid cell; up to `threads` cells run
/// concurrently, results are stored by cell index.
inline GridResult grid_search(const SplitDataset& split, const TrainConfig& cfg, std::size_t threads = 1) {
    if (cfg.grid_epsilon.empty() || cfg.grid_lambda_c.empty()) throw ConfigError("grid lists must be non-empty");
    GridResult g;
    for (double e : cfg.grid_epsilon)
        for (double l : cfg.grid_lambda_c) g.cells.push_back({e, l, 0.0});
    threads = std::max<std::size_t>(1, std::min(threads, g.cells.size()));
    if (threads == 1) {
        for (auto& c : g.cells) c.val_recall10 = evaluate_cell(split, cfg, c.epsilon, c.lambda_c);
    } else {
        std::vector<std::exception_ptr> errors(g.cells.size());
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t k = t; k < g.cells.size(); k += threads) {
                    try {
                        g.cells[k].val_recall10 = evaluate_cell(split, cfg, g.cells[k].epsilon, g.cells[k].lambda_c);
                    } catch (...) {
                        errors[k] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    g.best = select_best(g.cells);
    return g;
}

}  // namespace ugt
