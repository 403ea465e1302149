#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ugt/checkpoint.hpp"
#include "ugt/model.hpp"

using namespace ugt;
namespace fs = std::filesystem;

namespace {

Dataset tiny_dataset() {
    SyntheticConfig sc;
    sc.num_users = 6;
    sc.num_items = 5;
    sc.image_size = 4;
    sc.channels = 1;
    sc.vocab_size = 8;
    sc.latent_dim = 2;
    sc.max_text_len = 4;
    sc.density = 0.4;
    sc.seed = 3;
    return generate_synthetic(sc);
}

ModelConfig tiny_config(Ablation ablation = {}) {
    ModelConfig cfg;
    cfg.encoder.embed_dim = 4;
    cfg.encoder.num_heads = 2;
    cfg.encoder.ffn_dim = 8;
    cfg.encoder.itc_dim = 3;
    cfg.encoder.num_layers = 1;
    cfg.encoder.patch_size = 2;
    cfg.encoder.image_size = 4;
    cfg.encoder.channels = 1;
    cfg.encoder.vocab_size = 8;
    cfg.encoder.max_text_len = 4;
    cfg.gnn_layers = 2;
    cfg.ablation = ablation;
    return cfg;
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("ugt_model_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

bool has_name(const std::vector<NamedParam>& ps, const std::string& name) {
    return std::any_of(ps.begin(), ps.end(), [&](const NamedParam& n) { return n.name == name; });
}

}  // namespace

TEST(Ablation, NamesRoundTrip) {
    Ablation a;
    EXPECT_TRUE(a.full());
    for (const char* name : {"attn_fuse", "ugnn", "trans", "cl"}) disable_component(a, name);
    EXPECT_EQ(disabled_components(a), (std::vector<std::string>{"attn_fuse", "ugnn", "trans", "cl"}));
    EXPECT_THROW(disable_component(a, "dropout"), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
    Ablation a;
    a.unified_gnn = false;
    auto cfg = tiny_config(a);
    cfg.epsilon = 0.7;
    const auto back = ModelConfig::from_json(cfg.to_json());
    EXPECT_EQ(back.to_json(), cfg.to_json());
    EXPECT_EQ(back.ablation, a);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto ds = tiny_dataset();
    const auto cfg = tiny_config();
    const auto p = init_model(cfg, ds.num_users, ds.num_items, 11);
    const auto path = scratch("roundtrip") / "model.bin";
    save_model(path, p, cfg, {{"run_id", "abc"}});
    const auto loaded = load_model(path, ds.num_users, ds.num_items);
    EXPECT_EQ(loaded.meta.at("run_id"), "abc");
    const auto a = all_params(p), b = all_params(loaded.params);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].name, b[k].name);
        EXPECT_EQ(vals(a[k].tensor), vals(b[k].tensor)) << a[k].name;
    }
    // Same forward pass after reload.
    const auto in = prepare_inputs(ds, cfg);
    const auto g = build_graph(ds.num_users, ds.num_items, ds.interactions);
    NoGradGuard no_grad;
    EXPECT_EQ(vals(forward(p, cfg, in, g).embeddings.user), vals(forward(loaded.params, loaded.config, in, g).embeddings.user));
}

TEST(Checkpoint, FlippedByteIsFormatError) {
    const auto ds = tiny_dataset();
    const auto cfg = tiny_config();
    const auto path = scratch("corrupt") / "model.bin";
    save_model(path, init_model(cfg, ds.num_users, ds.num_items, 1), cfg);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-20, std::ios::end);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5A);
    f.seekp(-20, std::ios::end);
    f.write(&c, 1);
    f.close();
    EXPECT_THROW(load_model(path, ds.num_users, ds.num_items), FormatError);
}

TEST(Checkpoint, TruncatedAndForeignFilesAreFormatErrors) {
    const auto ds = tiny_dataset();
    const auto cfg = tiny_config();
    const auto dir = scratch("truncated");
    save_model(dir / "model.bin", init_model(cfg, ds.num_users, ds.num_items, 1), cfg);
    fs::resize_file(dir / "model.bin", fs::file_size(dir / "model.bin") - 8);
    EXPECT_THROW(load_model(dir / "model.bin", ds.num_users, ds.num_items), FormatError);
    {
        std::ofstream os(dir / "foreign.bin");
        os << "not a checkpoint at all";
    }
    EXPECT_THROW(load_model(dir / "foreign.bin", ds.num_users, ds.num_items), FormatError);
    EXPECT_THROW(load_model(dir / "absent.bin", ds.num_users, ds.num_items), FormatError);
}

TEST(Checkpoint, WrongDatasetSizeIsFormatError) {
    const auto ds = tiny_dataset();
    const auto cfg = tiny_config();
    const auto path = scratch("mismatch") / "model.bin";
    save_model(path, init_model(cfg, ds.num_users, ds.num_items, 1), cfg);
    EXPECT_THROW(load_model(path, ds.num_users + 1, ds.num_items), FormatError);
}

TEST(Model, SameSeedSameParameters) {
    const auto cfg = tiny_config();
    const auto a = all_params(init_model(cfg, 6, 5, 4)), b = all_params(init_model(cfg, 6, 5, 4));
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(vals(a[k].tensor), vals(b[k].tensor));
}

TEST(Model, TrainableSetFollowsAblation) {
    const auto full = tiny_config();
    const auto p = init_model(full, 6, 5, 1);
    const auto all = trainable_params(p, full);
    EXPECT_TRUE(has_name(all, "encoder.layer0.w_q"));
    EXPECT_TRUE(has_name(all, "fusion.alpha_logit"));
    EXPECT_TRUE(has_name(all, "encoder.itc_visual"));
    EXPECT_FALSE(has_name(all, "frozen.visual_map"));

    Ablation no_trans;
    no_trans.transformer = false;
    const auto t = trainable_params(p, tiny_config(no_trans));
    EXPECT_FALSE(has_name(t, "encoder.layer0.w_q"));
    EXPECT_TRUE(has_name(t, "encoder.itc_visual"));

    Ablation no_cl;
    no_cl.contrastive = false;
    EXPECT_FALSE(has_name(trainable_params(p, tiny_config(no_cl)), "encoder.itc_textual"));

    Ablation no_fuse;
    no_fuse.attn_fuse = false;
    EXPECT_FALSE(has_name(trainable_params(p, tiny_config(no_fuse)), "fusion.alpha_logit"));
}

TEST(Model, ForwardShapesUnderEveryAblation) {
    const auto ds = tiny_dataset();
    const auto g = build_graph(ds.num_users, ds.num_items, ds.interactions);
    for (const char* name : {"", "attn_fuse", "ugnn", "trans", "cl"}) {
        Ablation a;
        if (*name) disable_component(a, name);
        const auto cfg = tiny_config(a);
        const auto p = init_model(cfg, ds.num_users, ds.num_items, 2);
        const auto out = forward(p, cfg, prepare_inputs(ds, cfg), g);
        EXPECT_EQ(out.embeddings.user.shape(), (Shape{6, 4})) << name;
        EXPECT_EQ(out.embeddings.item.shape(), (Shape{5, 4})) << name;
        EXPECT_EQ(out.features.visual.shape(), (Shape{5, 4})) << name;
    }
}

TEST(Model, FixedAlphaReceivesNoGradient) {
    const auto ds = tiny_dataset();
    const auto g = build_graph(ds.num_users, ds.num_items, ds.interactions);
    Ablation a;
    a.attn_fuse = false;
    const auto cfg = tiny_config(a);
    const auto p = init_model(cfg, ds.num_users, ds.num_items, 2);
    const auto out = forward(p, cfg, prepare_inputs(ds, cfg), g);
    EXPECT_EQ(out.alpha.item(), 0.5);
    backward(sum(mul(out.embeddings.user, out.embeddings.user)));
    EXPECT_EQ(p.fusion.alpha_logit.grad_at(0), 0.0);
    EXPECT_NE(p.fusion.fuse_visual.grad_at(0), 0.0);
}

TEST(Model, FrozenExtractorBypassesEncoder) {
    const auto ds = tiny_dataset();
    const auto g = build_graph(ds.num_users, ds.num_items, ds.interactions);
    Ablation a;
    a.transformer = false;
    const auto cfg = tiny_config(a);
    const auto p = init_model(cfg, ds.num_users, ds.num_items, 2);
    const auto out = forward(p, cfg, prepare_inputs(ds, cfg), g);
    backward(sum(mul(out.embeddings.item, out.embeddings.item)));
    EXPECT_FALSE(p.encoder.layers[0].w_q.has_grad());
    EXPECT_FALSE(p.frozen.visual_map.requires_grad());
}

TEST(Model, MismatchedDatasetIsConfigError) {
    auto cfg = tiny_config();
    cfg.encoder.vocab_size = 9;
    EXPECT_THROW(prepare_inputs(tiny_dataset(), cfg), ConfigError);
}
