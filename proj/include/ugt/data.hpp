#pragma once

// Interaction data, raw toy modalities (pixel grids and token ids), the
// 8:1:1 splitter and a synthetic generator with latent-factor structure.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ugt/errors.hpp"

namespace ugt {

using Id = std::uint32_t;
using TokenId = std::uint32_t;

struct Interaction {
    Id user = 0;
    Id item = 0;
    auto operator<=>(const Interaction&) const = default;
};

struct Dataset {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t vocab_size = 0;
    std::size_t image_size = 0;  // P
    std::size_t channels = 0;    // C
    std::vector<Interaction> interactions;
    std::vector<float> images;                // item-major, each P*P*C in (row, col, channel) order
    std::vector<std::vector<TokenId>> texts;  // one token sequence per item

    std::size_t image_numel() const { return image_size * image_size * channels; }

    std::span<const float> image(std::size_t item) const {
        return std::span<const float>(images).subspan(item * image_numel(), image_numel());
    }
    std::span<float> image(std::size_t item) {
        return std::span<float>(images).subspan(item * image_numel(), image_numel());
    }

    /// Throws IntegrityError/FormatError when any table is inconsistent.
    void validate() const {
        if (images.size() != num_items * image_numel()) {
            throw FormatError("image table holds " + std::to_string(images.size()) + " floats, expected " +
                              std::to_string(num_items * image_numel()));
        }
        if (texts.size() != num_items) {
            throw IntegrityError("text table has " + std::to_string(texts.size()) + " entries for " +
                                 std::to_string(num_items) + " items");
        }
        for (std::size_t i = 0; i < texts.size(); ++i)
            for (TokenId t : texts[i])
                if (t >= vocab_size) {
                    throw IntegrityError("item " + std::to_string(i) + " has token " + std::to_string(t) +
                                         " >= vocab_size " + std::to_string(vocab_size));
                }
        std::vector<Interaction> sorted = interactions;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t k = 0; k < sorted.size(); ++k) {
            const auto& e = sorted[k];
            if (e.user >= num_users || e.item >= num_items) {
                throw IntegrityError("interaction (" + std::to_string(e.user) + ", " + std::to_string(e.item) +
                                     ") references an unknown user or item");
            }
            if (k > 0 && sorted[k - 1] == e) {
                throw IntegrityError("duplicate interaction (" + std::to_string(e.user) + ", " +
                                     std::to_string(e.item) + ")");
            }
        }
    }

    bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Raw modality sequences

enum class Modality : std::uint8_t { visual = 0, textual = 1 };

inline constexpr std::size_t kNumModalities = 2;

inline const char* modality_name(Modality m) { return m == Modality::visual ? "visual" : "textual"; }

struct PatchSequence {
    std::size_t patch_dim = 0;
    std::vector<double> patches;  // count x patch_dim, raster order
    std::vector<std::size_t> positions;

    std::size_t count() const { return positions.size(); }
};

struct TokenSequence {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> positions;
};

/// Splits a P x P x C image into non-overlapping raster-order patches, each
/// flattened in (row, col, channel) order.
inline PatchSequence patchify(std::span<const float> image, std::size_t image_size, std::size_t channels,
                              std::size_t patch_size) {
    if (patch_size == 0 || image_size % patch_size != 0) {
        throw FormatError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                          std::to_string(patch_size));
    }
    if (image.size() != image_size * image_size * channels) {
        throw FormatError("image has " + std::to_string(image.size()) + " values, expected " +
                          std::to_string(image_size * image_size * channels));
    }
    const std::size_t grid = image_size / patch_size;
    PatchSequence seq;
    seq.patch_dim = patch_size * patch_size * channels;
    seq.patches.reserve(grid * grid * seq.patch_dim);
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px) {
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    for (std::size_t c = 0; c < channels; ++c) {
                        const std::size_t row = py * patch_size + y, col = px * patch_size + x;
                        seq.patches.push_back(image[(row * image_size + col) * channels + c]);
                    }
            seq.positions.push_back(py * grid + px);
        }
    return seq;
}

/// Inverse of patchify.
inline std::vector<float> unpatchify(const PatchSequence& seq, std::size_t image_size, std::size_t channels,
                                     std::size_t patch_size) {
    const std::size_t grid = image_size / patch_size;
    if (seq.count() != grid * grid || seq.patch_dim != patch_size * patch_size * channels) {
        throw FormatError("patch sequence does not tile a " + std::to_string(image_size) + "x" +
                          std::to_string(image_size) + " image");
    }
    std::vector<float> image(image_size * image_size * channels);
    for (std::size_t k = 0; k < seq.count(); ++k) {
        const std::size_t py = seq.positions[k] / grid, px = seq.positions[k] % grid;
        const double* patch = &seq.patches[k * seq.patch_dim];
        std::size_t off = 0;
        for (std::size_t y = 0; y < patch_size; ++y)
            for (std::size_t x = 0; x < patch_size; ++x)
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t row = py * patch_size + y, col = px * patch_size + x;
                    image[(row * image_size + col) * channels + c] = static_cast<float>(patch[off++]);
                }
    }
    return image;
}

inline TokenSequence tokenize(std::span<const TokenId> text, std::size_t vocab_size) {
    TokenSequence seq;
    seq.tokens.assign(text.begin(), text.end());
    for (std::size_t p = 0; p < text.size(); ++p) {
        if (text[p] >= vocab_size) {
            throw FormatError("token " + std::to_string(text[p]) + " out of range for vocabulary of " +
                              std::to_string(vocab_size));
        }
        seq.positions.push_back(p);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticConfig {
    std::size_t num_users = 50;
    std::size_t num_items = 30;
    std::size_t latent_dim = 4;
    double density = 0.1;
    std::uint64_t seed = 0;
    std::size_t image_size = 16;
    std::size_t channels = 3;
    std::size_t vocab_size = 256;
    std::size_t max_text_len = 16;
    double preference_scale = 4.0;  // sharpness of sigma(w_u . z_i)
    double pixel_noise = 0.05;
    double text_noise = 0.2;  // probability of a background token
};

struct SyntheticWorld {
    Dataset dataset;
    std::vector<double> item_factors;  // num_items x latent_dim
    std::vector<double> user_factors;  // num_users x latent_dim
    double bias = 0.0;                 // calibrated logit offset
};

namespace detail {

inline double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace detail

/// Items get latent factors z_i rendered into images (sinusoidal gratings)
/// and token distributions (topic groups); users get w_u and interact with
/// probability sigma(scale * w_u.z_i / sqrt(k) + b), b calibrated so the
/// expected interaction count is density * |U| * |I|.
inline SyntheticWorld generate_world(const SyntheticConfig& cfg) {
    if (!(cfg.density > 0.0 && cfg.density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
    if (cfg.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (cfg.vocab_size < 2 * cfg.latent_dim + 1) throw ConfigError("vocab_size too small for latent_dim");

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const std::size_t k_dim = cfg.latent_dim;
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k_dim));

    SyntheticWorld world;
    Dataset& ds = world.dataset;
    ds.num_users = cfg.num_users;
    ds.num_items = cfg.num_items;
    ds.vocab_size = cfg.vocab_size;
    ds.image_size = cfg.image_size;
    ds.channels = cfg.channels;

    world.item_factors.resize(cfg.num_items * k_dim);
    for (double& v : world.item_factors) v = normal(rng);
    world.user_factors.resize(cfg.num_users * k_dim);
    for (double& v : world.user_factors) v = normal(rng);

    // Images: one oriented grating per latent dimension, weighted by z_i.
    const std::size_t P = cfg.image_size, C = cfg.channels;
    std::vector<double> basis(k_dim * P * P * C);
    for (std::size_t k = 0; k < k_dim; ++k) {
        const double freq = 1.0 + static_cast<double>(k % 3);
        const double theta = std::numbers::pi * (static_cast<double>(k) + uniform(rng)) / static_cast<double>(k_dim);
        std::vector<double> phase(C);
        for (double& ph : phase) ph = 2.0 * std::numbers::pi * uniform(rng);
        for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x)
                for (std::size_t c = 0; c < C; ++c) {
                    const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                                     static_cast<double>(P);
                    basis[((k * P + y) * P + x) * C + c] = std::cos(2.0 * std::numbers::pi * freq * u + phase[c]);
                }
    }
    ds.images.resize(cfg.num_items * P * P * C);
    for (std::size_t i = 0; i < cfg.num_items; ++i) {
        for (std::size_t p = 0; p < P * P * C; ++p) {
            double signal = 0.0;
            for (std::size_t k = 0; k < k_dim; ++k) signal += world.item_factors[i * k_dim + k] * basis[k * P * P * C + p];
            const double v = 0.5 + 0.25 * signal * inv_sqrt_k + cfg.pixel_noise * normal(rng);
            ds.images[i * P * P * C + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    // Texts: topic group 2k holds tokens for +z_k, group 2k+1 for -z_k; the
    // remaining ids are background.
    const std::size_t topics = 2 * k_dim;
    const std::size_t group = cfg.vocab_size / (topics + 1);
    ds.texts.resize(cfg.num_items);
    const std::size_t min_len = std::max<std::size_t>(1, cfg.max_text_len / 2);
    std::uniform_int_distribution<std::size_t> length_dist(min_len, std::max(min_len, cfg.max_text_len));
    std::uniform_int_distribution<std::size_t> vocab_dist(0, cfg.vocab_size - 1);
    std::uniform_int_distribution<std::size_t> in_group(0, group - 1);
    for (std::size_t i = 0; i < cfg.num_items; ++i) {
        std::vector<double> weights(topics);
        for (std::size_t k = 0; k < k_dim; ++k) {
            const double z = world.item_factors[i * k_dim + k];
            weights[2 * k] = std::exp(2.0 * std::max(0.0, z));
            weights[2 * k + 1] = std::exp(2.0 * std::max(0.0, -z));
        }
        std::discrete_distribution<std::size_t> topic_dist(weights.begin(), weights.end());
        const std::size_t len = cfg.max_text_len == 0 ? 0 : length_dist(rng);
        auto& text = ds.texts[i];
        for (std::size_t p = 0; p < len; ++p) {
            if (uniform(rng) < cfg.text_noise) {
                text.push_back(static_cast<TokenId>(vocab_dist(rng)));
            } else {
                const std::size_t topic = topic_dist(rng);
                text.push_back(static_cast<TokenId>(topic * group + in_group(rng)));
            }
        }
    }

    // Interactions.
    std::vector<double> affinity(cfg.num_users * cfg.num_items);
    for (std::size_t u = 0; u < cfg.num_users; ++u)
        for (std::size_t i = 0; i < cfg.num_items; ++i) {
            double dot = 0.0;
            for (std::size_t k = 0; k < k_dim; ++k)
                dot += world.user_factors[u * k_dim + k] * world.item_factors[i * k_dim + k];
            affinity[u * cfg.num_items + i] = cfg.preference_scale * dot * inv_sqrt_k;
        }
    const double target = cfg.density * static_cast<double>(affinity.size());
    auto expected = [&](double b) {
        double s = 0.0;
        for (double a : affinity) s += detail::stable_sigmoid(a + b);
        return s;
    };
    if (cfg.density < 1.0) {
        double lo = -60.0, hi = 60.0;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (expected(mid) < target ? lo : hi) = mid;
        }
        world.bias = 0.5 * (lo + hi);
    }
    for (std::size_t u = 0; u < cfg.num_users; ++u)
        for (std::size_t i = 0; i < cfg.num_items; ++i) {
            const double p = cfg.density >= 1.0 ? 1.0 : detail::stable_sigmoid(affinity[u * cfg.num_items + i] + world.bias);
            if (uniform(rng) < p) ds.interactions.push_back({static_cast<Id>(u), static_cast<Id>(i)});
        }
    return world;
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) { return generate_world(cfg).dataset; }

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
    double train = 8.0;
    double validation = 1.0;
    double test = 1.0;
};

struct SplitReport {
    std::size_t train_only_users = 0;  // fewer than 3 interactions
    std::size_t dropped_users = 0;     // had held-out pairs but no training pair
};

struct SplitDataset {
    Dataset dataset;
    std::vector<Interaction> train;
    std::vector<Interaction> validation;
    std::vector<Interaction> test;
    SplitReport report;
};

/// Per-user random split. Users with >= 3 interactions contribute held-out
/// pairs; counts are rounded by error diffusion over a shuffled user order so
/// the global proportions match the ratios to within one interaction. Users
/// with fewer interactions stay entirely in train.
inline SplitDataset split(const Dataset& dataset, SplitRatios ratios = {}, std::uint64_t seed = 0) {
    if (dataset.interactions.empty()) throw FormatError("cannot split a dataset without interactions");
    const double total = ratios.train + ratios.validation + ratios.test;
    if (!(total > 0.0) || ratios.train < 0.0 || ratios.validation < 0.0 || ratios.test < 0.0) {
        throw ConfigError("split ratios must be non-negative with a positive sum");
    }
    const double val_share = ratios.validation / total, test_share = ratios.test / total;

    std::vector<std::vector<Id>> per_user(dataset.num_users);
    std::vector<Interaction> sorted = dataset.interactions;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& e : sorted) per_user.at(e.user).push_back(e.item);

    std::mt19937_64 rng(seed);
    std::vector<Id> user_order(dataset.num_users);
    for (std::size_t u = 0; u < user_order.size(); ++u) user_order[u] = static_cast<Id>(u);
    std::shuffle(user_order.begin(), user_order.end(), rng);

    SplitDataset out;
    out.dataset = dataset;
    std::size_t eligible = 0, assigned_val = 0, assigned_test = 0;
    for (Id u : user_order) {
        auto& items = per_user[u];
        if (items.empty()) continue;
        std::shuffle(items.begin(), items.end(), rng);
        std::size_t n_val = 0, n_test = 0;
        if (items.size() >= 3) {
            eligible += items.size();
            const auto target_val = static_cast<std::size_t>(std::floor(static_cast<double>(eligible) * val_share + 0.5));
            const auto target_test = static_cast<std::size_t>(std::floor(static_cast<double>(eligible) * test_share + 0.5));
            n_val = target_val - assigned_val;
            n_test = target_test - assigned_test;
            while (n_val + n_test > items.size() - 1) (n_val >= n_test ? n_val : n_test) -= 1;
            assigned_val += n_val;
            assigned_test += n_test;
        } else {
            ++out.report.train_only_users;
        }
        std::size_t k = 0;
        for (; k < n_val; ++k) out.validation.push_back({u, items[k]});
        for (; k < n_val + n_test; ++k) out.test.push_back({u, items[k]});
        for (; k < items.size(); ++k) out.train.push_back({u, items[k]});
    }

    std::vector<bool> has_train(dataset.num_users, false);
    for (const auto& e : out.train) has_train[e.user] = true;
    std::vector<bool> dropped(dataset.num_users, false);
    auto prune = [&](std::vector<Interaction>& held) {
        std::erase_if(held, [&](const Interaction& e) {
            if (has_train[e.user]) return false;
            dropped[e.user] = true;
            return true;
        });
    };
    prune(out.validation);
    prune(out.test);
    out.report.dropped_users = static_cast<std::size_t>(std::count(dropped.begin(), dropped.end(), true));

    std::sort(out.train.begin(), out.train.end());
    std::sort(out.validation.begin(), out.validation.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

}  // namespace ugt
