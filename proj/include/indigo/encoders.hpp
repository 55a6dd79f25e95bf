#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "indigo/config.hpp"
#include "indigo/data.hpp"
#include "indigo/optim.hpp"
#include "indigo/params.hpp"
#include "indigo/rng.hpp"
#include "indigo/tape.hpp"

namespace indigo {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kInitLogitScale = 14.28; // temperature starts at 1 / 14.28
constexpr double kTemperatureMin = 1e-2;
constexpr double kTemperatureMax = 100.0;

struct ViTConfig {
    int image_size = 16;
    int patch = 4;
    int dim = 64;
    int heads = 4;
    int depth = 4;
    int channels = 3;
    int ffn_mult = 4;
    int prefix_tokens = 1;     // CLS, or CLS + DIST
    bool learnable_dist = true; // early fusion fills the DIST slot externally

    int patches_per_side() const { return image_size / patch; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int n_positions() const { return prefix_tokens + n_patches(); }
    int patch_dim() const { return patch * patch * channels; }
    int head_dim() const { return dim / heads; }
};

struct BlockHandles {
    int ln1_scale, ln1_shift;
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_scale, ln2_shift;
    int w1, b1, w2, b2;
};

struct ViTHandles {
    int patch_w = -1, patch_b = -1;
    int cls = -1;
    int dist = -1; // only when prefix_tokens == 2
    int pos = -1;
    std::vector<BlockHandles> blocks;
};

template <typename T>
Tensor<T> trunc_normal_tensor(std::vector<int> shape, Rng& rng, double std_dev = kInitStd) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.trunc_normal(std_dev));
    return t;
}

template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, int dim, int ffn_mult, Rng& rng) {
    Tensor<T> ones({dim});
    ones.fill(T(1));
    store.add(prefix + ".ln1.scale", ones);
    store.add(prefix + ".ln1.shift", Tensor<T>({dim}));
    for (const char* w : {"wq", "wk", "wv", "wo"})
        store.add(prefix + ".msa." + w, trunc_normal_tensor<T>({dim, dim}, rng));
    for (const char* b : {"bq", "bk", "bv", "bo"})
        store.add(prefix + ".msa." + b, Tensor<T>({1, dim}));
    store.add(prefix + ".ln2.scale", ones);
    store.add(prefix + ".ln2.shift", Tensor<T>({dim}));
    const int hidden = dim * ffn_mult;
    store.add(prefix + ".ffn.w1", trunc_normal_tensor<T>({dim, hidden}, rng));
    store.add(prefix + ".ffn.b1", Tensor<T>({1, hidden}));
    store.add(prefix + ".ffn.w2", trunc_normal_tensor<T>({hidden, dim}, rng));
    store.add(prefix + ".ffn.b2", Tensor<T>({1, dim}));
}

template <typename T>
BlockHandles resolve_block(const ParamStore<T>& store, const std::string& prefix) {
    BlockHandles h;
    h.ln1_scale = store.require(prefix + ".ln1.scale");
    h.ln1_shift = store.require(prefix + ".ln1.shift");
    h.wq = store.require(prefix + ".msa.wq");
    h.bq = store.require(prefix + ".msa.bq");
    h.wk = store.require(prefix + ".msa.wk");
    h.bk = store.require(prefix + ".msa.bk");
    h.wv = store.require(prefix + ".msa.wv");
    h.bv = store.require(prefix + ".msa.bv");
    h.wo = store.require(prefix + ".msa.wo");
    h.bo = store.require(prefix + ".msa.bo");
    h.ln2_scale = store.require(prefix + ".ln2.scale");
    h.ln2_shift = store.require(prefix + ".ln2.shift");
    h.w1 = store.require(prefix + ".ffn.w1");
    h.b1 = store.require(prefix + ".ffn.b1");
    h.w2 = store.require(prefix + ".ffn.w2");
    h.b2 = store.require(prefix + ".ffn.b2");
    return h;
}

template <typename T>
void init_vit(ParamStore<T>& store, const std::string& prefix, const ViTConfig& cfg, Rng& rng) {
    store.add(prefix + ".patch_embed.w", trunc_normal_tensor<T>({cfg.patch_dim(), cfg.dim}, rng));
    store.add(prefix + ".patch_embed.b", Tensor<T>({1, cfg.dim}));
    store.add(prefix + ".cls", trunc_normal_tensor<T>({1, cfg.dim}, rng));
    if (cfg.prefix_tokens == 2 && cfg.learnable_dist)
        store.add(prefix + ".dist", trunc_normal_tensor<T>({1, cfg.dim}, rng));
    store.add(prefix + ".pos", trunc_normal_tensor<T>({cfg.n_positions(), cfg.dim}, rng));
    for (int k = 0; k < cfg.depth; ++k)
        init_block(store, prefix + ".blocks." + std::to_string(k), cfg.dim, cfg.ffn_mult, rng);
}

template <typename T>
ViTHandles resolve_vit(const ParamStore<T>& store, const std::string& prefix, const ViTConfig& cfg) {
    ViTHandles h;
    h.patch_w = store.require(prefix + ".patch_embed.w");
    h.patch_b = store.require(prefix + ".patch_embed.b");
    h.cls = store.require(prefix + ".cls");
    if (cfg.prefix_tokens == 2 && cfg.learnable_dist) h.dist = store.require(prefix + ".dist");
    h.pos = store.require(prefix + ".pos");
    for (int k = 0; k < cfg.depth; ++k)
        h.blocks.push_back(resolve_block(store, prefix + ".blocks." + std::to_string(k)));
    return h;
}

/// Raster-order patch pixels as a constant (n_patches x patch_dim) node.
template <typename T>
ops::Id<T> patch_matrix(Tape<T>& t, const ImageSample& img, const ViTConfig& cfg) {
    if (img.height % cfg.patch != 0 || img.width % cfg.patch != 0)
        throw std::invalid_argument("patchify: image dims not divisible by patch size");
    if (img.channels != cfg.channels)
        throw std::invalid_argument("patchify: channel count mismatch");
    const int side_y = img.height / cfg.patch, side_x = img.width / cfg.patch;
    Tensor<T> patches({side_y * side_x, cfg.patch_dim()});
    int row = 0;
    for (int py = 0; py < side_y; ++py)
        for (int px = 0; px < side_x; ++px, ++row) {
            int col = 0;
            for (int y = 0; y < cfg.patch; ++y)
                for (int x = 0; x < cfg.patch; ++x)
                    for (int c = 0; c < cfg.channels; ++c, ++col)
                        patches(row, col) =
                            static_cast<T>(img.pixel(py * cfg.patch + y, px * cfg.patch + x, c));
        }
    return t.constant(std::move(patches));
}

/// [prefix tokens || linear(patches)] + positional embeddings.
/// `second_prefix` overrides the DIST slot (early fusion feeds the adapted
/// intrinsic embedding there); otherwise the learned token is used.
template <typename T>
ops::Id<T> patchify(Tape<T>& t, const ImageSample& img, const ViTConfig& cfg, const ViTHandles& h,
                    std::optional<ops::Id<T>> second_prefix = std::nullopt) {
    auto patches = patch_matrix(t, img, cfg);
    auto embedded = ops::linear(t, patches, t.param(h.patch_w), t.param(h.patch_b));
    std::vector<ops::Id<T>> rows;
    rows.push_back(t.param(h.cls));
    if (cfg.prefix_tokens == 2) {
        if (second_prefix) rows.push_back(*second_prefix);
        else if (h.dist >= 0) rows.push_back(t.param(h.dist));
        else throw std::invalid_argument("patchify: DIST slot needs a token");
    } else if (second_prefix) {
        throw std::invalid_argument("patchify: prefix token supplied but prefix_tokens != 2");
    }
    rows.push_back(embedded);
    auto tokens = ops::concat_rows(t, rows);
    auto pos = t.param(h.pos);
    const int need = t.val(tokens).rows();
    if (t.val(pos).rows() < need)
        throw std::invalid_argument("patchify: positional table does not cover the sequence");
    if (t.val(pos).rows() > need) pos = ops::slice_rows(t, pos, 0, need);
    return ops::add(t, tokens, pos);
}

/// Pre-norm residual MSA followed by pre-norm residual FFN.
template <typename T>
ops::Id<T> transformer_block(Tape<T>& t, ops::Id<T> x, const BlockHandles& h, int heads,
                             int layer_tag = -1) {
    const int dim = t.val(x).cols();
    const int hd = dim / heads;
    auto normed = ops::layernorm(t, x, t.param(h.ln1_scale), t.param(h.ln1_shift), T(kLayerNormEps));
    auto q = ops::linear(t, normed, t.param(h.wq), t.param(h.bq));
    auto k = ops::linear(t, normed, t.param(h.wk), t.param(h.bk));
    auto v = ops::linear(t, normed, t.param(h.wv), t.param(h.bv));
    std::vector<ops::Id<T>> head_outs;
    for (int i = 0; i < heads; ++i) {
        auto qi = ops::slice_cols(t, q, i * hd, (i + 1) * hd);
        auto ki = ops::slice_cols(t, k, i * hd, (i + 1) * hd);
        auto vi = ops::slice_cols(t, v, i * hd, (i + 1) * hd);
        auto scores = ops::scale(t, ops::matmul_nt(t, qi, ki), T(1.0 / std::sqrt(double(hd))));
        auto probs = ops::softmax_rows(t, scores, layer_tag, i);
        head_outs.push_back(ops::matmul(t, probs, vi));
    }
    auto merged = heads == 1 ? head_outs[0] : ops::concat_cols(t, head_outs);
    auto attn_out = ops::linear(t, merged, t.param(h.wo), t.param(h.bo));
    auto mid = ops::add(t, x, attn_out);

    auto normed2 = ops::layernorm(t, mid, t.param(h.ln2_scale), t.param(h.ln2_shift), T(kLayerNormEps));
    auto hidden = ops::gelu(t, ops::linear(t, normed2, t.param(h.w1), t.param(h.b1)));
    auto ffn_out = ops::linear(t, hidden, t.param(h.w2), t.param(h.b2));
    return ops::add(t, mid, ffn_out);
}

template <typename T>
struct VitOut {
    ops::Id<T> cls;
    ops::Id<T> tokens;
};

/// Stacked blocks; cls is token 0 of the final sequence.
template <typename T>
VitOut<T> vit_forward(Tape<T>& t, ops::Id<T> tokens, const ViTConfig& cfg, const ViTHandles& h,
                      int layer_tag_base = 0, bool tag_layers = false) {
    if (t.val(tokens).cols() != cfg.dim)
        throw std::invalid_argument("vit_forward: token dim does not match configuration");
    auto x = tokens;
    for (int k = 0; k < cfg.depth; ++k)
        x = transformer_block(t, x, h.blocks[k], cfg.heads, tag_layers ? layer_tag_base + k : -1);
    return {ops::slice_rows(t, x, 0, 1), x};
}

// ---------------------------------------------------------------------------
// Text encoder stub: token embedding table, mean pooling, one linear layer.
// ---------------------------------------------------------------------------

struct TextConfig {
    int vocab_size = 0;
    int dim = 32; // d_t
};

struct TextHandles {
    int table = -1, w = -1, b = -1;
};

// Embedding tables and projection heads feed l2-normalization, whose
// backward scales like 1/norm; they are initialized at fan-in scale so the
// embeddings start at O(1) norm instead of 1e-4.
template <typename T>
void init_text_encoder(ParamStore<T>& store, const std::string& prefix, const TextConfig& cfg,
                       Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    store.add(prefix + ".embed", trunc_normal_tensor<T>({cfg.vocab_size, cfg.dim}, rng, s));
    store.add(prefix + ".proj.w", trunc_normal_tensor<T>({cfg.dim, cfg.dim}, rng, s));
    store.add(prefix + ".proj.b", Tensor<T>({1, cfg.dim}));
}

template <typename T>
TextHandles resolve_text(const ParamStore<T>& store, const std::string& prefix) {
    return TextHandles{store.require(prefix + ".embed"), store.require(prefix + ".proj.w"),
                       store.require(prefix + ".proj.b")};
}

/// g(t): deterministic 1 x d_t embedding of a token sequence.
template <typename T>
ops::Id<T> text_embedding(Tape<T>& t, const TextHandles& h, const std::vector<int>& token_ids) {
    auto rows = ops::embed_rows(t, t.param(h.table), token_ids);
    auto pooled = ops::mean_rows(t, rows);
    return ops::linear(t, pooled, t.param(h.w), t.param(h.b));
}

// ---------------------------------------------------------------------------
// Frozen multimodal stub bundle: image encoder f^M, text encoder g,
// projections h^I / h^T, learnable temperature.
// ---------------------------------------------------------------------------

struct BundleConfig {
    ViTConfig image;
    TextConfig text;
    int embed_dim = 32; // d_e
};

struct BundleHandles {
    ViTHandles img;
    TextHandles txt;
    int img_proj_w = -1, img_proj_b = -1;
    int txt_proj_w = -1, txt_proj_b = -1;
    int temperature = -1;
};

template <typename T>
void init_bundle(ParamStore<T>& store, const BundleConfig& cfg, Rng& rng) {
    init_vit(store, "mvit", cfg.image, rng);
    init_text_encoder(store, "text", cfg.text, rng);
    const double si = 1.0 / std::sqrt(static_cast<double>(cfg.image.dim));
    const double st = 1.0 / std::sqrt(static_cast<double>(cfg.text.dim));
    store.add("img_proj.w", trunc_normal_tensor<T>({cfg.image.dim, cfg.embed_dim}, rng, si));
    store.add("img_proj.b", Tensor<T>({1, cfg.embed_dim}));
    store.add("txt_proj.w", trunc_normal_tensor<T>({cfg.text.dim, cfg.embed_dim}, rng, st));
    store.add("txt_proj.b", Tensor<T>({1, cfg.embed_dim}));
    store.add("temperature", Tensor<T>::scalar(T(1.0 / kInitLogitScale)));
}

template <typename T>
BundleHandles resolve_bundle(const ParamStore<T>& store, const BundleConfig& cfg) {
    BundleHandles h;
    h.img = resolve_vit(store, "mvit", cfg.image);
    h.txt = resolve_text(store, "text");
    h.img_proj_w = store.require("img_proj.w");
    h.img_proj_b = store.require("img_proj.b");
    h.txt_proj_w = store.require("txt_proj.w");
    h.txt_proj_b = store.require("txt_proj.b");
    h.temperature = store.require("temperature");
    return h;
}

/// h^I(f^M_CLS(x)): the intrinsic modality, deliberately unnormalized.
template <typename T>
ops::Id<T> intrinsic_embedding(Tape<T>& t, const ImageSample& img, const BundleConfig& cfg,
                               const BundleHandles& h) {
    auto tokens = patchify(t, img, cfg.image, h.img);
    auto out = vit_forward(t, tokens, cfg.image, h.img);
    return ops::linear(t, out.cls, t.param(h.img_proj_w), t.param(h.img_proj_b));
}

/// h^T(g(t)): joint-space text embedding, unnormalized.
template <typename T>
ops::Id<T> text_joint_embedding(Tape<T>& t, const std::vector<int>& token_ids,
                                const BundleHandles& h) {
    auto g = text_embedding(t, h.txt, token_ids);
    return ops::linear(t, g, t.param(h.txt_proj_w), t.param(h.txt_proj_b));
}

/// Symmetric InfoNCE over aligned image/caption pairs:
/// normalized embeddings, dot-product similarity, logits scaled by 1/tau,
/// (L_I + L_T) / 2.
template <typename T>
ops::Id<T> contrastive_loss_from_embeddings(Tape<T>& t, ops::Id<T> img_raw, ops::Id<T> txt_raw,
                                            ops::Id<T> temperature) {
    const int n = t.val(img_raw).rows();
    if (n != t.val(txt_raw).rows() || n < 1)
        throw std::invalid_argument("contrastive: need N >= 1 aligned pairs");
    auto zi = ops::l2_normalize_rows(t, img_raw);
    auto zt = ops::l2_normalize_rows(t, txt_raw);
    auto logits_i = ops::div_by_scalar(t, ops::matmul_nt(t, zi, zt), temperature);
    auto logits_t = ops::div_by_scalar(t, ops::matmul_nt(t, zt, zi), temperature);
    std::vector<ops::Id<T>> terms;
    std::vector<T> weights;
    for (int i = 0; i < n; ++i) {
        terms.push_back(ops::cross_entropy(t, ops::slice_rows(t, logits_i, i, i + 1), i));
        terms.push_back(ops::cross_entropy(t, ops::slice_rows(t, logits_t, i, i + 1), i));
        weights.push_back(T(0.5 / n));
        weights.push_back(T(0.5 / n));
    }
    return ops::weighted_sum(t, terms, weights);
}

template <typename T>
ops::Id<T> contrastive_loss(Tape<T>& t, const std::vector<const ImageSample*>& images,
                            const std::vector<const std::vector<int>*>& captions,
                            const BundleConfig& cfg, const BundleHandles& h) {
    if (images.empty() || images.size() != captions.size())
        throw std::invalid_argument("contrastive: images/captions must align, N >= 1");
    std::vector<ops::Id<T>> img_rows, txt_rows;
    for (std::size_t i = 0; i < images.size(); ++i) {
        img_rows.push_back(intrinsic_embedding(t, *images[i], cfg, h));
        txt_rows.push_back(text_joint_embedding(t, *captions[i], h));
    }
    auto zi = images.size() == 1 ? img_rows[0] : ops::concat_rows(t, img_rows);
    auto zt = captions.size() == 1 ? txt_rows[0] : ops::concat_rows(t, txt_rows);
    return contrastive_loss_from_embeddings(t, zi, zt, t.param(h.temperature));
}

template <typename T>
void clamp_temperature(ParamStore<T>& store, int temperature_id) {
    T& tau = store.value(temperature_id).data[0];
    tau = std::clamp(tau, T(kTemperatureMin), T(kTemperatureMax));
}

/// Contrastive pretraining of the stub bundle on captioned synthetic pairs.
/// The bundle is trained in place and left trainable; callers freeze it.
template <typename T>
double pretrain_stub_bundle(ParamStore<T>& store, const BundleConfig& cfg, const BundleHandles& h,
                            const DomainDataset& pairs, const StubConfig& scfg) {
    std::vector<int> order(pairs.samples.size());
    std::iota(order.begin(), order.end(), 0);
    {
        std::set<int> classes;
        for (const auto& s : pairs.samples) classes.insert(s.class_id);
        if (classes.size() < 2)
            throw std::invalid_argument("stub pretraining needs at least 2 distinct classes");
    }
    OptimConfig ocfg;
    ocfg.weight_decay = 0.0;
    SgdOptimizer<T> opt(store, ocfg);
    // The temperature learns an order of magnitude slower than the encoders:
    // at full rate it flattens the logits into the uniform-softmax
    // equilibrium before the embeddings ever separate.
    std::vector<int> enc_ids, tau_ids;
    for (int i = 0; i < store.size(); ++i)
        (i == h.temperature ? tau_ids : enc_ids).push_back(i);
    opt.add_group(enc_ids, scfg.lr);
    opt.add_group(tau_ids, scfg.lr * 0.05);

    Rng shuffle_rng(fold_seed(scfg.seed, 0x57abULL));
    double last_loss = 0.0;
    GradSink<T> sink(store.size());
    std::size_t cursor = order.size();
    for (int step = 0; step < scfg.steps; ++step) {
        std::vector<const ImageSample*> images;
        std::vector<const std::vector<int>*> captions;
        for (int b = 0; b < scfg.batch; ++b) {
            if (cursor >= order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            const ImageSample& s = pairs.samples[order[cursor++]];
            images.push_back(&s);
            captions.push_back(&s.caption);
        }
        sink.clear();
        Tape<T> tape(&store);
        auto loss = contrastive_loss(tape, images, captions, cfg, h);
        last_loss = static_cast<double>(tape.val(loss).data[0]);
        tape.backward(loss, T(1), &sink);
        sink.clip_by_norm(1.0); // normalize-backward spikes early in training
        opt.step(sink, 1.0);
        clamp_temperature(store, h.temperature);
    }
    return last_loss;
}

} // namespace indigo
