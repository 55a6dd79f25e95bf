#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "indigo/encoders.hpp"

namespace indigo {

struct MixerBlockHandles {
    int ln1_scale, ln1_shift;
    int tok_w; // 2x2 map across the two tokens
    int ln2_scale, ln2_shift;
    int w1, b1, w2, b2;
};

struct FusionHandles {
    int w_m_w = -1, w_m_b = -1;
    int w_v_w = -1, w_v_b = -1;
    std::vector<BlockHandles> blocks;         // msa / mca
    std::vector<MixerBlockHandles> mixer_blocks; // mixer
};

template <typename T>
void init_fusion(ParamStore<T>& store, const FusionConfig& cfg, int intrinsic_dim, int visual_dim,
                 Rng& rng) {
    const double sm = 1.0 / std::sqrt(static_cast<double>(intrinsic_dim));
    const double sv = 1.0 / std::sqrt(static_cast<double>(visual_dim));
    store.add("fusion.w_m.w", trunc_normal_tensor<T>({intrinsic_dim, cfg.token_dim}, rng, sm));
    store.add("fusion.w_m.b", Tensor<T>({1, cfg.token_dim}));
    store.add("fusion.w_v.w", trunc_normal_tensor<T>({visual_dim, cfg.token_dim}, rng, sv));
    store.add("fusion.w_v.b", Tensor<T>({1, cfg.token_dim}));
    if (cfg.mechanism == FusionMechanism::concatenation) return;
    for (int k = 0; k < cfg.layers; ++k) {
        const std::string prefix = "fusion.blocks." + std::to_string(k);
        if (cfg.mechanism == FusionMechanism::mixer) {
            Tensor<T> ones({cfg.token_dim});
            ones.fill(T(1));
            store.add(prefix + ".ln1.scale", ones);
            store.add(prefix + ".ln1.shift", Tensor<T>({cfg.token_dim}));
            store.add(prefix + ".token_mix.w", trunc_normal_tensor<T>({2, 2}, rng));
            store.add(prefix + ".ln2.scale", ones);
            store.add(prefix + ".ln2.shift", Tensor<T>({cfg.token_dim}));
            const int hidden = cfg.token_dim * 4;
            store.add(prefix + ".ffn.w1", trunc_normal_tensor<T>({cfg.token_dim, hidden}, rng));
            store.add(prefix + ".ffn.b1", Tensor<T>({1, hidden}));
            store.add(prefix + ".ffn.w2", trunc_normal_tensor<T>({hidden, cfg.token_dim}, rng));
            store.add(prefix + ".ffn.b2", Tensor<T>({1, cfg.token_dim}));
        } else {
            init_block(store, prefix, cfg.token_dim, 4, rng);
        }
    }
}

template <typename T>
FusionHandles resolve_fusion(const ParamStore<T>& store, const FusionConfig& cfg) {
    FusionHandles h;
    h.w_m_w = store.require("fusion.w_m.w");
    h.w_m_b = store.require("fusion.w_m.b");
    h.w_v_w = store.require("fusion.w_v.w");
    h.w_v_b = store.require("fusion.w_v.b");
    if (cfg.mechanism == FusionMechanism::concatenation) return h;
    for (int k = 0; k < cfg.layers; ++k) {
        const std::string prefix = "fusion.blocks." + std::to_string(k);
        if (cfg.mechanism == FusionMechanism::mixer) {
            MixerBlockHandles m;
            m.ln1_scale = store.require(prefix + ".ln1.scale");
            m.ln1_shift = store.require(prefix + ".ln1.shift");
            m.tok_w = store.require(prefix + ".token_mix.w");
            m.ln2_scale = store.require(prefix + ".ln2.scale");
            m.ln2_shift = store.require(prefix + ".ln2.shift");
            m.w1 = store.require(prefix + ".ffn.w1");
            m.b1 = store.require(prefix + ".ffn.b1");
            m.w2 = store.require(prefix + ".ffn.w2");
            m.b2 = store.require(prefix + ".ffn.b2");
            h.mixer_blocks.push_back(m);
        } else {
            h.blocks.push_back(resolve_block(store, prefix));
        }
    }
    return h;
}

/// x0_M = w^M(intrinsic), x0_V = w^V(visual).
template <typename T>
std::pair<ops::Id<T>, ops::Id<T>> project_modalities(Tape<T>& t, ops::Id<T> intrinsic,
                                                     ops::Id<T> visual, const FusionHandles& h) {
    auto x0m = ops::linear(t, intrinsic, t.param(h.w_m_w), t.param(h.w_m_b));
    auto x0v = ops::linear(t, visual, t.param(h.w_v_w), t.param(h.w_v_b));
    return {x0m, x0v};
}

/// Multi-head cross-attention block over exactly two tokens: each token is
/// its own query; keys and values come from the other token. With a single
/// key the attention weight is identically 1, so wq/wk are inert here; the
/// learned transform lives in wv/wo and the FFN.
template <typename T>
ops::Id<T> mca_block(Tape<T>& t, ops::Id<T> x, const BlockHandles& h, int heads, int layer_tag) {
    const int dim = t.val(x).cols();
    const int hd = dim / heads;
    auto normed = ops::layernorm(t, x, t.param(h.ln1_scale), t.param(h.ln1_shift), T(kLayerNormEps));
    auto v = ops::linear(t, normed, t.param(h.wv), t.param(h.bv));
    std::vector<ops::Id<T>> head_outs;
    for (int i = 0; i < heads; ++i) {
        auto vi = ops::slice_cols(t, v, i * hd, (i + 1) * hd);
        auto v_m = ops::slice_rows(t, vi, 0, 1);
        auto v_v = ops::slice_rows(t, vi, 1, 2);
        head_outs.push_back(ops::concat_rows<T>(t, {v_v, v_m})); // each row takes the other's value
        if (t.attn_capture && layer_tag >= 0) {
            Tensor<T> probs({2, 2});
            probs(0, 1) = T(1);
            probs(1, 0) = T(1);
            t.attn_capture->push_back({layer_tag, i, std::move(probs)});
        }
    }
    auto merged = heads == 1 ? head_outs[0] : ops::concat_cols(t, head_outs);
    auto attn_out = ops::linear(t, merged, t.param(h.wo), t.param(h.bo));
    auto mid = ops::add(t, x, attn_out);
    auto normed2 = ops::layernorm(t, mid, t.param(h.ln2_scale), t.param(h.ln2_shift), T(kLayerNormEps));
    auto hidden = ops::gelu(t, ops::linear(t, normed2, t.param(h.w1), t.param(h.b1)));
    auto ffn_out = ops::linear(t, hidden, t.param(h.w2), t.param(h.b2));
    return ops::add(t, mid, ffn_out);
}

/// Mixer block: token-mixing 2x2 map across the token axis, then a
/// channel-mixing FFN, both pre-norm residual.
template <typename T>
ops::Id<T> mixer_block(Tape<T>& t, ops::Id<T> x, const MixerBlockHandles& h) {
    auto normed = ops::layernorm(t, x, t.param(h.ln1_scale), t.param(h.ln1_shift), T(kLayerNormEps));
    auto mixed = ops::matmul(t, t.param(h.tok_w), normed);
    auto mid = ops::add(t, x, mixed);
    auto normed2 = ops::layernorm(t, mid, t.param(h.ln2_scale), t.param(h.ln2_shift), T(kLayerNormEps));
    auto hidden = ops::gelu(t, ops::linear(t, normed2, t.param(h.w1), t.param(h.b1)));
    auto ffn_out = ops::linear(t, hidden, t.param(h.w2), t.param(h.b2));
    return ops::add(t, mid, ffn_out);
}

template <typename T>
struct FusionOut {
    ops::Id<T> xk_m;
    ops::Id<T> xk_v;
};

/// K blocks over the 2-token sequence [x0_M || x0_V]. The concatenation
/// mechanism returns the tokens untouched (heads consume the concatenated
/// pair downstream); msa runs standard pre-norm blocks; mca and mixer as
/// documented on their block functions. Softmax maps land in the tape's
/// attention capture when enabled.
template <typename T>
FusionOut<T> fusion_forward(Tape<T>& t, ops::Id<T> x0_m, ops::Id<T> x0_v, const FusionConfig& cfg,
                            const FusionHandles& h, bool tag_layers = true) {
    if (t.val(x0_m).cols() != cfg.token_dim || t.val(x0_v).cols() != cfg.token_dim)
        throw std::invalid_argument("fusion_forward: token dim mismatch");
    switch (cfg.mechanism) {
        case FusionMechanism::concatenation:
            return {x0_m, x0_v};
        case FusionMechanism::msa: {
            auto x = ops::concat_rows<T>(t, {x0_m, x0_v});
            for (int k = 0; k < cfg.layers; ++k)
                x = transformer_block(t, x, h.blocks[k], cfg.heads, tag_layers ? k : -1);
            return {ops::slice_rows(t, x, 0, 1), ops::slice_rows(t, x, 1, 2)};
        }
        case FusionMechanism::mca: {
            auto x = ops::concat_rows<T>(t, {x0_m, x0_v});
            for (int k = 0; k < cfg.layers; ++k)
                x = mca_block(t, x, h.blocks[k], cfg.heads, tag_layers ? k : -1);
            return {ops::slice_rows(t, x, 0, 1), ops::slice_rows(t, x, 1, 2)};
        }
        case FusionMechanism::mixer: {
            auto x = ops::concat_rows<T>(t, {x0_m, x0_v});
            for (int k = 0; k < cfg.layers; ++k) x = mixer_block(t, x, h.mixer_blocks[k]);
            return {ops::slice_rows(t, x, 0, 1), ops::slice_rows(t, x, 1, 2)};
        }
    }
    throw std::invalid_argument("fusion_forward: unknown mechanism");
}

/// Lossless export of captured attention maps, keyed "layer.head".
template <typename T>
nlohmann::json extract_attention(const std::vector<AttnRecord<T>>& records,
                                 FusionMechanism mechanism, int layers, int heads) {
    nlohmann::json j;
    j["mechanism"] = to_string(mechanism);
    j["layers"] = layers;
    j["heads"] = heads;
    j["maps"] = nlohmann::json::object();
    for (const auto& rec : records) {
        std::vector<std::vector<double>> rows;
        for (int i = 0; i < rec.probs.rows(); ++i) {
            std::vector<double> row;
            for (int c = 0; c < rec.probs.cols(); ++c)
                row.push_back(static_cast<double>(rec.probs(i, c)));
            rows.push_back(std::move(row));
        }
        j["maps"][std::to_string(rec.layer) + "." + std::to_string(rec.head)] = rows;
    }
    return j;
}

} // namespace indigo
