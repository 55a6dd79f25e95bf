#pragma once

#include <optional>
#include <string>
#include <vector>

#include "indigo/fusion.hpp"
#include "indigo/objectives.hpp"

namespace indigo {

struct CrossBlockHandles {
    BlockHandles block;
    int ln_kv_scale = -1, ln_kv_shift = -1;
};

/// Everything one run owns: parameters, resolved handles, prompt banks and
/// the frozen-bundle caches. Which members are live depends on the pipeline
/// kind (see build_model).
template <typename T>
struct Model {
    ExperimentConfig cfg;
    int n_classes = 0;

    ViTConfig visual_cfg;
    BundleConfig bundle_cfg;
    FusionConfig fusion_cfg;

    ParamStore<T> store;

    bool has_visual = false, has_bundle = false, has_fusion = false;
    ViTHandles visual;
    BundleHandles bundle;
    FusionHandles fusion;
    ClassifierHeadHandles cls_heads;  // indigo (cls mode)
    SemanticHeadHandles sem_heads;    // indigo (prompt mode)
    int agg_w = -1, agg_b = -1;       // plain CLS heads (visual_agg / early_fusion / cross_attention)
    int adapter_w = -1, adapter_b = -1;             // early fusion: d_e -> d
    int cross_adapter_w = -1, cross_adapter_b = -1; // cross attention: d_mvit -> d
    std::vector<CrossBlockHandles> cross_blocks;
    int linear_w = -1, linear_b = -1; // linear eval head
    int attneval_proj_w = -1, attneval_proj_b = -1;
    std::vector<BlockHandles> attneval_blocks;
    int attneval_head_w = -1, attneval_head_b = -1;
    int student_w = -1, student_b = -1, dist_head_w = -1, dist_head_b = -1; // distillation

    Tensor<T> prompt_bank_text;  // C x d_t: g(t_i), Eq. 4 bank
    Tensor<T> prompt_bank_joint; // C x d_e: h^T(g(t_i)), zero-shot / teacher bank

    // caches over a fixed dataset (frozen bundle only)
    std::vector<Tensor<T>> intrinsic_cache;
    std::vector<Tensor<T>> mvit_tokens_cache;
    std::vector<Tensor<T>> teacher_cache;

    bool bundle_frozen() const { return cfg.pipeline.finetune_mvit == FinetuneMode::frozen; }
    bool uses_bundle() const { return has_bundle; }
};

namespace pipeline_detail {

inline bool kind_uses_bundle(PipelineKind k) { return k != PipelineKind::visual_agg; }

inline bool kind_uses_visual(PipelineKind k) {
    switch (k) {
        case PipelineKind::indigo:
        case PipelineKind::visual_agg:
        case PipelineKind::distillation:
        case PipelineKind::early_fusion:
        case PipelineKind::cross_attention: return true;
        default: return false;
    }
}

inline bool kind_allows_finetune(PipelineKind k) {
    switch (k) {
        case PipelineKind::indigo:
        case PipelineKind::early_fusion:
        case PipelineKind::cross_attention: return true;
        default: return false;
    }
}

} // namespace pipeline_detail

template <typename T>
Model<T> build_model(const ExperimentConfig& cfg, int n_classes, int vocab_size,
                     std::uint64_t init_seed) {
    using pipeline_detail::kind_allows_finetune;
    using pipeline_detail::kind_uses_bundle;
    using pipeline_detail::kind_uses_visual;

    const PipelineKind kind = cfg.pipeline.kind;
    if (cfg.pipeline.finetune_mvit != FinetuneMode::frozen && !kind_allows_finetune(kind))
        throw ConfigError("pipeline.finetune_mvit: " + to_string(cfg.pipeline.finetune_mvit) +
                          " is not valid for pipeline kind " + to_string(kind));

    Model<T> m;
    m.cfg = cfg;
    m.n_classes = n_classes;
    m.fusion_cfg = cfg.fusion;

    m.bundle_cfg.image.image_size = cfg.data.image_size;
    m.bundle_cfg.image.patch = cfg.dims.visual_patch;
    m.bundle_cfg.image.dim = cfg.dims.mvit_dim;
    m.bundle_cfg.image.heads = cfg.dims.mvit_heads;
    m.bundle_cfg.image.depth = cfg.dims.mvit_depth;
    m.bundle_cfg.image.channels = cfg.data.channels;
    m.bundle_cfg.text.vocab_size = vocab_size;
    m.bundle_cfg.text.dim = cfg.dims.text_dim;
    m.bundle_cfg.embed_dim = cfg.dims.embed_dim;

    m.visual_cfg.image_size = cfg.data.image_size;
    m.visual_cfg.patch = cfg.dims.visual_patch;
    m.visual_cfg.dim = cfg.dims.visual_dim;
    m.visual_cfg.heads = cfg.dims.visual_heads;
    m.visual_cfg.depth = cfg.dims.visual_depth;
    m.visual_cfg.channels = cfg.data.channels;
    m.visual_cfg.prefix_tokens =
        (kind == PipelineKind::distillation || kind == PipelineKind::early_fusion) ? 2 : 1;
    m.visual_cfg.learnable_dist = kind == PipelineKind::distillation;

    Rng rng(fold_seed(init_seed, 0x1217ULL));

    // the bundle always comes first so a pretrained stub checkpoint merges
    // by name regardless of pipeline kind
    if (kind_uses_bundle(kind)) {
        init_bundle(m.store, m.bundle_cfg, rng);
        m.has_bundle = true;
    }
    if (kind_uses_visual(kind)) {
        init_vit(m.store, "visual", m.visual_cfg, rng);
        m.has_visual = true;
    }

    const int d = m.visual_cfg.dim;
    const int d_e = m.bundle_cfg.embed_dim;
    const int d_f = cfg.fusion.token_dim;
    const double s_e = 1.0 / std::sqrt(static_cast<double>(d_e));
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));

    switch (kind) {
        case PipelineKind::indigo:
            init_fusion(m.store, m.fusion_cfg, d_e, d, rng);
            m.has_fusion = true;
            init_classifier_heads(m.store, d_f, n_classes, rng);
            init_semantic_heads(m.store, d_f, cfg.dims.semantic_dim, rng);
            break;
        case PipelineKind::visual_agg:
            m.store.add("heads.agg.w", trunc_normal_tensor<T>({d, n_classes}, rng, s_d));
            m.store.add("heads.agg.b", Tensor<T>({1, n_classes}));
            break;
        case PipelineKind::zero_shot:
            break; // nothing trainable
        case PipelineKind::linear_eval:
            m.store.add("heads.linear.w", trunc_normal_tensor<T>({d_e, n_classes}, rng, s_e));
            m.store.add("heads.linear.b", Tensor<T>({1, n_classes}));
            break;
        case PipelineKind::attention_eval: {
            m.store.add("attneval.proj.w", trunc_normal_tensor<T>({d_e, d_f}, rng, s_e));
            m.store.add("attneval.proj.b", Tensor<T>({1, d_f}));
            for (int k = 0; k < m.fusion_cfg.layers; ++k)
                init_block(m.store, "attneval.blocks." + std::to_string(k), d_f, 4, rng);
            m.store.add("attneval.head.w",
                        trunc_normal_tensor<T>({d_f, n_classes}, rng,
                                               1.0 / std::sqrt(static_cast<double>(d_f))));
            m.store.add("attneval.head.b", Tensor<T>({1, n_classes}));
            break;
        }
        case PipelineKind::distillation:
            m.store.add("heads.student.w", trunc_normal_tensor<T>({d, n_classes}, rng, s_d));
            m.store.add("heads.student.b", Tensor<T>({1, n_classes}));
            m.store.add("heads.dist.w", trunc_normal_tensor<T>({d, n_classes}, rng, s_d));
            m.store.add("heads.dist.b", Tensor<T>({1, n_classes}));
            break;
        case PipelineKind::early_fusion:
            m.store.add("early.adapter.w", trunc_normal_tensor<T>({d_e, d}, rng, s_e));
            m.store.add("early.adapter.b", Tensor<T>({1, d}));
            m.store.add("heads.agg.w", trunc_normal_tensor<T>({d, n_classes}, rng, s_d));
            m.store.add("heads.agg.b", Tensor<T>({1, n_classes}));
            break;
        case PipelineKind::cross_attention: {
            const int d_m = m.bundle_cfg.image.dim;
            m.store.add("cross.adapter.w",
                        trunc_normal_tensor<T>({d_m, d}, rng,
                                               1.0 / std::sqrt(static_cast<double>(d_m))));
            m.store.add("cross.adapter.b", Tensor<T>({1, d}));
            const int n_cross = m.visual_cfg.depth / 2; // one cross block per block pair
            for (int k = 0; k < n_cross; ++k) {
                const std::string prefix = "cross.blocks." + std::to_string(k);
                init_block(m.store, prefix, d, 4, rng);
                Tensor<T> ones({d});
                ones.fill(T(1));
                m.store.add(prefix + ".ln_kv.scale", ones);
                m.store.add(prefix + ".ln_kv.shift", Tensor<T>({d}));
            }
            m.store.add("heads.agg.w", trunc_normal_tensor<T>({d, n_classes}, rng, s_d));
            m.store.add("heads.agg.b", Tensor<T>({1, n_classes}));
            break;
        }
    }

    // resolve handles
    if (m.has_bundle) m.bundle = resolve_bundle(m.store, m.bundle_cfg);
    if (m.has_visual) m.visual = resolve_vit(m.store, "visual", m.visual_cfg);
    switch (kind) {
        case PipelineKind::indigo:
            m.fusion = resolve_fusion(m.store, m.fusion_cfg);
            m.cls_heads = resolve_classifier_heads(m.store);
            m.sem_heads = resolve_semantic_heads(m.store);
            break;
        case PipelineKind::visual_agg:
        case PipelineKind::early_fusion:
            m.agg_w = m.store.require("heads.agg.w");
            m.agg_b = m.store.require("heads.agg.b");
            break;
        case PipelineKind::linear_eval:
            m.linear_w = m.store.require("heads.linear.w");
            m.linear_b = m.store.require("heads.linear.b");
            break;
        case PipelineKind::attention_eval:
            m.attneval_proj_w = m.store.require("attneval.proj.w");
            m.attneval_proj_b = m.store.require("attneval.proj.b");
            for (int k = 0; k < m.fusion_cfg.layers; ++k)
                m.attneval_blocks.push_back(
                    resolve_block(m.store, "attneval.blocks." + std::to_string(k)));
            m.attneval_head_w = m.store.require("attneval.head.w");
            m.attneval_head_b = m.store.require("attneval.head.b");
            break;
        case PipelineKind::distillation:
            m.student_w = m.store.require("heads.student.w");
            m.student_b = m.store.require("heads.student.b");
            m.dist_head_w = m.store.require("heads.dist.w");
            m.dist_head_b = m.store.require("heads.dist.b");
            break;
        case PipelineKind::cross_attention: {
            m.cross_adapter_w = m.store.require("cross.adapter.w");
            m.cross_adapter_b = m.store.require("cross.adapter.b");
            const int n_cross = m.visual_cfg.depth / 2;
            for (int k = 0; k < n_cross; ++k) {
                const std::string prefix = "cross.blocks." + std::to_string(k);
                CrossBlockHandles cb;
                cb.block = resolve_block(m.store, prefix);
                cb.ln_kv_scale = m.store.require(prefix + ".ln_kv.scale");
                cb.ln_kv_shift = m.store.require(prefix + ".ln_kv.shift");
                m.cross_blocks.push_back(cb);
            }
            m.agg_w = m.store.require("heads.agg.w");
            m.agg_b = m.store.require("heads.agg.b");
            break;
        }
        case PipelineKind::zero_shot:
            break;
    }

    if (kind == PipelineKind::early_fusion) {
        m.adapter_w = m.store.require("early.adapter.w");
        m.adapter_b = m.store.require("early.adapter.b");
    }
    return m;
}

inline bool is_bundle_param(const std::string& name) {
    return name.rfind("mvit.", 0) == 0 || name.rfind("text.", 0) == 0 ||
           name.rfind("img_proj.", 0) == 0 || name.rfind("txt_proj.", 0) == 0 ||
           name == "temperature";
}

/// Parameter names the finetune mode unlocks inside the bundle.
inline bool bundle_name_in_finetune_mask(const std::string& name, FinetuneMode mode,
                                         int mvit_depth) {
    if (mode == FinetuneMode::frozen) return false;
    if (mode == FinetuneMode::norm_layers) {
        if (name.rfind("mvit.blocks.", 0) != 0) return false;
        return name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos;
    }
    // last_layer: final image-encoder block plus the image projection
    const std::string last_block = "mvit.blocks." + std::to_string(mvit_depth - 1) + ".";
    return name.rfind(last_block, 0) == 0 || name.rfind("img_proj.", 0) == 0;
}

/// Freeze the bundle per the finetune mode and disable heads that the loss
/// mode never trains (sem.temperature only learns under the prompt loss).
template <typename T>
void apply_trainability(Model<T>& m) {
    const FinetuneMode mode = m.cfg.pipeline.finetune_mvit;
    const int depth = m.bundle_cfg.image.depth;
    m.store.set_trainable_where([&](const std::string& name) {
        if (is_bundle_param(name)) return bundle_name_in_finetune_mask(name, mode, depth);
        if (name == "sem.temperature") return m.cfg.pipeline.loss_mode == LossMode::prompt;
        return true;
    });
}

/// g(t_i) and h^T(g(t_i)) rows for every class prompt "a photo of <class>".
template <typename T>
void compute_prompt_banks(Model<T>& m, const Vocab& vocab,
                          const std::vector<std::string>& class_names) {
    if (!m.has_bundle) return;
    m.prompt_bank_text = Tensor<T>({m.n_classes, m.bundle_cfg.text.dim});
    m.prompt_bank_joint = Tensor<T>({m.n_classes, m.bundle_cfg.embed_dim});
    for (int c = 0; c < m.n_classes; ++c) {
        const auto ids = prompt_token_ids(vocab, class_names[c]);
        Tape<T> t(&m.store);
        auto g = text_embedding(t, m.bundle.txt, ids);
        auto joint = ops::linear(t, g, t.param(m.bundle.txt_proj_w), t.param(m.bundle.txt_proj_b));
        for (int j = 0; j < m.bundle_cfg.text.dim; ++j) m.prompt_bank_text(c, j) = t.val(g)(0, j);
        for (int j = 0; j < m.bundle_cfg.embed_dim; ++j)
            m.prompt_bank_joint(c, j) = t.val(joint)(0, j);
    }
}

/// Teacher logits for distillation: the bundle's zero-shot head, i.e.
/// cosine similarity against the joint prompt bank scaled by 1/tau.
template <typename T>
Tensor<T> zero_shot_logits(const Model<T>& m, const Tensor<T>& intrinsic) {
    const int c = m.n_classes;
    const int d_e = m.bundle_cfg.embed_dim;
    Tensor<T> logits({1, c});
    double inorm = 0;
    for (int j = 0; j < d_e; ++j) inorm += static_cast<double>(intrinsic.data[j]) * intrinsic.data[j];
    inorm = std::sqrt(inorm);
    if (!(inorm > 1e-30)) throw std::runtime_error("zero-shot: zero-norm intrinsic embedding");
    const double tau = static_cast<double>(m.store.value(m.bundle.temperature).data[0]);
    for (int k = 0; k < c; ++k) {
        double pnorm = 0, dot = 0;
        for (int j = 0; j < d_e; ++j) {
            pnorm += static_cast<double>(m.prompt_bank_joint(k, j)) * m.prompt_bank_joint(k, j);
            dot += static_cast<double>(intrinsic.data[j]) * m.prompt_bank_joint(k, j);
        }
        pnorm = std::sqrt(pnorm);
        if (!(pnorm > 1e-30)) throw std::runtime_error("zero-shot: zero-norm prompt embedding");
        logits(0, k) = static_cast<T>(dot / (inorm * pnorm) / tau);
    }
    return logits;
}

/// Ties break to the lowest class id.
template <typename T>
int predict_from_logits(const Tensor<T>& logits) {
    if (logits.numel() < 1) throw std::invalid_argument("predict: empty logits");
    int best = 0;
    for (long j = 1; j < logits.numel(); ++j)
        if (logits.data[j] > logits.data[best]) best = static_cast<int>(j);
    return best;
}

/// Precompute whatever the frozen bundle contributes per sample.
template <typename T>
void precompute_caches(Model<T>& m, const DomainDataset& ds) {
    if (!m.has_bundle || !m.bundle_frozen()) return;
    const PipelineKind kind = m.cfg.pipeline.kind;
    const int n = static_cast<int>(ds.samples.size());
    const bool want_intrinsic = kind != PipelineKind::cross_attention;
    const bool want_tokens = kind == PipelineKind::cross_attention;
    const bool want_teacher = kind == PipelineKind::distillation;
    if (want_intrinsic) m.intrinsic_cache.assign(n, Tensor<T>{});
    if (want_tokens) m.mvit_tokens_cache.assign(n, Tensor<T>{});
    if (want_teacher) m.teacher_cache.assign(n, Tensor<T>{});
    // samples are independent; fixed output slots keep results identical
    // for any thread count
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        Tape<T> t(&m.store);
        auto tokens = patchify(t, ds.samples[i], m.bundle_cfg.image, m.bundle.img);
        auto out = vit_forward(t, tokens, m.bundle_cfg.image, m.bundle.img);
        if (want_tokens) m.mvit_tokens_cache[i] = t.val(out.tokens);
        if (want_intrinsic || want_teacher) {
            auto e = ops::linear(t, out.cls, t.param(m.bundle.img_proj_w),
                                 t.param(m.bundle.img_proj_b));
            if (want_intrinsic) m.intrinsic_cache[i] = t.val(e);
            if (want_teacher) m.teacher_cache[i] = zero_shot_logits(m, t.val(e));
        }
    }
}

/// Per-sample inputs resolved against the caches. sample_index < 0 forces
/// on-tape computation (used when the bundle is being finetuned).
template <typename T>
struct SampleRef {
    const ImageSample* image = nullptr;
    int sample_index = -1;
};

template <typename T>
struct PipelineOut {
    ops::Id<T> loss = -1;
    ops::Id<T> logits_m = -1; // primary prediction head
    ops::Id<T> logits_v = -1; // secondary head (indigo reporting)
    ops::Id<T> student = -1;
    ops::Id<T> dist = -1;
};

namespace pipeline_detail {

/// Intrinsic embedding from cache when frozen, through the tape otherwise.
template <typename T>
ops::Id<T> intrinsic_node(Tape<T>& t, Model<T>& m, const SampleRef<T>& s) {
    if (m.bundle_frozen() && s.sample_index >= 0 &&
        s.sample_index < static_cast<int>(m.intrinsic_cache.size()))
        return t.constant(m.intrinsic_cache[s.sample_index]);
    return intrinsic_embedding(t, *s.image, m.bundle_cfg, m.bundle);
}

template <typename T>
ops::Id<T> mvit_tokens_node(Tape<T>& t, Model<T>& m, const SampleRef<T>& s) {
    if (m.bundle_frozen() && s.sample_index >= 0 &&
        s.sample_index < static_cast<int>(m.mvit_tokens_cache.size()))
        return t.constant(m.mvit_tokens_cache[s.sample_index]);
    auto tokens = patchify(t, *s.image, m.bundle_cfg.image, m.bundle.img);
    return vit_forward(t, tokens, m.bundle_cfg.image, m.bundle.img).tokens;
}

template <typename T>
Tensor<T> teacher_logits_for(Tape<T>& t, Model<T>& m, const SampleRef<T>& s) {
    if (m.bundle_frozen() && s.sample_index >= 0 &&
        s.sample_index < static_cast<int>(m.teacher_cache.size()))
        return m.teacher_cache[s.sample_index];
    Tape<T> detached(&m.store); // teacher never carries gradients
    auto tokens = patchify(detached, *s.image, m.bundle_cfg.image, m.bundle.img);
    auto out = vit_forward(detached, tokens, m.bundle_cfg.image, m.bundle.img);
    auto e = ops::linear(detached, out.cls, detached.param(m.bundle.img_proj_w),
                         detached.param(m.bundle.img_proj_b));
    (void)t;
    return zero_shot_logits(m, detached.val(e));
}

/// Cross-attention block: queries from the visual tokens, keys/values from
/// the (adapted) multimodal tokens, residual + FFN.
template <typename T>
ops::Id<T> cross_block(Tape<T>& t, ops::Id<T> x_q, ops::Id<T> x_kv, const CrossBlockHandles& h,
                       int heads, int layer_tag = -1) {
    const int dim = t.val(x_q).cols();
    const int hd = dim / heads;
    auto nq = ops::layernorm(t, x_q, t.param(h.block.ln1_scale), t.param(h.block.ln1_shift),
                             T(kLayerNormEps));
    auto nkv = ops::layernorm(t, x_kv, t.param(h.ln_kv_scale), t.param(h.ln_kv_shift),
                              T(kLayerNormEps));
    auto q = ops::linear(t, nq, t.param(h.block.wq), t.param(h.block.bq));
    auto k = ops::linear(t, nkv, t.param(h.block.wk), t.param(h.block.bk));
    auto v = ops::linear(t, nkv, t.param(h.block.wv), t.param(h.block.bv));
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
    auto attn_out = ops::linear(t, merged, t.param(h.block.wo), t.param(h.block.bo));
    auto mid = ops::add(t, x_q, attn_out);
    auto normed2 = ops::layernorm(t, mid, t.param(h.block.ln2_scale), t.param(h.block.ln2_shift),
                                  T(kLayerNormEps));
    auto hidden = ops::gelu(t, ops::linear(t, normed2, t.param(h.block.w1), t.param(h.block.b1)));
    auto ffn_out = ops::linear(t, hidden, t.param(h.block.w2), t.param(h.block.b2));
    return ops::add(t, mid, ffn_out);
}

} // namespace pipeline_detail

/// One forward pass of the configured pipeline. `target < 0` skips the loss
/// (pure inference). Attention maps land in the tape's capture list when
/// enabled.
template <typename T>
PipelineOut<T> pipeline_forward(Tape<T>& t, Model<T>& m, const SampleRef<T>& s, int target) {
    using namespace pipeline_detail;
    PipelineOut<T> out;
    const auto kind = m.cfg.pipeline.kind;
    const double lambda = m.cfg.loss.lambda;

    switch (kind) {
        case PipelineKind::indigo: {
            auto intrinsic = intrinsic_node(t, m, s);
            auto tokens = patchify(t, *s.image, m.visual_cfg, m.visual);
            auto vis = vit_forward(t, tokens, m.visual_cfg, m.visual, 0, t.attn_capture != nullptr);
            auto [x0m, x0v] = project_modalities(t, intrinsic, vis.cls, m.fusion);
            auto fused = fusion_forward(t, x0m, x0v, m.fusion_cfg, m.fusion, t.attn_capture != nullptr);
            if (m.cfg.pipeline.loss_mode == LossMode::cls) {
                out.logits_m = ops::linear(t, fused.xk_m, t.param(m.cls_heads.cm_w), t.param(m.cls_heads.cm_b));
                out.logits_v = ops::linear(t, fused.xk_v, t.param(m.cls_heads.cv_w), t.param(m.cls_heads.cv_b));
                if (target >= 0) {
                    auto ce_m = ops::cross_entropy(t, out.logits_m, target);
                    auto ce_v = ops::cross_entropy(t, out.logits_v, target);
                    out.loss = ops::weighted_sum<T>(t, {ce_m, ce_v}, {T(lambda), T(1.0 - lambda)});
                }
            } else {
                out.logits_m = prompt_logits(t, fused.xk_m, m.sem_heads.pm_w, m.sem_heads.pm_b,
                                             m.prompt_bank_text, t.param(m.sem_heads.temperature),
                                             m.cfg.loss.normalize_prompts);
                out.logits_v = prompt_logits(t, fused.xk_v, m.sem_heads.pv_w, m.sem_heads.pv_b,
                                             m.prompt_bank_text, t.param(m.sem_heads.temperature),
                                             m.cfg.loss.normalize_prompts);
                if (target >= 0) {
                    auto ce_m = ops::cross_entropy(t, out.logits_m, target);
                    auto ce_v = ops::cross_entropy(t, out.logits_v, target);
                    out.loss = ops::weighted_sum<T>(t, {ce_m, ce_v}, {T(lambda), T(1.0 - lambda)});
                }
            }
            return out;
        }
        case PipelineKind::visual_agg: {
            auto tokens = patchify(t, *s.image, m.visual_cfg, m.visual);
            auto vis = vit_forward(t, tokens, m.visual_cfg, m.visual, 0, t.attn_capture != nullptr);
            out.logits_m = ops::linear(t, vis.cls, t.param(m.agg_w), t.param(m.agg_b));
            if (target >= 0) out.loss = ops::cross_entropy(t, out.logits_m, target);
            return out;
        }
        case PipelineKind::zero_shot: {
            auto intrinsic = intrinsic_node(t, m, s);
            out.logits_m = t.constant(zero_shot_logits(m, t.val(intrinsic)));
            // zero-shot forbids training: no loss is ever built
            return out;
        }
        case PipelineKind::linear_eval: {
            auto intrinsic = intrinsic_node(t, m, s);
            out.logits_m = ops::linear(t, intrinsic, t.param(m.linear_w), t.param(m.linear_b));
            if (target >= 0) out.loss = ops::cross_entropy(t, out.logits_m, target);
            return out;
        }
        case PipelineKind::attention_eval: {
            auto intrinsic = intrinsic_node(t, m, s);
            auto x = ops::linear(t, intrinsic, t.param(m.attneval_proj_w), t.param(m.attneval_proj_b));
            for (int k = 0; k < static_cast<int>(m.attneval_blocks.size()); ++k)
                x = transformer_block(t, x, m.attneval_blocks[k], m.fusion_cfg.heads,
                                      t.attn_capture ? k : -1);
            out.logits_m = ops::linear(t, x, t.param(m.attneval_head_w), t.param(m.attneval_head_b));
            if (target >= 0) out.loss = ops::cross_entropy(t, out.logits_m, target);
            return out;
        }
        case PipelineKind::distillation: {
            auto tokens = patchify(t, *s.image, m.visual_cfg, m.visual);
            auto vis = vit_forward(t, tokens, m.visual_cfg, m.visual, 0, t.attn_capture != nullptr);
            auto cls_repr = ops::slice_rows(t, vis.tokens, 0, 1);
            auto dist_repr = ops::slice_rows(t, vis.tokens, 1, 2);
            out.student = ops::linear(t, cls_repr, t.param(m.student_w), t.param(m.student_b));
            out.dist = ops::linear(t, dist_repr, t.param(m.dist_head_w), t.param(m.dist_head_b));
            out.logits_m = out.student;
            out.logits_v = out.dist;
            if (target >= 0) {
                Tensor<T> teacher = pipeline_detail::teacher_logits_for(t, m, s);
                out.loss = soft_distillation_loss(t, out.student, out.dist, teacher, target, m.cfg.loss);
            }
            return out;
        }
        case PipelineKind::early_fusion: {
            auto intrinsic = intrinsic_node(t, m, s);
            auto dist_token = ops::linear(t, intrinsic, t.param(m.adapter_w), t.param(m.adapter_b));
            auto tokens = patchify(t, *s.image, m.visual_cfg, m.visual, dist_token);
            auto vis = vit_forward(t, tokens, m.visual_cfg, m.visual, 0, t.attn_capture != nullptr);
            out.logits_m = ops::linear(t, vis.cls, t.param(m.agg_w), t.param(m.agg_b));
            if (target >= 0) out.loss = ops::cross_entropy(t, out.logits_m, target);
            return out;
        }
        case PipelineKind::cross_attention: {
            auto mv_tokens = mvit_tokens_node(t, m, s);
            auto adapted = ops::linear(t, mv_tokens, t.param(m.cross_adapter_w), t.param(m.cross_adapter_b));
            auto tokens = patchify(t, *s.image, m.visual_cfg, m.visual);
            auto x = tokens;
            const int n_cross = static_cast<int>(m.cross_blocks.size());
            int block = 0;
            for (int p = 0; p < n_cross; ++p) {
                x = transformer_block(t, x, m.visual.blocks[block++], m.visual_cfg.heads);
                x = transformer_block(t, x, m.visual.blocks[block++], m.visual_cfg.heads);
                x = pipeline_detail::cross_block(t, x, adapted, m.cross_blocks[p], m.visual_cfg.heads,
                                                 t.attn_capture ? p : -1);
            }
            while (block < m.visual_cfg.depth)
                x = transformer_block(t, x, m.visual.blocks[block++], m.visual_cfg.heads);
            auto cls_repr = ops::slice_rows(t, x, 0, 1);
            out.logits_m = ops::linear(t, cls_repr, t.param(m.agg_w), t.param(m.agg_b));
            if (target >= 0) out.loss = ops::cross_entropy(t, out.logits_m, target);
            return out;
        }
    }
    throw std::invalid_argument("pipeline_forward: unknown pipeline kind");
}

/// Class prediction for one sample under the pipeline's inference rule.
/// Distillation averages the two heads' softmax outputs (DeiT convention);
/// everything else takes the primary head's argmax.
template <typename T>
int predict_sample(Model<T>& m, const SampleRef<T>& s) {
    Tape<T> t(&m.store);
    auto out = pipeline_forward(t, m, s, /*target=*/-1);
    if (m.cfg.pipeline.kind == PipelineKind::distillation) {
        Tensor<T> ps = softmax_row(t.val(out.student));
        Tensor<T> pd = softmax_row(t.val(out.dist));
        Tensor<T> mean({1, m.n_classes});
        for (int j = 0; j < m.n_classes; ++j) mean(0, j) = (ps.data[j] + pd.data[j]) / T(2);
        return predict_from_logits(mean);
    }
    return predict_from_logits(t.val(out.logits_m));
}

} // namespace indigo
