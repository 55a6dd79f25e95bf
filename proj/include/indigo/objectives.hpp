#pragma once

#include <vector>

#include "indigo/encoders.hpp"

namespace indigo {

struct ClassifierHeadHandles {
    int cm_w = -1, cm_b = -1;
    int cv_w = -1, cv_b = -1;
};

struct SemanticHeadHandles {
    int pm_w = -1, pm_b = -1;
    int pv_w = -1, pv_b = -1;
    int temperature = -1; // sem.temperature, learnable like the bundle's
};

template <typename T>
void init_classifier_heads(ParamStore<T>& store, int token_dim, int n_classes, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(token_dim));
    store.add("heads.cls_m.w", trunc_normal_tensor<T>({token_dim, n_classes}, rng, s));
    store.add("heads.cls_m.b", Tensor<T>({1, n_classes}));
    store.add("heads.cls_v.w", trunc_normal_tensor<T>({token_dim, n_classes}, rng, s));
    store.add("heads.cls_v.b", Tensor<T>({1, n_classes}));
}

template <typename T>
ClassifierHeadHandles resolve_classifier_heads(const ParamStore<T>& store) {
    return {store.require("heads.cls_m.w"), store.require("heads.cls_m.b"),
            store.require("heads.cls_v.w"), store.require("heads.cls_v.b")};
}

template <typename T>
void init_semantic_heads(ParamStore<T>& store, int token_dim, int semantic_dim, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(token_dim));
    store.add("heads.sem_m.w", trunc_normal_tensor<T>({token_dim, semantic_dim}, rng, s));
    store.add("heads.sem_m.b", Tensor<T>({1, semantic_dim}));
    store.add("heads.sem_v.w", trunc_normal_tensor<T>({token_dim, semantic_dim}, rng, s));
    store.add("heads.sem_v.b", Tensor<T>({1, semantic_dim}));
    store.add("sem.temperature", Tensor<T>::scalar(T(1.0 / kInitLogitScale)));
}

template <typename T>
SemanticHeadHandles resolve_semantic_heads(const ParamStore<T>& store) {
    return {store.require("heads.sem_m.w"), store.require("heads.sem_m.b"),
            store.require("heads.sem_v.w"), store.require("heads.sem_v.b"),
            store.require("sem.temperature")};
}

/// lambda * CE(c^M(xK_M), y) + (1 - lambda) * CE(c^V(xK_V), y).
template <typename T>
ops::Id<T> classification_loss(Tape<T>& t, ops::Id<T> xk_m, ops::Id<T> xk_v, int target,
                               const ClassifierHeadHandles& h, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must lie in [0, 1]");
    auto ym = ops::linear(t, xk_m, t.param(h.cm_w), t.param(h.cm_b));
    auto yv = ops::linear(t, xk_v, t.param(h.cv_w), t.param(h.cv_b));
    auto ce_m = ops::cross_entropy(t, ym, target);
    auto ce_v = ops::cross_entropy(t, yv, target);
    return ops::weighted_sum<T>(t, {ce_m, ce_v}, {T(lambda), T(1.0 - lambda)});
}

/// Similarity logits of Eq. 4: z = normalize(p(x)), sim(z, g(t_i)) / tau
/// over all C prompts. The prompt embeddings enter unnormalized unless
/// normalize_prompts is set (deviation flag; see LossConfig).
template <typename T>
ops::Id<T> prompt_logits(Tape<T>& t, ops::Id<T> x, int proj_w, int proj_b,
                         const Tensor<T>& prompt_bank, ops::Id<T> temperature,
                         bool normalize_prompts) {
    auto z = ops::l2_normalize_rows(t, ops::linear(t, x, t.param(proj_w), t.param(proj_b)));
    Tensor<T> bank = prompt_bank;
    if (normalize_prompts) {
        for (int i = 0; i < bank.rows(); ++i) {
            double sq = 0;
            for (int j = 0; j < bank.cols(); ++j) sq += static_cast<double>(bank(i, j)) * bank(i, j);
            const double norm = std::sqrt(sq);
            if (!(norm > 1e-30)) throw std::runtime_error("prompt bank has a zero row");
            for (int j = 0; j < bank.cols(); ++j) bank(i, j) = static_cast<T>(bank(i, j) / norm);
        }
    }
    auto sims = ops::matmul_nt(t, z, t.constant(std::move(bank)));
    return ops::div_by_scalar(t, sims, temperature);
}

/// Semantic alignment loss of Eq. 4: class-prompt softmax under both
/// projected tokens, lambda-weighted cross-entropies.
template <typename T>
ops::Id<T> prompt_alignment_loss(Tape<T>& t, ops::Id<T> xk_m, ops::Id<T> xk_v, int target,
                                 const SemanticHeadHandles& h, const Tensor<T>& prompt_bank,
                                 double lambda, bool normalize_prompts) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must lie in [0, 1]");
    auto lm = prompt_logits(t, xk_m, h.pm_w, h.pm_b, prompt_bank, t.param(h.temperature),
                            normalize_prompts);
    auto lv = prompt_logits(t, xk_v, h.pv_w, h.pv_b, prompt_bank, t.param(h.temperature),
                            normalize_prompts);
    auto ce_m = ops::cross_entropy(t, lm, target);
    auto ce_v = ops::cross_entropy(t, lv, target);
    return ops::weighted_sum<T>(t, {ce_m, ce_v}, {T(lambda), T(1.0 - lambda)});
}

/// Plain softmax of a row tensor at a temperature; used to soften detached
/// teacher logits.
template <typename T>
Tensor<T> softmax_row(const Tensor<T>& logits, double temp = 1.0) {
    Tensor<T> out = logits;
    for (auto& v : out.data) v = static_cast<T>(v / temp);
    kernels::ref::softmax_rows(out.data.data(), out.rows(), out.cols());
    return out;
}

/// DeiT-style soft distillation:
/// (1-alpha) * CE(student, y) + alpha * T^2 * KL(softmax(teacher/T) || softmax(dist/T)).
/// Teacher logits are a detached tensor (no gradient path).
template <typename T>
ops::Id<T> soft_distillation_loss(Tape<T>& t, ops::Id<T> student_logits, ops::Id<T> dist_logits,
                                  const Tensor<T>& teacher_logits, int target,
                                  const LossConfig& cfg) {
    if (cfg.distill_alpha < 0.0 || cfg.distill_alpha > 1.0)
        throw std::invalid_argument("distill_alpha must lie in [0, 1]");
    auto ce = ops::cross_entropy(t, student_logits, target);
    auto teacher_soft = softmax_row(teacher_logits, cfg.distill_temperature);
    auto kl = ops::kl_to_teacher(t, dist_logits, teacher_soft, T(cfg.distill_temperature));
    return ops::weighted_sum<T>(t, {ce, kl}, {T(1.0 - cfg.distill_alpha), T(cfg.distill_alpha)});
}

} // namespace indigo
