#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "indigo/fusion.hpp"
#include "indigo/objectives.hpp"
#include "testutil.hpp"

using namespace indigo;
using testutil::check_gradients;
using testutil::random_tensor;

TEST_CASE("cross entropy: hand softmax oracle for [2,0,0] target 0") {
    ParamStore<double> store;
    store.add("logits", Tensor<double>::row_vector({2.0, 0.0, 0.0}));
    Tape<double> t(&store);
    const double got = t.val(ops::cross_entropy(t, t.param("logits"), 0)).data[0];
    const double want = -std::log(std::exp(2.0) / (std::exp(2.0) + 2.0));
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

namespace {

struct HeadsFixture {
    ParamStore<double> store;
    ClassifierHeadHandles cls;
    SemanticHeadHandles sem;
    Tensor<double> prompt_bank;
    int token_dim, n_classes, sem_dim;

    HeadsFixture(int d_f, int c, int d_s, std::uint64_t seed) : token_dim(d_f), n_classes(c), sem_dim(d_s) {
        Rng rng(seed);
        init_classifier_heads(store, d_f, c, rng);
        init_semantic_heads(store, d_f, d_s, rng);
        // head weights at a useful scale
        for (const char* n : {"heads.cls_m.w", "heads.cls_v.w", "heads.sem_m.w", "heads.sem_v.w"})
            store.value(n) = random_tensor(store.value(n).shape, rng, 0.8);
        cls = resolve_classifier_heads(store);
        sem = resolve_semantic_heads(store);
        prompt_bank = random_tensor({c, d_s}, rng);
    }
};

double eval_cls_loss(HeadsFixture& f, const Tensor<double>& xm, const Tensor<double>& xv,
                     int target, double lambda) {
    Tape<double> t(&f.store);
    return t.val(classification_loss(t, t.constant(xm), t.constant(xv), target, f.cls, lambda))
        .data[0];
}

double eval_prompt_loss(HeadsFixture& f, const Tensor<double>& xm, const Tensor<double>& xv,
                        int target, double lambda, bool normalize = false) {
    Tape<double> t(&f.store);
    return t.val(prompt_alignment_loss(t, t.constant(xm), t.constant(xv), target, f.sem,
                                       f.prompt_bank, lambda, normalize))
        .data[0];
}

} // namespace

TEST_CASE("classification loss: lambda endpoints and exact linearity") {
    HeadsFixture f(6, 4, 5, 50);
    Rng rng(51);
    auto xm = random_tensor({1, 6}, rng);
    auto xv = random_tensor({1, 6}, rng);
    const int y = 2;

    // endpoints: lambda = 1 is the multimodal CE alone, lambda = 0 the visual CE
    auto ce_of = [&](const char* wname, const char* bname) {
        Tape<double> t(&f.store);
        auto logits = ops::linear(t, t.constant(wname[6] == 'c' && wname[10] == 'm' ? xm : xv),
                                  t.param(wname), t.param(bname));
        return t.val(ops::cross_entropy(t, logits, y)).data[0];
    };
    const double lm = ce_of("heads.cls_m.w", "heads.cls_m.b");
    const double lv = ce_of("heads.cls_v.w", "heads.cls_v.b");
    CHECK(eval_cls_loss(f, xm, xv, y, 1.0) == doctest::Approx(lm).epsilon(1e-12));
    CHECK(eval_cls_loss(f, xm, xv, y, 0.0) == doctest::Approx(lv).epsilon(1e-12));

    // linearity in lambda: 0.3 mix and three-point collinearity at 1e-10
    const double l03 = eval_cls_loss(f, xm, xv, y, 0.3);
    CHECK(l03 == doctest::Approx(0.3 * lm + 0.7 * lv).epsilon(1e-12));
    const double l05 = eval_cls_loss(f, xm, xv, y, 0.5);
    const double l08 = eval_cls_loss(f, xm, xv, y, 0.8);
    CHECK(std::abs((l08 - l05) / 0.3 - (l05 - l03) / 0.2) < 1e-10);
}

TEST_CASE("prompt alignment loss: degenerate prompts, scale invariance, oracle") {
    SUBCASE("identical prompts give a uniform distribution and loss ln C") {
        HeadsFixture f(6, 5, 4, 52);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 4; ++j) f.prompt_bank(i, j) = (j == 0 ? 1.5 : -0.25);
        Rng rng(53);
        auto xm = random_tensor({1, 6}, rng);
        auto xv = random_tensor({1, 6}, rng);
        CHECK(eval_prompt_loss(f, xm, xv, 1, 0.6) ==
              doctest::Approx(std::log(5.0)).epsilon(1e-10));
    }

    SUBCASE("scaling xK_M leaves the normalized prediction unchanged") {
        HeadsFixture f(6, 3, 4, 54);
        f.store.value("heads.sem_m.b").fill(0.0); // bias breaks positive homogeneity
        Rng rng(55);
        auto xm = random_tensor({1, 6}, rng);
        auto xv = random_tensor({1, 6}, rng);
        auto scaled = xm;
        for (auto& v : scaled.data) v *= 7.3;
        CHECK(eval_prompt_loss(f, xm, xv, 2, 1.0) ==
              doctest::Approx(eval_prompt_loss(f, scaled, xv, 2, 1.0)).epsilon(1e-10));
    }

    SUBCASE("C=3 random case matches the normalize-dot-softmax-CE oracle") {
        HeadsFixture f(5, 3, 4, 56);
        Rng rng(57);
        auto xm = random_tensor({1, 5}, rng);
        auto xv = random_tensor({1, 5}, rng);
        const int y = 1;
        const double lambda = 0.35;

        auto head_ce = [&](const Tensor<double>& x, const char* wn, const char* bn) {
            const auto& w = f.store.value(wn);
            const auto& b = f.store.value(bn);
            std::vector<double> z(4, 0.0);
            for (int j = 0; j < 4; ++j) {
                z[j] = b.data[j];
                for (int i = 0; i < 5; ++i) z[j] += x.data[i] * w(i, j);
            }
            double norm = 0;
            for (double v : z) norm += v * v;
            norm = std::sqrt(norm);
            const double tau = f.store.value("sem.temperature").data[0];
            std::vector<double> logits(3);
            for (int c = 0; c < 3; ++c) {
                double dot = 0;
                for (int j = 0; j < 4; ++j) dot += (z[j] / norm) * f.prompt_bank(c, j);
                logits[c] = dot / tau;
            }
            double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0;
            for (double l : logits) sum += std::exp(l - mx);
            return -(logits[y] - mx - std::log(sum));
        };
        const double want = lambda * head_ce(xm, "heads.sem_m.w", "heads.sem_m.b") +
                            (1 - lambda) * head_ce(xv, "heads.sem_v.w", "heads.sem_v.b");
        CHECK(eval_prompt_loss(f, xm, xv, y, lambda) == doctest::Approx(want).epsilon(1e-10));
    }

    SUBCASE("zero-norm projection errors out") {
        HeadsFixture f(5, 3, 4, 58);
        f.store.value("heads.sem_m.b").fill(0.0);
        Tensor<double> zero({1, 5});
        Rng rng(59);
        auto xv = random_tensor({1, 5}, rng);
        CHECK_THROWS_AS(eval_prompt_loss(f, zero, xv, 0, 1.0), std::runtime_error);
    }

    SUBCASE("lambda linearity holds for the prompt form as well") {
        HeadsFixture f(6, 4, 5, 60);
        Rng rng(61);
        auto xm = random_tensor({1, 6}, rng);
        auto xv = random_tensor({1, 6}, rng);
        const double l0 = eval_prompt_loss(f, xm, xv, 3, 0.0);
        const double l1 = eval_prompt_loss(f, xm, xv, 3, 1.0);
        const double lmid = eval_prompt_loss(f, xm, xv, 3, 0.4);
        CHECK(std::abs(lmid - (0.4 * l1 + 0.6 * l0)) < 1e-10);
    }
}

TEST_CASE("soft distillation: endpoints, KL identity, hand oracle") {
    LossConfig cfg;
    cfg.distill_temperature = 1.0;
    cfg.distill_alpha = 0.5;

    ParamStore<double> store;
    store.add("student", Tensor<double>::row_vector({0.7, -0.4}));
    store.add("dist", Tensor<double>::row_vector({0.2, 0.9}));
    Tensor<double> teacher = Tensor<double>::row_vector({1.1, -0.6});

    SUBCASE("alpha = 0 is pure CE on the student") {
        LossConfig c0 = cfg;
        c0.distill_alpha = 0.0;
        Tape<double> t(&store);
        auto loss = soft_distillation_loss(t, t.param("student"), t.param("dist"), teacher, 0, c0);
        Tape<double> t2(&store);
        auto ce = ops::cross_entropy(t2, t2.param("student"), 0);
        CHECK(t.val(loss).data[0] == doctest::Approx(t2.val(ce).data[0]).epsilon(1e-12));
    }

    SUBCASE("dist logits equal to teacher logits make the KL term vanish") {
        LossConfig c1 = cfg;
        c1.distill_alpha = 1.0;
        ParamStore<double> s2;
        s2.add("dist", teacher);
        Tape<double> t(&s2);
        auto loss = soft_distillation_loss(t, t.param("dist"), t.param("dist"), teacher, 0, c1);
        CHECK(t.val(loss).data[0] == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("C=2, T=1, known logits match the explicit KL oracle") {
        Tape<double> t(&store);
        auto loss = soft_distillation_loss(t, t.param("student"), t.param("dist"), teacher, 1, cfg);
        // by hand: p = softmax(teacher), q = softmax(dist), ce = -log softmax(student)[1]
        auto sm2 = [](double a, double b) {
            const double ea = std::exp(a), eb = std::exp(b);
            return std::pair<double, double>{ea / (ea + eb), eb / (ea + eb)};
        };
        auto [p0, p1] = sm2(1.1, -0.6);
        auto [q0, q1] = sm2(0.2, 0.9);
        auto [s0, s1] = sm2(0.7, -0.4);
        (void)s0;
        const double kl = p0 * std::log(p0 / q0) + p1 * std::log(p1 / q1);
        const double want = 0.5 * (-std::log(s1)) + 0.5 * kl;
        CHECK(t.val(loss).data[0] == doctest::Approx(want).epsilon(1e-12));
    }

    SUBCASE("KL term is strictly positive for differing distributions") {
        LossConfig c1 = cfg;
        c1.distill_alpha = 1.0;
        c1.distill_temperature = 2.0;
        Tape<double> t(&store);
        auto loss = soft_distillation_loss(t, t.param("student"), t.param("dist"), teacher, 0, c1);
        CHECK(t.val(loss).data[0] > 0.0);
    }
}

TEST_CASE("softmax outputs in this module are distributions") {
    HeadsFixture f(6, 5, 4, 70);
    Rng rng(71);
    auto xm = random_tensor({1, 6}, rng);
    Tape<double> t(&f.store);
    auto logits = prompt_logits(t, t.constant(xm), f.sem.pm_w, f.sem.pm_b, f.prompt_bank,
                                t.param(f.sem.temperature), false);
    auto probs = ops::softmax_rows(t, logits);
    double sum = 0;
    for (int c = 0; c < 5; ++c) {
        const double p = t.val(probs)(0, c);
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("loss gradients through the full fusion stack match finite differences") {
    // fusion + projections + heads end to end, all three loss forms
    FusionConfig fcfg;
    fcfg.mechanism = FusionMechanism::msa;
    fcfg.layers = 1;
    fcfg.heads = 2;
    fcfg.token_dim = 8;

    ParamStore<double> store;
    Rng rng(72);
    init_fusion(store, fcfg, 5, 6, rng);
    init_classifier_heads(store, 8, 3, rng);
    init_semantic_heads(store, 8, 4, rng);
    auto fh = resolve_fusion(store, fcfg);
    auto ch = resolve_classifier_heads(store);
    auto sh = resolve_semantic_heads(store);

    auto intr = random_tensor({1, 5}, rng);
    auto vis = random_tensor({1, 6}, rng);
    auto bank = random_tensor({3, 4}, rng);
    const int y = 1;

    auto run_check = [&](auto&& make_loss, double tol) {
        auto loss_fn = [&]() {
            Tape<double> t(&store);
            return t.val(make_loss(t)).data[0];
        };
        auto grad_fn = [&]() {
            GradSink<double> sink(store.size());
            Tape<double> t(&store);
            t.backward(make_loss(t), 1.0, &sink);
            return sink;
        };
        Rng crng(73);
        auto res = check_gradients(store, loss_fn, grad_fn, crng, /*per_tensor=*/4);
        INFO("worst: ", res.worst);
        CHECK(res.max_rel_err < tol);
    };

    run_check([&](Tape<double>& t) {
        auto [x0m, x0v] = project_modalities(t, t.constant(intr), t.constant(vis), fh);
        auto out = fusion_forward(t, x0m, x0v, fcfg, fh);
        return classification_loss(t, out.xk_m, out.xk_v, y, ch, 0.4);
    }, 1e-4);

    run_check([&](Tape<double>& t) {
        auto [x0m, x0v] = project_modalities(t, t.constant(intr), t.constant(vis), fh);
        auto out = fusion_forward(t, x0m, x0v, fcfg, fh);
        return prompt_alignment_loss(t, out.xk_m, out.xk_v, y, sh, bank, 0.7, false);
    }, 1e-4);

    Tensor<double> teacher = random_tensor({1, 3}, rng);
    LossConfig lcfg;
    run_check([&](Tape<double>& t) {
        auto [x0m, x0v] = project_modalities(t, t.constant(intr), t.constant(vis), fh);
        auto out = fusion_forward(t, x0m, x0v, fcfg, fh);
        auto student = ops::linear(t, out.xk_m, t.param(ch.cm_w), t.param(ch.cm_b));
        auto dist = ops::linear(t, out.xk_v, t.param(ch.cv_w), t.param(ch.cv_b));
        return soft_distillation_loss(t, student, dist, teacher, y, lcfg);
    }, 1e-4);
}
