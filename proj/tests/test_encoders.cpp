#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "indigo/encoders.hpp"
#include "testutil.hpp"

using namespace indigo;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

ImageSample random_image(int size, int channels, Rng& rng, int class_id = 0, int domain_id = 0) {
    ImageSample img;
    img.height = size;
    img.width = size;
    img.channels = channels;
    img.class_id = class_id;
    img.domain_id = domain_id;
    img.pixels.resize(static_cast<std::size_t>(size) * size * channels);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

void zero_block_weights(ParamStore<double>& store, const std::string& prefix) {
    for (const char* n : {".msa.wq", ".msa.wk", ".msa.wv", ".msa.wo", ".msa.bq", ".msa.bk",
                          ".msa.bv", ".msa.bo", ".ffn.w1", ".ffn.b1", ".ffn.w2", ".ffn.b2"})
        store.value(prefix + n).fill(0.0);
}

// Independent oracle: per-patch pixel loop, explicit matrix-vector product,
// explicit additions. No shared code with patchify().
std::vector<std::vector<double>> patchify_oracle(const ImageSample& img, const ViTConfig& cfg,
                                                 const ParamStore<double>& store,
                                                 const std::string& prefix) {
    const auto& w = store.value(prefix + ".patch_embed.w");
    const auto& b = store.value(prefix + ".patch_embed.b");
    const auto& cls = store.value(prefix + ".cls");
    const auto& pos = store.value(prefix + ".pos");
    std::vector<std::vector<double>> out;
    std::vector<double> row0(cfg.dim);
    for (int j = 0; j < cfg.dim; ++j) row0[j] = cls.data[j] + pos(0, j);
    out.push_back(row0);
    const int side = img.height / cfg.patch;
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            std::vector<double> flat;
            for (int y = 0; y < cfg.patch; ++y)
                for (int x = 0; x < cfg.patch; ++x)
                    for (int c = 0; c < cfg.channels; ++c)
                        flat.push_back(img.pixel(py * cfg.patch + y, px * cfg.patch + x, c));
            std::vector<double> row(cfg.dim);
            for (int j = 0; j < cfg.dim; ++j) {
                double acc = b.data[j];
                for (std::size_t i = 0; i < flat.size(); ++i) acc += flat[i] * w(static_cast<int>(i), j);
                row[j] = acc + pos(py * side + px + 1, j);
            }
            out.push_back(row);
        }
    return out;
}

} // namespace

TEST_CASE("patchify: token count is 1 + (H/p)(W/p)") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.dim = 6;
    cfg.heads = 2;
    cfg.depth = 0;
    cfg.channels = 1;
    ParamStore<double> store;
    Rng rng(1);
    init_vit(store, "visual", cfg, rng);
    auto h = resolve_vit(store, "visual", cfg);
    Rng irng(2);
    auto img = random_image(8, 1, irng);
    Tape<double> t(&store);
    auto tokens = patchify(t, img, cfg, h);
    CHECK(t.val(tokens).rows() == 5);
    CHECK(t.val(tokens).cols() == 6);
}

TEST_CASE("patchify: zero image, zero bias and pos embeds") {
    ViTConfig cfg;
    cfg.image_size = 4;
    cfg.patch = 4;
    cfg.dim = 5;
    cfg.heads = 1;
    cfg.depth = 0;
    cfg.channels = 1;
    ParamStore<double> store;
    Rng rng(3);
    init_vit(store, "visual", cfg, rng);
    store.value("visual.pos").fill(0.0);
    auto h = resolve_vit(store, "visual", cfg);
    ImageSample img;
    img.height = img.width = 4;
    img.channels = 1;
    img.pixels.assign(16, 0);
    Tape<double> t(&store);
    auto tokens = patchify(t, img, cfg, h);
    const auto& v = t.val(tokens);
    REQUIRE(v.rows() == 2);
    for (int j = 0; j < 5; ++j) {
        CHECK(v(0, j) == store.value("visual.cls").data[j]);
        CHECK(v(1, j) == 0.0);
    }
}

TEST_CASE("patchify: matches naive per-patch oracle on random params") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.dim = 7;
    cfg.heads = 1;
    cfg.depth = 0;
    cfg.channels = 3;
    ParamStore<double> store;
    Rng rng(17);
    init_vit(store, "visual", cfg, rng);
    // make params less tiny than the default init so the check is meaningful
    store.value("visual.patch_embed.w") = random_tensor({cfg.patch_dim(), cfg.dim}, rng);
    store.value("visual.patch_embed.b") = random_tensor({1, cfg.dim}, rng);
    store.value("visual.pos") = random_tensor({cfg.n_positions(), cfg.dim}, rng);
    auto h = resolve_vit(store, "visual", cfg);
    Rng irng(18);
    auto img = random_image(8, 3, irng);
    Tape<double> t(&store);
    auto tokens = patchify(t, img, cfg, h);
    auto want = patchify_oracle(img, cfg, store, "visual");
    const auto& got = t.val(tokens);
    REQUIRE(got.rows() == static_cast<int>(want.size()));
    for (int i = 0; i < got.rows(); ++i)
        for (int j = 0; j < got.cols(); ++j)
            CHECK(got(i, j) == doctest::Approx(want[i][j]).epsilon(1e-12));
}

TEST_CASE("patchify: rejects images not divisible by patch size") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.dim = 4;
    cfg.heads = 1;
    cfg.depth = 0;
    cfg.channels = 1;
    ParamStore<double> store;
    Rng rng(5);
    init_vit(store, "visual", cfg, rng);
    auto h = resolve_vit(store, "visual", cfg);
    Rng irng(6);
    auto img = random_image(6, 1, irng); // 6 % 4 != 0
    Tape<double> t(&store);
    CHECK_THROWS_AS(patchify(t, img, cfg, h), std::invalid_argument);
}

TEST_CASE("vit_forward: zero blocks is the identity") {
    ViTConfig cfg;
    cfg.dim = 6;
    cfg.heads = 2;
    cfg.depth = 0;
    ParamStore<double> store;
    Rng rng(7);
    init_vit(store, "visual", cfg, rng);
    auto h = resolve_vit(store, "visual", cfg);
    Tape<double> t(&store);
    auto x = t.input(random_tensor({4, 6}, rng));
    auto out = vit_forward(t, x, cfg, h);
    CHECK(t.val(out.tokens).data == t.val(x).data);
    for (int j = 0; j < 6; ++j) CHECK(t.val(out.cls)(0, j) == t.val(x)(0, j));
}

TEST_CASE("vit_forward: zeroed MSA and FFN weights give exact residual identity") {
    ViTConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.depth = 3;
    ParamStore<double> store;
    Rng rng(8);
    init_vit(store, "visual", cfg, rng);
    for (int k = 0; k < cfg.depth; ++k) zero_block_weights(store, "visual.blocks." + std::to_string(k));
    auto h = resolve_vit(store, "visual", cfg);
    Tape<double> t(&store);
    auto x = t.input(random_tensor({5, 8}, rng, 2.0));
    auto out = vit_forward(t, x, cfg, h);
    CHECK(t.val(out.tokens).data == t.val(x).data); // bitwise
}

TEST_CASE("vit_forward: one block matches the naive attention oracle") {
    ViTConfig cfg;
    cfg.dim = 6;
    cfg.heads = 1;
    cfg.depth = 1;
    ParamStore<double> store;
    Rng rng(9);
    init_vit(store, "visual", cfg, rng);
    // fixed small random weights
    for (const char* n : {"wq", "wk", "wv", "wo"})
        store.value(std::string("visual.blocks.0.msa.") + n) = random_tensor({6, 6}, rng, 0.5);
    store.value("visual.blocks.0.ffn.w1") = random_tensor({6, 24}, rng, 0.5);
    store.value("visual.blocks.0.ffn.w2") = random_tensor({24, 6}, rng, 0.5);
    auto h = resolve_vit(store, "visual", cfg);
    auto x = random_tensor({3, 6}, rng);
    Tape<double> t(&store);
    auto out = vit_forward(t, t.input(x), cfg, h);
    auto want = testutil::block_oracle(x, store, "visual.blocks.0", 1);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 6; ++j)
            CHECK(t.val(out.tokens)(i, j) == doctest::Approx(want(i, j)).epsilon(1e-10));

    SUBCASE("multi-head agrees with the oracle too") {
        ViTConfig cfg2 = cfg;
        cfg2.heads = 3;
        Tape<double> t2(&store);
        auto out2 = vit_forward(t2, t2.input(x), cfg2, h);
        auto want2 = testutil::block_oracle(x, store, "visual.blocks.0", 3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 6; ++j)
                CHECK(t2.val(out2.tokens)(i, j) == doctest::Approx(want2(i, j)).epsilon(1e-10));
    }
}

TEST_CASE("attention rows sum to one across a deep forward") {
    ViTConfig cfg;
    cfg.dim = 8;
    cfg.heads = 4;
    cfg.depth = 3;
    ParamStore<double> store;
    Rng rng(10);
    init_vit(store, "visual", cfg, rng);
    auto h = resolve_vit(store, "visual", cfg);
    Tape<double> t(&store);
    std::vector<AttnRecord<double>> maps;
    t.attn_capture = &maps;
    auto x = t.input(random_tensor({6, 8}, rng, 2.0));
    vit_forward(t, x, cfg, h, 0, true);
    REQUIRE(maps.size() == static_cast<std::size_t>(cfg.depth * cfg.heads));
    for (const auto& rec : maps)
        for (int i = 0; i < rec.probs.rows(); ++i) {
            double s = 0;
            for (int j = 0; j < rec.probs.cols(); ++j) s += rec.probs(i, j);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("permutation equivariance of non-CLS tokens when pos embeds are zero") {
    ViTConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.depth = 2;
    ParamStore<double> store;
    Rng rng(11);
    init_vit(store, "visual", cfg, rng);
    // heavier weights than init so the attention actually mixes
    for (int k = 0; k < 2; ++k) {
        const std::string p = "visual.blocks." + std::to_string(k);
        for (const char* n : {"wq", "wk", "wv", "wo"})
            store.value(p + ".msa." + n) = random_tensor({8, 8}, rng, 0.4);
        store.value(p + ".ffn.w1") = random_tensor({8, 32}, rng, 0.4);
        store.value(p + ".ffn.w2") = random_tensor({32, 8}, rng, 0.4);
    }
    auto h = resolve_vit(store, "visual", cfg);
    auto x = random_tensor({5, 8}, rng);
    const std::vector<int> perm{0, 3, 1, 4, 2}; // fixes row 0 (CLS)
    Tensor<double> xp({5, 8});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j) xp(i, j) = x(perm[i], j);

    Tape<double> t1(&store), t2(&store);
    auto o1 = vit_forward(t1, t1.input(x), cfg, h);
    auto o2 = vit_forward(t2, t2.input(xp), cfg, h);
    const auto& y1 = t1.val(o1.tokens);
    const auto& y2 = t2.val(o2.tokens);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j)
            CHECK(y2(i, j) == doctest::Approx(y1(perm[i], j)).epsilon(1e-9));
    for (int j = 0; j < 8; ++j)
        CHECK(t1.val(o1.cls)(0, j) == doctest::Approx(t2.val(o2.cls)(0, j)).epsilon(1e-9));
}

namespace {

BundleConfig tiny_bundle_config(int vocab) {
    BundleConfig cfg;
    cfg.image.image_size = 8;
    cfg.image.patch = 4;
    cfg.image.dim = 12;
    cfg.image.heads = 2;
    cfg.image.depth = 1;
    cfg.image.channels = 1;
    cfg.text.vocab_size = vocab;
    cfg.text.dim = 6;
    cfg.embed_dim = 6;
    return cfg;
}

} // namespace

TEST_CASE("intrinsic embedding: identity projection over a zero-depth encoder returns cls") {
    BundleConfig cfg = tiny_bundle_config(5);
    cfg.image.depth = 0;
    cfg.image.dim = 6;
    cfg.embed_dim = 6;
    ParamStore<double> store;
    Rng rng(12);
    init_bundle(store, cfg, rng);
    store.value("mvit.patch_embed.w").fill(0.0);
    store.value("mvit.patch_embed.b").fill(0.0);
    store.value("mvit.pos").fill(0.0);
    store.value("img_proj.b").fill(0.0);
    auto& w = store.value("img_proj.w");
    w.fill(0.0);
    for (int i = 0; i < 6; ++i) w(i, i) = 1.0;
    auto h = resolve_bundle(store, cfg);
    Rng irng(13);
    auto img = random_image(8, 1, irng);
    Tape<double> t(&store);
    auto e = intrinsic_embedding(t, img, cfg, h);
    for (int j = 0; j < 6; ++j)
        CHECK(t.val(e)(0, j) == doctest::Approx(store.value("mvit.cls").data[j]).epsilon(1e-12));
}

TEST_CASE("intrinsic embedding: deterministic and unnormalized") {
    BundleConfig cfg = tiny_bundle_config(5);
    ParamStore<double> store;
    Rng rng(14);
    init_bundle(store, cfg, rng);
    auto h = resolve_bundle(store, cfg);
    Rng irng(15);
    auto img = random_image(8, 1, irng);
    Tape<double> t1(&store), t2(&store);
    auto e1 = intrinsic_embedding(t1, img, cfg, h);
    auto e2 = intrinsic_embedding(t2, img, cfg, h);
    CHECK(t1.val(e1).data == t2.val(e2).data); // bit-identical

    // l2-normalizing this op's output is exactly the z^I of the loss
    auto z = ops::l2_normalize_rows(t1, e1);
    double norm = 0;
    for (int j = 0; j < cfg.embed_dim; ++j) norm += t1.val(z)(0, j) * t1.val(z)(0, j);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("text embedding: mean pooling oracle and error paths") {
    TextConfig tcfg;
    tcfg.vocab_size = 9;
    tcfg.dim = 4;
    ParamStore<double> store;
    Rng rng(16);
    init_text_encoder(store, "text", tcfg, rng);
    // identity projection exposes the pooled mean directly
    auto& w = store.value("text.proj.w");
    w.fill(0.0);
    for (int i = 0; i < 4; ++i) w(i, i) = 1.0;
    store.value("text.embed") = random_tensor({9, 4}, rng);
    auto h = resolve_text(store, "text");

    Tape<double> t(&store);
    std::vector<int> ids{2, 7, 4};
    auto e = text_embedding(t, h, ids);
    const auto& table = store.value("text.embed");
    for (int j = 0; j < 4; ++j) {
        const double want = (table(2, j) + table(7, j) + table(4, j)) / 3.0;
        CHECK(t.val(e)(0, j) == doctest::Approx(want).epsilon(1e-12));
    }

    Tape<double> t2(&store);
    auto ea = text_embedding(t2, h, ids);
    auto eb = text_embedding(t2, h, ids);
    CHECK(t2.val(ea).data == t2.val(eb).data);

    Tape<double> t3(&store);
    CHECK_THROWS_AS(text_embedding(t3, h, {}), std::invalid_argument);
    CHECK_THROWS_AS(text_embedding(t3, h, {9}), std::invalid_argument);
}

TEST_CASE("contrastive loss: degenerate batch, closed form, symmetry") {
    ParamStore<double> store;
    store.add("tau", Tensor<double>::scalar(1.0));

    SUBCASE("N=1 gives exactly zero") {
        Tape<double> t(&store);
        auto zi = t.constant(Tensor<double>::row_vector({0.6, 0.8}));
        auto zt = t.constant(Tensor<double>::row_vector({0.6, 0.8}));
        auto loss = contrastive_loss_from_embeddings(t, zi, zt, t.param("tau"));
        CHECK(t.val(loss).data[0] == doctest::Approx(0.0).epsilon(1e-15));
    }

    SUBCASE("N=2 aligned orthogonal pairs: ln(1 + e^-1)") {
        Tape<double> t(&store);
        Tensor<double> zi({2, 2});
        zi(0, 0) = 1.0;
        zi(1, 1) = 1.0;
        auto loss = contrastive_loss_from_embeddings(t, t.constant(zi), t.constant(zi), t.param("tau"));
        const double want = std::log(1.0 + std::exp(-1.0));
        CHECK(t.val(loss).data[0] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("contrastive loss through the bundle: permutation invariance, nonnegativity, errors") {
    BundleConfig cfg = tiny_bundle_config(6);
    ParamStore<double> store;
    Rng rng(21);
    init_bundle(store, cfg, rng);
    auto h = resolve_bundle(store, cfg);
    Rng irng(22);
    std::vector<ImageSample> imgs;
    std::vector<std::vector<int>> caps;
    for (int i = 0; i < 3; ++i) {
        imgs.push_back(random_image(8, 1, irng));
        caps.push_back({irng.range_int(0, 6), irng.range_int(0, 6)});
    }
    auto loss_of = [&](const std::vector<int>& order) {
        Tape<double> t(&store);
        std::vector<const ImageSample*> ip;
        std::vector<const std::vector<int>*> cp;
        for (int i : order) {
            ip.push_back(&imgs[i]);
            cp.push_back(&caps[i]);
        }
        return t.val(contrastive_loss(t, ip, cp, cfg, h)).data[0];
    };
    const double base = loss_of({0, 1, 2});
    CHECK(base >= 0.0);
    CHECK(loss_of({2, 0, 1}) == doctest::Approx(base).epsilon(1e-9));

    // zero-norm embedding must error rather than divide by zero
    ParamStore<double> zstore;
    Rng zrng(23);
    init_bundle(zstore, cfg, zrng);
    zstore.value("img_proj.w").fill(0.0);
    zstore.value("img_proj.b").fill(0.0);
    auto zh = resolve_bundle(zstore, cfg);
    Tape<double> zt(&zstore);
    std::vector<const ImageSample*> ip{&imgs[0]};
    std::vector<const std::vector<int>*> cp{&caps[0]};
    CHECK_THROWS_AS(contrastive_loss(zt, ip, cp, cfg, zh), std::runtime_error);
}

TEST_CASE("contrastive loss gradients match finite differences") {
    BundleConfig cfg = tiny_bundle_config(6);
    cfg.image.dim = 8;
    cfg.image.heads = 2;
    ParamStore<double> store;
    Rng rng(24);
    init_bundle(store, cfg, rng);
    auto h = resolve_bundle(store, cfg);
    Rng irng(25);
    std::vector<ImageSample> imgs;
    std::vector<std::vector<int>> caps;
    for (int i = 0; i < 3; ++i) {
        imgs.push_back(random_image(8, 1, irng));
        caps.push_back({irng.range_int(0, 6), irng.range_int(0, 6), irng.range_int(0, 6)});
    }
    auto build = [&](Tape<double>& t) {
        std::vector<const ImageSample*> ip;
        std::vector<const std::vector<int>*> cp;
        for (int i = 0; i < 3; ++i) {
            ip.push_back(&imgs[i]);
            cp.push_back(&caps[i]);
        }
        return contrastive_loss(t, ip, cp, cfg, h);
    };
    auto loss_fn = [&]() {
        Tape<double> t(&store);
        return t.val(build(t)).data[0];
    };
    auto grad_fn = [&]() {
        GradSink<double> sink(store.size());
        Tape<double> t(&store);
        t.backward(build(t), 1.0, &sink);
        return sink;
    };
    Rng crng(26);
    auto res = check_gradients(store, loss_fn, grad_fn, crng, /*per_tensor=*/4);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("stub pretraining: zero steps, determinism, alignment") {
    SynthConfig scfg;
    scfg.classes = 3;
    scfg.domains = 3;
    scfg.per_cell = 6;
    scfg.image_size = 8;
    scfg.channels = 3;
    scfg.seed = 5;
    scfg.with_captions = true;
    auto pairs = synth_multidomain_dataset(scfg);

    BundleConfig cfg;
    cfg.image.image_size = 8;
    cfg.image.patch = 4;
    cfg.image.dim = 16;
    cfg.image.heads = 2;
    cfg.image.depth = 1;
    cfg.image.channels = 3;
    cfg.text.vocab_size = Vocab::build(pairs.class_names, pairs.domain_names).size();
    cfg.text.dim = 8;
    cfg.embed_dim = 8;

    StubConfig stub;
    stub.steps = 0;
    stub.batch = 8;
    stub.lr = 0.02;
    stub.seed = 77;

    auto init_store = [&]() {
        ParamStore<double> s;
        Rng r(99);
        init_bundle(s, cfg, r);
        return s;
    };

    // zero steps leaves the initialization untouched
    {
        ParamStore<double> a = init_store();
        ParamStore<double> b = init_store();
        auto h = resolve_bundle(a, cfg);
        pretrain_stub_bundle(a, cfg, h, pairs, stub);
        for (int i = 0; i < a.size(); ++i) CHECK(a.value(i).data == b.value(i).data);
    }

    // same seed twice -> identical parameters; training aligns pairs
    stub.steps = 300;
    ParamStore<double> s1 = init_store();
    ParamStore<double> s2 = init_store();
    auto h1 = resolve_bundle(s1, cfg);
    auto h2 = resolve_bundle(s2, cfg);
    pretrain_stub_bundle(s1, cfg, h1, pairs, stub);
    pretrain_stub_bundle(s2, cfg, h2, pairs, stub);
    for (int i = 0; i < s1.size(); ++i) CHECK(s1.value(i).data == s2.value(i).data);

    // held-out pairs: matched cosine similarity beats mismatched on average
    SynthConfig hcfg = scfg;
    hcfg.seed = 6;
    hcfg.per_cell = 4;
    auto holdout = synth_multidomain_dataset(hcfg);
    auto embed = [&](const ImageSample& img) {
        Tape<double> t(&s1);
        auto e = ops::l2_normalize_rows(t, intrinsic_embedding(t, img, cfg, h1));
        return t.val(e);
    };
    auto text_of = [&](const std::vector<int>& ids) {
        Tape<double> t(&s1);
        auto e = ops::l2_normalize_rows(t, text_joint_embedding(t, ids, h1));
        return t.val(e);
    };
    double matched = 0, mismatched = 0;
    int nm = 0, nmm = 0;
    for (std::size_t i = 0; i < holdout.samples.size(); i += 3) {
        const auto zi = embed(holdout.samples[i]);
        for (std::size_t j = 0; j < holdout.samples.size(); j += 5) {
            const auto zt = text_of(holdout.samples[j].caption);
            double dot = 0;
            for (int c = 0; c < cfg.embed_dim; ++c) dot += zi(0, c) * zt(0, c);
            const bool same = holdout.samples[i].class_id == holdout.samples[j].class_id &&
                              holdout.samples[i].domain_id == holdout.samples[j].domain_id;
            if (same) {
                matched += dot;
                ++nm;
            } else {
                mismatched += dot;
                ++nmm;
            }
        }
    }
    REQUIRE(nm > 0);
    REQUIRE(nmm > 0);
    CHECK(matched / nm > mismatched / nmm);
}
