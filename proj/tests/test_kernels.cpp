#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "indigo/kernels.hpp"
#include "indigo/rng.hpp"

using namespace indigo;

namespace {

std::vector<double> random_vec(long n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

} // namespace

// The parallel kernels must match the serial reference bit for bit: they
// split rows across threads but never change the per-element summation
// order. Sizes straddle the parallel-dispatch threshold on purpose.
TEST_CASE("matmul variants match serial reference bitwise") {
    Rng rng(7);
    const int sizes[][3] = {{3, 5, 4}, {17, 64, 64}, {64, 64, 256}, {128, 96, 80}, {1, 7, 1}};
    for (auto [m, k, n] : sizes) {
        auto a = random_vec(static_cast<long>(m) * k, rng);
        auto b = random_vec(static_cast<long>(k) * n, rng);
        std::vector<double> c1(static_cast<long>(m) * n), c2(c1.size());

        kernels::ref::matmul(a.data(), b.data(), c1.data(), m, k, n);
        kernels::matmul(a.data(), b.data(), c2.data(), m, k, n);
        CHECK(c1 == c2);

        auto at = random_vec(static_cast<long>(k) * m, rng);
        kernels::ref::matmul_tn(at.data(), b.data(), c1.data(), m, k, n);
        kernels::matmul_tn(at.data(), b.data(), c2.data(), m, k, n);
        CHECK(c1 == c2);

        auto bt = random_vec(static_cast<long>(n) * k, rng);
        kernels::ref::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n);
        kernels::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n);
        CHECK(c1 == c2);

        // accumulate mode
        auto base = random_vec(static_cast<long>(m) * n, rng);
        c1 = base;
        c2 = base;
        kernels::ref::matmul(a.data(), b.data(), c1.data(), m, k, n, true);
        kernels::matmul(a.data(), b.data(), c2.data(), m, k, n, true);
        CHECK(c1 == c2);
    }
}

TEST_CASE("softmax and layernorm match serial reference bitwise") {
    Rng rng(11);
    for (int rows : {1, 5, 64}) {
        const int cols = 33;
        auto x = random_vec(static_cast<long>(rows) * cols, rng);
        auto y1 = x, y2 = x;
        kernels::ref::softmax_rows(y1.data(), rows, cols);
        kernels::softmax_rows(y2.data(), rows, cols);
        CHECK(y1 == y2);

        auto scale = random_vec(cols, rng);
        auto shift = random_vec(cols, rng);
        std::vector<double> o1(x.size()), o2(x.size()), h1(x.size()), h2(x.size()), s1(rows), s2(rows);
        kernels::ref::layernorm_rows(x.data(), scale.data(), shift.data(), o1.data(), h1.data(),
                                     s1.data(), rows, cols, 1e-5);
        kernels::layernorm_rows(x.data(), scale.data(), shift.data(), o2.data(), h2.data(),
                                s2.data(), rows, cols, 1e-5);
        CHECK(o1 == o2);
        CHECK(h1 == h2);
        CHECK(s1 == s2);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    auto x = random_vec(40 * 9, rng);
    for (auto& v : x) v *= 10.0;
    kernels::softmax_rows(x.data(), 40, 9);
    for (int i = 0; i < 40; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) {
            const double p = x[i * 9 + j];
            CHECK(p > 0.0);
            CHECK(p < 1.0 + 1e-12);
            s += p;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("gelu matches erf formula and parallel path") {
    Rng rng(5);
    auto x = random_vec(1000, rng);
    std::vector<double> y1(x.size()), y2(x.size());
    kernels::ref::gelu(x.data(), y1.data(), static_cast<long>(x.size()));
    kernels::gelu(x.data(), y2.data(), static_cast<long>(x.size()));
    CHECK(y1 == y2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double want = x[i] * 0.5 * (1.0 + std::erf(x[i] / std::sqrt(2.0)));
        CHECK(y1[i] == doctest::Approx(want).epsilon(1e-12));
    }
    // fixed points
    std::vector<double> z{0.0};
    std::vector<double> out(1);
    kernels::gelu(z.data(), out.data(), 1);
    CHECK(out[0] == 0.0);
}
