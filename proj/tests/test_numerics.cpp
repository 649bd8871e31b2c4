#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "cflhkd/numerics.hpp"
#include "oracles.hpp"

using namespace cflhkd;

namespace {

Vec64 vec(std::vector<double> v) { return Vec64(std::move(v)); }

Vec64 random_vec(std::size_t n, SeededRng& rng, double lo = -5, double hi = 5) {
    Vec64 v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
    return v;
}

Histogram random_hist(std::size_t classes, SeededRng& rng, std::int64_t max_count = 20) {
    Histogram h(classes);
    for (std::size_t c = 0; c < classes; ++c)
        h.add(c, static_cast<std::int64_t>(rng.uniform_below(max_count + 1)));
    if (h.total() == 0) h.add(0, 1);
    return h;
}

}  // namespace

TEST_CASE("l2_distance basics", "[numerics]") {
    CHECK(l2_distance(vec({1, 2}), vec({1, 2})) == 0.0);
    CHECK(l2_distance(vec({0, 0}), vec({3, 4})) == Catch::Approx(5.0).margin(0));
    CHECK_THROWS_AS(l2_distance(vec({1}), vec({1, 2})), dimension_error);

    SeededRng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const Vec64 a = random_vec(10, rng);
        const Vec64 b = random_vec(10, rng);
        const double expect = oracle::l2(a.values(), b.values());
        CHECK(l2_distance(a, b) == Catch::Approx(expect).margin(1e-12));
        CHECK(l2_distance(a, b) == l2_distance(b, a));
    }
}

TEST_CASE("l2_distance triangle inequality", "[numerics]") {
    SeededRng rng(11);
    for (int rep = 0; rep < 200; ++rep) {
        const Vec64 a = random_vec(8, rng);
        const Vec64 b = random_vec(8, rng);
        const Vec64 c = random_vec(8, rng);
        CHECK(l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-9);
    }
}

TEST_CASE("cosine_similarity basics", "[numerics]") {
    CHECK(cosine_similarity(vec({1, 0}), vec({2, 0})) == Catch::Approx(1.0).margin(1e-15));
    CHECK(cosine_similarity(vec({1, 0}), vec({0, 5})) == Catch::Approx(0.0).margin(1e-15));
    CHECK(cosine_similarity(vec({1, 1}), vec({-1, -1})) == Catch::Approx(-1.0).margin(1e-15));
    CHECK_THROWS_AS(cosine_similarity(vec({0, 0}), vec({1, 0})), degenerate_vector_error);
    CHECK_THROWS_AS(cosine_similarity(vec({1}), vec({1, 2})), dimension_error);
}

TEST_CASE("cosine argmax is scale invariant", "[numerics]") {
    SeededRng rng(13);
    for (int rep = 0; rep < 20; ++rep) {
        const Vec64 a = random_vec(6, rng);
        std::vector<Vec64> candidates;
        for (int k = 0; k < 8; ++k) candidates.push_back(random_vec(6, rng));
        const auto argmax_for = [&](const Vec64& query) {
            std::size_t best = 0;
            double best_v = -2;
            for (std::size_t k = 0; k < candidates.size(); ++k) {
                const double v = cosine_similarity(query, candidates[k]);
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            return best;
        };
        const auto base = argmax_for(a);
        for (double c : {0.01, 3.0, 1234.5}) {
            Vec64 scaled = a;
            scaled *= c;
            CHECK(argmax_for(scaled) == base);
        }
    }
}

TEST_CASE("kl_divergence examples", "[numerics]") {
    const Histogram p(std::vector<std::int64_t>{3, 5, 2});
    CHECK(kl_divergence(p, p) == 0.0);

    // disjoint supports: finite because of the smoothing, matches the oracle
    const Histogram a(std::vector<std::int64_t>{4, 0});
    const Histogram b(std::vector<std::int64_t>{0, 4});
    const double expect_ab = oracle::kl_base2({4, 0}, {0, 4});
    CHECK(std::isfinite(kl_divergence(a, b)));
    CHECK(kl_divergence(a, b) == Catch::Approx(expect_ab).epsilon(1e-12));

    // closed form: KL((3/4,1/4) || (1/4,3/4)) = 0.5 * log2(3)
    const Histogram c(std::vector<std::int64_t>{3, 1});
    const Histogram d(std::vector<std::int64_t>{1, 3});
    const double closed = 0.5 * std::log2(3.0);
    CHECK(kl_divergence(c, d) == Catch::Approx(closed).margin(1e-3));
    CHECK(kl_divergence(c, d) == Catch::Approx(oracle::kl_base2({3, 1}, {1, 3})).epsilon(1e-12));

    CHECK_THROWS_AS(kl_divergence(Histogram(std::vector<std::int64_t>{1, 1}),
                                  Histogram(std::vector<std::int64_t>{1, 1, 1})),
                    dimension_error);
}

TEST_CASE("jsd examples", "[numerics]") {
    const Histogram p(std::vector<std::int64_t>{5, 3, 4});
    CHECK(jsd(p, p) == 0.0);

    const Histogram a(std::vector<std::int64_t>{1, 0});
    const Histogram b(std::vector<std::int64_t>{0, 1});
    CHECK(jsd(a, b) == Catch::Approx(1.0).margin(1e-3));

    const Histogram c(std::vector<std::int64_t>{2, 2});
    const Histogram d(std::vector<std::int64_t>{3, 1});
    CHECK(jsd(c, d) == Catch::Approx(oracle::jsd_base2({2, 2}, {3, 1})).epsilon(1e-12));
}

TEST_CASE("jsd symmetry and range", "[numerics]") {
    SeededRng rng(17);
    for (int rep = 0; rep < 300; ++rep) {
        const Histogram p = random_hist(6, rng);
        const Histogram q = random_hist(6, rng);
        const double v = jsd(p, q);
        CHECK(v == jsd(q, p));  // exact: same terms, commuted addition
        CHECK(v >= 0.0);
        CHECK(v <= 1.0 + 1e-9);
    }
}

TEST_CASE("histogram invariants", "[numerics]") {
    CHECK_THROWS_AS(Histogram(std::vector<std::int64_t>{}), dimension_error);
    CHECK_THROWS_AS(Histogram(std::vector<std::int64_t>{1, -2}), std::invalid_argument);
    Histogram h(3);
    h.add(0, 2);
    h.add(2);
    CHECK(h.total() == 3);
    CHECK_THROWS_AS(h.add(3), std::out_of_range);
}

TEST_CASE("seeded rng reproducibility", "[numerics]") {
    SeededRng a(42);
    SeededRng b(42);
    for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());

    SeededRng c(42);
    SeededRng d(43);
    int diff = 0;
    for (int i = 0; i < 100; ++i) diff += c.next_u64() != d.next_u64();
    CHECK(diff > 90);
}

TEST_CASE("derived streams are stable and keyed", "[numerics]") {
    const SeededRng root(5);
    SeededRng a = root.derive(1, 2, 3);
    SeededRng b = root.derive(1, 2, 3);
    SeededRng c = root.derive(1, 2, 4);
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() != c.next_u64());
}

TEST_CASE("uniform_below stays in range and hits all values", "[numerics]") {
    SeededRng rng(23);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto v = rng.uniform_below(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("dirichlet draws sum to one", "[numerics]") {
    SeededRng rng(29);
    for (double alpha : {0.1, 0.5, 5.0}) {
        const auto p = rng.dirichlet(alpha, 10);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("vec64 rejects non-finite input", "[numerics]") {
    CHECK_THROWS_AS(Vec64(std::vector<double>{1.0, std::nan("")}), nonfinite_error);
}

TEST_CASE("weighted_mean matches scalar oracle", "[numerics]") {
    SeededRng rng(31);
    const Vec64 a = random_vec(5, rng);
    const Vec64 b = random_vec(5, rng);
    const Vec64 c = random_vec(5, rng);
    const std::vector<const Vec64*> vs{&a, &b, &c};
    const std::vector<double> ws{0.2, 0.3, 0.5};
    const auto got = weighted_mean(vs, ws);
    const auto expect = oracle::weighted_mean({a.values(), b.values(), c.values()}, ws);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == Catch::Approx(expect[i]).margin(1e-15));
}
