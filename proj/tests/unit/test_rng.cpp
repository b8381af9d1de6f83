#include <doctest.h>

#include <cmath>
#include <vector>

#include "sphere/rng.hpp"

using sphere::Rng;

TEST_SUITE_BEGIN("rng");

TEST_CASE("same seed gives identical streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("fork streams are independent of parent consumption") {
    Rng a(7);
    const Rng c1 = a.fork("noise", 3);
    Rng b(7);
    const Rng c2 = b.fork("noise", 3);
    Rng x = c1, y = c2;
    CHECK(x.next_u64() == y.next_u64());

    Rng d1 = a.fork("noise", 4);
    Rng d2 = a.fork("data", 3);
    Rng d0 = a.fork("noise", 3);
    CHECK(d1.next_u64() != d0.next_u64());
    CHECK(d2.next_u64() != d0.next_u64());
}

TEST_CASE("uniform stays in range and looks flat") {
    Rng r(123);
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        acc += u;
    }
    CHECK(std::abs(acc / n - 0.5) < 0.01);
}

TEST_CASE("normal moments") {
    Rng r(9);
    const int n = 200000;
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        m1 += x;
        m2 += x * x;
    }
    m1 /= n;
    m2 /= n;
    CHECK(std::abs(m1) < 0.01);
    CHECK(std::abs(m2 - 1.0) < 0.02);
}

TEST_CASE("truncated normal respects the bound") {
    Rng r(10);
    for (int i = 0; i < 20000; ++i) CHECK(std::abs(r.truncated_normal(0.05)) <= 0.05);
}

TEST_CASE("uniform_int covers all residues") {
    Rng r(11);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[r.uniform_int(7)];
    for (const int c : counts) CHECK(c > 8000);
}

TEST_SUITE_END();
