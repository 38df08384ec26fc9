#include <doctest.h>

#include "tinydistill/error.hpp"
#include "tinydistill/mapping.hpp"

using namespace tinydistill;

TEST_SUITE("mapping") {

TEST_CASE("uniform strategy") {
    CHECK(LayerMapping::uniform(4, 12).table() ==
          std::vector<std::size_t>{0, 3, 6, 9, 12, 13});
    CHECK(LayerMapping::uniform(3, 3).table() == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(LayerMapping::uniform(2, 4).table() == std::vector<std::size_t>{0, 2, 4, 5});
    CHECK_THROWS_AS(LayerMapping::uniform(5, 12), ConfigError);
    CHECK_THROWS_AS(LayerMapping::uniform(4, 3), ConfigError);
    CHECK_THROWS_AS(LayerMapping::uniform(0, 3), ConfigError);
}

TEST_CASE("top strategy") {
    CHECK(LayerMapping::top(4, 12).table() ==
          std::vector<std::size_t>{0, 9, 10, 11, 12, 13});
    CHECK(LayerMapping::top(3, 3).table() == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(LayerMapping::top(1, 3).table() == std::vector<std::size_t>{0, 3, 4});
    CHECK_THROWS_AS(LayerMapping::top(4, 3), ConfigError);
}

TEST_CASE("bottom strategy") {
    CHECK(LayerMapping::bottom(4, 12).table() ==
          std::vector<std::size_t>{0, 1, 2, 3, 4, 13});
    CHECK(LayerMapping::bottom(3, 3).table() == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(LayerMapping::bottom(2, 5).table() == std::vector<std::size_t>{0, 1, 2, 6});
    CHECK_THROWS_AS(LayerMapping::bottom(4, 3), ConfigError);
}

TEST_CASE("validate rejects broken tables") {
    CHECK_NOTHROW(LayerMapping(4, 12, {0, 3, 6, 9, 12, 13}).validate());
    // endpoint violations
    CHECK_THROWS_AS(LayerMapping(2, 4, {1, 2, 4, 5}), ConfigError);
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 2, 4, 4}), ConfigError);
    // non-increasing interior
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 3, 2, 5}), ConfigError);
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 2, 2, 5}), ConfigError);
    // interior out of range
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 0, 4, 5}), ConfigError);
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 2, 5, 5}), ConfigError);
    // wrong length
    CHECK_THROWS_AS(LayerMapping(2, 4, {0, 2, 5}), ConfigError);
    // custom monotone table is accepted
    CHECK_NOTHROW(LayerMapping(2, 4, {0, 1, 4, 5}));
}

TEST_CASE("strategies validate over the full grid and order as documented") {
    for (std::size_t n = 1; n <= 12; ++n) {
        for (std::size_t m = 1; m <= n; ++m) {
            LayerMapping top = LayerMapping::top(m, n);
            LayerMapping bottom = LayerMapping::bottom(m, n);
            CHECK_NOTHROW(top.validate());
            CHECK_NOTHROW(bottom.validate());
            // top picks the m largest teacher indices, bottom the m smallest
            for (std::size_t i = 1; i <= m; ++i) {
                CHECK(top(i) == n - m + i);
                CHECK(bottom(i) == i);
            }
            if (n % m == 0) {
                LayerMapping uniform = LayerMapping::uniform(m, n);
                CHECK_NOTHROW(uniform.validate());
                for (std::size_t i = 1; i <= m; ++i) CHECK(uniform(i) == i * n / m);
            } else {
                CHECK_THROWS_AS(LayerMapping::uniform(m, n), ConfigError);
            }
        }
    }
}

TEST_CASE("from_strategy dispatch") {
    CHECK(LayerMapping::from_strategy("uniform", 4, 12).table() ==
          LayerMapping::uniform(4, 12).table());
    CHECK(LayerMapping::from_strategy("top", 2, 6)(1) == 5);
    CHECK(LayerMapping::from_strategy("bottom", 2, 6)(2) == 2);
    CHECK_THROWS_AS(LayerMapping::from_strategy("middle", 2, 6), ConfigError);
}

}  // TEST_SUITE
