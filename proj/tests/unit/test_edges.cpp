// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/edges.hpp"
#include "ctrlregen/common.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>

using namespace ctrlregen;

namespace {

Plane checker_disk() {
    Plane p(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            p.at(y, x) = ((y / 4) + (x / 4)) % 2 == 0 ? 0.2 : 0.8;
            const double dy = y - 7.5, dx = x - 7.5;
            if (dy * dy + dx * dx <= 20.25) p.at(y, x) = 1.0;
        }
    return p;
}

// True when every edge pixel is connected (8-neighbourhood, through edge
// pixels) to a pixel whose suppressed magnitude reaches `high`.
bool every_edge_reaches_strong(const EdgeMap& e, const Plane& gray, const CannyParams& prm) {
    const auto g = sobel(gaussian_blur(gray, prm.sigma));
    std::vector<int> seen(e.mask.size(), 0);
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < e.height; ++y)
        for (int x = 0; x < e.width; ++x)
            if (e.at(y, x) && g.magnitude.at(y, x) >= prm.high) {
                stack.emplace_back(y, x);
                seen[static_cast<std::size_t>(y) * e.width + x] = 1;
            }
    while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int yy = y - 1; yy <= y + 1; ++yy)
            for (int xx = x - 1; xx <= x + 1; ++xx) {
                if (yy < 0 || xx < 0 || yy >= e.height || xx >= e.width) continue;
                const auto i = static_cast<std::size_t>(yy) * e.width + xx;
                if (e.mask[i] && !seen[i]) {
                    seen[i] = 1;
                    stack.emplace_back(yy, xx);
                }
            }
    }
    for (std::size_t i = 0; i < e.mask.size(); ++i)
        if (e.mask[i] && !seen[i]) return false;
    return true;
}

} // namespace

TEST_SUITE("edges") {

TEST_CASE("constant image has no edges") {
    const auto e = canny(torch::full({3, 16, 16}, 0.37));
    CHECK(e.count() == 0);
    CHECK(e.height == 16);
    CHECK(e.width == 16);
}

TEST_CASE("vertical step gives one column") {
    Plane p(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x) p.at(y, x) = 1.0;
    const auto e = canny(p);
    int col = -1;
    for (int x = 0; x < 16; ++x) {
        int n = 0;
        for (int y = 0; y < 16; ++y) n += e.at(y, x);
        if (n > 0) {
            CHECK(col == -1);
            col = x;
            CHECK(n == 16);
        }
    }
    CHECK((col == 7 || col == 8));
}

TEST_CASE("golden checker-with-disk fixture") {
    std::ifstream in(ctrlregen::testing::fixture("canny_golden.txt"));
    REQUIRE(in.good());
    std::vector<std::string> rows;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) rows.push_back(line);
    REQUIRE(rows.size() == 16);
    const auto e = canny(checker_disk(), {1.4, 0.1, 0.2});
    int mismatches = 0;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) mismatches += (rows[y][x] == '1') != (e.at(y, x) == 1);
    CHECK(mismatches == 0);
}

TEST_CASE("threshold order") {
    CHECK_THROWS_AS(canny(Plane(8, 8), {1.4, 0.2, 0.2}), RangeError);
    CHECK_THROWS_AS(canny(Plane(8, 8), {1.4, 0.3, 0.2}), RangeError);
}

TEST_CASE("luminance weights") {
    auto img = torch::zeros({3, 2, 2});
    img[0].fill_(1.0);
    CHECK(luminance(img).at(0, 0) == doctest::Approx(0.299));
    img[0].fill_(0.0);
    img[1].fill_(1.0);
    CHECK(luminance(img).at(1, 1) == doctest::Approx(0.587));
    img[1].fill_(0.0);
    img[2].fill_(1.0);
    CHECK(luminance(img).at(0, 1) == doctest::Approx(0.114));
}

TEST_CASE("offset invariance and binary output") {
    const auto imgs = ctrlregen::testing::structured_images(6, 24, 24, 3) * 0.8;
    for (int64_t i = 0; i < imgs.size(0); ++i) {
        const auto a = canny(imgs[i]);
        // a power-of-two offset keeps every sum exact in double precision
        const auto b = canny(imgs[i].to(torch::kFloat64) + 0.125);
        CHECK(a.mask == b.mask);
        for (auto v : a.mask) CHECK((v == 0 || v == 1));
        CHECK(a.count() > 0);
        CHECK(every_edge_reaches_strong(a, luminance(imgs[i]), {}));
    }
}

TEST_CASE("batch wrapper") {
    const auto imgs = ctrlregen::testing::structured_images(3, 16, 16, 4);
    const auto b = canny_batch(imgs);
    CHECK(b.sizes() == torch::IntArrayRef({3, 1, 16, 16}));
    CHECK(torch::equal(b[1], canny(imgs[1]).to_tensor()));
    CHECK_THROWS_AS(canny_batch(imgs[0]), ShapeError);
}

}
