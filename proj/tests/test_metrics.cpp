#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pyramidflow/metrics.hpp"

using namespace pyramidflow;

namespace {

using Labels = std::vector<std::uint8_t>;

std::pair<std::vector<double>, Labels> random_instance(std::mt19937_64& rng, std::size_t n, int levels) {
    std::uniform_int_distribution<int> score(0, levels);
    std::bernoulli_distribution label(0.3);
    std::vector<double> s(n);
    Labels l(n);
    for (std::size_t k = 0; k < n; ++k) {
        s[k] = score(rng) / static_cast<double>(levels);
        l[k] = label(rng);
    }
    l[0] = 1;
    l[1] = 0;
    return {s, l};
}

Labels random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w) {
    std::bernoulli_distribution on(0.25);
    Labels m(h * w);
    for (auto& v : m) v = on(rng);
    m[0] = 1;
    m[h * w - 1] = 0;
    return m;
}

}  // namespace

TEST(Auroc, WorkedExample) {
    EXPECT_DOUBLE_EQ(pixel_auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, Labels{0, 0, 1, 1}), 0.75);
}

TEST(Auroc, PerfectAndAllTied) {
    EXPECT_EQ(pixel_auroc(std::vector<double>{0.1, 0.2, 0.9, 0.95}, Labels{0, 0, 1, 1}), 1.0);
    EXPECT_EQ(pixel_auroc(std::vector<double>(6, 0.3), Labels{0, 1, 0, 1, 1, 0}), 0.5);
}

TEST(Auroc, MatchesPairwiseOracleExactly) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> size(2, 200);
    for (int trial = 0; trial < 100; ++trial) {
        auto [s, l] = random_instance(rng, size(rng), trial % 2 ? 10 : 1000000);
        EXPECT_EQ(pixel_auroc(s, l), oracle::pairwise_auroc(s, l)) << "trial " << trial;
    }
}

TEST(Auroc, ReversedLabelsAndMonotoneInvariance) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> s(150);
    for (auto& v : s) v = u(rng);
    auto l = random_instance(rng, 150, 10).second;
    Labels flipped(l.size());
    for (std::size_t k = 0; k < l.size(); ++k) flipped[k] = !l[k];
    EXPECT_NEAR(pixel_auroc(s, flipped), 1.0 - pixel_auroc(s, l), 1e-15);

    std::vector<double> t(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) t[k] = std::exp(3 * s[k]) - 7;
    EXPECT_EQ(pixel_auroc(t, l), pixel_auroc(s, l));
}

TEST(Auroc, Errors) {
    EXPECT_THROW(pixel_auroc(std::vector<double>{0.1, 0.2}, Labels{1, 1}), MetricError);
    EXPECT_THROW(pixel_auroc(std::vector<double>{0.1, 0.2}, Labels{0, 0}), MetricError);
    EXPECT_THROW(pixel_auroc(std::vector<double>{0.1}, Labels{0, 1}), MetricError);
}

TEST(Regions, EightConnectivity) {
    // Diagonal neighbours join; a gap splits.
    const Labels m{1, 0, 0, 0,  //
                   0, 1, 0, 1,  //
                   0, 0, 0, 1,  //
                   1, 0, 0, 0};
    auto [labels, count] = label_regions(m, 4, 4);
    EXPECT_EQ(count, 3);
    EXPECT_EQ(labels[0], labels[5]);
    EXPECT_EQ(labels[7], labels[11]);
    EXPECT_NE(labels[0], labels[12]);
    EXPECT_EQ(labels[1], 0);
}

TEST(Aupro, PerfectMapIsOne) {
    std::mt19937_64 rng(3);
    const auto m = random_mask(rng, 8, 8);
    std::vector<double> s(m.begin(), m.end());
    EXPECT_DOUBLE_EQ(aupro(s, m, 8, 8), 1.0);
}

TEST(Aupro, ConstantMapMatchesEnumeration) {
    Labels m(16, 0);
    m[5] = m[6] = m[9] = m[10] = 1;
    const std::vector<double> s(16, 0.4);
    const double v = aupro(s, m, 4, 4);
    EXPECT_NEAR(v, oracle::exhaustive_aupro(s, m, 4, 4), 1e-12);
    // single step from (0,0) to (1,1): area under y = x on [0, 0.3], normalized
    EXPECT_NEAR(v, 0.15, 1e-15);
}

TEST(Aupro, TwoRegionPlateau) {
    Labels m(36, 0);
    for (std::size_t i : {0u, 1u})
        for (std::size_t j : {0u, 1u}) m[i * 6 + j] = 1;
    for (std::size_t i : {4u, 5u})
        for (std::size_t j : {3u, 4u, 5u}) m[i * 6 + j] = 1;
    std::vector<double> s(36);
    double next = 0.1;
    for (std::size_t k = 0; k < 36; ++k) {
        if (!m[k]) s[k] = (next += 0.02);
    }
    for (std::size_t k = 0; k < 36; ++k)
        if (m[k]) s[k] = k < 12 ? 1.0 : 0.0;  // first region found, second missed

    auto [regions, count] = label_regions(m, 6, 6);
    ASSERT_EQ(count, 2);
    const auto curve = pro_curve(s, regions, count);
    for (const auto& p : curve) {
        if (p.fpr > 0 && p.fpr < 1) {
            EXPECT_EQ(p.pro, 0.5);
        }
    }
    EXPECT_DOUBLE_EQ(aupro(s, m, 6, 6), 0.5);
    EXPECT_NEAR(aupro(s, m, 6, 6), oracle::exhaustive_aupro(s, m, 6, 6), 1e-12);
}

TEST(Aupro, MatchesEnumerationOnRandomMasks) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> dim(2, 8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = dim(rng), w = dim(rng);
        const auto m = random_mask(rng, h, w);
        std::uniform_int_distribution<int> q(0, trial % 3 ? 5 : 1000);
        std::vector<double> s(h * w);
        for (auto& v : s) v = q(rng) * 0.01;
        EXPECT_NEAR(aupro(s, m, h, w), oracle::exhaustive_aupro(s, m, h, w), 1e-12) << h << "x" << w;
    }
}

TEST(Aupro, MonotoneInvariance) {
    std::mt19937_64 rng(5);
    const auto m = random_mask(rng, 8, 8);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> s(64), t(64);
    for (std::size_t k = 0; k < 64; ++k) {
        s[k] = u(rng);
        t[k] = std::log(s[k] + 0.5) * 4;
    }
    EXPECT_EQ(aupro(s, m, 8, 8), aupro(t, m, 8, 8));
}

TEST(Aupro, Errors) {
    EXPECT_THROW(aupro(std::vector<double>(16, 0.0), Labels(16, 0), 4, 4), MetricError);
    EXPECT_THROW(aupro(std::vector<double>(15, 0.0), Labels(16, 0), 4, 4), MetricError);
    EXPECT_THROW(aupro(std::vector<double>(4, 0.0), Labels(4, 1), 2, 2), MetricError);
    EXPECT_THROW(normalized_area({{0, 0}, {1, 1}}, 0.0), MetricError);
}

TEST(Aupro, PooledEqualsStackedImage) {
    // Each mask ends in a blank row, so stacking the maps vertically keeps
    // every region separate and pooled AUPRO must equal the single-map value.
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<ScoredMask> items;
    std::vector<double> all_s;
    Labels all_m;
    for (int k = 0; k < 3; ++k) {
        ScoredMask it{std::vector<double>(20), random_mask(rng, 5, 4), 5, 4};
        for (std::size_t j = 16; j < 20; ++j) it.mask[j] = 0;
        for (auto& v : it.scores) v = u(rng);
        all_s.insert(all_s.end(), it.scores.begin(), it.scores.end());
        all_m.insert(all_m.end(), it.mask.begin(), it.mask.end());
        items.push_back(std::move(it));
    }
    EXPECT_NEAR(aupro_pooled(items), aupro(all_s, all_m, 15, 4), 1e-15);

    ScoredMask normal_only{std::vector<double>(20, 0.5), Labels(20, 0), 5, 4};
    EXPECT_THROW(aupro_pooled({normal_only}), MetricError);
}
