#include "doctest.h"

#include <cmath>
#include <numbers>

#include "stx/filter.hpp"
#include "stx/rng.hpp"
#include "test_util.hpp"

using namespace stx;
using namespace stx::filter;
using stx::testing::error_kind_of;

namespace {

// genes x spots given row by row, converted to the spots x genes layout.
Dataset make_dataset(const std::vector<std::string>& genes, const std::vector<std::vector<std::int64_t>>& by_gene) {
    Dataset d;
    d.genes = genes;
    const auto spots = by_gene.front().size();
    for (std::size_t s = 0; s < spots; ++s) {
        d.spots.push_back({"s" + std::to_string(s), 0, static_cast<std::int64_t>(s), 10, 10, "P" + std::to_string(s % 2), "S"});
        for (std::size_t g = 0; g < genes.size(); ++g) d.counts.push_back(by_gene[g][s]);
    }
    return d;
}

Dataset random_dataset(Rng& rng, std::size_t genes, std::size_t spots, std::size_t zero_genes) {
    Dataset d;
    for (std::size_t g = 0; g < genes; ++g) d.genes.push_back("G" + std::to_string(g));
    for (std::size_t s = 0; s < spots; ++s) {
        d.spots.push_back({"s" + std::to_string(s), 0, static_cast<std::int64_t>(s), 1, 1, "P", "S"});
        for (std::size_t g = 0; g < genes; ++g)
            d.counts.push_back(g < zero_genes ? 0 : static_cast<std::int64_t>(rng.below(400)));
    }
    return d;
}

}  // namespace

TEST_CASE("gene filter removes exactly the all-zero genes") {
    const auto d = make_dataset({"A", "B", "C"}, {{0, 0, 0}, {0, 1, 0}, {5, 5, 5}});
    const auto f = filter_genes(d);
    CHECK(f.genes == std::vector<std::string>{"B", "C"});
    CHECK(f.counts == std::vector<std::int64_t>{0, 5, 1, 5, 0, 5});

    const auto unchanged = make_dataset({"A", "B"}, {{1, 0}, {0, 1}});
    CHECK(filter_genes(unchanged) == unchanged);

    CHECK(error_kind_of([] { filter_genes(make_dataset({"A"}, {{0, 0}})); }) == ErrorKind::EmptyDataset);
}

TEST_CASE("spot filter uses an inclusive 1000-count bound") {
    CHECK(kMinSpotCounts == 1000);
    const auto d = make_dataset({"A", "B"}, {{500, 500, 999}, {499, 500, 2000}});
    const auto f = filter_spots(d);
    REQUIRE(f.n_spots() == 2);
    CHECK(f.spots[0].spot_id == "s1");
    CHECK(f.spots[1].spot_id == "s2");

    const auto all_pass = make_dataset({"A"}, {{1000, 4000}});
    CHECK(filter_spots(all_pass) == all_pass);
    CHECK(error_kind_of([] { filter_spots(make_dataset({"A"}, {{10, 20}})); }) == ErrorKind::EmptyDataset);
}

TEST_CASE("filters are idempotent and give closed-form counts") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t G = 30, z = 1 + rng.below(5), S = 40;
        auto d = random_dataset(rng, G, S, z);
        // Force some spots below the bound.
        std::size_t low = 0;
        for (std::size_t s = 0; s < S; s += 7, ++low)
            for (std::size_t g = 0; g < G; ++g) d.at(s, g) = g == G - 1 ? 3 : 0;

        const auto fg = filter_genes(d);
        CHECK(fg.n_genes() == G - z);
        CHECK(filter_genes(fg) == fg);
        const auto fs = filter_spots(fg);
        CHECK(fs.n_spots() <= S - low);
        CHECK(filter_spots(fs) == fs);
        for (std::size_t s = 0; s < fs.n_spots(); ++s) {
            std::int64_t total = 0;
            for (std::size_t g = 0; g < fs.n_genes(); ++g) total += fs.at(s, g);
            CHECK(total >= 1000);
        }
    }
}

TEST_CASE("panel ranking with ties broken by ascending symbol") {
    // means 9, 7 (B), 7 (A), 3, 1
    const auto d = make_dataset({"TOP", "B", "A", "D", "E"}, {{9, 9}, {7, 7}, {7, 7}, {3, 3}, {1, 1}});
    const auto panel = select_gene_panel(d, 2);
    CHECK(panel.main_genes == std::vector<std::string>{"TOP", "A"});
    CHECK(panel.main_means == std::vector<double>{9.0, 7.0});
    CHECK(panel.aux_genes == std::vector<std::string>{"B", "D", "E"});

    const auto all = select_gene_panel(d, 10);
    CHECK(all.main_genes.size() == 5);
    CHECK(all.aux_genes.empty());

    CHECK(kPanelSize == 250);
    CHECK(error_kind_of([&] { select_gene_panel(d, 0); }) == ErrorKind::Argument);
}

TEST_CASE("panel selection ignores input gene order") {
    Rng rng(17);
    auto d = random_dataset(rng, 40, 12, 0);
    const auto panel = select_gene_panel(d, 10);

    std::vector<std::size_t> perm(d.n_genes());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    stx::shuffle(perm, rng);
    Dataset p = d;
    for (std::size_t g = 0; g < perm.size(); ++g) {
        p.genes[g] = d.genes[perm[g]];
        for (std::size_t s = 0; s < d.n_spots(); ++s) p.at(s, g) = d.at(s, perm[g]);
    }
    const auto permuted = select_gene_panel(p, 10);
    CHECK(permuted.main_genes == panel.main_genes);
    CHECK(permuted.main_means == panel.main_means);
}

TEST_CASE("panel uses training spots only") {
    const auto d = make_dataset({"A", "B"}, {{10, 0}, {0, 10}});
    CHECK(select_gene_panel(d, 1, {0}).main_genes == std::vector<std::string>{"A"});
    CHECK(select_gene_panel(d, 1, {1}).main_genes == std::vector<std::string>{"B"});
}

TEST_CASE("target transform: log1p then z-score") {
    // counts {0, e-1} -> log1p {0, 1} -> z {-1, +1}
    TargetTransform tf{{"g"}, {0.5}, {0.5}, {false}};
    CHECK(tf.forward(0, 0.0) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(tf.forward(0, std::numbers::e - 1.0) == doctest::Approx(1.0).epsilon(1e-12));

    const auto d = make_dataset({"CONST", "VAR"}, {{4, 4, 4}, {0, 3, 9}});
    GenePanel panel{{"VAR"}, {"CONST"}, {4.0}};
    const auto t = fit_transform_targets(d, panel, {0, 1, 2});
    CHECK(t.transform.zero_variance == std::vector<bool>{false, true});
    CHECK(t.transform.std[1] == 1.0);
    for (std::size_t s = 0; s < 3; ++s) CHECK(t.aux_targets(s, 0) == 0.0);
    // count 0 maps to log1p 0 before z-scoring
    CHECK(t.main_targets(0, 0) == doctest::Approx((0.0 - t.transform.mean[0]) / t.transform.std[0]));
}

TEST_CASE("fitted targets have zero mean and unit std on the fitting split and invert exactly") {
    Rng rng(23);
    auto d = random_dataset(rng, 12, 50, 0);
    const auto panel = select_gene_panel(d, 5);
    std::vector<std::size_t> train;
    for (std::size_t s = 0; s < 35; ++s) train.push_back(s);
    const auto t = fit_transform_targets(d, panel, train);

    for (std::size_t j = 0; j < 5; ++j) {
        double sum = 0, ss = 0;
        for (auto s : train) sum += t.main_targets(s, j);
        const double mean = sum / train.size();
        for (auto s : train) ss += (t.main_targets(s, j) - mean) * (t.main_targets(s, j) - mean);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(ss / train.size()) - 1.0) < 1e-6);
    }
    for (std::size_t s = 0; s < d.n_spots(); ++s) {
        for (std::size_t j = 0; j < t.transform.genes.size(); ++j) {
            const double z = j < 5 ? t.main_targets(s, j) : t.aux_targets(s, j - 5);
            const auto col = static_cast<std::size_t>(
                std::find(d.genes.begin(), d.genes.end(), t.transform.genes[j]) - d.genes.begin());
            const double count = static_cast<double>(d.at(s, col));
            const double back = t.transform.inverse(j, z);
            CHECK(std::abs(back - count) <= 1e-9 * std::max(1.0, count));
        }
    }
}

TEST_CASE("target table json round trip") {
    Rng rng(3);
    auto d = random_dataset(rng, 6, 8, 0);
    const auto panel = select_gene_panel(d, 3);
    auto t = fit_transform_targets(d, panel, {0, 1, 2, 3});
    t.split = assign_splits(d, {}, {"P"});
    const auto back = targets_from_json(to_json(t));
    CHECK(back.spot_keys == t.spot_keys);
    CHECK(back.split == t.split);
    CHECK(back.main_targets == t.main_targets);
    CHECK(back.aux_targets == t.aux_targets);
    CHECK(back.transform == t.transform);
    CHECK(back.transform.fingerprint() == t.transform.fingerprint());
    CHECK(back.panel == t.panel);
}
