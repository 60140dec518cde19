#include "doctest.h"

#include <cmath>
#include <set>

#include "stx/eval.hpp"
#include "stx/rng.hpp"
#include "test_util.hpp"

using namespace stx;
using namespace stx::eval;
using stx::testing::error_kind_of;
using stx::testing::TempDir;

namespace {

// Two-pass textbook formula in long double.
long double oracle_pcc(const std::vector<double>& a, const std::vector<double>& b) {
    long double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    long double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("error metric examples") {
    const std::vector<double> y{1, 2, 3}, yh{2, 2, 5};
    CHECK(mae(y, yh) == doctest::Approx(1.0));
    CHECK(rmse(y, yh) == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(mae(y, y) == 0.0);
    CHECK(rmse(y, y) == 0.0);
    CHECK(mae(std::vector<double>{0}, std::vector<double>{3}) == 3.0);
    CHECK(rmse(std::vector<double>{0}, std::vector<double>{3}) == 3.0);
    CHECK(error_kind_of([] { mae(std::vector<double>{}, std::vector<double>{}); }) == ErrorKind::Argument);
    CHECK(error_kind_of([] { rmse(std::vector<double>{1}, std::vector<double>{1, 2}); }) == ErrorKind::Argument);
}

TEST_CASE("correlation examples") {
    CHECK(pcc(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) == doctest::Approx(1.0));
    CHECK(pcc(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(pcc(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) == doctest::Approx(0.8));
    CHECK(is_undefined(pcc(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3})));
    CHECK(error_kind_of([] { pcc(std::vector<double>{1}, std::vector<double>{1}); }) == ErrorKind::Argument);
}

TEST_CASE("metrics agree with brute-force oracles and satisfy their properties") {
    Rng rng(99);
    for (int t = 0; t < 300; ++t) {
        const auto n = 2 + rng.below(200);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform(-10, 10);
            b[i] = 0.5 * a[i] + rng.uniform(-10, 10);
        }
        long double sa = 0, ss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sa += std::fabs(static_cast<long double>(a[i]) - b[i]);
            ss += (static_cast<long double>(a[i]) - b[i]) * (static_cast<long double>(a[i]) - b[i]);
        }
        CHECK(std::abs(mae(a, b) - static_cast<double>(sa / n)) <= 1e-10);
        CHECK(std::abs(rmse(a, b) - static_cast<double>(std::sqrt(ss / n))) <= 1e-10);
        const double p = pcc(a, b);
        CHECK(std::abs(p - static_cast<double>(oracle_pcc(a, b))) <= 1e-10);
        CHECK(std::abs(p - pcc(b, a)) <= 1e-12);
        std::vector<double> affine(n);
        for (std::size_t i = 0; i < n; ++i) affine[i] = 3.5 * b[i] - 2.0;
        CHECK(std::abs(p - pcc(a, affine)) <= 1e-12);
        CHECK(rmse(a, b) >= mae(a, b));
    }
}

TEST_CASE("categories use closed lower bounds") {
    CHECK(categorize(0.6) == Category::Strong);
    CHECK(categorize(0.4) == Category::Medium);
    CHECK(categorize(0.15) == Category::Weak);
    CHECK(categorize(0.5) == Category::Strong);
    CHECK(categorize(0.3) == Category::Medium);
    CHECK(categorize(0.1) == Category::Weak);
    CHECK(categorize(0.0) == Category::Negligible);
    CHECK(categorize(-0.01) == Category::Negative);
    CHECK(categorize(kUndefined) == Category::Undefined);
    CHECK(categorize(1.0) == Category::Strong);
    CHECK(categorize(-1.0) == Category::Negative);
}

TEST_CASE("per-gene report takes medians over sections") {
    // Three sections whose per-section correlations are 0.2, 0.5 and 0.9 for gene g.
    const auto section_pair = [](double r) {
        // y = [1,-1,1,-1], yhat = r*y + sqrt(1-r^2)*[1,1,-1,-1]: correlation exactly r
        const double s = std::sqrt(1 - r * r);
        std::vector<std::pair<double, double>> rows;
        const double y[4] = {1, -1, 1, -1}, o[4] = {1, 1, -1, -1};
        for (int i = 0; i < 4; ++i) rows.emplace_back(y[i], r * y[i] + s * o[i]);
        return rows;
    };
    Matrix pred(12, 1), truth(12, 1);
    std::vector<std::string> keys, sections;
    int row = 0;
    for (auto [name, r] : std::vector<std::pair<std::string, double>>{{"P/A", 0.2}, {"P/B", 0.5}, {"P/C", 0.9}}) {
        for (auto [y, yh] : section_pair(r)) {
            truth(row, 0) = y;
            pred(row, 0) = yh;
            keys.push_back(name + "/s" + std::to_string(row));
            sections.push_back(name);
            ++row;
        }
    }
    const auto rep = per_gene_report(pred, truth, {"g"}, keys, sections);
    REQUIRE(rep.per_gene.size() == 1);
    CHECK(rep.per_gene[0].pcc_per_section.size() == 3);
    CHECK(rep.per_gene[0].median_pcc == doctest::Approx(0.5));
    CHECK(rep.per_gene[0].category == Category::Strong);
    CHECK(rep.per_gene[0].rmse >= rep.per_gene[0].mae);
    CHECK(section_of("P/A/s0") == "P/A");

    const auto one = per_gene_report(pred, truth, {"g"}, keys, std::vector<std::string>(12, "P/A"));
    CHECK(one.per_gene[0].median_pcc == doctest::Approx(pcc(std::vector<double>(truth.data), pred.data)));
}

TEST_CASE("report counts and aggregate errors") {
    Matrix truth(4, 3), pred(4, 3);
    for (int i = 0; i < 4; ++i) {
        truth(i, 0) = i;
        pred(i, 0) = i;  // strong
        truth(i, 1) = i;
        pred(i, 1) = -i;  // negative
        truth(i, 2) = i;
        pred(i, 2) = 1.0;  // undefined
    }
    const auto rep = per_gene_report(pred, truth, {"a", "b", "c"}, {"P/S/1", "P/S/2", "P/S/3", "P/S/4"},
                                     std::vector<std::string>(4, "P/S"));
    CHECK(rep.counts.strong == 1);
    CHECK(rep.counts.negative == 1);
    CHECK(rep.counts.undefined == 1);
    CHECK(rep.counts.positive == rep.counts.strong + rep.counts.medium + rep.counts.weak + rep.counts.negligible);
    CHECK(rep.a_mae == doctest::Approx((rep.per_gene[0].mae + rep.per_gene[1].mae + rep.per_gene[2].mae) / 3));

    TempDir dir;
    write_report(rep, dir / "r.json");
    const auto back = read_report(dir / "r.json");
    CHECK(back.counts == rep.counts);
    CHECK(back.predictions == rep.predictions);
    CHECK(is_undefined(back.per_gene[2].median_pcc));
    CHECK(per_gene_csv(back) == per_gene_csv(rep));
}

TEST_CASE("per-gene CSV golden layout") {
    MetricsReport r;
    r.per_gene = {{"ACTB", {}, 0.35, 0.7, 0.9, Category::Medium},
                  {"B2M", {}, 0.6325, 0.75, 0.91444, Category::Strong},
                  {"XIST", {}, kUndefined, 0.1, 0.2, Category::Undefined}};
    CHECK(per_gene_csv(r) ==
          "gene,median_pcc,mae,rmse,category\n"
          "B2M,0.6325,0.7500,0.9144,strong\n"
          "ACTB,0.3500,0.7000,0.9000,medium\n"
          "XIST,NA,0.1000,0.2000,undefined\n");

    MetricsReport other;
    other.model_tag = "mlp";
    other.per_gene = {{"B2M", {}, 0.1, 0, 0, Category::Weak}, {"ACTB", {}, 0.7, 0, 0, Category::Strong}};
    r.model_tag = "conv";
    CHECK(top_genes_csv({r, other}, 2) ==
          "gene,conv,mlp\n"
          "ACTB,0.3500,0.7000\n"
          "B2M,0.6325,0.1000\n");
    r.a_mae = 0.749;
    r.a_rmse = 0.9144;
    CHECK(error_table_csv({{"conv", &r, &r}}) ==
          "model,train_aMAE,train_aRMSE,test_aMAE,test_aRMSE\nconv,0.7490,0.9144,0.7490,0.9144\n");
}

TEST_CASE("fold plans") {
    std::vector<std::string> patients;
    for (int i = 0; i < 23; ++i) patients.push_back("P" + std::to_string(100 + i));
    const auto plan = plan_folds(patients, "P107", 5, 7);
    std::multiset<std::size_t> sizes;
    std::set<std::string> seen;
    for (const auto& f : plan.folds) {
        sizes.insert(f.size());
        for (const auto& p : f) CHECK(seen.insert(p).second);
    }
    CHECK(sizes == std::multiset<std::size_t>{4, 4, 4, 5, 5});
    CHECK(seen.size() == 22);
    CHECK(seen.count("P107") == 0);
    CHECK(plan_folds(patients, "P107", 5, 7) == plan);
    CHECK(plan_folds(patients, "P107", 5, 8) != plan);
    CHECK(error_kind_of([&] { plan_folds(patients, "nobody", 5, 7); }) == ErrorKind::Argument);
    CHECK(error_kind_of([&] { plan_folds({"a", "b", "c"}, "a", 5, 7); }) == ErrorKind::Argument);
}

TEST_CASE("cross-validation summary") {
    std::vector<FoldOutcome> folds;
    for (std::size_t i = 0; i < 5; ++i) folds.push_back({i, true, "", 0.8, 1.0});
    const auto s = summarize_folds("conv", folds);
    CHECK(s.mae_mean == doctest::Approx(0.8));
    CHECK(s.mae_std == 0.0);
    CHECK(cv_summary_csv({s}) == "model,aMAE,aRMSE\nconv,0.8000 +/- 0.0000,1.0000 +/- 0.0000\n");

    folds = {{0, true, "", 1.0, 2.0}, {1, true, "", 3.0, 4.0}, {2, false, "no spots", kUndefined, kUndefined}};
    const auto t = summarize_folds("x", folds);
    CHECK(t.failed == 1);
    CHECK(t.mae_mean == doctest::Approx(2.0));
    CHECK(t.mae_std == doctest::Approx(std::sqrt(2.0)));
}
