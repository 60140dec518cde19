#include "doctest.h"

#include <cmath>
#include <map>

#include "fixture.hpp"
#include "stx/image.hpp"
#include "stx/io.hpp"
#include "test_util.hpp"

using namespace stx;
using stx::testing::error_kind_of;
using stx::testing::run_fixture;
using stx::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& dir) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read_bytes(e.path());
    return out;
}

// Least squares y ~ a + b.x over rows of x, solved through the normal equations.
std::vector<double> fit_affine(const std::vector<std::array<double, 3>>& x, const std::vector<double>& y) {
    double a[4][5] = {};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double row[4] = {1.0, x[i][0], x[i][1], x[i][2]};
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) a[r][c] += row[r] * row[c];
            a[r][4] += row[r] * y[i];
        }
    }
    for (int p = 0; p < 4; ++p) {
        int best = p;
        for (int r = p + 1; r < 4; ++r)
            if (std::abs(a[r][p]) > std::abs(a[best][p])) best = r;
        std::swap(a[p], a[best]);
        for (int r = 0; r < 4; ++r) {
            if (r == p) continue;
            const double f = a[r][p] / a[p][p];
            for (int c = p; c < 5; ++c) a[r][c] -= f * a[p][c];
        }
    }
    std::vector<double> fitted;
    for (const auto& xi : x)
        fitted.push_back(a[0][4] / a[0][0] + a[1][4] / a[1][1] * xi[0] + a[2][4] / a[2][2] * xi[1] +
                         a[3][4] / a[3][3] * xi[2]);
    return fitted;
}

pipeline::FilterOptions fixture_filter(std::vector<std::string> test = {}) {
    pipeline::FilterOptions f;
    f.panel_size = 20;
    f.test_patients = std::move(test);
    return f;
}

}  // namespace

TEST_CASE("synthetic fixture is deterministic per seed") {
    TempDir a, b, c;
    pipeline::SynthConfig cfg;
    pipeline::synth_fixture(cfg, a.path());
    pipeline::synth_fixture(cfg, b.path());
    CHECK(tree_bytes(a.path()) == tree_bytes(b.path()));
    cfg.seed = 8;
    pipeline::synth_fixture(cfg, c.path());
    CHECK(tree_bytes(a.path()) != tree_bytes(c.path()));
}

TEST_CASE("synthetic counts are non-negative and ranked by design") {
    TempDir dir;
    pipeline::SynthConfig cfg;
    const auto s = pipeline::synth_fixture(cfg, dir.path());
    const auto d = ingest::assemble_dataset(ingest::load_manifest(s.manifest), ingest::Orientation::GenesAsRows).dataset;
    CHECK(d.n_spots() == 64);
    CHECK(d.n_genes() == 52);
    for (auto v : d.counts) CHECK(v >= 0);
    std::map<std::string, double> mean;
    for (std::size_t g = 0; g < d.n_genes(); ++g) {
        for (std::size_t i = 0; i < d.n_spots(); ++i) mean[d.genes[g]] += static_cast<double>(d.at(i, g)) / 64.0;
    }
    for (const auto& z : s.zero_genes) CHECK(mean[z] == 0.0);
    double min_main = 1e300, max_aux = 0.0;
    for (const auto& g : s.main_genes) min_main = std::min(min_main, mean[g]);
    for (const auto& g : s.aux_genes) max_aux = std::max(max_aux, mean[g]);
    CHECK(min_main > max_aux);
    for (const auto& spot : d.spots) {
        std::int64_t total = 0;
        for (std::size_t g = 0; g < d.n_genes(); ++g) total += d.at(&spot - d.spots.data(), g);
        CHECK(total >= 1000);
    }
}

TEST_CASE("a linear probe on patch color recovers noise-free main targets") {
    TempDir dir;
    pipeline::SynthConfig cfg;
    cfg.noise = false;
    const auto r = run_fixture(dir.path(), cfg, fixture_filter());
    const auto& t = r.filtered.targets;
    REQUIRE(t.panel.main_genes.size() == 20);
    std::map<std::string, Image> images;
    std::map<std::string, std::array<double, 3>> color;
    for (const auto& s : r.filtered.filtered.spots) {
        const auto path = pipeline::find_section_image(dir / "images", s.patient_id, s.section_id);
        if (!images.count(path.string())) images.emplace(path.string(), read_png(path));
        color[ingest::spot_key(s)] = pipeline::window_mean(images.at(path.string()), static_cast<int>(s.pixel_x),
                                                           static_cast<int>(s.pixel_y), cfg.patch_size);
    }
    std::vector<std::array<double, 3>> x;
    for (const auto& k : t.spot_keys) x.push_back(color.at(k));
    for (std::size_t g = 0; g < t.panel.main_genes.size(); ++g) {
        std::vector<double> y;
        for (std::size_t i = 0; i < t.spot_keys.size(); ++i) y.push_back(t.main_targets(i, g));
        INFO(t.panel.main_genes[g]);
        CHECK(eval::pcc(fit_affine(x, y), y) > 0.9);
    }
}

TEST_CASE("training loss strictly decreases over the first ten epochs on the fixture") {
    TempDir dir;
    const auto r = run_fixture(dir.path(), pipeline::SynthConfig{}, fixture_filter());
    model::TrainConfig cfg;
    cfg.trunk.kind = model::TrunkKind::Conv;
    cfg.trunk.depth = 2;
    cfg.trunk.width = 16;
    cfg.trunk.resolution = 16;
    cfg.epochs = 10;
    const auto m = pipeline::train_model(r.store, r.filtered.targets, cfg);
    REQUIRE(m.history.size() == 10);
    CHECK(m.train_examples == 64);
    for (std::size_t e = 1; e < m.history.size(); ++e) CHECK(m.history[e].total < m.history[e - 1].total);
}

TEST_CASE("train, checkpoint, evaluate, and refuse mismatched targets") {
    TempDir dir;
    const auto r = run_fixture(dir.path(), pipeline::SynthConfig{}, fixture_filter({"P2"}));
    const auto& targets = r.filtered.targets;
    model::TrainConfig cfg;
    cfg.trunk.kind = model::TrunkKind::Conv;
    cfg.trunk.depth = 1;
    cfg.trunk.width = 4;
    cfg.trunk.resolution = 8;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    const auto m = pipeline::train_model(r.store, targets, cfg);
    const auto extra = pipeline::checkpoint_extra(m, targets, cfg);
    model::write_checkpoint(m.state, extra, dir / "m.ckpt");
    nlohmann::json read_extra;
    const auto state = model::read_checkpoint(dir / "m.ckpt", &read_extra);

    const auto report = pipeline::evaluate_model(state, read_extra, r.store, targets, {filter::Split::Test, "conv"});
    CHECK(report.split == "test");
    CHECK(report.per_gene.size() == 20);
    CHECK(report.spot_keys.size() == targets.spots_in(filter::Split::Test).size());
    for (const auto& k : report.spot_keys) CHECK(k.rfind("P2/", 0) == 0);
    CHECK(std::isfinite(report.a_mae));

    const auto with_aux =
        pipeline::evaluate_model(state, read_extra, r.store, targets, {filter::Split::Test, "conv", true});
    CHECK(with_aux.per_gene.size() == 50);

    // targets refit on another split have a different transform
    const auto other = pipeline::filter_and_split(r.raw, fixture_filter({"P1"}));
    CHECK(error_kind_of([&] {
              pipeline::evaluate_model(state, read_extra, r.store, other.targets, {filter::Split::Test, "conv"});
          }) == ErrorKind::Integrity);
}

TEST_CASE("cross-validation keeps the held-out patient out of every fold") {
    TempDir dir;
    pipeline::SynthConfig sc;
    sc.spots = 48;
    sc.patients = 6;
    sc.sections_per_patient = 1;
    const auto r = run_fixture(dir.path(), sc, fixture_filter());
    const auto plan = eval::plan_folds(pipeline::patients_of(r.filtered.filtered), "P6", 5, 7);
    pipeline::CvConfig cfg;
    cfg.panel_size = 20;
    cfg.model_tag = "mlp";
    cfg.train.trunk.kind = model::TrunkKind::Mlp;
    cfg.train.trunk.depth = 1;
    cfg.train.trunk.width = 16;
    cfg.train.trunk.resolution = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    const auto a = pipeline::run_cross_validation(r.filtered.filtered, r.store, plan, cfg);
    REQUIRE(a.reports.size() == 5);
    CHECK(a.summary.folds.size() == 5);
    for (const auto& rep : a.reports)
        for (const auto& k : rep.spot_keys) CHECK(k.rfind("P6/", 0) != 0);
    const auto b = pipeline::run_cross_validation(r.filtered.filtered, r.store, plan, cfg);
    CHECK(eval::cv_summary_csv({a.summary}) == eval::cv_summary_csv({b.summary}));
}
