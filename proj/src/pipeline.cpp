#include "stx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "stx/io.hpp"
#include "stx/parallel.hpp"
#include "stx/rng.hpp"

namespace stx::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Synthetic fixture

void SynthConfig::validate() const {
    require(spots >= 1, ErrorKind::Argument, "spots must be at least 1");
    require(main_genes >= 1, ErrorKind::Argument, "genes must be at least 1");
    require(aux_genes >= 0 && zero_genes >= 0, ErrorKind::Argument, "gene counts must be non-negative");
    require(patients >= 1 && sections_per_patient >= 1, ErrorKind::Argument, "need at least one patient and section");
    require(spots >= patients * sections_per_patient, ErrorKind::Argument,
            "every section needs at least one spot");
    require(spacing >= 1 && patch_size >= 2, ErrorKind::Argument, "spacing and patch size must be positive");
}

namespace {

// Well-known highly expressed symbols first so rendered examples have familiar names.
const char* const kMainNames[] = {"B2M", "ACTG1", "ACTB", "TMSB10", "GNAS", "PTMA", "PTPRF", "ERBB2", "PRDX1", "TMSB4X"};

std::string gene_name(const std::string& prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%03d", prefix.c_str(), i + 1);
    return buf;
}

std::int64_t poisson(double mean, Rng& rng) {
    if (mean <= 0.0) return 0;
    if (mean < 30.0) {
        const double limit = std::exp(-mean);
        std::int64_t k = 0;
        double p = rng.uniform();
        while (p > limit) {
            ++k;
            p *= rng.uniform();
        }
        return k;
    }
    return std::max<std::int64_t>(0, std::llround(mean + std::sqrt(mean) * rng.normal()));
}

struct Bump {
    double x, y, sigma, weight;
};

// Smooth field in [0, 1] from a handful of Gaussian bumps.
std::vector<double> smooth_field(int w, int h, Rng& rng, int bumps) {
    std::vector<Bump> bs;
    for (int i = 0; i < bumps; ++i)
        bs.push_back({rng.uniform(0, w), rng.uniform(0, h), rng.uniform(0.10, 0.22) * std::max(w, h),
                      rng.uniform(0.5, 1.0)});
    std::vector<double> f(static_cast<std::size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (const auto& b : bs) {
                const double dx = x - b.x, dy = y - b.y;
                acc += b.weight * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
            }
            f[static_cast<std::size_t>(y) * w + x] = acc;
        }
    const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
    const double a = *lo, span = std::max(*hi - *lo, 1e-12);
    for (auto& v : f) v = (v - a) / span;
    return f;
}

// Hematoxylin/eosin-like tissue through Beer-Lambert: nuclei density follows
// one smooth field, eosin intensity another.
Image synth_tissue(int w, int h, Rng& rng) {
    const auto nuclei_field = smooth_field(w, h, rng, 10);
    const auto eosin_field = smooth_field(w, h, rng, 8);
    std::vector<double> ch(static_cast<std::size_t>(w) * h, 0.0);
    for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = 0.1 + 0.8 * nuclei_field[i];
    const int nuclei = w * h / 250;
    for (int n = 0; n < nuclei; ++n) {
        const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
        const auto idx = static_cast<std::size_t>(std::min(h - 1.0, cy)) * w + static_cast<std::size_t>(std::min(w - 1.0, cx));
        if (rng.uniform() > nuclei_field[idx]) continue;
        const double r = rng.uniform(2.5, 5.5);
        for (int y = std::max(0, static_cast<int>(cy - r)); y <= std::min(h - 1, static_cast<int>(cy + r)); ++y)
            for (int x = std::max(0, static_cast<int>(cx - r)); x <= std::min(w - 1, static_cast<int>(cx + r)); ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) ch[static_cast<std::size_t>(y) * w + x] += 0.3;
    }
    static constexpr double hv[3] = {0.65, 0.70, 0.29}, ev[3] = {0.07, 0.99, 0.11};
    const double hn = std::sqrt(hv[0] * hv[0] + hv[1] * hv[1] + hv[2] * hv[2]);
    const double en = std::sqrt(ev[0] * ev[0] + ev[1] * ev[1] + ev[2] * ev[2]);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y) * w + x;
            const double ce = 0.25 + 0.7 * eosin_field[i];
            Rgb px;
            for (int c = 0; c < 3; ++c) {
                const double od = ch[i] * hv[c] / hn + ce * ev[c] / en + 0.02 * rng.normal();
                px[c] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * std::exp(-od)), 0L, 255L));
            }
            img.set(x, y, px);
        }
    return img;
}

}  // namespace

std::array<double, 3> window_mean(const Image& image, int cx, int cy, int size) {
    const int x0 = cx - size / 2, y0 = cy - size / 2;
    std::array<double, 3> acc{};
    std::size_t n = 0;
    for (int y = std::max(0, y0); y < std::min(image.height, y0 + size); ++y)
        for (int x = std::max(0, x0); x < std::min(image.width, x0 + size); ++x) {
            const auto* p = image.at(x, y);
            for (int c = 0; c < 3; ++c) acc[c] += p[c];
            ++n;
        }
    for (auto& v : acc) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    return acc;
}

SynthSummary synth_fixture(const SynthConfig& cfg, const fs::path& out) {
    cfg.validate();
    fs::create_directories(out / "images");
    fs::create_directories(out / "counts");
    fs::create_directories(out / "spots");

    SynthSummary summary;
    summary.manifest = out / "manifest.json";
    for (int g = 0; g < cfg.main_genes; ++g)
        summary.main_genes.push_back(g < 10 ? std::string(kMainNames[g]) : gene_name("MAIN", g));
    for (int g = 0; g < cfg.aux_genes; ++g) summary.aux_genes.push_back(gene_name("AUX", g));
    for (int g = 0; g < cfg.zero_genes; ++g) summary.zero_genes.push_back(gene_name("ZERO", g));

    // Gene programs: log-rate = base + w . standardized mean color.
    Rng gene_rng(derive_seed(cfg.seed, "synth-genes"));
    struct Program {
        double base;
        std::array<double, 3> w;
    };
    std::vector<Program> programs;
    const auto add_program = [&](double base, double scale) {
        Program p{base, {}};
        for (auto& v : p.w) v = gene_rng.uniform(-scale, scale);
        programs.push_back(p);
    };
    for (int g = 0; g < cfg.main_genes; ++g) add_program(std::log(gene_rng.uniform(250, 500)), 0.6);
    for (int g = 0; g < cfg.aux_genes; ++g) add_program(std::log(gene_rng.uniform(20, 80)), 0.5);

    const int n_sections = cfg.patients * cfg.sections_per_patient;
    struct SectionOut {
        std::string patient, section;
        Image image;
        std::vector<ingest::SpotRecord> spots;
        std::vector<std::array<double, 3>> means;
    };
    std::vector<SectionOut> sections(static_cast<std::size_t>(n_sections));
    for (int s = 0; s < n_sections; ++s) {
        auto& so = sections[s];
        so.patient = "P" + std::to_string(s / cfg.sections_per_patient + 1);
        so.section = "S" + std::to_string(s % cfg.sections_per_patient + 1);
        const int n = cfg.spots / n_sections + (s < cfg.spots % n_sections ? 1 : 0);
        const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
        const int rows = (n + grid - 1) / grid;
        const int margin = cfg.patch_size / 2 + 16;
        const int w = 2 * margin + (grid - 1) * cfg.spacing;
        const int h = 2 * margin + (rows - 1) * cfg.spacing;
        Rng img_rng(derive_seed(cfg.seed, "synth-image", so.patient + "_" + so.section));
        so.image = synth_tissue(w, h, img_rng);
        for (int i = 0; i < n; ++i) {
            const int r = i / grid, c = i % grid;
            char id[32];
            std::snprintf(id, sizeof id, "%dx%d", r + 1, c + 1);
            so.spots.push_back({id, r, c, margin + c * cfg.spacing, margin + r * cfg.spacing, so.patient, so.section});
            so.means.push_back(window_mean(so.image, so.spots.back().pixel_x, so.spots.back().pixel_y, cfg.patch_size));
        }
    }

    // Standardize mean colors over every spot so the programs see unit-scale inputs.
    std::array<double, 3> mu{}, sd{};
    std::size_t total = 0;
    for (const auto& so : sections)
        for (const auto& m : so.means) {
            for (int c = 0; c < 3; ++c) mu[c] += m[c];
            ++total;
        }
    for (auto& v : mu) v /= static_cast<double>(total);
    for (const auto& so : sections)
        for (const auto& m : so.means)
            for (int c = 0; c < 3; ++c) sd[c] += (m[c] - mu[c]) * (m[c] - mu[c]);
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(total)) + 1e-9;

    json manifest_sections = json::array();
    for (const auto& so : sections) {
        const std::string stem = so.patient + "_" + so.section;
        Rng count_rng(derive_seed(cfg.seed, "synth-counts", stem));
        ingest::CountMatrix cm;
        for (const auto* list : {&summary.main_genes, &summary.aux_genes, &summary.zero_genes})
            cm.gene_ids.insert(cm.gene_ids.end(), list->begin(), list->end());
        for (const auto& sp : so.spots) cm.spot_ids.push_back(sp.spot_id);
        cm.counts.assign(cm.gene_ids.size() * cm.spot_ids.size(), 0);
        for (std::size_t i = 0; i < so.spots.size(); ++i) {
            for (std::size_t g = 0; g < programs.size(); ++g) {
                double z = programs[g].base;
                for (int c = 0; c < 3; ++c) z += programs[g].w[c] * (so.means[i][c] - mu[c]) / sd[c];
                const double rate = std::exp(z);
                cm.counts[g * cm.spot_ids.size() + i] =
                    cfg.noise ? poisson(rate, count_rng) : static_cast<std::int64_t>(std::llround(rate));
            }
        }
        write_png(so.image, out / "images" / (stem + ".png"));
        write_count_matrix(cm, out / "counts" / (stem + ".tsv"));
        std::string table = "spot_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n";
        for (const auto& sp : so.spots)
            table += sp.spot_id + "\t" + std::to_string(sp.array_row) + "\t" + std::to_string(sp.array_col) + "\t" +
                     std::to_string(sp.pixel_x) + "\t" + std::to_string(sp.pixel_y) + "\n";
        write_text(out / "spots" / (stem + ".tsv"), table);
        manifest_sections.push_back({{"patient_id", so.patient},
                                     {"section_id", so.section},
                                     {"image", "images/" + stem + ".png"},
                                     {"counts", "counts/" + stem + ".tsv"},
                                     {"spots", "spots/" + stem + ".tsv"}});
        summary.image_files.push_back("images/" + stem + ".png");
    }
    const json manifest = {{"sections", manifest_sections}, {"seed", cfg.seed}};
    write_text(summary.manifest, manifest.dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------------------
// Stage helpers

std::vector<std::string> patients_of(const ingest::Dataset& d) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& s : d.spots)
        if (seen.insert(s.patient_id).second) out.push_back(s.patient_id);
    return out;
}

fs::path find_section_image(const fs::path& dir, const std::string& patient, const std::string& section) {
    for (const auto& name : {patient + "_" + section + ".png", section + ".png"}) {
        const auto p = dir / name;
        if (fs::exists(p)) return p;
    }
    fail(ErrorKind::Io, "no image for section " + patient + "/" + section + " in " + dir.string() + " (expected " +
                            patient + "_" + section + ".png)");
}

ExtractSummary extract_store(const ingest::Dataset& d, const fs::path& image_dir, const patches::PatchConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<ingest::SpotRecord>> groups;
    for (const auto& s : d.spots) {
        auto key = std::make_pair(s.patient_id, s.section_id);
        auto [it, inserted] = groups.try_emplace(key);
        if (inserted) order.push_back(key);
        it->second.push_back(s);
    }
    std::vector<patches::Extraction> per(order.size());
    std::vector<std::size_t> white(order.size(), 0);
    parallel_for(order.size(), [&](std::size_t i) {
        const auto& [patient, section] = order[i];
        const auto image = read_png(find_section_image(image_dir, patient, section));
        auto ex = patches::extract_patches(image, groups[order[i]], cfg);
        const auto before = ex.patches.size();
        std::erase_if(ex.patches, [&](const patches::Patch& p) { return !patches::is_informative(p, cfg); });
        white[i] = before - ex.patches.size();
        per[i] = std::move(ex);
    });
    ExtractSummary out;
    out.sections = order.size();
    out.store.config = cfg;
    out.store.candidates = d.n_spots();
    for (std::size_t i = 0; i < per.size(); ++i) {
        out.store.out_of_bounds += per[i].out_of_bounds;
        out.store.white_rejected += white[i];
        for (auto& p : per[i].patches) out.store.patches.push_back(std::move(p));
    }
    std::sort(out.store.patches.begin(), out.store.patches.end(),
              [](const patches::Patch& a, const patches::Patch& b) { return a.key() < b.key(); });
    require(!out.store.patches.empty(), ErrorKind::InsufficientTissue, "no informative patches were extracted");
    return out;
}

namespace {

std::vector<double> row_vector(const Matrix& m, std::size_t r) {
    const auto row = m.row(r);
    return {row.begin(), row.end()};
}

}  // namespace

patches::ChannelStats train_channel_stats(const patches::PatchStore& store, const filter::TargetTable& targets) {
    std::vector<const Image*> images;
    for (auto r : targets.spots_in(filter::Split::Train))
        if (const auto* p = store.find(targets.spot_keys[r])) images.push_back(&p->pixels);
    require(!images.empty(), ErrorKind::EmptyDataset, "no training patches to compute channel statistics");
    return patches::compute_channel_stats(images);
}

ExampleSet build_examples(const patches::PatchStore& store, const filter::TargetTable& targets, filter::Split split,
                          const patches::ChannelStats& stats, int resolution) {
    ExampleSet set;
    std::vector<std::pair<std::size_t, const patches::Patch*>> found;
    for (auto r : targets.spots_in(split)) {
        const auto* p = store.find(targets.spot_keys[r]);
        if (p)
            found.emplace_back(r, p);
        else
            ++set.missing_patches;
    }
    set.examples.resize(found.size());
    set.target_rows.resize(found.size());
    parallel_for(found.size(), [&](std::size_t i) {
        const auto [r, p] = found[i];
        auto& e = set.examples[i];
        e.key = targets.spot_keys[r];
        e.input = model::resample(patches::to_tensor(p->pixels, stats), resolution);
        e.main_target = row_vector(targets.main_targets, r);
        e.aux_target = row_vector(targets.aux_targets, r);
        set.target_rows[i] = r;
    });
    return set;
}

FilterOutcome filter_and_split(const ingest::Dataset& raw, const FilterOptions& opts) {
    FilterOutcome out;
    const auto genes = filter::filter_genes(raw);
    out.filtered = filter::filter_spots(genes, opts.min_spot_counts);
    out.genes_removed = raw.n_genes() - genes.n_genes();
    out.spots_removed = genes.n_spots() - out.filtered.n_spots();
    require(out.filtered.n_spots() > 0, ErrorKind::EmptyDataset, "no spots left after filtering");
    const auto split = filter::assign_splits(out.filtered, opts.validation_patients, opts.test_patients);
    std::vector<std::size_t> train_spots;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == filter::Split::Train) train_spots.push_back(i);
    require(!train_spots.empty(), ErrorKind::EmptyDataset,
            "no training spots: every patient is in a held-out split");
    const auto panel = filter::select_gene_panel(out.filtered, opts.panel_size, train_spots);
    out.targets = filter::fit_transform_targets(out.filtered, panel, train_spots);
    out.targets.split = split;
    return out;
}

TrainedModel train_model(const patches::PatchStore& store, const filter::TargetTable& targets,
                         const model::TrainConfig& cfg, const model::StepObserver& observer) {
    cfg.trunk.validate();
    TrainedModel m;
    m.stats = train_channel_stats(store, targets);
    auto set = build_examples(store, targets, filter::Split::Train, m.stats, cfg.trunk.resolution);
    require(!set.examples.empty(), ErrorKind::EmptyDataset, "training split has no patches");
    m.train_examples = set.examples.size();
    auto result = model::train(set.examples, cfg, observer);
    m.state = std::move(result.state);
    m.history = std::move(result.history);
    return m;
}

json checkpoint_extra(const TrainedModel& m, const filter::TargetTable& targets, const model::TrainConfig& cfg) {
    json history = json::array();
    for (const auto& h : m.history)
        history.push_back({{"main", h.main}, {"aux", h.aux}, {"aux_term", h.aux_term}, {"total", h.total}});
    return {{"transform_fingerprint", targets.transform.fingerprint()},
            {"main_genes", targets.panel.main_genes},
            {"aux_genes", targets.panel.aux_genes},
            {"channel_stats", patches::to_json(m.stats)},
            {"train",
             {{"lambda", cfg.loss.lambda},
              {"head_loss", model::to_string(cfg.loss.head_loss)},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.sgd.lr},
              {"momentum", cfg.sgd.momentum},
              {"clip_norm", cfg.sgd.clip_norm},
              {"weight_decay", cfg.sgd.weight_decay},
              {"augment", cfg.augment},
              {"seed", cfg.seed},
              {"examples", m.train_examples}}},
            {"history", history}};
}

eval::MetricsReport evaluate_model(const model::ModelState& state, const json& extra,
                                   const patches::PatchStore& store, const filter::TargetTable& targets,
                                   const EvalOptions& opts) {
    const auto fp = extra.value("transform_fingerprint", std::string());
    require(fp == targets.transform.fingerprint(), ErrorKind::Integrity,
            "checkpoint was trained with target transform " + fp + " but the targets file has " +
                targets.transform.fingerprint());
    require(state.k_main == targets.panel.main_genes.size() && state.k_aux == targets.panel.aux_genes.size(),
            ErrorKind::Integrity, "checkpoint head sizes do not match the targets file");
    const auto stats = patches::channel_stats_from_json(extra.at("channel_stats"));
    const auto set = build_examples(store, targets, opts.split, stats, state.config.resolution);
    require(!set.examples.empty(), ErrorKind::EmptyDataset,
            std::string("no patches for the ") + filter::to_string(opts.split) + " split");
    std::vector<patches::PatchTensor> inputs;
    inputs.reserve(set.examples.size());
    for (const auto& e : set.examples) inputs.push_back(e.input);
    const auto main = model::predict_main(state, inputs);
    Matrix pred = main, truth(set.examples.size(), state.k_main);
    std::vector<std::string> genes = targets.panel.main_genes;
    if (opts.emit_aux && state.k_aux > 0) {
        const auto aux = model::predict_aux(state, inputs);
        pred = Matrix(inputs.size(), state.k_main + state.k_aux);
        truth = Matrix(inputs.size(), state.k_main + state.k_aux);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            std::copy(main.row(i).begin(), main.row(i).end(), pred.row(i).begin());
            std::copy(aux.row(i).begin(), aux.row(i).end(), pred.row(i).begin() + static_cast<std::ptrdiff_t>(state.k_main));
        }
        genes.insert(genes.end(), targets.panel.aux_genes.begin(), targets.panel.aux_genes.end());
    }
    std::vector<std::string> keys, sections;
    for (std::size_t i = 0; i < set.examples.size(); ++i) {
        const auto& e = set.examples[i];
        keys.push_back(e.key);
        sections.push_back(eval::section_of(e.key));
        std::copy(e.main_target.begin(), e.main_target.end(), truth.row(i).begin());
        if (truth.cols > state.k_main)
            std::copy(e.aux_target.begin(), e.aux_target.end(), truth.row(i).begin() + static_cast<std::ptrdiff_t>(state.k_main));
    }
    auto report = eval::per_gene_report(pred, truth, genes, keys, sections);
    report.model_tag = opts.model_tag.empty() ? model::to_string(state.config.kind) : opts.model_tag;
    report.split = filter::to_string(opts.split);
    return report;
}

// ---------------------------------------------------------------------------
// Cross-validation

CvResult run_cross_validation(const ingest::Dataset& filtered, const patches::PatchStore& store,
                              const eval::FoldPlan& plan, const CvConfig& cfg) {
    CvResult result;
    result.plan = plan;
    std::vector<eval::FoldOutcome> outcomes;
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        eval::FoldOutcome outcome;
        outcome.fold = f;
        try {
            const std::set<std::string> validation(plan.folds[f].begin(), plan.folds[f].end());
            std::vector<std::string> val_list(validation.begin(), validation.end());
            std::vector<std::size_t> train_spots;
            for (std::size_t s = 0; s < filtered.n_spots(); ++s) {
                const auto& p = filtered.spots[s].patient_id;
                if (p != plan.heldout_patient && !validation.count(p)) train_spots.push_back(s);
            }
            require(!train_spots.empty(), ErrorKind::EmptyDataset, "fold has no training spots");
            const auto panel = filter::select_gene_panel(filtered, cfg.panel_size, train_spots);
            auto targets = filter::fit_transform_targets(filtered, panel, train_spots);
            targets.split = filter::assign_splits(filtered, val_list, {plan.heldout_patient});
            require(!targets.spots_in(filter::Split::Validation).empty(), ErrorKind::EmptyDataset,
                    "fold has no validation spots");
            auto train_cfg = cfg.train;
            train_cfg.seed = derive_seed(cfg.train.seed, "fold", std::to_string(f));
            const auto trained = train_model(store, targets, train_cfg);
            auto report = evaluate_model(trained.state, checkpoint_extra(trained, targets, train_cfg), store, targets,
                                         {filter::Split::Validation, cfg.model_tag, false});
            outcome.ok = true;
            outcome.a_mae = report.a_mae;
            outcome.a_rmse = report.a_rmse;
            result.reports.push_back(std::move(report));
        } catch (const Error& e) {
            outcome.ok = false;
            outcome.error = std::string(to_string(e.kind())) + ": " + e.what();
        }
        outcomes.push_back(outcome);
    }
    result.summary = eval::summarize_folds(cfg.model_tag, outcomes);
    return result;
}

}  // namespace stx::pipeline
