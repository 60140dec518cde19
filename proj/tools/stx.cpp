// stx: command-line driver for the spatial transcriptomics pipeline.

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "stx/eval.hpp"
#include "stx/filter.hpp"
#include "stx/image.hpp"
#include "stx/ingest.hpp"
#include "stx/io.hpp"
#include "stx/model.hpp"
#include "stx/parallel.hpp"
#include "stx/patches.hpp"
#include "stx/pipeline.hpp"
#include "stx/stain.hpp"
#include "stx/viz.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stx;

namespace {

int g_verbosity = 1;  // 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
    if (g_verbosity >= 1) std::cerr << "[stx] " << msg << '\n';
}

void log_debug(const std::string& msg) {
    if (g_verbosity >= 2) std::cerr << "[stx] " << msg << '\n';
}

std::vector<std::string> comma_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& part : split(s, ','))
        if (!trim(part).empty()) out.push_back(trim(part));
    return out;
}

// Sibling path: "dir/filtered.zip" + ".panel.json" -> "dir/filtered.panel.json".
fs::path sibling(const fs::path& p, const std::string& suffix) {
    return p.parent_path() / (p.stem().string() + suffix);
}

json hash_of(const fs::path& p) { return {{"path", p.string()}, {"sha256", sha256_file(p)}}; }

// Hash of a directory's regular files in name order.
std::string hash_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string joined;
    for (const auto& f : files) joined += fs::relative(f, dir).generic_string() + ":" + sha256_file(f) + "\n";
    return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(joined.data()), joined.size()));
}

void emit(json j) {
    j["ok"] = true;
    std::cout << j.dump() << std::endl;
}

// ---------------------------------------------------------------------------
// Trunk flags shared by train, gradient-check and cross-validate.

struct TrunkFlags {
    std::string kind = "mlp";
    std::optional<int> depth, width, resolution;
    bool residual = false;
    std::optional<int> patch_size, embed_dim, heads, key_dim;
    std::optional<double> phi;
    double alpha = 1.2, beta = 1.1, gamma = 1.15;

    void add(CLI::App* app) {
        app->add_option("--trunk", kind, "Trunk variant: mlp, conv or vit-micro")->capture_default_str();
        app->add_option("--depth", depth, "Trunk depth d");
        app->add_option("--width", width, "Trunk width w");
        app->add_option("--resolution", resolution, "Input resolution r in pixels");
        app->add_flag("--residual", residual, "Residual conv blocks");
        app->add_option("--patch-size", patch_size, "vit-micro patch size P");
        app->add_option("--embed-dim", embed_dim, "vit-micro embedding dimension D");
        app->add_option("--heads", heads, "vit-micro attention heads c");
        app->add_option("--key-dim", key_dim, "vit-micro key dimension d_k");
        app->add_option("--phi", phi, "Compound scaling exponent; sets d, w, r from the base trunk");
        app->add_option("--alpha", alpha, "Depth scaling coefficient")->capture_default_str();
        app->add_option("--beta", beta, "Width scaling coefficient")->capture_default_str();
        app->add_option("--gamma", gamma, "Resolution scaling coefficient")->capture_default_str();
    }

    // Per-variant defaults, then compound scaling, then explicit overrides.
    model::TrunkConfig build(std::vector<std::string>* warnings) const {
        model::TrunkConfig c;
        c.kind = model::parse_trunk(kind);
        switch (c.kind) {
            case model::TrunkKind::Mlp: c.depth = 1; c.width = 2048; c.resolution = 2; break;
            case model::TrunkKind::Conv: c.depth = 2; c.width = 16; c.resolution = 16; break;
            case model::TrunkKind::VitMicro:
                c.depth = 1; c.width = 32; c.resolution = 16;
                c.vit = {4, 16, 2, 8};
                break;
        }
        if (phi) {
            model::ScalingConfig s{alpha, beta, gamma, *phi, c.depth, c.width, c.resolution};
            const auto dims = model::compound_scale(s, warnings);
            c.depth = dims.depth;
            c.width = dims.width;
            c.resolution = dims.resolution;
        }
        if (depth) c.depth = *depth;
        if (width) c.width = *width;
        if (resolution) c.resolution = *resolution;
        c.residual = residual;
        if (patch_size) c.vit.patch_size = *patch_size;
        if (heads) c.vit.heads = *heads;
        if (key_dim) c.vit.key_dim = *key_dim;
        if (embed_dim) c.vit.embed_dim = *embed_dim;
        else if (heads || key_dim) c.vit.embed_dim = c.vit.heads * c.vit.key_dim;
        c.validate();
        return c;
    }
};

struct TrainFlags {
    double lambda = 40.0;
    std::string head_loss = "mse";
    int epochs = 200;
    int batch = 32;
    double lr = 0.001;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::optional<double> clip_norm;
    std::uint64_t seed = 7;
    bool no_augment = false;

    void add(CLI::App* app) {
        app->add_option("--lambda", lambda, "Auxiliary loss weight")->capture_default_str();
        app->add_option("--head-loss", head_loss, "Per-head loss: mse or soft-ce")->capture_default_str();
        app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
        app->add_option("--batch", batch, "Mini-batch size")->capture_default_str();
        app->add_option("--lr", lr, "SGD learning rate")->capture_default_str();
        app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
        app->add_option("--weight-decay", weight_decay, "L2 weight decay")->capture_default_str();
        app->add_option("--clip-norm", clip_norm, "Gradient L2 norm cap, 0 for none (default: 10 for vit-micro, else 0)");
        app->add_option("--seed", seed, "Seed for init, shuffle and augment streams")->capture_default_str();
        app->add_flag("--no-augment", no_augment, "Disable flips and rotations");
    }

    model::TrainConfig build(const model::TrunkConfig& trunk) const {
        model::TrainConfig cfg;
        cfg.trunk = trunk;
        cfg.loss = {lambda, model::parse_head_loss(head_loss)};
        // Without layer normalization the attention trunk starts with large features and
        // diverges at the default lambda and lr unless steps are capped.
        const double default_clip = trunk.kind == model::TrunkKind::VitMicro ? 10.0 : 0.0;
        cfg.sgd = {lr, momentum, weight_decay, clip_norm.value_or(default_clip)};
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.seed = seed;
        cfg.augment = !no_augment;
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// Stages

struct IngestArgs {
    fs::path manifest, out;
    std::string genes_as = "rows";
};

void run_ingest(const IngestArgs& a) {
    const auto manifest = ingest::load_manifest(a.manifest);
    auto result = ingest::assemble_dataset(manifest, ingest::parse_orientation(a.genes_as));
    for (const auto& w : result.warnings) log_info("warning: " + w);
    ingest::write_archive(result.dataset, a.out);
    log_info("wrote " + a.out.string());
    emit({{"stage", "ingest"},
          {"sections", manifest.sections.size()},
          {"spots", result.dataset.n_spots()},
          {"genes", result.dataset.n_genes()},
          {"warnings", result.warnings},
          {"inputs", {hash_of(a.manifest)}},
          {"outputs", {hash_of(a.out)}}});
}

struct FilterArgs {
    fs::path archive, out, panel, targets;
    std::int64_t min_spot_counts = filter::kMinSpotCounts;
    int top_genes = filter::kPanelSize;
    std::string test_patients, validation_patients;
};

void run_filter(FilterArgs a) {
    if (a.panel.empty()) a.panel = sibling(a.out, ".panel.json");
    if (a.targets.empty()) a.targets = sibling(a.out, ".targets.json");
    const auto raw = ingest::read_archive(a.archive);
    const auto r = pipeline::filter_and_split(
        raw, {a.min_spot_counts, a.top_genes, comma_list(a.validation_patients), comma_list(a.test_patients)});
    const auto& spots = r.filtered;
    const auto& targets = r.targets;
    const auto& panel = targets.panel;
    ingest::write_archive(spots, a.out);
    write_text(a.panel, filter::to_json(panel).dump(2) + "\n");
    filter::write_targets(targets, a.targets);
    log_info("kept " + std::to_string(spots.n_genes()) + " genes and " + std::to_string(spots.n_spots()) + " spots");
    emit({{"stage", "filter"},
          {"genes_in", raw.n_genes()},
          {"genes_removed_zero_mean", r.genes_removed},
          {"spots_in", raw.n_spots()},
          {"spots_removed_low_counts", r.spots_removed},
          {"genes_out", spots.n_genes()},
          {"spots_out", spots.n_spots()},
          {"main_genes", panel.main_genes.size()},
          {"aux_genes", panel.aux_genes.size()},
          {"splits",
           {{"train", targets.spots_in(filter::Split::Train).size()},
            {"validation", targets.spots_in(filter::Split::Validation).size()},
            {"test", targets.spots_in(filter::Split::Test).size()}}},
          {"transform_fingerprint", targets.transform.fingerprint()},
          {"inputs", {hash_of(a.archive)}},
          {"outputs", {hash_of(a.out), hash_of(a.panel), hash_of(a.targets)}}});
}

struct StainArgs {
    fs::path target, in, out;
    double beta = 0.15;
    double lambda = 0.1;
    double luminosity_percentile = 95.0;
    bool no_luminosity = false;
};

void run_stain(const StainArgs& a) {
    stain::StainParams params;
    params.od_threshold = a.beta;
    params.lambda = a.lambda;
    params.validate();
    const auto prepare = [&](const Image& img) {
        return a.no_luminosity ? img : stain::standardize_luminosity(img, a.luminosity_percentile);
    };
    const auto target_img = prepare(read_png(a.target));
    const auto target_profile = stain::estimate_stain_profile(stain::rgb_to_od(target_img), params);
    fs::create_directories(a.out);
    std::vector<fs::path> inputs;
    for (const auto& e : fs::directory_iterator(a.in))
        if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    require(!inputs.empty(), ErrorKind::Io, "no .png images in " + a.in.string());
    json images = json::array(), outputs = json::array();
    for (const auto& p : inputs) {
        const auto src = prepare(read_png(p));
        const auto profile = stain::estimate_stain_profile(stain::rgb_to_od(src), params);
        const auto normalized = stain::normalize_to_target(src, profile, target_profile, params);
        const auto dst = a.out / p.filename();
        write_png(normalized, dst);
        log_info("normalized " + p.filename().string());
        images.push_back({{"image", p.filename().string()}, {"profile", stain::to_json(profile)}});
        outputs.push_back(hash_of(dst));
    }
    const auto profile_path = a.out / "target_profile.json";
    write_text(profile_path, stain::to_json(target_profile).dump(2) + "\n");
    emit({{"stage", "stain-normalize"},
          {"images", inputs.size()},
          {"target_profile", stain::to_json(target_profile)},
          {"sources", images},
          {"inputs", {hash_of(a.target), {{"path", a.in.string()}, {"sha256", hash_dir(a.in)}}}},
          {"outputs", outputs}});
}

struct ExtractArgs {
    fs::path archive, images, out;
    int size = 224;
    int white_threshold = 200;
    double white_fraction = 0.5;
};

void run_extract(const ExtractArgs& a) {
    patches::PatchConfig cfg{a.size, a.size, a.white_threshold, a.white_fraction};
    const auto d = ingest::read_archive(a.archive);
    const auto ex = pipeline::extract_store(d, a.images, cfg);
    patches::write_patch_store(ex.store, a.out);
    log_info("stored " + std::to_string(ex.store.patches.size()) + " patches");
    emit({{"stage", "extract-patches"},
          {"sections", ex.sections},
          {"candidates", ex.store.candidates},
          {"out_of_bounds", ex.store.out_of_bounds},
          {"white_rejected", ex.store.white_rejected},
          {"patches", ex.store.patches.size()},
          {"inputs", {hash_of(a.archive), {{"path", a.images.string()}, {"sha256", hash_dir(a.images)}}}},
          {"outputs", {{{"path", a.out.string()}, {"sha256", hash_dir(a.out)}}}}});
}

struct TrainArgs {
    fs::path patches, targets, out;
    TrunkFlags trunk;
    TrainFlags train;
};

void run_train(const TrainArgs& a) {
    std::vector<std::string> warnings;
    const auto cfg = a.train.build(a.trunk.build(&warnings));
    for (const auto& w : warnings) log_info("warning: " + w);
    const auto store = patches::read_patch_store(a.patches);
    const auto targets = filter::read_targets(a.targets);
    const auto t0 = std::chrono::steady_clock::now();
    const auto trained = pipeline::train_model(store, targets, cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto extra = pipeline::checkpoint_extra(trained, targets, cfg);
    extra["inputs"] = {{"patches", hash_dir(a.patches)}, {"targets", sha256_file(a.targets)}};
    model::write_checkpoint(trained.state, extra, a.out);
    const auto& last = trained.history.empty() ? model::EpochRecord{} : trained.history.back();
    log_info("trained " + std::to_string(trained.state.params.size()) + " parameters in " + std::to_string(secs) + " s");
    emit({{"stage", "train"},
          {"trunk", model::to_json(cfg.trunk)},
          {"params", trained.state.params.size()},
          {"examples", trained.train_examples},
          {"epochs", cfg.epochs},
          {"final_loss", {{"main", last.main}, {"aux", last.aux}, {"aux_term", last.aux_term}, {"total", last.total}}},
          {"seed", cfg.seed},
          {"warnings", warnings},
          {"inputs", {{{"path", a.patches.string()}, {"sha256", hash_dir(a.patches)}}, hash_of(a.targets)}},
          {"outputs", {hash_of(a.out)}}});
}

struct EvaluateArgs {
    fs::path ckpt, patches, targets, out;
    std::string split = "test";
    std::string tag;
    bool emit_aux = false;
    int bins = 10;
};

void run_evaluate(const EvaluateArgs& a) {
    json extra;
    const auto state = model::read_checkpoint(a.ckpt, &extra);
    const auto store = patches::read_patch_store(a.patches);
    const auto targets = filter::read_targets(a.targets);
    const auto report =
        pipeline::evaluate_model(state, extra, store, targets, {filter::parse_split(a.split), a.tag, a.emit_aux});
    eval::write_report(report, a.out);
    const auto genes_csv = sibling(a.out, ".genes.csv");
    const auto hist_csv = sibling(a.out, ".histogram.csv");
    const auto cmp_csv = sibling(a.out, ".comparison.csv");
    write_text(genes_csv, eval::per_gene_csv(report));
    write_text(hist_csv, viz::export_histogram(report, a.bins));
    write_text(cmp_csv, viz::export_model_comparison({report}));
    emit({{"stage", "evaluate"},
          {"split", report.split},
          {"model", report.model_tag},
          {"spots", report.spot_keys.size()},
          {"aMAE", report.a_mae},
          {"aRMSE", report.a_rmse},
          {"counts",
           {{"positive", report.counts.positive},
            {"strong", report.counts.strong},
            {"medium", report.counts.medium},
            {"weak", report.counts.weak},
            {"negligible", report.counts.negligible},
            {"negative", report.counts.negative},
            {"undefined", report.counts.undefined}}},
          {"inputs",
           {hash_of(a.ckpt), {{"path", a.patches.string()}, {"sha256", hash_dir(a.patches)}}, hash_of(a.targets)}},
          {"outputs", {hash_of(a.out), hash_of(genes_csv), hash_of(hist_csv), hash_of(cmp_csv)}}});
}

struct CvArgs {
    fs::path archive, patches, out = "cv";
    int k = 5;
    std::string heldout, tag;
    int top_genes = filter::kPanelSize;
    TrunkFlags trunk;
    TrainFlags train;
};

void run_cv(const CvArgs& a) {
    std::vector<std::string> warnings;
    pipeline::CvConfig cfg;
    cfg.train = a.train.build(a.trunk.build(&warnings));
    cfg.panel_size = a.top_genes;
    cfg.model_tag = a.tag.empty() ? a.trunk.kind : a.tag;
    const auto d = ingest::read_archive(a.archive);
    const auto store = patches::read_patch_store(a.patches);
    const auto plan = eval::plan_folds(pipeline::patients_of(d), a.heldout, a.k, a.train.seed);
    const auto result = pipeline::run_cross_validation(d, store, plan, cfg);
    fs::create_directories(a.out);
    json outputs = json::array();
    for (std::size_t i = 0; i < result.reports.size(); ++i) {
        const auto p = a.out / ("fold" + std::to_string(i) + ".json");
        eval::write_report(result.reports[i], p);
        outputs.push_back(hash_of(p));
    }
    const auto csv = a.out / "summary.csv";
    const auto js = a.out / "summary.json";
    write_text(csv, eval::cv_summary_csv({result.summary}));
    const json summary = {{"plan", eval::to_json(plan)}, {"summary", eval::to_json(result.summary)}};
    write_text(js, summary.dump(2) + "\n");
    outputs.push_back(hash_of(csv));
    outputs.push_back(hash_of(js));
    for (const auto& f : result.summary.folds)
        if (!f.ok) log_info("fold " + std::to_string(f.fold) + " failed: " + f.error);
    emit({{"stage", "cross-validate"},
          {"plan", eval::to_json(plan)},
          {"summary", eval::to_json(result.summary)},
          {"inputs", {hash_of(a.archive), {{"path", a.patches.string()}, {"sha256", hash_dir(a.patches)}}}},
          {"outputs", outputs}});
}

struct RenderArgs {
    fs::path report, image, spots, out;
    std::string gene, section;
    double alpha = 0.6;
    double radius = 0.0;
    bool truth = false;
    bool heatmap_only = false;
};

void run_render(const RenderArgs& a) {
    const auto report = eval::read_report(a.report);
    const auto d = ingest::read_archive(a.spots);
    const auto tissue = read_png(a.image);
    std::size_t col = report.per_gene.size();
    for (std::size_t g = 0; g < report.per_gene.size(); ++g)
        if (report.per_gene[g].gene == a.gene) col = g;
    require(col < report.per_gene.size(), ErrorKind::Argument, "gene " + a.gene + " is not in the report");

    // Which section does the image show? Explicit flag, else <patient>_<section> file stem,
    // else the only section present in the report.
    std::string section = a.section;
    if (section.empty()) {
        std::set<std::string> in_report;
        for (const auto& k : report.spot_keys) in_report.insert(eval::section_of(k));
        const auto stem = a.image.stem().string();
        for (const auto& s : in_report) {
            auto candidate = s;
            std::replace(candidate.begin(), candidate.end(), '/', '_');
            if (candidate == stem) section = s;
        }
        if (section.empty() && in_report.size() == 1) section = *in_report.begin();
        require(!section.empty(), ErrorKind::Argument,
                "cannot tell which section " + a.image.filename().string() + " shows; pass --section patient/section");
    }
    std::map<std::string, const ingest::SpotRecord*> by_key;
    for (const auto& s : d.spots) by_key[ingest::spot_key(s)] = &s;
    viz::HeatmapSpec spec;
    spec.gene = a.gene;
    spec.radius = a.radius;
    spec.alpha = a.alpha;
    const auto& values = a.truth ? report.truth : report.predictions;
    for (std::size_t i = 0; i < report.spot_keys.size(); ++i) {
        if (eval::section_of(report.spot_keys[i]) != section) continue;
        const auto it = by_key.find(report.spot_keys[i]);
        require(it != by_key.end(), ErrorKind::Validation,
                "spot " + report.spot_keys[i] + " is not in the spots archive");
        spec.values.push_back(values(i, col));
        spec.coords.push_back({static_cast<double>(it->second->pixel_x), static_cast<double>(it->second->pixel_y)});
    }
    require(!spec.values.empty(), ErrorKind::EmptyDataset, "report has no spots for section " + section);
    const auto heat = viz::render_heatmap(spec, tissue.width, tissue.height);
    write_png(a.heatmap_only ? heat.image : viz::overlay(heat, tissue, a.alpha), a.out);
    emit({{"stage", "render"},
          {"gene", a.gene},
          {"section", section},
          {"spots", spec.values.size()},
          {"values", a.truth ? "truth" : "predicted"},
          {"inputs", {hash_of(a.report), hash_of(a.image), hash_of(a.spots)}},
          {"outputs", {hash_of(a.out)}}});
}

struct GradCheckArgs {
    TrunkFlags trunk;
    std::uint64_t seed = 3;
    std::string head_loss;  // empty: both
    double lambda = 2.0;
    double step = 1e-5;
    double tolerance = 1e-4;
    int batch = 2;
    int k_main = 3, k_aux = 2;
};

// Small configurations (under 2000 parameters) per variant for finite differences.
model::TrunkConfig gradcheck_trunk(const TrunkFlags& f) {
    model::TrunkConfig c;
    c.kind = model::parse_trunk(f.kind);
    switch (c.kind) {
        case model::TrunkKind::Mlp: c.depth = 2; c.width = 8; c.resolution = 4; break;
        case model::TrunkKind::Conv: c.depth = 2; c.width = 6; c.resolution = 8; break;
        case model::TrunkKind::VitMicro:
            c.depth = 1; c.width = 8; c.resolution = 8;
            c.vit = {4, 8, 2, 4};
            break;
    }
    if (f.depth) c.depth = *f.depth;
    if (f.width) c.width = *f.width;
    if (f.resolution) c.resolution = *f.resolution;
    c.residual = f.residual;
    if (f.patch_size) c.vit.patch_size = *f.patch_size;
    if (f.heads) c.vit.heads = *f.heads;
    if (f.key_dim) c.vit.key_dim = *f.key_dim;
    c.vit.embed_dim = f.embed_dim ? *f.embed_dim : c.vit.heads * c.vit.key_dim;
    c.validate();
    return c;
}

void run_gradcheck(const GradCheckArgs& a) {
    const auto cfg = gradcheck_trunk(a.trunk);
    auto state = model::init_params(cfg, static_cast<std::size_t>(a.k_main), static_cast<std::size_t>(a.k_aux), a.seed);
    Rng rng(derive_seed(a.seed, "gradient-check"));
    for (auto& v : state.params) v += rng.uniform(-0.05, 0.05);
    std::vector<patches::PatchTensor> batch;
    for (int i = 0; i < a.batch; ++i) {
        patches::PatchTensor t{cfg.resolution, cfg.resolution, std::vector<double>(cfg.input_size())};
        for (auto& v : t.values) v = rng.uniform(-1.5, 1.5);
        batch.push_back(std::move(t));
    }
    Matrix mt(batch.size(), state.k_main), at(batch.size(), state.k_aux);
    for (auto& v : mt.data) v = rng.uniform(-1, 1);
    for (auto& v : at.data) v = rng.uniform(-1, 1);
    std::vector<model::HeadLoss> modes;
    if (a.head_loss.empty())
        modes = {model::HeadLoss::Mse, model::HeadLoss::SoftCrossEntropy};
    else
        modes = {model::parse_head_loss(a.head_loss)};
    json results = json::array();
    double worst = 0.0;
    for (auto mode : modes) {
        const auto r = model::gradient_check(state, batch, mt, at, {a.lambda, mode}, a.step);
        worst = std::max(worst, r.max_rel_error);
        results.push_back({{"head_loss", model::to_string(mode)},
                           {"max_rel_error", r.max_rel_error},
                           {"max_abs_error", r.max_abs_error},
                           {"checked", r.checked},
                           {"skipped_kinks", r.skipped_kinks}});
    }
    const json out = {{"stage", "gradient-check"},
                      {"trunk", model::to_json(cfg)},
                      {"params", state.params.size()},
                      {"seed", a.seed},
                      {"step", a.step},
                      {"max_rel_error", worst},
                      {"tolerance", a.tolerance},
                      {"passed", worst < a.tolerance},
                      {"modes", results}};
    require(worst < a.tolerance, ErrorKind::Numeric,
            "max relative gradient error " + std::to_string(worst) + " exceeds " + std::to_string(a.tolerance));
    emit(out);
}

struct SynthArgs {
    fs::path out;
    pipeline::SynthConfig cfg;
    bool no_noise = false;
};

void run_synth(SynthArgs a) {
    a.cfg.noise = !a.no_noise;
    const auto s = pipeline::synth_fixture(a.cfg, a.out);
    emit({{"stage", "synth-fixture"},
          {"manifest", s.manifest.string()},
          {"spots", a.cfg.spots},
          {"main_genes", s.main_genes},
          {"aux_genes", s.aux_genes.size()},
          {"zero_genes", s.zero_genes.size()},
          {"images", s.image_files},
          {"seed", a.cfg.seed},
          {"outputs", {{{"path", a.out.string()}, {"sha256", hash_dir(a.out)}}}}});
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatial transcriptomics from histology: ingest, filter, stain-normalize, extract-patches, "
                 "train, evaluate, cross-validate, render"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    std::string log_level = "info";
    app.add_option("--threads", threads, "Worker threads (default: STX_THREADS or 1)");
    app.add_option("--log-level", log_level, "quiet, info or debug")->check(CLI::IsMember({"quiet", "info", "debug"}));

    IngestArgs ingest_args;
    auto* ingest_cmd = app.add_subcommand("ingest", "Load sections from a manifest into a spot archive");
    ingest_cmd->add_option("--manifest", ingest_args.manifest, "Manifest JSON")->required();
    ingest_cmd->add_option("--genes-as", ingest_args.genes_as, "Count matrix orientation: rows or cols")
        ->capture_default_str();
    ingest_cmd->add_option("--out", ingest_args.out, "Output archive")->required();

    FilterArgs filter_args;
    auto* filter_cmd = app.add_subcommand("filter", "Drop zero genes and low-count spots, select the gene panel");
    filter_cmd->add_option("--archive", filter_args.archive, "Input archive")->required();
    filter_cmd->add_option("--min-spot-counts", filter_args.min_spot_counts, "Minimum total counts per spot")
        ->capture_default_str();
    filter_cmd->add_option("--top-genes", filter_args.top_genes, "Main panel size")->capture_default_str();
    filter_cmd->add_option("--out", filter_args.out, "Filtered archive")->required();
    filter_cmd->add_option("--panel", filter_args.panel, "Panel JSON (default <out>.panel.json)");
    filter_cmd->add_option("--targets", filter_args.targets, "Target table (default <out>.targets.json)");
    filter_cmd->add_option("--test-patients", filter_args.test_patients, "Comma-separated test patients");
    filter_cmd->add_option("--validation-patients", filter_args.validation_patients,
                           "Comma-separated validation patients");

    StainArgs stain_args;
    auto* stain_cmd = app.add_subcommand("stain-normalize", "Normalize every image in a directory to a target stain");
    stain_cmd->add_option("--target", stain_args.target, "Target image")->required();
    stain_cmd->add_option("--in", stain_args.in, "Input directory of PNG images")->required();
    stain_cmd->add_option("--out", stain_args.out, "Output directory")->required();
    stain_cmd->add_option("--beta", stain_args.beta, "Optical density threshold for tissue")->capture_default_str();
    stain_cmd->add_option("--lambda", stain_args.lambda, "Dictionary sparsity weight")->capture_default_str();
    stain_cmd->add_option("--luminosity-percentile", stain_args.luminosity_percentile,
                          "Percentile mapped to full brightness")
        ->capture_default_str();
    stain_cmd->add_flag("--no-luminosity", stain_args.no_luminosity, "Skip luminosity standardization");

    ExtractArgs extract_args;
    auto* extract_cmd = app.add_subcommand("extract-patches", "Cut spot-centered patches and reject white ones");
    extract_cmd->add_option("--archive", extract_args.archive, "Filtered archive")->required();
    extract_cmd->add_option("--images", extract_args.images, "Directory of (normalized) section images")->required();
    extract_cmd->add_option("--size", extract_args.size, "Patch edge in pixels")->capture_default_str();
    extract_cmd->add_option("--white-threshold", extract_args.white_threshold, "Channel minimum for a white pixel")
        ->capture_default_str();
    extract_cmd->add_option("--white-fraction", extract_args.white_fraction, "Reject patches above this white share")
        ->capture_default_str();
    extract_cmd->add_option("--out", extract_args.out, "Patch store directory")->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train the dual-head network");
    train_cmd->add_option("--patches", train_args.patches, "Patch store")->required();
    train_cmd->add_option("--targets", train_args.targets, "Target table")->required();
    train_cmd->add_option("--out", train_args.out, "Checkpoint file")->required();
    train_args.trunk.add(train_cmd);
    train_args.train.add(train_cmd);

    EvaluateArgs eval_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "Per-gene metrics for one split");
    eval_cmd->add_option("--ckpt", eval_args.ckpt, "Checkpoint")->required();
    eval_cmd->add_option("--patches", eval_args.patches, "Patch store")->required();
    eval_cmd->add_option("--targets", eval_args.targets, "Target table")->required();
    eval_cmd->add_option("--split", eval_args.split, "train, validation or test")->capture_default_str();
    eval_cmd->add_option("--out", eval_args.out, "Report JSON; CSV tables are written beside it")->required();
    eval_cmd->add_option("--tag", eval_args.tag, "Model tag for the report (default: trunk variant)");
    eval_cmd->add_flag("--emit-aux", eval_args.emit_aux, "Also report auxiliary-head genes");
    eval_cmd->add_option("--bins", eval_args.bins, "Histogram bins")->capture_default_str();

    CvArgs cv_args;
    auto* cv_cmd = app.add_subcommand("cross-validate", "Patient-level k-fold cross-validation");
    cv_cmd->add_option("--archive", cv_args.archive, "Filtered archive")->required();
    cv_cmd->add_option("--patches", cv_args.patches, "Patch store")->required();
    cv_cmd->add_option("--k", cv_args.k, "Folds")->capture_default_str();
    cv_cmd->add_option("--heldout", cv_args.heldout, "Patient excluded from every fold")->required();
    cv_cmd->add_option("--top-genes", cv_args.top_genes, "Main panel size")->capture_default_str();
    cv_cmd->add_option("--out", cv_args.out, "Output directory")->capture_default_str();
    cv_cmd->add_option("--tag", cv_args.tag, "Model tag for the summary");
    cv_args.trunk.add(cv_cmd);
    cv_args.train.add(cv_cmd);

    RenderArgs render_args;
    auto* render_cmd = app.add_subcommand("render", "Overlay one gene's spot values on a tissue image");
    render_cmd->add_option("--report", render_args.report, "Report JSON from evaluate")->required();
    render_cmd->add_option("--gene", render_args.gene, "Gene symbol")->required();
    render_cmd->add_option("--image", render_args.image, "Tissue image")->required();
    render_cmd->add_option("--spots", render_args.spots, "Spot archive with pixel centers")->required();
    render_cmd->add_option("--out", render_args.out, "Output PNG")->required();
    render_cmd->add_option("--section", render_args.section, "patient/section shown by the image");
    render_cmd->add_option("--alpha", render_args.alpha, "Overlay opacity")->capture_default_str();
    render_cmd->add_option("--radius", render_args.radius, "Disc radius in pixels (default from spot spacing)");
    render_cmd->add_flag("--truth", render_args.truth, "Render ground truth instead of predictions");
    render_cmd->add_flag("--heatmap-only", render_args.heatmap_only, "Write the heatmap without the tissue");

    GradCheckArgs gc_args;
    auto* gc_cmd = app.add_subcommand("gradient-check", "Compare analytic gradients with central differences");
    gc_cmd->add_option("--trunk", gc_args.trunk.kind, "Trunk variant")->capture_default_str();
    gc_cmd->add_option("--depth", gc_args.trunk.depth, "Trunk depth");
    gc_cmd->add_option("--width", gc_args.trunk.width, "Trunk width");
    gc_cmd->add_option("--resolution", gc_args.trunk.resolution, "Input resolution");
    gc_cmd->add_flag("--residual", gc_args.trunk.residual, "Residual conv blocks");
    gc_cmd->add_option("--seed", gc_args.seed, "Seed")->capture_default_str();
    gc_cmd->add_option("--head-loss", gc_args.head_loss, "mse or soft-ce (default: both)");
    gc_cmd->add_option("--lambda", gc_args.lambda, "Auxiliary loss weight")->capture_default_str();
    gc_cmd->add_option("--step", gc_args.step, "Finite-difference step")->capture_default_str();
    gc_cmd->add_option("--tolerance", gc_args.tolerance, "Maximum relative error")->capture_default_str();

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth-fixture", "Write a seeded synthetic dataset");
    synth_cmd->add_option("--spots", synth_args.cfg.spots, "Total spots")->capture_default_str();
    synth_cmd->add_option("--genes", synth_args.cfg.main_genes, "Highly expressed genes tied to patch color")
        ->capture_default_str();
    synth_cmd->add_option("--aux-genes", synth_args.cfg.aux_genes, "Lower-expressed genes")->capture_default_str();
    synth_cmd->add_option("--zero-genes", synth_args.cfg.zero_genes, "All-zero genes")->capture_default_str();
    synth_cmd->add_option("--patients", synth_args.cfg.patients, "Patients")->capture_default_str();
    synth_cmd->add_option("--sections", synth_args.cfg.sections_per_patient, "Sections per patient")
        ->capture_default_str();
    synth_cmd->add_option("--seed", synth_args.cfg.seed, "Seed")->capture_default_str();
    synth_cmd->add_flag("--no-noise", synth_args.no_noise, "Deterministic counts (no sampling noise)");
    synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    g_verbosity = log_level == "quiet" ? 0 : log_level == "debug" ? 2 : 1;
    const auto* sub = app.get_subcommands().front();
    try {
        if (threads > 0) set_thread_count(threads);
        log_debug("threads: " + std::to_string(thread_count()));
        if (sub == ingest_cmd) run_ingest(ingest_args);
        else if (sub == filter_cmd) run_filter(filter_args);
        else if (sub == stain_cmd) run_stain(stain_args);
        else if (sub == extract_cmd) run_extract(extract_args);
        else if (sub == train_cmd) run_train(train_args);
        else if (sub == eval_cmd) run_evaluate(eval_args);
        else if (sub == cv_cmd) run_cv(cv_args);
        else if (sub == render_cmd) run_render(render_args);
        else if (sub == gc_cmd) run_gradcheck(gc_args);
        else if (sub == synth_cmd) run_synth(synth_args);
    } catch (const Error& e) {
        std::cerr << "stx " << sub->get_name() << ": " << e.what() << '\n';
        std::cout << json{{"ok", false}, {"stage", sub->get_name()},
                          {"error", {{"kind", to_string(e.kind())}, {"message", e.what()}}}}.dump()
                  << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "stx " << sub->get_name() << ": " << e.what() << '\n';
        std::cout << json{{"ok", false}, {"stage", sub->get_name()}, {"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump()
                  << std::endl;
        return 1;
    }
    return 0;
}
