#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stx/eval.hpp"
#include "stx/filter.hpp"
#include "stx/ingest.hpp"
#include "stx/model.hpp"
#include "stx/patches.hpp"

namespace stx::pipeline {

// ---------------------------------------------------------------------------
// Synthetic dataset with a known learnable signal.

struct SynthConfig {
    int spots = 64;
    int main_genes = 20;
    int aux_genes = 30;
    int zero_genes = 2;  // all-zero genes for the filter to drop
    int patients = 2;
    int sections_per_patient = 2;
    int spacing = 112;  // pixels between neighboring spot centers
    int patch_size = 224;
    bool noise = true;
    std::uint64_t seed = 7;

    void validate() const;
};

struct SynthSummary {
    std::filesystem::path manifest;
    std::vector<std::string> main_genes;  // highest-expressed genes, in generation order
    std::vector<std::string> aux_genes;
    std::vector<std::string> zero_genes;
    std::vector<std::string> image_files;
};

// Writes manifest.json plus images/, counts/ and spots/ under out. Images are
// named <patient>_<section>.png. Each main gene's log-rate is an affine
// function of the mean RGB of the spot's patch window.
SynthSummary synth_fixture(const SynthConfig& cfg, const std::filesystem::path& out);

// Mean RGB over the size x size window centered on (cx, cy).
std::array<double, 3> window_mean(const Image& image, int cx, int cy, int size);

// ---------------------------------------------------------------------------
// Stage helpers shared by the CLI, the cross-validation driver and tests.

// Locates a section's image inside dir: <patient>_<section>.png first, then
// <section>.png.
std::filesystem::path find_section_image(const std::filesystem::path& dir, const std::string& patient,
                                         const std::string& section);

struct FilterOptions {
    std::int64_t min_spot_counts = filter::kMinSpotCounts;
    int panel_size = filter::kPanelSize;
    std::vector<std::string> validation_patients;
    std::vector<std::string> test_patients;
};

struct FilterOutcome {
    ingest::Dataset filtered;
    filter::TargetTable targets;  // panel and transform fit on training patients
    std::size_t genes_removed = 0;
    std::size_t spots_removed = 0;
};

// Gene filter, spot filter, patient splits, then the panel and target
// transform from the training spots.
FilterOutcome filter_and_split(const ingest::Dataset& raw, const FilterOptions& opts);

struct ExtractSummary {
    patches::PatchStore store;
    std::size_t sections = 0;
};

ExtractSummary extract_store(const ingest::Dataset& d, const std::filesystem::path& image_dir,
                             const patches::PatchConfig& cfg);

struct ExampleSet {
    std::vector<model::Example> examples;
    std::vector<std::size_t> target_rows;  // row in the target table for each example
    std::size_t missing_patches = 0;       // spots in the split without a stored patch
};

// Normalized tensors (mean-pooled to resolution) and targets for one split.
ExampleSet build_examples(const patches::PatchStore& store, const filter::TargetTable& targets, filter::Split split,
                          const patches::ChannelStats& stats, int resolution);

patches::ChannelStats train_channel_stats(const patches::PatchStore& store, const filter::TargetTable& targets);

struct TrainedModel {
    model::ModelState state;
    std::vector<model::EpochRecord> history;
    patches::ChannelStats stats;
    std::size_t train_examples = 0;
};

TrainedModel train_model(const patches::PatchStore& store, const filter::TargetTable& targets,
                         const model::TrainConfig& cfg, const model::StepObserver& observer = {});

// Metadata stored next to the parameters so evaluation can check it is
// looking at matching targets and normalize patches the same way.
nlohmann::json checkpoint_extra(const TrainedModel& m, const filter::TargetTable& targets,
                                const model::TrainConfig& cfg);

struct EvalOptions {
    filter::Split split = filter::Split::Test;
    std::string model_tag;
    bool emit_aux = false;
};

// Evaluates main-gene predictions on one split. Throws an integrity error when
// the checkpoint was trained against a different target transform.
eval::MetricsReport evaluate_model(const model::ModelState& state, const nlohmann::json& extra,
                                   const patches::PatchStore& store, const filter::TargetTable& targets,
                                   const EvalOptions& opts);

// ---------------------------------------------------------------------------
// Cross-validation.

struct CvConfig {
    model::TrainConfig train;
    int panel_size = filter::kPanelSize;
    std::string model_tag = "conv";
};

struct CvResult {
    eval::FoldPlan plan;
    std::vector<eval::MetricsReport> reports;  // one per successful fold
    eval::CvSummary summary;
};

// Per fold: panel and target transform fit on the training patients only,
// train, then evaluate on the fold's validation patients. The held-out patient
// is never used. A failing fold is recorded and the run continues.
CvResult run_cross_validation(const ingest::Dataset& filtered, const patches::PatchStore& store,
                              const eval::FoldPlan& plan, const CvConfig& cfg);

// Patient ids in first-seen order.
std::vector<std::string> patients_of(const ingest::Dataset& d);

}  // namespace stx::pipeline
