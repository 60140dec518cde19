#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stx/common.hpp"
#include "stx/ingest.hpp"

namespace stx::filter {

using ingest::Dataset;

inline constexpr std::int64_t kMinSpotCounts = 1000;
inline constexpr int kPanelSize = 250;

// Drops genes whose mean count over every spot is zero.
Dataset filter_genes(const Dataset& d);
// Keeps spots whose total count is at least min_total. Run after filter_genes.
Dataset filter_spots(const Dataset& d, std::int64_t min_total = kMinSpotCounts);

struct GenePanel {
    std::vector<std::string> main_genes;
    std::vector<std::string> aux_genes;
    std::vector<double> main_means;  // ranking means, aligned with main_genes

    bool operator==(const GenePanel&) const = default;
};

// Top-k genes by mean over the given spots (descending, ties by ascending
// symbol); every other gene goes to the auxiliary list in dataset order.
GenePanel select_gene_panel(const Dataset& d, int k, const std::vector<std::size_t>& train_spots);
GenePanel select_gene_panel(const Dataset& d, int k = kPanelSize);

nlohmann::json to_json(const GenePanel& panel);
GenePanel panel_from_json(const nlohmann::json& j);

// log1p followed by a per-gene z-score whose statistics come from training spots.
struct TargetTransform {
    std::vector<std::string> genes;  // main genes then aux genes
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<bool> zero_variance;  // std was replaced by 1

    double forward(std::size_t gene, double count) const;
    double inverse(std::size_t gene, double z) const;
    // Stable fingerprint used to match checkpoints with target files.
    std::string fingerprint() const;

    bool operator==(const TargetTransform&) const = default;
};

enum class Split { Train, Validation, Test };
const char* to_string(Split s);
Split parse_split(const std::string& s);

struct TargetTable {
    std::vector<std::string> spot_keys;
    std::vector<Split> split;
    Matrix main_targets;  // spots x |main|
    Matrix aux_targets;   // spots x |aux|
    GenePanel panel;
    TargetTransform transform;

    std::vector<std::size_t> spots_in(Split s) const;
};

TargetTable fit_transform_targets(const Dataset& d, const GenePanel& panel, const std::vector<std::size_t>& train_spots);

// Per-spot split labels from patient membership; unlisted patients are Train.
std::vector<Split> assign_splits(const Dataset& d, const std::vector<std::string>& validation_patients,
                                 const std::vector<std::string>& test_patients);

nlohmann::json to_json(const TargetTable& t);
TargetTable targets_from_json(const nlohmann::json& j);
void write_targets(const TargetTable& t, const std::filesystem::path& path);
TargetTable read_targets(const std::filesystem::path& path);

}  // namespace stx::filter
