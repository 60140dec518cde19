#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stx::ingest {

namespace fs = std::filesystem;

struct SectionRecord {
    std::string patient_id;
    std::string section_id;
    fs::path image_path;
    fs::path counts_path;
    fs::path spots_path;
};

// Genes x spots, row-major.
struct CountMatrix {
    std::vector<std::string> gene_ids;
    std::vector<std::string> spot_ids;
    std::vector<std::int64_t> counts;

    std::size_t n_genes() const { return gene_ids.size(); }
    std::size_t n_spots() const { return spot_ids.size(); }
    std::int64_t& at(std::size_t gene, std::size_t spot) { return counts[gene * spot_ids.size() + spot]; }
    std::int64_t at(std::size_t gene, std::size_t spot) const { return counts[gene * spot_ids.size() + spot]; }
    std::vector<std::int64_t> spot_totals() const;

    // Throws a validation error on duplicate ids, negative counts or a size mismatch.
    void validate() const;

    bool operator==(const CountMatrix&) const = default;
};

enum class Orientation { GenesAsRows, GenesAsCols };
Orientation parse_orientation(std::string_view text);

CountMatrix parse_count_matrix(std::string_view text, Orientation orientation, const std::string& source = "<memory>");
CountMatrix load_count_matrix(const fs::path& path, Orientation orientation);
std::string format_count_matrix(const CountMatrix& m);  // genes as rows
void write_count_matrix(const CountMatrix& m, const fs::path& path);

struct SpotRecord {
    std::string spot_id;
    std::int64_t array_row = 0;
    std::int64_t array_col = 0;
    std::int64_t pixel_x = 0;
    std::int64_t pixel_y = 0;
    std::string patient_id;
    std::string section_id;

    bool operator==(const SpotRecord&) const = default;
};

std::vector<SpotRecord> parse_spot_table(std::string_view text, const SectionRecord& section,
                                         const std::string& source = "<memory>");
std::vector<SpotRecord> load_spot_table(const fs::path& path, const SectionRecord& section);

struct GeneIdMap {
    std::map<std::string, std::string> entries;  // Ensembl ID -> HGNC symbol
};

GeneIdMap parse_gene_map(std::string_view text, const std::string& source = "<memory>");
GeneIdMap load_gene_map(const fs::path& path);

enum class UnmappedPolicy { Drop, Keep };
UnmappedPolicy parse_policy(std::string_view text);

// Relabels rows with symbols. Rows whose ids collide on one symbol are summed
// into the row of the first occurrence.
CountMatrix map_gene_symbols(const CountMatrix& m, const GeneIdMap& map, UnmappedPolicy policy);

// Assembled multi-section dataset; this is also the archive payload.
// counts is spots x genes, so each row is one spot's expression vector.
struct Dataset {
    std::vector<std::string> genes;
    std::vector<SpotRecord> spots;
    std::vector<std::int64_t> counts;

    std::size_t n_genes() const { return genes.size(); }
    std::size_t n_spots() const { return spots.size(); }
    std::int64_t& at(std::size_t spot, std::size_t gene) { return counts[spot * genes.size() + gene]; }
    std::int64_t at(std::size_t spot, std::size_t gene) const { return counts[spot * genes.size() + gene]; }

    void validate() const;
    bool operator==(const Dataset&) const = default;
};
using SpotArchive = Dataset;

// Globally unique spot key: patient/section/spot.
std::string spot_key(const SpotRecord& s);

struct Manifest {
    std::vector<SectionRecord> sections;
    std::optional<fs::path> gene_map;
    UnmappedPolicy unmapped = UnmappedPolicy::Drop;
};

Manifest load_manifest(const fs::path& path);

struct AssemblyResult {
    Dataset dataset;
    std::vector<std::string> warnings;
};

// Joins each section's spot table to its count matrix. Spots without a count
// column are dropped with a warning. Gene sets are unioned across sections in
// first-seen order; genes absent from a section count as zero there.
AssemblyResult assemble_dataset(const Manifest& manifest, Orientation orientation);

void write_archive(const Dataset& dataset, const fs::path& path);
Dataset read_archive(const fs::path& path);

}  // namespace stx::ingest
