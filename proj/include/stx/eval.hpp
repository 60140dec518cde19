#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stx/common.hpp"

namespace stx::eval {

// Absolute and root-mean-square error over equal, non-empty vectors.
double mae(std::span<const double> y, std::span<const double> yhat);
double rmse(std::span<const double> y, std::span<const double> yhat);

// Pearson correlation. Returns kUndefined when either side has zero variance.
inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();
double pcc(std::span<const double> a, std::span<const double> b);
inline bool is_undefined(double p) { return p != p; }

enum class Category { Strong, Medium, Weak, Negligible, Negative, Undefined };
const char* to_string(Category c);
Category parse_category(const std::string& s);
// Closed lower bounds: 0.5, 0.3, 0.1, 0.
Category categorize(double p);

double median(std::vector<double> values);

struct SectionPcc {
    std::string section;  // patient/section
    double pcc = kUndefined;
    std::size_t spots = 0;
};

struct GeneMetrics {
    std::string gene;
    std::vector<SectionPcc> pcc_per_section;
    double median_pcc = kUndefined;
    double mae = 0.0;
    double rmse = 0.0;
    Category category = Category::Undefined;
};

struct CategoryCounts {
    std::size_t positive = 0;  // strong + medium + weak + negligible
    std::size_t strong = 0;
    std::size_t medium = 0;
    std::size_t weak = 0;
    std::size_t negligible = 0;
    std::size_t negative = 0;
    std::size_t undefined = 0;

    bool operator==(const CategoryCounts&) const = default;
};

CategoryCounts count_categories(const std::vector<GeneMetrics>& genes);

struct MetricsReport {
    std::string model_tag;
    std::string split;
    std::vector<GeneMetrics> per_gene;
    double a_mae = 0.0;
    double a_rmse = 0.0;
    CategoryCounts counts;
    // Spot-level values kept for rendering; rows follow spot_keys.
    std::vector<std::string> spot_keys;
    Matrix predictions;
    Matrix truth;
};

// Per-(gene, section) correlation over that section's spots, median across
// sections; MAE/RMSE pooled over every spot. spot_sections gives each row's
// section label.
MetricsReport per_gene_report(const Matrix& pred, const Matrix& truth, const std::vector<std::string>& genes,
                              const std::vector<std::string>& spot_keys,
                              const std::vector<std::string>& spot_sections);

// Section label (patient/section) from a patient/section/spot key.
std::string section_of(const std::string& spot_key);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
void write_report(const MetricsReport& r, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);

// Number formatting shared by every table: fixed four decimals, NA for undefined.
std::string format_value(double v);

// gene,median_pcc,mae,rmse,category; genes by median Pcc descending, undefined last.
std::string per_gene_csv(const MetricsReport& r);
// gene,<model_tag>...; the top n genes ranked by their best median Pcc across reports.
std::string top_genes_csv(const std::vector<MetricsReport>& reports, std::size_t n = 10);
// model,train_aMAE,train_aRMSE,test_aMAE,test_aRMSE
struct ErrorRow {
    std::string model;
    const MetricsReport* train = nullptr;
    const MetricsReport* test = nullptr;
};
std::string error_table_csv(const std::vector<ErrorRow>& rows);

// ---------------------------------------------------------------------------
// Patient-level cross-validation plans.

struct FoldPlan {
    std::string heldout_patient;
    std::vector<std::vector<std::string>> folds;
    std::uint64_t seed = 0;

    bool operator==(const FoldPlan&) const = default;
};

// Seeded shuffle of the sorted non-heldout patients, then round-robin into k folds.
FoldPlan plan_folds(const std::vector<std::string>& patients, const std::string& heldout, int k = 5,
                    std::uint64_t seed = 7);

nlohmann::json to_json(const FoldPlan& p);

struct FoldOutcome {
    std::size_t fold = 0;
    bool ok = false;
    std::string error;  // set when the fold failed
    double a_mae = kUndefined;
    double a_rmse = kUndefined;
};

struct CvSummary {
    std::string model_tag;
    std::vector<FoldOutcome> folds;
    double mae_mean = kUndefined;
    double mae_std = kUndefined;
    double rmse_mean = kUndefined;
    double rmse_std = kUndefined;
    std::size_t failed = 0;
};

// Mean and sample standard deviation over the folds that succeeded.
CvSummary summarize_folds(const std::string& model_tag, const std::vector<FoldOutcome>& folds);
nlohmann::json to_json(const CvSummary& s);

// model,aMAE,aRMSE with "mean +/- stdev" cells.
std::string cv_summary_csv(const std::vector<CvSummary>& rows);

}  // namespace stx::eval
