#include "stx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "stx/io.hpp"
#include "stx/parallel.hpp"
#include "stx/rng.hpp"

namespace stx::eval {

using nlohmann::json;

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_len) {
    require(a.size() == b.size(), ErrorKind::Argument,
            "length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    require(a.size() >= min_len, ErrorKind::Argument,
            "need at least " + std::to_string(min_len) + " observations, got " + std::to_string(a.size()));
}

}  // namespace

double mae(std::span<const double> y, std::span<const double> yhat) {
    check_pair(y, yhat, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(y[i] - yhat[i]);
    return acc / static_cast<double>(y.size());
}

double rmse(std::span<const double> y, std::span<const double> yhat) {
    check_pair(y, yhat, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return std::sqrt(acc / static_cast<double>(y.size()));
}

double pcc(std::span<const double> a, std::span<const double> b) {
    check_pair(a, b, 2);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return kUndefined;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

const char* to_string(Category c) {
    switch (c) {
        case Category::Strong: return "strong";
        case Category::Medium: return "medium";
        case Category::Weak: return "weak";
        case Category::Negligible: return "negligible";
        case Category::Negative: return "negative";
        case Category::Undefined: return "undefined";
    }
    return "undefined";
}

Category parse_category(const std::string& s) {
    for (auto c : {Category::Strong, Category::Medium, Category::Weak, Category::Negligible, Category::Negative,
                   Category::Undefined})
        if (s == to_string(c)) return c;
    fail(ErrorKind::Schema, "unknown correlation category '" + s + "'");
}

Category categorize(double p) {
    if (is_undefined(p)) return Category::Undefined;
    if (p >= 0.5) return Category::Strong;
    if (p >= 0.3) return Category::Medium;
    if (p >= 0.1) return Category::Weak;
    if (p >= 0.0) return Category::Negligible;
    return Category::Negative;
}

double median(std::vector<double> values) {
    std::erase_if(values, [](double v) { return is_undefined(v); });
    if (values.empty()) return kUndefined;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

CategoryCounts count_categories(const std::vector<GeneMetrics>& genes) {
    CategoryCounts c;
    for (const auto& g : genes) {
        switch (g.category) {
            case Category::Strong: ++c.strong; break;
            case Category::Medium: ++c.medium; break;
            case Category::Weak: ++c.weak; break;
            case Category::Negligible: ++c.negligible; break;
            case Category::Negative: ++c.negative; break;
            case Category::Undefined: ++c.undefined; break;
        }
    }
    c.positive = c.strong + c.medium + c.weak + c.negligible;
    return c;
}

std::string section_of(const std::string& spot_key) {
    const auto pos = spot_key.rfind('/');
    return pos == std::string::npos ? std::string() : spot_key.substr(0, pos);
}

MetricsReport per_gene_report(const Matrix& pred, const Matrix& truth, const std::vector<std::string>& genes,
                              const std::vector<std::string>& spot_keys,
                              const std::vector<std::string>& spot_sections) {
    require(pred.rows == truth.rows && pred.cols == truth.cols, ErrorKind::Argument,
            "prediction and truth matrices differ in shape");
    require(pred.cols == genes.size(), ErrorKind::Argument, "gene list does not match the matrix columns");
    require(spot_keys.size() == pred.rows && spot_sections.size() == pred.rows, ErrorKind::Argument,
            "spot metadata does not match the matrix rows");
    require(pred.rows >= 1, ErrorKind::EmptyDataset, "no spots to evaluate");

    std::map<std::string, std::vector<std::size_t>> by_section;
    for (std::size_t i = 0; i < spot_sections.size(); ++i) by_section[spot_sections[i]].push_back(i);

    MetricsReport r;
    r.spot_keys = spot_keys;
    r.predictions = pred;
    r.truth = truth;
    r.per_gene.resize(genes.size());
    parallel_for(genes.size(), [&](std::size_t g) {
        auto& gm = r.per_gene[g];
        gm.gene = genes[g];
        std::vector<double> y(pred.rows), yh(pred.rows);
        for (std::size_t i = 0; i < pred.rows; ++i) {
            y[i] = truth(i, g);
            yh[i] = pred(i, g);
        }
        gm.mae = mae(y, yh);
        gm.rmse = rmse(y, yh);
        std::vector<double> values;
        for (const auto& [section, rows] : by_section) {
            SectionPcc sp{section, kUndefined, rows.size()};
            if (rows.size() >= 2) {
                std::vector<double> a, b;
                for (auto i : rows) {
                    a.push_back(y[i]);
                    b.push_back(yh[i]);
                }
                sp.pcc = pcc(a, b);
            }
            values.push_back(sp.pcc);
            gm.pcc_per_section.push_back(sp);
        }
        gm.median_pcc = median(values);
        gm.category = categorize(gm.median_pcc);
    });
    for (const auto& g : r.per_gene) {
        r.a_mae += g.mae;
        r.a_rmse += g.rmse;
    }
    if (!r.per_gene.empty()) {
        r.a_mae /= static_cast<double>(r.per_gene.size());
        r.a_rmse /= static_cast<double>(r.per_gene.size());
    }
    r.counts = count_categories(r.per_gene);
    return r;
}

namespace {

json number_or_null(double v) { return is_undefined(v) ? json(nullptr) : json(v); }
double number_from(const json& j) { return j.is_null() ? kUndefined : j.get<double>(); }

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

Matrix matrix_from(const json& j, std::size_t cols) {
    Matrix m(j.size(), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const auto row = j[r].get<std::vector<double>>();
        require(row.size() == cols, ErrorKind::Schema, "report matrix row " + std::to_string(r) + " has wrong width");
        std::copy(row.begin(), row.end(), m.row(r).begin());
    }
    return m;
}

}  // namespace

json to_json(const MetricsReport& r) {
    json genes = json::array();
    std::vector<std::string> names;
    for (const auto& g : r.per_gene) {
        json sections = json::array();
        for (const auto& s : g.pcc_per_section)
            sections.push_back({{"section", s.section}, {"pcc", number_or_null(s.pcc)}, {"spots", s.spots}});
        genes.push_back({{"gene", g.gene},
                         {"median_pcc", number_or_null(g.median_pcc)},
                         {"mae", g.mae},
                         {"rmse", g.rmse},
                         {"category", to_string(g.category)},
                         {"sections", sections}});
        names.push_back(g.gene);
    }
    return {{"format", "stx-report"},
            {"model_tag", r.model_tag},
            {"split", r.split},
            {"aMAE", r.a_mae},
            {"aRMSE", r.a_rmse},
            {"counts",
             {{"positive", r.counts.positive},
              {"strong", r.counts.strong},
              {"medium", r.counts.medium},
              {"weak", r.counts.weak},
              {"negligible", r.counts.negligible},
              {"negative", r.counts.negative},
              {"undefined", r.counts.undefined}}},
            {"genes", genes},
            {"spots", {{"keys", r.spot_keys}, {"genes", names}, {"predicted", matrix_json(r.predictions)},
                       {"truth", matrix_json(r.truth)}}}};
}

MetricsReport report_from_json(const json& j) {
    try {
        require(j.value("format", "") == "stx-report", ErrorKind::Schema, "not a metrics report");
        MetricsReport r;
        r.model_tag = j.at("model_tag").get<std::string>();
        r.split = j.at("split").get<std::string>();
        r.a_mae = j.at("aMAE").get<double>();
        r.a_rmse = j.at("aRMSE").get<double>();
        for (const auto& g : j.at("genes")) {
            GeneMetrics gm;
            gm.gene = g.at("gene").get<std::string>();
            gm.median_pcc = number_from(g.at("median_pcc"));
            gm.mae = g.at("mae").get<double>();
            gm.rmse = g.at("rmse").get<double>();
            gm.category = parse_category(g.at("category").get<std::string>());
            for (const auto& s : g.at("sections"))
                gm.pcc_per_section.push_back(
                    {s.at("section").get<std::string>(), number_from(s.at("pcc")), s.at("spots").get<std::size_t>()});
            r.per_gene.push_back(std::move(gm));
        }
        r.counts = count_categories(r.per_gene);
        const auto& spots = j.at("spots");
        r.spot_keys = spots.at("keys").get<std::vector<std::string>>();
        r.predictions = matrix_from(spots.at("predicted"), r.per_gene.size());
        r.truth = matrix_from(spots.at("truth"), r.per_gene.size());
        require(r.predictions.rows == r.spot_keys.size() && r.truth.rows == r.spot_keys.size(), ErrorKind::Schema,
                "report spot matrices do not match the spot keys");
        return r;
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, std::string("malformed report: ") + e.what());
    }
}

void write_report(const MetricsReport& r, const std::filesystem::path& path) {
    write_text(path, to_json(r).dump(2) + "\n");
}

MetricsReport read_report(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Parse, path.string() + ": " + e.what());
    }
    return report_from_json(j);
}

std::string format_value(double v) {
    if (is_undefined(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    std::string s = buf;
    return s == "-0.0000" ? "0.0000" : s;
}

namespace {

// Descending by value, undefined last, ties by name.
bool rank_before(double va, const std::string& a, double vb, const std::string& b) {
    const bool ua = is_undefined(va), ub = is_undefined(vb);
    if (ua != ub) return ub;
    if (!ua && va != vb) return va > vb;
    return a < b;
}

}  // namespace

std::string per_gene_csv(const MetricsReport& r) {
    std::vector<const GeneMetrics*> rows;
    for (const auto& g : r.per_gene) rows.push_back(&g);
    std::sort(rows.begin(), rows.end(), [](const GeneMetrics* a, const GeneMetrics* b) {
        return rank_before(a->median_pcc, a->gene, b->median_pcc, b->gene);
    });
    std::ostringstream out;
    out << "gene,median_pcc,mae,rmse,category\n";
    for (const auto* g : rows)
        out << g->gene << ',' << format_value(g->median_pcc) << ',' << format_value(g->mae) << ','
            << format_value(g->rmse) << ',' << to_string(g->category) << '\n';
    return out.str();
}

std::string top_genes_csv(const std::vector<MetricsReport>& reports, std::size_t n) {
    require(!reports.empty(), ErrorKind::Argument, "need at least one report");
    std::map<std::string, std::vector<double>> table;
    for (std::size_t m = 0; m < reports.size(); ++m)
        for (const auto& g : reports[m].per_gene) {
            auto& row = table[g.gene];
            row.resize(reports.size(), kUndefined);
            row[m] = g.median_pcc;
        }
    std::vector<std::pair<std::string, double>> best;
    for (auto& [gene, row] : table) {
        row.resize(reports.size(), kUndefined);
        double b = kUndefined;
        for (double v : row)
            if (!is_undefined(v) && (is_undefined(b) || v > b)) b = v;
        best.emplace_back(gene, b);
    }
    std::sort(best.begin(), best.end(),
              [](const auto& a, const auto& b) { return rank_before(a.second, a.first, b.second, b.first); });
    std::ostringstream out;
    out << "gene";
    for (const auto& r : reports) out << ',' << r.model_tag;
    out << '\n';
    for (std::size_t i = 0; i < std::min(n, best.size()); ++i) {
        out << best[i].first;
        for (double v : table[best[i].first]) out << ',' << format_value(v);
        out << '\n';
    }
    return out.str();
}

std::string error_table_csv(const std::vector<ErrorRow>& rows) {
    std::ostringstream out;
    out << "model,train_aMAE,train_aRMSE,test_aMAE,test_aRMSE\n";
    for (const auto& r : rows) {
        out << r.model << ',' << format_value(r.train ? r.train->a_mae : kUndefined) << ','
            << format_value(r.train ? r.train->a_rmse : kUndefined) << ','
            << format_value(r.test ? r.test->a_mae : kUndefined) << ','
            << format_value(r.test ? r.test->a_rmse : kUndefined) << '\n';
    }
    return out.str();
}

FoldPlan plan_folds(const std::vector<std::string>& patients, const std::string& heldout, int k, std::uint64_t seed) {
    std::vector<std::string> pool(patients.begin(), patients.end());
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
    const auto it = std::find(pool.begin(), pool.end(), heldout);
    require(it != pool.end(), ErrorKind::Argument, "held-out patient '" + heldout + "' is not in the dataset");
    pool.erase(it);
    require(k >= 1, ErrorKind::Argument, "k must be at least 1");
    require(pool.size() >= static_cast<std::size_t>(k), ErrorKind::Argument,
            std::to_string(pool.size()) + " patients cannot fill " + std::to_string(k) + " folds");
    Rng rng(derive_seed(seed, "folds"));
    shuffle(pool, rng);
    FoldPlan plan{heldout, std::vector<std::vector<std::string>>(static_cast<std::size_t>(k)), seed};
    for (std::size_t i = 0; i < pool.size(); ++i) plan.folds[i % k].push_back(pool[i]);
    return plan;
}

json to_json(const FoldPlan& p) {
    return {{"heldout_patient", p.heldout_patient}, {"folds", p.folds}, {"seed", p.seed}};
}

CvSummary summarize_folds(const std::string& model_tag, const std::vector<FoldOutcome>& folds) {
    CvSummary s{model_tag, folds};
    std::vector<double> m, r;
    for (const auto& f : folds) {
        if (!f.ok) {
            ++s.failed;
            continue;
        }
        m.push_back(f.a_mae);
        r.push_back(f.a_rmse);
    }
    const auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
        if (v.empty()) return;
        mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    stats(m, s.mae_mean, s.mae_std);
    stats(r, s.rmse_mean, s.rmse_std);
    return s;
}

json to_json(const CvSummary& s) {
    json folds = json::array();
    for (const auto& f : s.folds) {
        json jf = {{"fold", f.fold}, {"ok", f.ok}, {"aMAE", number_or_null(f.a_mae)}, {"aRMSE", number_or_null(f.a_rmse)}};
        if (!f.ok) jf["error"] = f.error;
        folds.push_back(jf);
    }
    return {{"model", s.model_tag},
            {"aMAE_mean", number_or_null(s.mae_mean)},
            {"aMAE_stdev", number_or_null(s.mae_std)},
            {"aRMSE_mean", number_or_null(s.rmse_mean)},
            {"aRMSE_stdev", number_or_null(s.rmse_std)},
            {"failed_folds", s.failed},
            {"folds", folds}};
}

std::string cv_summary_csv(const std::vector<CvSummary>& rows) {
    std::ostringstream out;
    out << "model,aMAE,aRMSE\n";
    for (const auto& s : rows)
        out << s.model_tag << ',' << format_value(s.mae_mean) << " +/- " << format_value(s.mae_std) << ','
            << format_value(s.rmse_mean) << " +/- " << format_value(s.rmse_std) << '\n';
    return out.str();
}

}  // namespace stx::eval
