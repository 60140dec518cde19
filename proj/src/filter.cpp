#include "stx/filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "stx/io.hpp"

namespace stx::filter {

using nlohmann::json;

namespace {

Dataset select(const Dataset& d, const std::vector<std::size_t>& spots, const std::vector<std::size_t>& genes) {
    Dataset out;
    for (auto g : genes) out.genes.push_back(d.genes[g]);
    out.counts.reserve(spots.size() * genes.size());
    for (auto s : spots) {
        out.spots.push_back(d.spots[s]);
        for (auto g : genes) out.counts.push_back(d.at(s, g));
    }
    return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

Dataset filter_genes(const Dataset& d) {
    require(d.n_spots() > 0, ErrorKind::EmptyDataset, "gene filter needs at least one spot");
    std::vector<std::int64_t> totals(d.n_genes(), 0);
    for (std::size_t s = 0; s < d.n_spots(); ++s)
        for (std::size_t g = 0; g < d.n_genes(); ++g) totals[g] += d.at(s, g);
    std::vector<std::size_t> keep;
    for (std::size_t g = 0; g < d.n_genes(); ++g)
        if (totals[g] > 0) keep.push_back(g);
    require(!keep.empty(), ErrorKind::EmptyDataset, "every gene has zero mean expression");
    return select(d, iota_n(d.n_spots()), keep);
}

Dataset filter_spots(const Dataset& d, std::int64_t min_total) {
    std::vector<std::size_t> keep;
    for (std::size_t s = 0; s < d.n_spots(); ++s) {
        std::int64_t total = 0;
        for (std::size_t g = 0; g < d.n_genes(); ++g) total += d.at(s, g);
        if (total >= min_total) keep.push_back(s);
    }
    require(!keep.empty(), ErrorKind::EmptyDataset,
            "no spot reaches " + std::to_string(min_total) + " total counts");
    return select(d, keep, iota_n(d.n_genes()));
}

GenePanel select_gene_panel(const Dataset& d, int k, const std::vector<std::size_t>& train_spots) {
    require(k > 0, ErrorKind::Argument, "panel size must be positive, got " + std::to_string(k));
    require(!train_spots.empty(), ErrorKind::Argument, "panel selection needs training spots");
    std::vector<std::int64_t> sums(d.n_genes(), 0);
    for (auto s : train_spots)
        for (std::size_t g = 0; g < d.n_genes(); ++g) sums[g] += d.at(s, g);

    auto order = iota_n(d.n_genes());
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sums[a] != sums[b]) return sums[a] > sums[b];
        return d.genes[a] < d.genes[b];
    });
    const auto n_main = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
    std::vector<bool> is_main(d.n_genes(), false);
    GenePanel panel;
    for (std::size_t i = 0; i < n_main; ++i) {
        is_main[order[i]] = true;
        panel.main_genes.push_back(d.genes[order[i]]);
        panel.main_means.push_back(static_cast<double>(sums[order[i]]) / static_cast<double>(train_spots.size()));
    }
    for (std::size_t g = 0; g < d.n_genes(); ++g)
        if (!is_main[g]) panel.aux_genes.push_back(d.genes[g]);
    return panel;
}

GenePanel select_gene_panel(const Dataset& d, int k) { return select_gene_panel(d, k, iota_n(d.n_spots())); }

json to_json(const GenePanel& panel) {
    return {{"main_genes", panel.main_genes}, {"main_means", panel.main_means}, {"aux_genes", panel.aux_genes}};
}

GenePanel panel_from_json(const json& j) {
    GenePanel p;
    p.main_genes = j.at("main_genes").get<std::vector<std::string>>();
    p.main_means = j.at("main_means").get<std::vector<double>>();
    p.aux_genes = j.at("aux_genes").get<std::vector<std::string>>();
    return p;
}

double TargetTransform::forward(std::size_t gene, double count) const {
    return (std::log1p(count) - mean[gene]) / std[gene];
}

double TargetTransform::inverse(std::size_t gene, double z) const { return std::expm1(z * std[gene] + mean[gene]); }

std::string TargetTransform::fingerprint() const {
    const json j = {{"genes", genes}, {"mean", mean}, {"std", std}, {"zero_variance", zero_variance}};
    const auto text = j.dump();
    return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    fail(ErrorKind::Argument, "unknown split '" + s + "'");
}

std::vector<std::size_t> TargetTable::spots_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

TargetTable fit_transform_targets(const Dataset& d, const GenePanel& panel, const std::vector<std::size_t>& train_spots) {
    require(!train_spots.empty(), ErrorKind::Argument, "target transform needs training spots");
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t g = 0; g < d.n_genes(); ++g) column.emplace(d.genes[g], g);

    TargetTable t;
    t.panel = panel;
    auto& tf = t.transform;
    std::vector<std::size_t> cols;
    for (const auto* list : {&panel.main_genes, &panel.aux_genes}) {
        for (const auto& g : *list) {
            const auto it = column.find(g);
            require(it != column.end(), ErrorKind::Argument, "panel gene " + g + " not in dataset");
            tf.genes.push_back(g);
            cols.push_back(it->second);
        }
    }

    const auto n = static_cast<double>(train_spots.size());
    for (auto c : cols) {
        double sum = 0.0;
        for (auto s : train_spots) sum += std::log1p(static_cast<double>(d.at(s, c)));
        const double mean = sum / n;
        double ss = 0.0;
        for (auto s : train_spots) {
            const double v = std::log1p(static_cast<double>(d.at(s, c))) - mean;
            ss += v * v;
        }
        const double sd = std::sqrt(ss / n);
        const bool degenerate = !(sd > 0.0);
        tf.mean.push_back(mean);
        tf.std.push_back(degenerate ? 1.0 : sd);
        tf.zero_variance.push_back(degenerate);
    }

    const auto n_main = panel.main_genes.size();
    const auto n_aux = panel.aux_genes.size();
    t.main_targets = Matrix(d.n_spots(), n_main);
    t.aux_targets = Matrix(d.n_spots(), n_aux);
    t.split.assign(d.n_spots(), Split::Train);
    for (std::size_t s = 0; s < d.n_spots(); ++s) {
        t.spot_keys.push_back(ingest::spot_key(d.spots[s]));
        for (std::size_t j = 0; j < n_main; ++j) t.main_targets(s, j) = tf.forward(j, static_cast<double>(d.at(s, cols[j])));
        for (std::size_t j = 0; j < n_aux; ++j)
            t.aux_targets(s, j) = tf.forward(n_main + j, static_cast<double>(d.at(s, cols[n_main + j])));
    }
    return t;
}

std::vector<Split> assign_splits(const Dataset& d, const std::vector<std::string>& validation_patients,
                                 const std::vector<std::string>& test_patients) {
    const auto contains = [](const std::vector<std::string>& v, const std::string& p) {
        return std::find(v.begin(), v.end(), p) != v.end();
    };
    std::vector<Split> out;
    for (const auto& s : d.spots) {
        if (contains(test_patients, s.patient_id)) out.push_back(Split::Test);
        else if (contains(validation_patients, s.patient_id)) out.push_back(Split::Validation);
        else out.push_back(Split::Train);
    }
    return out;
}

namespace {
json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

Matrix matrix_from_json(const json& j, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    require(j.size() == rows, ErrorKind::Schema, "target matrix row count mismatch");
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = j[r].get<std::vector<double>>();
        require(row.size() == cols, ErrorKind::Schema, "target matrix column count mismatch");
        std::copy(row.begin(), row.end(), m.row(r).begin());
    }
    return m;
}
}  // namespace

json to_json(const TargetTable& t) {
    std::vector<std::string> split;
    for (auto s : t.split) split.push_back(to_string(s));
    json zero_var = json::array();
    for (bool b : t.transform.zero_variance) zero_var.push_back(b);
    return {{"format", "stx-targets"},
            {"spot_keys", t.spot_keys},
            {"split", split},
            {"panel", to_json(t.panel)},
            {"transform",
             {{"kind", "log1p-zscore"},
              {"genes", t.transform.genes},
              {"mean", t.transform.mean},
              {"std", t.transform.std},
              {"zero_variance", zero_var},
              {"fingerprint", t.transform.fingerprint()}}},
            {"main_targets", matrix_json(t.main_targets)},
            {"aux_targets", matrix_json(t.aux_targets)}};
}

TargetTable targets_from_json(const json& j) {
    require(j.value("format", "") == "stx-targets", ErrorKind::Schema, "not a target table");
    TargetTable t;
    t.spot_keys = j.at("spot_keys").get<std::vector<std::string>>();
    for (const auto& s : j.at("split")) t.split.push_back(parse_split(s.get<std::string>()));
    t.panel = panel_from_json(j.at("panel"));
    const auto& tf = j.at("transform");
    t.transform.genes = tf.at("genes").get<std::vector<std::string>>();
    t.transform.mean = tf.at("mean").get<std::vector<double>>();
    t.transform.std = tf.at("std").get<std::vector<double>>();
    for (const auto& b : tf.at("zero_variance")) t.transform.zero_variance.push_back(b.get<bool>());
    const auto n = t.spot_keys.size();
    t.main_targets = matrix_from_json(j.at("main_targets"), n, t.panel.main_genes.size());
    t.aux_targets = matrix_from_json(j.at("aux_targets"), n, t.panel.aux_genes.size());
    require(t.split.size() == n, ErrorKind::Schema, "split labels do not match spot count");
    return t;
}

void write_targets(const TargetTable& t, const std::filesystem::path& path) { write_text(path, to_json(t).dump()); }

TargetTable read_targets(const std::filesystem::path& path) {
    try {
        return targets_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, path.string() + ": " + e.what());
    }
}

}  // namespace stx::filter
