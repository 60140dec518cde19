#include "stx/ingest.hpp"

#include <charconv>
#include <cstring>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "stx/common.hpp"
#include "stx/io.hpp"
#include "stx/parallel.hpp"

namespace stx::ingest {

using nlohmann::json;

namespace {

std::vector<std::string> lines_of(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string line(text.substr(start, end - start));
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        start = end + 1;
    }
    // Trailing blank lines are not rows.
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    return lines;
}

bool parse_int(const std::string& cell, std::int64_t& out) {
    const auto s = trim(cell);
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

std::string where(const std::string& source, std::size_t line) {
    return source + ":" + std::to_string(line);
}

}  // namespace

std::vector<std::int64_t> CountMatrix::spot_totals() const {
    std::vector<std::int64_t> totals(n_spots(), 0);
    for (std::size_t g = 0; g < n_genes(); ++g)
        for (std::size_t s = 0; s < n_spots(); ++s) totals[s] += at(g, s);
    return totals;
}

void CountMatrix::validate() const {
    require(counts.size() == gene_ids.size() * spot_ids.size(), ErrorKind::Validation,
            "count matrix dimensions do not match id lists");
    std::unordered_set<std::string> seen;
    for (const auto& g : gene_ids)
        require(seen.insert(g).second, ErrorKind::Validation, "duplicate gene id: " + g);
    seen.clear();
    for (const auto& s : spot_ids)
        require(seen.insert(s).second, ErrorKind::Validation, "duplicate spot id: " + s);
    for (std::size_t i = 0; i < counts.size(); ++i)
        require(counts[i] >= 0, ErrorKind::Validation,
                "negative count for gene " + gene_ids[i / spot_ids.size()] + ", spot " +
                    spot_ids[i % spot_ids.size()]);
}

Orientation parse_orientation(std::string_view text) {
    if (text == "rows") return Orientation::GenesAsRows;
    if (text == "cols") return Orientation::GenesAsCols;
    fail(ErrorKind::Argument, "genes-as must be rows or cols, got '" + std::string(text) + "'");
}

CountMatrix parse_count_matrix(std::string_view text, Orientation orientation, const std::string& source) {
    const auto lines = lines_of(text);
    require(!lines.empty(), ErrorKind::Parse, source + ": empty count matrix");

    const auto header = split(lines[0], '\t');
    require(header.size() >= 2, ErrorKind::Parse, where(source, 1) + ": header needs an id column and at least one entry");
    std::vector<std::string> col_ids(header.begin() + 1, header.end());
    for (auto& id : col_ids) id = trim(id);

    std::vector<std::string> row_ids;
    std::vector<std::int64_t> values;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto cells = split(lines[li], '\t');
        require(cells.size() == header.size(), ErrorKind::Parse,
                where(source, li + 1) + ": expected " + std::to_string(header.size()) + " fields, found " +
                    std::to_string(cells.size()));
        row_ids.push_back(trim(cells[0]));
        for (std::size_t c = 1; c < cells.size(); ++c) {
            std::int64_t v = 0;
            require(parse_int(cells[c], v), ErrorKind::Parse,
                    where(source, li + 1) + ": non-integer count '" + cells[c] + "'");
            require(v >= 0, ErrorKind::Validation,
                    where(source, li + 1) + ": negative count " + std::to_string(v));
            values.push_back(v);
        }
    }
    require(!row_ids.empty(), ErrorKind::Parse, source + ": count matrix has no data rows");

    CountMatrix m;
    if (orientation == Orientation::GenesAsRows) {
        m.gene_ids = std::move(row_ids);
        m.spot_ids = std::move(col_ids);
        m.counts = std::move(values);
    } else {
        m.gene_ids = std::move(col_ids);
        m.spot_ids = std::move(row_ids);
        m.counts.resize(values.size());
        const auto genes = m.gene_ids.size();
        const auto spots = m.spot_ids.size();
        for (std::size_t s = 0; s < spots; ++s)
            for (std::size_t g = 0; g < genes; ++g) m.counts[g * spots + s] = values[s * genes + g];
    }
    m.validate();
    return m;
}

CountMatrix load_count_matrix(const fs::path& path, Orientation orientation) {
    return parse_count_matrix(read_text(path), orientation, path.string());
}

std::string format_count_matrix(const CountMatrix& m) {
    std::string out = "gene_id";
    for (const auto& s : m.spot_ids) out += "\t" + s;
    out += "\n";
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        out += m.gene_ids[g];
        for (std::size_t s = 0; s < m.n_spots(); ++s) out += "\t" + std::to_string(m.at(g, s));
        out += "\n";
    }
    return out;
}

void write_count_matrix(const CountMatrix& m, const fs::path& path) { write_text(path, format_count_matrix(m)); }

std::vector<SpotRecord> parse_spot_table(std::string_view text, const SectionRecord& section, const std::string& source) {
    const auto lines = lines_of(text);
    require(!lines.empty(), ErrorKind::Parse, source + ": empty spot table");
    const auto header = split(lines[0], '\t');
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < header.size(); ++i) column[trim(header[i])] = i;
    const char* required[] = {"spot_id", "array_row", "array_col", "pixel_x", "pixel_y"};
    for (const char* name : required)
        require(column.contains(name), ErrorKind::Schema, source + ": missing column '" + name + "'");

    std::vector<SpotRecord> spots;
    std::unordered_set<std::string> seen;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto cells = split(lines[li], '\t');
        require(cells.size() == header.size(), ErrorKind::Parse,
                where(source, li + 1) + ": expected " + std::to_string(header.size()) + " fields, found " +
                    std::to_string(cells.size()));
        SpotRecord r;
        r.spot_id = trim(cells[column["spot_id"]]);
        require(!r.spot_id.empty(), ErrorKind::Parse, where(source, li + 1) + ": empty spot_id");
        require(seen.insert(r.spot_id).second, ErrorKind::Validation,
                where(source, li + 1) + ": duplicate spot id " + r.spot_id);
        const auto field = [&](const char* name, std::int64_t& out) {
            require(parse_int(cells[column[name]], out), ErrorKind::Parse,
                    where(source, li + 1) + ": non-integer " + name + " '" + cells[column[name]] + "'");
        };
        field("array_row", r.array_row);
        field("array_col", r.array_col);
        field("pixel_x", r.pixel_x);
        field("pixel_y", r.pixel_y);
        require(r.pixel_x >= 0 && r.pixel_y >= 0, ErrorKind::Validation,
                where(source, li + 1) + ": negative pixel coordinate for spot " + r.spot_id);
        r.patient_id = section.patient_id;
        r.section_id = section.section_id;
        spots.push_back(std::move(r));
    }
    return spots;
}

std::vector<SpotRecord> load_spot_table(const fs::path& path, const SectionRecord& section) {
    return parse_spot_table(read_text(path), section, path.string());
}

GeneIdMap parse_gene_map(std::string_view text, const std::string& source) {
    GeneIdMap map;
    const auto lines = lines_of(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        if (trim(lines[li]).empty()) continue;
        const auto cells = split(lines[li], '\t');
        require(cells.size() == 2, ErrorKind::Parse, where(source, li + 1) + ": expected ensembl_id<TAB>symbol");
        const auto id = trim(cells[0]);
        const auto symbol = trim(cells[1]);
        if (li == 0 && id == "ensembl_id") continue;
        require(!id.empty() && !symbol.empty(), ErrorKind::Validation, where(source, li + 1) + ": empty id or symbol");
        require(map.entries.emplace(id, symbol).second, ErrorKind::Validation,
                where(source, li + 1) + ": duplicate Ensembl id " + id);
    }
    return map;
}

GeneIdMap load_gene_map(const fs::path& path) { return parse_gene_map(read_text(path), path.string()); }

UnmappedPolicy parse_policy(std::string_view text) {
    if (text == "drop") return UnmappedPolicy::Drop;
    if (text == "keep") return UnmappedPolicy::Keep;
    fail(ErrorKind::Argument, "unmapped policy must be drop or keep, got '" + std::string(text) + "'");
}

CountMatrix map_gene_symbols(const CountMatrix& m, const GeneIdMap& map, UnmappedPolicy policy) {
    CountMatrix out;
    out.spot_ids = m.spot_ids;
    std::unordered_map<std::string, std::size_t> row_of;
    const auto spots = m.n_spots();
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        const auto it = map.entries.find(m.gene_ids[g]);
        std::string label;
        if (it != map.entries.end()) {
            label = it->second;
        } else if (policy == UnmappedPolicy::Keep) {
            label = m.gene_ids[g];
        } else {
            continue;
        }
        auto [pos, inserted] = row_of.emplace(label, out.gene_ids.size());
        if (inserted) {
            out.gene_ids.push_back(label);
            out.counts.insert(out.counts.end(), m.counts.begin() + static_cast<std::ptrdiff_t>(g * spots),
                              m.counts.begin() + static_cast<std::ptrdiff_t>((g + 1) * spots));
        } else {
            for (std::size_t s = 0; s < spots; ++s) out.at(pos->second, s) += m.at(g, s);
        }
    }
    return out;
}

std::string spot_key(const SpotRecord& s) { return s.patient_id + "/" + s.section_id + "/" + s.spot_id; }

void Dataset::validate() const {
    require(counts.size() == genes.size() * spots.size(), ErrorKind::Validation,
            "dataset count array does not match gene and spot lists");
    std::unordered_set<std::string> seen;
    for (const auto& g : genes) require(seen.insert(g).second, ErrorKind::Validation, "duplicate gene: " + g);
    seen.clear();
    for (const auto& s : spots)
        require(seen.insert(spot_key(s)).second, ErrorKind::Validation, "spot appears twice: " + spot_key(s));
    for (auto c : counts) require(c >= 0, ErrorKind::Validation, "negative count in dataset");
}

Manifest load_manifest(const fs::path& path) {
    json doc;
    try {
        doc = json::parse(read_text(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

    Manifest manifest;
    require(doc.contains("sections") && doc["sections"].is_array(), ErrorKind::Schema,
            path.string() + ": manifest needs a 'sections' array");
    std::set<std::pair<std::string, std::string>> ids;
    for (const auto& s : doc["sections"]) {
        for (const char* key : {"patient_id", "section_id", "image", "counts", "spots"})
            require(s.contains(key), ErrorKind::Schema, path.string() + ": section entry missing '" + key + "'");
        SectionRecord r{s["patient_id"].get<std::string>(), s["section_id"].get<std::string>(),
                        resolve(s["image"].get<std::string>()), resolve(s["counts"].get<std::string>()),
                        resolve(s["spots"].get<std::string>())};
        require(ids.emplace(r.patient_id, r.section_id).second, ErrorKind::Validation,
                "duplicate section " + r.patient_id + "/" + r.section_id);
        for (const auto* p : {&r.image_path, &r.counts_path, &r.spots_path})
            require(fs::is_regular_file(*p), ErrorKind::Io, "unreadable file " + p->string());
        manifest.sections.push_back(std::move(r));
    }
    require(!manifest.sections.empty(), ErrorKind::Schema, path.string() + ": no sections");
    if (doc.contains("gene_map") && !doc["gene_map"].is_null())
        manifest.gene_map = resolve(doc["gene_map"].get<std::string>());
    if (doc.contains("unmapped")) manifest.unmapped = parse_policy(doc["unmapped"].get<std::string>());
    return manifest;
}

AssemblyResult assemble_dataset(const Manifest& manifest, Orientation orientation) {
    const auto n = manifest.sections.size();
    std::vector<CountMatrix> matrices(n);
    std::vector<std::vector<SpotRecord>> tables(n);
    std::optional<GeneIdMap> gene_map;
    if (manifest.gene_map) gene_map = load_gene_map(*manifest.gene_map);

    parallel_for(n, [&](std::size_t i) {
        const auto& section = manifest.sections[i];
        matrices[i] = load_count_matrix(section.counts_path, orientation);
        if (gene_map) matrices[i] = map_gene_symbols(matrices[i], *gene_map, manifest.unmapped);
        tables[i] = load_spot_table(section.spots_path, section);
    });

    AssemblyResult result;
    auto& ds = result.dataset;
    std::unordered_map<std::string, std::size_t> gene_index;
    for (const auto& m : matrices)
        for (const auto& g : m.gene_ids)
            if (gene_index.emplace(g, ds.genes.size()).second) ds.genes.push_back(g);

    for (std::size_t i = 0; i < n; ++i) {
        const auto& m = matrices[i];
        std::unordered_map<std::string, std::size_t> column;
        for (std::size_t s = 0; s < m.n_spots(); ++s) column.emplace(m.spot_ids[s], s);
        std::vector<std::size_t> gene_cols(m.n_genes());
        for (std::size_t g = 0; g < m.n_genes(); ++g) gene_cols[g] = gene_index.at(m.gene_ids[g]);

        for (const auto& spot : tables[i]) {
            const auto it = column.find(spot.spot_id);
            if (it == column.end()) {
                result.warnings.push_back("spot " + spot_key(spot) + " has no count column; dropped");
                continue;
            }
            const auto row = ds.spots.size();
            ds.spots.push_back(spot);
            ds.counts.resize(ds.counts.size() + ds.genes.size(), 0);
            for (std::size_t g = 0; g < m.n_genes(); ++g) ds.counts[row * ds.genes.size() + gene_cols[g]] = m.at(g, it->second);
        }
    }
    ds.validate();
    return result;
}

namespace {

constexpr const char* kManifestName = "manifest.json";

template <typename T>
std::vector<std::uint8_t> pack_ints(const std::vector<T>& values) {
    std::vector<std::uint8_t> out(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto v = static_cast<std::uint64_t>(static_cast<std::int64_t>(values[i]));
        for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<std::uint8_t>(v >> (8 * b));
    }
    return out;
}

std::vector<std::int64_t> unpack_ints(const std::vector<std::uint8_t>& bytes) {
    std::vector<std::int64_t> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = static_cast<std::int64_t>(v);
    }
    return out;
}

std::vector<std::uint8_t> pack_strings(const std::vector<std::string>& values) {
    std::string joined;
    for (std::size_t i = 0; i < values.size(); ++i) {
        require(values[i].find('\n') == std::string::npos, ErrorKind::Argument, "identifier contains a newline");
        if (i) joined += '\n';
        joined += values[i];
    }
    return {joined.begin(), joined.end()};
}

std::vector<std::string> unpack_strings(const std::vector<std::uint8_t>& bytes, std::size_t expected) {
    if (expected == 0) return {};
    return split(std::string(bytes.begin(), bytes.end()), '\n');
}

}  // namespace

void write_archive(const Dataset& ds, const fs::path& path) {
    require(ds.n_spots() > 0 && ds.n_genes() > 0, ErrorKind::EmptyDataset, "refusing to archive an empty dataset");
    ds.validate();
    const auto S = ds.n_spots();
    std::vector<std::int64_t> pixel, index;
    std::vector<std::string> patient, section, spot;
    for (const auto& s : ds.spots) {
        pixel.push_back(s.pixel_x);
        pixel.push_back(s.pixel_y);
        index.push_back(s.array_row);
        index.push_back(s.array_col);
        patient.push_back(s.patient_id);
        section.push_back(s.section_id);
        spot.push_back(s.spot_id);
    }

    std::map<std::string, std::vector<std::uint8_t>> entries;
    json arrays = json::object();
    const auto add = [&](const std::string& name, std::vector<std::uint8_t> bytes, const char* dtype,
                         std::vector<std::size_t> shape) {
        const auto file = name + ".bin";
        arrays[name] = {{"file", file}, {"dtype", dtype}, {"shape", shape}, {"crc32", crc32(bytes)}};
        entries.emplace(file, std::move(bytes));
    };
    add("count", pack_ints(ds.counts), "int64", {S, ds.n_genes()});
    add("pixel", pack_ints(pixel), "int64", {S, 2});
    add("patient", pack_strings(patient), "utf8-lines", {S});
    add("index", pack_ints(index), "int64", {S, 2});
    add("section", pack_strings(section), "utf8-lines", {S});
    add("spot", pack_strings(spot), "utf8-lines", {S});
    add("gene", pack_strings(ds.genes), "utf8-lines", {ds.n_genes()});

    const json manifest = {{"format", "stx-spot-archive"}, {"version", 1}, {"arrays", arrays}};
    const auto text = manifest.dump(2);
    entries.emplace(kManifestName, std::vector<std::uint8_t>(text.begin(), text.end()));
    write_zip(path, entries);
}

Dataset read_archive(const fs::path& path) {
    const auto entries = read_zip(path);
    const auto mit = entries.find(kManifestName);
    require(mit != entries.end(), ErrorKind::Schema, path.string() + ": archive has no manifest");
    json manifest;
    try {
        manifest = json::parse(mit->second.begin(), mit->second.end());
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, path.string() + ": unreadable manifest: " + e.what());
    }
    require(manifest.value("format", "") == "stx-spot-archive", ErrorKind::Schema, path.string() + ": unknown archive format");
    const auto& arrays = manifest.at("arrays");

    const auto fetch = [&](const std::string& name, const std::string& dtype,
                           const std::vector<std::size_t>& shape) -> const std::vector<std::uint8_t>& {
        require(arrays.contains(name), ErrorKind::Schema, path.string() + ": archive is missing the '" + name + "' array");
        const auto& meta = arrays[name];
        const auto file = meta.at("file").get<std::string>();
        const auto eit = entries.find(file);
        require(eit != entries.end(), ErrorKind::Schema, path.string() + ": archive is missing the '" + name + "' array");
        require(crc32(eit->second) == meta.at("crc32").get<std::uint32_t>(), ErrorKind::Integrity,
                path.string() + ": checksum mismatch for array '" + name + "'");
        require(meta.at("dtype").get<std::string>() == dtype, ErrorKind::Schema, "array '" + name + "' has unexpected dtype");
        require(meta.at("shape").get<std::vector<std::size_t>>() == shape, ErrorKind::Schema,
                "array '" + name + "' has unexpected shape");
        return eit->second;
    };

    require(arrays.contains("count"), ErrorKind::Schema, path.string() + ": archive is missing the 'count' array");
    const auto count_shape = arrays["count"].at("shape").get<std::vector<std::size_t>>();
    require(count_shape.size() == 2, ErrorKind::Schema, "count array must be two-dimensional");
    const auto S = count_shape[0];
    const auto G = count_shape[1];

    Dataset ds;
    ds.counts = unpack_ints(fetch("count", "int64", {S, G}));
    const auto pixel = unpack_ints(fetch("pixel", "int64", {S, 2}));
    const auto patient = unpack_strings(fetch("patient", "utf8-lines", {S}), S);
    const auto index = unpack_ints(fetch("index", "int64", {S, 2}));
    const auto section = unpack_strings(fetch("section", "utf8-lines", {S}), S);
    const auto spot = unpack_strings(fetch("spot", "utf8-lines", {S}), S);
    ds.genes = unpack_strings(fetch("gene", "utf8-lines", {G}), G);
    require(ds.counts.size() == S * G && pixel.size() == 2 * S && index.size() == 2 * S && patient.size() == S &&
                section.size() == S && spot.size() == S && ds.genes.size() == G,
            ErrorKind::Schema, path.string() + ": array lengths disagree with manifest shapes");
    for (std::size_t i = 0; i < S; ++i) {
        ds.spots.push_back(SpotRecord{spot[i], index[2 * i], index[2 * i + 1], pixel[2 * i], pixel[2 * i + 1], patient[i],
                                      section[i]});
    }
    ds.validate();
    return ds;
}

}  // namespace stx::ingest
