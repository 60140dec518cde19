#include "stx/patches.hpp"

#include <algorithm>
#include <cmath>

#include "stx/common.hpp"
#include "stx/io.hpp"

namespace stx::patches {

using nlohmann::json;

void PatchConfig::validate() const {
    require(width > 0 && height > 0, ErrorKind::Argument, "patch size must be positive");
    require(white_fraction_max >= 0.0 && white_fraction_max <= 1.0, ErrorKind::Argument,
            "white fraction bound must lie in [0, 1]");
    require(white_channel_min >= 0 && white_channel_min <= 255, ErrorKind::Argument, "white threshold must be 8-bit");
}

Extraction extract_patches(const Image& image, const std::vector<ingest::SpotRecord>& spots, const PatchConfig& cfg) {
    cfg.validate();
    std::vector<const ingest::SpotRecord*> order;
    for (const auto& s : spots) order.push_back(&s);
    std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return ingest::spot_key(*a) < ingest::spot_key(*b); });

    Extraction out;
    for (const auto* s : order) {
        const auto x0 = s->pixel_x - cfg.width / 2;
        const auto y0 = s->pixel_y - cfg.height / 2;
        if (x0 < 0 || y0 < 0 || x0 + cfg.width > image.width || y0 + cfg.height > image.height) {
            ++out.out_of_bounds;
            continue;
        }
        Patch p{s->spot_id, s->section_id, s->patient_id, static_cast<int>(x0), static_cast<int>(y0),
                Image(cfg.width, cfg.height)};
        for (int y = 0; y < cfg.height; ++y) {
            const auto* src = image.at(static_cast<int>(x0), static_cast<int>(y0) + y);
            std::copy(src, src + 3 * cfg.width, p.pixels.at(0, y));
        }
        out.patches.push_back(std::move(p));
    }
    return out;
}

double white_fraction(const Patch& p, const PatchConfig& cfg) {
    const auto n = p.pixels.pixel_count();
    if (n == 0) return 0.0;
    std::size_t white = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto* px = p.pixels.rgb.data() + 3 * i;
        if (px[0] >= cfg.white_channel_min && px[1] >= cfg.white_channel_min && px[2] >= cfg.white_channel_min) ++white;
    }
    return static_cast<double>(white) / static_cast<double>(n);
}

bool is_informative(const Patch& p, const PatchConfig& cfg) { return !(white_fraction(p, cfg) > cfg.white_fraction_max); }

ChannelStats compute_channel_stats(const std::vector<const Image*>& train_patches) {
    require(!train_patches.empty(), ErrorKind::Argument, "channel statistics need at least one training patch");
    std::array<long double, 3> sum{}, sumsq{};
    std::size_t count = 0;
    for (const auto* img : train_patches) {
        for (std::size_t i = 0; i < img->pixel_count(); ++i) {
            for (int c = 0; c < 3; ++c) {
                // Integer sums are exact, so pooled moments do not depend on patch order.
                const auto v = img->rgb[3 * i + c];
                sum[c] += v;
                sumsq[c] += static_cast<long double>(v) * v;
            }
        }
        count += img->pixel_count();
    }
    require(count > 0, ErrorKind::Argument, "training patches contain no pixels");
    ChannelStats s;
    for (int c = 0; c < 3; ++c) {
        const long double mean = sum[c] / count;
        const long double var = std::max<long double>(0.0L, sumsq[c] / count - mean * mean);
        s.mean[c] = static_cast<double>(mean / 255.0L);
        const double sd = static_cast<double>(std::sqrt(var) / 255.0L);
        s.substituted[c] = !(sd > 0.0);
        s.std[c] = s.substituted[c] ? 1.0 : sd;
    }
    return s;
}

ChannelStats compute_channel_stats(const std::vector<Patch>& train_patches) {
    std::vector<const Image*> images;
    for (const auto& p : train_patches) images.push_back(&p.pixels);
    return compute_channel_stats(images);
}

json to_json(const ChannelStats& s) {
    return {{"mean", s.mean}, {"std", s.std}, {"substituted", s.substituted}};
}

ChannelStats channel_stats_from_json(const json& j) {
    ChannelStats s;
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.std = j.at("std").get<std::array<double, 3>>();
    s.substituted = j.at("substituted").get<std::array<bool, 3>>();
    return s;
}

PatchTensor to_tensor(const Image& pixels, const ChannelStats& stats) {
    for (double sd : stats.std) require(sd > 0.0, ErrorKind::Argument, "channel std must be positive");
    PatchTensor t{pixels.width, pixels.height, std::vector<double>(pixels.pixel_count() * 3)};
    for (int y = 0; y < pixels.height; ++y)
        for (int x = 0; x < pixels.width; ++x) {
            const auto* px = pixels.at(x, y);
            for (int c = 0; c < 3; ++c) t.at(c, y, x) = (px[c] / 255.0 - stats.mean[c]) / stats.std[c];
        }
    return t;
}

AugmentPlan draw_augment(Rng& rng) {
    AugmentPlan plan;
    plan.hflip = rng.bernoulli(0.5);
    plan.vflip = rng.bernoulli(0.5);
    plan.rot90 = rng.bernoulli(0.5);
    return plan;
}

PatchTensor hflip(const PatchTensor& t) {
    PatchTensor out = t;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.height; ++y)
            for (int x = 0; x < t.width; ++x) out.at(c, y, x) = t.at(c, y, t.width - 1 - x);
    return out;
}

PatchTensor vflip(const PatchTensor& t) {
    PatchTensor out = t;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.height; ++y)
            for (int x = 0; x < t.width; ++x) out.at(c, y, x) = t.at(c, t.height - 1 - y, x);
    return out;
}

PatchTensor rot90(const PatchTensor& t) {
    PatchTensor out{t.height, t.width, std::vector<double>(t.values.size())};
    // out(y', x') = t(x', W-1-y') rotates content counter-clockwise.
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) out.at(c, y, x) = t.at(c, x, t.width - 1 - y);
    return out;
}

PatchTensor apply_augment(const PatchTensor& t, const AugmentPlan& plan) {
    PatchTensor out = t;
    if (plan.hflip) out = hflip(out);
    if (plan.vflip) out = vflip(out);
    if (plan.rot90) out = rot90(out);
    return out;
}

PatchTensor augment(const PatchTensor& t, Rng& rng) { return apply_augment(t, draw_augment(rng)); }

const Patch* PatchStore::find(const std::string& key) const {
    for (const auto& p : patches)
        if (p.key() == key) return &p;
    return nullptr;
}

void write_patch_store(const PatchStore& store, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "patches");
    json entries = json::array();
    for (std::size_t i = 0; i < store.patches.size(); ++i) {
        const auto& p = store.patches[i];
        char name[32];
        std::snprintf(name, sizeof name, "patches/%06zu.bin", i);
        write_bytes(dir / name, p.pixels.rgb);
        entries.push_back({{"key", p.key()},
                           {"spot_id", p.spot_id},
                           {"section_id", p.section_id},
                           {"patient_id", p.patient_id},
                           {"origin", {p.origin_x, p.origin_y}},
                           {"file", name},
                           {"crc32", crc32(p.pixels.rgb)}});
    }
    const json index = {{"format", "stx-patch-store"},
                        {"layout", "hwc-uint8"},
                        {"config",
                         {{"width", store.config.width},
                          {"height", store.config.height},
                          {"white_channel_min", store.config.white_channel_min},
                          {"white_fraction_max", store.config.white_fraction_max}}},
                        {"counts",
                         {{"candidates", store.candidates},
                          {"accepted", store.patches.size()},
                          {"white_rejected", store.white_rejected},
                          {"out_of_bounds", store.out_of_bounds}}},
                        {"patches", entries}};
    write_text(dir / "index.json", index.dump(2));
}

PatchStore read_patch_store(const std::filesystem::path& dir) {
    json index;
    try {
        index = json::parse(read_text(dir / "index.json"));
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, (dir / "index.json").string() + ": " + e.what());
    }
    require(index.value("format", "") == "stx-patch-store", ErrorKind::Schema, dir.string() + " is not a patch store");
    PatchStore store;
    const auto& cfg = index.at("config");
    store.config.width = cfg.at("width").get<int>();
    store.config.height = cfg.at("height").get<int>();
    store.config.white_channel_min = cfg.at("white_channel_min").get<int>();
    store.config.white_fraction_max = cfg.at("white_fraction_max").get<double>();
    const auto& counts = index.at("counts");
    store.candidates = counts.at("candidates").get<std::size_t>();
    store.white_rejected = counts.at("white_rejected").get<std::size_t>();
    store.out_of_bounds = counts.at("out_of_bounds").get<std::size_t>();
    for (const auto& e : index.at("patches")) {
        Patch p;
        p.spot_id = e.at("spot_id").get<std::string>();
        p.section_id = e.at("section_id").get<std::string>();
        p.patient_id = e.at("patient_id").get<std::string>();
        p.origin_x = e.at("origin")[0].get<int>();
        p.origin_y = e.at("origin")[1].get<int>();
        p.pixels = Image(store.config.width, store.config.height);
        auto bytes = read_bytes(dir / e.at("file").get<std::string>());
        require(bytes.size() == p.pixels.rgb.size(), ErrorKind::Schema, "patch file has wrong size: " + e.at("file").get<std::string>());
        require(crc32(bytes) == e.at("crc32").get<std::uint32_t>(), ErrorKind::Integrity,
                "checksum mismatch for patch " + p.key());
        p.pixels.rgb = std::move(bytes);
        store.patches.push_back(std::move(p));
    }
    return store;
}

}  // namespace stx::patches
