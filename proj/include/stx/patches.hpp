#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stx/image.hpp"
#include "stx/ingest.hpp"
#include "stx/rng.hpp"

namespace stx::patches {

struct PatchConfig {
    int width = 224;   // m
    int height = 224;  // n
    int white_channel_min = 200;
    double white_fraction_max = 0.5;

    void validate() const;
};

struct Patch {
    std::string spot_id;
    std::string section_id;
    std::string patient_id;
    int origin_x = 0;
    int origin_y = 0;
    Image pixels;

    std::string key() const { return patient_id + "/" + section_id + "/" + spot_id; }
};

struct Extraction {
    std::vector<Patch> patches;
    std::size_t out_of_bounds = 0;
};

// One patch per spot whose centered window lies inside the image, ordered by spot id.
Extraction extract_patches(const Image& image, const std::vector<ingest::SpotRecord>& spots, const PatchConfig& cfg);

// Fraction of pixels whose three channels are all >= white_channel_min.
double white_fraction(const Patch& p, const PatchConfig& cfg);
bool is_informative(const Patch& p, const PatchConfig& cfg);

struct ChannelStats {
    std::array<double, 3> mean{};
    std::array<double, 3> std{1.0, 1.0, 1.0};
    std::array<bool, 3> substituted{};  // std was zero and replaced by 1
};

// Pooled per-channel moments of pixel/255 over every training pixel.
ChannelStats compute_channel_stats(const std::vector<const Image*>& train_patches);
ChannelStats compute_channel_stats(const std::vector<Patch>& train_patches);

nlohmann::json to_json(const ChannelStats& s);
ChannelStats channel_stats_from_json(const nlohmann::json& j);

// Channel-major 3 x height x width tensor.
struct PatchTensor {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const PatchTensor&) const = default;
};

PatchTensor to_tensor(const Image& pixels, const ChannelStats& stats);

struct AugmentPlan {
    bool hflip = false;
    bool vflip = false;
    bool rot90 = false;
};

// Independent coin flips (p = 0.5) in the order hflip, vflip, rot90.
AugmentPlan draw_augment(Rng& rng);
PatchTensor apply_augment(const PatchTensor& t, const AugmentPlan& plan);
PatchTensor augment(const PatchTensor& t, Rng& rng);

PatchTensor hflip(const PatchTensor& t);
PatchTensor vflip(const PatchTensor& t);
PatchTensor rot90(const PatchTensor& t);  // counter-clockwise

// Directory of raw HWC uint8 patches plus index.json.
struct PatchStore {
    PatchConfig config;
    std::vector<Patch> patches;
    std::size_t candidates = 0;
    std::size_t out_of_bounds = 0;
    std::size_t white_rejected = 0;

    const Patch* find(const std::string& key) const;
};

void write_patch_store(const PatchStore& store, const std::filesystem::path& dir);
PatchStore read_patch_store(const std::filesystem::path& dir);

}  // namespace stx::patches
