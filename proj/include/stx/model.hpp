#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stx/common.hpp"
#include "stx/patches.hpp"

namespace stx::model {

// ---------------------------------------------------------------------------
// Compound scaling of depth, width and resolution.

struct ScalingConfig {
    double alpha = 1.2;
    double beta = 1.1;
    double gamma = 1.15;
    double phi = 0.0;
    int base_depth = 1;
    int base_width = 8;
    int base_resolution = 16;
};

struct ScaledDims {
    int depth = 0;
    int width = 0;
    int resolution = 0;
    bool operator==(const ScaledDims&) const = default;
};

// d = round(d0 * alpha^phi), w = round(w0 * beta^phi), r = round(r0 * gamma^phi).
// alpha*beta^2*gamma^2 outside [1.9, 2.1] adds a warning.
ScaledDims compound_scale(const ScalingConfig& s, std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Trunk and parameter layout.

enum class TrunkKind { Mlp, Conv, VitMicro };
const char* to_string(TrunkKind k);
TrunkKind parse_trunk(const std::string& s);

struct VitConfig {
    int patch_size = 4;  // P
    int embed_dim = 16;  // D
    int heads = 2;       // c
    int key_dim = 8;     // d_k

    bool operator==(const VitConfig&) const = default;
};

struct TrunkConfig {
    TrunkKind kind = TrunkKind::Conv;
    int depth = 2;
    int width = 16;
    int resolution = 16;
    bool residual = false;  // conv only
    VitConfig vit;

    void validate() const;
    std::size_t feature_dim() const;
    std::size_t input_size() const { return 3u * resolution * resolution; }
    bool operator==(const TrunkConfig&) const = default;
};

nlohmann::json to_json(const TrunkConfig& c);
TrunkConfig trunk_from_json(const nlohmann::json& j);

struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;
    std::size_t fan_in = 0;
    bool is_bias = false;

    std::size_t size() const;
};

struct ModelState {
    TrunkConfig config;
    std::size_t k_main = 0;
    std::size_t k_aux = 0;
    std::uint64_t seed = 0;
    std::vector<double> params;
    std::vector<Segment> segments;

    const Segment& segment(const std::string& name) const;
    bool has_segment(const std::string& name) const;
    std::span<double> view(const std::string& name);
    std::span<const double> view(const std::string& name) const;
};

// Segment index for a configuration (offsets, shapes, fan-ins) with no values.
std::vector<Segment> layout(const TrunkConfig& cfg, std::size_t k_main, std::size_t k_aux);

// Weights uniform in +-sqrt(6 / fan_in), biases zero. Segments are filled in
// layout order (trunk, main head, aux head), so the aux head draws last.
ModelState init_params(const TrunkConfig& cfg, std::size_t k_main, std::size_t k_aux, std::uint64_t seed);

// Block mean-pool a tensor down to the trunk resolution (integer factor only).
patches::PatchTensor resample(const patches::PatchTensor& t, int resolution);

// ---------------------------------------------------------------------------
// Forward / loss / backward.

struct SampleCache {
    std::vector<std::vector<double>> a;  // trunk activations, layout depends on the trunk
    std::vector<double> feature;
    std::vector<std::uint8_t> gates;  // sign of every ReLU input, in evaluation order
};

struct Cache {
    std::vector<SampleCache> samples;
    std::uint64_t params_digest = 0;
    std::size_t param_count = 0;
};

struct ForwardResult {
    Matrix main_pred;  // batch x k_main
    Matrix aux_pred;   // batch x k_aux
    Cache cache;
};

ForwardResult forward(const ModelState& state, std::span<const patches::PatchTensor> batch);

// Trunk feature for one sample (used by probes and tests).
std::vector<double> features(const ModelState& state, const patches::PatchTensor& x);

// softmax(Q K^T / sqrt(d_k)) V with row-wise softmax. weights receives the
// attention matrix when given.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* weights = nullptr);

// [head_1..head_c] W_o with head_i = Attention(X W_q^i, X W_k^i, X W_v^i);
// the per-head projections are column blocks of the D x D matrices.
Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo,
                            int heads);

enum class HeadLoss { Mse, SoftCrossEntropy };
const char* to_string(HeadLoss h);
HeadLoss parse_head_loss(const std::string& s);

struct LossConfig {
    double lambda = 40.0;
    HeadLoss head_loss = HeadLoss::Mse;
};

struct LossResult {
    double total = 0.0;
    double main = 0.0;
    double aux = 0.0;
    double aux_term = 0.0;  // lambda * aux
    Matrix d_main;          // dTotal / d main_pred
    Matrix d_aux;           // dTotal / d aux_pred
};

// total = L_main + lambda * L_aux. MSE averages over batch and genes; soft
// cross-entropy compares softmax(pred) with softmax(target) per sample.
LossResult loss(const Matrix& main_pred, const Matrix& aux_pred, const Matrix& main_target, const Matrix& aux_target,
                const LossConfig& lc);

// Exact gradient of loss() with respect to every parameter, in params layout.
// Throws a contract error when the cache does not belong to the current state.
std::vector<double> backward(const ModelState& state, const ForwardResult& fwd, const Matrix& main_target,
                             const Matrix& aux_target, const LossConfig& lc);

// ---------------------------------------------------------------------------
// Optimization.

struct SgdConfig {
    double lr = 0.001;
    double momentum = 0.0;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // rescale gradients above this L2 norm; 0 disables
};

// params <- params - lr * grads
void sgd_step(ModelState& state, std::span<const double> grads, double lr = 0.001);

class Sgd {
public:
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}
    void step(ModelState& state, std::span<const double> grads);

private:
    SgdConfig cfg_;
    std::vector<double> velocity_;
};

struct Example {
    std::string key;
    patches::PatchTensor input;  // normalized, any integer multiple of the trunk resolution
    std::vector<double> main_target;
    std::vector<double> aux_target;
};

struct TrainConfig {
    TrunkConfig trunk;
    LossConfig loss;
    SgdConfig sgd;
    int epochs = 200;
    int batch_size = 32;
    std::uint64_t seed = 7;
    bool augment = true;
};

struct EpochRecord {
    double main = 0.0;
    double aux = 0.0;
    double aux_term = 0.0;
    double total = 0.0;
};

struct StepInfo {
    int epoch = 0;
    std::size_t step = 0;
    const ModelState* state = nullptr;
    const ForwardResult* forward = nullptr;
    const Matrix* main_target = nullptr;
    const Matrix* aux_target = nullptr;
    const LossResult* loss = nullptr;
    const std::vector<double>* grads = nullptr;
};

using StepObserver = std::function<void(const StepInfo&)>;

struct TrainResult {
    ModelState state;
    std::vector<EpochRecord> history;  // sample-weighted means per epoch
};

// Seeded mini-batch SGD. k_aux is taken from the examples; an empty aux target
// list trains a model without an auxiliary head.
TrainResult train(const std::vector<Example>& examples, const TrainConfig& cfg, const StepObserver& observer = {});

Matrix predict_main(const ModelState& state, std::span<const patches::PatchTensor> inputs, std::size_t chunk = 64);
Matrix predict_aux(const ModelState& state, std::span<const patches::PatchTensor> inputs, std::size_t chunk = 64);

// ---------------------------------------------------------------------------
// Finite-difference check.

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
    std::size_t param_count = 0;
};

// Central differences on every parameter. Parameters whose +-step perturbation
// flips any ReLU gate are skipped and counted.
GradCheckResult gradient_check(const ModelState& state, std::span<const patches::PatchTensor> batch,
                               const Matrix& main_target, const Matrix& aux_target, const LossConfig& lc,
                               double step = 1e-5);

// ---------------------------------------------------------------------------
// Checkpoints: raw little-endian float64 blob + JSON config.

void write_checkpoint(const ModelState& state, const nlohmann::json& extra, const std::filesystem::path& path);
ModelState read_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace stx::model
