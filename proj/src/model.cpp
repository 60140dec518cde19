#include "stx/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "stx/io.hpp"
#include "stx/parallel.hpp"
#include "stx/rng.hpp"

namespace stx::model {

using nlohmann::json;
using patches::PatchTensor;

// ---------------------------------------------------------------------------
// Scaling

ScaledDims compound_scale(const ScalingConfig& s, std::vector<std::string>* warnings) {
    require(s.alpha >= 1.0 && s.beta >= 1.0 && s.gamma >= 1.0, ErrorKind::Constraint,
            "scaling coefficients must satisfy alpha, beta, gamma >= 1");
    require(s.phi >= 0.0, ErrorKind::Constraint, "phi must be non-negative");
    require(s.base_depth >= 1 && s.base_width >= 1 && s.base_resolution >= 1, ErrorKind::Constraint,
            "base dimensions must be positive");
    const double flops = s.alpha * s.beta * s.beta * s.gamma * s.gamma;
    if (warnings && (flops < 1.9 || flops > 2.1)) {
        warnings->push_back("alpha*beta^2*gamma^2 = " + std::to_string(flops) + " is outside [1.9, 2.1]");
    }
    const auto scaled = [&](int base, double coef) {
        return std::max(base, static_cast<int>(std::lround(base * std::pow(coef, s.phi))));
    };
    return {scaled(s.base_depth, s.alpha), scaled(s.base_width, s.beta), scaled(s.base_resolution, s.gamma)};
}

// ---------------------------------------------------------------------------
// Configuration

const char* to_string(TrunkKind k) {
    switch (k) {
        case TrunkKind::Mlp: return "mlp";
        case TrunkKind::Conv: return "conv";
        case TrunkKind::VitMicro: return "vit-micro";
    }
    return "conv";
}

TrunkKind parse_trunk(const std::string& s) {
    if (s == "mlp") return TrunkKind::Mlp;
    if (s == "conv") return TrunkKind::Conv;
    if (s == "vit-micro" || s == "vit") return TrunkKind::VitMicro;
    fail(ErrorKind::Argument, "unknown trunk '" + s + "' (expected mlp, conv or vit-micro)");
}

void TrunkConfig::validate() const {
    require(depth >= 1, ErrorKind::Config, "trunk depth must be at least 1");
    require(width >= 1, ErrorKind::Config, "trunk width must be at least 1");
    require(resolution >= 1, ErrorKind::Config, "trunk resolution must be at least 1");
    if (kind == TrunkKind::Conv) {
        require((resolution >> depth) >= 1, ErrorKind::Config,
                "resolution " + std::to_string(resolution) + " cannot be pooled " + std::to_string(depth) + " times");
    }
    if (kind == TrunkKind::VitMicro) {
        require(vit.patch_size >= 1 && resolution % vit.patch_size == 0, ErrorKind::Config,
                "vit resolution must be a multiple of the patch size");
        require(vit.heads >= 1 && vit.key_dim >= 1 && vit.embed_dim == vit.heads * vit.key_dim, ErrorKind::Config,
                "vit embed_dim must equal heads * key_dim");
    }
}

std::size_t TrunkConfig::feature_dim() const {
    return kind == TrunkKind::VitMicro ? static_cast<std::size_t>(vit.embed_dim) : static_cast<std::size_t>(width);
}

json to_json(const TrunkConfig& c) {
    return {{"variant", to_string(c.kind)},
            {"depth", c.depth},
            {"width", c.width},
            {"resolution", c.resolution},
            {"residual", c.residual},
            {"vit",
             {{"patch_size", c.vit.patch_size},
              {"embed_dim", c.vit.embed_dim},
              {"heads", c.vit.heads},
              {"key_dim", c.vit.key_dim}}}};
}

TrunkConfig trunk_from_json(const json& j) {
    TrunkConfig c;
    c.kind = parse_trunk(j.at("variant").get<std::string>());
    c.depth = j.at("depth").get<int>();
    c.width = j.at("width").get<int>();
    c.resolution = j.at("resolution").get<int>();
    c.residual = j.value("residual", false);
    if (j.contains("vit")) {
        const auto& v = j["vit"];
        c.vit = {v.at("patch_size").get<int>(), v.at("embed_dim").get<int>(), v.at("heads").get<int>(),
                 v.at("key_dim").get<int>()};
    }
    c.validate();
    return c;
}

std::size_t Segment::size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const Segment& ModelState::segment(const std::string& name) const {
    for (const auto& s : segments)
        if (s.name == name) return s;
    fail(ErrorKind::Config, "no parameter segment named " + name);
}

bool ModelState::has_segment(const std::string& name) const {
    return std::any_of(segments.begin(), segments.end(), [&](const Segment& s) { return s.name == name; });
}

std::span<double> ModelState::view(const std::string& name) {
    const auto& s = segment(name);
    return {params.data() + s.offset, s.size()};
}

std::span<const double> ModelState::view(const std::string& name) const {
    const auto& s = segment(name);
    return {params.data() + s.offset, s.size()};
}

std::vector<Segment> layout(const TrunkConfig& cfg, std::size_t k_main, std::size_t k_aux) {
    cfg.validate();
    std::vector<Segment> segs;
    std::size_t offset = 0;
    const auto add = [&](std::string name, std::vector<std::size_t> shape, std::size_t fan_in, bool bias) {
        Segment s{std::move(name), offset, std::move(shape), fan_in, bias};
        offset += s.size();
        segs.push_back(std::move(s));
    };
    const auto w = static_cast<std::size_t>(cfg.width);
    switch (cfg.kind) {
        case TrunkKind::Mlp: {
            std::size_t in = cfg.input_size();
            for (int l = 0; l < cfg.depth; ++l) {
                const auto p = "mlp" + std::to_string(l);
                add(p + ".weight", {w, in}, in, false);
                add(p + ".bias", {w}, in, true);
                in = w;
            }
            break;
        }
        case TrunkKind::Conv: {
            std::size_t in = 3;
            for (int l = 0; l < cfg.depth; ++l) {
                const auto p = "conv" + std::to_string(l);
                add(p + ".weight", {w, in, 3, 3}, in * 9, false);
                add(p + ".bias", {w}, in * 9, true);
                in = w;
            }
            break;
        }
        case TrunkKind::VitMicro: {
            const auto P = static_cast<std::size_t>(cfg.vit.patch_size);
            const auto D = static_cast<std::size_t>(cfg.vit.embed_dim);
            const auto grid = static_cast<std::size_t>(cfg.resolution) / P;
            const auto tokens = grid * grid;
            add("embed.weight", {D, 3 * P * P}, 3 * P * P, false);
            add("embed.bias", {D}, 3 * P * P, true);
            add("pos", {tokens, D}, D, false);
            for (int b = 0; b < cfg.depth; ++b) {
                const auto p = "block" + std::to_string(b);
                add(p + ".wq", {D, D}, D, false);
                add(p + ".wk", {D, D}, D, false);
                add(p + ".wv", {D, D}, D, false);
                add(p + ".wo", {D, D}, D, false);
                add(p + ".mlp1.weight", {w, D}, D, false);
                add(p + ".mlp1.bias", {w}, D, true);
                add(p + ".mlp2.weight", {D, w}, w, false);
                add(p + ".mlp2.bias", {D}, w, true);
            }
            break;
        }
    }
    const auto F = cfg.feature_dim();
    add("main.weight", {k_main, F}, F, false);
    add("main.bias", {k_main}, F, true);
    if (k_aux > 0) {
        add("aux.weight", {k_aux, F}, F, false);
        add("aux.bias", {k_aux}, F, true);
    }
    return segs;
}

ModelState init_params(const TrunkConfig& cfg, std::size_t k_main, std::size_t k_aux, std::uint64_t seed) {
    require(k_main >= 1, ErrorKind::Config, "main head needs at least one gene");
    ModelState s;
    s.config = cfg;
    s.k_main = k_main;
    s.k_aux = k_aux;
    s.seed = seed;
    s.segments = layout(cfg, k_main, k_aux);
    s.params.assign(s.segments.empty() ? 0 : s.segments.back().offset + s.segments.back().size(), 0.0);
    Rng rng(derive_seed(seed, "init"));
    for (const auto& seg : s.segments) {
        if (seg.is_bias) continue;
        const double bound = std::sqrt(6.0 / static_cast<double>(seg.fan_in));
        for (std::size_t i = 0; i < seg.size(); ++i) s.params[seg.offset + i] = rng.uniform(-bound, bound);
    }
    return s;
}

PatchTensor resample(const PatchTensor& t, int resolution) {
    if (t.width == resolution && t.height == resolution) return t;
    require(t.width == t.height && t.width % resolution == 0, ErrorKind::Config,
            "patch of " + std::to_string(t.width) + "x" + std::to_string(t.height) +
                " cannot be mean-pooled to resolution " + std::to_string(resolution));
    const int f = t.width / resolution;
    PatchTensor out{resolution, resolution, std::vector<double>(3u * resolution * resolution, 0.0)};
    const double inv = 1.0 / (f * f);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < resolution; ++y)
            for (int x = 0; x < resolution; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx) acc += t.at(c, y * f + dy, x * f + dx);
                out.at(c, y, x) = acc * inv;
            }
    return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace {

void softmax_rows(std::vector<double>& m, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = m.data() + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
    }
}

}  // namespace

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* weights) {
    require(q.cols == k.cols && k.rows == v.rows, ErrorKind::Config, "attention operand shapes do not match");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    Matrix a(q.rows, k.rows);
    for (std::size_t i = 0; i < q.rows; ++i)
        for (std::size_t j = 0; j < k.rows; ++j) {
            double acc = 0.0;
            for (std::size_t d = 0; d < q.cols; ++d) acc += q(i, d) * k(j, d);
            a(i, j) = acc * scale;
        }
    softmax_rows(a.data, a.rows, a.cols);
    Matrix out(q.rows, v.cols);
    for (std::size_t i = 0; i < q.rows; ++i)
        for (std::size_t j = 0; j < k.rows; ++j) {
            const double w = a(i, j);
            for (std::size_t d = 0; d < v.cols; ++d) out(i, d) += w * v(j, d);
        }
    if (weights) *weights = std::move(a);
    return out;
}

Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo,
                            int heads) {
    const auto D = x.cols;
    require(wq.rows == D && wk.rows == D && wv.rows == D && wq.cols == wk.cols && wk.cols == wv.cols &&
                wo.rows == wv.cols && heads >= 1 && wq.cols % static_cast<std::size_t>(heads) == 0,
            ErrorKind::Config, "multi-head attention shapes do not match");
    const auto project = [&](const Matrix& w) {
        Matrix out(x.rows, w.cols);
        for (std::size_t n = 0; n < x.rows; ++n)
            for (std::size_t i = 0; i < D; ++i)
                for (std::size_t j = 0; j < w.cols; ++j) out(n, j) += x(n, i) * w(i, j);
        return out;
    };
    const auto q = project(wq), k = project(wk), v = project(wv);
    const auto dk = wq.cols / static_cast<std::size_t>(heads);
    Matrix concat(x.rows, wq.cols);
    for (int h = 0; h < heads; ++h) {
        Matrix qh(x.rows, dk), kh(x.rows, dk), vh(x.rows, dk);
        for (std::size_t n = 0; n < x.rows; ++n)
            for (std::size_t d = 0; d < dk; ++d) {
                qh(n, d) = q(n, h * dk + d);
                kh(n, d) = k(n, h * dk + d);
                vh(n, d) = v(n, h * dk + d);
            }
        const auto head = attention(qh, kh, vh);
        for (std::size_t n = 0; n < x.rows; ++n)
            for (std::size_t d = 0; d < dk; ++d) concat(n, h * dk + d) = head(n, d);
    }
    Matrix out(x.rows, wo.cols);
    for (std::size_t n = 0; n < x.rows; ++n)
        for (std::size_t i = 0; i < wo.rows; ++i)
            for (std::size_t j = 0; j < wo.cols; ++j) out(n, j) += concat(n, i) * wo(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Trunks. Each sample keeps its own activations; nothing is shared between
// samples so the batch can be split across threads.

namespace {

using Vec = std::vector<double>;

const double* seg_ptr(const ModelState& s, const std::string& name) {
    return s.params.data() + s.segment(name).offset;
}

double* grad_ptr(const ModelState& s, Vec& g, const std::string& name) {
    return g.data() + s.segment(name).offset;
}

std::uint64_t params_digest(const Vec& params) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : params) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

void relu_inplace(Vec& v, std::vector<std::uint8_t>& gates) {
    for (auto& x : v) {
        const bool on = x > 0.0;
        gates.push_back(on ? 1 : 0);
        if (!on) x = 0.0;
    }
}

// out[n x b] = x[n x a] * w[a x b]
Vec mul_xw(const Vec& x, const double* w, std::size_t n, std::size_t a, std::size_t b) {
    Vec out(n * b, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < a; ++i) {
            const double xv = x[r * a + i];
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < b; ++j) out[r * b + j] += xv * w[i * b + j];
        }
    return out;
}

// out[n x b] = x[n x a] * w[b x a]^T + bias
Vec mul_xwt(const Vec& x, const double* w, const double* bias, std::size_t n, std::size_t a, std::size_t b) {
    Vec out(n * b, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < b; ++j) {
            double acc = bias ? bias[j] : 0.0;
            for (std::size_t i = 0; i < a; ++i) acc += x[r * a + i] * w[j * a + i];
            out[r * b + j] = acc;
        }
    return out;
}

// Backward of out = x * w: dw += x^T dout, dx += dout w^T.
void back_xw(const Vec& x, const double* w, const Vec& dout, std::size_t n, std::size_t a, std::size_t b, double* dw,
             Vec& dx) {
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < a; ++i) {
            double acc = 0.0;
            const double xv = x[r * a + i];
            for (std::size_t j = 0; j < b; ++j) {
                const double d = dout[r * b + j];
                dw[i * b + j] += xv * d;
                acc += d * w[i * b + j];
            }
            dx[r * a + i] += acc;
        }
}

// Backward of out = x * w^T + bias: dw += dout^T x, dbias += colsum(dout), dx += dout w.
void back_xwt(const Vec& x, const double* w, const Vec& dout, std::size_t n, std::size_t a, std::size_t b, double* dw,
              double* dbias, Vec* dx) {
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < b; ++j) {
            const double d = dout[r * b + j];
            if (dbias) dbias[j] += d;
            if (d == 0.0) continue;
            for (std::size_t i = 0; i < a; ++i) {
                dw[j * a + i] += d * x[r * a + i];
                if (dx) (*dx)[r * a + i] += d * w[j * a + i];
            }
        }
}

// --- mlp ------------------------------------------------------------------
// a = [x, z0, h0, z1, h1, ...]

void mlp_forward(const ModelState& s, const PatchTensor& x, SampleCache& c) {
    const auto& cfg = s.config;
    const auto w = static_cast<std::size_t>(cfg.width);
    c.a.push_back(x.values);
    std::size_t in = cfg.input_size();
    for (int l = 0; l < cfg.depth; ++l) {
        const auto p = "mlp" + std::to_string(l);
        Vec z = mul_xwt(c.a.back(), seg_ptr(s, p + ".weight"), seg_ptr(s, p + ".bias"), 1, in, w);
        Vec h = z;
        relu_inplace(h, c.gates);
        c.a.push_back(std::move(z));
        c.a.push_back(std::move(h));
        in = w;
    }
    c.feature = c.a.back();
}

void mlp_backward(const ModelState& s, const SampleCache& c, Vec dh, Vec& g) {
    const auto& cfg = s.config;
    const auto w = static_cast<std::size_t>(cfg.width);
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const auto p = "mlp" + std::to_string(l);
        const auto& z = c.a[1 + 2 * l];
        const auto& hin = c.a[2 * l];
        const std::size_t in = l == 0 ? cfg.input_size() : w;
        for (std::size_t o = 0; o < w; ++o)
            if (z[o] <= 0.0) dh[o] = 0.0;
        Vec dx(in, 0.0);
        back_xwt(hin, seg_ptr(s, p + ".weight"), dh, 1, in, w, grad_ptr(s, g, p + ".weight"),
                 grad_ptr(s, g, p + ".bias"), l > 0 ? &dx : nullptr);
        dh = std::move(dx);
    }
}

// --- conv -----------------------------------------------------------------
// Block l: x_l -> z_l = conv3x3(x_l) -> relu -> s_l (+ shortcut) -> 2x2 mean pool -> x_{l+1}.
// a = [x_0, z_0, s_0, x_1, z_1, s_1, x_2, ...]

void conv_forward(const ModelState& s, const PatchTensor& x, SampleCache& c) {
    const auto& cfg = s.config;
    const int w = cfg.width;
    c.a.push_back(x.values);
    int cin = 3, H = cfg.resolution;
    for (int l = 0; l < cfg.depth; ++l) {
        const auto p = "conv" + std::to_string(l);
        const double* W = seg_ptr(s, p + ".weight");
        const double* B = seg_ptr(s, p + ".bias");
        const Vec& in = c.a.back();
        const std::size_t plane = static_cast<std::size_t>(H) * H;
        Vec z(static_cast<std::size_t>(w) * plane);
        for (int o = 0; o < w; ++o) {
            double* zo = z.data() + o * plane;
            std::fill(zo, zo + plane, B[o]);
            for (int i = 0; i < cin; ++i) {
                const double* xi = in.data() + i * plane;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double wv = W[((o * cin + i) * 3 + ky) * 3 + kx];
                        const int y0 = std::max(0, 1 - ky), y1 = std::min(H, H + 1 - ky);
                        const int x0 = std::max(0, 1 - kx), x1 = std::min(H, H + 1 - kx);
                        for (int y = y0; y < y1; ++y) {
                            const double* src = xi + (y + ky - 1) * H + (kx - 1);
                            double* dst = zo + y * H;
                            for (int xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
                        }
                    }
            }
        }
        Vec sum = z;
        relu_inplace(sum, c.gates);
        if (cfg.residual) {
            for (int ch = 0; ch < std::min(cin, w); ++ch)
                for (std::size_t k = 0; k < plane; ++k) sum[ch * plane + k] += in[ch * plane + k];
        }
        const int Hn = H / 2;
        Vec pooled(static_cast<std::size_t>(w) * Hn * Hn);
        for (int ch = 0; ch < w; ++ch)
            for (int y = 0; y < Hn; ++y)
                for (int xx = 0; xx < Hn; ++xx) {
                    const double* r0 = sum.data() + ch * plane + (2 * y) * H + 2 * xx;
                    pooled[(ch * Hn + y) * Hn + xx] = 0.25 * (r0[0] + r0[1] + r0[H] + r0[H + 1]);
                }
        c.a.push_back(std::move(z));
        c.a.push_back(std::move(sum));
        c.a.push_back(std::move(pooled));
        cin = w;
        H = Hn;
    }
    const std::size_t plane = static_cast<std::size_t>(H) * H;
    c.feature.assign(w, 0.0);
    const Vec& last = c.a.back();
    for (int ch = 0; ch < w; ++ch) {
        double acc = 0.0;
        for (std::size_t k = 0; k < plane; ++k) acc += last[ch * plane + k];
        c.feature[ch] = acc / static_cast<double>(plane);
    }
}

void conv_backward(const ModelState& s, const SampleCache& c, const Vec& df, Vec& g) {
    const auto& cfg = s.config;
    const int w = cfg.width;
    int H = cfg.resolution >> cfg.depth;
    Vec dy(static_cast<std::size_t>(w) * H * H);
    for (int ch = 0; ch < w; ++ch)
        for (int k = 0; k < H * H; ++k) dy[ch * H * H + k] = df[ch] / static_cast<double>(H * H);
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const int Hl = cfg.resolution >> l;
        const int cin = l == 0 ? 3 : w;
        const std::size_t plane = static_cast<std::size_t>(Hl) * Hl;
        const auto p = "conv" + std::to_string(l);
        const double* W = seg_ptr(s, p + ".weight");
        double* dW = grad_ptr(s, g, p + ".weight");
        double* dB = grad_ptr(s, g, p + ".bias");
        const Vec& in = c.a[3 * l];
        const Vec& z = c.a[3 * l + 1];
        Vec ds(static_cast<std::size_t>(w) * plane, 0.0);
        for (int ch = 0; ch < w; ++ch)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < H; ++xx) {
                    const double d = 0.25 * dy[(ch * H + y) * H + xx];
                    double* r0 = ds.data() + ch * plane + (2 * y) * Hl + 2 * xx;
                    r0[0] = r0[1] = r0[Hl] = r0[Hl + 1] = d;
                }
        Vec dx(static_cast<std::size_t>(cin) * plane, 0.0);
        if (cfg.residual) {
            for (int ch = 0; ch < std::min(cin, w); ++ch)
                for (std::size_t k = 0; k < plane; ++k) dx[ch * plane + k] += ds[ch * plane + k];
        }
        Vec& dz = ds;
        for (std::size_t k = 0; k < dz.size(); ++k)
            if (z[k] <= 0.0) dz[k] = 0.0;
        for (int o = 0; o < w; ++o) {
            const double* dzo = dz.data() + o * plane;
            double bacc = 0.0;
            for (std::size_t k = 0; k < plane; ++k) bacc += dzo[k];
            dB[o] += bacc;
            for (int i = 0; i < cin; ++i) {
                const double* xi = in.data() + i * plane;
                double* dxi = dx.data() + i * plane;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const std::size_t widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                        const double wv = W[widx];
                        const int y0 = std::max(0, 1 - ky), y1 = std::min(Hl, Hl + 1 - ky);
                        const int x0 = std::max(0, 1 - kx), x1 = std::min(Hl, Hl + 1 - kx);
                        double wacc = 0.0;
                        for (int y = y0; y < y1; ++y) {
                            const double* src = xi + (y + ky - 1) * Hl + (kx - 1);
                            double* dsrc = dxi + (y + ky - 1) * Hl + (kx - 1);
                            const double* d = dzo + y * Hl;
                            for (int xx = x0; xx < x1; ++xx) {
                                wacc += d[xx] * src[xx];
                                dsrc[xx] += d[xx] * wv;
                            }
                        }
                        dW[widx] += wacc;
                    }
            }
        }
        dy = std::move(dx);
        H = Hl;
    }
}

// --- vit-micro --------------------------------------------------------------
// a = [tokens, X0, then per block: Q, K, V, A, Hcat, X1, U, R, Xout]

struct VitDims {
    std::size_t P, D, N, heads, dk, w, t;
};

VitDims vit_dims(const TrunkConfig& cfg) {
    const auto P = static_cast<std::size_t>(cfg.vit.patch_size);
    const auto grid = static_cast<std::size_t>(cfg.resolution) / P;
    return {P,
            static_cast<std::size_t>(cfg.vit.embed_dim),
            grid * grid,
            static_cast<std::size_t>(cfg.vit.heads),
            static_cast<std::size_t>(cfg.vit.key_dim),
            static_cast<std::size_t>(cfg.width),
            3 * P * P};
}

const Vec& vit_block_input(const SampleCache& c, int b) { return b == 0 ? c.a[1] : c.a[2 + 9 * (b - 1) + 8]; }

void vit_forward(const ModelState& s, const PatchTensor& x, SampleCache& c) {
    const auto& cfg = s.config;
    const auto d = vit_dims(cfg);
    const std::size_t grid = static_cast<std::size_t>(cfg.resolution) / d.P;
    Vec tokens(d.N * d.t);
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px) {
            double* tok = tokens.data() + (py * grid + px) * d.t;
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t y = 0; y < d.P; ++y)
                    for (std::size_t xx = 0; xx < d.P; ++xx)
                        tok[(ch * d.P + y) * d.P + xx] =
                            x.at(static_cast<int>(ch), static_cast<int>(py * d.P + y), static_cast<int>(px * d.P + xx));
        }
    Vec X = mul_xwt(tokens, seg_ptr(s, "embed.weight"), seg_ptr(s, "embed.bias"), d.N, d.t, d.D);
    const double* pos = seg_ptr(s, "pos");
    for (std::size_t k = 0; k < X.size(); ++k) X[k] += pos[k];
    c.a.push_back(std::move(tokens));
    c.a.push_back(X);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.dk));
    for (int b = 0; b < cfg.depth; ++b) {
        const auto p = "block" + std::to_string(b);
        Vec Q = mul_xw(X, seg_ptr(s, p + ".wq"), d.N, d.D, d.D);
        Vec K = mul_xw(X, seg_ptr(s, p + ".wk"), d.N, d.D, d.D);
        Vec V = mul_xw(X, seg_ptr(s, p + ".wv"), d.N, d.D, d.D);
        Vec A(d.heads * d.N * d.N);
        Vec Hc(d.N * d.D, 0.0);
        for (std::size_t h = 0; h < d.heads; ++h) {
            double* Ah = A.data() + h * d.N * d.N;
            for (std::size_t i = 0; i < d.N; ++i)
                for (std::size_t j = 0; j < d.N; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d.dk; ++k) acc += Q[i * d.D + h * d.dk + k] * K[j * d.D + h * d.dk + k];
                    Ah[i * d.N + j] = acc * scale;
                }
            Vec rows(Ah, Ah + d.N * d.N);
            softmax_rows(rows, d.N, d.N);
            std::copy(rows.begin(), rows.end(), Ah);
            for (std::size_t i = 0; i < d.N; ++i)
                for (std::size_t j = 0; j < d.N; ++j) {
                    const double a = Ah[i * d.N + j];
                    for (std::size_t k = 0; k < d.dk; ++k) Hc[i * d.D + h * d.dk + k] += a * V[j * d.D + h * d.dk + k];
                }
        }
        Vec X1 = mul_xw(Hc, seg_ptr(s, p + ".wo"), d.N, d.D, d.D);
        for (std::size_t k = 0; k < X1.size(); ++k) X1[k] += X[k];
        Vec U = mul_xwt(X1, seg_ptr(s, p + ".mlp1.weight"), seg_ptr(s, p + ".mlp1.bias"), d.N, d.D, d.w);
        Vec R = U;
        relu_inplace(R, c.gates);
        Vec Xo = mul_xwt(R, seg_ptr(s, p + ".mlp2.weight"), seg_ptr(s, p + ".mlp2.bias"), d.N, d.w, d.D);
        for (std::size_t k = 0; k < Xo.size(); ++k) Xo[k] += X1[k];
        X = Xo;
        for (Vec* v : {&Q, &K, &V, &A, &Hc, &X1, &U, &R, &Xo}) c.a.push_back(std::move(*v));
    }
    c.feature.assign(d.D, 0.0);
    for (std::size_t n = 0; n < d.N; ++n)
        for (std::size_t k = 0; k < d.D; ++k) c.feature[k] += X[n * d.D + k];
    for (auto& v : c.feature) v /= static_cast<double>(d.N);
}

void vit_backward(const ModelState& s, const SampleCache& c, const Vec& df, Vec& g) {
    const auto& cfg = s.config;
    const auto d = vit_dims(cfg);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.dk));
    Vec dX(d.N * d.D);
    for (std::size_t n = 0; n < d.N; ++n)
        for (std::size_t k = 0; k < d.D; ++k) dX[n * d.D + k] = df[k] / static_cast<double>(d.N);
    for (int b = cfg.depth - 1; b >= 0; --b) {
        const auto p = "block" + std::to_string(b);
        const std::size_t o = 2 + 9 * static_cast<std::size_t>(b);
        const Vec &Q = c.a[o], &K = c.a[o + 1], &V = c.a[o + 2], &A = c.a[o + 3], &Hc = c.a[o + 4],
                  &X1 = c.a[o + 5], &U = c.a[o + 6], &R = c.a[o + 7];
        const Vec& X = vit_block_input(c, b);
        // Xout = X1 + R W2^T + b2
        Vec dX1 = dX;
        Vec dR(d.N * d.w, 0.0);
        back_xwt(R, seg_ptr(s, p + ".mlp2.weight"), dX, d.N, d.w, d.D, grad_ptr(s, g, p + ".mlp2.weight"),
                 grad_ptr(s, g, p + ".mlp2.bias"), &dR);
        for (std::size_t k = 0; k < dR.size(); ++k)
            if (U[k] <= 0.0) dR[k] = 0.0;
        back_xwt(X1, seg_ptr(s, p + ".mlp1.weight"), dR, d.N, d.D, d.w, grad_ptr(s, g, p + ".mlp1.weight"),
                 grad_ptr(s, g, p + ".mlp1.bias"), &dX1);
        // X1 = X + Hc Wo
        Vec dXin = dX1;
        Vec dHc(d.N * d.D, 0.0);
        back_xw(Hc, seg_ptr(s, p + ".wo"), dX1, d.N, d.D, d.D, grad_ptr(s, g, p + ".wo"), dHc);
        Vec dQ(d.N * d.D, 0.0), dK(d.N * d.D, 0.0), dV(d.N * d.D, 0.0);
        Vec dA(d.N * d.N);
        for (std::size_t h = 0; h < d.heads; ++h) {
            const double* Ah = A.data() + h * d.N * d.N;
            const std::size_t off = h * d.dk;
            for (std::size_t i = 0; i < d.N; ++i)
                for (std::size_t j = 0; j < d.N; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d.dk; ++k) {
                        acc += dHc[i * d.D + off + k] * V[j * d.D + off + k];
                        dV[j * d.D + off + k] += Ah[i * d.N + j] * dHc[i * d.D + off + k];
                    }
                    dA[i * d.N + j] = acc;
                }
            for (std::size_t i = 0; i < d.N; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d.N; ++j) dot += dA[i * d.N + j] * Ah[i * d.N + j];
                for (std::size_t j = 0; j < d.N; ++j) {
                    const double dS = Ah[i * d.N + j] * (dA[i * d.N + j] - dot) * scale;
                    if (dS == 0.0) continue;
                    for (std::size_t k = 0; k < d.dk; ++k) {
                        dQ[i * d.D + off + k] += dS * K[j * d.D + off + k];
                        dK[j * d.D + off + k] += dS * Q[i * d.D + off + k];
                    }
                }
            }
        }
        back_xw(X, seg_ptr(s, p + ".wq"), dQ, d.N, d.D, d.D, grad_ptr(s, g, p + ".wq"), dXin);
        back_xw(X, seg_ptr(s, p + ".wk"), dK, d.N, d.D, d.D, grad_ptr(s, g, p + ".wk"), dXin);
        back_xw(X, seg_ptr(s, p + ".wv"), dV, d.N, d.D, d.D, grad_ptr(s, g, p + ".wv"), dXin);
        dX = std::move(dXin);
    }
    double* dpos = grad_ptr(s, g, "pos");
    for (std::size_t k = 0; k < dX.size(); ++k) dpos[k] += dX[k];
    back_xwt(c.a[0], seg_ptr(s, "embed.weight"), dX, d.N, d.t, d.D, grad_ptr(s, g, "embed.weight"),
             grad_ptr(s, g, "embed.bias"), nullptr);
}

SampleCache trunk_forward(const ModelState& s, const PatchTensor& input) {
    const auto x = resample(input, s.config.resolution);
    SampleCache c;
    switch (s.config.kind) {
        case TrunkKind::Mlp: mlp_forward(s, x, c); break;
        case TrunkKind::Conv: conv_forward(s, x, c); break;
        case TrunkKind::VitMicro: vit_forward(s, x, c); break;
    }
    return c;
}

void trunk_backward(const ModelState& s, const SampleCache& c, const Vec& df, Vec& g) {
    switch (s.config.kind) {
        case TrunkKind::Mlp: mlp_backward(s, c, df, g); break;
        case TrunkKind::Conv: conv_backward(s, c, df, g); break;
        case TrunkKind::VitMicro: vit_backward(s, c, df, g); break;
    }
}

void head_forward(const ModelState& s, const std::string& head, std::size_t k, const Vec& f, std::span<double> out) {
    const auto F = f.size();
    const double* W = seg_ptr(s, head + ".weight");
    const double* B = seg_ptr(s, head + ".bias");
    for (std::size_t g = 0; g < k; ++g) {
        double acc = B[g];
        for (std::size_t i = 0; i < F; ++i) acc += W[g * F + i] * f[i];
        out[g] = acc;
    }
}

// Accumulates head gradients and adds the head's contribution to df.
void head_backward(const ModelState& s, const std::string& head, std::size_t k, const Vec& f,
                   std::span<const double> dpred, Vec& df, Vec& g) {
    const auto F = f.size();
    const double* W = seg_ptr(s, head + ".weight");
    double* dW = grad_ptr(s, g, head + ".weight");
    double* dB = grad_ptr(s, g, head + ".bias");
    for (std::size_t j = 0; j < k; ++j) {
        const double d = dpred[j];
        dB[j] += d;
        for (std::size_t i = 0; i < F; ++i) {
            dW[j * F + i] += d * f[i];
            df[i] += d * W[j * F + i];
        }
    }
}

}  // namespace

ForwardResult forward(const ModelState& state, std::span<const PatchTensor> batch) {
    require(state.params.size() == (state.segments.empty() ? 0 : state.segments.back().offset + state.segments.back().size()),
            ErrorKind::Contract, "parameter vector does not match the segment layout");
    ForwardResult r;
    const std::size_t B = batch.size();
    r.main_pred = Matrix(B, state.k_main);
    r.aux_pred = Matrix(B, state.k_aux);
    r.cache.samples.resize(B);
    parallel_for(B, [&](std::size_t i) {
        auto c = trunk_forward(state, batch[i]);
        head_forward(state, "main", state.k_main, c.feature, r.main_pred.row(i));
        if (state.k_aux > 0) head_forward(state, "aux", state.k_aux, c.feature, r.aux_pred.row(i));
        r.cache.samples[i] = std::move(c);
    });
    for (std::size_t i = 0; i < B; ++i) {
        const auto finite = [](std::span<const double> row) {
            return std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); });
        };
        require(finite(r.main_pred.row(i)) && finite(r.aux_pred.row(i)), ErrorKind::Numeric,
                "non-finite prediction at batch index " + std::to_string(i));
    }
    r.cache.params_digest = params_digest(state.params);
    r.cache.param_count = state.params.size();
    return r;
}

std::vector<double> features(const ModelState& state, const PatchTensor& x) {
    return trunk_forward(state, x).feature;
}

const char* to_string(HeadLoss h) { return h == HeadLoss::Mse ? "mse" : "soft-ce"; }

HeadLoss parse_head_loss(const std::string& s) {
    if (s == "mse") return HeadLoss::Mse;
    if (s == "soft-ce" || s == "soft-cross-entropy" || s == "ce") return HeadLoss::SoftCrossEntropy;
    fail(ErrorKind::Argument, "unknown head loss '" + s + "' (expected mse or soft-ce)");
}

namespace {

// Returns the head loss and writes its gradient (unscaled) into grad.
double head_loss(const Matrix& pred, const Matrix& target, HeadLoss kind, Matrix& grad) {
    grad = Matrix(pred.rows, pred.cols);
    if (pred.rows == 0 || pred.cols == 0) return 0.0;
    const double B = static_cast<double>(pred.rows);
    double total = 0.0;
    if (kind == HeadLoss::Mse) {
        const double n = B * static_cast<double>(pred.cols);
        for (std::size_t k = 0; k < pred.data.size(); ++k) {
            const double diff = pred.data[k] - target.data[k];
            total += diff * diff;
            grad.data[k] = 2.0 * diff / n;
        }
        return total / n;
    }
    const std::size_t K = pred.cols;
    Vec q(K), logp(K);
    for (std::size_t r = 0; r < pred.rows; ++r) {
        const auto log_softmax = [K](std::span<const double> v, Vec& out) {
            const double mx = *std::max_element(v.begin(), v.end());
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp(v[k] - mx);
            const double lse = mx + std::log(sum);
            for (std::size_t k = 0; k < K; ++k) out[k] = v[k] - lse;
        };
        log_softmax(target.row(r), q);
        for (auto& v : q) v = std::exp(v);
        log_softmax(pred.row(r), logp);
        for (std::size_t k = 0; k < K; ++k) {
            total -= q[k] * logp[k];
            grad(r, k) = (std::exp(logp[k]) - q[k]) / B;
        }
    }
    return total / B;
}

}  // namespace

LossResult loss(const Matrix& main_pred, const Matrix& aux_pred, const Matrix& main_target, const Matrix& aux_target,
                const LossConfig& lc) {
    require(main_pred.rows == main_target.rows && main_pred.cols == main_target.cols, ErrorKind::Contract,
            "main prediction and target shapes differ");
    require(aux_pred.rows == aux_target.rows && aux_pred.cols == aux_target.cols, ErrorKind::Contract,
            "aux prediction and target shapes differ");
    require(lc.lambda >= 0.0 && std::isfinite(lc.lambda), ErrorKind::Config, "lambda must be a non-negative number");
    LossResult r;
    r.main = head_loss(main_pred, main_target, lc.head_loss, r.d_main);
    r.aux = head_loss(aux_pred, aux_target, lc.head_loss, r.d_aux);
    r.aux_term = lc.lambda * r.aux;
    for (auto& v : r.d_aux.data) v *= lc.lambda;
    r.total = r.main + r.aux_term;
    return r;
}

std::vector<double> backward(const ModelState& state, const ForwardResult& fwd, const Matrix& main_target,
                             const Matrix& aux_target, const LossConfig& lc) {
    require(fwd.cache.param_count == state.params.size() && fwd.cache.params_digest == params_digest(state.params),
            ErrorKind::Contract, "forward cache is stale: parameters changed since the forward pass");
    const auto lr = loss(fwd.main_pred, fwd.aux_pred, main_target, aux_target, lc);
    const std::size_t B = fwd.cache.samples.size();
    const bool use_aux = state.k_aux > 0 && lc.lambda != 0.0;
    std::vector<Vec> per(B);
    parallel_for(B, [&](std::size_t i) {
        Vec g(state.params.size(), 0.0);
        const auto& c = fwd.cache.samples[i];
        Vec df(c.feature.size(), 0.0);
        head_backward(state, "main", state.k_main, c.feature, lr.d_main.row(i), df, g);
        if (use_aux) head_backward(state, "aux", state.k_aux, c.feature, lr.d_aux.row(i), df, g);
        trunk_backward(state, c, df, g);
        per[i] = std::move(g);
    });
    Vec grads(state.params.size(), 0.0);
    for (const auto& g : per)
        for (std::size_t k = 0; k < g.size(); ++k) grads[k] += g[k];
    return grads;
}

// ---------------------------------------------------------------------------
// Optimization

void sgd_step(ModelState& state, std::span<const double> grads, double lr) {
    require(grads.size() == state.params.size(), ErrorKind::Contract, "gradient size does not match parameters");
    for (std::size_t k = 0; k < grads.size(); ++k) state.params[k] -= lr * grads[k];
}

void Sgd::step(ModelState& state, std::span<const double> grads) {
    require(grads.size() == state.params.size(), ErrorKind::Contract, "gradient size does not match parameters");
    std::vector<double> clipped;
    if (cfg_.clip_norm > 0.0) {
        double sq = 0.0;
        for (double g : grads) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) {
            clipped.assign(grads.begin(), grads.end());
            for (auto& g : clipped) g *= cfg_.clip_norm / norm;
            grads = clipped;
        }
    }
    if (cfg_.momentum == 0.0 && cfg_.weight_decay == 0.0) {
        sgd_step(state, grads, cfg_.lr);
        return;
    }
    if (velocity_.size() != grads.size()) velocity_.assign(grads.size(), 0.0);
    for (std::size_t k = 0; k < grads.size(); ++k) {
        const double g = grads[k] + cfg_.weight_decay * state.params[k];
        velocity_[k] = cfg_.momentum * velocity_[k] + g;
        state.params[k] -= cfg_.lr * velocity_[k];
    }
}

TrainResult train(const std::vector<Example>& examples, const TrainConfig& cfg, const StepObserver& observer) {
    require(!examples.empty(), ErrorKind::EmptyDataset, "no training examples");
    require(cfg.epochs >= 0, ErrorKind::Argument, "epochs must be non-negative");
    require(cfg.batch_size >= 1, ErrorKind::Argument, "batch size must be at least 1");
    require(static_cast<std::size_t>(cfg.batch_size) <= examples.size(), ErrorKind::Argument,
            "batch size " + std::to_string(cfg.batch_size) + " exceeds the " + std::to_string(examples.size()) +
                " training examples");
    require(cfg.sgd.lr >= 0.0 && std::isfinite(cfg.sgd.lr), ErrorKind::Argument, "learning rate must be non-negative");
    cfg.trunk.validate();
    const std::size_t k_main = examples.front().main_target.size();
    const std::size_t k_aux = examples.front().aux_target.size();
    for (const auto& e : examples) {
        require(e.main_target.size() == k_main && e.aux_target.size() == k_aux, ErrorKind::Validation,
                "example " + e.key + " has inconsistent target lengths");
    }

    // Pooling commutes with flips and quarter turns, so downsample once up front.
    std::vector<PatchTensor> inputs(examples.size());
    parallel_for(examples.size(), [&](std::size_t i) { inputs[i] = resample(examples[i].input, cfg.trunk.resolution); });

    TrainResult result;
    result.state = init_params(cfg.trunk, k_main, k_aux, cfg.seed);
    Sgd opt(cfg.sgd);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto B = static_cast<std::size_t>(cfg.batch_size);
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, shuffle_rng);
        EpochRecord rec;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t n = std::min(B, order.size() - start);
            std::vector<PatchTensor> batch(n);
            Matrix mt(n, k_main), at(n, k_aux);
            parallel_for(n, [&](std::size_t i) {
                const auto& e = examples[order[start + i]];
                if (cfg.augment) {
                    Rng rng(derive_seed(cfg.seed, "augment", e.key + ":" + std::to_string(epoch)));
                    batch[i] = patches::augment(inputs[order[start + i]], rng);
                } else {
                    batch[i] = inputs[order[start + i]];
                }
                std::copy(e.main_target.begin(), e.main_target.end(), mt.row(i).begin());
                std::copy(e.aux_target.begin(), e.aux_target.end(), at.row(i).begin());
            });
            const auto fwd = forward(result.state, batch);
            const auto lr = loss(fwd.main_pred, fwd.aux_pred, mt, at, cfg.loss);
            require(std::isfinite(lr.total), ErrorKind::Numeric,
                    "loss became non-finite at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
            const auto grads = backward(result.state, fwd, mt, at, cfg.loss);
            if (observer) observer({epoch, step, &result.state, &fwd, &mt, &at, &lr, &grads});
            opt.step(result.state, grads);
            const double w = static_cast<double>(n);
            rec.main += lr.main * w;
            rec.aux += lr.aux * w;
            rec.aux_term += lr.aux_term * w;
            rec.total += lr.total * w;
            ++step;
        }
        const double N = static_cast<double>(order.size());
        rec.main /= N;
        rec.aux /= N;
        rec.aux_term /= N;
        rec.total /= N;
        result.history.push_back(rec);
    }
    return result;
}

namespace {

Matrix predict(const ModelState& state, std::span<const PatchTensor> inputs, std::size_t chunk, bool aux) {
    const std::size_t k = aux ? state.k_aux : state.k_main;
    Matrix out(inputs.size(), k);
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t start = 0; start < inputs.size(); start += chunk) {
        const std::size_t n = std::min(chunk, inputs.size() - start);
        const auto fwd = forward(state, inputs.subspan(start, n));
        const auto& src = aux ? fwd.aux_pred : fwd.main_pred;
        std::copy(src.data.begin(), src.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * k));
    }
    return out;
}

}  // namespace

Matrix predict_main(const ModelState& state, std::span<const PatchTensor> inputs, std::size_t chunk) {
    return predict(state, inputs, chunk, false);
}

Matrix predict_aux(const ModelState& state, std::span<const PatchTensor> inputs, std::size_t chunk) {
    return predict(state, inputs, chunk, true);
}

// ---------------------------------------------------------------------------
// Finite differences

GradCheckResult gradient_check(const ModelState& state, std::span<const PatchTensor> batch, const Matrix& main_target,
                               const Matrix& aux_target, const LossConfig& lc, double step) {
    require(step > 0.0, ErrorKind::Argument, "finite-difference step must be positive");
    const auto base = forward(state, batch);
    const auto analytic = backward(state, base, main_target, aux_target, lc);
    const auto gates_of = [](const ForwardResult& f) {
        std::vector<std::uint8_t> all;
        for (const auto& s : f.cache.samples) all.insert(all.end(), s.gates.begin(), s.gates.end());
        return all;
    };
    const auto base_gates = gates_of(base);
    GradCheckResult r;
    r.param_count = state.params.size();
    ModelState probe = state;
    for (std::size_t k = 0; k < state.params.size(); ++k) {
        const double orig = state.params[k];
        probe.params[k] = orig + step;
        const auto fp = forward(probe, batch);
        probe.params[k] = orig - step;
        const auto fm = forward(probe, batch);
        probe.params[k] = orig;
        if (gates_of(fp) != base_gates || gates_of(fm) != base_gates) {
            ++r.skipped_kinks;
            continue;
        }
        const double lp = loss(fp.main_pred, fp.aux_pred, main_target, aux_target, lc).total;
        const double lm = loss(fm.main_pred, fm.aux_pred, main_target, aux_target, lc).total;
        const double numeric = (lp - lm) / (2.0 * step);
        const double abs_err = std::abs(numeric - analytic[k]);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[k]), 1e-8});
        r.max_abs_error = std::max(r.max_abs_error, abs_err);
        r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
        ++r.checked;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

void write_checkpoint(const ModelState& state, const json& extra, const std::filesystem::path& path) {
    json segs = json::array();
    for (const auto& s : state.segments) segs.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});
    json cfg = {{"format", "stx-checkpoint"},
                {"version", 1},
                {"trunk", to_json(state.config)},
                {"k_main", state.k_main},
                {"k_aux", state.k_aux},
                {"seed", state.seed},
                {"param_count", state.params.size()},
                {"dtype", "float64-le"},
                {"segments", segs},
                {"extra", extra}};
    std::vector<std::uint8_t> blob(state.params.size() * sizeof(double));
    std::memcpy(blob.data(), state.params.data(), blob.size());
    const auto text = cfg.dump(2) + "\n";
    write_zip(path, {{"config.json", std::vector<std::uint8_t>(text.begin(), text.end())}, {"params.bin", blob}});
}

ModelState read_checkpoint(const std::filesystem::path& path, json* extra) {
    const auto entries = read_zip(path);
    const auto cfg_it = entries.find("config.json");
    const auto blob_it = entries.find("params.bin");
    require(cfg_it != entries.end() && blob_it != entries.end(), ErrorKind::Schema,
            path.string() + ": checkpoint must contain config.json and params.bin");
    json cfg;
    try {
        cfg = json::parse(cfg_it->second.begin(), cfg_it->second.end());
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, path.string() + ": " + e.what());
    }
    require(cfg.value("format", "") == "stx-checkpoint", ErrorKind::Schema, path.string() + ": not a checkpoint");
    ModelState s;
    try {
        s.config = trunk_from_json(cfg.at("trunk"));
        s.k_main = cfg.at("k_main").get<std::size_t>();
        s.k_aux = cfg.at("k_aux").get<std::size_t>();
        s.seed = cfg.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, path.string() + ": " + e.what());
    }
    s.segments = layout(s.config, s.k_main, s.k_aux);
    const std::size_t n = s.segments.back().offset + s.segments.back().size();
    require(blob_it->second.size() == n * sizeof(double), ErrorKind::Integrity,
            path.string() + ": parameter blob has " + std::to_string(blob_it->second.size()) + " bytes, expected " +
                std::to_string(n * sizeof(double)));
    s.params.resize(n);
    std::memcpy(s.params.data(), blob_it->second.data(), blob_it->second.size());
    if (extra) *extra = cfg.value("extra", json::object());
    return s;
}

}  // namespace stx::model
