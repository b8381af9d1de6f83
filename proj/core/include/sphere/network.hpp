#pragma once

// Encoder E and decoder D: ViT blocks with AdaLN-Zero conditioning, rotary +
// sinusoidal positions, MLP-Mixer latent heads, and a norm-bounding final
// stage on the encoder so that ||flatten(E(x))|| <= sqrt(L).

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "sphere/autodiff.hpp"
#include "sphere/errors.hpp"
#include "sphere/geometry.hpp"
#include "sphere/rng.hpp"
#include "sphere/tensor.hpp"

namespace sphere {

struct ModelConfig {
    int64_t image_size = 24;
    int64_t channels = 3;
    int64_t patch_size = 2;
    int64_t hidden_size = 128;
    int64_t n_blocks = 4;
    int64_t n_heads = 4;
    int64_t mixer_depth = 2;
    int64_t latent_d = 8;
    int64_t n_classes = 3;  // 0 = unconditional
    double cfg_null_drop_prob = 0.1;

    int64_t grid() const { return image_size / patch_size; }
    int64_t tokens() const { return grid() * grid(); }
    LatentShape latent_shape() const { return {grid(), grid(), latent_d}; }
    int64_t latent_len() const { return latent_shape().len(); }
    int64_t head_dim() const { return hidden_size / n_heads; }
    bool conditional() const { return n_classes > 0; }
    // id n_classes is the learned null embedding
    int null_id() const { return static_cast<int>(n_classes); }
    double compression_ratio() const {
        return static_cast<double>(image_size * image_size * channels) /
               static_cast<double>(latent_len());
    }

    void validate() const {
        if (image_size <= 0 || channels <= 0 || patch_size <= 0)
            throw ConfigError("ModelConfig: sizes must be positive");
        if (image_size % patch_size != 0)
            throw ConfigError("ModelConfig: image_size must be divisible by patch_size");
        if (hidden_size % n_heads != 0)
            throw ConfigError("ModelConfig: hidden_size must be divisible by n_heads");
        if (head_dim() % 4 != 0)
            throw ConfigError("ModelConfig: head_dim must be divisible by 4 (axial rotary pairs)");
        if (hidden_size % 4 != 0)
            throw ConfigError("ModelConfig: hidden_size must be divisible by 4 (2-D sinusoidal split)");
        if (latent_d <= 0) throw ConfigError("ModelConfig: latent_d must be positive");
        if (n_classes < 0) throw ConfigError("ModelConfig: n_classes must be >= 0");
        if (n_blocks <= 0 || mixer_depth < 0)
            throw ConfigError("ModelConfig: block counts out of range");
        if (cfg_null_drop_prob < 0.0 || cfg_null_drop_prob > 1.0)
            throw ConfigError("ModelConfig: cfg_null_drop_prob must be in [0,1]");
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "image_size = " << image_size << "\n"
           << "channels = " << channels << "\n"
           << "patch_size = " << patch_size << "\n"
           << "hidden_size = " << hidden_size << "\n"
           << "n_blocks = " << n_blocks << "\n"
           << "n_heads = " << n_heads << "\n"
           << "mixer_depth = " << mixer_depth << "\n"
           << "latent_d = " << latent_d << "\n"
           << "n_classes = " << n_classes << "\n"
           << "cfg_null_drop_prob = " << cfg_null_drop_prob << "\n";
        return os.str();
    }

    static ModelConfig deserialize(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

// Dual positional state: additive 2-D sinusoidal table applied at embedding,
// rotary per-head angle tables applied to q/k in every block.
template <typename T>
struct PositionalState {
    TensorData<T> abs_pe;                       // [tokens, hidden]
    std::shared_ptr<TensorData<T>> rope_cos;    // [tokens, head_dim/2]
    std::shared_ptr<TensorData<T>> rope_sin;
};

template <typename T>
PositionalState<T> build_positional(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t g = cfg.grid(), tokens = cfg.tokens(), hidden = cfg.hidden_size;
    PositionalState<T> out;
    out.abs_pe = TensorData<T>(Shape{tokens, hidden});
    const int64_t half = hidden / 2;  // first half encodes the row, second the column
    for (int64_t t = 0; t < tokens; ++t) {
        const auto row = static_cast<double>(t / g);
        const auto col = static_cast<double>(t % g);
        T* dst = out.abs_pe.v.data() + t * hidden;
        for (int64_t axis = 0; axis < 2; ++axis) {
            const double pos = axis == 0 ? row : col;
            T* seg = dst + axis * half;
            for (int64_t i = 0; i < half / 2; ++i) {
                const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                          static_cast<double>(half));
                seg[2 * i] = static_cast<T>(std::sin(pos * freq));
                seg[2 * i + 1] = static_cast<T>(std::cos(pos * freq));
            }
        }
    }

    const int64_t hd = cfg.head_dim(), pairs = hd / 2, axis_pairs = pairs / 2;
    out.rope_cos = std::make_shared<TensorData<T>>(Shape{tokens, pairs});
    out.rope_sin = std::make_shared<TensorData<T>>(Shape{tokens, pairs});
    for (int64_t t = 0; t < tokens; ++t) {
        const auto row = static_cast<double>(t / g);
        const auto col = static_cast<double>(t % g);
        for (int64_t p = 0; p < pairs; ++p) {
            const bool row_axis = p < axis_pairs;
            const double pos = row_axis ? row : col;
            const int64_t j = row_axis ? p : p - axis_pairs;
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(2 * axis_pairs));
            const double ang = pos * freq;
            out.rope_cos->v[static_cast<size_t>(t * pairs + p)] = static_cast<T>(std::cos(ang));
            out.rope_sin->v[static_cast<size_t>(t * pairs + p)] = static_cast<T>(std::sin(ang));
        }
    }
    return out;
}

template <typename T>
class Model {
  public:
    using Param = ag::Var<T>;

    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        pos_ = build_positional<T>(cfg_);
    }

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        Model m(cfg);
        Rng rng(seed);
        Rng init_rng = rng.fork("init");
        m.build_params(init_rng);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    const PositionalState<T>& positional() const { return pos_; }

    std::map<std::string, Param>& params() { return params_; }
    const std::map<std::string, Param>& params() const { return params_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    // Per-sample condition vectors from class ids. Empty ids mean "null for
    // every sample" (conditional) or the single global embedding
    // (unconditional). side: "enc" or "dec" (separate embedding tables).
    Param cond_vector(const std::string& side, const std::vector<int>& ids, int64_t batch) const {
        std::vector<int> resolved = resolve_ids(ids, batch);
        return ag::embedding(params_.at("emb." + side), resolved);
    }

    // encode: images [B,H,W,C] in [-1,1] -> latent grid [B,h,w,d] with
    // flattened per-sample norm <= sqrt(L).
    Param encode(const Param& images, const std::vector<int>& ids) const {
        return encode_cond(images, cond_vector("enc", ids, images.shape()[0]));
    }

    Param encode_cond(const Param& images, const Param& cond) const {
        check_image_shape(images.shape());
        const int64_t B = images.shape()[0];
        auto x = patchify(images);
        x = ag::linear(x, params_.at("enc.patch.w"), params_.at("enc.patch.b"));
        x = add_abs_pe(x);
        for (int64_t b = 0; b < cfg_.n_blocks; ++b) x = dit_block(x, cond, "enc.block" + std::to_string(b));
        for (int64_t m = 0; m < cfg_.mixer_depth; ++m) x = mixer_layer(x, "enc.mixer" + std::to_string(m));
        x = ag::linear(x, params_.at("enc.tail.w"), params_.at("enc.tail.b"));
        x = ag::rmsnorm_lastdim(x);
        x = ag::mul_lastdim(x, params_.at("enc.tail.gain"));
        // global rescale only when the flattened norm exceeds sqrt(L)
        x = ag::reshape(x, {B, cfg_.latent_len()});
        x = ag::norm_bound_rows(x, std::sqrt(static_cast<double>(cfg_.latent_len())));
        const auto ls = cfg_.latent_shape();
        return ag::reshape(x, {B, ls.h, ls.w, ls.d});
    }

    // decode: latent [B,h,w,d] (or [B,L]) -> images [B,H,W,C] squashed to [-1,1].
    Param decode(const Param& latent, const std::vector<int>& ids) const {
        const int64_t B = latent.shape()[0];
        return decode_cond(latent, cond_vector("dec", ids, B));
    }

    Param decode_cond(const Param& latent, const Param& cond) const {
        const int64_t B = latent.shape()[0];
        check_latent_shape(latent.shape());
        auto x = ag::reshape(latent, {B, cfg_.tokens(), cfg_.latent_d});
        x = ag::linear(x, params_.at("dec.in.w"), params_.at("dec.in.b"));
        x = add_abs_pe(x);
        for (int64_t m = 0; m < cfg_.mixer_depth; ++m) x = mixer_layer(x, "dec.mixer" + std::to_string(m));
        for (int64_t b = 0; b < cfg_.n_blocks; ++b) x = dit_block(x, cond, "dec.block" + std::to_string(b));
        // final layer: adaLN-modulated norm, zero-init head, smooth squash
        auto ada = ag::linear(ag::silu(cond), params_.at("dec.final.ada.w"), params_.at("dec.final.ada.b"));
        auto parts = ag::chunk_lastdim(ada, 2);
        x = ag::modulate_rows(ag::layernorm_lastdim(x), parts[0], parts[1]);
        x = ag::linear(x, params_.at("dec.head.w"), params_.at("dec.head.b"));
        return ag::tanh_act(unpatchify(x));
    }

    // Exposed for block-level tests.
    Param run_block(const Param& x, const Param& cond, const std::string& prefix) const {
        return dit_block(x, cond, prefix);
    }

    std::map<std::string, TensorData<float>> state_dict() const {
        std::map<std::string, TensorData<float>> out;
        for (const auto& [name, p] : params_) {
            TensorData<float> t;
            t.shape = p.shape();
            t.v.resize(p.val().size());
            for (size_t i = 0; i < t.v.size(); ++i) t.v[i] = static_cast<float>(p.val()[i]);
            out.emplace(name, std::move(t));
        }
        return out;
    }

    void load_state_dict(const std::map<std::string, TensorData<float>>& state) {
        for (auto& [name, p] : params_) {
            const auto it = state.find(name);
            if (it == state.end()) throw CorruptCheckpoint("missing parameter array: " + name);
            if (it->second.shape != p.shape())
                throw ConfigMismatch("parameter shape mismatch for " + name + ": checkpoint " +
                                     shape_str(it->second.shape) + " vs model " + shape_str(p.shape()));
            auto& dst = p.val_mut();
            for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.v[i]);
        }
    }

  private:
    std::vector<int> resolve_ids(const std::vector<int>& ids, int64_t batch) const {
        std::vector<int> resolved;
        if (!cfg_.conditional()) {
            if (!ids.empty()) throw InvalidClass("unconditional model takes no class ids");
            resolved.assign(static_cast<size_t>(batch), 0);
            return resolved;
        }
        if (ids.empty()) {
            resolved.assign(static_cast<size_t>(batch), cfg_.null_id());
            return resolved;
        }
        if (static_cast<int64_t>(ids.size()) != batch)
            throw ConfigMismatch("class id count does not match batch size");
        for (const int id : ids)
            if (id < 0 || id > cfg_.null_id())
                throw InvalidClass("class id " + std::to_string(id) + " outside [0, " +
                                   std::to_string(cfg_.null_id()) + "]");
        return ids;
    }

    void check_image_shape(const Shape& s) const {
        if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != cfg_.channels)
            throw ConfigMismatch("image batch shape " + shape_str(s) + " does not match config");
    }

    void check_latent_shape(const Shape& s) const {
        const auto ls = cfg_.latent_shape();
        const bool grid_form =
            s.size() == 4 && s[1] == ls.h && s[2] == ls.w && s[3] == ls.d;
        const bool flat_form = s.size() == 2 && s[1] == cfg_.latent_len();
        if (!grid_form && !flat_form)
            throw ConfigMismatch("latent shape " + shape_str(s) + " does not match config");
    }

    Param patchify(const Param& images) const {
        const int64_t B = images.shape()[0], g = cfg_.grid(), P = cfg_.patch_size, C = cfg_.channels;
        auto x = ag::reshape(images, {B, g, P, g, P, C});
        x = ag::permute(x, {0, 1, 3, 2, 4, 5});
        return ag::reshape(x, {B, g * g, P * P * C});
    }

    Param unpatchify(const Param& tokens) const {
        const int64_t B = tokens.shape()[0], g = cfg_.grid(), P = cfg_.patch_size, C = cfg_.channels;
        auto x = ag::reshape(tokens, {B, g, g, P, P, C});
        x = ag::permute(x, {0, 1, 3, 2, 4, 5});
        return ag::reshape(x, {B, g * P, g * P, C});
    }

    Param add_abs_pe(const Param& x) const {
        const int64_t B = x.shape()[0];
        std::vector<T> pe;
        pe.reserve(static_cast<size_t>(B) * pos_.abs_pe.v.size());
        for (int64_t b = 0; b < B; ++b) pe.insert(pe.end(), pos_.abs_pe.v.begin(), pos_.abs_pe.v.end());
        return ag::add(x, ag::Var<T>::leaf(x.shape(), std::move(pe)));
    }

    Param attention(const Param& x, const std::string& prefix) const {
        const int64_t B = x.shape()[0], Tk = cfg_.tokens(), H = cfg_.hidden_size;
        const int64_t heads = cfg_.n_heads, hd = cfg_.head_dim();
        auto split = [&](const Param& y) {
            return ag::permute(ag::reshape(y, {B, Tk, heads, hd}), {0, 2, 1, 3});
        };
        auto q = split(ag::linear(x, params_.at(prefix + ".wq"), params_.at(prefix + ".bq")));
        auto k = split(ag::linear(x, params_.at(prefix + ".wk"), params_.at(prefix + ".bk")));
        auto v = split(ag::linear(x, params_.at(prefix + ".wv"), params_.at(prefix + ".bv")));
        q = ag::rope_apply(q, pos_.rope_cos, pos_.rope_sin);
        k = ag::rope_apply(k, pos_.rope_cos, pos_.rope_sin);
        q = ag::reshape(q, {B * heads, Tk, hd});
        k = ag::reshape(k, {B * heads, Tk, hd});
        v = ag::reshape(v, {B * heads, Tk, hd});
        auto att = ag::scale(ag::bmm(q, ag::transpose_last2(k)),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        att = ag::softmax_lastdim(att);
        auto o = ag::bmm(att, v);
        o = ag::reshape(ag::permute(ag::reshape(o, {B, heads, Tk, hd}), {0, 2, 1, 3}), {B, Tk, H});
        return ag::linear(o, params_.at(prefix + ".wo"), params_.at(prefix + ".bo"));
    }

    Param dit_block(const Param& x_in, const Param& cond, const std::string& prefix) const {
        auto ada =
            ag::linear(ag::silu(cond), params_.at(prefix + ".ada.w"), params_.at(prefix + ".ada.b"));
        auto parts = ag::chunk_lastdim(ada, 6);
        auto x = x_in;
        auto h1 = ag::modulate_rows(ag::layernorm_lastdim(x), parts[0], parts[1]);
        x = ag::add(x, ag::gate_rows(attention(h1, prefix), parts[2]));
        auto h2 = ag::modulate_rows(ag::layernorm_lastdim(x), parts[3], parts[4]);
        auto m = ag::linear(h2, params_.at(prefix + ".mlp.w1"), params_.at(prefix + ".mlp.b1"));
        m = ag::linear(ag::gelu(m), params_.at(prefix + ".mlp.w2"), params_.at(prefix + ".mlp.b2"));
        return ag::add(x, ag::gate_rows(m, parts[5]));
    }

    Param mixer_layer(const Param& x_in, const std::string& prefix) const {
        const int64_t B = x_in.shape()[0], Tk = cfg_.tokens();
        // token mixing across the grid
        auto t = ag::permute(ag::layernorm_lastdim(x_in), {0, 2, 1});  // [B,H,T]
        t = ag::linear(t, params_.at(prefix + ".tok.w1"), params_.at(prefix + ".tok.b1"));
        t = ag::linear(ag::gelu(t), params_.at(prefix + ".tok.w2"), params_.at(prefix + ".tok.b2"));
        auto x = ag::add(x_in, ag::permute(t, {0, 2, 1}));
        // channel mixing
        auto c = ag::layernorm_lastdim(x);
        c = ag::linear(c, params_.at(prefix + ".ch.w1"), params_.at(prefix + ".ch.b1"));
        c = ag::linear(ag::gelu(c), params_.at(prefix + ".ch.w2"), params_.at(prefix + ".ch.b2"));
        (void)B;
        (void)Tk;
        return ag::add(x, c);
    }

    void add_param(const std::string& name, Shape shape, Rng& rng, double std_dev) {
        std::vector<T> v(static_cast<size_t>(sphere::numel(shape)));
        if (std_dev > 0.0)
            for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
        params_.emplace(name, Param::leaf(std::move(shape), std::move(v), true));
    }

    void add_const_param(const std::string& name, Shape shape, T fill) {
        std::vector<T> v(static_cast<size_t>(sphere::numel(shape)), fill);
        params_.emplace(name, Param::leaf(std::move(shape), std::move(v), true));
    }

    void build_params(Rng& rng) {
        const int64_t H = cfg_.hidden_size, Tk = cfg_.tokens(), P = cfg_.patch_size;
        const int64_t C = cfg_.channels, d = cfg_.latent_d;
        const double w_std = 0.02;
        const int64_t tok_mlp = Tk;       // token-mixing hidden width
        const int64_t ch_mlp = 2 * H;     // channel-mixing hidden width
        const int64_t mlp = 4 * H;        // transformer MLP width

        const int64_t emb_rows = cfg_.conditional() ? cfg_.n_classes + 1 : 1;
        add_param("emb.enc", {emb_rows, H}, rng, w_std);
        add_param("emb.dec", {emb_rows, H}, rng, w_std);

        add_param("enc.patch.w", {P * P * C, H}, rng, w_std);
        add_const_param("enc.patch.b", {H}, T(0));
        for (const std::string side : {"enc", "dec"}) {
            for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
                const std::string pre = side + ".block" + std::to_string(b);
                for (const char* wn : {".wq", ".wk", ".wv", ".wo"}) add_param(pre + wn, {H, H}, rng, w_std);
                for (const char* bn : {".bq", ".bk", ".bv", ".bo"}) add_const_param(pre + bn, {H}, T(0));
                add_param(pre + ".mlp.w1", {H, mlp}, rng, w_std);
                add_const_param(pre + ".mlp.b1", {mlp}, T(0));
                add_param(pre + ".mlp.w2", {mlp, H}, rng, w_std);
                add_const_param(pre + ".mlp.b2", {H}, T(0));
                // AdaLN-Zero: modulation starts at identity, gates closed
                add_const_param(pre + ".ada.w", {H, 6 * H}, T(0));
                add_const_param(pre + ".ada.b", {6 * H}, T(0));
            }
            for (int64_t m = 0; m < cfg_.mixer_depth; ++m) {
                const std::string pre = side + ".mixer" + std::to_string(m);
                add_param(pre + ".tok.w1", {Tk, tok_mlp}, rng, w_std);
                add_const_param(pre + ".tok.b1", {tok_mlp}, T(0));
                add_param(pre + ".tok.w2", {tok_mlp, Tk}, rng, w_std);
                add_const_param(pre + ".tok.b2", {Tk}, T(0));
                add_param(pre + ".ch.w1", {H, ch_mlp}, rng, w_std);
                add_const_param(pre + ".ch.b1", {ch_mlp}, T(0));
                add_param(pre + ".ch.w2", {ch_mlp, H}, rng, w_std);
                add_const_param(pre + ".ch.b2", {H}, T(0));
            }
        }
        add_param("enc.tail.w", {H, d}, rng, w_std);
        add_const_param("enc.tail.b", {d}, T(0));
        add_const_param("enc.tail.gain", {d}, T(1));

        add_param("dec.in.w", {d, H}, rng, w_std);
        add_const_param("dec.in.b", {H}, T(0));
        add_const_param("dec.final.ada.w", {H, 2 * H}, T(0));
        add_const_param("dec.final.ada.b", {2 * H}, T(0));
        add_const_param("dec.head.w", {H, P * P * C}, T(0));
        add_const_param("dec.head.b", {P * P * C}, T(0));
    }

    ModelConfig cfg_;
    PositionalState<T> pos_;
    std::map<std::string, Param> params_;
};

inline ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "image_size") cfg.image_size = std::stoll(val);
        else if (key == "channels") cfg.channels = std::stoll(val);
        else if (key == "patch_size") cfg.patch_size = std::stoll(val);
        else if (key == "hidden_size") cfg.hidden_size = std::stoll(val);
        else if (key == "n_blocks") cfg.n_blocks = std::stoll(val);
        else if (key == "n_heads") cfg.n_heads = std::stoll(val);
        else if (key == "mixer_depth") cfg.mixer_depth = std::stoll(val);
        else if (key == "latent_d") cfg.latent_d = std::stoll(val);
        else if (key == "n_classes") cfg.n_classes = std::stoll(val);
        else if (key == "cfg_null_drop_prob") cfg.cfg_null_drop_prob = std::stod(val);
        else throw ConfigMismatch("unknown model config key in checkpoint: " + key);
    }
    cfg.validate();
    return cfg;
}

}  // namespace sphere
