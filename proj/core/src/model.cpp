#include "relusparse/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace relusparse {

namespace {

constexpr double kNormEps = 1e-5;
constexpr char kMagic[4] = {'R', 'L', 'F', 'C'};
constexpr std::uint8_t kVersion = 1;

std::vector<double> apply_norm(std::span<const double> x, std::span<const double> scale,
                               std::span<const double> offset, NormKind kind) {
    const std::size_t n = x.size();
    std::vector<double> y(n);
    if (kind == NormKind::LayerNorm) {
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        for (std::size_t i = 0; i < n; ++i)
            y[i] = (x[i] - mean) * inv * scale[i] + offset[i];
    } else {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        ms /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + kNormEps);
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv * scale[i];
    }
    return y;
}

nlohmann::json activation_to_json(const ActivationSpec& spec) {
    return nlohmann::json::parse(spec.to_json());
}

ActivationSpec activation_from_json(const nlohmann::json& j) {
    return ActivationSpec::from_json(j.dump());
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ffn == 0 || vocab_size == 0 ||
        max_seq == 0)
        throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["d_ffn"] = d_ffn;
    j["vocab_size"] = vocab_size;
    j["max_seq"] = max_seq;
    j["ffn_kind"] = ffn_kind == FfnKind::Gated ? "gated" : "plain";
    j["norm_kind"] = norm_kind == NormKind::RmsNorm ? "rmsnorm" : "layernorm";
    j["ffn_activation"] = activation_to_json(ffn_activation);
    if (post_norm_activation)
        j["post_norm_activation"] = activation_to_json(*post_norm_activation);
    j["tie_head"] = tie_head;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ffn = j.at("d_ffn").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    const std::string fk = j.at("ffn_kind").get<std::string>();
    if (fk != "plain" && fk != "gated")
        throw std::invalid_argument("ModelConfig: unknown ffn_kind '" + fk + "'");
    c.ffn_kind = fk == "gated" ? FfnKind::Gated : FfnKind::Plain;
    const std::string nk = j.at("norm_kind").get<std::string>();
    if (nk != "layernorm" && nk != "rmsnorm")
        throw std::invalid_argument("ModelConfig: unknown norm_kind '" + nk + "'");
    c.norm_kind = nk == "rmsnorm" ? NormKind::RmsNorm : NormKind::LayerNorm;
    c.ffn_activation = activation_from_json(j.at("ffn_activation"));
    if (j.contains("post_norm_activation"))
        c.post_norm_activation = activation_from_json(j.at("post_norm_activation"));
    c.tie_head = j.at("tie_head").get<bool>();
    c.validate();
    return c;
}

std::size_t Model::n_params() const {
    std::size_t n = 0;
    for (const auto& t : tensor_refs(const_cast<Model&>(*this))) n += t.size;
    return n;
}

std::vector<TensorRef> tensor_refs(Model& m) {
    std::vector<TensorRef> refs;
    auto vec = [&](const std::string& name, std::vector<double>& v) {
        refs.push_back({name, v.data(), v.size()});
    };
    auto mat = [&](const std::string& name, DenseMatrix& w) {
        refs.push_back({name, w.data.data(), w.data.size()});
    };
    mat("tok_emb", m.tok_emb);
    mat("pos_emb", m.pos_emb);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + "/";
        auto& lw = m.layers[l];
        vec(p + "norm1_scale", lw.norm1_scale);
        vec(p + "norm1_offset", lw.norm1_offset);
        mat(p + "wq", lw.wq);
        mat(p + "wk", lw.wk);
        mat(p + "wv", lw.wv);
        mat(p + "wo", lw.wo);
        vec(p + "norm2_scale", lw.norm2_scale);
        vec(p + "norm2_offset", lw.norm2_offset);
        if (m.config.ffn_kind == FfnKind::Gated) mat(p + "w_gate", lw.w_gate);
        mat(p + "w_up", lw.w_up);
        mat(p + "w_down", lw.w_down);
    }
    vec("final_norm_scale", m.final_norm_scale);
    vec("final_norm_offset", m.final_norm_offset);
    if (!m.config.tie_head) mat("lm_head", m.lm_head);
    return refs;
}

Model init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    const std::size_t d = config.d_model;
    m.tok_emb = DenseMatrix(config.vocab_size, d);
    m.pos_emb = DenseMatrix(config.max_seq, d);
    m.layers.resize(config.n_layers);
    for (auto& lw : m.layers) {
        lw.norm1_scale.assign(d, 1.0);
        lw.norm1_offset.assign(d, 0.0);
        lw.wq = DenseMatrix(d, d);
        lw.wk = DenseMatrix(d, d);
        lw.wv = DenseMatrix(d, d);
        lw.wo = DenseMatrix(d, d);
        lw.norm2_scale.assign(d, 1.0);
        lw.norm2_offset.assign(d, 0.0);
        if (config.ffn_kind == FfnKind::Gated) lw.w_gate = DenseMatrix(d, config.d_ffn);
        lw.w_up = DenseMatrix(d, config.d_ffn);
        lw.w_down = DenseMatrix(config.d_ffn, d);
    }
    m.final_norm_scale.assign(d, 1.0);
    m.final_norm_offset.assign(d, 0.0);
    if (!config.tie_head) m.lm_head = DenseMatrix(d, config.vocab_size);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](DenseMatrix& w, std::size_t fan_in) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& x : w.data) x = normal(rng) * scale;
    };
    fill(m.tok_emb, d);
    fill(m.pos_emb, d);
    for (auto& lw : m.layers) {
        fill(lw.wq, d);
        fill(lw.wk, d);
        fill(lw.wv, d);
        fill(lw.wo, d);
        if (config.ffn_kind == FfnKind::Gated) fill(lw.w_gate, d);
        fill(lw.w_up, d);
        fill(lw.w_down, config.d_ffn);
    }
    if (!config.tie_head) fill(m.lm_head, d);
    return m;
}

Model relufy(const Model& model, SurgeryStage stage) {
    Model out = model;
    out.config.ffn_activation = ActivationSpec::relu();
    if (stage == SurgeryStage::Stage2)
        out.config.post_norm_activation = ActivationSpec::relu();
    return out;
}

namespace {

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.size() > cfg.max_seq)
        throw std::invalid_argument("forward: sequence longer than max_seq");
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw std::invalid_argument("forward: token out of range");
}

std::vector<double> head_logits(const Model& m, std::span<const double> hf,
                                const ForwardOptions& opt) {
    const auto& cfg = m.config;
    std::vector<double> logits(cfg.vocab_size, 0.0);
    if (cfg.tie_head) {
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
            const double* er = m.tok_emb.row(v);
            double acc = 0.0;
            for (std::size_t i = 0; i < cfg.d_model; ++i) acc += er[i] * hf[i];
            logits[v] = acc;
        }
        if (opt.counter)
            opt.counter->add_macs("head",
                                  static_cast<std::uint64_t>(cfg.vocab_size) * cfg.d_model);
    } else {
        logits = matvec_dense(m.lm_head, hf, opt.counter, "head");
    }
    return logits;
}

/// Attention over a window of cached per-position K/V for one query.
std::vector<double> attend(const ModelConfig& cfg, std::span<const double> q,
                           const std::vector<std::vector<double>>& keys,
                           const std::vector<std::vector<double>>& values,
                           std::size_t upto /* inclusive */) {
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(cfg.d_model, 0.0);
    std::vector<double> scores(upto + 1);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t j = 0; j <= upto; ++j) {
            double s = 0.0;
            const double* kj = keys[j].data() + off;
            for (std::size_t i = 0; i < hd; ++i) s += q[off + i] * kj[i];
            scores[j] = s * scale;
        }
        const auto probs = softmax(std::span<const double>(scores.data(), upto + 1));
        for (std::size_t j = 0; j <= upto; ++j) {
            const double p = probs[j];
            const double* vj = values[j].data() + off;
            for (std::size_t i = 0; i < hd; ++i) out[off + i] += p * vj[i];
        }
    }
    return out;
}

}  // namespace

std::vector<std::vector<double>> forward(const Model& model, std::span<const int> tokens,
                                         const ForwardOptions& opt) {
    const auto& cfg = model.config;
    check_tokens(cfg, tokens);
    const std::size_t seq = tokens.size();
    const std::size_t d = cfg.d_model;

    std::vector<std::vector<double>> h(seq);
    for (std::size_t t = 0; t < seq; ++t) {
        h[t].resize(d);
        const double* te = model.tok_emb.row(static_cast<std::size_t>(tokens[t]));
        const double* pe = model.pos_emb.row(t);
        for (std::size_t i = 0; i < d; ++i) h[t][i] = te[i] + pe[i];
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = model.layers[l];
        const std::string site = "layer" + std::to_string(l) + "/";

        // attention sublayer
        std::vector<std::vector<double>> qs(seq), ks(seq), vs(seq);
        for (std::size_t t = 0; t < seq; ++t) {
            auto a = apply_norm(h[t], lw.norm1_scale, lw.norm1_offset, cfg.norm_kind);
            if (cfg.post_norm_activation) a = relusparse::apply(*cfg.post_norm_activation, a);
            if (opt.hooks && opt.hooks->on_site_input)
                opt.hooks->on_site_input(l, "qkv_in", a);
            const SparseVec sa = sparsify(a, opt.tau);
            qs[t] = matvec_sparse(lw.wq, sa, opt.counter, site + "qkv");
            ks[t] = matvec_sparse(lw.wk, sa, opt.counter, site + "qkv");
            vs[t] = matvec_sparse(lw.wv, sa, opt.counter, site + "qkv");
        }
        for (std::size_t t = 0; t < seq; ++t) {
            const auto ctx = attend(cfg, qs[t], ks, vs, t);
            const auto o = matvec_dense(lw.wo, ctx, opt.counter, site + "attn_out");
            for (std::size_t i = 0; i < d; ++i) h[t][i] += o[i];
        }

        // FFN sublayer
        for (std::size_t t = 0; t < seq; ++t) {
            auto f = apply_norm(h[t], lw.norm2_scale, lw.norm2_offset, cfg.norm_kind);
            if (cfg.post_norm_activation) f = relusparse::apply(*cfg.post_norm_activation, f);
            if (opt.hooks && opt.hooks->on_site_input)
                opt.hooks->on_site_input(l, "up_in", f);
            const SparseVec sf = sparsify(f, opt.tau);

            std::vector<double> down_in;
            if (cfg.ffn_kind == FfnKind::Gated) {
                const auto gate_pre = matvec_sparse(lw.w_gate, sf, opt.counter, site + "gate");
                if (opt.hooks && opt.hooks->on_ffn_preact)
                    opt.hooks->on_ffn_preact(l, gate_pre);
                const auto gate_act = relusparse::apply(cfg.ffn_activation, gate_pre);
                const auto up = matvec_sparse(lw.w_up, sf, opt.counter, site + "up");
                down_in = hadamard(gate_act, up);
            } else {
                const auto up_pre = matvec_sparse(lw.w_up, sf, opt.counter, site + "up");
                if (opt.hooks && opt.hooks->on_ffn_preact)
                    opt.hooks->on_ffn_preact(l, up_pre);
                down_in = relusparse::apply(cfg.ffn_activation, up_pre);
            }
            if (opt.hooks && opt.hooks->on_site_input)
                opt.hooks->on_site_input(l, "down_in", down_in);
            if (opt.down_filter) opt.down_filter(l, t, down_in);
            const SparseVec sd = sparsify(down_in, opt.tau);
            const auto out = matvec_sparse(lw.w_down, sd, opt.counter, site + "down");
            for (std::size_t i = 0; i < d; ++i) h[t][i] += out[i];
        }
    }

    std::vector<std::vector<double>> logits(seq);
    for (std::size_t t = 0; t < seq; ++t) {
        const auto hf =
            apply_norm(h[t], model.final_norm_scale, model.final_norm_offset, cfg.norm_kind);
        logits[t] = head_logits(model, hf, opt);
    }
    return logits;
}

namespace {

struct KvCache {
    // per layer, per position
    std::vector<std::vector<std::vector<double>>> keys, values;
    std::size_t len = 0;
};

std::vector<double> forward_step(const Model& model, int token, std::size_t pos,
                                 KvCache& cache, const ForwardOptions& opt) {
    const auto& cfg = model.config;
    const std::size_t d = cfg.d_model;
    std::vector<double> h(d);
    const double* te = model.tok_emb.row(static_cast<std::size_t>(token));
    const double* pe = model.pos_emb.row(pos);
    for (std::size_t i = 0; i < d; ++i) h[i] = te[i] + pe[i];

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = model.layers[l];
        const std::string site = "layer" + std::to_string(l) + "/";
        auto a = apply_norm(h, lw.norm1_scale, lw.norm1_offset, cfg.norm_kind);
        if (cfg.post_norm_activation) a = relusparse::apply(*cfg.post_norm_activation, a);
        if (opt.hooks && opt.hooks->on_site_input) opt.hooks->on_site_input(l, "qkv_in", a);
        const SparseVec sa = sparsify(a, opt.tau);
        auto q = matvec_sparse(lw.wq, sa, opt.counter, site + "qkv");
        cache.keys[l].push_back(matvec_sparse(lw.wk, sa, opt.counter, site + "qkv"));
        cache.values[l].push_back(matvec_sparse(lw.wv, sa, opt.counter, site + "qkv"));

        const auto ctx = attend(cfg, q, cache.keys[l], cache.values[l], pos);
        const auto o = matvec_dense(lw.wo, ctx, opt.counter, site + "attn_out");
        for (std::size_t i = 0; i < d; ++i) h[i] += o[i];

        auto f = apply_norm(h, lw.norm2_scale, lw.norm2_offset, cfg.norm_kind);
        if (cfg.post_norm_activation) f = relusparse::apply(*cfg.post_norm_activation, f);
        if (opt.hooks && opt.hooks->on_site_input) opt.hooks->on_site_input(l, "up_in", f);
        const SparseVec sf = sparsify(f, opt.tau);

        std::vector<double> down_in;
        if (cfg.ffn_kind == FfnKind::Gated) {
            const auto gate_pre = matvec_sparse(lw.w_gate, sf, opt.counter, site + "gate");
            if (opt.hooks && opt.hooks->on_ffn_preact) opt.hooks->on_ffn_preact(l, gate_pre);
            const auto gate_act = relusparse::apply(cfg.ffn_activation, gate_pre);
            const auto up = matvec_sparse(lw.w_up, sf, opt.counter, site + "up");
            down_in = hadamard(gate_act, up);
        } else {
            const auto up_pre = matvec_sparse(lw.w_up, sf, opt.counter, site + "up");
            if (opt.hooks && opt.hooks->on_ffn_preact) opt.hooks->on_ffn_preact(l, up_pre);
            down_in = relusparse::apply(cfg.ffn_activation, up_pre);
        }
        if (opt.hooks && opt.hooks->on_site_input)
            opt.hooks->on_site_input(l, "down_in", down_in);
        if (opt.down_filter) opt.down_filter(l, pos, down_in);
        const SparseVec sd = sparsify(down_in, opt.tau);
        const auto out = matvec_sparse(lw.w_down, sd, opt.counter, site + "down");
        for (std::size_t i = 0; i < d; ++i) h[i] += out[i];
    }

    const auto hf = apply_norm(h, model.final_norm_scale, model.final_norm_offset,
                               cfg.norm_kind);
    return head_logits(model, hf, opt);
}

}  // namespace

std::vector<int> generate(const Model& model, std::span<const int> prompt,
                          std::size_t n_new, const GenerationMode& mode,
                          const ForwardOptions& opt) {
    const auto& cfg = model.config;
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
    check_tokens(cfg, prompt);
    if (prompt.size() + n_new > cfg.max_seq)
        throw std::invalid_argument("generate: prompt + n_new exceeds max_seq");

    std::vector<int> out(prompt.begin(), prompt.end());
    if (n_new == 0) return out;

    KvCache cache;
    cache.keys.resize(cfg.n_layers);
    cache.values.resize(cfg.n_layers);

    std::mt19937_64 rng(mode.seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    std::vector<double> logits;
    for (std::size_t pos = 0; pos < out.size(); ++pos)
        logits = forward_step(model, out[pos], pos, cache, opt);

    for (std::size_t step = 0; step < n_new; ++step) {
        int next;
        if (mode.greedy) {
            next = static_cast<int>(
                std::max_element(logits.begin(), logits.end()) - logits.begin());
        } else {
            std::vector<double> scaled(logits.size());
            for (std::size_t i = 0; i < logits.size(); ++i)
                scaled[i] = logits[i] / mode.temperature;
            const auto probs = softmax(scaled);
            const double u = uniform(rng);
            double cum = 0.0;
            next = static_cast<int>(probs.size()) - 1;
            for (std::size_t i = 0; i < probs.size(); ++i) {
                cum += probs[i];
                if (u < cum) {
                    next = static_cast<int>(i);
                    break;
                }
            }
        }
        out.push_back(next);
        if (step + 1 < n_new)
            logits = forward_step(model, next, out.size() - 1, cache, opt);
    }
    return out;
}

namespace {

void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CheckpointError(CheckpointError::Kind::Truncated, "truncated header field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

void save(const Model& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    const std::string cfg = model.config.to_json();
    write_u32_le(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const auto& t : tensor_refs(const_cast<Model&>(model))) {
        write_u32_le(os, static_cast<std::uint32_t>(t.size));
        os.write(reinterpret_cast<const char*>(t.data),
                 static_cast<std::streamsize>(t.size * sizeof(double)));
    }
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "write failed: " + path);
}

Model load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::Magic, "bad magic bytes");
    const int version = is.get();
    if (version != kVersion)
        throw CheckpointError(CheckpointError::Kind::Version,
                              "unsupported version " + std::to_string(version));
    const std::uint32_t cfg_len = read_u32_le(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);
    if (!is) throw CheckpointError(CheckpointError::Kind::Truncated, "truncated config");
    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_json(cfg_text);
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::BadConfig, e.what());
    }
    Model m = init_random(cfg, 0);  // allocates the right shapes
    for (const auto& t : tensor_refs(m)) {
        const std::uint32_t count = read_u32_le(is);
        if (count != t.size)
            throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                                  "tensor " + t.name + ": expected " +
                                      std::to_string(t.size) + " elements, file has " +
                                      std::to_string(count));
        is.read(reinterpret_cast<char*>(t.data),
                static_cast<std::streamsize>(t.size * sizeof(double)));
        if (!is)
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  "tensor " + t.name + " truncated");
    }
    return m;
}

}  // namespace relusparse
