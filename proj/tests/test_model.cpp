#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "relusparse/instrument.hpp"
#include "relusparse/model.hpp"

using namespace relusparse;

namespace {

// Independent straight-line reference forward: dense everywhere, position
// major, full attention score matrix, no shared kernels from the library
// beyond scalar activation evaluation.
std::vector<std::vector<double>> reference_forward(const Model& m,
                                                   const std::vector<int>& tokens) {
    const auto& cfg = m.config;
    const std::size_t S = tokens.size(), D = cfg.d_model, H = cfg.n_heads;
    const std::size_t hd = D / H;

    auto norm = [&](const std::vector<double>& x, const std::vector<double>& g,
                    const std::vector<double>& b) {
        std::vector<double> y(D);
        if (cfg.norm_kind == NormKind::LayerNorm) {
            double mu = 0.0;
            for (double v : x) mu += v;
            mu /= D;
            double var = 0.0;
            for (double v : x) var += (v - mu) * (v - mu);
            var /= D;
            for (std::size_t i = 0; i < D; ++i)
                y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
        } else {
            double ms = 0.0;
            for (double v : x) ms += v * v;
            ms /= D;
            for (std::size_t i = 0; i < D; ++i)
                y[i] = x[i] / std::sqrt(ms + 1e-5) * g[i];
        }
        return y;
    };
    auto maybe_act = [&](std::vector<double> v) {
        if (cfg.post_norm_activation)
            for (double& x : v) x = apply_scalar(*cfg.post_norm_activation, x);
        return v;
    };
    auto mv = [](const DenseMatrix& w, const std::vector<double>& x) {
        std::vector<double> y(w.cols, 0.0);
        for (std::size_t j = 0; j < w.cols; ++j)
            for (std::size_t i = 0; i < w.rows; ++i) y[j] += w.at(i, j) * x[i];
        return y;
    };

    std::vector<std::vector<double>> h(S, std::vector<double>(D));
    for (std::size_t t = 0; t < S; ++t)
        for (std::size_t i = 0; i < D; ++i)
            h[t][i] = m.tok_emb.at(tokens[t], i) + m.pos_emb.at(t, i);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = m.layers[l];
        std::vector<std::vector<double>> q(S), k(S), v(S);
        for (std::size_t t = 0; t < S; ++t) {
            const auto a = maybe_act(norm(h[t], lw.norm1_scale, lw.norm1_offset));
            q[t] = mv(lw.wq, a);
            k[t] = mv(lw.wk, a);
            v[t] = mv(lw.wv, a);
        }
        for (std::size_t t = 0; t < S; ++t) {
            std::vector<double> ctx(D, 0.0);
            for (std::size_t head = 0; head < H; ++head) {
                std::vector<double> score(t + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= t; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < hd; ++i)
                        s += q[t][head * hd + i] * k[j][head * hd + i];
                    score[j] = s / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, score[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= t; ++j) z += std::exp(score[j] - mx);
                for (std::size_t j = 0; j <= t; ++j) {
                    const double p = std::exp(score[j] - mx) / z;
                    for (std::size_t i = 0; i < hd; ++i)
                        ctx[head * hd + i] += p * v[j][head * hd + i];
                }
            }
            const auto o = mv(lw.wo, ctx);
            for (std::size_t i = 0; i < D; ++i) h[t][i] += o[i];
        }
        for (std::size_t t = 0; t < S; ++t) {
            const auto f = maybe_act(norm(h[t], lw.norm2_scale, lw.norm2_offset));
            std::vector<double> din;
            if (cfg.ffn_kind == FfnKind::Gated) {
                const auto gp = mv(lw.w_gate, f);
                const auto up = mv(lw.w_up, f);
                din.resize(cfg.d_ffn);
                for (std::size_t i = 0; i < cfg.d_ffn; ++i)
                    din[i] = apply_scalar(cfg.ffn_activation, gp[i]) * up[i];
            } else {
                din = mv(lw.w_up, f);
                for (double& x : din) x = apply_scalar(cfg.ffn_activation, x);
            }
            const auto out = mv(lw.w_down, din);
            for (std::size_t i = 0; i < D; ++i) h[t][i] += out[i];
        }
    }

    std::vector<std::vector<double>> logits(S);
    for (std::size_t t = 0; t < S; ++t) {
        const auto hf = norm(h[t], m.final_norm_scale, m.final_norm_offset);
        if (cfg.tie_head) {
            logits[t].assign(cfg.vocab_size, 0.0);
            for (std::size_t vtok = 0; vtok < cfg.vocab_size; ++vtok)
                for (std::size_t i = 0; i < D; ++i)
                    logits[t][vtok] += m.tok_emb.at(vtok, i) * hf[i];
        } else {
            logits[t] = mv(m.lm_head, hf);
        }
    }
    return logits;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng() % vocab);
    return t;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ffn = 24;
    c.vocab_size = 31;
    c.max_seq = 20;
    return c;
}

void check_logits_equal(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
        REQUIRE(a[t].size() == b[t].size());
        for (std::size_t v = 0; v < a[t].size(); ++v)
            CHECK(a[t][v] == doctest::Approx(b[t][v]).epsilon(1e-9).scale(1.0));
    }
}

}  // namespace

TEST_CASE("forward matches the straight-line reference on varied configs") {
    std::size_t variant = 0;
    for (FfnKind ffn : {FfnKind::Plain, FfnKind::Gated}) {
        for (NormKind norm : {NormKind::LayerNorm, NormKind::RmsNorm}) {
            for (bool tie : {true, false}) {
                ModelConfig c = tiny_config();
                c.ffn_kind = ffn;
                c.norm_kind = norm;
                c.tie_head = tie;
                const Model m = init_random(c, 100 + variant);
                const auto toks = random_tokens(9, c.vocab_size, 200 + variant);
                check_logits_equal(forward(m, toks), reference_forward(m, toks), 1e-9);
                ++variant;
            }
        }
    }
}

TEST_CASE("forward matches the reference after stage-1 and stage-2 surgery") {
    const Model base = init_random(tiny_config(), 42);
    const auto toks = random_tokens(10, base.config.vocab_size, 43);
    for (SurgeryStage stage : {SurgeryStage::Stage1, SurgeryStage::Stage2}) {
        const Model m = relufy(base, stage);
        check_logits_equal(forward(m, toks), reference_forward(m, toks), 1e-9);
    }
}

TEST_CASE("sparsification at tau 0 is lossless for relu models") {
    const Model m = relufy(init_random(tiny_config(), 7), SurgeryStage::Stage2);
    const auto toks = random_tokens(12, m.config.vocab_size, 8);
    ForwardOptions sparse_opt;
    sparse_opt.tau = 0.0;
    check_logits_equal(forward(m, toks, sparse_opt), forward(m, toks), 1e-12);
}

TEST_CASE("relufy changes only the activation config") {
    const Model base = init_random(tiny_config(), 3);
    const Model s1 = relufy(base, SurgeryStage::Stage1);
    CHECK(s1.config.ffn_activation == ActivationSpec::relu());
    CHECK_FALSE(s1.config.post_norm_activation.has_value());
    const Model s2 = relufy(base, SurgeryStage::Stage2);
    CHECK(s2.config.post_norm_activation == ActivationSpec::relu());

    auto& mb = const_cast<Model&>(base);
    auto& m2 = const_cast<Model&>(s2);
    const auto rb = tensor_refs(mb), r2 = tensor_refs(m2);
    REQUIRE(rb.size() == r2.size());
    for (std::size_t i = 0; i < rb.size(); ++i) {
        CHECK(rb[i].name == r2[i].name);
        REQUIRE(rb[i].size == r2[i].size);
        for (std::size_t j = 0; j < rb[i].size; ++j) CHECK(rb[i].data[j] == r2[i].data[j]);
    }
}

TEST_CASE("kv-cache generation matches full re-forwarding") {
    ModelConfig c = tiny_config();
    const Model m = init_random(c, 55);
    const auto prompt = random_tokens(5, c.vocab_size, 56);

    const auto greedy = generate(m, prompt, 8, GenerationMode::greedy_mode());
    REQUIRE(greedy.size() == 13);
    // oracle: re-run the full forward for each step and argmax
    std::vector<int> expect(prompt.begin(), prompt.end());
    for (int step = 0; step < 8; ++step) {
        const auto logits = forward(m, expect);
        const auto& last = logits.back();
        expect.push_back(static_cast<int>(
            std::max_element(last.begin(), last.end()) - last.begin()));
    }
    CHECK(greedy == expect);

    // sampled generation is deterministic given the seed
    const auto s1 = generate(m, prompt, 6, GenerationMode::sampled(0.8, 99));
    const auto s2 = generate(m, prompt, 6, GenerationMode::sampled(0.8, 99));
    CHECK(s1 == s2);
    const auto s3 = generate(m, prompt, 6, GenerationMode::sampled(0.8, 100));
    CHECK(s1 != s3);  // overwhelmingly likely for 6 tokens of a near-uniform model
}

TEST_CASE("executed mac counts match the analytic accounting on a plain toy") {
    ModelConfig c = tiny_config();
    c.d_ffn = 64;
    const Model m = relufy(init_random(c, 21), SurgeryStage::Stage1);
    const auto toks = random_tokens(16, c.vocab_size, 22);

    SparsityRecorder rec;
    MacCounter counter;
    ForwardOptions opt;
    opt.counter = &counter;
    opt.hooks = &rec.hooks();
    forward(m, toks, opt);

    ArchSpec arch{"toy", c.n_layers, c.d_model, c.d_ffn, c.vocab_size, FfnKind::Plain, true};
    SparsityProfile profile;
    profile.qkv_in = rec.report().site_mean("qkv_in");
    profile.up_in = rec.report().site_mean("up_in");
    profile.down_in = rec.report().site_mean("down_in");
    const double analytic = effective_macs(arch, profile).effective_total;
    const double executed = static_cast<double>(counter.total_macs()) / toks.size();
    CHECK(std::abs(executed - analytic) / analytic < 0.02);
}

TEST_CASE("checkpoint round trip is exact and byte stable") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "relusparse_test_ckpt";
    fs::create_directories(dir);
    const auto path = (dir / "m.rlfc").string();
    const auto path2 = (dir / "m2.rlfc").string();

    ModelConfig c = tiny_config();
    c.ffn_kind = FfnKind::Gated;
    c.tie_head = false;
    const Model m = init_random(c, 77);
    save(m, path);
    const Model back = load(path);
    CHECK(back.config == m.config);

    auto& ma = const_cast<Model&>(m);
    auto& mb = const_cast<Model&>(back);
    const auto ra = tensor_refs(ma), rb = tensor_refs(mb);
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i)
        for (std::size_t j = 0; j < ra[i].size; ++j) CHECK(ra[i].data[j] == rb[i].data[j]);

    save(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), {});
    const std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    CHECK(b1.substr(0, 4) == "RLFC");
}

TEST_CASE("checkpoint error kinds are distinguished") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "relusparse_test_ckpt";
    fs::create_directories(dir);
    const auto good = (dir / "good.rlfc").string();
    const Model m = init_random(tiny_config(), 1);
    save(m, good);
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();

    auto write_variant = [&](const std::string& name, const std::string& content) {
        const auto p = (dir / name).string();
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        os << content;
        return p;
    };
    auto kind_of = [](const std::string& path) {
        try {
            load(path);
        } catch (const CheckpointError& e) {
            return e.kind();
        }
        return CheckpointError::Kind::Io;  // unreachable for the bad variants
    };

    CHECK(kind_of((dir / "missing.rlfc").string()) == CheckpointError::Kind::Io);

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK(kind_of(write_variant("magic.rlfc", bad_magic)) == CheckpointError::Kind::Magic);

    std::string bad_version = bytes;
    bad_version[4] = 9;
    CHECK(kind_of(write_variant("version.rlfc", bad_version)) ==
          CheckpointError::Kind::Version);

    CHECK(kind_of(write_variant("trunc.rlfc", bytes.substr(0, bytes.size() / 2))) ==
          CheckpointError::Kind::Truncated);

    // flip one config byte inside the JSON so it no longer parses
    std::string bad_cfg = bytes;
    bad_cfg[9] = '!';  // first config character, after magic+version+length
    CHECK(kind_of(write_variant("cfg.rlfc", bad_cfg)) == CheckpointError::Kind::BadConfig);

    // shrink the first tensor's element count field
    std::string bad_shape = bytes;
    const std::uint32_t cfg_len = static_cast<std::uint8_t>(bytes[5]) |
                                  (static_cast<std::uint8_t>(bytes[6]) << 8) |
                                  (static_cast<std::uint8_t>(bytes[7]) << 16) |
                                  (static_cast<std::uint8_t>(bytes[8]) << 24);
    const std::size_t tensor_hdr = 9 + cfg_len;
    bad_shape[tensor_hdr] = static_cast<char>(bad_shape[tensor_hdr] + 1);
    CHECK(kind_of(write_variant("shape.rlfc", bad_shape)) ==
          CheckpointError::Kind::ShapeMismatch);
}

TEST_CASE("config json round trip") {
    ModelConfig c = tiny_config();
    c.ffn_kind = FfnKind::Gated;
    c.norm_kind = NormKind::RmsNorm;
    c.ffn_activation = ActivationSpec::gated(1.7);
    c.post_norm_activation = ActivationSpec::relu();
    c.tie_head = false;
    CHECK(ModelConfig::from_json(c.to_json()) == c);

    ModelConfig bad = c;
    bad.d_model = 15;  // not divisible by n_heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("forward input validation") {
    const Model m = init_random(tiny_config(), 5);
    std::vector<int> too_long(m.config.max_seq + 1, 0);
    CHECK_THROWS_AS(forward(m, too_long), std::invalid_argument);
    std::vector<int> bad_tok = {0, static_cast<int>(m.config.vocab_size)};
    CHECK_THROWS_AS(forward(m, bad_tok), std::invalid_argument);
    CHECK_THROWS_AS(generate(m, std::vector<int>{}, 3, GenerationMode::greedy_mode()),
                    std::invalid_argument);
}
