#include "relusparse/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "relusparse/instrument.hpp"

namespace relusparse {

void TrainConfig::validate() const {
    if (steps == 0 || batch_size == 0 || seq_len == 0)
        throw std::invalid_argument("TrainConfig: counts must be positive");
    if (!(adamw.lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["seq_len"] = seq_len;
    j["lr"] = adamw.lr;
    j["beta1"] = adamw.beta1;
    j["beta2"] = adamw.beta2;
    j["eps"] = adamw.eps;
    j["weight_decay"] = adamw.weight_decay;
    j["seed"] = seed;
    j["eval_interval"] = eval_interval;
    j["eval_batches"] = eval_batches;
    j["histogram_snapshot_steps"] = histogram_snapshot_steps;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.adamw.lr = j.value("lr", c.adamw.lr);
    c.adamw.beta1 = j.value("beta1", c.adamw.beta1);
    c.adamw.beta2 = j.value("beta2", c.adamw.beta2);
    c.adamw.eps = j.value("eps", c.adamw.eps);
    c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_batches = j.value("eval_batches", c.eval_batches);
    if (j.contains("histogram_snapshot_steps"))
        c.histogram_snapshot_steps =
            j.at("histogram_snapshot_steps").get<std::vector<std::size_t>>();
    c.validate();
    return c;
}

Corpus Corpus::from_bytes(std::vector<std::uint8_t> bytes, double valid_fraction) {
    if (bytes.size() < 64) throw std::invalid_argument("Corpus: too short");
    if (!(valid_fraction > 0.0 && valid_fraction < 1.0))
        throw std::invalid_argument("Corpus: valid_fraction must be in (0,1)");
    Corpus c;
    c.bytes = std::move(bytes);
    const auto split =
        c.bytes.size() - static_cast<std::size_t>(valid_fraction * c.bytes.size());
    c.train_begin = 0;
    c.train_end = split;
    c.valid_begin = split;
    c.valid_end = c.bytes.size();
    if (c.valid_size() < 2) throw std::invalid_argument("Corpus: validation split empty");
    return c;
}

Corpus Corpus::from_file(const std::string& path, double valid_fraction) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("Corpus: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return from_bytes(std::move(bytes), valid_fraction);
}

std::vector<int> Corpus::window(bool from_valid, std::size_t offset,
                                std::size_t seq_len) const {
    const std::size_t begin = from_valid ? valid_begin : train_begin;
    const std::size_t end = from_valid ? valid_end : train_end;
    if (begin + offset + seq_len + 1 > end)
        throw std::invalid_argument("Corpus::window: out of range");
    std::vector<int> w(seq_len + 1);
    for (std::size_t i = 0; i <= seq_len; ++i)
        w[i] = static_cast<int>(bytes[begin + offset + i]);
    return w;
}

Batch sample_batch(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len,
                   std::mt19937_64& rng) {
    if (corpus.train_size() < seq_len + 2)
        throw std::invalid_argument("sample_batch: corpus too short for seq_len");
    std::uniform_int_distribution<std::size_t> offs(0, corpus.train_size() - seq_len - 2);
    Batch b;
    b.sequences.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i)
        b.sequences.push_back(corpus.window(false, offs(rng), seq_len));
    return b;
}

std::vector<Batch> validation_batches(const Corpus& corpus, std::size_t n_batches,
                                      std::size_t batch_size, std::size_t seq_len) {
    const std::size_t n_windows = n_batches * batch_size;
    if (corpus.valid_size() < seq_len + 2)
        throw std::invalid_argument("validation_batches: validation split too short");
    const std::size_t span = corpus.valid_size() - seq_len - 2;
    std::vector<Batch> batches(n_batches);
    for (std::size_t w = 0; w < n_windows; ++w) {
        const std::size_t off = n_windows == 1 ? 0 : span * w / (n_windows - 1);
        batches[w / batch_size].sequences.push_back(corpus.window(true, off, seq_len));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// cached forward / reverse-mode backward
// ---------------------------------------------------------------------------

namespace {

constexpr double kNormEps = 1e-5;

struct NormCache {
    std::vector<double> xhat;
    double inv = 0.0;
};

void norm_fwd(std::span<const double> x, std::span<const double> scale,
              std::span<const double> offset, NormKind kind, NormCache& c,
              std::vector<double>& out) {
    const std::size_t n = x.size();
    c.xhat.resize(n);
    out.resize(n);
    if (kind == NormKind::LayerNorm) {
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        c.inv = 1.0 / std::sqrt(var + kNormEps);
        for (std::size_t i = 0; i < n; ++i) {
            c.xhat[i] = (x[i] - mean) * c.inv;
            out[i] = c.xhat[i] * scale[i] + offset[i];
        }
    } else {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        ms /= static_cast<double>(n);
        c.inv = 1.0 / std::sqrt(ms + kNormEps);
        for (std::size_t i = 0; i < n; ++i) {
            c.xhat[i] = x[i] * c.inv;
            out[i] = c.xhat[i] * scale[i];
        }
    }
}

void norm_bwd(const NormCache& c, std::span<const double> scale,
              std::span<const double> dy, NormKind kind, double* dx, double* dscale,
              double* doffset) {
    const std::size_t n = dy.size();
    std::vector<double> dxhat(n);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dxhat[i] = dy[i] * scale[i];
        dscale[i] += dy[i] * c.xhat[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * c.xhat[i];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    if (kind == NormKind::LayerNorm) {
        for (std::size_t i = 0; i < n; ++i) {
            doffset[i] += dy[i];
            dx[i] += c.inv * (dxhat[i] - mean_dxhat - c.xhat[i] * mean_dxhat_xhat);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            dx[i] += c.inv * (dxhat[i] - c.xhat[i] * mean_dxhat_xhat);
    }
}

// y[j] = sum_i x[i] * W[i,j]
void mv(const DenseMatrix& w, const double* x, double* y) {
    std::fill(y, y + w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wr = w.row(i);
        for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
    }
}

// dx[i] += sum_j W[i,j] dy[j]; dW[i,j] += x[i] dy[j]
void mv_bwd(const DenseMatrix& w, const double* x, const double* dy, double* dx,
            DenseMatrix& dw) {
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        double* dwr = dw.data.data() + i * w.cols;
        const double xi = x[i];
        double acc = 0.0;
        for (std::size_t j = 0; j < w.cols; ++j) {
            acc += wr[j] * dy[j];
            dwr[j] += xi * dy[j];
        }
        dx[i] += acc;
    }
}

using Vec = std::vector<double>;
using VecSeq = std::vector<Vec>;

struct LayerCache {
    VecSeq h_in;     // layer input
    std::vector<NormCache> ln1;
    VecSeq ln1_out;  // post-norm, pre post-activation
    VecSeq a;        // qkv input (post-norm and post-activation if stage-2)
    VecSeq q, k, v;
    std::vector<std::vector<Vec>> probs;  // [t][head] -> length t+1
    VecSeq ctx;
    VecSeq h_mid;    // after attention residual
    std::vector<NormCache> ln2;
    VecSeq ln2_out;
    VecSeq f;        // up/gate input
    VecSeq gate_pre, gate_act, up_out;  // gated FFN
    VecSeq up_pre;                      // plain FFN preactivation
    VecSeq down_in;                     // input to down projection
};

struct FwdCache {
    std::size_t seq = 0;
    std::vector<LayerCache> layers;
    VecSeq h_out;  // final residual stream
    std::vector<NormCache> lnf;
    VecSeq hf;
    VecSeq probs;  // softmax of logits
};

double forward_cached(const Model& m, std::span<const int> seq_tokens, FwdCache& c) {
    const auto& cfg = m.config;
    const std::size_t S = seq_tokens.size() - 1;  // last token is only a target
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    c.seq = S;
    c.layers.assign(cfg.n_layers, {});

    VecSeq h(S, Vec(d));
    for (std::size_t t = 0; t < S; ++t) {
        const double* te = m.tok_emb.row(static_cast<std::size_t>(seq_tokens[t]));
        const double* pe = m.pos_emb.row(t);
        for (std::size_t i = 0; i < d; ++i) h[t][i] = te[i] + pe[i];
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = m.layers[l];
        auto& lc = c.layers[l];
        lc.h_in = h;
        lc.ln1.resize(S);
        lc.ln1_out.resize(S);
        lc.a.resize(S);
        lc.q.assign(S, Vec(d));
        lc.k.assign(S, Vec(d));
        lc.v.assign(S, Vec(d));
        lc.probs.resize(S);
        lc.ctx.assign(S, Vec(d, 0.0));
        lc.h_mid.assign(S, Vec(d));

        for (std::size_t t = 0; t < S; ++t) {
            norm_fwd(h[t], lw.norm1_scale, lw.norm1_offset, cfg.norm_kind, lc.ln1[t],
                     lc.ln1_out[t]);
            lc.a[t] = cfg.post_norm_activation
                          ? relusparse::apply(*cfg.post_norm_activation, lc.ln1_out[t])
                          : lc.ln1_out[t];
            mv(lw.wq, lc.a[t].data(), lc.q[t].data());
            mv(lw.wk, lc.a[t].data(), lc.k[t].data());
            mv(lw.wv, lc.a[t].data(), lc.v[t].data());
        }
        for (std::size_t t = 0; t < S; ++t) {
            lc.probs[t].resize(cfg.n_heads);
            for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                const std::size_t off = hh * hd;
                Vec scores(t + 1);
                for (std::size_t j = 0; j <= t; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < hd; ++i)
                        s += lc.q[t][off + i] * lc.k[j][off + i];
                    scores[j] = s * att_scale;
                }
                lc.probs[t][hh] = softmax(scores);
                for (std::size_t j = 0; j <= t; ++j) {
                    const double p = lc.probs[t][hh][j];
                    for (std::size_t i = 0; i < hd; ++i)
                        lc.ctx[t][off + i] += p * lc.v[j][off + i];
                }
            }
            Vec o(d);
            mv(lw.wo, lc.ctx[t].data(), o.data());
            for (std::size_t i = 0; i < d; ++i) lc.h_mid[t][i] = h[t][i] + o[i];
        }

        lc.ln2.resize(S);
        lc.ln2_out.resize(S);
        lc.f.resize(S);
        lc.down_in.resize(S);
        if (cfg.ffn_kind == FfnKind::Gated) {
            lc.gate_pre.assign(S, Vec(cfg.d_ffn));
            lc.gate_act.resize(S);
            lc.up_out.assign(S, Vec(cfg.d_ffn));
        } else {
            lc.up_pre.assign(S, Vec(cfg.d_ffn));
        }
        for (std::size_t t = 0; t < S; ++t) {
            norm_fwd(lc.h_mid[t], lw.norm2_scale, lw.norm2_offset, cfg.norm_kind, lc.ln2[t],
                     lc.ln2_out[t]);
            lc.f[t] = cfg.post_norm_activation
                          ? relusparse::apply(*cfg.post_norm_activation, lc.ln2_out[t])
                          : lc.ln2_out[t];
            if (cfg.ffn_kind == FfnKind::Gated) {
                mv(lw.w_gate, lc.f[t].data(), lc.gate_pre[t].data());
                lc.gate_act[t] = relusparse::apply(cfg.ffn_activation, lc.gate_pre[t]);
                mv(lw.w_up, lc.f[t].data(), lc.up_out[t].data());
                lc.down_in[t] = hadamard(lc.gate_act[t], lc.up_out[t]);
            } else {
                mv(lw.w_up, lc.f[t].data(), lc.up_pre[t].data());
                lc.down_in[t] = relusparse::apply(cfg.ffn_activation, lc.up_pre[t]);
            }
            Vec out(d);
            mv(lw.w_down, lc.down_in[t].data(), out.data());
            h[t] = lc.h_mid[t];
            for (std::size_t i = 0; i < d; ++i) h[t][i] += out[i];
        }
    }

    c.h_out = h;
    c.lnf.resize(S);
    c.hf.resize(S);
    c.probs.assign(S, Vec(cfg.vocab_size));
    double nll = 0.0;
    for (std::size_t t = 0; t < S; ++t) {
        norm_fwd(h[t], m.final_norm_scale, m.final_norm_offset, cfg.norm_kind, c.lnf[t],
                 c.hf[t]);
        Vec logits(cfg.vocab_size);
        if (cfg.tie_head) {
            for (std::size_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                const double* er = m.tok_emb.row(vtok);
                double acc = 0.0;
                for (std::size_t i = 0; i < d; ++i) acc += er[i] * c.hf[t][i];
                logits[vtok] = acc;
            }
        } else {
            mv(m.lm_head, c.hf[t].data(), logits.data());
        }
        c.probs[t] = softmax(logits);
        const int target = seq_tokens[t + 1];
        nll -= std::log(std::max(c.probs[t][static_cast<std::size_t>(target)], 1e-300));
    }
    return nll / static_cast<double>(S);
}

Model zeros_like(const Model& m) {
    Model g = m;
    for (auto& t : tensor_refs(g)) std::fill(t.data, t.data + t.size, 0.0);
    return g;
}

void backward_cached(const Model& m, std::span<const int> seq_tokens, const FwdCache& c,
                     double weight, Model& g) {
    const auto& cfg = m.config;
    const std::size_t S = c.seq;
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    VecSeq dh(S, Vec(d, 0.0));

    // loss + head + final norm
    for (std::size_t t = 0; t < S; ++t) {
        Vec dlogits = c.probs[t];
        dlogits[static_cast<std::size_t>(seq_tokens[t + 1])] -= 1.0;
        for (double& x : dlogits) x *= weight;

        Vec dhf(d, 0.0);
        if (cfg.tie_head) {
            for (std::size_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                const double dl = dlogits[vtok];
                if (dl == 0.0) continue;
                const double* er = m.tok_emb.row(vtok);
                double* ger = g.tok_emb.data.data() + vtok * d;
                for (std::size_t i = 0; i < d; ++i) {
                    dhf[i] += dl * er[i];
                    ger[i] += dl * c.hf[t][i];
                }
            }
        } else {
            mv_bwd(m.lm_head, c.hf[t].data(), dlogits.data(), dhf.data(), g.lm_head);
        }
        norm_bwd(c.lnf[t], m.final_norm_scale, dhf, cfg.norm_kind, dh[t].data(),
                 g.final_norm_scale.data(), g.final_norm_offset.data());
    }

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& lw = m.layers[li];
        auto& gl = g.layers[li];
        const auto& lc = c.layers[li];

        // FFN sublayer backward: dh is the gradient wrt the layer output
        VecSeq dh_mid(S, Vec(d, 0.0));
        for (std::size_t t = 0; t < S; ++t) {
            dh_mid[t] = dh[t];  // residual branch

            Vec ddown_in(cfg.d_ffn, 0.0);
            mv_bwd(lw.w_down, lc.down_in[t].data(), dh[t].data(), ddown_in.data(),
                   gl.w_down);

            Vec df(d, 0.0);
            if (cfg.ffn_kind == FfnKind::Gated) {
                Vec dgate_pre(cfg.d_ffn), dup_out(cfg.d_ffn);
                for (std::size_t i = 0; i < cfg.d_ffn; ++i) {
                    const double dgate_act = ddown_in[i] * lc.up_out[t][i];
                    dup_out[i] = ddown_in[i] * lc.gate_act[t][i];
                    dgate_pre[i] =
                        dgate_act * derivative_scalar(cfg.ffn_activation, lc.gate_pre[t][i]);
                }
                mv_bwd(lw.w_up, lc.f[t].data(), dup_out.data(), df.data(), gl.w_up);
                mv_bwd(lw.w_gate, lc.f[t].data(), dgate_pre.data(), df.data(), gl.w_gate);
            } else {
                Vec dup_pre(cfg.d_ffn);
                for (std::size_t i = 0; i < cfg.d_ffn; ++i)
                    dup_pre[i] =
                        ddown_in[i] * derivative_scalar(cfg.ffn_activation, lc.up_pre[t][i]);
                mv_bwd(lw.w_up, lc.f[t].data(), dup_pre.data(), df.data(), gl.w_up);
            }
            if (cfg.post_norm_activation) {
                for (std::size_t i = 0; i < d; ++i)
                    df[i] *= derivative_scalar(*cfg.post_norm_activation, lc.ln2_out[t][i]);
            }
            norm_bwd(lc.ln2[t], lw.norm2_scale, df, cfg.norm_kind, dh_mid[t].data(),
                     gl.norm2_scale.data(), gl.norm2_offset.data());
        }

        // attention sublayer backward
        VecSeq dq(S, Vec(d, 0.0)), dk(S, Vec(d, 0.0)), dv(S, Vec(d, 0.0));
        VecSeq dh_in(S, Vec(d, 0.0));
        for (std::size_t t = 0; t < S; ++t) {
            dh_in[t] = dh_mid[t];  // residual branch
            Vec dctx(d, 0.0);
            mv_bwd(lw.wo, lc.ctx[t].data(), dh_mid[t].data(), dctx.data(), gl.wo);
            for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                const std::size_t off = hh * hd;
                const auto& p = lc.probs[t][hh];
                Vec dp(t + 1, 0.0);
                for (std::size_t j = 0; j <= t; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        acc += dctx[off + i] * lc.v[j][off + i];
                        dv[j][off + i] += p[j] * dctx[off + i];
                    }
                    dp[j] = acc;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j <= t; ++j) dot += p[j] * dp[j];
                for (std::size_t j = 0; j <= t; ++j) {
                    const double ds = p[j] * (dp[j] - dot) * att_scale;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dq[t][off + i] += ds * lc.k[j][off + i];
                        dk[j][off + i] += ds * lc.q[t][off + i];
                    }
                }
            }
        }
        for (std::size_t t = 0; t < S; ++t) {
            Vec da(d, 0.0);
            mv_bwd(lw.wq, lc.a[t].data(), dq[t].data(), da.data(), gl.wq);
            mv_bwd(lw.wk, lc.a[t].data(), dk[t].data(), da.data(), gl.wk);
            mv_bwd(lw.wv, lc.a[t].data(), dv[t].data(), da.data(), gl.wv);
            if (cfg.post_norm_activation) {
                for (std::size_t i = 0; i < d; ++i)
                    da[i] *= derivative_scalar(*cfg.post_norm_activation, lc.ln1_out[t][i]);
            }
            norm_bwd(lc.ln1[t], lw.norm1_scale, da, cfg.norm_kind, dh_in[t].data(),
                     gl.norm1_scale.data(), gl.norm1_offset.data());
        }
        dh = std::move(dh_in);
    }

    for (std::size_t t = 0; t < S; ++t) {
        const auto tok = static_cast<std::size_t>(seq_tokens[t]);
        double* gt = g.tok_emb.data.data() + tok * d;
        double* gp = g.pos_emb.data.data() + t * d;
        for (std::size_t i = 0; i < d; ++i) {
            gt[i] += dh[t][i];
            gp[i] += dh[t][i];
        }
    }
}

void check_batch(const Model& m, const Batch& batch) {
    if (batch.sequences.empty()) throw std::invalid_argument("empty batch");
    for (const auto& s : batch.sequences) {
        if (s.size() < 2) throw std::invalid_argument("batch sequence too short");
        for (int t : s)
            if (t < 0 || static_cast<std::size_t>(t) >= m.config.vocab_size)
                throw std::invalid_argument("batch token out of range");
    }
}

}  // namespace

double loss(const Model& model, const Batch& batch) {
    check_batch(model, batch);
    double total = 0.0;
    FwdCache cache;
    for (const auto& s : batch.sequences) total += forward_cached(model, s, cache);
    return total / static_cast<double>(batch.sequences.size());
}

Model backward(const Model& model, const Batch& batch, double* loss_out) {
    check_batch(model, batch);
    Model grads = zeros_like(model);
    double total = 0.0;
    const auto B = static_cast<double>(batch.sequences.size());
    FwdCache cache;
    for (const auto& s : batch.sequences) {
        total += forward_cached(model, s, cache);
        // weight folds the per-sequence position mean and the batch mean
        backward_cached(model, s, cache,
                        1.0 / (B * static_cast<double>(cache.seq)), grads);
    }
    if (loss_out) *loss_out = total / B;
    return grads;
}

AdamW::AdamW(Model& model, const AdamWParams& params) : model_(&model), params_(params) {
    for (const auto& t : tensor_refs(model)) {
        m_.emplace_back(t.size, 0.0);
        v_.emplace_back(t.size, 0.0);
        decay_.push_back(t.name.find("norm") == std::string::npos);
    }
}

void AdamW::step(Model& grads) {
    ++t_;
    const auto refs = tensor_refs(*model_);
    const auto grefs = tensor_refs(grads);
    const double bc1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < refs.size(); ++k) {
        double* p = refs[k].data;
        const double* gdata = grefs[k].data;
        auto& mk = m_[k];
        auto& vk = v_[k];
        const double wd = decay_[k] ? params_.weight_decay : 0.0;
        for (std::size_t i = 0; i < refs[k].size; ++i) {
            const double gi = gdata[i];
            mk[i] = params_.beta1 * mk[i] + (1.0 - params_.beta1) * gi;
            vk[i] = params_.beta2 * vk[i] + (1.0 - params_.beta2) * gi * gi;
            const double mhat = mk[i] / bc1;
            const double vhat = vk[i] / bc2;
            p[i] -= params_.lr * (mhat / (std::sqrt(vhat) + params_.eps) + wd * p[i]);
        }
    }
}

double validation_loss(const Model& model, const Corpus& corpus, std::size_t n_batches,
                       std::size_t batch_size, std::size_t seq_len) {
    const auto batches = validation_batches(corpus, n_batches, batch_size, seq_len);
    double total = 0.0;
    for (const auto& b : batches) total += loss(model, b);
    return total / static_cast<double>(batches.size());
}

PreactHistogram validation_preact_histogram(const Model& model, const Corpus& corpus,
                                            std::size_t n_batches, std::size_t batch_size,
                                            std::size_t seq_len) {
    PreactRecorder rec(model.config.n_layers);
    ForwardOptions opt;
    opt.hooks = &rec.hooks();
    for (const auto& b : validation_batches(corpus, n_batches, batch_size, seq_len))
        for (const auto& s : b.sequences)
            forward(model, std::span<const int>(s.data(), s.size() - 1), opt);
    return rec.merged();
}

double validation_ffn_sparsity(const Model& model, const Corpus& corpus, double tau,
                               std::size_t n_batches, std::size_t batch_size,
                               std::size_t seq_len) {
    SparsityRecorder rec(tau);
    ForwardOptions opt;
    opt.hooks = &rec.hooks();
    for (const auto& b : validation_batches(corpus, n_batches, batch_size, seq_len))
        for (const auto& s : b.sequences)
            forward(model, std::span<const int>(s.data(), s.size() - 1), opt);
    return rec.report().site_mean("down_in");
}

TrainResult train_model(Model model, const Corpus& corpus, const TrainConfig& config) {
    config.validate();
    TrainResult res;
    AdamW opt(model, config.adamw);
    std::mt19937_64 rng(config.seed);

    auto eval = [&] {
        return validation_loss(model, corpus, config.eval_batches, config.batch_size,
                               config.seq_len);
    };
    auto snapshot = [&](std::size_t step) {
        res.snapshots.emplace_back(
            step, validation_preact_histogram(model, corpus, config.eval_batches,
                                              config.batch_size, config.seq_len));
    };

    res.initial_valid_loss = eval();
    res.valid_curve.emplace_back(0, res.initial_valid_loss);
    auto scheduled = config.histogram_snapshot_steps;
    std::sort(scheduled.begin(), scheduled.end());
    if (!scheduled.empty() && scheduled.front() == 0) snapshot(0);

    for (std::size_t step = 1; step <= config.steps; ++step) {
        const Batch batch = sample_batch(corpus, config.batch_size, config.seq_len, rng);
        double batch_loss = 0.0;
        Model grads = backward(model, batch, &batch_loss);
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("train_model: loss diverged at step " +
                                     std::to_string(step));
        opt.step(grads);
        res.train_curve.emplace_back(step, batch_loss);
        if (step % config.eval_interval == 0)
            res.valid_curve.emplace_back(step, eval());
        if (std::find(scheduled.begin(), scheduled.end(), step) != scheduled.end())
            snapshot(step);
    }
    res.final_valid_loss = eval();
    if (res.valid_curve.back().first != config.steps)
        res.valid_curve.emplace_back(config.steps, res.final_valid_loss);
    res.model = std::move(model);
    return res;
}

std::vector<BetaSweepRow> beta_sweep(const Corpus& corpus, const ModelConfig& base,
                                     const TrainConfig& config,
                                     const std::vector<ActivationSpec>& specs) {
    std::vector<BetaSweepRow> rows;
    for (const auto& spec : specs) {
        ModelConfig cfg = base;
        cfg.ffn_activation = spec;
        Model model = init_random(cfg, config.seed);
        TrainResult tr = train_model(std::move(model), corpus, config);
        const bool exact_zeros = spec.kind == ActivationKind::Relu ||
                                 spec.kind == ActivationKind::ShiftedRelu;
        const double tau = exact_zeros ? 0.0 : 1e-2;
        BetaSweepRow row;
        row.spec = spec;
        row.label = spec.to_json();
        row.final_valid_loss = tr.final_valid_loss;
        row.final_ffn_sparsity =
            validation_ffn_sparsity(tr.model, corpus, tau, config.eval_batches,
                                    config.batch_size, config.seq_len);
        rows.push_back(std::move(row));
    }
    return rows;
}

RecoveryResult recovery_experiment(const Corpus& corpus, const ModelConfig& base,
                                   const TrainConfig& pretrain_config) {
    RecoveryResult res;
    Model model = init_random(base, pretrain_config.seed);
    TrainResult pre = train_model(std::move(model), corpus, pretrain_config);
    res.pre_surgery_loss = pre.final_valid_loss;

    Model surgered = relufy(pre.model, SurgeryStage::Stage1);
    res.post_surgery_loss =
        validation_loss(surgered, corpus, pretrain_config.eval_batches,
                        pretrain_config.batch_size, pretrain_config.seq_len);
    const PreactHistogram before = validation_preact_histogram(
        surgered, corpus, pretrain_config.eval_batches, pretrain_config.batch_size,
        pretrain_config.seq_len);

    TrainConfig ft = pretrain_config;
    ft.steps = std::max<std::size_t>(1, pretrain_config.steps / 10);
    ft.seed = pretrain_config.seed + 1;
    ft.histogram_snapshot_steps.clear();
    TrainResult post = train_model(std::move(surgered), corpus, ft);
    res.post_finetune_loss = post.final_valid_loss;

    const PreactHistogram after = validation_preact_histogram(
        post.model, corpus, pretrain_config.eval_batches, pretrain_config.batch_size,
        pretrain_config.seq_len);
    res.histogram_tv = PreactHistogram::tv_distance(before, after);
    res.final_model = std::move(post.model);
    return res;
}

}  // namespace relusparse
