#include "relusparse/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "relusparse/flops.hpp"
#include "relusparse/instrument.hpp"
#include "relusparse/reuse.hpp"
#include "relusparse/specdec.hpp"

namespace relusparse {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {
        "train", "relufy",   "sparsity",   "hist",     "aggregated", "flops",
        "specdec", "reuse", "beta_sweep", "recovery", "shifted_relu"};
    return names;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ExperimentError(2, std::string("config parse error: ") + e.what());
    }
    ExperimentConfig c;
    try {
        if (!j.contains("experiment"))
            throw std::invalid_argument("missing required section 'experiment'");
        c.experiment = j.at("experiment").get<std::string>();
        const auto& names = experiment_names();
        if (std::find(names.begin(), names.end(), c.experiment) == names.end())
            throw std::invalid_argument("unknown experiment '" + c.experiment + "'");
        if (!j.contains("model"))
            throw std::invalid_argument("missing required section 'model'");
        c.model = ModelConfig::from_json(j.at("model").dump());
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train").dump());
        c.out_dir = j.value("out_dir", c.out_dir);
        c.corpus_path = j.value("corpus", c.corpus_path);
        c.seed = j.value("seed", c.seed);
        if (j.contains("options"))
            for (const auto& [k, v] : j.at("options").items())
                c.options[k] = v.is_string() ? v.get<std::string>() : v.dump();
    } catch (const ExperimentError&) {
        throw;
    } catch (const std::exception& e) {
        throw ExperimentError(3, std::string("config validation error: ") + e.what());
    }
    return c;
}

std::string ExperimentConfig::apply_override(const std::string& json_text,
                                             const std::string& key_eq_value) {
    const auto eq = key_eq_value.find('=');
    if (eq == std::string::npos)
        throw ExperimentError(2, "override must look like key=value: " + key_eq_value);
    const std::string dotted = key_eq_value.substr(0, eq);
    const std::string value = key_eq_value.substr(eq + 1);
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ExperimentError(2, std::string("config parse error: ") + e.what());
    }
    json* node = &j;
    std::istringstream keys(dotted);
    std::string key, prev;
    std::vector<std::string> parts;
    while (std::getline(keys, key, '.')) parts.push_back(key);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]]);
    json parsed;
    try {
        parsed = json::parse(value);  // numbers, booleans, objects
    } catch (...) {
        parsed = value;  // plain string
    }
    (*node)[parts.back()] = parsed;
    return j.dump();
}

std::string ExperimentConfig::canonical_json() const {
    json j;
    j["experiment"] = experiment;
    j["model"] = json::parse(model.to_json());
    j["train"] = json::parse(train.to_json());
    j["out_dir"] = out_dir;
    j["corpus"] = corpus_path;
    j["seed"] = seed;
    json opts = json::object();
    for (const auto& [k, v] : options) opts[k] = v;
    j["options"] = opts;
    return j.dump();
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a(canonical_json()); }

double ExperimentConfig::opt_double(const std::string& key, double fallback) const {
    auto it = options.find(key);
    if (it == options.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw ExperimentError(3, "option '" + key + "' is not a number: " + it->second);
    }
}

std::size_t ExperimentConfig::opt_size(const std::string& key, std::size_t fallback) const {
    auto it = options.find(key);
    if (it == options.end()) return fallback;
    try {
        return static_cast<std::size_t>(std::stoull(it->second));
    } catch (...) {
        throw ExperimentError(3, "option '" + key + "' is not a count: " + it->second);
    }
}

std::string ExperimentConfig::opt_str(const std::string& key,
                                      const std::string& fallback) const {
    auto it = options.find(key);
    return it == options.end() ? fallback : it->second;
}

namespace {

std::vector<double> parse_csv_numbers(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(std::stod(item));
    return out;
}

struct Runner {
    const ExperimentConfig& cfg;
    std::vector<std::string> artifacts;

    void write_artifact(const std::string& name, const std::string& content) {
        const fs::path p = fs::path(cfg.out_dir) / name;
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        if (!os) throw ExperimentError(1, "cannot write " + p.string());
        os << content;
        artifacts.push_back(p.string());
    }

    Corpus corpus() const {
        try {
            return Corpus::from_file(cfg.corpus_path);
        } catch (const std::exception& e) {
            throw ExperimentError(3, std::string("corpus: ") + e.what());
        }
    }

    Model make_model() const {
        Model m = cfg.options.contains("checkpoint")
                      ? load(cfg.options.at("checkpoint"))
                      : init_random(cfg.model, cfg.seed);
        const std::size_t stage = cfg.opt_size("relufy_stage", 0);
        if (stage == 1) m = relufy(m, SurgeryStage::Stage1);
        if (stage == 2) m = relufy(m, SurgeryStage::Stage2);
        return m;
    }

    std::vector<std::vector<int>> validation_windows(std::size_t n_windows,
                                                     std::size_t window_len) const {
        const Corpus c = corpus();
        if (c.valid_size() < window_len + 2)
            throw ExperimentError(3, "validation split shorter than requested window");
        const std::size_t span = c.valid_size() - window_len - 2;
        std::vector<std::vector<int>> out;
        for (std::size_t w = 0; w < n_windows; ++w) {
            const std::size_t off = n_windows == 1 ? 0 : span * w / (n_windows - 1);
            out.push_back(c.window(true, off, window_len));
        }
        return out;
    }

    ArchSpec arch_from_options() const {
        const std::string name = cfg.opt_str("arch", "toy");
        if (name == "toy") {
            ArchSpec a;
            a.name = "toy";
            a.n_layers = cfg.model.n_layers;
            a.d_model = cfg.model.d_model;
            a.d_ffn = cfg.model.d_ffn;
            a.vocab_size = cfg.model.vocab_size;
            a.ffn_kind = cfg.model.ffn_kind;
            return a;
        }
        auto a = find_arch_preset(name);
        if (!a) throw ExperimentError(3, "unknown arch preset '" + name + "'");
        return *a;
    }

    // ---- experiments ----

    void run_flops() {
        const ArchSpec arch = arch_from_options();
        SparsityProfile profile;
        if (cfg.options.contains("profile")) {
            const auto p = parse_csv_numbers(cfg.options.at("profile"));
            if (p.size() != 3)
                throw ExperimentError(3, "profile must be qkv,up,down");
            profile = {p[0], p[1], p[2]};
        }
        const FlopsReport rep = effective_macs(arch, profile);
        write_artifact("flops.csv", rep.to_csv());
        json j = json::parse(rep.to_json());
        const ComputeShares shares = compute_shares(arch);
        j["shares"] = {{"qkv_plus_up", shares.qkv_plus_up},
                       {"down", shares.down},
                       {"attn_out", shares.attn_out},
                       {"head", shares.head}};
        if (cfg.options.contains("compare_arch")) {
            auto b = find_arch_preset(cfg.options.at("compare_arch"));
            if (!b) throw ExperimentError(3, "unknown compare_arch preset");
            const auto match = flops_matched_compare(arch, profile, *b);
            j["flops_matched"] = {{"scale_factor", match.scale_factor},
                                  {"target_effective", match.target_effective},
                                  {"matched_dense", match.matched_dense},
                                  {"mac_gap", match.mac_gap}};
        }
        write_artifact("flops.json", j.dump(2) + "\n");
    }

    void run_specdec() {
        const double alpha = cfg.opt_double("alpha", 0.8);
        const double c = cfg.opt_double("c", 0.02);
        const std::size_t gamma_max = cfg.opt_size("gamma_max", 64);
        const double s = cfg.opt_double("s", 0.0);
        const std::string curve_kind = cfg.opt_str("curve", "constant");
        SparsityCurve curve;
        if (curve_kind == "constant") {
            curve = [s](std::size_t) { return s; };
        } else if (curve_kind == "power") {
            curve = [s](std::size_t g) { return std::pow(s, static_cast<double>(g)); };
        } else {
            throw ExperimentError(3, "curve must be 'constant' or 'power'");
        }
        write_artifact("specdec.csv", sweep_csv(alpha, c, curve, gamma_max));
        json j;
        j["optimal_gamma"] = optimal_gamma(alpha, c, curve, gamma_max);
        j["optimal_gamma_dense"] =
            optimal_gamma(alpha, c, [](std::size_t) { return 0.0; }, gamma_max);
        const std::size_t n_rounds = cfg.opt_size("n_rounds", 0);
        if (n_rounds > 0) {
            SpecDecParams p;
            p.alpha = alpha;
            p.c = c;
            p.gamma = cfg.opt_size("gamma", 4);
            p.s_agg = curve;
            const SimResult sim = simulate_rounds(p, n_rounds, cfg.seed);
            j["simulation"] = {{"gamma", p.gamma},
                               {"rounds", sim.rounds},
                               {"mean_tokens_per_round", sim.mean_tokens_per_round},
                               {"speedup_over_standard", sim.speedup_over_standard},
                               {"speedup_over_autoregressive",
                                sim.speedup_over_autoregressive}};
        }
        write_artifact("specdec.json", j.dump(2) + "\n");
    }

    void run_train() {
        const Corpus c = corpus();
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        TrainResult tr;
        try {
            tr = train_model(make_model(), c, tc);
        } catch (const std::exception& e) {
            throw ExperimentError(1, e.what());
        }
        std::ostringstream train_csv, valid_csv;
        train_csv.precision(12);
        valid_csv.precision(12);
        train_csv << "step,loss\n";
        for (const auto& [s, l] : tr.train_curve) train_csv << s << "," << l << "\n";
        valid_csv << "step,loss\n";
        for (const auto& [s, l] : tr.valid_curve) valid_csv << s << "," << l << "\n";
        write_artifact("train_curve.csv", train_csv.str());
        write_artifact("valid_curve.csv", valid_csv.str());
        for (const auto& [step, hist] : tr.snapshots)
            write_artifact("hist_step" + std::to_string(step) + ".csv", hist.to_csv());
        const fs::path ckpt = fs::path(cfg.out_dir) / "checkpoint.rlfc";
        save(tr.model, ckpt.string());
        artifacts.push_back(ckpt.string());
    }

    void run_relufy() {
        if (!cfg.options.contains("checkpoint"))
            throw ExperimentError(3, "relufy requires option 'checkpoint'");
        const std::size_t stage = cfg.opt_size("stage", 1);
        if (stage != 1 && stage != 2)
            throw ExperimentError(3, "stage must be 1 or 2");
        Model m = load(cfg.options.at("checkpoint"));
        m = relufy(m, stage == 1 ? SurgeryStage::Stage1 : SurgeryStage::Stage2);
        const fs::path out = fs::path(cfg.out_dir) / "checkpoint_relufied.rlfc";
        save(m, out.string());
        artifacts.push_back(out.string());
    }

    void run_sparsity() {
        const Model m = make_model();
        const double tau = cfg.opt_double("tau", 0.0);
        SparsityRecorder rec(tau);
        ForwardOptions opt;
        opt.hooks = &rec.hooks();
        for (const auto& w : validation_windows(cfg.opt_size("n_windows", 4),
                                                cfg.train.seq_len))
            forward(m, std::span<const int>(w.data(), w.size() - 1), opt);
        write_artifact("sparsity.csv", rec.report().to_csv());
    }

    void run_hist() {
        const Model m = make_model();
        PreactRecorder rec(m.config.n_layers);
        ForwardOptions opt;
        opt.hooks = &rec.hooks();
        for (const auto& w : validation_windows(cfg.opt_size("n_windows", 4),
                                                cfg.train.seq_len))
            forward(m, std::span<const int>(w.data(), w.size() - 1), opt);
        write_artifact("hist.csv", rec.merged().to_csv());
    }

    void run_aggregated() {
        const Model m = make_model();
        const std::size_t t_max =
            std::min(cfg.opt_size("t_max", 128), m.config.max_seq);
        const double tau = cfg.opt_double("tau", 0.0);
        const auto windows = validation_windows(1, t_max);
        const auto trace = record_aggregated_trace(
            m, std::span<const int>(windows[0].data(), t_max), tau);

        // per-layer mean per-token sparsity feeds the random baseline
        SparsityRecorder rec(tau);
        ForwardOptions opt;
        opt.hooks = &rec.hooks();
        forward(m, std::span<const int>(windows[0].data(), t_max), opt);

        std::ostringstream os;
        os.precision(12);
        os << "t,layer,unused_fraction,random_baseline\n";
        for (std::size_t t = 0; t < trace.t_max(); ++t)
            for (std::size_t l = 0; l < trace.per_layer.size(); ++l)
                os << (t + 1) << "," << l << "," << trace.per_layer[l][t] << ","
                   << random_baseline(rec.report().mean(l, "down_in"), t + 1) << "\n";
        write_artifact("aggregated.csv", os.str());
    }

    void run_reuse() {
        const Model m = make_model();
        const ReusePolicy base{cfg.opt_size("warmup", 32), 16,
                               cfg.opt_size("horizon", 32),
                               cfg.opt_double("tau", 0.0), 0};
        std::vector<std::size_t> gammas;
        for (double g : parse_csv_numbers(cfg.opt_str("gammas", "1,4,16")))
            gammas.push_back(static_cast<std::size_t>(g));
        std::vector<std::uint64_t> seeds;
        for (double s : parse_csv_numbers(cfg.opt_str("seeds", "0,1,2")))
            seeds.push_back(static_cast<std::uint64_t>(s));
        const auto windows = validation_windows(cfg.opt_size("n_windows", 5),
                                                base.warmup + base.horizon + 1);
        try {
            write_artifact("reuse.csv", sweep_gamma_csv(m, windows, base, gammas, seeds));
        } catch (const std::invalid_argument& e) {
            throw ExperimentError(3, e.what());
        }
    }

    void run_beta_sweep() {
        const Corpus c = corpus();
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        const std::vector<ActivationSpec> specs = {
            ActivationSpec::gated(1.0), ActivationSpec::gated(1.7),
            ActivationSpec::gated(8.0), ActivationSpec::relu()};
        const auto rows = beta_sweep(c, cfg.model, tc, specs);
        std::ostringstream os;
        os.precision(12);
        os << "activation,final_valid_loss,final_ffn_sparsity\n";
        for (const auto& r : rows)
            os << '"' << r.label << "\"," << r.final_valid_loss << ","
               << r.final_ffn_sparsity << "\n";
        write_artifact("beta_sweep.csv", os.str());
    }

    void run_recovery() {
        const Corpus c = corpus();
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        const RecoveryResult r = recovery_experiment(c, cfg.model, tc);
        json j;
        j["pre_surgery_loss"] = r.pre_surgery_loss;
        j["post_surgery_loss"] = r.post_surgery_loss;
        j["post_finetune_loss"] = r.post_finetune_loss;
        j["histogram_tv"] = r.histogram_tv;
        write_artifact("recovery.json", j.dump(2) + "\n");
    }

    void run_shifted_relu() {
        const Corpus c = corpus();
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        const double target = cfg.opt_double("target_sparsity", 0.9);

        ModelConfig relu_cfg = cfg.model;
        relu_cfg.ffn_activation = ActivationSpec::relu();
        TrainResult relu_run = train_model(init_random(relu_cfg, cfg.seed), c, tc);
        const PreactHistogram hist = validation_preact_histogram(
            relu_run.model, c, tc.eval_batches, tc.batch_size, tc.seq_len);
        const double b = choose_shift(hist, target);

        ModelConfig shifted_cfg = cfg.model;
        shifted_cfg.ffn_activation = ActivationSpec::shifted_relu(b);
        TrainResult shifted_run = train_model(init_random(shifted_cfg, cfg.seed), c, tc);
        const double achieved = validation_ffn_sparsity(
            shifted_run.model, c, 0.0, tc.eval_batches, tc.batch_size, tc.seq_len);

        json j;
        j["shift_b"] = b;
        j["target_sparsity"] = target;
        j["achieved_down_in_sparsity"] = achieved;
        j["relu_final_loss"] = relu_run.final_valid_loss;
        j["shifted_final_loss"] = shifted_run.final_valid_loss;
        write_artifact("shifted_relu.json", j.dump(2) + "\n");
    }
};

}  // namespace

std::vector<std::string> run_experiment(const ExperimentConfig& config) {
    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    if (ec) throw ExperimentError(3, "cannot create out_dir " + config.out_dir);

    Runner r{config, {}};
    try {
        if (config.experiment == "flops") r.run_flops();
        else if (config.experiment == "specdec") r.run_specdec();
        else if (config.experiment == "train") r.run_train();
        else if (config.experiment == "relufy") r.run_relufy();
        else if (config.experiment == "sparsity") r.run_sparsity();
        else if (config.experiment == "hist") r.run_hist();
        else if (config.experiment == "aggregated") r.run_aggregated();
        else if (config.experiment == "reuse") r.run_reuse();
        else if (config.experiment == "beta_sweep") r.run_beta_sweep();
        else if (config.experiment == "recovery") r.run_recovery();
        else if (config.experiment == "shifted_relu") r.run_shifted_relu();
        else throw ExperimentError(3, "unknown experiment '" + config.experiment + "'");
    } catch (const ExperimentError&) {
        throw;
    } catch (const CheckpointError& e) {
        throw ExperimentError(1, std::string("checkpoint: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ExperimentError(3, e.what());
    } catch (const std::exception& e) {
        throw ExperimentError(1, e.what());
    }

    json manifest;
    manifest["experiment"] = config.experiment;
    manifest["seed"] = config.seed;
    manifest["config_hash"] = config.config_hash();
    manifest["format_version"] = 1;
    manifest["artifacts"] = r.artifacts;
    const fs::path mpath = fs::path(config.out_dir) / "manifest.json";
    std::ofstream os(mpath, std::ios::binary | std::ios::trunc);
    os << manifest.dump(2) << "\n";
    r.artifacts.push_back(mpath.string());
    return r.artifacts;
}

}  // namespace relusparse
