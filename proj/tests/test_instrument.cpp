#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "relusparse/instrument.hpp"

using namespace relusparse;

namespace {

Model relu_model(std::uint64_t seed) {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ffn = 32;
    c.vocab_size = 29;
    c.max_seq = 40;
    return relufy(init_random(c, seed), SurgeryStage::Stage1);
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng() % vocab);
    return t;
}

}  // namespace

TEST_CASE("sparsity recorder agrees with manually hooked measurements") {
    const Model m = relu_model(1);
    const auto toks = random_tokens(14, m.config.vocab_size, 2);

    // oracle: collect raw vectors and average sparsity by hand
    std::map<std::pair<std::size_t, std::string>, std::pair<double, std::size_t>> manual;
    ForwardHooks hooks;
    hooks.on_site_input = [&](std::size_t l, const std::string& site,
                              std::span<const double> v) {
        std::size_t zeros = 0;
        for (double x : v)
            if (std::abs(x) <= 0.0) ++zeros;
        auto& cell = manual[{l, site}];
        cell.first += static_cast<double>(zeros) / v.size();
        ++cell.second;
    };
    ForwardOptions opt1;
    opt1.hooks = &hooks;
    forward(m, toks, opt1);

    SparsityRecorder rec;
    ForwardOptions opt2;
    opt2.hooks = &rec.hooks();
    forward(m, toks, opt2);

    for (const auto& [key, cell] : manual) {
        CHECK(rec.report().mean(key.first, key.second) ==
              doctest::Approx(cell.first / cell.second).epsilon(1e-12));
        CHECK(rec.report().cells.at(key).tokens == toks.size());
    }
    // every layer reports all three sites
    CHECK(rec.report().cells.size() == 3 * m.config.n_layers);
}

TEST_CASE("recorder without observations throws") {
    SparsityRecorder rec;
    CHECK_THROWS_AS(rec.report(), std::invalid_argument);
}

TEST_CASE("report merge pools token counts") {
    SparsityReport a, b;
    a.cells[{0, "down_in"}] = {1.5, 3};
    b.cells[{0, "down_in"}] = {0.5, 1};
    b.cells[{1, "down_in"}] = {1.0, 2};
    a.merge(b);
    CHECK(a.cells[{0, "down_in"}].mean() == doctest::Approx(0.5));
    CHECK(a.cells[{0, "down_in"}].tokens == 4);
    CHECK(a.site_mean("down_in") == doctest::Approx(0.5 * (0.5 + 0.5)));
}

TEST_CASE("preact recorder merged equals the sum of layers") {
    const Model m = relu_model(5);
    const auto toks = random_tokens(10, m.config.vocab_size, 6);
    PreactRecorder rec(m.config.n_layers);
    ForwardOptions opt;
    opt.hooks = &rec.hooks();
    forward(m, toks, opt);

    const auto merged = rec.merged();
    std::uint64_t per_layer_total = 0;
    for (std::size_t l = 0; l < m.config.n_layers; ++l)
        per_layer_total += rec.layer(l).total();
    CHECK(merged.total() == per_layer_total);
    CHECK(merged.total() == toks.size() * m.config.n_layers * m.config.d_ffn);
}

TEST_CASE("active set inserts are idempotent") {
    ActiveSet s(2, 8);
    CHECK(s.insert(0, {1, 3, 5}) == 3);
    CHECK(s.insert(0, {3, 5, 7}) == 1);
    CHECK(s.size(0) == 4);
    CHECK(s.size(1) == 0);
    CHECK(s.contains(0, 7));
    CHECK_FALSE(s.contains(1, 7));
    CHECK_THROWS_AS(s.insert(0, {8}), std::invalid_argument);
}

TEST_CASE("update_trace tracks the exact union") {
    AggregatedTrace trace;
    ActiveSet active(1, 4);
    update_trace(trace, active, {{0, 1}});
    update_trace(trace, active, {{1, 2}});
    update_trace(trace, active, {{}});
    CHECK(trace.per_layer[0] == std::vector<double>{0.5, 0.25, 0.25});
}

TEST_CASE("aggregated trace is non-increasing and consistent with a replay") {
    const Model m = relu_model(9);
    const auto toks = random_tokens(24, m.config.vocab_size, 10);
    const auto trace = record_aggregated_trace(m, toks);
    REQUIRE(trace.t_max() == toks.size());
    REQUIRE(trace.per_layer.size() == m.config.n_layers);
    for (const auto& layer : trace.per_layer) {
        for (std::size_t t = 1; t < layer.size(); ++t) CHECK(layer[t] <= layer[t - 1]);
        CHECK(layer.front() < 1.0);
        CHECK(layer.front() > 0.0);  // an untrained relu model is roughly half active
    }

    // oracle replay: accumulate masks from a plain hooked forward
    std::vector<std::vector<bool>> seen(m.config.n_layers,
                                        std::vector<bool>(m.config.d_ffn, false));
    std::vector<std::vector<double>> replay(m.config.n_layers);
    std::vector<std::size_t> pos(m.config.n_layers, 0);
    ForwardHooks hooks;
    hooks.on_site_input = [&](std::size_t l, const std::string& site,
                              std::span<const double> v) {
        if (site != "down_in") return;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (std::abs(v[i]) > 0.0) seen[l][i] = true;
        std::size_t used = 0;
        for (bool b : seen[l])
            if (b) ++used;
        replay[l].push_back(1.0 - static_cast<double>(used) / v.size());
        ++pos[l];
    };
    ForwardOptions opt;
    opt.hooks = &hooks;
    forward(m, toks, opt);
    for (std::size_t l = 0; l < m.config.n_layers; ++l)
        for (std::size_t t = 0; t < toks.size(); ++t)
            CHECK(trace.per_layer[l][t] == doctest::Approx(replay[l][t]).epsilon(1e-12));
}

TEST_CASE("random baseline is the closed form power") {
    CHECK(random_baseline(0.9, 1) == doctest::Approx(0.9));
    CHECK(random_baseline(0.9, 10) == doctest::Approx(std::pow(0.9, 10.0)));
    CHECK(random_baseline(0.0, 3) == 0.0);
    CHECK(random_baseline(1.0, 100) == 1.0);
    CHECK_THROWS_AS(random_baseline(1.1, 2), std::invalid_argument);
}

TEST_CASE("measured aggregation beats the random baseline on a real model") {
    // Real activation patterns are correlated across tokens, so the measured
    // unused fraction should sit above the i.i.d. random curve at horizon.
    const Model m = relu_model(13);
    const auto toks = random_tokens(30, m.config.vocab_size, 14);
    const auto trace = record_aggregated_trace(m, toks);

    SparsityRecorder rec;
    ForwardOptions opt;
    opt.hooks = &rec.hooks();
    forward(m, toks, opt);
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        const double s = rec.report().mean(l, "down_in");
        CHECK(trace.per_layer[l].back() >= random_baseline(s, toks.size()) - 1e-9);
    }
}
