#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "relusparse/activations.hpp"

using namespace relusparse;

TEST_CASE("silu is bitwise identical to the gated form at beta 1") {
    const auto silu = ActivationSpec::silu();
    const auto gated1 = ActivationSpec::gated(1.0);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> dist(-20.0, 20.0);
    for (int i = 0; i < 2000; ++i) {
        const double x = dist(rng);
        CHECK(apply_scalar(silu, x) == apply_scalar(gated1, x));
        CHECK(derivative_scalar(silu, x) == derivative_scalar(gated1, x));
    }
}

TEST_CASE("beta 1.7 tracks exact gelu within 0.03 on [-6, 6]") {
    const auto near_gelu = ActivationSpec::gated(1.7);
    const auto gelu = ActivationSpec::gelu();
    double worst = 0.0;
    for (int i = 0; i <= 12000; ++i) {
        const double x = -6.0 + i * 12.0 / 12000.0;
        worst = std::max(worst, std::abs(apply_scalar(near_gelu, x) - apply_scalar(gelu, x)));
    }
    CHECK(worst < 0.03);
    // a clearly wrong beta must not pass the same bound
    double off = 0.0;
    for (int i = 0; i <= 12000; ++i) {
        const double x = -6.0 + i * 12.0 / 12000.0;
        off = std::max(off, std::abs(apply_scalar(ActivationSpec::gated(8.0), x) -
                                     apply_scalar(gelu, x)));
    }
    CHECK(off > 0.03);
}

TEST_CASE("large beta approaches relu") {
    const auto steep = ActivationSpec::gated(1000.0);
    const auto relu = ActivationSpec::relu();
    for (double x : {-5.0, -1.0, -0.2, 0.2, 1.0, 5.0})
        CHECK(std::abs(apply_scalar(steep, x) - apply_scalar(relu, x)) < 1e-3);
}

TEST_CASE("gelu matches the erf closed form") {
    for (double x : {-3.0, -1.0, 0.0, 0.5, 2.0}) {
        const double phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        CHECK(apply_scalar(ActivationSpec::gelu(), x) == doctest::Approx(x * phi).epsilon(1e-15));
    }
    CHECK(apply_scalar(ActivationSpec::gelu(), 0.0) == 0.0);
}

TEST_CASE("derivatives match central differences away from kinks") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> dist(-4.0, 4.0);
    const std::vector<ActivationSpec> specs = {
        ActivationSpec::gated(0.7), ActivationSpec::gated(1.7), ActivationSpec::silu(),
        ActivationSpec::gelu(), ActivationSpec::relu(), ActivationSpec::shifted_relu(0.5)};
    const double h = 1e-6;
    for (const auto& spec : specs) {
        for (int i = 0; i < 500; ++i) {
            double x = dist(rng);
            if (spec.kind == ActivationKind::Relu && std::abs(x) < 1e-3) continue;
            if (spec.kind == ActivationKind::ShiftedRelu && std::abs(x - spec.shift) < 1e-3)
                continue;
            const double fd =
                (apply_scalar(spec, x + h) - apply_scalar(spec, x - h)) / (2.0 * h);
            CHECK(derivative_scalar(spec, x) == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("relu kink derivative is zero") {
    CHECK(derivative_scalar(ActivationSpec::relu(), 0.0) == 0.0);
    CHECK(derivative_scalar(ActivationSpec::shifted_relu(1.0), 1.0) == 0.0);
}

TEST_CASE("shifted relu zeros everything at or below the shift") {
    const auto spec = ActivationSpec::shifted_relu(0.8);
    CHECK(apply_scalar(spec, 0.8) == 0.0);
    CHECK(apply_scalar(spec, 0.79) == 0.0);
    CHECK(apply_scalar(spec, -3.0) == 0.0);
    CHECK(apply_scalar(spec, 1.8) == doctest::Approx(1.0));
}

TEST_CASE("sparsity counts entries with magnitude <= tau") {
    const std::vector<double> v = {0.0, 0.01, -0.01, 0.5, -2.0};
    CHECK(sparsity(v) == doctest::Approx(0.2));
    CHECK(sparsity(v, 0.01) == doctest::Approx(0.6));
    CHECK_THROWS_AS(sparsity(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("choose_shift hits the target sparsity on a known distribution") {
    // preactivations uniform over [-2, 2]: the 0.9 quantile is 1.6
    PreactHistogram hist(-10.0, 10.0, 400);
    for (int i = 0; i < 100000; ++i) hist.add(-2.0 + 4.0 * i / 100000.0);
    const double b = choose_shift(hist, 0.9);
    CHECK(b == doctest::Approx(1.6).epsilon(0.02));

    // applying ReLU(x - b) then achieves at least the target sparsity
    std::size_t zeros = 0;
    const auto spec = ActivationSpec::shifted_relu(b);
    for (int i = 0; i < 100000; ++i)
        if (apply_scalar(spec, -2.0 + 4.0 * i / 100000.0) == 0.0) ++zeros;
    CHECK(zeros >= 90000);
}

TEST_CASE("json round trip") {
    for (const auto& spec :
         {ActivationSpec::gated(1.7), ActivationSpec::relu(), ActivationSpec::shifted_relu(0.3),
          ActivationSpec::gelu(), ActivationSpec::silu()}) {
        CHECK(ActivationSpec::from_json(spec.to_json()) == spec);
    }
    CHECK_THROWS_AS(ActivationSpec::from_json("{\"kind\":\"swish9\"}"), std::invalid_argument);
    CHECK_THROWS_AS(ActivationSpec::gated(0.0), std::invalid_argument);
}
