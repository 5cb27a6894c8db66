// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duogen/diffusion.hpp"

using namespace duogen;

TEST_CASE("schedule endpoints and invariants") {
    SECTION("T=1 single step product") {
        auto s = make_schedule(1, 0.02, 0.02);
        REQUIRE(s.alpha_bar.size() == 2);
        REQUIRE(s.alpha_bar[0] == 1.0);
        REQUIRE(s.alpha_bar[1] == Catch::Approx(1.0 - 0.02).margin(1e-15));
    }
    SECTION("alpha_bar strictly decreasing, betas in range") {
        auto s = make_schedule(100, 1e-4, 0.02);
        for (int t = 1; t <= 100; ++t) {
            REQUIRE(s.beta[t] > 0.0);
            REQUIRE(s.beta[t] < 1.0);
            REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            REQUIRE(s.alpha_bar[t] == Catch::Approx(s.alpha_bar[t - 1] * s.alpha[t]).margin(1e-12));
            REQUIRE(s.sigma[t] == Catch::Approx(std::sqrt(s.beta[t])).margin(1e-15));
        }
    }
    SECTION("sequential product oracle") {
        auto s = make_schedule(100, 1e-4, 0.02);
        double running = 1.0;
        for (int t = 1; t <= 100; ++t) {
            double beta = 1e-4 + (0.02 - 1e-4) * double(t - 1) / 99.0;
            running *= 1.0 - beta;
            REQUIRE(s.alpha_bar[t] == Catch::Approx(running).margin(1e-12));
        }
    }
    SECTION("bad ranges rejected") {
        REQUIRE_THROWS_AS(make_schedule(0, 1e-4, 0.02), ConfigError);
        REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
        REQUIRE_THROWS_AS(make_schedule(10, 0.03, 0.02), ConfigError);
        REQUIRE_THROWS_AS(make_schedule(10, 1e-4, 1.0), ConfigError);
    }
}

TEST_CASE("q_sample forms") {
    auto sched = make_schedule(100, 1e-4, 0.02);
    Rng rng(5);
    auto x0 = Tensor::randn({4, 4}, rng);
    auto eps = Tensor::randn({4, 4}, rng);

    SECTION("t=0 returns x0 exactly") {
        auto xt = q_sample(x0, 0, eps, sched);
        for (size_t i = 0; i < x0.numel(); ++i) REQUIRE(xt.at(i) == x0.at(i));
    }
    SECTION("zero eps scales by sqrt(alpha_bar)") {
        auto xt = q_sample(x0, 37, Tensor::zeros({4, 4}), sched);
        double f = std::sqrt(sched.alpha_bar[37]);
        for (size_t i = 0; i < x0.numel(); ++i) REQUIRE(xt.at(i) == Catch::Approx(f * x0.at(i)).margin(1e-15));
    }
    SECTION("monte carlo variance matches 1 - alpha_bar") {
        int t = 60;
        auto x0s = Tensor::from_data({1}, {0.7});
        Rng mc(99);
        const int n = 100000;
        double sum = 0, sumsq = 0;
        for (int i = 0; i < n; ++i) {
            auto e = Tensor::from_data({1}, {mc.normal()});
            double v = q_sample(x0s, t, e, sched).at(size_t(0));
            sum += v;
            sumsq += v * v;
        }
        double mean = sum / n;
        double var = sumsq / n - mean * mean;
        REQUIRE(var == Catch::Approx(1.0 - sched.alpha_bar[t]).epsilon(0.02));
    }
    SECTION("t out of range") {
        REQUIRE_THROWS_AS(q_sample(x0, -1, eps, sched), ConfigError);
        REQUIRE_THROWS_AS(q_sample(x0, 101, eps, sched), ConfigError);
    }
}

TEST_CASE("cfg_combine endpoints and arithmetic") {
    auto u = Tensor::from_data({3}, {0.0, 0.5, -1.0});
    auto c = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    auto s1 = cfg_combine(u, c, 1.0);
    for (size_t i = 0; i < 3; ++i) REQUIRE(s1.at(i) == c.at(i));
    auto s0 = cfg_combine(u, c, 0.0);
    for (size_t i = 0; i < 3; ++i) REQUIRE(s0.at(i) == u.at(i));
    auto z = Tensor::zeros({1});
    auto one = Tensor::ones({1});
    REQUIRE(cfg_combine(z, one, 2.0).at(size_t(0)) == 2.0);
    REQUIRE_THROWS_AS(cfg_combine(u, Tensor::zeros({2}), 1.0), ShapeError);
}

TEST_CASE("ddpm_step identities") {
    SECTION("tiny beta leaves x nearly unchanged") {
        auto s = make_schedule(1, 1e-12, 1e-12);
        auto xt = Tensor::from_data({2}, {0.4, -0.9});
        auto eh = Tensor::from_data({2}, {1.0, 1.0});
        auto prev = ddpm_step(xt, eh, 1, s, Tensor::zeros({2}));
        for (size_t i = 0; i < 2; ++i) REQUIRE(prev.at(i) == Catch::Approx(xt.at(i)).margin(1e-5));
    }
    SECTION("t=1 with true eps and sigma zero inverts q_sample") {
        auto s = make_schedule(100, 1e-4, 0.02);
        Rng rng(11);
        auto x0 = Tensor::randn({4, 4}, rng);
        auto eps = Tensor::randn({4, 4}, rng);
        auto x1 = q_sample(x0, 1, eps, s);
        auto rec = ddpm_step(x1, eps, 1, s, Tensor::zeros({4, 4}));
        for (size_t i = 0; i < x0.numel(); ++i) REQUIRE(rec.at(i) == Catch::Approx(x0.at(i)).margin(1e-10));
    }
    SECTION("matches scalar formula oracle") {
        auto s = make_schedule(50, 1e-3, 0.05);
        Rng rng(13);
        auto xt = Tensor::randn({3, 3}, rng);
        auto eh = Tensor::randn({3, 3}, rng);
        auto z = Tensor::randn({3, 3}, rng);
        for (int t : {1, 17, 50}) {
            auto prev = ddpm_step(xt, eh, t, s, z);
            for (size_t i = 0; i < xt.numel(); ++i) {
                double mu = (xt.at(i) - s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]) * eh.at(i)) /
                            std::sqrt(s.alpha[t]);
                REQUIRE(prev.at(i) == Catch::Approx(mu + s.sigma[t] * z.at(i)).margin(1e-12));
            }
        }
    }
    SECTION("t bounds") {
        auto s = make_schedule(10, 1e-4, 0.02);
        auto x = Tensor::zeros({1});
        REQUIRE_THROWS_AS(ddpm_step(x, x, 0, s, x), ConfigError);
        REQUIRE_THROWS_AS(ddpm_step(x, x, 11, s, x), ConfigError);
    }
}

TEST_CASE("sample_loop shape and determinism") {
    auto sched = make_schedule(20, 1e-4, 0.02);
    GuidanceConfig guide;
    DenoiseFn zero_denoiser = [](const Tensor& x, int, const Tensor*, int) { return Tensor::zeros(x.shape()); };
    auto a = sample_loop(zero_denoiser, {4, 4}, nullptr, sched, guide, 7);
    REQUIRE(a.shape() == std::vector<int>{4, 4});
    auto b = sample_loop(zero_denoiser, {4, 4}, nullptr, sched, guide, 7);
    REQUIRE(a.data() == b.data());
    auto c = sample_loop(zero_denoiser, {4, 4}, nullptr, sched, guide, 8);
    REQUIRE(a.data() != c.data());
}

TEST_CASE("sample_loop rejects wrong denoiser output shape") {
    auto sched = make_schedule(5, 1e-4, 0.02);
    GuidanceConfig guide;
    DenoiseFn bad = [](const Tensor&, int, const Tensor*, int) { return Tensor::zeros({2, 2}); };
    REQUIRE_THROWS_AS(sample_loop(bad, {4, 4}, nullptr, sched, guide, 1), ShapeError);
}

TEST_CASE("sample_loop with exact gaussian denoiser recovers data mean") {
    const double data_mean = 1.5, data_std = 0.5;
    // Chain inversion assumes x_T is close to standard normal, so this oracle
    // check runs a schedule whose terminal alpha_bar is ~3e-7.
    auto sched = make_schedule(100, 1e-3, 0.3);
    GuidanceConfig guide;
    // Posterior-exact noise prediction for x0 ~ N(m, s^2):
    // E[x0|xt] = (sqrt(ab) s^2 xt + (1-ab) m) / (ab s^2 + 1-ab)
    // eps_hat  = (xt - sqrt(ab) E[x0|xt]) / sqrt(1-ab)
    DenoiseFn oracle = [&](const Tensor& x, int t, const Tensor*, int) {
        double ab = sched.alpha_bar[static_cast<size_t>(t)];
        double denom = ab * data_std * data_std + (1.0 - ab);
        std::vector<double> out(x.numel());
        for (size_t i = 0; i < x.numel(); ++i) {
            double x0_hat =
                (std::sqrt(ab) * data_std * data_std * x.at(i) + (1.0 - ab) * data_mean) / denom;
            out[i] = (x.at(i) - std::sqrt(ab) * x0_hat) / std::sqrt(1.0 - ab);
        }
        return Tensor::from_data(x.shape(), std::move(out));
    };
    const int n = 10000;
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += sample_loop(oracle, {1, 1}, nullptr, sched, guide, 1000 + i).at(size_t(0));
    double mean = sum / n;
    double se = data_std / std::sqrt(double(n));
    REQUIRE(std::fabs(mean - data_mean) < 3.0 * se);
}

TEST_CASE("guidance branches exercise both uncond modes") {
    auto sched = make_schedule(10, 1e-4, 0.02);
    auto cond = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
    int uncond_calls = 0;
    std::vector<double> seen_uncond;
    DenoiseFn probe = [&](const Tensor& x, int, const Tensor* c, int ct) {
        if (ct == sched.T && c) {
            ++uncond_calls;
            seen_uncond.assign(c->data().begin(), c->data().end());
        }
        return Tensor::zeros(x.shape());
    };

    GuidanceConfig g;
    g.scale = 2.0;
    g.uncond_mode = UncondMode::null_token;
    sample_loop(probe, {2, 2}, &cond, sched, g, 3);
    REQUIRE(uncond_calls == 10);
    for (double v : seen_uncond) REQUIRE(v == 0.0);

    uncond_calls = 0;
    g.uncond_mode = UncondMode::max_noise_condition;
    sample_loop(probe, {2, 2}, &cond, sched, g, 3);
    REQUIRE(uncond_calls == 10);
    bool all_zero = true;
    for (double v : seen_uncond)
        if (v != 0.0) all_zero = false;
    REQUIRE_FALSE(all_zero);

    uncond_calls = 0;
    g.scale = 1.0;
    sample_loop(probe, {2, 2}, &cond, sched, g, 3);
    REQUIRE(uncond_calls == 0);
}

TEST_CASE("batched sampling is deterministic and shaped per sample") {
    auto sched = make_schedule(15, 1e-4, 0.02);
    GuidanceConfig guide;
    BatchDenoiseFn zero = [](const Tensor& x, int, const std::vector<const Tensor*>&, int) {
        return Tensor::zeros(x.shape());
    };
    auto out1 = sample_loop_batch(zero, {4, 4}, {}, 3, sched, guide, 21);
    REQUIRE(out1.size() == 3);
    for (auto& o : out1) REQUIRE(o.shape() == std::vector<int>{4, 4});
    auto out2 = sample_loop_batch(zero, {4, 4}, {}, 3, sched, guide, 21);
    for (size_t i = 0; i < 3; ++i) REQUIRE(out1[i].data() == out2[i].data());
    REQUIRE(out1[0].data() != out1[1].data());
}

TEST_CASE("uncond mode parser") {
    REQUIRE(parse_uncond_mode("null-token") == UncondMode::null_token);
    REQUIRE(parse_uncond_mode("max-noise-condition") == UncondMode::max_noise_condition);
    REQUIRE_THROWS_AS(parse_uncond_mode("bogus"), ConfigError);
}
