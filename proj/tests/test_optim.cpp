#include <catch2/catch_amalgamated.hpp>

#include "uniadapter/optim.hpp"

using namespace uniadapter;
using Td = Tensor<double>;

TEST_CASE("adamw single step matches the hand-computed update") {
    ParameterStore<double> store;
    auto& w = store.add("w", Td({2}, {1.0, -2.0}), true);
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.01;
    AdamW<double> opt(store, cfg);
    CHECK(opt.parameter_count() == 2);

    {
        Tape<double> tape;
        AutogradScope<double> scope(tape);
        tape.backward(sum_all(mul(w, w)));  // grad = 2w = [2, -4]
    }
    opt.step(cfg.lr);

    // Hand: m = 0.1 g, v = 0.001 g^2, mhat = g, vhat = g^2,
    // theta -= lr (g/|g| / (1 + eps/|g|) + wd theta) ~= lr (sign(g) + wd theta)
    auto expect = [&](double theta, double g) {
        double m = 0.1 * g, v = 0.001 * g * g;
        double mhat = m / 0.1, vhat = v / 0.001;
        return theta - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * theta);
    };
    CHECK_THAT(w.data()[0], Catch::Matchers::WithinAbs(expect(1.0, 2.0), 1e-12));
    CHECK_THAT(w.data()[1], Catch::Matchers::WithinAbs(expect(-2.0, -4.0), 1e-12));
    CHECK_FALSE(w.has_grad());  // cleared by the step
}

TEST_CASE("missing gradients apply pure decoupled weight decay") {
    ParameterStore<double> store;
    auto& w = store.add("w", Td({1}, {4.0}), true);
    OptimizerConfig cfg;
    cfg.lr = 0.5;
    cfg.weight_decay = 0.1;
    AdamW<double> opt(store, cfg);
    opt.step(cfg.lr);
    CHECK_THAT(w.data()[0], Catch::Matchers::WithinAbs(4.0 - 0.5 * 0.1 * 4.0, 1e-12));
}

TEST_CASE("optimizer ignores frozen and alias entries") {
    ParameterStore<double> store;
    store.add("a", Td({2}, {1.0, 1.0}), true);
    store.alias("b", "a");
    store.add("frozen", Td({3}, {1, 2, 3}), false);
    AdamW<double> opt(store, OptimizerConfig{});
    CHECK(opt.parameter_count() == 2);  // canonical trainable only
}

TEST_CASE("shared parameters stay byte-equal through optimizer steps") {
    ParameterStore<double> store;
    auto& a = store.add("a", Td({4}, {1, 2, 3, 4}), true);
    store.alias("b", "a");
    AdamW<double> opt(store, OptimizerConfig{});
    for (int s = 0; s < 3; ++s) {
        Tape<double> tape;
        {
            AutogradScope<double> scope(tape);
            // Touch the weight through both names, as sharing does.
            tape.backward(add(sum_all(mul(store.get("a"), store.get("a"))), sum_all(store.get("b"))));
        }
        opt.step(1e-2);
        CHECK(store.get("a").data() == store.get("b").data());
        CHECK(store.get("a").same_storage(store.get("b")));
    }
    (void)a;
}

TEST_CASE("cosine schedule with warmup") {
    const double base = 1.0;
    const std::size_t total = 200;  // 5% warmup = 10 steps
    CHECK_THAT(cosine_warmup_lr(base, 0, total), Catch::Matchers::WithinAbs(0.1, 1e-12));
    CHECK_THAT(cosine_warmup_lr(base, 9, total), Catch::Matchers::WithinAbs(1.0, 1e-12));
    // Midpoint of the decay phase sits at half the base rate.
    CHECK_THAT(cosine_warmup_lr(base, 10 + 95, total), Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK(cosine_warmup_lr(base, 199, total) < 0.01);
    // Monotone decay after warmup.
    for (std::size_t s = 10; s + 1 < total; ++s)
        CHECK(cosine_warmup_lr(base, s, total) >= cosine_warmup_lr(base, s + 1, total));
}
