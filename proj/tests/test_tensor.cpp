#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "uniadapter/gradcheck.hpp"
#include "uniadapter/tensor.hpp"

using namespace uniadapter;

using Tf = Tensor<float>;
using Td = Tensor<double>;

namespace {

template <typename R>
Tensor<R> make(Shape shape, std::vector<R> vals) {
    return Tensor<R>(std::move(shape), std::move(vals));
}

}  // namespace

TEST_CASE("matmul identity and hand oracle") {
    auto eye = make<double>({2, 2}, {1, 0, 0, 1});
    auto a = make<double>({2, 2}, {1, 2, 3, 4});
    auto out = matmul(eye, a);
    CHECK(out.data() == std::vector<double>{1, 2, 3, 4});

    // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
    auto b = make<double>({2, 1}, {5, 6});
    auto prod = matmul(a, b);
    CHECK(prod.at(0, 0) == 17.0);
    CHECK(prod.at(1, 0) == 39.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = make<double>({2, 3}, std::vector<double>(6, 1.0));
    auto b = make<double>({4, 5}, std::vector<double>(20, 1.0));
    CHECK_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[2x3]") &&
                                                         Catch::Matchers::ContainsSubstring("[4x5]")));
}

TEST_CASE("matmul gradient matches ones x B^T and finite differences") {
    Rng rng(7);
    auto a = Td::randn({3, 4}, rng);
    auto b = Td::randn({4, 2}, rng);
    a.set_requires_grad(true);

    Tape<double> tape;
    {
        AutogradScope<double> scope(tape);
        auto loss = sum_all(matmul(a, b));
        tape.backward(loss);
    }
    // d sum(AB) / dA = ones(m,n) * B^T
    auto expect = matmul(Td::full({3, 2}, 1.0), transpose(b));
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK_THAT(a.grad()[i], Catch::Matchers::WithinAbs(expect.data()[i], 1e-12));

    auto report = grad_check<double>(
        "matmul", [](const std::vector<Td>& in) { return sum_all(matmul(in[0], in[1])); },
        {Td::randn({3, 4}, rng), Td::randn({4, 2}, rng)});
    CHECK(report.pass);
}

TEST_CASE("softmax closed forms") {
    for (double c : {-3.0, 0.0, 12.5}) {
        auto out = softmax_rows(make<double>({3}, {c, c, c}));
        for (double v : out.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    }
    auto out = softmax_rows(make<double>({2}, {0.0, std::log(2.0)}));
    CHECK_THAT(out.data()[0], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    CHECK_THAT(out.data()[1], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
}

TEST_CASE("softmax shift invariance and normalization") {
    Rng rng(11);
    for (int iter = 0; iter < 20; ++iter) {
        // Outputs stay positive and sum to 1 across the full |x| <= 50 range.
        auto x = Tf::uniform({17}, rng, -50.f, 50.f);
        auto y0 = softmax_rows(x);
        float sum = 0.f;
        for (std::size_t i = 0; i < 17; ++i) {
            CHECK(y0.data()[i] > 0.f);
            sum += y0.data()[i];
        }
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0f, 1e-6));

        // Shift invariance at 1e-7 needs 64-bit accumulation.
        auto xd = Td::uniform({17}, rng, -50.0, 50.0);
        std::vector<double> shifted = xd.data();
        for (auto& v : shifted) v += 13.25;
        auto z0 = softmax_rows(xd);
        auto z1 = softmax_rows(make<double>({17}, std::move(shifted)));
        for (std::size_t i = 0; i < 17; ++i)
            CHECK_THAT(z1.data()[i], Catch::Matchers::WithinAbs(z0.data()[i], 1e-7));
    }
    CHECK_THROWS_AS(softmax_rows(make<double>({0}, {})), DomainError);
}

TEST_CASE("causal softmax masks strictly upper entries") {
    auto x = Td::full({3, 3}, 1.0);
    auto y = softmax_rows(x, /*causal=*/true);
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(0, 2) == 0.0);
    CHECK(y.at(1, 2) == 0.0);
    CHECK_THAT(y.at(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(y.at(1, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THAT(y.at(2, 0), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("layer_norm closed forms") {
    auto gamma1 = Td::full({2}, 1.0);
    auto beta0 = Td::zeros({2});

    // Constant row: eps guards the zero variance, output is all zeros.
    auto constant = layer_norm_rows(make<double>({1, 2}, {5.0, 5.0}), gamma1, beta0);
    CHECK_THAT(constant.at(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-5));
    CHECK_THAT(constant.at(0, 1), Catch::Matchers::WithinAbs(0.0, 1e-5));

    auto exact = layer_norm_rows(make<double>({1, 2}, {1.0, 3.0}), gamma1, beta0, 0.0);
    CHECK_THAT(exact.at(0, 0), Catch::Matchers::WithinAbs(-1.0, 1e-12));
    CHECK_THAT(exact.at(0, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));

    auto beta = make<double>({2}, {4.0, -2.0});
    auto gz = layer_norm_rows(make<double>({1, 2}, {1.0, 3.0}), Td::zeros({2}), beta);
    CHECK(gz.at(0, 0) == 4.0);
    CHECK(gz.at(0, 1) == -2.0);

    // Per-row standardization before the affine map.
    Rng rng(3);
    auto x = Td::randn({4, 8}, rng);
    auto norm = layer_norm_rows(x, Td::full({8}, 1.0), Td::zeros({8}));
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mean += norm.at(i, j);
        mean /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (norm.at(i, j) - mean) * (norm.at(i, j) - mean);
        var /= 8;
        CHECK_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-5));
        CHECK_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));
    }
}

TEST_CASE("activation spot values") {
    auto r = relu(make<double>({2}, {-1.0, 2.0}));
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 2.0);

    // Uniform 4-way logits with any correct class cost ln 4.
    auto ce = softmax_cross_entropy(Td::zeros({1, 4}), {2});
    CHECK_THAT(ce.item(), Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));

    auto cat = concat_cols<double>({Td::zeros({2, 3}), Td::zeros({2, 5})});
    CHECK(cat.shape() == Shape{2, 8});
}

TEST_CASE("embedding lookup rejects out-of-range indices") {
    auto table = Td::zeros({4, 3});
    CHECK_THROWS_AS(embedding_lookup(table, {0, 4}), IndexError);
    auto picked = embedding_lookup(table, {3, 0, 3});
    CHECK(picked.shape() == Shape{3, 3});
}

TEST_CASE("backward basics") {
    Rng rng(5);
    auto x = Td::randn({2, 3}, rng);
    x.set_requires_grad(true);

    SECTION("sum gives ones") {
        Tape<double> tape;
        AutogradScope<double> scope(tape);
        tape.backward(sum_all(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }

    SECTION("sum of squares gives 2x") {
        Tape<double> tape;
        AutogradScope<double> scope(tape);
        tape.backward(sum_all(mul(x, x)));
        for (std::size_t i = 0; i < x.numel(); ++i)
            CHECK_THAT(x.grad()[i], Catch::Matchers::WithinAbs(2.0 * x.data()[i], 1e-12));
    }

    SECTION("repeated backward accumulates on leaves") {
        Tape<double> tape;
        AutogradScope<double> scope(tape);
        auto loss = sum_all(mul(x, x));
        tape.backward(loss);
        tape.backward(loss);
        for (std::size_t i = 0; i < x.numel(); ++i)
            CHECK_THAT(x.grad()[i], Catch::Matchers::WithinAbs(4.0 * x.data()[i], 1e-12));
    }

    SECTION("non-scalar loss is rejected") {
        Tape<double> tape;
        AutogradScope<double> scope(tape);
        auto y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }

    SECTION("empty tape is rejected") {
        Tape<double> tape;
        CHECK_THROWS_AS(tape.backward(Td::scalar(1.0)), ContractError);
    }
}

TEST_CASE("frozen leaves receive no gradient storage") {
    Rng rng(9);
    auto w = Td::randn({3, 3}, rng);  // frozen
    auto x = Td::randn({2, 3}, rng);
    x.set_requires_grad(true);
    Tape<double> tape;
    {
        AutogradScope<double> scope(tape);
        tape.backward(sum_all(matmul(x, w)));
    }
    CHECK(x.has_grad());
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("three-layer MLP gradients match finite differences") {
    Rng rng(21);
    auto run = [](const std::vector<Td>& in) {
        // x -> relu(x W1) -> gelu(. W2) -> tanh(. W3) -> mean
        auto h1 = relu(matmul(in[0], in[1]));
        auto h2 = gelu(matmul(h1, in[2]));
        auto h3 = tanh_op(matmul(h2, in[3]));
        return mean_all(h3);
    };
    // Keep relu inputs away from the kink so central differences are valid.
    auto x = Td::uniform({3, 5}, rng, 0.2, 1.0);
    auto w1 = Td::randn({5, 6}, rng, 0.7);
    auto w2 = Td::randn({6, 4}, rng, 0.7);
    auto w3 = Td::randn({4, 2}, rng, 0.7);
    auto report = grad_check<double>("mlp3", run, {x, w1, w2, w3});
    INFO(report.line());
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
    Rng rng(33);
    auto gamma = Td::uniform({6}, rng, 0.5, 1.5);
    auto beta = Td::randn({6}, rng, 0.3);

    std::vector<GradCheckReport> reports;
    reports.push_back(grad_check<double>(
        "matmul", [](const std::vector<Td>& in) { return mean_all(matmul(in[0], in[1])); },
        {Td::randn({3, 4}, rng), Td::randn({4, 5}, rng)}));
    reports.push_back(grad_check<double>(
        "transpose", [](const std::vector<Td>& in) { return mean_all(mul(transpose(in[0]), in[1])); },
        {Td::randn({3, 4}, rng), Td::randn({4, 3}, rng)}));
    reports.push_back(grad_check<double>(
        "add", [](const std::vector<Td>& in) { return mean_all(mul(add(in[0], in[1]), in[0])); },
        {Td::randn({3, 4}, rng), Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "sub", [](const std::vector<Td>& in) { return mean_all(mul(sub(in[0], in[1]), in[0])); },
        {Td::randn({3, 4}, rng), Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "scale", [](const std::vector<Td>& in) { return mean_all(scale(in[0], 0.37)); }, {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "relu", [](const std::vector<Td>& in) { return mean_all(relu(in[0])); },
        {Td::uniform({3, 4}, rng, 0.1, 2.0)}));
    reports.push_back(grad_check<double>(
        "gelu", [](const std::vector<Td>& in) { return mean_all(gelu(in[0])); }, {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "tanh", [](const std::vector<Td>& in) { return mean_all(tanh_op(in[0])); }, {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "exp", [](const std::vector<Td>& in) { return mean_all(exp_op(in[0])); }, {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "log", [](const std::vector<Td>& in) { return mean_all(log_op(in[0])); },
        {Td::uniform({3, 4}, rng, 0.5, 2.0)}));
    reports.push_back(grad_check<double>(
        "recip", [](const std::vector<Td>& in) { return mean_all(recip(in[0])); },
        {Td::uniform({3, 4}, rng, 0.5, 2.0)}));
    reports.push_back(grad_check<double>(
        "softmax", [](const std::vector<Td>& in) { return mean_all(mul(softmax_rows(in[0]), in[1])); },
        {Td::randn({3, 5}, rng), Td::randn({3, 5}, rng)}));
    reports.push_back(grad_check<double>(
        "softmax_causal",
        [](const std::vector<Td>& in) { return mean_all(mul(softmax_rows(in[0], true), in[1])); },
        {Td::randn({4, 4}, rng), Td::randn({4, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "layer_norm",
        [](const std::vector<Td>& in) { return mean_all(mul(layer_norm_rows(in[0], in[1], in[2]), in[3])); },
        {Td::randn({3, 6}, rng), gamma, beta, Td::randn({3, 6}, rng)}));
    reports.push_back(grad_check<double>(
        "l2_normalize",
        [](const std::vector<Td>& in) { return mean_all(mul(l2_normalize_rows(in[0]), in[1])); },
        {Td::randn({3, 6}, rng), Td::randn({3, 6}, rng)}));
    reports.push_back(grad_check<double>(
        "slice_rows", [](const std::vector<Td>& in) { return mean_all(slice_rows(in[0], 1, 2)); },
        {Td::randn({4, 3}, rng)}));
    reports.push_back(grad_check<double>(
        "slice_cols", [](const std::vector<Td>& in) { return mean_all(slice_cols(in[0], 1, 2)); },
        {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "concat_rows", [](const std::vector<Td>& in) { return mean_all(concat_rows<double>({in[0], in[1]})); },
        {Td::randn({2, 3}, rng), Td::randn({4, 3}, rng)}));
    reports.push_back(grad_check<double>(
        "concat_cols", [](const std::vector<Td>& in) { return mean_all(concat_cols<double>({in[0], in[1]})); },
        {Td::randn({2, 3}, rng), Td::randn({2, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "embedding", [](const std::vector<Td>& in) { return mean_all(embedding_lookup(in[0], {0, 2, 2, 1})); },
        {Td::randn({3, 4}, rng)}));
    reports.push_back(grad_check<double>(
        "mean_rows", [](const std::vector<Td>& in) { return mean_all(mul(mean_rows(in[0]), in[1])); },
        {Td::randn({4, 3}, rng), Td::randn({1, 3}, rng)}));
    reports.push_back(grad_check<double>(
        "scale_rows", [](const std::vector<Td>& in) { return mean_all(scale_rows(in[0], in[1])); },
        {Td::randn({4, 3}, rng), Td::randn({4}, rng)}));
    reports.push_back(grad_check<double>(
        "cross_entropy",
        [](const std::vector<Td>& in) { return softmax_cross_entropy(in[0], {1, 0, 2}); },
        {Td::randn({3, 4}, rng)}));

    for (const auto& r : reports) {
        INFO(r.line());
        CHECK(r.pass);
    }
}

TEST_CASE("finite-difference checker flags a corrupted backward rule") {
    // Hand-rolled op with a deliberately wrong backward: y = 2x recorded as
    // dy/dx = 3. The checker must report the failure.
    auto corrupt_double = [](const Td& a) {
        Td out(a.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = 2.0 * a.data()[i];
        auto* tape = Tape<double>::active();
        if (tape && a.requires_grad()) {
            auto an = a.node();
            auto on = out.node();
            on->requires_grad = true;
            on->leaf = false;
            tape->record(on, [an, on]() {
                an->ensure_grad();
                for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += 3.0 * on->grad[i];
            });
        }
        return out;
    };
    Rng rng(1);
    auto report = grad_check<double>(
        "corrupted_double", [&](const std::vector<Td>& in) { return mean_all(corrupt_double(in[0])); },
        {Td::randn({2, 3}, rng)});
    CHECK_FALSE(report.pass);
    CHECK(report.name == "corrupted_double");
}

TEST_CASE("determinism: same seed, same op sequence, identical bits") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = Tf::randn({4, 8}, rng);
        auto w = Tf::randn({8, 8}, rng);
        auto y = softmax_rows(gelu(matmul(x, w)));
        return y.data();
    };
    auto a = run(42), b = run(42), c = run(43);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("debug numeric checks surface non-finite values") {
    debug_numeric_checks() = true;
    auto big = Td::full({1, 2}, 1e308);
    CHECK_THROWS_AS(mul(big, big), NumericsError);
    debug_numeric_checks() = false;
    CHECK_NOTHROW(mul(big, big));
}
