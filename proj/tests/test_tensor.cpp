#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "tavit/nn.hpp"

using namespace tavit;
using namespace tavit::testing;

TEST_CASE("elementwise arithmetic") {
    auto a = from_values<double>({2}, {1, 2});
    auto b = from_values<double>({2}, {3, 4});
    auto s = add(a, b);
    CHECK(s->data == std::vector<double>{4, 6});

    auto one = from_values<double>({1}, {1});
    auto x = from_values<double>({3}, {0.5, -2, 7});
    CHECK(mul(x, one)->data == x->data);

    auto z = sub(x, x);
    for (double v : z->data) CHECK(v == 0.0);

    CHECK_THROWS_AS(add(a, from_values<double>({3}, {1, 2, 3})), ContractError);
}

TEST_CASE("matmul oracle and identity") {
    auto a = from_values<double>({2, 2}, {1, 2, 3, 4});
    auto b = from_values<double>({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(a, b)->data == std::vector<double>{19, 22, 43, 50});

    auto eye = from_values<double>({2, 2}, {1, 0, 0, 1});
    CHECK(matmul(a, eye)->data == a->data);

    CHECK_THROWS_AS(matmul(a, from_values<double>({3, 2}, {1, 2, 3, 4, 5, 6})), ContractError);

    Rng rng(42);
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto err = finite_diff_check<double>(
        [&](const Tensor<double>& t) { return sum_all(matmul(t, w)); }, x, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("conv2d hand oracle") {
    auto x = make_tensor<double>({1, 1, 3, 3}, 1.0);
    auto w = make_tensor<double>({1, 1, 3, 3}, 1.0);
    auto y = conv2d<double>(x, w, nullptr, 1, 1);
    CHECK(y->data[4] == doctest::Approx(9).epsilon(1e-12));  // center
    CHECK(y->data[0] == doctest::Approx(4).epsilon(1e-12));  // corner

    // delta kernel reproduces the input
    Rng rng(7);
    auto xr = random_tensor({2, 1, 5, 5}, rng);
    auto delta = make_tensor<double>({1, 1, 3, 3}, 0.0);
    delta->data[4] = 1.0;
    CHECK(max_abs_diff(conv2d<double>(xr, delta, nullptr, 1, 1), xr) == 0.0);

    // stride-2 halving at the paper's input size
    auto big = make_tensor<double>({1, 1, 120, 120}, 0.0);
    auto k = make_tensor<double>({1, 1, 3, 3}, 0.0);
    auto half = conv2d<double>(big, k, nullptr, 2, 1);
    CHECK(half->shape == std::vector<int64_t>{1, 1, 60, 60});

    CHECK_THROWS_AS(conv2d<double>(make_tensor<double>({1, 1, 2, 2}), w, nullptr, 1, 0),
                    ContractError);
}

TEST_CASE("conv2d linearity") {
    Rng rng(3);
    auto x1 = random_tensor({1, 2, 6, 6}, rng);
    auto x2 = random_tensor({1, 2, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto lhs = conv2d<double>(add(x1, x2), w, nullptr, 1, 1);
    auto rhs = add(conv2d<double>(x1, w, nullptr, 1, 1), conv2d<double>(x2, w, nullptr, 1, 1));
    CHECK(max_abs_diff(lhs, rhs) <= 1e-10);
}

TEST_CASE("conv_transpose2d doubling") {
    Rng rng(5);
    auto x = random_tensor({1, 2, 30, 30}, rng);
    auto w = random_tensor({2, 3, 4, 4}, rng);
    auto y = conv_transpose2d<double>(x, w, nullptr, 2, 1);
    CHECK(y->shape == std::vector<int64_t>{1, 3, 60, 60});

    auto zero = make_tensor<double>({1, 2, 4, 4}, 0.0);
    auto yz = conv_transpose2d<double>(zero, w, nullptr, 2, 1);
    for (double v : yz->data) CHECK(v == 0.0);

    CHECK_THROWS_AS(conv_transpose2d<double>(x, w, nullptr, 3, 1), ContractError);
}

TEST_CASE("batch_norm2d moments and eval identity") {
    Rng rng(11);
    auto x = random_tensor({4, 3, 5, 5}, rng);
    auto gamma = make_tensor<double>({3}, 1.0);
    auto beta = make_tensor<double>({3}, 0.0);
    BatchNormState<double> st;
    st.running_mean = make_tensor<double>({3}, 0.0);
    st.running_var = make_tensor<double>({3}, 1.0);

    auto eval_out = batch_norm2d(x, gamma, beta, st, false);
    // running stats (0,1) with unit gamma: output within eps of input
    CHECK(max_abs_diff(eval_out, x) <= 1e-4);

    auto train_out = batch_norm2d(x, gamma, beta, st, true);
    const int64_t per_c = 4 * 5 * 5;
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 25; ++i) mean += train_out->data[(n * 3 + c) * 25 + i];
        mean /= per_c;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t i = 0; i < 25; ++i) {
                double d = train_out->data[(n * 3 + c) * 25 + i] - mean;
                var += d * d;
            }
        var /= per_c;
        CHECK(std::abs(mean) <= 1e-5);
        CHECK(std::abs(var - 1.0) <= 1e-3);
    }

    CHECK_THROWS_AS(batch_norm2d(make_tensor<double>({0, 3, 5, 5}), gamma, beta, st, true),
                    ContractError);
}

TEST_CASE("layer_norm literal form") {
    // constant row: x - mu = 0 so the output is beta
    auto x = make_tensor<double>({2, 4}, 3.25);
    auto gamma = make_tensor<double>({4}, 2.0);
    auto beta = from_values<double>({4}, {0.1, 0.2, 0.3, 0.4});
    auto y = layer_norm(x, gamma, beta, 1e-5, false);
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t i = 0; i < 4; ++i)
            CHECK(y->data[r * 4 + i] == doctest::Approx(beta->data[i]).epsilon(1e-12));

    // row [1,-1]: mu=0, sigma^2=1, division by (sigma^2+eps) leaves it unchanged
    auto x2 = from_values<double>({1, 2}, {1, -1});
    auto g1 = make_tensor<double>({2}, 1.0);
    auto b0 = make_tensor<double>({2}, 0.0);
    auto y2 = layer_norm(x2, g1, b0, 1e-12, false);
    CHECK(y2->data[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(y2->data[1] == doctest::Approx(-1.0).epsilon(1e-9));

    // sqrt form agrees with a direct computation
    auto x3 = from_values<double>({1, 3}, {0.5, 2.0, -1.0});
    auto y3 = layer_norm(x3, Tensor<double>(), Tensor<double>(), 1e-5, true);
    const double mu = 0.5;
    double var = ((0.5 - mu) * (0.5 - mu) + (2 - mu) * (2 - mu) + (-1 - mu) * (-1 - mu)) / 3.0;
    CHECK(y3->data[1] == doctest::Approx((2.0 - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));

    CHECK_THROWS_AS(layer_norm(x3, Tensor<double>(), Tensor<double>(), 0.0, false), ContractError);
}

TEST_CASE("activations") {
    auto r = relu(from_values<double>({2}, {-1, 2}));
    CHECK(r->data == std::vector<double>{0, 2});
    CHECK(tanh_op(make_tensor<double>({1}, 0.0))->data[0] == 0.0);

    auto x = make_tensor<double>({1}, 0.0);
    auto err = finite_diff_check<double>(
        [](const Tensor<double>& t) { return sum_all(tanh_op(t)); }, x, 1e-5);
    CHECK(err <= 1e-8);  // tanh'(0) = 1
}

TEST_CASE("softmax") {
    auto u = softmax(make_tensor<double>({1, 2}, 0.0));
    CHECK(u->data[0] == doctest::Approx(0.5).epsilon(1e-12));

    auto v = softmax(from_values<double>({1, 2}, {std::log(2.0), 0.0}));
    CHECK(v->data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(v->data[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Rng rng(9);
    auto x = random_tensor({3, 5}, rng);
    auto shifted = make_tensor<double>(x->shape);
    for (size_t i = 0; i < x->data.size(); ++i) shifted->data[i] = x->data[i] + 17.5;
    CHECK(max_abs_diff(softmax(x), softmax(shifted)) <= 1e-12);

    for (int64_t r = 0; r < 3; ++r) {
        double s = 0;
        auto y = softmax(x);
        for (int64_t i = 0; i < 5; ++i) s += y->data[r * 5 + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("backward contracts") {
    Rng rng(13);
    auto x = random_tensor({6}, rng);
    x->set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto loss = sum_all(x);
        tape.backward(loss);
    }
    for (double g : x->grad) CHECK(g == 1.0);

    // loss = sum(x^2) -> grad 2x
    auto x2 = random_tensor({5}, rng);
    x2->set_requires_grad(true);
    Tape<double> tape2;
    {
        TapeScope<double> scope(tape2);
        auto loss = sum_all(mul(x2, x2));
        tape2.backward(loss);
        for (int64_t i = 0; i < 5; ++i)
            CHECK(x2->grad[i] == doctest::Approx(2 * x2->data[i]).epsilon(1e-12));
        // second backward without reset doubles leaf gradients
        tape2.backward(loss);
        for (int64_t i = 0; i < 5; ++i)
            CHECK(x2->grad[i] == doctest::Approx(4 * x2->data[i]).epsilon(1e-12));
    }

    // non-scalar loss rejected
    Tape<double> tape3;
    {
        TapeScope<double> scope(tape3);
        auto y = mul(x2, x2);
        CHECK_THROWS_AS(tape3.backward(y), ContractError);
    }
}

TEST_CASE("finite_diff_check self-test") {
    Rng rng(17);
    auto x = random_tensor({7}, rng);
    CHECK(finite_diff_check<double>(
              [](const Tensor<double>& t) { return sum_all(t); }, x, 1e-5) <= 1e-10);
    CHECK(finite_diff_check<double>(
              [](const Tensor<double>& t) { return sum_all(mul(t, t)); }, x, 1e-5) <= 1e-7);
    CHECK_THROWS_AS(finite_diff_check<double>(
                        [](const Tensor<double>& t) { return sum_all(t); }, x, 1e-2),
                    ContractError);
}

TEST_CASE("gradient suite across ops and shapes") {
    Rng rng(23);
    struct Case {
        const char* name;
        std::function<Tensor<double>(const Tensor<double>&)> op;
        std::vector<std::vector<int64_t>> shapes;
    };
    auto fixed = [&](std::vector<int64_t> shape) { return random_tensor(std::move(shape), rng); };

    std::vector<Case> cases;
    {
        auto b3 = fixed({3});
        auto b6 = fixed({2, 3});
        cases.push_back({"add", [b6](const Tensor<double>& t) { return add(t, b6); },
                         {{2, 3}, {2, 3}, {2, 3}}});
        cases.push_back({"mul", [b6](const Tensor<double>& t) { return mul(t, b6); },
                         {{2, 3}, {2, 3}, {2, 3}}});
        cases.push_back({"add_suffix", [b3](const Tensor<double>& t) { return add(t, b3); },
                         {{2, 3}, {4, 3}, {2, 2, 3}}});
    }
    {
        auto w = fixed({4, 5});
        cases.push_back({"matmul", [w](const Tensor<double>& t) { return matmul(t, w); },
                         {{3, 4}, {2, 3, 4}, {1, 4}}});
        auto lw = fixed({5, 4});
        auto lb = fixed({5});
        cases.push_back({"linear", [lw, lb](const Tensor<double>& t) { return linear(t, lw, lb); },
                         {{3, 4}, {2, 3, 4}, {1, 4}}});
    }
    {
        auto w = fixed({3, 2, 3, 3});
        cases.push_back({"conv2d_s1",
                         [w](const Tensor<double>& t) { return conv2d<double>(t, w, nullptr, 1, 1); },
                         {{1, 2, 5, 5}, {2, 2, 4, 6}, {1, 2, 7, 3}}});
        cases.push_back({"conv2d_s2",
                         [w](const Tensor<double>& t) { return conv2d<double>(t, w, nullptr, 2, 1); },
                         {{1, 2, 6, 6}, {2, 2, 8, 4}, {1, 2, 5, 5}}});
        auto wt = fixed({2, 3, 4, 4});
        cases.push_back(
            {"conv_transpose2d",
             [wt](const Tensor<double>& t) { return conv_transpose2d<double>(t, wt, nullptr, 2, 1); },
             {{1, 2, 3, 3}, {2, 2, 4, 2}, {1, 2, 5, 5}}});
    }
    {
        auto g = fixed({4});
        auto b = fixed({4});
        cases.push_back({"layer_norm",
                         [g, b](const Tensor<double>& t) { return layer_norm(t, g, b, 1e-5, false); },
                         {{2, 4}, {3, 2, 4}, {1, 4}}});
        cases.push_back({"layer_norm_sqrt",
                         [g, b](const Tensor<double>& t) { return layer_norm(t, g, b, 1e-5, true); },
                         {{2, 4}, {3, 2, 4}, {1, 4}}});
    }
    cases.push_back({"relu_smooth", [](const Tensor<double>& t) {
                         // keep away from the kink for finite differences
                         auto shifted = add(t, make_tensor<double>({1}, 10.0));
                         return relu(shifted);
                     },
                     {{5}, {2, 3}, {4, 1}}});
    cases.push_back({"tanh", [](const Tensor<double>& t) { return tanh_op(t); },
                     {{5}, {2, 3}, {4, 1}}});
    cases.push_back({"gelu", [](const Tensor<double>& t) { return gelu(t); },
                     {{5}, {2, 3}, {4, 1}}});
    cases.push_back({"softmax", [](const Tensor<double>& t) { return softmax(t); },
                     {{2, 5}, {3, 4}, {1, 6}}});
    {
        auto g = fixed({2});
        auto b = fixed({2});
        cases.push_back({"batch_norm_train",
                         [g, b](const Tensor<double>& t) {
                             BatchNormState<double> local;
                             local.running_mean = make_tensor<double>({2}, 0.0);
                             local.running_var = make_tensor<double>({2}, 1.0);
                             return batch_norm2d(t, g, b, local, true);
                         },
                         {{2, 2, 3, 3}, {3, 2, 2, 4}, {2, 2, 4, 2}}});
    }
    cases.push_back({"softmax_attention", [](const Tensor<double>& t) {
                         return attention_naive(t, t, t);
                     },
                     {{1, 1, 3, 4}, {1, 2, 4, 2}, {2, 1, 2, 3}}});
    cases.push_back({"patchify", [](const Tensor<double>& t) { return patchify(t, 2); },
                     {{1, 2, 4, 4}, {2, 1, 6, 4}, {1, 3, 2, 2}}});
    cases.push_back({"upsample", [](const Tensor<double>& t) { return nearest_upsample2x(t); },
                     {{1, 2, 3, 3}, {2, 1, 2, 4}, {1, 1, 5, 5}}});

    int seed = 1000;
    for (auto& c : cases) {
        REQUIRE(c.shapes.size() >= 3);
        for (auto& shape : c.shapes) {
            auto x = random_tensor(shape, rng);
            const double err = finite_diff_check<double>(weighted_sum(c.op, uint64_t(seed++)), x, 1e-5);
            INFO(c.name << " shape " << shape_str(shape));
            CHECK(err <= 1e-4);
        }
    }
}

TEST_CASE("initializer determinism") {
    auto a = make_tensor<double>({64});
    auto b = make_tensor<double>({64});
    Rng r1(99), r2(99);
    fill_kaiming_uniform(a, 16, r1);
    fill_kaiming_uniform(b, 16, r2);
    CHECK(a->data == b->data);

    Rng r3(99), r4(99);
    fill_normal(a, 0.02, r3);
    fill_normal(b, 0.02, r4);
    CHECK(a->data == b->data);
}

TEST_CASE("forward outputs finite") {
    Rng rng(31);
    auto x = random_tensor({2, 2, 8, 8}, rng);
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto y = tanh_op(conv2d<double>(x, w, nullptr, 1, 1));
    for (double v : y->data) {
        CHECK(std::isfinite(v));
        CHECK(std::abs(v) < 1.0 + 1e-12);
    }
}
