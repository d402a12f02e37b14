#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "helpers.hpp"
#include "tavit/checkpoint.hpp"
#include "tavit/optim.hpp"

using namespace tavit;
using namespace tavit::testing;
namespace fs = std::filesystem;

namespace {

std::pair<std::vector<std::pair<std::string, Tensor<double>>>, Tensor<double>> one_param(
    double init, int64_t n = 1) {
    auto p = make_tensor<double>({n}, init);
    p->set_requires_grad(true);
    p->zero_grad();
    return {{{"p", p}}, p};
}

}  // namespace

TEST_CASE("first step closed form") {
    auto [params, p] = one_param(0.0);
    AdamW<double> opt(params, AdamWHyper{});  // lr 2e-4, b1 0.5, b2 0.999, eps 1e-6, wd 1e-2
    p->grad[0] = 1.0;
    opt.step();
    // bias correction makes the first step lr * g/(|g| + eps); decay is zero at theta=0
    CHECK(std::abs(p->data[0] - (-1.9999980e-4)) <= 1e-10);
    CHECK(opt.step_count() == 1);
}

TEST_CASE("zero gradient behavior") {
    AdamWHyper h;
    h.weight_decay = 0.0;
    auto [params, p] = one_param(0.7);
    AdamW<double> opt(params, h);
    for (int i = 0; i < 5; ++i) opt.step();  // grads stay zero
    CHECK(p->data[0] == 0.7);

    AdamWHyper hd;
    hd.weight_decay = 1e-2;
    auto [params2, q] = one_param(0.7);
    AdamW<double> opt2(params2, hd);
    opt2.step();
    // pure decoupled decay: theta *= (1 - lr*lambda)
    CHECK(q->data[0] == doctest::Approx(0.7 * (1.0 - hd.lr * hd.weight_decay)).epsilon(1e-14));
    opt2.step();
    CHECK(q->data[0] ==
          doctest::Approx(0.7 * std::pow(1.0 - hd.lr * hd.weight_decay, 2)).epsilon(1e-14));
}

TEST_CASE("matches reference adam when decay is zero") {
    AdamWHyper h;
    h.lr = 1e-2;
    h.weight_decay = 0.0;
    const int64_t n = 6;
    auto [params, p] = one_param(0.0, n);
    Rng rng(3);
    for (auto& v : p->data) v = rng.uniform(-1.0, 1.0);
    std::vector<double> theta(p->data.begin(), p->data.end());
    std::vector<double> m(n, 0.0), v2(n, 0.0);

    AdamW<double> opt(params, h);
    for (int t = 1; t <= 25; ++t) {
        std::vector<double> g(n);
        for (auto& gv : g) gv = rng.uniform(-2.0, 2.0);
        opt.zero_grad();
        for (int64_t i = 0; i < n; ++i) p->grad[i] = g[i];
        opt.step();
        // textbook Adam update
        for (int64_t i = 0; i < n; ++i) {
            m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
            v2[i] = h.beta2 * v2[i] + (1 - h.beta2) * g[i] * g[i];
            const double mhat = m[i] / (1 - std::pow(h.beta1, t));
            const double vhat = v2[i] / (1 - std::pow(h.beta2, t));
            theta[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
        for (int64_t i = 0; i < n; ++i) CHECK(std::abs(p->data[i] - theta[i]) <= 1e-12);
    }
}

TEST_CASE("descends a quadratic") {
    AdamWHyper h;
    h.lr = 5e-2;
    h.weight_decay = 0.0;
    auto [params, p] = one_param(3.0);
    AdamW<double> opt(params, h);
    double prev = 9.0;
    for (int t = 0; t < 300; ++t) {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        opt.zero_grad();
        auto loss = mul(p, p);
        tape.backward(loss);
        opt.step();
    }
    const double final_loss = p->data[0] * p->data[0];
    CHECK(final_loss < 1e-2);
    CHECK(final_loss < prev);
}

TEST_CASE("l1 loss values and gradient") {
    auto a = make_tensor<double>({3});
    a->data = {0.0, 0.0, 3.0};
    auto b = make_tensor<double>({3});
    b->data = {1.0, -2.0, 1.5};
    CHECK(l1_loss(a, b)->data[0] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(l1_loss(a, a)->data[0] == 0.0);

    Rng rng(4);
    auto c = random_tensor({2, 3}, rng);
    CHECK_THROWS_AS(l1_loss(c, random_tensor({3, 2}, rng)), ContractError);

    // gradient is sign(pred - target)/n, zero exactly at ties
    auto pred = make_tensor<double>({4});
    pred->data = {2.0, -1.0, 0.5, 0.5};
    auto tgt = make_tensor<double>({4});
    tgt->data = {1.0, 1.0, 0.5, 2.0};
    pred->set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = l1_loss(pred, tgt);
    tape.backward(loss);
    CHECK(pred->grad[0] == doctest::Approx(0.25));
    CHECK(pred->grad[1] == doctest::Approx(-0.25));
    CHECK(pred->grad[2] == 0.0);
    CHECK(pred->grad[3] == doctest::Approx(-0.25));
}

TEST_CASE("early stopping rule") {
    auto hist = [](std::initializer_list<double> vals) {
        std::vector<EpochLoss> h;
        int64_t e = 0;
        for (double v : vals) h.push_back({e++, v, v});
        return h;
    };
    // monotone improvement never stops
    CHECK_FALSE(early_stop(hist({5, 4, 3, 2, 1}), 2));
    // best at epoch 3, patience 2: stop once three epochs have passed without a new best
    CHECK_FALSE(early_stop(hist({5, 4, 3, 1, 2, 2}), 2));      // epoch 5, gap 2
    CHECK(early_stop(hist({5, 4, 3, 1, 2, 2, 2}), 2));         // epoch 6, gap 3
    CHECK_FALSE(early_stop(hist({7}), 0));
    CHECK(early_stop(hist({1, 2}), 0));
    // ties keep the earliest best
    CHECK(early_stop(hist({1, 1, 1, 1}), 2));
    CHECK_THROWS_AS(early_stop({}, 3), ContractError);
}

TEST_CASE("optimizer state survives a checkpoint") {
    const fs::path dir = fs::temp_directory_path() / "tavit_opt_ckpt";
    fs::create_directories(dir);
    const fs::path path = dir / "opt.tavc";

    TransformerConfig tf;
    tf.embed_dim = 4;
    tf.heads = 2;
    tf.layers = 1;
    tf.mlp_ratio = 2;
    tf.patch = 1;
    tf.tile = 4;
    auto cfg = mprvit_config(1, 8, 2, 4, tf);
    AdamWHyper h;
    h.lr = 1e-3;

    Model<float> a(cfg, 1);
    AdamW<float> opt_a(a.store.params, h);
    Rng rng(5);
    auto x = make_tensor<float>({1, 1, 8, 8});
    for (auto& v : x->data) v = float(rng.uniform(0.0, 1.0));
    auto y = make_tensor<float>({1, 1, 8, 8});
    for (auto& v : y->data) v = float(rng.uniform(0.0, 1.0));
    auto train_step = [&](Model<float>& m, AdamW<float>& o) {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        o.zero_grad();
        auto loss = l1_loss(m.forward(x, nullptr, true), y);
        tape.backward(loss);
        o.step();
    };
    for (int i = 0; i < 3; ++i) train_step(a, opt_a);
    save_checkpoint(path, a, 1, 3, &opt_a);

    Model<float> b(cfg, 99);
    AdamW<float> opt_b;
    auto meta = load_checkpoint(path, b, &opt_b);
    CHECK(meta.had_optimizer);
    CHECK(opt_b.step_count() == 3);
    CHECK(opt_b.hyper().lr == h.lr);
    REQUIRE(opt_b.moment1().size() == opt_a.moment1().size());
    for (size_t i = 0; i < opt_a.moment1().size(); ++i) {
        for (size_t j = 0; j < opt_a.moment1()[i].size(); ++j) {
            CHECK(opt_b.moment1()[i][j] == opt_a.moment1()[i][j]);
            CHECK(opt_b.moment2()[i][j] == opt_a.moment2()[i][j]);
        }
    }
    // identical continued trajectories
    for (int i = 0; i < 2; ++i) {
        train_step(a, opt_a);
        train_step(b, opt_b);
    }
    float md = 0;
    for (size_t i = 0; i < a.store.params.size(); ++i)
        md = std::max(md, float(max_abs_diff(a.store.params[i].second, b.store.params[i].second)));
    CHECK(md == 0.0f);

    fs::remove_all(dir);
}
