#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "dmfuse/autodiff.hpp"
#include "dmfuse/params.hpp"

using namespace dmfuse;

namespace {

Tensor<double> random_tensor(const std::vector<std::size_t>& shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(shape);
    for (auto& v : t.values) v = u(rng);
    return t;
}

}  // namespace

// The finite-difference checker is the oracle everything else leans on, so it
// is verified first on functions with known gradients.
TEST_CASE("finite_diff_check on sum of squares is near-exact") {
    auto f = [](const Tensor<double>& x) {
        double s = 0.0;
        Tensor<double> g(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += x[i] * x[i];
            g[i] = 2.0 * x[i];
        }
        return std::make_pair(s, g);
    };
    Tensor<double> p({2}, {1.0, 2.0});
    CHECK(finite_diff_check<double>(f, p, 1e-5) < 1e-8);
}

TEST_CASE("finite_diff_check on a constant function returns 0") {
    auto f = [](const Tensor<double>& x) {
        return std::make_pair(3.5, Tensor<double>(x.shape));
    };
    Tensor<double> p({3}, {0.1, -0.2, 0.3});
    CHECK(finite_diff_check<double>(f, p, 1e-5) == 0.0);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
    auto f = [](const Tensor<double>& x) {
        Tensor<double> g(x.shape);
        for (auto& v : g.values) v = 1.0;  // claimed gradient of sum(x^2): wrong
        double s = 0.0;
        for (double v : x.values) s += v * v;
        return std::make_pair(s, g);
    };
    Tensor<double> p({2}, {2.0, 3.0});
    CHECK(finite_diff_check<double>(f, p, 1e-5) > 0.5);
}

TEST_CASE("finite_diff_check rejects bad eps and non-finite values") {
    auto f = [](const Tensor<double>& x) {
        return std::make_pair(1.0 / x[0], Tensor<double>(x.shape));
    };
    Tensor<double> p({1}, {0.0});
    CHECK_THROWS(finite_diff_check<double>(f, p, 0.0));
    CHECK_THROWS(finite_diff_check<double>(f, p, 1e-5));
}

TEST_CASE("conv2d identity kernel reproduces the input") {
    Tape<double> t;
    Rng rng(1);
    Tensor<double> x = random_tensor({1, 4, 4}, rng);
    Var<double> xv = t.leaf(x);
    Var<double> k = t.leaf(Tensor<double>({1, 1, 1, 1}, {1.0}));
    Var<double> y = conv2d(t, xv, k, (Var<double>) nullptr, 1, 0);
    REQUIRE(y->value.shape == x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y->value[i] == x[i]);
}

TEST_CASE("conv2d diagonal kernel computes the diagonal dot product") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
    Var<double> k = t.leaf(Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 1}));
    Var<double> y = conv2d(t, x, k, (Var<double>) nullptr, 1, 0);
    REQUIRE(y->value.shape == std::vector<std::size_t>{1, 1, 1});
    CHECK(y->value[0] == doctest::Approx(5.0));
}

TEST_CASE("conv2d stride and padding shapes") {
    Tape<double> t;
    Rng rng(2);
    Var<double> x = t.leaf(random_tensor({2, 5, 5}, rng));
    Var<double> k = t.leaf(random_tensor({3, 2, 3, 3}, rng));
    Var<double> b = t.leaf(random_tensor({3}, rng));
    CHECK(conv2d(t, x, k, b, 1, 1)->value.shape == std::vector<std::size_t>{3, 5, 5});
    CHECK(conv2d(t, x, k, b, 2, 1)->value.shape == std::vector<std::size_t>{3, 3, 3});
    CHECK(conv2d(t, x, k, (Var<double>) nullptr, 1, 0)->value.shape ==
          std::vector<std::size_t>{3, 3, 3});
}

TEST_CASE("softmax of a constant vector is uniform and shift invariant") {
    for (double c : {-3.0, 0.0, 7.5}) {
        Tape<double> t;
        Var<double> x = t.leaf(Tensor<double>({5}, std::vector<double>(5, c)));
        Var<double> y = softmax(t, x);
        for (double v : y->value.values) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
    }
    Tape<double> t;
    Rng rng(3);
    Tensor<double> logits = random_tensor({5}, rng, -2, 2);
    Tensor<double> shifted = logits;
    for (auto& v : shifted.values) v += 11.25;
    Var<double> a = softmax(t, t.leaf(logits));
    Var<double> b = softmax(t, t.leaf(shifted));
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(1e-12));
        CHECK(a->value[i] >= 0.0);
        s += a->value[i];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("softmax stays finite at extreme logits") {
    Tape<double> t;
    Var<double> y = softmax(t, t.leaf(Tensor<double>({3}, {1000.0, -1000.0, 999.0})));
    for (double v : y->value.values) CHECK(std::isfinite(v));
    CHECK(y->value[0] > y->value[2]);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tape<double> t;
    Rng rng(4);
    Var<double> x = t.leaf(random_tensor({2, 3}, rng), true);
    t.backward(sum(t, x));
    for (double g : Tape<double>::grad(x)) CHECK(g == 1.0);
}

TEST_CASE("backward of 0 * sum gives zero gradient") {
    Tape<double> t;
    Rng rng(5);
    Var<double> x = t.leaf(random_tensor({4}, rng), true);
    t.backward(scale(t, sum(t, x), 0.0));
    for (double g : Tape<double>::grad(x)) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({2}, {1.0, 2.0}), true);
    CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("scalar"), std::invalid_argument);
    Var<double> detached = t.leaf(Tensor<double>({1}, {5.0}), false);
    CHECK_THROWS_WITH_AS(t.backward(detached), doctest::Contains("detached"),
                         std::invalid_argument);
}

TEST_CASE("cross-entropy of softmax(dense) matches finite differences") {
    Rng rng(6);
    Tensor<double> w = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({3}, rng);
    auto f = [&](const Tensor<double>& x) {
        Tape<double> t;
        Var<double> xv = t.leaf(x, true);
        Var<double> p = softmax(t, dense(t, xv, t.leaf(w), t.leaf(b)));
        Var<double> loss = scale(t, log_op(t, index(t, p, 1)), -1.0);
        t.backward(loss);
        return std::make_pair(loss->value[0], Tensor<double>(x.shape, Tape<double>::grad(xv)));
    };
    CHECK(finite_diff_check<double>(f, random_tensor({4}, rng), 1e-5) < 1e-4);
}

// gradient checks for each primitive at random points
TEST_CASE("per-primitive gradients match central differences") {
    Rng rng(7);
    auto check = [&](auto&& build, const std::vector<std::size_t>& shape, int reps = 10) {
        for (int r = 0; r < reps; ++r) {
            Tensor<double> point = random_tensor(shape, rng);
            auto f = [&](const Tensor<double>& x) {
                Tape<double> t;
                Var<double> xv = t.leaf(x, true);
                Var<double> out = build(t, xv);
                Var<double> loss = out->value.size() == 1 ? out : sum(t, out);
                t.backward(loss);
                return std::make_pair(loss->value[0],
                                      Tensor<double>(x.shape, Tape<double>::grad(xv)));
            };
            CHECK(finite_diff_check<double>(f, point, 1e-5) < 1e-4);
        }
    };
    Rng wrng(8);
    Tensor<double> kern = random_tensor({2, 1, 3, 3}, wrng);
    Tensor<double> w = random_tensor({3, 6}, wrng);
    Tensor<double> bias = random_tensor({3}, wrng);

    check([&](Tape<double>& t, Var<double> x) {
        return conv2d(t, x, t.leaf(kern), (Var<double>) nullptr, 1, 1);
    }, {1, 5, 5});
    check([&](Tape<double>& t, Var<double> x) {
        return conv2d(t, x, t.leaf(kern), t.leaf(Tensor<double>({2}, {0.3, -0.2})), 2, 1);
    }, {1, 6, 6});
    check([&](Tape<double>& t, Var<double> x) { return dense(t, x, t.leaf(w), t.leaf(bias)); },
          {6});
    check([&](Tape<double>& t, Var<double> x) { return relu(t, x); }, {7});
    check([&](Tape<double>& t, Var<double> x) { return tanh_op(t, x); }, {5});
    check([&](Tape<double>& t, Var<double> x) { return maxpool2d(t, x, 2); }, {2, 4, 4});
    check([&](Tape<double>& t, Var<double> x) { return global_avg_pool(t, x); }, {3, 2, 2});
    // score one softmax component: the full sum is constant 1, which leaves
    // nothing but rounding noise for the central difference to measure
    check([&](Tape<double>& t, Var<double> x) { return index(t, softmax(t, x), 0); }, {4});
    check([&](Tape<double>& t, Var<double> x) {
        return mul(t, x, t.leaf(Tensor<double>({3}, {0.5, -1.5, 2.0})));
    }, {3});
    check([&](Tape<double>& t, Var<double> x) {
        return mul(t, index(t, x, 0), t.leaf(Tensor<double>({3}, {0.5, -1.5, 2.0})));
    }, {2});
    check([&](Tape<double>& t, Var<double> x) {
        return add(t, x, t.leaf(Tensor<double>({4}, {1, 2, 3, 4})));
    }, {4});
    check([&](Tape<double>& t, Var<double> x) { return scale(t, x, 2.5, -0.5); }, {5});
    check([&](Tape<double>& t, Var<double> x) { return mean(t, x); }, {6});
    check([&](Tape<double>& t, Var<double> x) {
        return log_op(t, scale(t, tanh_op(t, x), 0.4, 1.5));
    }, {4});
    check([&](Tape<double>& t, Var<double> x) {
        std::vector<Var<double>> parts{index(t, x, 0), index(t, x, 1)};
        return index(t, softmax(t, concat(t, parts)), 1);
    }, {2});
}

TEST_CASE("dropout: eval mode identity, train mode inverted scaling, seeded determinism") {
    Rng data_rng(9);
    Tensor<double> x = random_tensor({1000}, data_rng, 0.5, 1.5);
    {
        Tape<double> t;
        Rng rng(1);
        Var<double> y = dropout(t, t.leaf(x), 0.5, false, rng);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y->value[i] == x[i]);
    }
    {
        Tape<double> t1, t2;
        Rng r1 = make_rng(42, "drop"), r2 = make_rng(42, "drop");
        Var<double> y1 = dropout(t1, t1.leaf(x), 0.5, true, r1);
        Var<double> y2 = dropout(t2, t2.leaf(x), 0.5, true, r2);
        double mean_kept = 0.0;
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(y1->value[i] == y2->value[i]);  // bit-identical under the same seed
            if (y1->value[i] == 0.0) {
                ++zeros;
            } else {
                CHECK(y1->value[i] == doctest::Approx(2.0 * x[i]));  // 1/(1-0.5)
                mean_kept += y1->value[i];
            }
        }
        CHECK(zeros > 400);
        CHECK(zeros < 600);
    }
    Tape<double> t;
    Rng rng(1);
    CHECK_THROWS(dropout(t, t.leaf(x), 1.0, true, rng));
    CHECK_THROWS(dropout(t, t.leaf(x), -0.1, true, rng));
}

TEST_CASE("dropout gradient uses the same mask") {
    Tensor<double> point({6}, {1, 2, 3, 4, 5, 6});
    auto f = [&](const Tensor<double>& x) {
        Tape<double> t;
        Rng rng = make_rng(5, "dropmask");  // same mask at every evaluation
        Var<double> xv = t.leaf(x, true);
        Var<double> loss = sum(t, dropout(t, xv, 0.3, true, rng));
        t.backward(loss);
        return std::make_pair(loss->value[0], Tensor<double>(x.shape, Tape<double>::grad(xv)));
    };
    CHECK(finite_diff_check<double>(f, point, 1e-5) < 1e-8);
}

TEST_CASE("primitive shape errors name the operation") {
    Tape<double> t;
    Var<double> a = t.leaf(Tensor<double>({2}, {1, 2}));
    Var<double> b = t.leaf(Tensor<double>({3}, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(add(t, a, b), doctest::Contains("add"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(mul(t, a, b), doctest::Contains("mul"), std::invalid_argument);
    Var<double> img = t.leaf(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
    Var<double> k = t.leaf(Tensor<double>({1, 3, 1, 1}, {1, 1, 1}));
    CHECK_THROWS_WITH_AS(conv2d(t, img, k, (Var<double>) nullptr, 1, 0),
                         doctest::Contains("conv2d"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(maxpool2d(t, img, 3), doctest::Contains("maxpool2d"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(dense(t, a, t.leaf(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6})),
                               (Var<double>) nullptr),
                         doctest::Contains("dense"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(log_op(t, t.leaf(Tensor<double>({1}, {-1.0}))),
                         doctest::Contains("log"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(index(t, a, 5), doctest::Contains("index"), std::invalid_argument);
}

TEST_CASE("maxpool routes gradient to the argmax element") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({1, 2, 2}, {1, 9, 3, 4}), true);
    t.backward(sum(t, maxpool2d(t, x, 2)));
    const auto& g = Tape<double>::grad(x);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
}

TEST_CASE("off-path tensors get zero gradients") {
    Tape<double> t;
    Var<double> x = t.leaf(Tensor<double>({2}, {1, 2}), true);
    Var<double> unused = t.leaf(Tensor<double>({2}, {3, 4}), true);
    t.backward(sum(t, x));
    for (double g : Tape<double>::grad(unused)) CHECK(g == 0.0);
}

TEST_CASE("forward determinism: same inputs give bit-identical outputs") {
    Rng rng(10);
    Tensor<double> x = random_tensor({1, 6, 6}, rng);
    Tensor<double> k = random_tensor({2, 1, 3, 3}, rng);
    auto run = [&] {
        Tape<double> t;
        Var<double> y = conv2d(t, t.leaf(x), t.leaf(k), (Var<double>) nullptr, 1, 1);
        return softmax(t, global_avg_pool(t, relu(t, y)))->value;
    };
    const Tensor<double> a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("tensor invariant: shape product must equal value count") {
    CHECK_THROWS(Tensor<double>({2, 3}, {1.0, 2.0}));
    CHECK_NOTHROW(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
}

TEST_CASE("ParamSet serialization round-trips and is byte-stable") {
    ParamSet<float> params;
    Rng rng(11);
    std::uniform_real_distribution<double> u(-1, 1);
    params["b.weight"] = Tensor<float>({2, 3});
    params["a.bias"] = Tensor<float>({4});
    for (auto& [name, tensor] : params)
        for (auto& v : tensor.values) v = (float)u(rng);

    const std::string path = "/tmp/dmfuse_params_test.bin";
    save_params(params, path);
    auto loaded = load_params<float>(path);
    REQUIRE(loaded.size() == params.size());
    for (const auto& [name, tensor] : params) {
        REQUIRE(loaded.count(name) == 1);
        CHECK(loaded.at(name).shape == tensor.shape);
        for (std::size_t i = 0; i < tensor.size(); ++i) CHECK(loaded.at(name)[i] == tensor[i]);
    }

    // header layout: magic, little-endian count, then sorted names
    std::ifstream is(path, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "DSM1");
    unsigned char count[8];
    is.read((char*)count, 8);
    CHECK(count[0] == 2);
    for (int i = 1; i < 8; ++i) CHECK(count[i] == 0);
    unsigned char name_len[8];
    is.read((char*)name_len, 8);
    CHECK(name_len[0] == 6);  // "a.bias" first: iteration is name-sorted
    std::string first(6, '\0');
    is.read(first.data(), 6);
    CHECK(first == "a.bias");

    save_params(params, path + ".again");
    std::ifstream f1(path, std::ios::binary), f2(path + ".again", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    CHECK_THROWS(load_params<float>("/tmp/dmfuse_params_missing.bin"));
    std::ofstream bad("/tmp/dmfuse_params_bad.bin", std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS(load_params<float>("/tmp/dmfuse_params_bad.bin"));
    std::remove(path.c_str());
    std::remove((path + ".again").c_str());
    std::remove("/tmp/dmfuse_params_bad.bin");
}
