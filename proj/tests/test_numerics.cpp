#include <doctest.h>

#include <cmath>

#include "efdit/tensor.hpp"
#include "helpers.hpp"

using namespace efdit;
using efdit::testing::gradcheck;
using efdit::testing::max_abs_diff;

namespace {

Tensor mat(std::vector<std::int64_t> shape, std::vector<double> vals) {
    return Tensor(std::move(shape), std::move(vals));
}

// index-triple-loop reference in extended precision
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            long double acc = 0.0L;
            for (std::int64_t l = 0; l < k; ++l) {
                acc += static_cast<long double>(a.data[i * k + l]) * b.data[l * n + j];
            }
            c.data[i * n + j] = static_cast<double>(acc);
        }
    }
    return c;
}

}  // namespace

TEST_CASE("matmul identity and permutation") {
    Tensor a = mat({2, 2}, {1, 2, 3, 4});
    Tensor id = mat({2, 2}, {1, 0, 0, 1});
    Tensor perm = mat({2, 2}, {0, 1, 1, 0});
    CHECK(matmul(a, id).data == a.data);
    CHECK(matmul(mat({2, 2}, {1, 0, 0, 1}), perm).data == perm.data);
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(11);
    for (int s = 0; s < 20; ++s) {
        Tensor a = Tensor::uniform({5, 7}, -2, 2, rng);
        Tensor b = Tensor::uniform({7, 3}, -2, 2, rng);
        CHECK(max_abs_diff(matmul(a, b).data, matmul_oracle(a, b).data) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimError");
    } catch (const DimError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2 x 3]") != std::string::npos);
        CHECK(msg.find("[4 x 2]") != std::string::npos);
    }
}

TEST_CASE("matmul associativity") {
    Rng rng(5);
    for (int s = 0; s < 30; ++s) {
        Tensor a = Tensor::uniform({4, 3}, -1, 1, rng);
        Tensor b = Tensor::uniform({3, 5}, -1, 1, rng);
        Tensor c = Tensor::uniform({5, 2}, -1, 1, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(left.data, right.data) < 1e-10);
    }
}

TEST_CASE("softmax examples") {
    Tensor u = mat({3}, {0, 0, 0});
    for (double v : softmax(u, 0).data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Tensor big = mat({2}, {1000, 0});
    Tensor sb = softmax(big, 0);
    CHECK(std::abs(sb.data[0] - 1.0) < 1e-12);
    CHECK(std::abs(sb.data[1]) < 1e-12);

    Rng rng(3);
    for (int s = 0; s < 25; ++s) {
        Tensor x = Tensor::uniform({6}, -2, 2, rng);
        Tensor y = softmax(x, 0);
        long double z = 0.0L;
        long double mx = x.data[0];
        for (double v : x.data) mx = std::max<long double>(mx, v);
        for (double v : x.data) z += std::exp(static_cast<long double>(v) - mx);
        for (std::size_t i = 0; i < 6; ++i) {
            const double ref = static_cast<double>(
                std::exp(static_cast<long double>(x.data[i]) - mx) / z);
            CHECK(std::abs(y.data[i] - ref) < 1e-14);
        }
    }
}

TEST_CASE("softmax rows sum to one and equivariance under permutation") {
    Rng rng(7);
    for (int s = 0; s < 50; ++s) {
        Tensor x = Tensor::uniform({4, 6}, -3, 3, rng);
        Tensor y = softmax(x, 1);
        for (std::int64_t r = 0; r < 4; ++r) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < 6; ++j) acc += y.data[r * 6 + j];
            CHECK(std::abs(acc - 1.0) < 1e-12);
        }
        // permute columns of a row vector
        Tensor row = Tensor::uniform({6}, -3, 3, rng);
        std::vector<int> perm = {3, 1, 5, 0, 2, 4};
        Tensor prow({6});
        for (int i = 0; i < 6; ++i) prow.data[i] = row.data[perm[i]];
        Tensor sp = softmax(prow, 0);
        Tensor s0 = softmax(row, 0);
        for (int i = 0; i < 6; ++i) CHECK(sp.data[i] == doctest::Approx(s0.data[perm[i]]).epsilon(1e-14));
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x = mat({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(softmax(x, 0), NumericError);
}

TEST_CASE("layernorm examples") {
    Tensor c = Tensor::full({2, 4}, 3.0);
    Tensor g = Tensor::ones({4});
    Tensor b = Tensor::zeros({4});
    for (double v : layernorm(c, g, b, 1e-5).data) CHECK(v == 0.0);

    Tensor two = mat({2}, {1, 3});
    Tensor ln = layernorm(two, Tensor::ones({2}), Tensor::zeros({2}), 0.0);
    CHECK(ln.data[0] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(ln.data[1] == doctest::Approx(1.0).epsilon(1e-14));

    CHECK_THROWS_AS(layernorm(two, g, b, -1e-9), ConfigError);

    Rng rng(9);
    Tensor x = Tensor::uniform({4, 8}, -2, 2, rng);
    Tensor gain = Tensor::uniform({8}, 0.5, 1.5, rng);
    Tensor bias = Tensor::uniform({8}, -0.5, 0.5, rng);
    const double eps = 1e-6;
    Tensor y = layernorm(x, gain, bias, eps);
    for (std::int64_t r = 0; r < 4; ++r) {
        long double mu = 0.0L, var = 0.0L;
        for (int j = 0; j < 8; ++j) mu += x.data[r * 8 + j];
        mu /= 8.0L;
        for (int j = 0; j < 8; ++j) {
            var += (x.data[r * 8 + j] - mu) * (x.data[r * 8 + j] - mu);
        }
        var /= 8.0L;
        for (int j = 0; j < 8; ++j) {
            const double ref = static_cast<double>(
                (x.data[r * 8 + j] - mu) / std::sqrt(var + static_cast<long double>(eps)) *
                    gain.data[j] +
                bias.data[j]);
            CHECK(std::abs(y.data[r * 8 + j] - ref) < 1e-12);
        }
    }
}

TEST_CASE("elementwise identities") {
    Rng rng(13);
    Tensor x = Tensor::uniform({3, 4}, 0.5, 2.5, rng);
    CHECK(add(x, Tensor::zeros({3, 4})).data == x.data);
    CHECK(mul(x, Tensor::ones({3, 4})).data == x.data);
    CHECK(max_abs_diff(exp(log(x)).data, x.data) < 1e-12);
    CHECK_THROWS_AS(log(mat({2}, {1.0, -0.5})), NumericError);
    CHECK_THROWS_AS(add(Tensor({2, 2}), Tensor({3})), DimError);

    // scalar broadcast
    Tensor s = Tensor::scalar_of(2.0);
    Tensor m = mul(x, s);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(m.data[i] == x.data[i] * 2.0);
}

TEST_CASE("reductions and views") {
    CHECK(reduce(Reduce::mean, mat({3}, {2, 4, 6}), 0).scalar() == 4.0);
    CHECK(reduce(Reduce::max, mat({2}, {-1, -5}), 0).scalar() == -1.0);
    Tensor ones34 = Tensor::ones({3, 4});
    Tensor s0 = reduce(Reduce::sum, ones34, 0);
    CHECK(s0.shape == std::vector<std::int64_t>{4});
    for (double v : s0.data) CHECK(v == 3.0);
    CHECK_THROWS_AS(reduce(Reduce::sum, ones34, 2), DimError);

    Rng rng(17);
    Tensor x = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    Tensor tt = transpose(transpose(x, 0, 2), 0, 2);
    CHECK(tt.data == x.data);
    CHECK(tt.shape == x.shape);
    Tensor r = reshape(x, {6, 4});
    CHECK(r.data == x.data);
    CHECK_THROWS_AS(reshape(x, {5, 5}), DimError);
}

TEST_CASE("backward basics") {
    GradTape tape;
    Tensor x = tape.watch(mat({2}, {1, 2}));
    Tensor loss = reduce_all(Reduce::sum, x);
    tape.backward(loss);
    CHECK(tape.grad(x).data == std::vector<double>{1, 1});

    GradTape tape2;
    Tensor x2 = tape2.watch(mat({2}, {1, 2}));
    Tensor loss2 = reduce_all(Reduce::sum, mul(x2, x2));
    tape2.backward(loss2);
    CHECK(tape2.grad(x2).data == std::vector<double>{2, 4});

    GradTape tape3;
    Tensor x3 = tape3.watch(mat({2}, {1, 2}));
    Tensor not_scalar = mul(x3, x3);
    CHECK_THROWS_AS(tape3.backward(not_scalar), ContractError);
}

TEST_CASE("untouched leaves get zero gradient") {
    GradTape tape;
    Tensor used = tape.watch(mat({2}, {1, 2}));
    Tensor unused = tape.watch(mat({3}, {5, 6, 7}));
    tape.backward(reduce_all(Reduce::sum, used));
    CHECK(tape.grad(unused).data == std::vector<double>{0, 0, 0});
}

TEST_CASE("mixing tapes is rejected") {
    GradTape a, b;
    Tensor x = a.watch(mat({2}, {1, 2}));
    Tensor y = b.watch(mat({2}, {3, 4}));
    CHECK_THROWS_AS(add(x, y), ContractError);
}

TEST_CASE("gradcheck: every differentiable op, 100 seeds") {
    const int kSeeds = 100;
    using In = std::vector<Tensor>;

    struct Case {
        const char* name;
        int n_inputs;
        bool positive;  // inputs drawn from (0.5, 2.5) instead of (-2, 2)
        std::function<Tensor(const In&)> fn;
    };
    const std::vector<Case> cases = {
        {"add", 2, false, [](const In& v) { return add(v[0], v[1]); }},
        {"sub", 2, false, [](const In& v) { return sub(v[0], v[1]); }},
        {"mul", 2, false, [](const In& v) { return mul(v[0], v[1]); }},
        {"exp", 1, false, [](const In& v) { return exp(v[0]); }},
        {"log", 1, true, [](const In& v) { return log(v[0]); }},
        {"silu", 1, false, [](const In& v) { return silu(v[0]); }},
        {"scale", 1, false, [](const In& v) { return scale(v[0], -1.7); }},
        {"softmax", 1, false, [](const In& v) { return softmax(v[0], 1); }},
        {"reduce_mean", 1, false, [](const In& v) { return reduce(Reduce::mean, v[0], 1); }},
        {"reduce_sum", 1, false, [](const In& v) { return reduce(Reduce::sum, v[0], 0); }},
        {"reshape", 1, false, [](const In& v) { return reshape(v[0], {4, 3}); }},
        {"transpose", 1, false, [](const In& v) { return transpose(v[0], 0, 1); }},
        {"repeat_rows", 1, false, [](const In& v) { return repeat_rows(v[0], 3); }},
        {"slice_cols", 1, false, [](const In& v) { return slice_cols(v[0], 1, 2); }},
        {"take_rows", 1, false, [](const In& v) { return take_rows(v[0], {2, 0, 2}); }},
        {"scale_rows", 1, false,
         [](const In& v) { return scale_rows(v[0], {0.5, -1.5, 2.0}); }},
        {"concat_cols", 2, false, [](const In& v) { return concat_cols({v[0], v[1]}); }},
        {"concat_rows", 2, false, [](const In& v) { return concat_rows({v[0], v[1]}); }},
        {"scatter_rows", 2, false,
         [](const In& v) {
             return scatter_rows_replace(v[0], {1, 2},
                                         take_rows(v[1], {0, 1}));
         }},
        {"mse", 2, false, [](const In& v) { return mse(v[0], v[1]); }},
    };

    for (const Case& c : cases) {
        CAPTURE(c.name);
        Rng rng(Rng::mix(0xCAFE, static_cast<std::uint64_t>(&c - cases.data())));
        for (int s = 0; s < kSeeds; ++s) {
            In inputs;
            for (int i = 0; i < c.n_inputs; ++i) {
                inputs.push_back(c.positive ? Tensor::uniform({3, 4}, 0.5, 2.5, rng)
                                            : Tensor::uniform({3, 4}, -2, 2, rng));
            }
            gradcheck(inputs, c.fn, rng);
        }
    }
}

TEST_CASE("gradcheck: matmul, layernorm, max-reduce, cross-entropy") {
    Rng rng(0xBEE);
    for (int s = 0; s < 100; ++s) {
        gradcheck({Tensor::uniform({3, 4}, -2, 2, rng), Tensor::uniform({4, 2}, -2, 2, rng)},
                  [](const std::vector<Tensor>& v) { return matmul(v[0], v[1]); }, rng);
    }
    for (int s = 0; s < 100; ++s) {
        gradcheck({Tensor::uniform({3, 5}, -2, 2, rng), Tensor::uniform({5}, 0.5, 1.5, rng),
                   Tensor::uniform({5}, -0.5, 0.5, rng)},
                  [](const std::vector<Tensor>& v) { return layernorm(v[0], v[1], v[2], 1e-3); },
                  rng);
    }
    // max routes gradient to the winning element; keep entries separated so
    // finite differences stay on one side of the tie
    for (int s = 0; s < 100; ++s) {
        Tensor x = Tensor::uniform({3, 4}, -2, 2, rng);
        bool ok = true;
        for (std::int64_t r = 0; r < 3 && ok; ++r) {
            std::vector<double> row(x.data.begin() + r * 4, x.data.begin() + (r + 1) * 4);
            std::sort(row.begin(), row.end());
            if (row[3] - row[2] < 1e-3) ok = false;
        }
        if (!ok) continue;
        gradcheck({x}, [](const std::vector<Tensor>& v) { return reduce(Reduce::max, v[0], 1); },
                  rng);
    }
    for (int s = 0; s < 100; ++s) {
        gradcheck({Tensor::uniform({4, 3}, -2, 2, rng)},
                  [](const std::vector<Tensor>& v) {
                      return cross_entropy(v[0], {0, 2, 1, 2});
                  },
                  rng);
    }
}

TEST_CASE("tape replay is deterministic") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        GradTape tape;
        Tensor x = tape.watch(Tensor::uniform({4, 4}, -1, 1, rng));
        Tensor w = tape.watch(Tensor::uniform({4, 4}, -1, 1, rng));
        Tensor y = softmax(matmul(silu(x), w), 1);
        Tensor loss = reduce_all(Reduce::mean, mul(y, y));
        tape.backward(loss);
        return std::make_pair(loss.scalar(), tape.grad(w).data);
    };
    const auto a = run(42);
    const auto b = run(42);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}
