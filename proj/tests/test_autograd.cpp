#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "duet/errors.hpp"
#include "duet/params.hpp"
#include "gradcheck.hpp"

using namespace duet;
using ag::Matrix;
using ag::Var;

namespace {

Var leaf(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
    return Var(random_normal(r, c, s, rng), true);
}

}  // namespace

TEST_CASE("elementwise and matrix ops") {
    std::mt19937_64 rng(1);
    Var a = leaf(3, 4, rng), b = leaf(3, 4, rng), w = leaf(5, 4, rng), bias = leaf(1, 5, rng);
    CHECK(max_grad_error({a, b}, [&] { return ag::sum_all(ag::mul(ag::add(a, b), ag::sub(a, ag::scale(b, 0.5)))); }) <
          1e-6);
    CHECK(max_grad_error({a, w, bias}, [&] { return ag::mse(ag::gelu(ag::linear(a, w, &bias)), ag::constant(Matrix::Ones(3, 5))); }) < 1e-6);
    Var m = leaf(4, 2, rng);
    CHECK(max_grad_error({a, m}, [&] { return ag::sum_all(ag::relu(ag::matmul(a, m))); }) < 1e-6);
    Var g = leaf(1, 4, rng), be = leaf(1, 4, rng);
    const Matrix weights = random_normal(3, 4, 1.0, rng);
    CHECK(max_grad_error({a, g, be}, [&] {
              return ag::sum_all(ag::mul(ag::layer_norm(a, g, be), ag::constant(weights)));
          }) < 1e-5);
    CHECK(max_grad_error({a, g}, [&] { return ag::sum_all(ag::mul(ag::add_row(a, g), ag::add_row(a, g))); }) < 1e-6);
}

TEST_CASE("shape ops") {
    std::mt19937_64 rng(2);
    Var x = leaf(6, 4, rng);
    const Matrix target = random_normal(3, 8, 1.0, rng);
    CHECK(max_grad_error({x}, [&] { return ag::mse(ag::reshape(x, 3, 8), ag::constant(target)); }) < 1e-6);
    CHECK(ag::reshape(x, 3, 8).value()(1, 0) == x.value()(2, 0));
    CHECK(max_grad_error({x}, [&] { return ag::sum_all(ag::mul(ag::slice_cols(x, 1, 2), ag::slice_cols(x, 2, 2))); }) < 1e-6);
    CHECK(max_grad_error({x}, [&] {
              Var c = ag::concat_cols({x, ag::scale(x, 2.0)});
              return ag::mse(c, ag::constant(Matrix::Ones(6, 8)));
          }) < 1e-6);
    const Matrix t2 = random_normal(3, 12, 1.0, rng);
    CHECK(max_grad_error({x}, [&] { return ag::mse(ag::im2col(x, 3, 2, 1), ag::constant(t2)); }) < 1e-6);
    const Matrix t3 = random_normal(12, 4, 1.0, rng);
    CHECK(max_grad_error({x}, [&] { return ag::mse(ag::upsample_rows(x, 2), ag::constant(t3)); }) < 1e-6);
}

TEST_CASE("im2col layout") {
    Matrix x(4, 1);
    x << 1, 2, 3, 4;
    Matrix cols = ag::im2col(ag::constant(x), 4, 2, 1).value();
    REQUIRE(cols.rows() == 2);
    Matrix expected(2, 4);
    expected << 0, 1, 2, 3, 2, 3, 4, 0;
    CHECK(cols == expected);
}

TEST_CASE("embedding, gather and quantizer sum") {
    std::mt19937_64 rng(3);
    Var table = leaf(7, 3, rng);
    std::vector<std::int32_t> ids{1, 4, 4, 0};
    const Matrix target = random_normal(4, 3, 1.0, rng);
    CHECK(max_grad_error({table}, [&] { return ag::mse(ag::embedding(table, ids), ag::constant(target)); }) < 1e-6);
    Var a = leaf(2, 7, rng);
    CHECK(max_grad_error({a}, [&] { return ag::mse(ag::gather_cols(a, ids), ag::constant(Matrix::Ones(4, 2))); }) < 1e-6);
    std::vector<std::int32_t> codes{0, 1, 6, 6, 2, 2, 5, 0};  // 4 rows x depth 2
    Var out = ag::gather_sum({table}, codes, 2);
    CHECK(out.value().row(1) == table.value().row(6) + table.value().row(6));
    CHECK(max_grad_error({table}, [&] { return ag::mse(ag::gather_sum({table}, codes, 2), ag::constant(target)); }) < 1e-6);
}

TEST_CASE("attention and log-softmax loss") {
    std::mt19937_64 rng(4);
    Var q = leaf(5, 8, rng), k = leaf(5, 8, rng), v = leaf(5, 8, rng);
    CHECK(max_grad_error({q, k, v}, [&] { return ag::mse(ag::causal_attention(q, k, v, 2), ag::constant(Matrix::Ones(5, 8))); }) < 1e-5);
    Var logits = leaf(4, 6, rng);
    std::vector<std::int32_t> targets{1, 0, 5, 3};
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    CHECK(max_grad_error({logits}, [&] { return ag::masked_nll(ag::log_softmax(logits), targets, mask); }) < 1e-6);
    Matrix lp = ag::log_softmax(logits).value();
    for (Eigen::Index r = 0; r < lp.rows(); ++r) CHECK(std::abs(lp.row(r).array().exp().sum() - 1.0) < 1e-12);
    std::vector<std::uint8_t> none(4, 0);
    CHECK_THROWS_AS(ag::masked_nll(ag::log_softmax(logits), targets, none), ValidationError);
}

TEST_CASE("stop_gradient and no-grad guard") {
    std::mt19937_64 rng(5);
    Var a = leaf(2, 2, rng);
    ag::backward(ag::sum_all(ag::mul(ag::stop_gradient(a), a)));
    CHECK((a.grad() - a.value()).norm() < 1e-15);
    a.zero_grad();
    {
        ag::NoGradGuard guard;
        Var y = ag::sum_all(ag::mul(a, a));
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(ag::grad_enabled());
}

TEST_CASE("causal attention is row-restricted") {
    std::mt19937_64 rng(6);
    Matrix q = random_normal(6, 4, 1.0, rng), k = random_normal(6, 4, 1.0, rng), v = random_normal(6, 4, 1.0, rng);
    Matrix out = ag::causal_attention(ag::constant(q), ag::constant(k), ag::constant(v), 2).value();
    k.row(4).setRandom();
    v.row(4).setRandom();
    Matrix out2 = ag::causal_attention(ag::constant(q), ag::constant(k), ag::constant(v), 2).value();
    CHECK(out.topRows(4) == out2.topRows(4));
    CHECK(out.row(4) != out2.row(4));
}

TEST_CASE("AdamW and schedule") {
    ParameterSet ps;
    ps.add("w", Matrix::Constant(1, 1, 1.0));
    ps.at("w").mutable_grad() = Matrix::Constant(1, 1, 0.5);
    AdamW opt;
    opt.step(ps, {"w"}, 0.1);
    // First bias-corrected step moves by lr * sign(g).
    CHECK(std::abs(ps.at("w").value()(0, 0) - 0.9) < 1e-6);
    ParameterSet frozen;
    frozen.add("w", Matrix::Constant(2, 2, 3.0));
    ParameterSet before = frozen.clone();
    frozen.at("w").mutable_grad() = Matrix::Ones(2, 2);
    AdamW opt2;
    opt2.step(frozen, {"w"}, 0.0);
    CHECK(frozen.bitwise_equal(before));

    CHECK(cosine_lr(1.0, 0, 100, 0.01) == doctest::Approx(1.0));
    CHECK(cosine_lr(1.0, 52, 102, 0.01) == doctest::Approx(0.5));
    CHECK(cosine_lr(1.0, 100, 100, 0.01) < 1e-3);
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
    CHECK(content_hash("") == "cbf29ce484222325");
}
