#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "uniperc/autograd.hpp"
#include "uniperc/gradcheck.hpp"
#include "uniperc/nn.hpp"

using namespace uniperc;

namespace {

Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = d(rng);
    return t;
}

void expect_pass(const gradcheck::Check& c) {
    auto res = gradcheck::run_check(c);
    INFO(c.name, " max_rel_err=", res.max_rel_err);
    CHECK(res.pass);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
    std::mt19937_64 rng(7);
    Tensor a = randn({2, 4, 5}, rng);
    Tensor b = randn({2, 4, 5}, rng);
    for (auto& v : b.data) v += (v >= 0 ? 2.0 : -2.0);  // keep away from 0 for div

    using namespace ag;
    expect_pass({"add", {a, b}, [](const std::vector<Var>& in) {
                     return mean(mul(add(in[0], in[1]), in[0]));
                 }});
    expect_pass({"div", {a, b}, [](const std::vector<Var>& in) {
                     return mean(div(in[0], in[1]));
                 }});
    expect_pass({"exp_log", {b}, [](const std::vector<Var>& in) {
                     return mean(vlog(vexp(in[0])));
                 }});
    expect_pass({"sigmoid_elu", {a}, [](const std::vector<Var>& in) {
                     return sum(sigmoid(elu(in[0])));
                 }});
    expect_pass({"sqrt_square", {a}, [](const std::vector<Var>& in) {
                     return mean(vsqrt(add_scalar(square(in[0]), 1.0)));
                 }});
    expect_pass({"trig", {a}, [](const std::vector<Var>& in) {
                     return mean(mul(vsin(in[0]), vcos(in[0])));
                 }});
    expect_pass({"abs", {b}, [](const std::vector<Var>& in) {
                     return mean(vabs(in[0]));
                 }});
}

TEST_CASE("broadcast and structure gradients") {
    std::mt19937_64 rng(11);
    Tensor x = randn({3, 4, 4}, rng);
    Tensor m = randn({1, 4, 4}, rng);
    Tensor s = randn({1}, rng);
    using namespace ag;
    expect_pass({"mul_bcast_ch", {x, m}, [](const std::vector<Var>& in) {
                     return mean(mul_bcast_ch(in[0], in[1]));
                 }});
    expect_pass({"scale_shift", {s, x}, [](const std::vector<Var>& in) {
                     return mean(shift_by(in[0], scale_by(in[0], in[1])));
                 }});
    expect_pass({"concat_slice", {x, m}, [](const std::vector<Var>& in) {
                     Var c = concat_ch({in[0], in[1]});
                     return mean(square(slice_ch(c, 1, 2)));
                 }});
    expect_pass({"broadcast_ch", {s}, [](const std::vector<Var>& in) {
                     return mean(square(broadcast_ch(in[0], 3, 2, 2)));
                 }});
}

TEST_CASE("matrix op gradients") {
    std::mt19937_64 rng(13);
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({4, 2}, rng);
    Tensor row = randn({2}, rng);
    using namespace ag;
    expect_pass({"matmul_bias", {a, b, row}, [](const std::vector<Var>& in) {
                     return mean(add_row_bcast(matmul(in[0], in[1]), in[2]));
                 }});
    expect_pass({"softmax", {a}, [](const std::vector<Var>& in) {
                     Var s = softmax_rows(in[0]);
                     return mean(mul(s, transpose(transpose(s))));
                 }});
}

TEST_CASE("spatial op gradients") {
    std::mt19937_64 rng(17);
    Tensor x = randn({2, 6, 8}, rng);
    Tensor w = randn({3, 2, 3, 3}, rng, 0.5);
    Tensor bias = randn({3}, rng);
    using namespace ag;
    expect_pass({"conv_s1", {x, w, bias}, [](const std::vector<Var>& in) {
                     return mean(square(conv2d(in[0], in[1], in[2], 1, 1)));
                 }});
    expect_pass({"conv_s2", {x, w, bias}, [](const std::vector<Var>& in) {
                     return mean(square(conv2d(in[0], in[1], in[2], 2, 1)));
                 }});
    expect_pass({"upsample2", {x}, [](const std::vector<Var>& in) {
                     return mean(square(upsample2(in[0])));
                 }});
    expect_pass({"resize", {x}, [](const std::vector<Var>& in) {
                     return mean(square(resize_bilinear(in[0], 5, 5)));
                 }});
    expect_pass({"avgpool2", {x}, [](const std::vector<Var>& in) {
                     return mean(square(avgpool2(in[0])));
                 }});
    expect_pass({"boxfilter3", {x}, [](const std::vector<Var>& in) {
                     return mean(square(boxfilter3(in[0])));
                 }});
    expect_pass({"grad_xy", {x}, [](const std::vector<Var>& in) {
                     return add(mean(vabs(grad_x(in[0]))), mean(vabs(grad_y(in[0]))));
                 }});
    expect_pass({"global_avg", {x}, [](const std::vector<Var>& in) {
                     Var g = global_avg(in[0]);
                     return sum(square(g));
                 }});
}

TEST_CASE("grid_sample gradients (image and coords)") {
    std::mt19937_64 rng(19);
    Tensor img = randn({2, 6, 7}, rng);
    Tensor coords({2, 4, 4});
    std::uniform_real_distribution<double> du(0.7, 5.3), dv(0.7, 4.3);
    for (int p = 0; p < 16; ++p) {
        coords.data[p] = du(rng);
        coords.data[16 + p] = dv(rng);
    }
    expect_pass({"grid_sample", {img, coords}, [](const std::vector<Var>& in) {
                     return ag::mean(ag::square(ag::grid_sample(in[0], in[1])));
                 }});
}

TEST_CASE("batchnorm gradients") {
    std::mt19937_64 rng(23);
    Tensor x = randn({3, 4, 4}, rng);
    Tensor gamma = randn({3}, rng);
    Tensor beta = randn({3}, rng);
    expect_pass({"bn_train", {x, gamma, beta}, [](const std::vector<Var>& in) {
                     return ag::mean(
                         ag::square(ag::batchnorm_train(in[0], in[1], in[2], 1e-5, nullptr,
                                                        nullptr)));
                 }});
    Tensor mu = randn({3}, rng);
    Tensor var = Tensor::full({3}, 1.3);
    expect_pass({"bn_eval", {x, gamma, beta}, [mu, var](const std::vector<Var>& in) {
                     return ag::mean(
                         ag::square(ag::batchnorm_eval(in[0], in[1], in[2], mu, var, 1e-5)));
                 }});
}

TEST_CASE("value sanity") {
    // mean of softmax row is 1/C
    Tensor a({2, 3}, {0.1, 0.2, 0.3, -1, 2, 0.5});
    Var s = ag::softmax_rows(Var::constant(a));
    for (int i = 0; i < 2; ++i) {
        double rowsum = s.value().m(i, 0) + s.value().m(i, 1) + s.value().m(i, 2);
        CHECK(rowsum == doctest::Approx(1.0));
    }
    // avgpool of constant image is constant
    Var c = Var::constant(Tensor::full({1, 4, 4}, 2.5));
    CHECK(ag::avgpool2(c).value()[0] == doctest::Approx(2.5));
    // bilinear identity resize
    std::mt19937_64 rng(3);
    Tensor x = randn({1, 5, 5}, rng);
    Var same = ag::resize_bilinear(Var::constant(x), 5, 5);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(same.value()[i] == doctest::Approx(x[i]));
}

TEST_CASE("adam converges on a quadratic") {
    nn::ParamRegistry reg;
    Var p = reg.add_param("p", Tensor({2}, {5.0, -3.0}));
    nn::AdamOptimizer opt(0.05);
    for (int i = 0; i < 400; ++i) {
        reg.zero_grads();
        Var loss = ag::sum(ag::square(p));
        loss.backward();
        opt.step(reg.params(), {"p"}, 10.0);
    }
    CHECK(std::abs(p.value()[0]) < 1e-2);
    CHECK(std::abs(p.value()[1]) < 1e-2);
}
