#include <catch2/catch_amalgamated.hpp>

#include "evrec/network.hpp"
#include "testing_util.hpp"

using namespace evrec;
using evrec::testing::max_gradcheck_error;

namespace {

ReconNetConfig tiny_config(int t_bins = 1, int base = 2, int depth = 2, int res_blocks = 1) {
    ReconNetConfig c;
    c.input_channels = 2 * t_bins;
    c.base_width = base;
    c.depth = depth;
    c.residual_blocks = res_blocks;
    return c;
}

}  // namespace

TEST_CASE("forward output matches the input spatial size and range") {
    const ReconNet net(tiny_config(2, 4, 3, 2), 1);
    for (const size_t size : {8u, 16u, 12u}) {
        Var in = Var::constant(Tensor({1, 4, size, size}, 0.3));
        const Var out = net.forward(in, false);
        REQUIRE(out.value().shape() == std::vector<size_t>{1, 1, size, size});
        CHECK(min_value(out.value()) >= 0.0);
        CHECK(max_value(out.value()) <= 1.0);
    }
}

TEST_CASE("forward rejects bad inputs") {
    const ReconNet net(tiny_config(2, 4, 3, 2), 1);
    CHECK_THROWS_WITH(net.forward(Var::constant(Tensor({1, 6, 8, 8}, 0.0)), false),
                      Catch::Matchers::ContainsSubstring("4 input channels"));
    CHECK_THROWS_WITH(net.forward(Var::constant(Tensor({1, 4, 10, 10}, 0.0)), false),
                      Catch::Matchers::ContainsSubstring("not divisible"));
}

TEST_CASE("zeroed parameters give a constant 0.5 image") {
    ReconNet net(tiny_config(1, 2, 2, 1), 3);
    for (auto& p : net.parameters()) {
        p.var.mutable_value().fill(0.0);
    }
    EventTensor est;
    est.data = Tensor({2, 1, 8, 8}, 0.0);
    est.data(0, 0, 2, 2) = 5.0;
    const IntensityImage image = net.reconstruct(est);
    for (size_t i = 0; i < image.data.size(); ++i) {
        CHECK(image.data[i] == 0.5);
    }
}

TEST_CASE("initialization is deterministic per seed") {
    const ReconNet a(tiny_config(), 42);
    const ReconNet b(tiny_config(), 42);
    const ReconNet c(tiny_config(), 43);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != c.checksum());
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(bitwise_equal(a.parameters()[i].var.value(), b.parameters()[i].var.value()));
    }
}

TEST_CASE("parameter count matches a per-layer census") {
    const int t_bins = 9, base = 32, depth = 3, res = 2;
    const ReconNet net(tiny_config(t_bins, base, depth, res), 1);
    auto conv_params = [](int ci, int co) { return static_cast<size_t>(co) * ci * 9 + co; };
    auto norm_params = [](int c) { return static_cast<size_t>(2) * c; };
    size_t expected = 0;
    // encoder levels
    expected += conv_params(2 * t_bins, base) + norm_params(base);
    expected += conv_params(base, 2 * base) + norm_params(2 * base);
    // bottleneck + residual blocks
    expected += conv_params(2 * base, 4 * base) + norm_params(4 * base);
    for (int r = 0; r < res; ++r) {
        expected += 2 * (conv_params(4 * base, 4 * base) + norm_params(4 * base));
    }
    // decoder levels
    expected += conv_params(4 * base + 2 * base, 2 * base) + norm_params(2 * base);
    expected += conv_params(2 * base + base, base) + norm_params(base);
    // head
    expected += conv_params(base, 1);
    CHECK(net.parameter_count() == expected);
}

TEST_CASE("mean output gradient matches finite differences per parameter group") {
    ReconNet net(tiny_config(1, 2, 2, 1), 7);
    Rng rng(11);
    Var in = Var::constant(evrec::testing::random_tensor({1, 2, 4, 4}, rng, 0.5));
    auto f = [&] { return mean_all(net.forward(in, true)); };
    for (auto& p : net.parameters()) {
        INFO(p.name);
        CHECK(max_gradcheck_error(f, {p.var}, 1e-5) < 1e-4);
    }
}

TEST_CASE("inference is deterministic and grad-free") {
    const ReconNet net(tiny_config(2, 2, 2, 1), 5);
    EventTensor est;
    est.data = Tensor({2, 2, 8, 8}, 0.0);
    est.data(0, 1, 3, 4) = 2.0;
    const IntensityImage a = net.reconstruct(est);
    const IntensityImage b = net.reconstruct(est);
    CHECK(bitwise_equal(a.data, b.data));
    const Var out = net.forward(Var::constant(est.data.reshaped({1, 4, 8, 8})), false);
    CHECK_FALSE(out.requires_grad());
}
