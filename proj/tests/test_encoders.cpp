#include <catch2/catch_amalgamated.hpp>

#include "evrec/encoders.hpp"
#include "testing_util.hpp"

using namespace evrec;
using evrec::testing::max_gradcheck_error;

TEST_CASE("build_prompts substitutes the placeholder verbatim") {
    CHECK(build_prompts({"anchor"}, "image of a [CLASS].")
          == std::vector<std::string>{"image of a anchor."});
    CHECK(build_prompts({"a", "b"}, "[CLASS]") == std::vector<std::string>{"a", "b"});
    CHECK_THROWS_WITH(build_prompts({}, "image of a [CLASS]."),
                      Catch::Matchers::ContainsSubstring("empty"));
    CHECK_THROWS_WITH(build_prompts({"a"}, "image of a thing."),
                      Catch::Matchers::ContainsSubstring("placeholder"));
    CHECK_THROWS_WITH(build_prompts({"a"}, "[CLASS] and [CLASS]"),
                      Catch::Matchers::ContainsSubstring("multiple"));
}

TEST_CASE("stub text encoding is deterministic with unit rows") {
    StubBackend backend(7, 16, 8);
    const std::vector<std::string> prompts = {"image of a wheel.", "image of a cross."};
    const Tensor a = backend.encode_text(prompts);
    const Tensor b = backend.encode_text(prompts);
    REQUIRE(a.shape() == std::vector<size_t>{2, 16});
    CHECK(bitwise_equal(a, b));
    for (size_t i = 0; i < 2; ++i) {
        double norm_sq = 0.0;
        for (size_t j = 0; j < 16; ++j) norm_sq += a(i, j) * a(i, j);
        CHECK(std::sqrt(norm_sq) == Catch::Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("stub text encoding matches an independent reimplementation") {
    // Clean-room copy of the stub definition: per prompt, seed an Rng with
    // hash_mix(backend_seed, fnv1a64(prompt)), draw D normals, normalize.
    const uint64_t seed = 7;
    const int dim = 16;
    StubBackend backend(seed, dim, 8);
    const std::string prompt = "image of a kettle.";
    const Tensor row = backend.encode_text({prompt});

    Rng oracle(hash_mix(seed, fnv1a64(prompt)));
    std::vector<double> expected(dim);
    double norm_sq = 1e-24;
    for (int j = 0; j < dim; ++j) {
        expected[static_cast<size_t>(j)] = oracle.normal();
        norm_sq += expected[static_cast<size_t>(j)] * expected[static_cast<size_t>(j)];
    }
    for (int j = 0; j < dim; ++j) {
        expected[static_cast<size_t>(j)] /= std::sqrt(norm_sq);
        CHECK(row[static_cast<size_t>(j)] == Catch::Approx(expected[static_cast<size_t>(j)]).epsilon(1e-12));
    }
}

TEST_CASE("stub records the text call log") {
    StubBackend backend;
    backend.encode_text({"image of a wheel."});
    backend.encode_text({"image of a cross.", "image of a ladder."});
    REQUIRE(backend.text_call_log().size() == 3);
    CHECK(backend.text_call_log()[2] == "image of a ladder.");
    backend.clear_text_call_log();
    CHECK(backend.text_call_log().empty());
}

TEST_CASE("stub image encoding is deterministic, unit-norm and validated") {
    StubBackend backend(3, 24, 4);
    Rng rng(5);
    IntensityImage image;
    image.data = Tensor({16, 16}, 0.0);
    for (size_t i = 0; i < image.data.size(); ++i) image.data[i] = rng.uniform();
    const Tensor a = backend.encode_image(image).value();
    const Tensor b = backend.encode_image(image).value();
    CHECK(bitwise_equal(a, b));
    double norm_sq = 0.0;
    for (size_t j = 0; j < a.size(); ++j) norm_sq += a[j] * a[j];
    CHECK(std::sqrt(norm_sq) == Catch::Approx(1.0).margin(1e-5));

    image.data(3, 3) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(backend.encode_image(image),
                      Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("gradient of v . f w.r.t. pixels matches finite differences") {
    StubBackend backend(9, 8, 4);
    Rng rng(21);
    Var image = Var::param(Tensor({8, 8}, 0.0));
    for (size_t i = 0; i < image.mutable_value().size(); ++i) {
        image.mutable_value()[i] = rng.uniform();
    }
    const Tensor f = backend.encode_text({"image of a walnut."});
    auto loss = [&] {
        Var v = backend.encode_image(image);  // (1, D)
        return sum_all(rowwise_dot(v, Var::constant(f)));
    };
    CHECK(max_gradcheck_error(loss, {image}, 1e-6) < 1e-3);
}

TEST_CASE("class probabilities form a softmax over cosine similarities") {
    SECTION("equal similarities give the uniform vector") {
        Tensor f({4, 2}, 0.0);
        for (size_t i = 0; i < 4; ++i) f(i, 0) = 1.0;
        Tensor v({2}, 0.0);
        v[0] = 1.0;
        const Tensor p = class_probabilities(v, f, 1.0);
        for (size_t i = 0; i < 4; ++i) CHECK(p[i] == Catch::Approx(0.25).margin(1e-12));
    }
    SECTION("similarities [1, 0] at temperature 1") {
        Tensor f({2, 2}, 0.0);
        f(0, 0) = 1.0;
        f(1, 1) = 1.0;
        Tensor v({2}, 0.0);
        v[0] = 1.0;
        const Tensor p = class_probabilities(v, f, 1.0);
        CHECK(p[0] == Catch::Approx(0.7311).margin(1e-4));
        CHECK(p[1] == Catch::Approx(0.2689).margin(1e-4));
        CHECK(p[0] + p[1] == Catch::Approx(1.0).margin(1e-6));
    }
    SECTION("temperature never changes the argmax") {
        Rng rng(33);
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor f = evrec::testing::random_unit_rows(5, 8, rng);
            Tensor v({8}, 0.0);
            for (size_t j = 0; j < 8; ++j) v[j] = rng.normal();
            const size_t base = predict(class_probabilities(v, f, 1.0));
            for (const double temp : {0.01, 0.5, 100.0}) {
                CHECK(predict(class_probabilities(v, f, temp)) == base);
            }
        }
    }
    SECTION("temperature must be positive") {
        Tensor f({2, 2}, 0.0);
        Tensor v({2}, 0.0);
        CHECK_THROWS_AS(class_probabilities(v, f, 0.0), std::invalid_argument);
    }
}

TEST_CASE("predict breaks ties toward the lowest index") {
    Tensor p({3}, 0.0);
    p[0] = 0.2; p[1] = 0.5; p[2] = 0.3;
    CHECK(predict(p) == 1);
    Tensor tie({2}, 0.5);
    CHECK(predict(tie) == 0);
    Tensor onehot({4}, 0.0);
    onehot[2] = 1.0;
    CHECK(predict(onehot) == 2);
    CHECK_THROWS_AS(predict(Tensor({0}, 0.0)), std::invalid_argument);
}

TEST_CASE("make_backend parses stub identifiers") {
    auto backend = make_backend("stub:seed=13,dim=12,input=4");
    CHECK(backend->dim() == 12);
    CHECK(backend->preprocess().input_size == 4);
    CHECK(backend->identifier() == "stub:seed=13,dim=12,input=4");
    CHECK(backend->thread_safe());
    CHECK(make_backend("stub")->dim() == 32);
    CHECK_THROWS_WITH(make_backend("/weights/vit_b32.bin"),
                      Catch::Matchers::ContainsSubstring("stub"));
    CHECK_THROWS_AS(make_backend("stub:bogus=1"), std::invalid_argument);
}

TEST_CASE("stub parameter checksum is stable") {
    StubBackend a(7, 16, 8), b(7, 16, 8), c(8, 16, 8);
    CHECK(a.parameter_checksum() == b.parameter_checksum());
    CHECK(a.parameter_checksum() != c.parameter_checksum());
}
