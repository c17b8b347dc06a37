#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "evrec/prototypes.hpp"
#include "testing_util.hpp"

using namespace evrec;
using evrec::testing::random_unit_rows;

namespace {

IntensityImage constant_image(double value, int size = 8) {
    IntensityImage image;
    image.data = Tensor({static_cast<size_t>(size), static_cast<size_t>(size)}, value);
    return image;
}

IntensityImage corner_image(int corner, int size = 8) {
    IntensityImage image = constant_image(0.1, size);
    const int half = size / 2;
    const int y0 = (corner / 2) * half;
    const int x0 = (corner % 2) * half;
    for (int y = y0; y < y0 + half; ++y) {
        for (int x = x0; x < x0 + half; ++x) {
            image.data(static_cast<size_t>(y), static_cast<size_t>(x)) = 0.9;
        }
    }
    return image;
}

/// Exhaustive best bipartition by total within-cluster cosine distance.
std::pair<std::vector<size_t>, std::vector<size_t>> best_bipartition(const Tensor& rows) {
    const size_t n = rows.dim(0);
    auto cosine_dist = [&](size_t i, size_t j) {
        double dot = 0.0, ni = 1e-24, nj = 1e-24;
        for (size_t k = 0; k < rows.dim(1); ++k) {
            dot += rows(i, k) * rows(j, k);
            ni += rows(i, k) * rows(i, k);
            nj += rows(j, k) * rows(j, k);
        }
        return 1.0 - dot / std::sqrt(ni * nj);
    };
    double best = 1e18;
    std::pair<std::vector<size_t>, std::vector<size_t>> result;
    for (uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        std::vector<size_t> a, b;
        for (size_t i = 0; i < n; ++i) {
            ((mask >> i) & 1) ? a.push_back(i) : b.push_back(i);
        }
        double cost = 0.0;
        for (const auto& group : {a, b}) {
            for (size_t i = 0; i < group.size(); ++i)
                for (size_t j = i + 1; j < group.size(); ++j) cost += cosine_dist(group[i], group[j]);
        }
        if (cost < best) {
            best = cost;
            result = {a, b};
        }
    }
    return result;
}

}  // namespace

TEST_CASE("clustering identical points yields identical prototypes") {
    StubBackend backend(7, 16, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    for (int i = 0; i < 3; ++i) images["only"].push_back(constant_image(0.6));
    const PrototypeBank bank = build_prototypes(backend, images, 3);
    const Tensor expected = backend.encode_image(constant_image(0.6)).value();
    const Tensor& rows = bank.features.at("only");
    for (size_t l = 0; l < 3; ++l) {
        for (size_t k = 0; k < 16; ++k) {
            CHECK(rows(l, k) == Catch::Approx(expected[k]).margin(1e-9));
        }
    }
}

TEST_CASE("two well-separated groups recover the group means") {
    StubBackend backend(7, 16, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    // Two clusters of near-duplicates from different corners.
    for (int i = 0; i < 3; ++i) images["shape"].push_back(corner_image(0));
    for (int i = 0; i < 3; ++i) images["shape"].push_back(corner_image(3));
    const PrototypeBank bank = build_prototypes(backend, images, 2);

    // Independent oracle: embed, exhaustively bipartition, average, normalize.
    Tensor rows({6, 16}, 0.0);
    for (size_t i = 0; i < 6; ++i) {
        const Tensor v = backend.encode_image(i < 3 ? corner_image(0) : corner_image(3)).value();
        std::copy_n(v.data(), 16, rows.data() + i * 16);
    }
    const auto [ga, gb] = best_bipartition(rows);
    auto normalized_mean = [&](const std::vector<size_t>& group) {
        Tensor mean({16}, 0.0);
        for (size_t i : group)
            for (size_t k = 0; k < 16; ++k) mean[k] += rows(i, k) / group.size();
        double norm_sq = 1e-24;
        for (size_t k = 0; k < 16; ++k) norm_sq += mean[k] * mean[k];
        for (size_t k = 0; k < 16; ++k) mean[k] /= std::sqrt(norm_sq);
        return mean;
    };
    const Tensor mean_a = normalized_mean(ga);
    const Tensor mean_b = normalized_mean(gb);
    const Tensor& prototypes = bank.features.at("shape");
    // Prototype order follows the smallest member index.
    const Tensor& first = ga.front() == 0 ? mean_a : mean_b;
    const Tensor& second = ga.front() == 0 ? mean_b : mean_a;
    for (size_t k = 0; k < 16; ++k) {
        CHECK(prototypes(0, k) == Catch::Approx(first[k]).margin(1e-9));
        CHECK(prototypes(1, k) == Catch::Approx(second[k]).margin(1e-9));
    }
}

TEST_CASE("L = 1 collapses to the normalized mean of all features") {
    StubBackend backend(3, 8, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    images["mix"] = {corner_image(0), corner_image(1), corner_image(2)};
    const PrototypeBank bank = build_prototypes(backend, images, 1);
    Tensor mean({8}, 0.0);
    for (const auto& image : images["mix"]) {
        const Tensor v = backend.encode_image(image).value();
        for (size_t k = 0; k < 8; ++k) mean[k] += v[k] / 3.0;
    }
    double norm_sq = 1e-24;
    for (size_t k = 0; k < 8; ++k) norm_sq += mean[k] * mean[k];
    for (size_t k = 0; k < 8; ++k) mean[k] /= std::sqrt(norm_sq);
    for (size_t k = 0; k < 8; ++k) {
        CHECK(bank.features.at("mix")(0, k) == Catch::Approx(mean[k]).margin(1e-9));
    }
}

TEST_CASE("build_prototypes names the category that lacks images") {
    StubBackend backend(7, 8, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    images["scarce"] = {constant_image(0.5)};
    CHECK_THROWS_WITH(build_prototypes(backend, images, 3),
                      Catch::Matchers::ContainsSubstring("scarce"));
}

TEST_CASE("assign_cluster picks the max inner product with low-index ties") {
    PrototypeBank bank;
    bank.clusters = 2;
    bank.dim = 3;
    Tensor rows({2, 3}, 0.0);
    rows(0, 0) = 1.0;
    rows(1, 1) = 1.0;
    bank.features["c"] = rows;
    bank.categories = {"c"};
    Tensor v({3}, 0.0);
    v[1] = 1.0;
    CHECK(assign_cluster(v, "c", bank) == 1);
    Tensor diag({3}, 0.0);
    diag[0] = diag[1] = std::sqrt(0.5);
    CHECK(assign_cluster(diag, "c", bank) == 0);  // tie -> lowest index
    CHECK_THROWS_WITH(assign_cluster(v, "missing", bank),
                      Catch::Matchers::ContainsSubstring("missing"));

    PrototypeBank single;
    single.clusters = 1;
    single.dim = 3;
    single.features["c"] = Tensor({1, 3}, 0.5);
    CHECK(assign_cluster(v, "c", single) == 0);
}

TEST_CASE("assign_cluster matches a linear-scan oracle on random queries") {
    Rng rng(13);
    PrototypeBank bank;
    bank.clusters = 5;
    bank.dim = 12;
    bank.features["c"] = random_unit_rows(5, 12, rng);
    bank.categories = {"c"};
    for (int trial = 0; trial < 200; ++trial) {
        Tensor v({12}, 0.0);
        for (size_t k = 0; k < 12; ++k) v[k] = rng.normal();
        size_t expected = 0;
        double best = -1e300;
        for (size_t l = 0; l < 5; ++l) {
            double dot = 0.0;
            for (size_t k = 0; k < 12; ++k) dot += v[k] * bank.features["c"](l, k);
            if (dot > best) {
                best = dot;
                expected = l;
            }
        }
        CHECK(assign_cluster(v, "c", bank) == expected);
    }
}

TEST_CASE("bank construction is deterministic and the file round-trips") {
    StubBackend backend(7, 16, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    images["a"] = {corner_image(0), corner_image(1), corner_image(2), corner_image(3)};
    images["b"] = {corner_image(3), corner_image(2), corner_image(1)};
    const PrototypeBank bank1 = build_prototypes(backend, images, 2);
    const PrototypeBank bank2 = build_prototypes(backend, images, 2);
    CHECK(bitwise_equal(bank1.features.at("a"), bank2.features.at("a")));

    const std::string path =
        (std::filesystem::temp_directory_path() / "evrec_bank_test.bin").string();
    save_bank(path, bank1);
    const PrototypeBank loaded = load_bank(path);
    CHECK(loaded.categories == bank1.categories);
    CHECK(loaded.clusters == bank1.clusters);
    CHECK(loaded.dim == bank1.dim);
    CHECK(bitwise_equal(loaded.features.at("a"), bank1.features.at("a")));
    CHECK(bitwise_equal(loaded.features.at("b"), bank1.features.at("b")));

    // Corrupt one payload byte: integrity check must fail.
    const auto size = std::filesystem::file_size(path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(size) - 12);
    char byte = 0;
    f.read(&byte, 1);
    f.seekp(static_cast<std::streamoff>(size) - 12);
    byte = static_cast<char>(byte ^ 0xFF);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_WITH(load_bank(path), Catch::Matchers::ContainsSubstring("integrity"));
    std::remove(path.c_str());
}

TEST_CASE("every prototype row is unit-normalized") {
    StubBackend backend(5, 16, 4);
    std::map<std::string, std::vector<IntensityImage>> images;
    images["a"] = {corner_image(0), corner_image(1), corner_image(2), corner_image(3)};
    const PrototypeBank bank = build_prototypes(backend, images, 2);
    for (size_t l = 0; l < 2; ++l) {
        double norm_sq = 0.0;
        for (size_t k = 0; k < 16; ++k) {
            norm_sq += bank.features.at("a")(l, k) * bank.features.at("a")(l, k);
        }
        CHECK(std::sqrt(norm_sq) == Catch::Approx(1.0).margin(1e-5));
    }
}
