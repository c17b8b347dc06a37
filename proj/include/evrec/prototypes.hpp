#pragma once

#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "evrec/encoders.hpp"
#include "evrec/tensor.hpp"

#include <nlohmann/json.hpp>

namespace evrec {

/// Per-category prototype features built from unpaired images: L unit-norm
/// rows per category, frozen after construction.
struct PrototypeBank {
    std::vector<std::string> categories;
    int clusters = 0;  // L
    int dim = 0;       // D
    std::map<std::string, Tensor> features;  // category -> (L, D)

    bool covers(const std::string& category) const { return features.count(category) > 0; }
};

/// Agglomerative clustering with average linkage over cosine distance.
/// Merges are deterministic: the smallest average distance wins and ties
/// break toward the lexicographically smallest cluster pair.
inline std::vector<std::vector<size_t>> agglomerative_cluster(const Tensor& rows, size_t clusters) {
    const size_t n = rows.dim(0), d = rows.dim(1);
    if (clusters < 1 || clusters > n) {
        throw std::invalid_argument("agglomerative_cluster: invalid cluster count");
    }
    // Pairwise cosine distances of unit-normalized rows.
    std::vector<double> dist(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            double dot = 0.0, ni = 1e-24, nj = 1e-24;
            for (size_t k = 0; k < d; ++k) {
                dot += rows(i, k) * rows(j, k);
                ni += rows(i, k) * rows(i, k);
                nj += rows(j, k) * rows(j, k);
            }
            const double cosine = dot / std::sqrt(ni * nj);
            dist[i * n + j] = dist[j * n + i] = 1.0 - cosine;
        }
    }
    std::vector<std::vector<size_t>> groups(n);
    for (size_t i = 0; i < n; ++i) groups[i] = {i};
    while (groups.size() > clusters) {
        double best = 0.0;
        size_t best_a = 0, best_b = 0;
        bool found = false;
        for (size_t a = 0; a < groups.size(); ++a) {
            for (size_t b = a + 1; b < groups.size(); ++b) {
                double s = 0.0;
                for (size_t i : groups[a])
                    for (size_t j : groups[b]) s += dist[i * n + j];
                const double avg = s / static_cast<double>(groups[a].size() * groups[b].size());
                if (!found || avg < best) {
                    best = avg;
                    best_a = a;
                    best_b = b;
                    found = true;
                }
            }
        }
        groups[best_a].insert(groups[best_a].end(), groups[best_b].begin(), groups[best_b].end());
        std::sort(groups[best_a].begin(), groups[best_a].end());
        groups.erase(groups.begin() + static_cast<long>(best_b));
    }
    std::sort(groups.begin(), groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return groups;
}

/// Encode every unpaired image with the frozen backend, cluster each
/// category into L groups and store the re-normalized cluster means.
inline PrototypeBank build_prototypes(EncoderBackend& backend,
                                      const std::map<std::string, std::vector<IntensityImage>>& images_by_category,
                                      int clusters) {
    if (clusters < 1) {
        throw std::invalid_argument("build_prototypes: L must be >= 1");
    }
    PrototypeBank bank;
    bank.clusters = clusters;
    bank.dim = backend.dim();
    for (const auto& [category, images] : images_by_category) {
        if (images.size() < static_cast<size_t>(clusters)) {
            throw std::runtime_error("build_prototypes: category \"" + category + "\" has "
                                     + std::to_string(images.size()) + " images, need >= "
                                     + std::to_string(clusters));
        }
        Tensor rows({images.size(), static_cast<size_t>(bank.dim)}, 0.0);
        for (size_t i = 0; i < images.size(); ++i) {
            const Tensor feature = backend.encode_image(images[i]).value();
            std::copy_n(feature.data(), static_cast<size_t>(bank.dim),
                        rows.data() + i * static_cast<size_t>(bank.dim));
        }
        const auto groups = agglomerative_cluster(rows, static_cast<size_t>(clusters));
        Tensor prototypes({static_cast<size_t>(clusters), static_cast<size_t>(bank.dim)}, 0.0);
        for (size_t g = 0; g < groups.size(); ++g) {
            for (size_t member : groups[g]) {
                for (int k = 0; k < bank.dim; ++k) {
                    prototypes(g, static_cast<size_t>(k)) += rows(member, static_cast<size_t>(k));
                }
            }
            double norm_sq = 1e-24;
            for (int k = 0; k < bank.dim; ++k) {
                prototypes(g, static_cast<size_t>(k)) /= static_cast<double>(groups[g].size());
                norm_sq += prototypes(g, static_cast<size_t>(k)) * prototypes(g, static_cast<size_t>(k));
            }
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (int k = 0; k < bank.dim; ++k) prototypes(g, static_cast<size_t>(k)) *= inv;
        }
        bank.categories.push_back(category);
        bank.features[category] = std::move(prototypes);
    }
    std::sort(bank.categories.begin(), bank.categories.end());
    return bank;
}

/// Closest-prototype assignment by inner product; ties break toward the
/// lowest cluster index. No gradients flow through this choice.
inline size_t assign_cluster(const Tensor& v, const std::string& category, const PrototypeBank& bank) {
    auto it = bank.features.find(category);
    if (it == bank.features.end()) {
        throw std::runtime_error("assign_cluster: unknown category \"" + category + "\"");
    }
    const Tensor& rows = it->second;
    if (v.size() != rows.dim(1)) {
        throw std::invalid_argument("assign_cluster: feature dimension mismatch");
    }
    size_t best = 0;
    double best_score = 0.0;
    for (size_t l = 0; l < rows.dim(0); ++l) {
        double s = 0.0;
        for (size_t k = 0; k < rows.dim(1); ++k) s += v[k] * rows(l, k);
        if (l == 0 || s > best_score) {
            best = l;
            best_score = s;
        }
    }
    return best;
}

// Bank file: magic + version + JSON header + raw little-endian doubles with a
// CRC over the payload.

inline void save_bank(const std::string& path, const PrototypeBank& bank) {
    nlohmann::json header;
    header["categories"] = bank.categories;
    header["clusters"] = bank.clusters;
    header["dim"] = bank.dim;
    const std::string header_text = header.dump();

    std::vector<double> payload;
    for (const auto& category : bank.categories) {
        const Tensor& rows = bank.features.at(category);
        payload.insert(payload.end(), rows.data(), rows.data() + rows.size());
    }
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
                static_cast<uInt>(payload.size() * sizeof(double))));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_bank: cannot open " + path);
    const char magic[8] = {'E', 'V', 'R', 'E', 'C', 'B', 'N', 'K'};
    const uint32_t version = 1;
    const uint64_t header_len = header_text.size();
    const uint64_t payload_len = payload.size() * sizeof(double);
    out.write(magic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.write(reinterpret_cast<const char*>(&payload_len), sizeof(payload_len));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload_len));
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw std::runtime_error("save_bank: write failed for " + path);
}

inline PrototypeBank load_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_bank: cannot open " + path);
    char magic[8] = {};
    uint32_t version = 0;
    uint64_t header_len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || std::string(magic, 8) != "EVRECBNK") {
        throw std::runtime_error("load_bank: " + path + " is not a prototype bank file");
    }
    if (version != 1) {
        throw std::runtime_error("load_bank: incompatible bank version "
                                 + std::to_string(version) + " (expected 1)");
    }
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    uint64_t payload_len = 0;
    in.read(reinterpret_cast<char*>(&payload_len), sizeof(payload_len));
    std::vector<double> payload(payload_len / sizeof(double));
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_len));
    uint32_t crc_stored = 0;
    in.read(reinterpret_cast<char*>(&crc_stored), sizeof(crc_stored));
    if (!in) throw std::runtime_error("load_bank: truncated file " + path);
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload_len)));
    if (crc != crc_stored) {
        throw std::runtime_error("load_bank: integrity check failed for " + path);
    }

    const nlohmann::json header = nlohmann::json::parse(header_text);
    PrototypeBank bank;
    bank.categories = header.at("categories").get<std::vector<std::string>>();
    bank.clusters = header.at("clusters").get<int>();
    bank.dim = header.at("dim").get<int>();
    const size_t per_category = static_cast<size_t>(bank.clusters) * static_cast<size_t>(bank.dim);
    if (payload.size() != per_category * bank.categories.size()) {
        throw std::runtime_error("load_bank: payload size mismatch in " + path);
    }
    size_t offset = 0;
    for (const auto& category : bank.categories) {
        Tensor rows({static_cast<size_t>(bank.clusters), static_cast<size_t>(bank.dim)}, 0.0);
        std::copy_n(payload.data() + offset, per_category, rows.data());
        offset += per_category;
        bank.features[category] = std::move(rows);
    }
    return bank;
}

}  // namespace evrec
