#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evrec {

/// One camera event: pixel location, timestamp in microseconds and polarity.
/// Polarity is canonically {0, 1}; {-1, +1} sources are remapped at parser
/// boundaries.
struct Event {
    int x = 0;
    int y = 0;
    int64_t t = 0;
    int p = 0;
};

/// A time-ordered event sequence together with its sensor geometry.
/// Timestamps are non-decreasing and the stream is never empty.
struct EventStream {
    std::vector<Event> events;
    int sensor_width = 0;
    int sensor_height = 0;

    size_t count() const { return events.size(); }
    int64_t t_min() const { return events.front().t; }
    int64_t t_max() const { return events.back().t; }
};

namespace detail {

inline void validate_event_bounds(const Event& e, int width, int height, const std::string& where) {
    if (e.x < 0 || e.x >= width || e.y < 0 || e.y >= height) {
        throw std::runtime_error(where + ": event coordinates (" + std::to_string(e.x) + ", "
                                 + std::to_string(e.y) + ") outside sensor "
                                 + std::to_string(width) + "x" + std::to_string(height));
    }
}

inline void sort_by_timestamp(std::vector<Event>& events) {
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
}

}  // namespace detail

/// Decode binary event records. Each record is 5 bytes:
///   byte0 = x, byte1 = y, byte2 bit 7 = polarity,
///   timestamp us = ((byte2 & 0x7F) << 16) | (byte3 << 8) | byte4.
/// Records are kept in file order, then stably sorted by timestamp so equal
/// timestamps preserve file order.
inline EventStream parse_dataset_binary(const uint8_t* raw, size_t length,
                                        int sensor_width, int sensor_height) {
    if (length % 5 != 0) {
        throw std::runtime_error("parse_dataset_binary: malformed file, length "
                                 + std::to_string(length) + " is not a multiple of 5");
    }
    EventStream stream;
    stream.sensor_width = sensor_width;
    stream.sensor_height = sensor_height;
    stream.events.reserve(length / 5);
    for (size_t i = 0; i < length; i += 5) {
        Event e;
        e.x = raw[i];
        e.y = raw[i + 1];
        e.p = (raw[i + 2] >> 7) & 1;
        e.t = (static_cast<int64_t>(raw[i + 2] & 0x7F) << 16)
            | (static_cast<int64_t>(raw[i + 3]) << 8)
            | static_cast<int64_t>(raw[i + 4]);
        detail::validate_event_bounds(e, sensor_width, sensor_height,
                                      "parse_dataset_binary: record " + std::to_string(i / 5));
        stream.events.push_back(e);
    }
    if (stream.events.empty()) {
        throw std::runtime_error("parse_dataset_binary: empty stream (N >= 1 required)");
    }
    detail::sort_by_timestamp(stream.events);
    return stream;
}

inline EventStream parse_dataset_binary(const std::vector<uint8_t>& raw,
                                        int sensor_width, int sensor_height) {
    return parse_dataset_binary(raw.data(), raw.size(), sensor_width, sensor_height);
}

/// Inverse of parse_dataset_binary for streams that fit the record ranges
/// (x, y < 256 and t < 2^23 us).
inline std::vector<uint8_t> serialize_dataset_binary(const EventStream& stream) {
    std::vector<uint8_t> out;
    out.reserve(stream.events.size() * 5);
    for (size_t i = 0; i < stream.events.size(); ++i) {
        const Event& e = stream.events[i];
        if (e.x < 0 || e.x > 0xFF || e.y < 0 || e.y > 0xFF) {
            throw std::runtime_error("serialize_dataset_binary: event " + std::to_string(i)
                                     + " coordinates exceed the 8-bit record range");
        }
        if (e.t < 0 || e.t > 0x7FFFFF) {
            throw std::runtime_error("serialize_dataset_binary: event " + std::to_string(i)
                                     + " timestamp exceeds the 23-bit record range");
        }
        out.push_back(static_cast<uint8_t>(e.x));
        out.push_back(static_cast<uint8_t>(e.y));
        out.push_back(static_cast<uint8_t>(((e.p & 1) << 7) | ((e.t >> 16) & 0x7F)));
        out.push_back(static_cast<uint8_t>((e.t >> 8) & 0xFF));
        out.push_back(static_cast<uint8_t>(e.t & 0xFF));
    }
    return out;
}

/// Parse the text fixture format: one "t x y p" line per event, blank lines
/// and '#' comments ignored.
inline EventStream parse_text_events(std::istream& in, int sensor_width, int sensor_height) {
    EventStream stream;
    stream.sensor_width = sensor_width;
    stream.sensor_height = sensor_height;
    std::string line;
    size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        const size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream fields(line);
        long long t = 0, x = 0, y = 0, p = 0;
        if (!(fields >> t >> x >> y >> p)) {
            throw std::runtime_error("parse_text_events: line " + std::to_string(line_number)
                                     + ": expected \"t x y p\"");
        }
        std::string rest;
        if (fields >> rest) {
            throw std::runtime_error("parse_text_events: line " + std::to_string(line_number)
                                     + ": trailing field \"" + rest + "\"");
        }
        if (p != 0 && p != 1) {
            throw std::runtime_error("parse_text_events: line " + std::to_string(line_number)
                                     + ": polarity " + std::to_string(p) + " not in {0, 1}");
        }
        if (t < 0) {
            throw std::runtime_error("parse_text_events: line " + std::to_string(line_number)
                                     + ": negative timestamp");
        }
        Event e{static_cast<int>(x), static_cast<int>(y), static_cast<int64_t>(t), static_cast<int>(p)};
        detail::validate_event_bounds(e, sensor_width, sensor_height,
                                      "parse_text_events: line " + std::to_string(line_number));
        stream.events.push_back(e);
    }
    if (stream.events.empty()) {
        throw std::runtime_error("parse_text_events: empty stream (N >= 1 required)");
    }
    detail::sort_by_timestamp(stream.events);
    return stream;
}

inline EventStream parse_text_events(const std::string& text, int sensor_width, int sensor_height) {
    std::istringstream in(text);
    return parse_text_events(in, sensor_width, sensor_height);
}

/// Temporal reversal: event i maps to (x_i, y_i, max_j(t_j) - t_i, p_i) and
/// the result is re-sorted to non-decreasing time. Polarity is kept as-is.
inline EventStream reverse_time(const EventStream& stream) {
    if (stream.events.empty()) {
        throw std::runtime_error("reverse_time: empty stream");
    }
    const int64_t t_max = stream.t_max();
    EventStream reversed = stream;
    for (Event& e : reversed.events) {
        e.t = t_max - e.t;
    }
    detail::sort_by_timestamp(reversed.events);
    return reversed;
}

inline EventStream load_event_file(const std::string& path, int sensor_width, int sensor_height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_event_file: cannot open " + path);
    }
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_dataset_binary(raw, sensor_width, sensor_height);
    } catch (const std::exception& err) {
        throw std::runtime_error(path + ": " + err.what());
    }
}

inline void save_event_file(const std::string& path, const EventStream& stream) {
    const std::vector<uint8_t> bytes = serialize_dataset_binary(stream);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_event_file: cannot open " + path);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("save_event_file: write failed for " + path);
    }
}

/// One dataset sample: a relative event-file path, its category name and the
/// split it belongs to.
struct ManifestEntry {
    std::string relative_path;
    std::string category;
    std::string split;  // "train" or "test"
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split_entries(const std::string& split) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries) {
            if (e.split == split) out.push_back(e);
        }
        return out;
    }

    /// Sorted unique category names of the given split ("" = all splits).
    std::vector<std::string> categories(const std::string& split = "") const {
        std::vector<std::string> names;
        for (const auto& e : entries) {
            if (!split.empty() && e.split != split) continue;
            names.push_back(e.category);
        }
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
        return names;
    }
};

/// Manifest files are comma-delimited lines "relative_path,category,split";
/// blank lines and '#' comments are ignored.
inline Manifest parse_manifest(std::istream& in) {
    Manifest manifest;
    std::string line;
    size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        const size_t c1 = line.find(',');
        const size_t c2 = (c1 == std::string::npos) ? std::string::npos : line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw std::runtime_error("parse_manifest: line " + std::to_string(line_number)
                                     + ": expected \"relative_path,category,split\"");
        }
        ManifestEntry entry;
        entry.relative_path = line.substr(0, c1);
        entry.category = line.substr(c1 + 1, c2 - c1 - 1);
        entry.split = line.substr(c2 + 1);
        if (entry.split != "train" && entry.split != "test") {
            throw std::runtime_error("parse_manifest: line " + std::to_string(line_number)
                                     + ": split \"" + entry.split + "\" not in {train, test}");
        }
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_manifest: cannot open " + path);
    }
    return parse_manifest(in);
}

inline void save_manifest(const std::string& path, const Manifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_manifest: cannot open " + path);
    }
    for (const auto& e : manifest.entries) {
        out << e.relative_path << ',' << e.category << ',' << e.split << '\n';
    }
}

}  // namespace evrec
