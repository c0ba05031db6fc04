#pragma once

// On-disk corpus layout:
//
//   <dir>/hierarchy.json            nested hierarchy with edge weights
//   <dir>/corpus.json               generation config, dimensions, class means
//   <dir>/folds.json                fold specs (optional)
//   <dir>/subject_NNN/features.bin  "H W d\n" + H*W*d little-endian float64
//   <dir>/subject_NNN/labels.bin    "H W 1\n" + H*W little-endian int32
//   <dir>/subject_NNN/mask.bin      same layout as labels.bin
//
// Integer label files store leaf id + 1. Code 0 means "unannotated" in
// mask.bin and "background" in prediction files; truth files never hold 0.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "label_tree.hpp"
#include "matrix.hpp"
#include "synth_bench.hpp"

namespace treeloss::io {

namespace fs = std::filesystem;

struct RasterHeader {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t depth = 0;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U bits)
{
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p)
{
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
    return v;
}

inline std::string header_line(const RasterHeader& h)
{
    return std::to_string(h.height) + " " + std::to_string(h.width) + " " + std::to_string(h.depth) + "\n";
}

inline std::pair<RasterHeader, std::string> split_header(const std::string& blob, const fs::path& path)
{
    const auto nl = blob.find('\n');
    if (nl == std::string::npos) throw IoError("missing header line in " + path.string());
    std::istringstream hs(blob.substr(0, nl));
    RasterHeader h;
    if (!(hs >> h.height >> h.width >> h.depth)) throw IoError("malformed header in " + path.string());
    return {h, blob.substr(nl + 1)};
}

} // namespace detail

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& content)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::json read_json(const fs::path& path)
{
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

inline std::string encode_reals(const RasterHeader& h, const std::vector<double>& values)
{
    if (values.size() != h.height * h.width * h.depth) throw ShapeError("raster size does not match header");
    std::string out = detail::header_line(h);
    out.reserve(out.size() + values.size() * 8);
    for (double v : values) detail::put_le(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline std::string encode_ints(const RasterHeader& h, const std::vector<std::int32_t>& values)
{
    if (values.size() != h.height * h.width * h.depth) throw ShapeError("raster size does not match header");
    std::string out = detail::header_line(h);
    out.reserve(out.size() + values.size() * 4);
    for (std::int32_t v : values) detail::put_le(out, static_cast<std::uint32_t>(v));
    return out;
}

inline std::pair<RasterHeader, std::vector<double>> read_reals(const fs::path& path)
{
    auto [h, body] = detail::split_header(read_file(path), path);
    const std::size_t n = h.height * h.width * h.depth;
    if (body.size() != n * 8) throw IoError("payload size mismatch in " + path.string());
    std::vector<double> v(n);
    const auto* p = reinterpret_cast<const unsigned char*>(body.data());
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i));
    return {h, std::move(v)};
}

inline std::pair<RasterHeader, std::vector<std::int32_t>> read_ints(const fs::path& path)
{
    auto [h, body] = detail::split_header(read_file(path), path);
    const std::size_t n = h.height * h.width * h.depth;
    if (body.size() != n * 4) throw IoError("payload size mismatch in " + path.string());
    std::vector<std::int32_t> v(n);
    const auto* p = reinterpret_cast<const unsigned char*>(body.data());
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::int32_t>(detail::get_le<std::uint32_t>(p + 4 * i));
    return {h, std::move(v)};
}

// Leaf ids (or kUnlabeled / background = -1) to file codes and back.
inline std::vector<std::int32_t> to_file_codes(const std::vector<Label>& labels)
{
    std::vector<std::int32_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] < 0 ? 0 : labels[i] + 1;
    return out;
}

inline std::vector<Label> from_file_codes(const std::vector<std::int32_t>& codes, std::size_t leaves, const fs::path& path)
{
    std::vector<Label> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] < 0 || static_cast<std::size_t>(codes[i]) > leaves)
            throw LabelError("label code " + std::to_string(codes[i]) + " out of range in " + path.string());
        out[i] = codes[i] - 1;
    }
    return out;
}

inline std::string subject_dir_name(std::size_t index)
{
    std::ostringstream s;
    s << "subject_" << std::setw(3) << std::setfill('0') << index;
    return s.str();
}

inline LabelTree read_tree(const fs::path& path) { return parse_tree(read_file(path)); }

inline void write_corpus(const fs::path& dir, const Corpus& corpus, const SynthConfig& cfg)
{
    fs::create_directories(dir);
    write_json(dir / "hierarchy.json", serialize_tree(corpus.tree));
    nlohmann::json meta;
    meta["synth"] = cfg.to_json();
    meta["leaves"] = corpus.tree.leaf_count();
    meta["subjects"] = corpus.subjects.size();
    meta["class_means"] = nlohmann::json::array();
    for (std::size_t l = 0; l < corpus.class_means.rows(); ++l) {
        auto r = corpus.class_means.row(l);
        meta["class_means"].push_back(std::vector<double>(r.begin(), r.end()));
    }
    write_json(dir / "corpus.json", meta);
    for (std::size_t s = 0; s < corpus.subjects.size(); ++s) {
        const Subject& sub = corpus.subjects[s];
        const fs::path sd = dir / subject_dir_name(s);
        write_file(sd / "features.bin", encode_reals({sub.height, sub.width, sub.features.cols()}, sub.features.data()));
        write_file(sd / "labels.bin", encode_ints({sub.height, sub.width, 1}, to_file_codes(sub.truth)));
        write_file(sd / "mask.bin", encode_ints({sub.height, sub.width, 1}, to_file_codes(sub.mask.labels())));
    }
}

inline Corpus read_corpus(const fs::path& dir)
{
    Corpus c;
    c.tree = read_tree(dir / "hierarchy.json");
    const nlohmann::json meta = read_json(dir / "corpus.json");
    const auto n = meta.at("subjects").get<std::size_t>();
    if (meta.contains("class_means")) {
        const auto rows = meta["class_means"].get<std::vector<std::vector<double>>>();
        if (!rows.empty()) {
            c.class_means = Matrix(rows.size(), rows[0].size());
            for (std::size_t l = 0; l < rows.size(); ++l)
                for (std::size_t k = 0; k < rows[l].size(); ++k) c.class_means(l, k) = rows[l][k];
        }
    }
    const std::size_t leaves = c.tree.leaf_count();
    for (std::size_t s = 0; s < n; ++s) {
        const fs::path sd = dir / subject_dir_name(s);
        auto [fh, feats] = read_reals(sd / "features.bin");
        auto [lh, labels] = read_ints(sd / "labels.bin");
        auto [mh, mask] = read_ints(sd / "mask.bin");
        if (lh.height != fh.height || lh.width != fh.width || mh.height != fh.height || mh.width != fh.width)
            throw ShapeError("raster shapes disagree in " + sd.string());
        Subject sub;
        sub.height = fh.height;
        sub.width = fh.width;
        sub.features = Matrix(fh.height * fh.width, fh.depth, std::move(feats));
        sub.truth = from_file_codes(labels, leaves, sd / "labels.bin");
        for (Label t : sub.truth)
            if (t < 0) throw LabelError("truth labels must not contain code 0 in " + sd.string());
        sub.mask = SparseMask(from_file_codes(mask, leaves, sd / "mask.bin"));
        for (std::size_t i = 0; i < sub.truth.size(); ++i)
            if (sub.mask.annotated(i) && sub.mask[i] != sub.truth[i])
                throw LabelError("annotation disagrees with truth in " + sd.string());
        c.subjects.push_back(std::move(sub));
    }
    return c;
}

inline void write_folds(const fs::path& path, const std::vector<FoldSpec>& folds)
{
    nlohmann::json j = nlohmann::json::array();
    for (const auto& f : folds) j.push_back(f.to_json());
    nlohmann::json doc = nlohmann::json::object();
    doc["folds"] = std::move(j);
    write_json(path, doc);
}

inline std::vector<FoldSpec> read_folds(const fs::path& path)
{
    std::vector<FoldSpec> out;
    const nlohmann::json doc = read_json(path);
    for (const auto& f : doc.at("folds")) out.push_back(FoldSpec::from_json(f));
    return out;
}

inline std::string csv_escape(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Shortest round-trip decimal form, so CSV output is reproducible.
inline std::string fmt_real(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest representation that round-trips.
    for (int prec = 1; prec <= 17; ++prec) {
        char tmp[32];
        std::snprintf(tmp, sizeof tmp, "%.*g", prec, v);
        if (std::strtod(tmp, nullptr) == v) return tmp;
    }
    return buf;
}

inline std::string distance_csv(const DistanceMatrix& m, const std::vector<std::string>& names)
{
    std::string out = "";
    for (const auto& n : names) out += "," + csv_escape(n);
    out += "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        out += csv_escape(names[r]);
        for (std::size_t c = 0; c < m.cols(); ++c) out += "," + fmt_real(m(r, c));
        out += "\n";
    }
    return out;
}

} // namespace treeloss::io
