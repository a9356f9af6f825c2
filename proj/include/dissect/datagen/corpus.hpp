#pragma once

// On-disk corpus layout:
//   manifest.txt   key=value lines: version, count, image_size, spec_hash
//   img_%06d.f32   row-major little-endian float32 pixels
//   labels.tsv     index<TAB>tl<TAB>tr<TAB>bl<TAB>br

#include "dissect/core/error.hpp"
#include "dissect/core/kv.hpp"
#include "dissect/datagen/phantom.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace dissect::datagen {

inline constexpr int kCorpusFormatVersion = 1;

struct CorpusManifest {
    int version = kCorpusFormatVersion;
    std::size_t count = 0;
    int image_size = 0;
    std::uint64_t spec_hash = 0;

    friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

struct Corpus {
    CorpusManifest manifest;
    std::vector<Image> images;
    std::vector<std::array<int, 4>> labels;

    std::size_t size() const { return images.size(); }
};

inline std::string image_filename(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06zu.f32", index);
    return buf;
}

inline void write_f32_le(std::ostream& out, const float* data, std::size_t n) {
    std::vector<unsigned char> bytes(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(data[i]);
        bytes[4 * i + 0] = static_cast<unsigned char>(bits & 0xFF);
        bytes[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFF);
        bytes[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFF);
        bytes[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void decode_f32_le(const unsigned char* bytes, float* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i]) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        data[i] = std::bit_cast<float>(bits);
    }
}

inline Corpus generate_corpus_in_memory(const PhantomSpec& spec, std::size_t n) {
    if (n < 1) throw PreconditionError("corpus size must be >= 1");
    spec.validate();
    Corpus corpus;
    corpus.manifest = CorpusManifest{kCorpusFormatVersion, n, spec.image_size, spec.hash()};
    corpus.images.reserve(n);
    corpus.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        PhantomSample s = generate_sample(spec, i);
        corpus.images.push_back(std::move(s.image));
        corpus.labels.push_back(s.labels);
    }
    return corpus;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw IoError("cannot create corpus directory '" + out_dir.string() + "'");

    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::ofstream img(out_dir / image_filename(i), std::ios::binary);
        if (!img) throw IoError("cannot write '" + (out_dir / image_filename(i)).string() + "'");
        write_f32_le(img, corpus.images[i].pixels.data(), corpus.images[i].pixels.size());
        if (!img) throw IoError("write failed for '" + (out_dir / image_filename(i)).string() + "'");
    }
    {
        std::ofstream labels(out_dir / "labels.tsv");
        if (!labels) throw IoError("cannot write labels.tsv in '" + out_dir.string() + "'");
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto& l = corpus.labels[i];
            labels << i << '\t' << l[0] << '\t' << l[1] << '\t' << l[2] << '\t' << l[3] << '\n';
        }
    }
    std::ofstream manifest(out_dir / "manifest.txt");
    if (!manifest) throw IoError("cannot write manifest.txt in '" + out_dir.string() + "'");
    manifest << "version=" << corpus.manifest.version << "\n"
             << "count=" << corpus.manifest.count << "\n"
             << "image_size=" << corpus.manifest.image_size << "\n"
             << "spec_hash=" << corpus.manifest.spec_hash << "\n";
    if (!manifest) throw IoError("write failed for manifest.txt");
}

inline CorpusManifest generate_corpus(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& out_dir) {
    Corpus corpus = generate_corpus_in_memory(spec, n);
    write_corpus(corpus, out_dir);
    return corpus.manifest;
}

inline CorpusManifest read_manifest(const std::filesystem::path& dir) {
    const KeyValues kv = KeyValues::load((dir / "manifest.txt").string());
    CorpusManifest m;
    m.version = static_cast<int>(parse_int("version", kv.get("version")));
    if (m.version != kCorpusFormatVersion)
        throw IoError("unsupported corpus version " + std::to_string(m.version));
    m.count = static_cast<std::size_t>(parse_int("count", kv.get("count")));
    m.image_size = static_cast<int>(parse_int("image_size", kv.get("image_size")));
    m.spec_hash = parse_u64("spec_hash", kv.get("spec_hash"));
    return m;
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    corpus.manifest = read_manifest(dir);
    const std::size_t n = corpus.manifest.count;
    const int size = corpus.manifest.image_size;
    const std::size_t pixels = static_cast<std::size_t>(size) * size;
    std::vector<unsigned char> bytes(pixels * 4);
    for (std::size_t i = 0; i < n; ++i) {
        const auto path = dir / image_filename(i);
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read '" + path.string() + "'");
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
            throw IoError("truncated image file '" + path.string() + "'");
        Image img(size, size);
        decode_f32_le(bytes.data(), img.pixels.data(), pixels);
        corpus.images.push_back(std::move(img));
    }
    corpus.labels.assign(n, {0, 0, 0, 0});
    std::ifstream labels(dir / "labels.tsv");
    if (!labels) throw IoError("cannot read labels.tsv in '" + dir.string() + "'");
    std::string line;
    std::size_t seen = 0;
    while (std::getline(labels, line)) {
        if (trim(line).empty()) continue;
        std::istringstream row(line);
        std::size_t idx = 0;
        std::array<int, 4> l{};
        if (!(row >> idx >> l[0] >> l[1] >> l[2] >> l[3]) || idx >= n)
            throw IoError("malformed labels.tsv line: '" + line + "'");
        corpus.labels[idx] = l;
        ++seen;
    }
    if (seen != n) throw IoError("labels.tsv has " + std::to_string(seen) + " rows, expected " + std::to_string(n));
    return corpus;
}

}  // namespace dissect::datagen
