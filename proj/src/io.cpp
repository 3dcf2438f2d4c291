#include "memloc/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <sstream>

namespace memloc {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return __builtin_bswap32(v);
    }
    return v;
}

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return __builtin_bswap64(v);
    }
    return v;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) {
        throw IoError("cannot open " + path + " for writing");
    }
}

void BinaryWriter::write_bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) {
        throw IoError("write failed: " + path_);
    }
}

void BinaryWriter::write_magic(std::string_view magic) { write_bytes(magic.data(), magic.size()); }

void BinaryWriter::write_json(const nlohmann::json& header) {
    const std::string text = header.dump();
    const std::uint64_t len = to_le(static_cast<std::uint64_t>(text.size()));
    write_bytes(&len, sizeof(len));
    write_bytes(text.data(), text.size());
}

void BinaryWriter::write_f32(std::span<const float> values) {
    std::vector<std::uint32_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        buf[i] = to_le(std::bit_cast<std::uint32_t>(values[i]));
    }
    write_bytes(buf.data(), buf.size() * sizeof(std::uint32_t));
}

void BinaryWriter::write_f32(std::span<const double> values) {
    std::vector<float> narrowed(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        narrowed[i] = static_cast<float>(values[i]);
    }
    write_f32(std::span<const float>(narrowed));
}

void BinaryWriter::close() {
    out_.close();
    if (!out_) {
        throw IoError("close failed: " + path_);
    }
}

BinaryReader::BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) {
        throw IoError("cannot open " + path);
    }
}

void BinaryReader::read_bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
        throw IoError(path_ + ": truncated file");
    }
}

void BinaryReader::expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    read_bytes(got.data(), got.size());
    if (got != magic) {
        throw IoError(path_ + ": bad magic, expected " + std::string(magic.substr(0, magic.find('\n'))));
    }
}

nlohmann::json BinaryReader::read_json() {
    std::uint64_t len = 0;
    read_bytes(&len, sizeof(len));
    len = to_le(len);
    if (len > (1ULL << 32)) {
        throw IoError(path_ + ": implausible header length");
    }
    std::string text(len, '\0');
    read_bytes(text.data(), text.size());
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path_ + ": malformed JSON header: " + e.what());
    }
}

void BinaryReader::read_f32(std::span<float> values) {
    std::vector<std::uint32_t> buf(values.size());
    read_bytes(buf.data(), buf.size() * sizeof(std::uint32_t));
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<float>(to_le(buf[i]));
    }
}

void BinaryReader::read_f32(std::span<double> values) {
    std::vector<float> narrow(values.size());
    read_f32(std::span<float>(narrow));
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = narrow[i];
    }
}

void BinaryReader::expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
        throw IoError(path_ + ": trailing bytes after payload");
    }
}

void write_text_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path + " for writing");
    }
    out << contents;
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

}  // namespace memloc
