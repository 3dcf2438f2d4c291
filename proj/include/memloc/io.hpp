#pragma once

#include "memloc/common.hpp"

#include <json.hpp>

#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memloc {

// Binary container used by every on-disk artifact: a text magic line, a u64
// little-endian byte length, a UTF-8 JSON header of that length, then a raw
// little-endian float32 payload.
class BinaryWriter {
  public:
    explicit BinaryWriter(const std::string& path);
    void write_magic(std::string_view magic);
    void write_json(const nlohmann::json& header);
    void write_f32(std::span<const float> values);
    void write_f32(std::span<const double> values);
    void close();

  private:
    void write_bytes(const void* data, std::size_t n);
    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
  public:
    explicit BinaryReader(const std::string& path);
    void expect_magic(std::string_view magic);
    nlohmann::json read_json();
    void read_f32(std::span<float> values);
    void read_f32(std::span<double> values);
    void expect_end();

  private:
    void read_bytes(void* data, std::size_t n);
    std::string path_;
    std::ifstream in_;
};

void write_text_file(const std::string& path, const std::string& contents);
std::string read_text_file(const std::string& path);

// Shortest round-trip decimal form, used for every CSV value.
std::string format_double(double value);

}  // namespace memloc
