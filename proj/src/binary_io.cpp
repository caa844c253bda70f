#include "neuronlens/binary_io.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "neuronlens/error.hpp"

namespace neuronlens::io {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks to stay within range.
    constexpr std::size_t chunk = 1u << 30;
    for (std::size_t off = 0; off < bytes.size(); off += chunk) {
        const auto n = std::min(chunk, bytes.size() - off);
        crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("short write to " + path.string());
    }
}

std::string_view Reader::bytes(std::size_t n) {
    if (n > remaining()) {
        throw TruncatedError("unexpected end of data at offset " + std::to_string(pos_));
    }
    std::string_view out(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return out;
}

std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> file, std::size_t expected_size,
                                            const std::string& what) {
    if (file.size() < 4 || (expected_size != 0 && file.size() < expected_size)) {
        throw TruncatedError(what + ": file is truncated (" + std::to_string(file.size()) + " bytes)");
    }
    const auto body = file.first(file.size() - 4);
    Reader trailer(file.last(4));
    const auto stored = trailer.get<std::uint32_t>();
    if (crc32(body) != stored) {
        throw ChecksumError(what + ": checksum mismatch");
    }
    return body;
}

} // namespace neuronlens::io
