#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace neuronlens::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Append-only little-endian encoder.
class Writer {
public:
    void bytes(std::string_view raw) {
        buf_.insert(buf_.end(), raw.begin(), raw.end());
    }

    template <class T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        if constexpr (std::is_floating_point_v<T>) {
            using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
            put(std::bit_cast<U>(value));
        } else {
            for (std::size_t i = 0; i < sizeof(T); ++i) {
                buf_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
            }
        }
    }

    // Seals the buffer with a CRC32 of everything written so far.
    void finish_with_crc() { put(crc32(buf_)); }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian decoder. Reading past the end throws
// TruncatedError.
class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

    std::string_view bytes(std::size_t n);

    template <class T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        if constexpr (std::is_floating_point_v<T>) {
            using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
            return std::bit_cast<T>(get<U>());
        } else {
            const auto raw = bytes(sizeof(T));
            std::uint64_t v = 0;
            for (std::size_t i = 0; i < sizeof(T); ++i) {
                v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(raw[i])) << (8 * i);
            }
            return static_cast<T>(v);
        }
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// Verifies the trailing CRC32 of a sealed container and returns the body
// (everything before the trailer). `expected_size` is the size the header
// declares, or 0 when it could not be determined; a CRC failure on a file
// shorter than that is reported as truncation rather than corruption.
std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> file, std::size_t expected_size,
                                            const std::string& what);

} // namespace neuronlens::io
