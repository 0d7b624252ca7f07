// Little-endian binary helpers, CRC32 and the versioned checkpoint container.
//
// Container layout (all integers little-endian):
//   "EEGTXCKP"                    8-byte magic
//   u32 format_version
//   u64 header_len, header bytes  JSON metadata (config, vocabulary, seed ...)
//   u32 array_count
//   per array: u32 name_len, name, i32 rows, i32 cols, rows*cols f64
//   u32 crc32 of every preceding byte

#pragma once

#include "eegtext/matrix.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext {

static_assert(std::endian::native == std::endian::little, "eegtext file formats assume a little-endian host");

enum class FormatErrorKind { version_mismatch, integrity, malformed, missing };

class FormatError : public std::runtime_error {
  public:
    FormatError(FormatErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    FormatErrorKind kind() const { return kind_; }

  private:
    FormatErrorKind kind_;
};

inline uint32_t crc32_of(const void* data, size_t n) {
    return static_cast<uint32_t>(::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

class ByteWriter {
  public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(U));
    }
    void put_bytes(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void put_string(const std::string& s) {
        put<uint32_t>(static_cast<uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::vector<unsigned char>& bytes() { return buf_; }
    size_t size() const { return buf_.size(); }

  private:
    std::vector<unsigned char> buf_;
};

class ByteReader {
  public:
    ByteReader(const unsigned char* p, size_t n) : p_(p), n_(n) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, p_ + off_, sizeof(U));
        off_ += sizeof(U);
        return v;
    }
    void get_bytes(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, p_ + off_, n);
        off_ += n;
    }
    std::string get_string() {
        const auto len = get<uint32_t>();
        need(len);
        std::string s(reinterpret_cast<const char*>(p_ + off_), len);
        off_ += len;
        return s;
    }
    size_t offset() const { return off_; }

  private:
    void need(size_t n) const {
        if (off_ + n > n_) throw FormatError(FormatErrorKind::integrity, "unexpected end of data");
    }
    const unsigned char* p_;
    size_t n_;
    size_t off_ = 0;
};

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrorKind::missing, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

inline constexpr char kContainerMagic[8] = {'E', 'E', 'G', 'T', 'X', 'C', 'K', 'P'};
inline constexpr uint32_t kContainerVersion = 1;

struct Container {
    nlohmann::json header;
    std::map<std::string, Matrix<double>> arrays;

    template <typename T>
    void put(const std::string& name, const Matrix<T>& m) {
        arrays[name] = m.template cast<double>();
    }

    template <typename T>
    Matrix<T> take(const std::string& name) const {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw FormatError(FormatErrorKind::malformed, "checkpoint is missing array '" + name + "'");
        return it->second.template cast<T>();
    }
};

inline void save_container(const std::string& path, const Container& c) {
    ByteWriter w;
    w.put_bytes(kContainerMagic, sizeof(kContainerMagic));
    w.put<uint32_t>(kContainerVersion);
    const std::string header = c.header.dump();
    w.put<uint64_t>(header.size());
    w.put_bytes(header.data(), header.size());
    w.put<uint32_t>(static_cast<uint32_t>(c.arrays.size()));
    for (const auto& [name, m] : c.arrays) {
        w.put_string(name);
        w.put<int32_t>(m.rows);
        w.put<int32_t>(m.cols);
        w.put_bytes(m.data.data(), m.data.size() * sizeof(double));
    }
    const uint32_t crc = crc32_of(w.bytes().data(), w.size());
    w.put<uint32_t>(crc);
    write_file_bytes(path, w.bytes());
}

inline Container load_container(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < sizeof(kContainerMagic) + 8 ||
        std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0)
        throw FormatError(FormatErrorKind::malformed, path + ": not a eegtext checkpoint");
    ByteReader r(bytes.data(), bytes.size());
    char magic[8];
    r.get_bytes(magic, 8);
    const auto version = r.get<uint32_t>();
    if (version != kContainerVersion)
        throw FormatError(FormatErrorKind::version_mismatch, path + ": checkpoint format version " +
                                                                 std::to_string(version) + ", expected " +
                                                                 std::to_string(kContainerVersion));
    if (bytes.size() < 4) throw FormatError(FormatErrorKind::integrity, path + ": truncated");
    uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(bytes.data(), bytes.size() - 4) != stored)
        throw FormatError(FormatErrorKind::integrity, path + ": checksum mismatch (file corrupt or truncated)");

    Container c;
    const auto hlen = r.get<uint64_t>();
    std::string header(hlen, '\0');
    r.get_bytes(header.data(), hlen);
    try {
        c.header = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::malformed, path + ": bad header: " + e.what());
    }
    const auto n = r.get<uint32_t>();
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = r.get_string();
        const auto rows = r.get<int32_t>();
        const auto cols = r.get<int32_t>();
        if (rows < 0 || cols < 0) throw FormatError(FormatErrorKind::malformed, path + ": negative array shape");
        Matrix<double> m(rows, cols);
        r.get_bytes(m.data.data(), m.data.size() * sizeof(double));
        c.arrays.emplace(std::move(name), std::move(m));
    }
    return c;
}

}  // namespace eegtext
