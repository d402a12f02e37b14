#pragma once

// Little-endian binary readers/writers with a trailing 64-bit checksum, plus
// temp-file-then-rename writes so outputs are never partially visible.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tavit/common.hpp"

namespace tavit {

class ByteWriter {
public:
    void put_u8(uint8_t v) { buf_.push_back(char(v)); }
    void put_u16(uint16_t v) { put_le(v); }
    void put_u32(uint32_t v) { put_le(v); }
    void put_u64(uint64_t v) { put_le(v); }
    void put_f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_le(bits);
    }
    void put_bytes(const void* data, size_t len) {
        buf_.append(static_cast<const char*>(data), len);
    }
    void put_string(const std::string& s) {
        if (s.size() > 0xffff) throw ContractError("string too long for u16 length prefix");
        put_u16(uint16_t(s.size()));
        put_bytes(s.data(), s.size());
    }
    void put_block(const std::string& s) {
        put_u32(uint32_t(s.size()));
        put_bytes(s.data(), s.size());
    }

    // Appends the checksum and writes atomically.
    void write_file(const std::filesystem::path& path) {
        const uint64_t sum = fnv1a(buf_.data(), buf_.size());
        put_u64(sum);
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw FormatError("cannot open for writing: " + path.string());
            os.write(buf_.data(), std::streamsize(buf_.size()));
            if (!os) throw FormatError("write failed: " + path.string());
        }
        std::filesystem::rename(tmp, path);
    }

    const std::string& bytes() const { return buf_; }

private:
    template <typename T>
    void put_le(T v) {
        for (size_t i = 0; i < sizeof(T); ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open: " + path.string());
        std::ostringstream ss;
        ss << is.rdbuf();
        buf_ = ss.str();
        if (buf_.size() < 8) throw FormatError("truncated file: " + path.string());
        const size_t body = buf_.size() - 8;
        uint64_t stored = 0;
        for (size_t i = 0; i < 8; ++i) stored |= uint64_t(uint8_t(buf_[body + i])) << (8 * i);
        if (fnv1a(buf_.data(), body) != stored)
            throw FormatError("checksum mismatch: " + path.string());
        end_ = body;
    }

    uint8_t get_u8() { return uint8_t(get_le<uint8_t>()); }
    uint16_t get_u16() { return get_le<uint16_t>(); }
    uint32_t get_u32() { return get_le<uint32_t>(); }
    uint64_t get_u64() { return get_le<uint64_t>(); }
    float get_f32() {
        uint32_t bits = get_le<uint32_t>();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string get_string() {
        const size_t len = get_u16();
        return get_raw(len);
    }
    std::string get_block() {
        const size_t len = get_u32();
        return get_raw(len);
    }
    std::string get_raw(size_t len) {
        need(len);
        std::string s = buf_.substr(pos_, len);
        pos_ += len;
        return s;
    }
    void get_bytes(void* out, size_t len) {
        need(len);
        std::memcpy(out, buf_.data() + pos_, len);
        pos_ += len;
    }
    size_t remaining() const { return end_ - pos_; }

private:
    void need(size_t len) {
        if (pos_ + len > end_) throw FormatError("truncated payload");
    }
    template <typename T>
    T get_le() {
        need(sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) v |= T(uint8_t(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }
    std::string buf_;
    size_t pos_ = 0;
    size_t end_ = 0;
};

}  // namespace tavit
