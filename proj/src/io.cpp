#include "megan/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>

static_assert(std::endian::native == std::endian::little,
              "MGT1 serialization assumes a little-endian host");

namespace megan {

void mgt_encode(const Tensor& t, Dtype dtype, std::vector<uint8_t>& out) {
    if (t.rank() < 1 || t.rank() > 5) throw IoError("mgt: unsupported rank");
    out.push_back('M');
    out.push_back('G');
    out.push_back('T');
    out.push_back('1');
    out.push_back(static_cast<uint8_t>(dtype));
    out.push_back(static_cast<uint8_t>(t.rank()));
    for (int d : t.dims()) {
        uint32_t v = static_cast<uint32_t>(d);
        const uint8_t* p = reinterpret_cast<const uint8_t*>(&v);
        out.insert(out.end(), p, p + 4);
    }
    if (dtype == Dtype::f64) {
        const uint8_t* p = reinterpret_cast<const uint8_t*>(t.data());
        out.insert(out.end(), p, p + t.size() * sizeof(double));
    } else {
        for (size_t i = 0; i < t.size(); ++i) {
            float f = static_cast<float>(t[i]);
            const uint8_t* p = reinterpret_cast<const uint8_t*>(&f);
            out.insert(out.end(), p, p + 4);
        }
    }
}

Tensor mgt_decode(const std::vector<uint8_t>& bytes, size_t& pos) {
    auto need = [&](size_t n) {
        if (pos + n > bytes.size()) throw IoError("mgt: truncated file");
    };
    need(6);
    if (std::memcmp(bytes.data() + pos, "MGT1", 4) != 0)
        throw IoError("mgt: magic mismatch (not an MGT1 tensor)");
    uint8_t dtype = bytes[pos + 4];
    uint8_t rank = bytes[pos + 5];
    pos += 6;
    if (dtype > 1) throw IoError("mgt: unknown dtype code " + std::to_string(dtype));
    if (rank < 1 || rank > 5) throw IoError("mgt: bad rank " + std::to_string(rank));
    std::vector<int> dims(rank);
    need(4u * rank);
    for (int i = 0; i < rank; ++i) {
        uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        if (v == 0 || v > (1u << 30)) throw IoError("mgt: bad dimension " + std::to_string(v));
        dims[i] = static_cast<int>(v);
    }
    size_t n = Tensor::count(dims);
    Tensor t(dims);
    if (dtype == static_cast<uint8_t>(Dtype::f64)) {
        need(n * 8);
        std::memcpy(t.data(), bytes.data() + pos, n * 8);
        pos += n * 8;
    } else {
        need(n * 4);
        for (size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, bytes.data() + pos, 4);
            pos += 4;
            t[i] = static_cast<double>(f);
        }
    }
    return t;
}

void mgt_write(const Tensor& t, const std::string& path, Dtype dtype) {
    std::vector<uint8_t> buf;
    mgt_encode(t, dtype, buf);
    write_file_atomic(path, buf.data(), buf.size());
}

Tensor mgt_read(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    size_t pos = 0;
    Tensor t = mgt_decode(bytes, pos);
    if (pos != bytes.size()) throw IoError("mgt: trailing bytes in " + path);
    return t;
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open " + path);
    std::fseek(f, 0, SEEK_END);
    long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<uint8_t> bytes(static_cast<size_t>(len < 0 ? 0 : len));
    size_t got = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (got != bytes.size()) throw IoError("short read on " + path);
    return bytes;
}

void write_file_atomic(const std::string& path, const void* data, size_t size) {
    std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot create " + tmp);
    size_t wrote = size == 0 ? 0 : std::fwrite(data, 1, size, f);
    int rc = std::fclose(f);
    if (wrote != size || rc != 0) {
        std::remove(tmp.c_str());
        throw IoError("short write on " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError("rename failed for " + path + ": " + ec.message());
    }
}

}  // namespace megan
