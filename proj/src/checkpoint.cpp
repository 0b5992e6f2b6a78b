#include "akd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "akd/errors.hpp"

namespace akd {

namespace {

constexpr char kMagic[4] = {'A', 'K', 'D', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    bool eof() const { return pos >= buf.size(); }
    void need(std::size_t n, const char* what) {
        if (pos + n > buf.size()) {
            throw ParseError(std::string("truncated archive while reading ") + what);
        }
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    float f32(const char* what) {
        need(4, what);
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i]))
                    << (8 * i);
        }
        pos += 4;
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

std::string serialize_tensors(const Archive& archive) {
    std::string out;
    for (const auto& [name, blob] : archive.tensors) {
        put_u64(out, name.size());
        out += name;
        put_u64(out, blob.shape.size());
        std::size_t n = 1;
        for (std::size_t d : blob.shape) {
            put_u64(out, d);
            n *= d;
        }
        if (n != blob.values.size()) {
            throw IoError("tensor '" + name + "' shape does not match value count");
        }
        for (float v : blob.values) put_f32(out, v);
    }
    return out;
}

}  // namespace

const TensorBlob* Archive::find(const std::string& name) const {
    for (const auto& [n, b] : tensors) {
        if (n == name) return &b;
    }
    return nullptr;
}

void write_archive(const std::string& path, const Archive& archive) {
    std::string out(kMagic, 4);
    std::string header;
    for (const auto& [k, v] : archive.header) {
        header += k;
        header += '=';
        header += v;
        header += '\n';
    }
    put_u64(out, header.size());
    out += header;
    out += serialize_tensors(archive);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

Archive read_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf};
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw ParseError("'" + path + "' is not an AKD1 archive");
    }
    r.pos = 4;
    Archive archive;
    const std::uint64_t hlen = r.u64("header length");
    const std::string header = r.bytes(hlen, "header");
    std::size_t start = 0;
    while (start < header.size()) {
        std::size_t nl = header.find('\n', start);
        if (nl == std::string::npos) nl = header.size();
        const std::string line = header.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("malformed header line '" + line + "'");
        archive.header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    while (!r.eof()) {
        const std::uint64_t name_len = r.u64("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint64_t rank = r.u64("tensor rank");
        TensorBlob blob;
        std::size_t n = 1;
        for (std::uint64_t d = 0; d < rank; ++d) {
            const std::uint64_t dim = r.u64("tensor dim");
            blob.shape.push_back(dim);
            n *= dim;
        }
        blob.values.reserve(n);
        for (std::size_t i = 0; i < n; ++i) blob.values.push_back(r.f32("tensor values"));
        archive.tensors.emplace_back(name, std::move(blob));
    }
    return archive;
}

std::uint64_t archive_checksum(const Archive& archive) {
    const std::string payload = serialize_tensors(archive);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : payload) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace akd
