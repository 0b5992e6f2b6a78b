#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "akd/tensor.hpp"

namespace akd {

// Container format, magic "AKD1":
//   magic(4) | header_len(u64 LE) | header bytes ("key=value\n" lines)
//   then tensor records until EOF:
//   name_len(u64) | name | rank(u64) | dims(u64 each) | raw f32 LE values
// All integers little-endian. Values are stored in 32-bit regardless of the
// in-memory precision.
struct TensorBlob {
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

struct Archive {
    std::map<std::string, std::string> header;        // insertion-order lost; keys sorted on write
    std::vector<std::pair<std::string, TensorBlob>> tensors;

    const TensorBlob* find(const std::string& name) const;
};

void write_archive(const std::string& path, const Archive& archive);
Archive read_archive(const std::string& path);

template <class T>
TensorBlob to_blob(const TensorT<T>& t) {
    TensorBlob b;
    b.shape = t.shape();
    b.values.reserve(t.numel());
    for (T v : t.data()) b.values.push_back(static_cast<float>(v));
    return b;
}

template <class T>
TensorT<T> from_blob(const TensorBlob& b) {
    std::vector<T> data(b.values.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(b.values[i]);
    return TensorT<T>::from_data(b.shape, std::move(data));
}

// FNV-1a over the serialized tensor payloads; used as a model checksum.
std::uint64_t archive_checksum(const Archive& archive);

}  // namespace akd
