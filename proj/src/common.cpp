// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/common.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace thzce {

void write_container(const std::string& path, const std::string& json_text,
                     const std::vector<float>& blob) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write(kContainerMagic, 8);
    const std::uint64_t len = json_text.size();
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(lenb), 8);
    f.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
    static_assert(sizeof(float) == 4);
    // f32 values are written verbatim; this code targets little-endian hosts.
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!f) throw io_error("write failed: " + path);
}

std::pair<std::string, std::vector<float>> read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kContainerMagic, 8) != 0)
        throw io_error("bad container magic: " + path);
    unsigned char lenb[8];
    f.read(reinterpret_cast<char*>(lenb), 8);
    if (!f) throw io_error("truncated container header: " + path);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenb[i]) << (8 * i);
    std::string json_text(len, '\0');
    f.read(json_text.data(), static_cast<std::streamsize>(len));
    if (!f) throw io_error("truncated container JSON: " + path);
    std::vector<float> blob;
    const auto data_start = f.tellg();
    f.seekg(0, std::ios::end);
    const auto data_end = f.tellg();
    const std::uint64_t nbytes = static_cast<std::uint64_t>(data_end - data_start);
    if (nbytes % sizeof(float) != 0) throw io_error("blob size not a multiple of 4: " + path);
    blob.resize(nbytes / sizeof(float));
    f.seekg(data_start);
    f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(nbytes));
    if (!f) throw io_error("truncated container blob: " + path);
    return {std::move(json_text), std::move(blob)};
}

} // namespace thzce
