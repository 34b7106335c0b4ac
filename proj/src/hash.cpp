// SPDX-License-Identifier: Apache-2.0
#include "splatfill/hash.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "splatfill/errors.hpp"

namespace splatfill {

namespace {

struct Sha256 {
    EVP_MD_CTX* ctx;
    Sha256() : ctx(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
    ~Sha256() { EVP_MD_CTX_free(ctx); }
    void update(const void* data, size_t len) { EVP_DigestUpdate(ctx, data, len); }
    std::string hex() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx, digest, &len);
        static const char* k = "0123456789abcdef";
        std::string out(len * 2, '0');
        for (unsigned int i = 0; i < len; ++i) {
            out[2 * i] = k[digest[i] >> 4];
            out[2 * i + 1] = k[digest[i] & 0xf];
        }
        return out;
    }
};

} // namespace

std::string sha256_hex(const void* data, size_t len) {
    Sha256 h;
    h.update(data, len);
    return h.hex();
}

std::string sha256_file_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for hashing: " + path);
    Sha256 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h.update(buf, static_cast<size_t>(got));
    }
    return h.hex();
}

std::string sha256_doubles_hex(const std::vector<const double*>& blocks,
                               const std::vector<size_t>& counts) {
    Sha256 h;
    for (size_t i = 0; i < blocks.size(); ++i) {
        h.update(blocks[i], counts[i] * sizeof(double));
    }
    return h.hex();
}

} // namespace splatfill
