#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace capfeed {

// Incremental SHA-256, hex digest.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::string_view bytes);
    void update(std::span<const std::byte> bytes);
    std::string hex_digest();

private:
    void* ctx_;
};

std::string sha256_hex(std::string_view bytes);

}  // namespace capfeed
