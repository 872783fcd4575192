#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace cxr {

/// Incremental SHA-256, used to fingerprint checkpoint blobs.
class Sha256 {
public:
    Sha256();
    void update(const void* data, std::size_t len);
    /// Hex digest; the object must not be updated afterwards.
    std::string hex_digest();

    static std::string of(const void* data, std::size_t len);

private:
    void process_block(const std::uint8_t* block);
    std::uint32_t state_[8];
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
    std::uint64_t total_len_ = 0;
};

} // namespace cxr
