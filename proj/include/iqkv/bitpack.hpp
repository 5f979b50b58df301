#pragma once

// b-bit code packing into 32-bit words. Codes occupy consecutive b-bit slots
// little-endian within the word stream: code k lives at bit offset k*b. For
// b in {1,2,4,8} a code never straddles a word; other widths are handled via
// a 64-bit window.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace iqkv {

inline constexpr int kMaxCodeBits = 8;

// Reads the b-bit code at slot index `idx` from a packed word stream.
inline std::uint32_t read_code(std::span<const std::uint32_t> words, std::size_t idx, int bits) {
    const std::size_t bit = idx * static_cast<std::size_t>(bits);
    const std::size_t w = bit / 32;
    const unsigned off = static_cast<unsigned>(bit % 32);
    std::uint64_t window = words[w];
    if (off + static_cast<unsigned>(bits) > 32 && w + 1 < words.size())
        window |= static_cast<std::uint64_t>(words[w + 1]) << 32;
    const std::uint64_t mask = (bits == 64) ? ~0ull : ((1ull << bits) - 1);
    return static_cast<std::uint32_t>((window >> off) & mask);
}

// Writes the b-bit code at slot index `idx`; the slot must be zero beforehand.
inline void write_code(std::span<std::uint32_t> words, std::size_t idx, int bits, std::uint32_t value) {
    const std::size_t bit = idx * static_cast<std::size_t>(bits);
    const std::size_t w = bit / 32;
    const unsigned off = static_cast<unsigned>(bit % 32);
    words[w] |= static_cast<std::uint32_t>((static_cast<std::uint64_t>(value) << off) & 0xffffffffull);
    if (off + static_cast<unsigned>(bits) > 32)
        words[w + 1] |= static_cast<std::uint32_t>(static_cast<std::uint64_t>(value) >> (32 - off));
}

inline std::size_t packed_word_count(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 31) / 32;
}

inline std::vector<std::uint32_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
    if (bits < 1 || bits > kMaxCodeBits)
        throw std::invalid_argument("pack_codes: bits out of range");
    const std::uint32_t limit = 1u << bits;
    std::vector<std::uint32_t> words(packed_word_count(codes.size(), bits), 0u);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] >= limit)
            throw std::invalid_argument("pack_codes: code does not fit in bit width");
        write_code(words, i, bits, codes[i]);
    }
    return words;
}

inline std::vector<std::uint32_t> unpack_codes(std::span<const std::uint32_t> words,
                                               std::size_t count, int bits) {
    if (bits < 1 || bits > kMaxCodeBits)
        throw std::invalid_argument("unpack_codes: bits out of range");
    if (words.size() < packed_word_count(count, bits))
        throw std::invalid_argument("unpack_codes: word stream too short");
    std::vector<std::uint32_t> codes(count);
    for (std::size_t i = 0; i < count; ++i)
        codes[i] = read_code(words, i, bits);
    return codes;
}

// Sign bit k at bit position k of the word. At most 32 signs per word.
inline std::uint32_t pack_signs(const std::vector<bool>& bits) {
    if (bits.size() > 32)
        throw std::invalid_argument("pack_signs: more than 32 bits");
    std::uint32_t word = 0;
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) word |= (1u << i);
    return word;
}

inline std::vector<bool> unpack_signs(std::uint32_t word, std::size_t count) {
    if (count > 32)
        throw std::invalid_argument("unpack_signs: more than 32 bits");
    std::vector<bool> bits(count);
    for (std::size_t i = 0; i < count; ++i)
        bits[i] = (word >> i) & 1u;
    return bits;
}

}  // namespace iqkv
