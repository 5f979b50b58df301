#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <random>

#include "iqkv/bitpack.hpp"

using namespace iqkv;

TEST_CASE("two-bit packing layout", "[bitpack]") {
    // code k occupies bits [2k, 2k+2): [3,0,1,2] -> 0b10_01_00_11
    const std::uint32_t codes[] = {3, 0, 1, 2};
    const auto words = pack_codes(codes, 2);
    REQUIRE(words.size() == 1);
    CHECK((words[0] & 0xff) == 0b10010011u);
}

TEST_CASE("sign word layout", "[bitpack]") {
    std::vector<bool> bits(32, false);
    bits[0] = true;
    CHECK(pack_signs(bits) == 0x00000001u);
    bits[0] = false;
    bits[31] = true;
    CHECK(pack_signs(bits) == 0x80000000u);
    const auto back = unpack_signs(0x80000001u, 32);
    CHECK(back[0]);
    CHECK(back[31]);
    CHECK_FALSE(back[15]);
}

TEST_CASE("out-of-range codes are rejected", "[bitpack]") {
    const std::uint32_t codes[] = {4};
    CHECK_THROWS_AS(pack_codes(codes, 2), std::invalid_argument);
    CHECK_THROWS_AS(pack_codes(codes, 0), std::invalid_argument);
    CHECK_THROWS_AS(pack_codes(codes, 9), std::invalid_argument);
}

TEST_CASE("pack/unpack round trip is bit-exact", "[bitpack]") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        const int bits = std::array{1, 2, 4, 8}[trial % 4];
        const std::size_t count = 1 + rng() % 97;
        std::vector<std::uint32_t> codes(count);
        for (auto& c : codes) c = static_cast<std::uint32_t>(rng() & ((1u << bits) - 1));
        const auto words = pack_codes(codes, bits);
        CHECK(unpack_codes(words, count, bits) == codes);
    }
}

TEST_CASE("odd widths straddle words correctly", "[bitpack]") {
    std::mt19937_64 rng(43);
    for (int bits : {3, 5, 6, 7}) {
        std::vector<std::uint32_t> codes(64);
        for (auto& c : codes) c = static_cast<std::uint32_t>(rng() & ((1u << bits) - 1));
        const auto words = pack_codes(codes, bits);
        CHECK(unpack_codes(words, codes.size(), bits) == codes);
    }
}

TEST_CASE("sign round trip for partial words", "[bitpack]") {
    std::mt19937_64 rng(44);
    for (std::size_t count : {1u, 8u, 17u, 32u}) {
        std::vector<bool> bits(count);
        for (std::size_t i = 0; i < count; ++i) bits[i] = rng() & 1;
        CHECK(unpack_signs(pack_signs(bits), count) == bits);
    }
}
