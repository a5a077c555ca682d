#include "slm/rng.hpp"

namespace slm::rng {

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
    std::uint64_t h = mix64(base);
    for (const char c : tag) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return mix64(h ^ mix64(index));
}

}  // namespace slm::rng
