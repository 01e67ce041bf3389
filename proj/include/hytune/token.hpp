#pragma once

#include <cstdint>
#include <vector>

namespace hytune {

using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

}  // namespace hytune
