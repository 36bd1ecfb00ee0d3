#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowhmm {

/// Named slice of a flat parameter vector. Every flow stack exposes its
/// parameters as one flat vector plus a block table, so the optimizer can
/// point at the exact tensor when a gradient goes bad.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

inline const ParamBlock& locate_block(const std::vector<ParamBlock>& blocks, std::size_t flat_index) {
  for (const auto& b : blocks)
    if (flat_index >= b.offset && flat_index < b.offset + b.size) return b;
  throw std::out_of_range("locate_block: index " + std::to_string(flat_index) +
                          " outside parameter vector");
}

}  // namespace flowhmm
