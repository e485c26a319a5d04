#pragma once

#include <initializer_list>

#include "desire/backbone.hpp"
#include "desire/numerics/types.hpp"

namespace desire::test_support {

/// Two blocks at d = 16: fast enough for finite differences.
inline BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.num_blocks = 2;
  cfg.model_dim = 16;
  cfg.num_heads = 2;
  cfg.mlp_hidden = 32;
  cfg.input_dim = 8;
  cfg.num_tokens = 4;
  return cfg;
}

inline Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

}  // namespace desire::test_support
