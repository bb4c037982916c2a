// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tavat/ops.hpp"

namespace tavat {

inline constexpr std::int32_t kPadId = 0;

/// Padded minibatch. token_ids and mask are [size, length] row-major.
/// Classification batches carry one label per example; tagging batches
/// carry one tag per position with kIgnoreLabel at special and padded slots.
struct Batch {
  std::size_t size = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> token_ids;
  Mask mask;
  std::vector<int> labels;
  std::vector<int> tags;

  bool is_tagging() const { return !tags.empty(); }

  std::size_t real_tokens(std::size_t example) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < length; ++j) n += mask[example * length + j];
    return n;
  }

  /// Throws std::invalid_argument when the mask/padding duality or the
  /// label layout is broken.
  void validate() const {
    if (size == 0 || length == 0) throw std::invalid_argument("batch: empty");
    if (token_ids.size() != size * length || mask.size() != size * length) {
      throw std::invalid_argument("batch: token_ids/mask do not match " + std::to_string(size) + "x" +
                                  std::to_string(length));
    }
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
      if (static_cast<bool>(mask[i]) != (token_ids[i] != kPadId)) {
        throw std::invalid_argument("batch: mask disagrees with padding at flat index " + std::to_string(i));
      }
    }
    for (std::size_t b = 0; b < size; ++b) {
      if (real_tokens(b) == 0) throw std::invalid_argument("batch: example " + std::to_string(b) + " is fully padded");
    }
    if (tags.empty() && labels.size() != size) throw std::invalid_argument("batch: need one label per example");
    if (!tags.empty() && tags.size() != size * length) throw std::invalid_argument("batch: need one tag per position");
  }
};

}  // namespace tavat
