#pragma once

#include <lsc/field.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace lsc {

/// Three channels min-max normalized per channel to [0, 255]; a constant channel maps to mid gray.
std::vector<std::uint8_t> render_triplet(const EigenField& field, const std::array<int, 3>& channels);
void write_triplet_png(const EigenField& field, const std::array<int, 3>& channels, const std::filesystem::path& path);

}  // namespace lsc
