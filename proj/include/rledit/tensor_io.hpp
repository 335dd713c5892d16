#pragma once

// Flat binary tensor container shared by model and hypernetwork checkpoints:
//   magic[4] | int32 n_fields | int32 fields[n_fields] |
//   repeated { int32 name_len | name | int32 rows | int32 cols | float64 values[rows*cols] }
// All integers and floats are little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rledit/autodiff.hpp"

namespace rledit {

struct TensorContainer {
    std::array<char, 4> magic{};
    std::vector<std::int32_t> fields;
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

void write_container(const std::filesystem::path& path, const TensorContainer& c);
// Throws MissingFileError, or ParseError when the magic differs or the file is truncated.
TensorContainer read_container(const std::filesystem::path& path, const std::array<char, 4>& expected_magic);

}  // namespace rledit
