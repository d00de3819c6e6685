// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// ".vten" binary tensors: "VTEN", u8 version (1), u8 dtype (0 = f32, 1 = f64),
// u8 ndim, ndim little-endian u32 dims, then the row-major little-endian
// payload.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cotr/tensor.hpp"

namespace cotr::vten {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint8_t kVersion = 1;

/// In-memory image of a .vten file. Values are held as double; f32 payloads
/// widen exactly, so a read/write cycle reproduces the bytes.
struct TensorFile {
  Dtype dtype = Dtype::f64;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t element_count() const;
};

std::vector<std::uint8_t> encode(const TensorFile& tensor);
TensorFile decode(std::span<const std::uint8_t> bytes);

void write(const std::filesystem::path& path, const TensorFile& tensor);
TensorFile read(const std::filesystem::path& path);

template <typename T>
TensorFile from_volume(const Volume<T>& v, Dtype dtype);
template <typename T>
TensorFile from_matrix(const Matrix<T>& m, Dtype dtype);
TensorFile from_values(std::vector<std::uint32_t> dims, std::span<const double> values,
                       Dtype dtype);

/// Requires ndim == 4 (c, d, h, w).
template <typename T>
Volume<T> to_volume(const TensorFile& file);
/// Requires ndim == 2.
template <typename T>
Matrix<T> to_matrix(const TensorFile& file);

std::string dtype_name(Dtype dtype);
Dtype parse_dtype(const std::string& name);

}  // namespace cotr::vten
