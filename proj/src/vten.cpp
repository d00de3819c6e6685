// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/vten.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cotr::vten {
namespace {

constexpr char kMagic[4] = {'V', 'T', 'E', 'N'};
constexpr std::size_t kHeaderFixed = 7;

static_assert(std::endian::native == std::endian::little,
              "vten encoding assumes a little-endian host");

template <typename U>
void put(std::vector<std::uint8_t>& out, U value) {
  std::uint8_t raw[sizeof(U)];
  std::memcpy(raw, &value, sizeof(U));
  out.insert(out.end(), raw, raw + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U take(const char* what) {
    if (pos_ + sizeof(U) > bytes_.size()) {
      throw FormatError("vten: truncated " + std::string(what) + " at byte offset " +
                        std::to_string(pos_) + ": need " + std::to_string(sizeof(U)) +
                        " bytes, " + std::to_string(bytes_.size() - pos_) + " available");
    }
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t element_size(Dtype dtype) { return dtype == Dtype::f32 ? 4 : 8; }

}  // namespace

std::size_t TensorFile::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> encode(const TensorFile& tensor) {
  if (tensor.dims.size() > 255) throw FormatError("vten: more than 255 dims");
  if (tensor.values.size() != tensor.element_count()) {
    throw DimensionError("vten: value count " + std::to_string(tensor.values.size()) +
                         " does not match dims product " +
                         std::to_string(tensor.element_count()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderFixed + 4 * tensor.dims.size() +
              element_size(tensor.dtype) * tensor.values.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(tensor.dtype));
  out.push_back(static_cast<std::uint8_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put<std::uint32_t>(out, d);
  if (tensor.dtype == Dtype::f32) {
    for (double v : tensor.values) put<float>(out, static_cast<float>(v));
  } else {
    for (double v : tensor.values) put<double>(out, v);
  }
  return out;
}

TensorFile decode(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  for (int i = 0; i < 4; ++i) {
    const auto c = in.take<std::uint8_t>("magic");
    if (c != static_cast<std::uint8_t>(kMagic[i])) {
      throw FormatError("vten: bad magic at byte offset " + std::to_string(i));
    }
  }
  const auto version = in.take<std::uint8_t>("version");
  if (version != kVersion) {
    throw FormatError("vten: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  }
  const auto dtype = in.take<std::uint8_t>("dtype");
  if (dtype > 1) {
    throw FormatError("vten: unknown dtype " + std::to_string(dtype) + " at byte offset 5");
  }
  TensorFile t;
  t.dtype = static_cast<Dtype>(dtype);
  const auto ndim = in.take<std::uint8_t>("ndim");
  t.dims.reserve(ndim);
  for (int i = 0; i < ndim; ++i) t.dims.push_back(in.take<std::uint32_t>("dims"));

  const std::size_t count = t.element_count();
  const std::size_t need = count * element_size(t.dtype);
  if (in.remaining() < need) {
    throw FormatError("vten: truncated payload at byte offset " + std::to_string(in.pos()) +
                      ": missing " + std::to_string(need - in.remaining()) + " of " +
                      std::to_string(need) + " bytes");
  }
  if (in.remaining() > need) {
    throw FormatError("vten: " + std::to_string(in.remaining() - need) +
                      " trailing bytes after payload at byte offset " +
                      std::to_string(in.pos() + need));
  }
  t.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    t.values[i] = t.dtype == Dtype::f32 ? static_cast<double>(in.take<float>("payload"))
                                        : in.take<double>("payload");
  }
  return t;
}

void write(const std::filesystem::path& path, const TensorFile& tensor) {
  const auto bytes = encode(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("vten: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("vten: write failed for " + path.string());
}

TensorFile read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("vten: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes);
}

TensorFile from_values(std::vector<std::uint32_t> dims, std::span<const double> values,
                       Dtype dtype) {
  TensorFile t{dtype, std::move(dims), {values.begin(), values.end()}};
  if (t.values.size() != t.element_count()) {
    throw DimensionError("vten: value count does not match dims");
  }
  return t;
}

template <typename T>
TensorFile from_volume(const Volume<T>& v, Dtype dtype) {
  const Dims3 d = v.dims();
  TensorFile t;
  t.dtype = dtype;
  t.dims = {static_cast<std::uint32_t>(v.channels()), static_cast<std::uint32_t>(d.d),
            static_cast<std::uint32_t>(d.h), static_cast<std::uint32_t>(d.w)};
  t.values.assign(v.data().begin(), v.data().end());
  return t;
}

template <typename T>
TensorFile from_matrix(const Matrix<T>& m, Dtype dtype) {
  TensorFile t;
  t.dtype = dtype;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.values.assign(m.data().begin(), m.data().end());
  return t;
}

template <typename T>
Volume<T> to_volume(const TensorFile& file) {
  if (file.dims.size() != 4) {
    throw DimensionError("vten: expected 4 dims (c,d,h,w), got " +
                         std::to_string(file.dims.size()));
  }
  Volume<T> v(static_cast<int>(file.dims[0]),
              {static_cast<int>(file.dims[1]), static_cast<int>(file.dims[2]),
               static_cast<int>(file.dims[3])});
  auto dst = v.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(file.values[i]);
  return v;
}

template <typename T>
Matrix<T> to_matrix(const TensorFile& file) {
  if (file.dims.size() != 2) {
    throw DimensionError("vten: expected 2 dims, got " + std::to_string(file.dims.size()));
  }
  Matrix<T> m(file.dims[0], file.dims[1]);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(file.values[i]);
  return m;
}

std::string dtype_name(Dtype dtype) { return dtype == Dtype::f32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& name) {
  if (name == "f32") return Dtype::f32;
  if (name == "f64") return Dtype::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

template TensorFile from_volume(const Volume<float>&, Dtype);
template TensorFile from_volume(const Volume<double>&, Dtype);
template TensorFile from_matrix(const Matrix<float>&, Dtype);
template TensorFile from_matrix(const Matrix<double>&, Dtype);
template Volume<float> to_volume(const TensorFile&);
template Volume<double> to_volume(const TensorFile&);
template Matrix<float> to_matrix(const TensorFile&);
template Matrix<double> to_matrix(const TensorFile&);

}  // namespace cotr::vten
