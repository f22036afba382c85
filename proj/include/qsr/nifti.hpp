#pragma once

// Single-file NIfTI-1 (.nii) reader/writer. Uncompressed only.

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qsr/common.hpp"

namespace qsr {

enum class NiftiDatatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  float32 = 16,
};

struct NiftiImage {
  std::array<std::int16_t, 8> dim{};  // dim[0] = rank
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  NiftiDatatype datatype = NiftiDatatype::float32;
  float scl_slope = 0.0f;  // 0 = no scaling
  float scl_inter = 0.0f;
  std::string descrip;
  std::vector<double> data;  // scaled values, x fastest

  std::size_t voxel_count() const {
    std::size_t n = 1;
    for (int i = 1; i <= dim[0]; ++i) n *= static_cast<std::size_t>(std::max<std::int16_t>(dim[i], 1));
    return n;
  }

  std::vector<std::size_t> shape() const {
    std::vector<std::size_t> s;
    for (int i = 1; i <= dim[0]; ++i) s.push_back(static_cast<std::size_t>(dim[i]));
    return s;
  }
};

namespace nifti_detail {

constexpr std::size_t header_size = 348;
constexpr std::size_t data_offset = 352;

template <typename T>
T byteswap_value(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <typename T>
T read_at(const unsigned char* buf, std::size_t offset, bool swap) {
  T v;
  std::memcpy(&v, buf + offset, sizeof(T));
  return swap ? byteswap_value(v) : v;
}

template <typename T>
void write_at(unsigned char* buf, std::size_t offset, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  std::memcpy(buf + offset, &v, sizeof(T));
}

inline int bitpix(NiftiDatatype t) {
  switch (t) {
    case NiftiDatatype::uint8: return 8;
    case NiftiDatatype::int16: return 16;
    case NiftiDatatype::float32: return 32;
  }
  return 0;
}

}  // namespace nifti_detail

inline NiftiImage load_nifti(const std::string& path) {
  using namespace nifti_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::array<unsigned char, header_size> hdr{};
  if (!in.read(reinterpret_cast<char*>(hdr.data()), header_size))
    throw FormatError("'" + path + "': truncated NIfTI header");
  if (std::memcmp(hdr.data() + 344, "n+1\0", 4) != 0)
    throw FormatError("'" + path + "': missing NIfTI-1 magic \"n+1\"");

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, hdr.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (byteswap_value(sizeof_hdr) != 348) throw FormatError("'" + path + "': bad sizeof_hdr");
    swap = true;
  }

  NiftiImage img;
  for (int i = 0; i < 8; ++i) img.dim[i] = read_at<std::int16_t>(hdr.data(), 40 + 2 * i, swap);
  if (img.dim[0] < 1 || img.dim[0] > 7) throw FormatError("'" + path + "': invalid dim[0]");
  for (int i = 1; i <= img.dim[0]; ++i)
    if (img.dim[i] < 1) throw FormatError("'" + path + "': non-positive extent in dim[]");
  for (int i = 0; i < 8; ++i) img.pixdim[i] = read_at<float>(hdr.data(), 76 + 4 * i, swap);

  const auto code = read_at<std::int16_t>(hdr.data(), 70, swap);
  if (code != 2 && code != 4 && code != 16)
    throw UnsupportedError("'" + path + "': unsupported NIfTI datatype " + std::to_string(code));
  img.datatype = static_cast<NiftiDatatype>(code);
  const float vox_offset = read_at<float>(hdr.data(), 108, swap);
  img.scl_slope = read_at<float>(hdr.data(), 112, swap);
  img.scl_inter = read_at<float>(hdr.data(), 116, swap);
  img.descrip.assign(reinterpret_cast<const char*>(hdr.data() + 148),
                     strnlen(reinterpret_cast<const char*>(hdr.data() + 148), 80));

  const std::size_t n = img.voxel_count();
  const std::size_t bytes_per = static_cast<std::size_t>(bitpix(img.datatype) / 8);
  std::vector<unsigned char> raw(n * bytes_per);
  in.seekg(static_cast<std::streamoff>(vox_offset < 348 ? data_offset : vox_offset));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("'" + path + "': truncated voxel data");

  const bool scaled = img.scl_slope != 0.0f && !(img.scl_slope == 1.0f && img.scl_inter == 0.0f);
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    switch (img.datatype) {
      case NiftiDatatype::uint8: v = raw[i]; break;
      case NiftiDatatype::int16: v = read_at<std::int16_t>(raw.data(), 2 * i, swap); break;
      case NiftiDatatype::float32: v = read_at<float>(raw.data(), 4 * i, swap); break;
    }
    img.data[i] = scaled ? v * img.scl_slope + img.scl_inter : v;
  }
  return img;
}

// Writes little-endian NIfTI-1 with the image's datatype. Values are stored
// unscaled (slope/intercept written as given, typically 0).
inline void save_nifti(const NiftiImage& img, const std::string& path) {
  using namespace nifti_detail;
  if (img.data.size() != img.voxel_count()) throw ShapeError("save_nifti: data size does not match dim[]");
  std::vector<unsigned char> buf(data_offset, 0);
  write_at<std::int32_t>(buf.data(), 0, 348);
  buf[38] = 'r';  // regular
  for (int i = 0; i < 8; ++i) write_at<std::int16_t>(buf.data(), 40 + 2 * i, img.dim[i]);
  write_at<std::int16_t>(buf.data(), 70, static_cast<std::int16_t>(img.datatype));
  write_at<std::int16_t>(buf.data(), 72, static_cast<std::int16_t>(bitpix(img.datatype)));
  for (int i = 0; i < 8; ++i) write_at<float>(buf.data(), 76 + 4 * i, img.pixdim[i]);
  write_at<float>(buf.data(), 108, static_cast<float>(data_offset));
  write_at<float>(buf.data(), 112, img.scl_slope);
  write_at<float>(buf.data(), 116, img.scl_inter);
  buf[123] = 2 | 8;  // mm, sec
  std::memcpy(buf.data() + 148, img.descrip.data(), std::min<std::size_t>(img.descrip.size(), 79));
  // sform: scaled identity.
  write_at<std::int16_t>(buf.data(), 254, 1);
  write_at<float>(buf.data(), 280, img.pixdim[1]);
  write_at<float>(buf.data(), 296 + 4, img.pixdim[2]);
  write_at<float>(buf.data(), 312 + 8, img.pixdim[3]);
  std::memcpy(buf.data() + 344, "n+1\0", 4);

  const double slope = img.scl_slope != 0.0f ? img.scl_slope : 1.0;
  const double inter = img.scl_slope != 0.0f ? img.scl_inter : 0.0;
  const std::size_t bytes_per = static_cast<std::size_t>(bitpix(img.datatype) / 8);
  buf.resize(data_offset + img.data.size() * bytes_per);
  unsigned char* out = buf.data() + data_offset;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double stored = (img.data[i] - inter) / slope;
    switch (img.datatype) {
      case NiftiDatatype::uint8:
        out[i] = static_cast<unsigned char>(std::clamp(std::lround(stored), 0l, 255l));
        break;
      case NiftiDatatype::int16:
        write_at<std::int16_t>(out, 2 * i,
                               static_cast<std::int16_t>(std::clamp(std::lround(stored), -32768l, 32767l)));
        break;
      case NiftiDatatype::float32: write_at<float>(out, 4 * i, static_cast<float>(stored)); break;
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

}  // namespace qsr
