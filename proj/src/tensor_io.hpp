#ifndef IVAFUSE_TENSOR_IO_HPP
#define IVAFUSE_TENSOR_IO_HPP

#include "features.hpp"

#include <string>
#include <vector>

namespace ivafuse {

// Feature/IFC tensor file: "IVFT", u32 version, N, T, K, then N*T*K
// little-endian f32 ordered k-major, then t, then n.
void write_tensor(const std::string& path, const FeatureTensor& x);
FeatureTensor read_tensor(const std::string& path);

// Demixing tensor file: "IVFW", u32 version, N, K, then K row-major N x N
// matrices as little-endian f32.
void write_demixing(const std::string& path, const std::vector<Mat>& w);
std::vector<Mat> read_demixing(const std::string& path);

}  // namespace ivafuse

#endif
