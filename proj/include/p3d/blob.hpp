#pragma once

#include <string>

#include "p3d/tensor.hpp"

namespace p3d {

/// Tensor blob file: 4-byte little-endian header length, JSON header
/// {"name","dtype","shape"}, then raw little-endian values in C order.
/// Checkpoints and dataset snapshots store f32.
void write_tensor_blob(const std::string& path, const std::string& name, const Tensor& t);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

NamedTensor read_tensor_blob(const std::string& path);

}  // namespace p3d
