#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "rqat/quant.hpp"

namespace rqat::packing {

// Little-endian continuous bitstream of unsigned offsets (code - q_min).
// Code i occupies bits [i*bits, (i+1)*bits); 3-bit codes cross word
// boundaries without padding.
struct PackedBuffer {
    int bits = 0;
    std::size_t count = 0;
    std::vector<std::uint32_t> words;
};

PackedBuffer pack(std::span<const std::int64_t> codes, const quant::QuantParams& params, int bits);
std::vector<std::int64_t> unpack(const PackedBuffer& buf, const quant::QuantParams& params);

struct DenseTensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

using TensorValue = std::variant<DenseTensor, quant::QuantizedTensor>;

// tensor name -> value; insertion into std::map keeps file layout deterministic.
using TensorMap = std::map<std::string, TensorValue>;

// Versioned container: magic "RQAT", version 1, JSON manifest, then raw
// little-endian payload. Dense tensors roundtrip byte-identically;
// quantized tensors roundtrip to identical codes, params, and spec.
inline constexpr char kMagic[4] = {'R', 'Q', 'A', 'T'};
inline constexpr std::uint32_t kVersion = 1;

void save_checkpoint(const std::string& path, const TensorMap& tensors,
                     const std::string& meta_json = "{}");
TensorMap load_checkpoint(const std::string& path, std::string* meta_json = nullptr);

// Manifest text of a checkpoint (for `inspect`).
std::string describe_checkpoint(const std::string& path);

std::uint64_t file_digest(const std::string& path);

}  // namespace rqat::packing
