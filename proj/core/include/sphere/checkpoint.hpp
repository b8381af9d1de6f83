#pragma once

// Self-describing binary checkpoint archive. Byte layout (all integers and
// floats little-endian):
//
//   magic   8 bytes  "SPHENC01"
//   u32     format version (1)
//   u64     training step counter
//   u64     rng seed record
//   u32     config length, followed by that many bytes of key=value text
//   u32     array count
//   per array:
//     u32   name length, name bytes
//     u8    dtype (0 = float32)
//     u32   ndim
//     u64[] dims
//     f32[] row-major payload
//
// Model parameters are stored under their parameter names; optimizer moments,
// when present, use the "opt.m." / "opt.v." prefixes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "sphere/network.hpp"
#include "sphere/tensor.hpp"

namespace sphere {

struct Checkpoint {
    ModelConfig config;
    uint64_t step = 0;
    uint64_t seed = 0;
    std::map<std::string, TensorData<float>> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Convenience: load and validate against an expected config, then populate
// the model. Throws ConfigMismatch when the archive was written for a
// different architecture.
template <typename T>
Checkpoint load_into_model(const std::filesystem::path& path, Model<T>& model) {
    Checkpoint ckpt = load_checkpoint(path);
    if (!(ckpt.config == model.config()))
        throw ConfigMismatch("checkpoint config does not match model config");
    model.load_state_dict(ckpt.arrays);
    return ckpt;
}

}  // namespace sphere
