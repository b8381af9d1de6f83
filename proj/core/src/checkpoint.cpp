#include "sphere/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sphere/errors.hpp"

namespace sphere {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'H', 'E', 'N', 'C', '0', '1'};
constexpr uint32_t kVersion = 1;

template <typename V>
void write_pod(std::ofstream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw CorruptCheckpoint("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod(os, kVersion);
    write_pod(os, ckpt.step);
    write_pod(os, ckpt.seed);
    const std::string cfg = ckpt.config.serialize();
    write_pod(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_pod(os, static_cast<uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, arr] : ckpt.arrays) {
        write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<uint8_t>(0));  // float32
        write_pod(os, static_cast<uint32_t>(arr.shape.size()));
        for (const int64_t d : arr.shape) write_pod(os, static_cast<uint64_t>(d));
        os.write(reinterpret_cast<const char*>(arr.v.data()),
                 static_cast<std::streamsize>(arr.v.size() * sizeof(float)));
    }
    if (!os) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CorruptCheckpoint("bad checkpoint magic: " + path.string());
    const auto version = read_pod<uint32_t>(is);
    if (version != kVersion)
        throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.step = read_pod<uint64_t>(is);
    ckpt.seed = read_pod<uint64_t>(is);
    const auto cfg_len = read_pod<uint32_t>(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);
    if (!is) throw CorruptCheckpoint("checkpoint truncated in config block");
    ckpt.config = ModelConfig::deserialize(cfg_text);
    const auto n_arrays = read_pod<uint32_t>(is);
    for (uint32_t a = 0; a < n_arrays; ++a) {
        const auto name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptCheckpoint("checkpoint truncated in array name");
        const auto dtype = read_pod<uint8_t>(is);
        if (dtype != 0) throw CorruptCheckpoint("unsupported dtype in checkpoint: " + name);
        const auto ndim = read_pod<uint32_t>(is);
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int64_t>(read_pod<uint64_t>(is));
        TensorData<float> arr(shape);
        is.read(reinterpret_cast<char*>(arr.v.data()),
                static_cast<std::streamsize>(arr.v.size() * sizeof(float)));
        if (!is) throw CorruptCheckpoint("checkpoint truncated in array payload: " + name);
        ckpt.arrays.emplace(std::move(name), std::move(arr));
    }
    return ckpt;
}

}  // namespace sphere
