#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>

#include "uniperc/tensor.hpp"

namespace uniperc {

// Single-file archive of named tensors with a JSON header. Used both for
// model checkpoints (parameters + batchnorm buffers + config) and for scene
// ground-truth arrays. Binary layout is fixed-endian doubles, so save/load
// round-trips bit-exactly.
struct TensorArchive {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path);
};

}  // namespace uniperc
