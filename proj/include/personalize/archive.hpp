#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "personalize/tensor.hpp"

namespace personalize {

// Binary checkpoint container: a JSON metadata blob plus named double arrays,
// stored in insertion order. Array payloads are raw little-endian doubles, so
// save/load round-trips are bit-exact.
//
// Layout: "PZAR" magic, u32 format version, u64 meta length + bytes,
// u64 array count, then per array: u64 name length + bytes, u32 ndim,
// u32 dims[], payload.
class Archive {
public:
    static constexpr uint32_t kFormatVersion = 1;

    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    void put(const std::string& name, Tensor t);
    const Tensor* find(const std::string& name) const;
    // Throws FormatError when the array is absent.
    const Tensor& get(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }

    void save(const std::filesystem::path& path) const;
    static Archive load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, Tensor>> arrays_;
};

}  // namespace personalize
