#pragma once

// Named float32 tensor archive. The on-disk layout is the safetensors
// container restricted to little-endian F32 payloads:
//
//   bytes [0, 8)        u64 LE  header_size N
//   bytes [8, 8+N)      UTF-8 JSON header, may be right-padded with spaces
//   bytes [8+N, end)    data region
//
// The header maps each tensor name to
//   {"dtype": "F32", "shape": [d0, d1, ...], "data_offsets": [begin, end]}
// with offsets relative to the start of the data region, end - begin equal to
// 4 * prod(shape). An optional "__metadata__" entry maps strings to strings.
// See docs/formats.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sentiscope/error.hpp"
#include "sentiscope/hash.hpp"

namespace sentiscope {

static_assert(std::endian::native == std::endian::little,
              "tensor archives are read by reinterpreting little-endian float32");

struct tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
};

inline std::string shape_string(std::span<const std::size_t> shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class tensor_archive {
public:
    tensor_archive() = default;

    static tensor_archive read(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open tensor archive " + path.string());

        std::uint64_t header_size = 0;
        in.read(reinterpret_cast<char*>(&header_size), sizeof header_size);
        if (!in) throw parse_error(path.string() + ": truncated archive (no header size)");

        in.seekg(0, std::ios::end);
        const auto file_size = static_cast<std::uint64_t>(in.tellg());
        if (header_size > file_size - 8) {
            throw parse_error(path.string() + ": header size " + std::to_string(header_size) +
                              " exceeds file size");
        }
        in.seekg(8);
        std::string header(header_size, '\0');
        in.read(header.data(), static_cast<std::streamsize>(header_size));

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(header);
        } catch (const nlohmann::json::parse_error& e) {
            throw parse_error(path.string() + ": malformed header JSON: " + e.what());
        }
        if (!j.is_object()) throw parse_error(path.string() + ": header is not a JSON object");

        const std::uint64_t data_size = file_size - 8 - header_size;
        tensor_archive archive;
        for (auto& [name, entry] : j.items()) {
            if (name == "__metadata__") {
                for (auto& [k, v] : entry.items()) {
                    if (!v.is_string()) throw parse_error(path.string() + ": metadata value for '" + k + "' is not a string");
                    archive.metadata_[k] = v.get<std::string>();
                }
                continue;
            }
            const auto where = path.string() + ": tensor '" + name + "'";
            if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
                !entry.contains("data_offsets")) {
                throw parse_error(where + " lacks dtype/shape/data_offsets");
            }
            if (entry["dtype"] != "F32") {
                throw parse_error(where + " has dtype " + entry["dtype"].dump() + ", only F32 is supported");
            }
            tensor t;
            t.shape = entry["shape"].get<std::vector<std::size_t>>();
            const auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
                throw parse_error(where + " has out-of-bounds data_offsets");
            }
            const std::uint64_t nbytes = offsets[1] - offsets[0];
            if (nbytes != t.numel() * sizeof(float)) {
                throw parse_error(where + " spans " + std::to_string(nbytes) + " bytes but shape " +
                                  shape_string(t.shape) + " needs " + std::to_string(t.numel() * 4));
            }
            t.data.resize(t.numel());
            in.seekg(static_cast<std::streamoff>(8 + header_size + offsets[0]));
            in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(nbytes));
            if (!in) throw parse_error(where + ": short read");
            archive.tensors_.emplace(name, std::move(t));
        }
        return archive;
    }

    void write(const std::filesystem::path& path) const {
        nlohmann::ordered_json header;
        if (!metadata_.empty()) {
            nlohmann::ordered_json meta = nlohmann::ordered_json::object();
            for (const auto& [k, v] : metadata_) meta[k] = v;
            header["__metadata__"] = meta;
        }
        std::uint64_t offset = 0;
        for (const auto& [name, t] : tensors_) {
            const std::uint64_t nbytes = t.data.size() * sizeof(float);
            header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + nbytes}}};
            offset += nbytes;
        }
        std::string text = header.dump();
        while (text.size() % 8 != 0) text.push_back(' ');

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write tensor archive " + path.string());
        const std::uint64_t header_size = text.size();
        out.write(reinterpret_cast<const char*>(&header_size), sizeof header_size);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : tensors_) {
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        }
        if (!out) throw io_error("short write to " + path.string());
    }

    bool contains(const std::string& name) const { return tensors_.contains(name); }

    const tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw missing_tensor_error("missing tensor '" + name + "'");
        return it->second;
    }

    void put(std::string name, tensor t) {
        if (t.data.size() != t.numel()) {
            throw shape_error("tensor '" + name + "' has " + std::to_string(t.data.size()) +
                              " values for shape " + shape_string(t.shape));
        }
        tensors_.insert_or_assign(std::move(name), std::move(t));
    }

    tensor take(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw missing_tensor_error("missing tensor '" + name + "'");
        tensor t = std::move(it->second);
        tensors_.erase(it);
        return t;
    }

    void erase(const std::string& name) { tensors_.erase(name); }

    const std::map<std::string, tensor>& tensors() const { return tensors_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }
    void set_metadata(std::string key, std::string value) { metadata_[std::move(key)] = std::move(value); }

    std::string checksum(const std::string& name) const {
        const auto& t = at(name);
        fnv1a64 h;
        h.update(std::span(reinterpret_cast<const unsigned char*>(t.data.data()), t.data.size() * sizeof(float)));
        return h.hex();
    }

private:
    std::map<std::string, tensor> tensors_;
    std::map<std::string, std::string> metadata_;
};

}  // namespace sentiscope
