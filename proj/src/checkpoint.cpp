#include "sarfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sarfuse {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");

namespace {

constexpr char kMagic[8] = {'S', 'F', 'C', 'K', 'P', 'T', '0', '1'};

struct Entry {
    std::string name;
    Tensor* tensor;
    bool is_param;
};

std::vector<Entry> collect(Module& m) {
    std::vector<Entry> out;
    m.visit_tensors("", [&](const std::string& name, Tensor& t, bool is_param) {
        out.push_back({name, &t, is_param});
    });
    return out;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, Module& m, const nlohmann::json& arch) {
    auto entries = collect(m);
    nlohmann::json header;
    header["format_version"] = 1;
    header["arch"] = arch;
    header["total_params"] = m.parameter_count();
    nlohmann::json dir = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& e : entries) {
        dir.push_back({{"name", e.name},
                       {"kind", e.is_param ? "param" : "buffer"},
                       {"shape", e.tensor->shape()},
                       {"offset", offset}});
        offset += e.tensor->numel();
    }
    header["tensors"] = std::move(dir);

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    f.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& e : entries)
        f.write(reinterpret_cast<const char*>(e.tensor->data()),
                std::streamsize(e.tensor->numel() * int64_t(sizeof(float))));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
}

namespace {

nlohmann::json read_header(std::ifstream& f, const std::filesystem::path& path) {
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path.string());
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw std::runtime_error("truncated checkpoint header: " + path.string());
    return nlohmann::json::parse(hs);
}

} // namespace

nlohmann::json read_checkpoint_arch(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    return read_header(f, path).at("arch");
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, Module& m) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    nlohmann::json header = read_header(f, path);
    if (header.at("format_version").get<int>() != 1)
        throw std::runtime_error("unsupported checkpoint format version");
    if (header.at("total_params").get<int64_t>() != m.parameter_count())
        throw std::runtime_error("checkpoint parameter count " +
                                 std::to_string(header.at("total_params").get<int64_t>()) +
                                 " does not match module " + std::to_string(m.parameter_count()));

    auto entries = collect(m);
    const auto& dir = header.at("tensors");
    if (dir.size() != entries.size())
        throw std::runtime_error("checkpoint tensor count mismatch");
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& d = dir[i];
        if (d.at("name").get<std::string>() != entries[i].name)
            throw std::runtime_error("checkpoint tensor name mismatch: " +
                                     d.at("name").get<std::string>() + " vs " + entries[i].name);
        if (d.at("shape").get<std::vector<int>>() != entries[i].tensor->shape())
            throw std::runtime_error("checkpoint tensor shape mismatch for " + entries[i].name);
        f.read(reinterpret_cast<char*>(entries[i].tensor->data()),
               std::streamsize(entries[i].tensor->numel() * int64_t(sizeof(float))));
        if (!f) throw std::runtime_error("truncated checkpoint payload: " + path.string());
    }
    return header.at("arch");
}

} // namespace sarfuse
