#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adm/model.hpp"
#include "adm/tensor.hpp"

namespace adm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swapping");

/// Everything needed to resume an experiment: the folded model, how many
/// tasks it has absorbed, and the geometry digest of the config it was
/// trained under.
struct Checkpoint {
    BaseModel model;
    std::size_t task_cursor = 0;
    std::uint64_t config_hash = 0;
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'A', 'D', 'M', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error("checkpoint: truncated file while reading " + what);
    return v;
}

inline void write_record(std::ofstream& out, const std::string& name,
                         const std::vector<std::size_t>& shape, const float* data,
                         std::size_t count) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) write_pod(out, static_cast<std::uint64_t>(e));
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(float)));
}

inline std::pair<std::string, Tensorf> read_record(std::ifstream& in) {
    const auto name_len = read_pod<std::uint32_t>(in, "record name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint: truncated file while reading record name");
    const auto rank = read_pod<std::uint32_t>(in, name + " rank");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& e : shape) {
        e = static_cast<std::size_t>(read_pod<std::uint64_t>(in, name + " extent"));
        count *= e;
    }
    Tensorf t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated file while reading " + name);
    return {std::move(name), std::move(t)};
}

}  // namespace detail

/// Writes the checkpoint in the fixed record order (layers, head,
/// prototypes), so identical state always produces identical bytes.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.model.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");

    std::uint32_t num_records =
        static_cast<std::uint32_t>(ckpt.model.layers.size() * 4 + 2 +
                                   ckpt.model.prototypes.classes.size() * 3);
    out.write(detail::kCheckpointMagic, 4);
    detail::write_pod(out, detail::kCheckpointVersion);
    detail::write_pod(out, ckpt.config_hash);
    detail::write_pod(out, static_cast<std::uint32_t>(ckpt.task_cursor));
    detail::write_pod(out, num_records);

    for (std::size_t i = 0; i < ckpt.model.layers.size(); ++i) {
        const auto& layer = ckpt.model.layers[i];
        const std::string prefix = "layer" + std::to_string(i);
        const float spec[6] = {static_cast<float>(layer.spec.in_channels),
                               static_cast<float>(layer.spec.out_channels),
                               static_cast<float>(layer.spec.kernel_h),
                               static_cast<float>(layer.spec.kernel_w),
                               static_cast<float>(layer.spec.stride),
                               static_cast<float>(layer.spec.padding)};
        detail::write_record(out, prefix + ".spec", {6}, spec, 6);
        detail::write_record(out, prefix + ".kernel", layer.kernel.shape, layer.kernel.data.data(),
                             layer.kernel.numel());
        detail::write_record(out, prefix + ".bias", {layer.bias.size()}, layer.bias.data(),
                             layer.bias.size());
        detail::write_record(out, prefix + ".gate_gamma", {ckpt.model.gate_gamma[i].size()},
                             ckpt.model.gate_gamma[i].data(), ckpt.model.gate_gamma[i].size());
    }
    detail::write_record(out, "head.w", ckpt.model.head_w.shape, ckpt.model.head_w.data.data(),
                         ckpt.model.head_w.numel());
    detail::write_record(out, "head.b", ckpt.model.head_b.shape, ckpt.model.head_b.data.data(),
                         ckpt.model.head_b.numel());
    for (std::size_t c = 0; c < ckpt.model.prototypes.classes.size(); ++c) {
        const auto& p = ckpt.model.prototypes.classes[c];
        const std::string prefix = "proto" + std::to_string(c);
        detail::write_record(out, prefix + ".mean", {p.mean.size()}, p.mean.data(), p.mean.size());
        detail::write_record(out, prefix + ".var", {p.var.size()}, p.var.data(), p.var.size());
        const float count = static_cast<float>(p.count);
        detail::write_record(out, prefix + ".count", {1}, &count, 1);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(detail::kCheckpointMagic, 4)) {
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
    }
    const auto version = detail::read_pod<std::uint32_t>(in, "version");
    if (version != detail::kCheckpointVersion) {
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(detail::kCheckpointVersion) + ")");
    }
    Checkpoint ckpt;
    ckpt.config_hash = detail::read_pod<std::uint64_t>(in, "config hash");
    ckpt.task_cursor = detail::read_pod<std::uint32_t>(in, "task cursor");
    const auto num_records = detail::read_pod<std::uint32_t>(in, "record count");

    std::map<std::string, Tensorf> records;
    for (std::uint32_t r = 0; r < num_records; ++r) {
        auto [name, tensor] = detail::read_record(in);
        if (!records.emplace(std::move(name), std::move(tensor)).second) {
            throw std::runtime_error("checkpoint: duplicate record in " + path);
        }
    }
    in.peek();
    if (!in.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path);

    const auto take = [&](const std::string& name) -> Tensorf {
        auto it = records.find(name);
        if (it == records.end()) {
            throw std::runtime_error("checkpoint: missing record " + name + " in " + path);
        }
        Tensorf t = std::move(it->second);
        records.erase(it);
        return t;
    };

    for (std::size_t i = 0;; ++i) {
        const std::string prefix = "layer" + std::to_string(i);
        if (records.find(prefix + ".spec") == records.end()) break;
        const Tensorf spec_rec = take(prefix + ".spec");
        if (spec_rec.numel() != 6) throw std::runtime_error("checkpoint: malformed " + prefix + ".spec");
        FoldedConv<float> layer;
        layer.spec = ConvSpec{static_cast<std::size_t>(spec_rec.data[0]),
                              static_cast<std::size_t>(spec_rec.data[1]),
                              static_cast<std::size_t>(spec_rec.data[2]),
                              static_cast<std::size_t>(spec_rec.data[3]),
                              static_cast<std::size_t>(spec_rec.data[4]),
                              static_cast<std::size_t>(spec_rec.data[5])};
        layer.kernel = take(prefix + ".kernel");
        const Tensorf bias = take(prefix + ".bias");
        layer.bias.assign(bias.data.begin(), bias.data.end());
        const Tensorf gate = take(prefix + ".gate_gamma");
        ckpt.model.gate_gamma.emplace_back(gate.data.begin(), gate.data.end());
        ckpt.model.layers.push_back(std::move(layer));
    }
    ckpt.model.head_w = take("head.w");
    ckpt.model.head_b = take("head.b");
    for (std::size_t c = 0;; ++c) {
        const std::string prefix = "proto" + std::to_string(c);
        if (records.find(prefix + ".mean") == records.end()) break;
        Prototype<float> p;
        const Tensorf mean = take(prefix + ".mean");
        const Tensorf var = take(prefix + ".var");
        const Tensorf count = take(prefix + ".count");
        if (count.numel() != 1) throw std::runtime_error("checkpoint: malformed " + prefix + ".count");
        p.mean.assign(mean.data.begin(), mean.data.end());
        p.var.assign(var.data.begin(), var.data.end());
        p.count = static_cast<std::size_t>(count.data[0]);
        ckpt.model.prototypes.classes.push_back(std::move(p));
    }
    if (!ckpt.model.prototypes.classes.empty()) {
        ckpt.model.prototypes.feature_dim = ckpt.model.prototypes.classes[0].mean.size();
    }
    if (!records.empty()) {
        throw std::runtime_error("checkpoint: unexpected record " + records.begin()->first +
                                 " in " + path);
    }
    try {
        ckpt.model.validate();
        if (!ckpt.model.prototypes.classes.empty()) ckpt.model.prototypes.validate();
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("checkpoint: " + path + " holds an inconsistent model: " +
                                 e.what());
    }
    return ckpt;
}

/// Load with a geometry guard: the stored config hash must match the one
/// derived from the caller's configuration.
inline Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_hash) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config_hash != expected_hash) {
        throw std::runtime_error(
            "checkpoint: " + path +
            " was produced under a different model geometry or task structure (config hash "
            "mismatch)");
    }
    return ckpt;
}

}  // namespace adm
