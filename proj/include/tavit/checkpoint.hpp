#pragma once

// TAVC checkpoint format: magic "TAVC", version u16, config snapshot block,
// root seed u64, epoch u32, a length-prefixed manifest of named parameter and
// buffer arrays with raw 32-bit little-endian values, optional optimizer
// state, and a trailing 64-bit checksum.

#include "tavit/io.hpp"
#include "tavit/model.hpp"
#include "tavit/optim.hpp"

namespace tavit {

inline constexpr uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, Model<float>& model,
                            uint64_t root_seed, uint32_t epoch,
                            AdamW<float>* opt = nullptr) {
    ByteWriter w;
    w.put_bytes("TAVC", 4);
    w.put_u16(kCheckpointVersion);
    w.put_block(model.cfg.serialize());
    w.put_u64(root_seed);
    w.put_u32(epoch);

    auto write_entries = [&w](const std::vector<std::pair<std::string, Tensor<float>>>& entries) {
        w.put_u32(uint32_t(entries.size()));
        for (auto& [name, t] : entries) {
            w.put_string(name);
            w.put_u8(uint8_t(t->shape.size()));
            for (auto e : t->shape) w.put_u32(uint32_t(e));
            for (float v : t->data) w.put_f32(v);
        }
    };
    write_entries(model.store.params);
    write_entries(model.store.buffers);

    if (opt) {
        w.put_u8(1);
        w.put_u64(opt->step_count());
        const auto& h = opt->hyper();
        for (double hv : {h.lr, h.beta1, h.beta2, h.eps, h.weight_decay}) {
            uint64_t bits;
            std::memcpy(&bits, &hv, 8);
            w.put_u64(bits);
        }
        for (auto& m : opt->moment1())
            for (float v : m) w.put_f32(v);
        for (auto& v2 : opt->moment2())
            for (float v : v2) w.put_f32(v);
    } else {
        w.put_u8(0);
    }
    w.write_file(path);
}

struct CheckpointMeta {
    uint64_t root_seed = 0;
    uint32_t epoch = 0;
    bool had_optimizer = false;
    ModelConfig config;
};

// Restores parameters (and optimizer state when present) into an
// already-constructed model of matching configuration.
inline CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model<float>& model,
                                      AdamW<float>* opt = nullptr) {
    ByteReader r(path);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, "TAVC", 4) != 0)
        throw FormatError("bad magic in checkpoint " + path.string());
    const uint16_t ver = r.get_u16();
    if (ver != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(ver));
    CheckpointMeta meta;
    const std::string cfg_text = r.get_block();
    meta.config = ModelConfig::deserialize(cfg_text);
    if (cfg_text != model.cfg.serialize())
        throw FormatError("checkpoint config does not match model config:\n--- checkpoint\n" +
                          cfg_text + "--- model\n" + model.cfg.serialize());
    meta.root_seed = r.get_u64();
    meta.epoch = r.get_u32();

    auto read_entries = [&r, &path](std::vector<std::pair<std::string, Tensor<float>>>& entries) {
        const uint32_t count = r.get_u32();
        if (count != entries.size())
            throw FormatError("checkpoint entry count mismatch in " + path.string());
        for (auto& [name, t] : entries) {
            const std::string fname = r.get_string();
            if (fname != name)
                throw FormatError("checkpoint entry name mismatch: expected " + name + ", got " + fname);
            const uint8_t rank = r.get_u8();
            if (rank != t->shape.size()) throw FormatError("checkpoint shape rank mismatch for " + name);
            for (auto e : t->shape) {
                if (r.get_u32() != uint32_t(e))
                    throw FormatError("checkpoint shape mismatch for " + name);
            }
            for (auto& v : t->data) v = r.get_f32();
        }
    };
    read_entries(model.store.params);
    read_entries(model.store.buffers);

    meta.had_optimizer = r.get_u8() != 0;
    if (meta.had_optimizer) {
        const uint64_t t = r.get_u64();
        AdamWHyper h;
        double* fields[] = {&h.lr, &h.beta1, &h.beta2, &h.eps, &h.weight_decay};
        for (double* f : fields) {
            uint64_t bits = r.get_u64();
            std::memcpy(f, &bits, 8);
        }
        if (opt) {
            *opt = AdamW<float>(model.store.params, h);
            opt->set_step_count(t);
            for (auto& m : opt->moment1())
                for (auto& v : m) v = r.get_f32();
            for (auto& v2 : opt->moment2())
                for (auto& v : v2) v = r.get_f32();
        }
    }
    return meta;
}

}  // namespace tavit
