#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "klaad/common.hpp"
#include "klaad/model.hpp"
#include "klaad/tokenizer.hpp"

namespace klaad {

inline json model_config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                {"d_model", c.d_model},     {"d_ff", c.d_ff},
                {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                {"seed", c.seed},           {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
    return c;
}

// Adam moment estimates, checkpointed so a resumed run continues the
// exact trajectory.
template <typename S>
struct AdamState {
    ModelParams<S> m;
    ModelParams<S> v;
    long t = 0;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'K', 'L', 'A', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

inline bool host_is_little_endian() {
    const uint32_t probe = 1;
    return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}

template <typename S>
void append_tensors(const ModelParams<S>& params, const std::string& prefix, json& directory,
                    std::vector<float>& payload) {
    visit_params(params, [&](const std::string& name, const Mat<S>& m) {
        directory.push_back(json{{"name", prefix + name},
                                 {"rows", m.rows},
                                 {"cols", m.cols},
                                 {"offset", payload.size() * sizeof(float)}});
        for (S v : m.data) payload.push_back(static_cast<float>(v));
    });
}

template <typename S>
void read_tensors(ModelParams<S>& params, const std::string& prefix, const json& directory,
                  const std::vector<float>& payload) {
    std::unordered_map<std::string, const json*> by_name;
    for (const auto& e : directory) by_name[e.at("name").get<std::string>()] = &e;
    visit_params(params, [&](const std::string& name, Mat<S>& m) {
        auto it = by_name.find(prefix + name);
        if (it == by_name.end())
            throw CheckpointError("checkpoint missing tensor: " + prefix + name);
        const json& e = *it->second;
        if (e.at("rows").get<int>() != m.rows || e.at("cols").get<int>() != m.cols)
            throw CheckpointError("checkpoint tensor shape mismatch: " + prefix + name);
        const size_t offset = e.at("offset").get<size_t>() / sizeof(float);
        if (offset + m.size() > payload.size())
            throw CheckpointError("checkpoint tensor out of payload bounds: " + prefix + name);
        for (size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<S>(payload[offset + i]);
    });
}

}  // namespace detail

struct LoadedCheckpoint {
    ModelConfig config;
    std::unique_ptr<Model> model;
    Tokenizer tokenizer;
    long step = 0;
    json extra;  // train config echo, if the trainer saved one
    std::optional<AdamState<float>> adam;
};

inline void save_checkpoint(const std::string& path, const Model& model,
                            const Tokenizer& tokenizer, long step, const json& extra = json(),
                            const AdamState<float>* adam = nullptr) {
    if (!detail::host_is_little_endian())
        throw CheckpointError("checkpoint format requires a little-endian host");

    json tensors = json::array();
    std::vector<float> payload;
    detail::append_tensors(model.params(), "", tensors, payload);
    if (adam) {
        detail::append_tensors(adam->m, "adam_m.", tensors, payload);
        detail::append_tensors(adam->v, "adam_v.", tensors, payload);
    }

    json header{{"format_version", detail::kCheckpointVersion},
                {"model_config", model_config_to_json(model.config())},
                {"vocab", tokenizer.words()},
                {"step", step},
                {"payload_floats", payload.size()}};
    if (adam) header["adam_t"] = adam->t;
    if (!extra.is_null()) header["extra"] = extra;
    header["tensors"] = tensors;

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    const uint32_t version = detail::kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    if (!detail::host_is_little_endian())
        throw CheckpointError("checkpoint format requires a little-endian host");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);

    char magic[8];
    if (!in.read(magic, sizeof(magic)) ||
        std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    uint32_t version = 0;
    if (!in.read(reinterpret_cast<char*>(&version), sizeof(version)) ||
        version != detail::kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version in " + path);
    uint64_t header_len = 0;
    if (!in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len)))
        throw CheckpointError("truncated checkpoint header: " + path);
    std::string header_str(header_len, '\0');
    if (!in.read(header_str.data(), static_cast<std::streamsize>(header_len)))
        throw CheckpointError("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
    }

    LoadedCheckpoint result;
    result.config = model_config_from_json(header.at("model_config"));
    result.tokenizer = Tokenizer(header.at("vocab").get<std::vector<std::string>>());
    result.step = header.at("step").get<long>();
    if (header.contains("extra")) result.extra = header.at("extra");

    const size_t n_floats = header.at("payload_floats").get<size_t>();
    std::vector<float> payload(n_floats);
    if (!in.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(n_floats * sizeof(float))))
        throw CheckpointError("truncated checkpoint payload: " + path);
    in.peek();
    if (!in.eof()) throw CheckpointError("trailing bytes after checkpoint payload: " + path);

    result.model = std::make_unique<Model>(result.config);
    detail::read_tensors(result.model->params(), "", header.at("tensors"), payload);
    if (header.contains("adam_t")) {
        AdamState<float> adam;
        adam.m = result.model->zero_grads();
        adam.v = result.model->zero_grads();
        adam.t = header.at("adam_t").get<long>();
        detail::read_tensors(adam.m, "adam_m.", header.at("tensors"), payload);
        detail::read_tensors(adam.v, "adam_v.", header.at("tensors"), payload);
        result.adam = std::move(adam);
    }
    return result;
}

}  // namespace klaad
