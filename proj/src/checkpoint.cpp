#include "fdiag/checkpoint.hpp"

#include <stdexcept>

#include "fdiag/binary_io.hpp"

namespace fdiag {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json arch_to_json(const ArchConfig& arch) {
    ordered_json blocks = ordered_json::array();
    for (const auto& b : arch.blocks)
        blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}});
    return {{"head_mode", std::string(to_string(arch.head_mode))},
            {"norm_method", std::string(to_string(arch.norm_method))},
            {"blocks", blocks},
            {"feature_dim", arch.feature_dim},
            {"input_channels", arch.input_channels}};
}

ArchConfig arch_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
    ArchConfig arch;
    for (const auto& [key, value] : j.items()) {
        const std::string where = path + "." + key;
        try {
            if (key == "head_mode") {
                arch.head_mode = parse_head_mode(value.get<std::string>());
            } else if (key == "norm_method") {
                arch.norm_method = parse_norm_method(value.get<std::string>());
            } else if (key == "blocks") {
                arch.blocks.clear();
                for (std::size_t i = 0; i < value.size(); ++i) {
                    const auto& b = value.at(i);
                    ConvSpec spec;
                    for (const auto& [bk, bv] : b.items()) {
                        if (bk == "out_channels") spec.out_channels = bv.get<std::size_t>();
                        else if (bk == "kernel") spec.kernel = bv.get<std::size_t>();
                        else if (bk == "stride") spec.stride = bv.get<std::size_t>();
                        else throw std::invalid_argument("unknown key '" + where + "[" + std::to_string(i) + "]." + bk + "'");
                    }
                    arch.blocks.push_back(spec);
                }
            } else if (key == "feature_dim") {
                arch.feature_dim = value.get<std::size_t>();
            } else if (key == "input_channels") {
                arch.input_channels = value.get<std::size_t>();
            } else {
                throw std::invalid_argument("unknown key '" + where + "'");
            }
        } catch (const json::exception& e) {
            throw std::invalid_argument(where + ": " + e.what());
        }
    }
    arch.validate();
    return arch;
}

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json tensors = ordered_json::array();
    std::vector<float> payload;
    for (const auto& t : params.tensors) {
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"offset", payload.size()},
                           {"count", t.values.size()},
                           {"trainable", t.trainable}});
        payload.insert(payload.end(), t.values.begin(), t.values.end());
    }
    ordered_json index{{"format", "fdiag-checkpoint/1"},
                       {"dtype", "float32"},
                       {"endianness", "little"},
                       {"arch", arch_to_json(params.arch)},
                       {"tensors", tensors}};
    write_text_file(dir / "index.json", index.dump(1) + "\n");
    write_f32_file(dir / "tensors.bin", payload);
}

ModelParams<float> load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw MissingInput("checkpoint directory not found: " + dir.string());
    const json index = json::parse(read_text_file(dir / "index.json"));
    if (index.value("format", "") != "fdiag-checkpoint/1")
        throw std::runtime_error("unsupported checkpoint format in " + (dir / "index.json").string());
    const auto payload = read_f32_file(dir / "tensors.bin");
    ModelParams<float> params;
    params.arch = arch_from_json(index.at("arch"));
    for (const auto& t : index.at("tensors")) {
        ParamTensor<float> p;
        p.name = t.at("name").get<std::string>();
        p.shape = t.at("shape").get<std::vector<std::size_t>>();
        p.trainable = t.at("trainable").get<bool>();
        const auto offset = t.at("offset").get<std::size_t>();
        const auto count = t.at("count").get<std::size_t>();
        if (offset + count > payload.size()) throw std::runtime_error("checkpoint payload truncated at '" + p.name + "'");
        p.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                        payload.begin() + static_cast<std::ptrdiff_t>(offset + count));
        params.tensors.push_back(std::move(p));
    }
    // Layout must match what the architecture would create.
    const auto ref = init_params<float>(params.arch, 0);
    if (ref.tensors.size() != params.tensors.size())
        throw std::runtime_error("checkpoint tensor count does not match its architecture");
    for (std::size_t i = 0; i < ref.tensors.size(); ++i)
        if (ref.tensors[i].name != params.tensors[i].name || ref.tensors[i].shape != params.tensors[i].shape)
            throw std::runtime_error("checkpoint tensor '" + params.tensors[i].name + "' does not match its architecture");
    return params;
}

}  // namespace fdiag
