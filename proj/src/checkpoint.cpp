#include "powernorm/toymodel.hpp"

#include "json.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace powernorm {

namespace {

using nlohmann::ordered_json;

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot open " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw FormatError("cannot open " + p.string() + " for writing");
    out << text;
}

ordered_json config_to_json(const ModelConfig& cfg) {
    ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["n_layers"] = cfg.n_layers;
    j["ffn_dim"] = cfg.ffn_dim;
    j["norm_kind"] = std::string(to_string(cfg.norm_kind));
    j["layer_scale_enabled"] = cfg.layer_scale_enabled;
    j["seed"] = cfg.seed;
    j["max_len"] = cfg.max_len;
    j["causal"] = cfg.causal;
    j["embedding_init"] = cfg.embedding_init == EmbeddingInit::Identity ? "identity" : "normal";
    j["eps"] = cfg.eps;
    j["bn_alpha"] = cfg.bn_alpha;
    j["pn_alpha_fwd"] = cfg.pn_alpha_fwd;
    j["pn_alpha_bwd"] = cfg.pn_alpha_bwd;
    j["pn_warmup_steps"] = cfg.pn_warmup_steps;
    return j;
}

ModelConfig config_from_json(const ordered_json& j) {
    try {
        ModelConfig cfg;
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.ffn_dim = j.at("ffn_dim").get<std::size_t>();
        cfg.norm_kind = parse_norm_kind(j.at("norm_kind").get<std::string>());
        cfg.layer_scale_enabled = j.at("layer_scale_enabled").get<bool>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.max_len = j.at("max_len").get<std::size_t>();
        cfg.causal = j.at("causal").get<bool>();
        cfg.embedding_init =
            j.at("embedding_init").get<std::string>() == "identity" ? EmbeddingInit::Identity : EmbeddingInit::Normal;
        cfg.eps = j.at("eps").get<double>();
        cfg.bn_alpha = j.at("bn_alpha").get<double>();
        cfg.pn_alpha_fwd = j.at("pn_alpha_fwd").get<double>();
        cfg.pn_alpha_bwd = j.at("pn_alpha_bwd").get<double>();
        cfg.pn_warmup_steps = j.at("pn_warmup_steps").get<std::uint64_t>();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config JSON: ") + e.what());
    }
}

} // namespace

std::string model_config_json(const ModelConfig& cfg) {
    return config_to_json(cfg).dump(2) + "\n";
}

ModelConfig model_config_from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config JSON: ") + e.what());
    }
    return config_from_json(j);
}

template <Real T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& dir, std::uint64_t step) {
    std::filesystem::create_directories(dir);
    const StateSnapshot state = model.norm_state_snapshot();
    write_binary_file(dir / "norm_state.bin", state);
    write_text(dir / "norm_state.json", encode_json(state));

    std::vector<std::uint8_t> blob;
    ordered_json table = ordered_json::array();
    std::size_t offset = 0;
    for (const auto& p : model.parameters()) {
        for (T v : p.value) {
            const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
            for (int k = 0; k < 8; ++k) blob.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
        }
        table.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}, {"offset", offset}});
        offset += p.value.size();
    }
    std::ofstream out(dir / "params.bin", std::ios::binary);
    if (!out) throw FormatError("cannot write " + (dir / "params.bin").string());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    out.close();

    ordered_json doc;
    doc["format"] = "powernorm-checkpoint";
    doc["version"] = 1;
    doc["step"] = step;
    doc["precision"] = precision_name<T>();
    doc["model"] = config_to_json(model.config());
    doc["parameter_count"] = offset;
    doc["parameters"] = std::move(table);
    doc["files"] = {"params.bin", "norm_state.bin", "norm_state.json"};
    write_text(dir / "checkpoint.json", doc.dump(2) + "\n");
}

template <Real T>
Model<T> load_checkpoint(const std::filesystem::path& dir) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(read_text(dir / "checkpoint.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint.json: ") + e.what());
    }
    if (doc.value("format", "") != "powernorm-checkpoint") throw FormatError("checkpoint.json: bad format tag");
    Model<T> model(config_from_json(doc.at("model")));

    const std::string blob = read_text(dir / "params.bin");
    auto params = model.parameters();
    std::size_t total = 0;
    for (const auto& p : params) total += p.value.size();
    if (blob.size() != total * 8) {
        throw FormatError("params.bin holds " + std::to_string(blob.size() / 8) + " values, model needs " +
                          std::to_string(total));
    }
    std::size_t k = 0;
    for (auto& p : params) {
        for (T& v : p.value) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= std::uint64_t(static_cast<std::uint8_t>(blob[k * 8 + b])) << (8 * b);
            v = static_cast<T>(std::bit_cast<double>(bits));
            ++k;
        }
    }
    model.load_norm_state(read_binary_file(dir / "norm_state.bin"));
    return model;
}

template void save_checkpoint(Model<float>&, const std::filesystem::path&, std::uint64_t);
template void save_checkpoint(Model<double>&, const std::filesystem::path&, std::uint64_t);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace powernorm
