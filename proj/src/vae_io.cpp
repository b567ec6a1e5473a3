#include <fstream>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/vae.hpp"

namespace quadprior::vae {
namespace {

constexpr int kModelVersion = 1;
constexpr std::string_view kModelFormat = "quadprior-vae";

std::string_view role_name(LayerRole role) {
    switch (role) {
        case LayerRole::EncoderHidden: return "encoder_hidden";
        case LayerRole::MeanHead: return "mean_head";
        case LayerRole::LogVarHead: return "logvar_head";
        case LayerRole::DecoderHidden: return "decoder_hidden";
        case LayerRole::DecoderOutput: return "decoder_output";
    }
    return "?";
}

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"learning_rate", c.learning_rate}, {"w1", c.w1},
        {"w2", c.w2},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
    TrainConfig c;
    try {
        c.learning_rate = doc.at("learning_rate").get<double>();
        c.w1 = doc.at("w1").get<double>();
        c.w2 = doc.at("w2").get<double>();
        c.epochs = doc.at("epochs").get<std::size_t>();
        c.batch_size = doc.at("batch_size").get<std::size_t>();
        c.seed = doc.at("seed").get<std::uint64_t>();
        c.adam_beta1 = doc.at("adam_beta1").get<double>();
        c.adam_beta2 = doc.at("adam_beta2").get<double>();
        c.adam_eps = doc.at("adam_eps").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("train_config: ") + e.what());
    }
    return c;
}

nlohmann::json to_json(const VaePrior& vae) {
    nlohmann::json layers = nlohmann::json::array();
    const auto params = vae.parameters();
    for (const auto& s : vae.layers()) {
        const auto* w = params.data() + s.offset;
        layers.push_back({
            {"role", role_name(s.role)},
            {"in", s.in},
            {"out", s.out},
            {"weights", std::vector<double>(w, w + s.in * s.out)},
            {"bias", std::vector<double>(w + s.in * s.out, w + s.size())},
        });
    }
    return {
        {"format", kModelFormat},
        {"version", kModelVersion},
        {"input_dim", kPoseDim},
        {"latent_dim", kLatentDim},
        {"hidden", vae.hidden_widths()},
        {"angle_scale", vae.angle_scale()},
        {"weight_layout", "row-major, out x in"},
        {"layers", std::move(layers)},
        {"train_config", to_json(vae.training)},
    };
}

VaePrior vae_from_json(const nlohmann::json& doc) {
    try {
        if (doc.at("format").get<std::string>() != kModelFormat) throw ParseError("model: not a quadprior-vae file");
        if (doc.at("version").get<int>() != kModelVersion)
            throw ParseError("model: unsupported version " + doc.at("version").dump());
        if (doc.at("input_dim").get<std::size_t>() != kPoseDim || doc.at("latent_dim").get<std::size_t>() != kLatentDim)
            throw ConfigError("model: input_dim must be 36 and latent_dim 16");
        VaePrior vae(doc.at("hidden").get<std::vector<std::size_t>>(), doc.at("angle_scale").get<double>());
        const auto& layers = doc.at("layers");
        if (layers.size() != vae.layers().size())
            throw ConfigError("model: expected " + std::to_string(vae.layers().size()) + " layers");
        auto params = vae.parameters();
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& s = vae.layers()[l];
            const auto& entry = layers[l];
            const std::string where = "model: layers[" + std::to_string(l) + "]";
            if (entry.at("in").get<std::size_t>() != s.in || entry.at("out").get<std::size_t>() != s.out)
                throw ConfigError(where + " shape does not chain");
            const auto w = entry.at("weights").get<std::vector<double>>();
            const auto b = entry.at("bias").get<std::vector<double>>();
            if (w.size() != s.in * s.out || b.size() != s.out) throw ConfigError(where + " has wrong value count");
            std::copy(w.begin(), w.end(), params.begin() + static_cast<std::ptrdiff_t>(s.offset));
            std::copy(b.begin(), b.end(), params.begin() + static_cast<std::ptrdiff_t>(s.offset + w.size()));
        }
        if (doc.contains("train_config")) vae.training = train_config_from_json(doc.at("train_config"));
        vae.validate();
        return vae;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
}

void save_model(const std::filesystem::path& path, const VaePrior& vae) { write_json_file(path, to_json(vae)); }

VaePrior load_model(const std::filesystem::path& path) {
    try {
        return vae_from_json(read_json_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::vector<PoseAngles> poses_from_json(const nlohmann::json& doc, std::string_view source) {
    if (!doc.is_array()) throw ParseError(std::string(source) + ": expected a JSON array of poses");
    std::vector<PoseAngles> poses;
    poses.reserve(doc.size());
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& row = doc[i];
        const std::string where = std::string(source) + "[" + std::to_string(i) + "]";
        if (!row.is_array() || row.size() != kPoseDim)
            throw ParseError(where + ": expected 36 numbers");
        PoseAngles pose;
        for (std::size_t k = 0; k < kPoseDim; ++k) {
            if (!row[k].is_number()) throw ParseError(where + "[" + std::to_string(k) + "]: not a number");
            pose.values[k] = row[k].get<double>();
        }
        try {
            pose.validate();
        } catch (const UsageError& e) {
            throw ParseError(where + ": " + e.what());
        }
        poses.push_back(pose);
    }
    return poses;
}

std::vector<PoseAngles> load_poses(const std::filesystem::path& path) {
    return poses_from_json(read_json_file(path), path.string());
}

nlohmann::json to_json(std::span<const PoseAngles> poses) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& p : poses) doc.push_back(p.values);
    return doc;
}

void save_poses(const std::filesystem::path& path, std::span<const PoseAngles> poses) {
    write_json_file(path, to_json(poses));
}

}  // namespace quadprior::vae
