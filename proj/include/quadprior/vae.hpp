#pragma once

// Variational autoencoder over 36-component leg joint-angle vectors.
//
// The network is a plain stack of dense layers held in one flat parameter
// vector so that gradients and optimizer state share its layout:
//
//   encoder  36 -> hidden... (ReLU) -> {mean head 16, log-variance head 16}
//   decoder  16 -> hidden reversed... (ReLU) -> 36 (linear)
//
// Poses are divided by angle_scale before entering the encoder and the
// decoder output is multiplied by it, so every loss is in normalized units.

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace quadprior::vae {

inline constexpr std::size_t kJointCount = 12;
inline constexpr std::size_t kComponentsPerJoint = 3;
inline constexpr std::size_t kPoseDim = kJointCount * kComponentsPerJoint;
inline constexpr std::size_t kLatentDim = 16;

/// Leg joints in pose layout order.
inline constexpr std::array<std::string_view, kJointCount> kJointNames = {
    "shoulder_right", "elbow_right", "front_paw_right", "shoulder_left", "elbow_left", "front_paw_left",
    "hip_right",      "knee_right",  "back_paw_right",  "hip_left",      "knee_left",  "back_paw_left",
};

/// Index into kJointNames; accepts '-' for '_' ("back-paw_left"). Throws UsageError.
std::size_t joint_index(std::string_view name);

/// Twelve joints times three angle components, in degrees.
struct PoseAngles {
    std::array<double, kPoseDim> values{};

    [[nodiscard]] double component(std::size_t joint, std::size_t axis) const {
        return values[joint * kComponentsPerJoint + axis];
    }
    double& component(std::size_t joint, std::size_t axis) { return values[joint * kComponentsPerJoint + axis]; }

    /// Finite and strictly inside (-360, 360). Throws UsageError otherwise.
    void validate() const;
    friend bool operator==(const PoseAngles&, const PoseAngles&) = default;
};

using Latent = std::array<double, kLatentDim>;

struct LatentCode {
    Latent z{};
    Latent mu{};
    Latent logvar{};
};

struct TrainConfig {
    double learning_rate = 0.001;
    double w1 = 0.005;  // KL weight
    double w2 = 0.01;   // reconstruction weight
    std::size_t epochs = 250;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class LayerRole { EncoderHidden, MeanHead, LogVarHead, DecoderHidden, DecoderOutput };

struct LayerShape {
    LayerRole role;
    std::size_t in;
    std::size_t out;
    std::size_t offset;  // first weight in the flat parameter vector; bias follows the weights

    [[nodiscard]] std::size_t size() const noexcept { return in * out + out; }
};

/// Degrees per normalized unit: the network sees angles in radians.
inline constexpr double kDefaultAngleScale = 180.0 / std::numbers::pi;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using WeightMap = Eigen::Map<RowMatrix>;
using ConstWeightMap = Eigen::Map<const RowMatrix>;
using BiasMap = Eigen::Map<Eigen::VectorXd>;
using ConstBiasMap = Eigen::Map<const Eigen::VectorXd>;

class VaePrior {
public:
    /// Zero-initialized network.
    explicit VaePrior(std::vector<std::size_t> hidden = {64, 64}, double angle_scale = kDefaultAngleScale);

    /// He-style uniform fan-in initialization, zero biases.
    static VaePrior he_uniform(std::uint64_t seed, std::vector<std::size_t> hidden = {64, 64},
                               double angle_scale = kDefaultAngleScale);

    [[nodiscard]] std::span<double> parameters() noexcept { return params_; }
    [[nodiscard]] std::span<const double> parameters() const noexcept { return params_; }
    [[nodiscard]] const std::vector<LayerShape>& layers() const noexcept { return layers_; }
    [[nodiscard]] const std::vector<std::size_t>& hidden_widths() const noexcept { return hidden_; }
    [[nodiscard]] double angle_scale() const noexcept { return angle_scale_; }

    [[nodiscard]] std::size_t mean_head() const noexcept { return hidden_.size(); }
    [[nodiscard]] std::size_t logvar_head() const noexcept { return hidden_.size() + 1; }
    [[nodiscard]] std::size_t first_decoder_layer() const noexcept { return hidden_.size() + 2; }

    WeightMap weight(std::size_t layer);
    [[nodiscard]] ConstWeightMap weight(std::size_t layer) const;
    BiasMap bias(std::size_t layer);
    [[nodiscard]] ConstBiasMap bias(std::size_t layer) const;

    /// Checks the 36 -> ... -> 16 / 16 -> ... -> 36 chain and the mirror
    /// property. Throws ConfigError.
    void validate() const;

    /// Training configuration recorded alongside the weights.
    TrainConfig training{};

private:
    std::vector<std::size_t> hidden_;
    double angle_scale_;
    std::vector<LayerShape> layers_;
    std::vector<double> params_;
};

/// Pose scaled by 1/angle_scale.
Eigen::VectorXd normalize(const VaePrior& vae, const PoseAngles& pose);

/// Mean and log-variance of the encoder; z is left zero.
LatentCode encode(const VaePrior& vae, const PoseAngles& pose);

/// z = mu + eps * exp(logvar / 2).
Latent reparameterize(const LatentCode& code, const Latent& eps);

PoseAngles decode(const VaePrior& vae, const Latent& z);

/// Decodes every column of `z` (16 x n); result is 36 x n in degrees.
Eigen::MatrixXd decode_batch(const VaePrior& vae, const Eigen::MatrixXd& z);

/// KL(N(mu, diag exp(logvar)) || N(0, I)).
double kl_loss(const LatentCode& code);

/// Squared L2 distance of two normalized pose vectors.
double rec_loss(std::span<const double> a, std::span<const double> a_hat);

struct LossGradients {
    double total = 0.0;
    double kl = 0.0;   // batch mean
    double rec = 0.0;  // batch mean, normalized units
    std::vector<double> gradients;  // laid out like VaePrior::parameters()
};

/// total = w1 * mean KL + w2 * mean reconstruction, with the reparameterized
/// sample driven by the supplied noise, and its exact gradient.
LossGradients loss_and_gradients(const VaePrior& vae, std::span<const PoseAngles> batch, std::span<const Latent> eps,
                                 const TrainConfig& config);

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step_count = 0;

    static AdamState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }
};

/// Bias-corrected Adam update, in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const TrainConfig& config);

struct EpochLoss {
    double kl = 0.0;
    double rec = 0.0;
    double total = 0.0;
};

struct TrainResult {
    VaePrior model;
    std::vector<EpochLoss> history;
};

/// Mini-batch Adam over the dataset. Shuffling and noise come from one
/// generator seeded with config.seed, so equal inputs give bit-identical runs.
/// The final short batch is used as is.
TrainResult train(VaePrior vae, std::span<const PoseAngles> dataset, const TrainConfig& config);

/// Mean over the dataset of rec_loss(normalized pose, decode(encoder mean)).
double mean_reconstruction_error(const VaePrior& vae, std::span<const PoseAngles> dataset);

// Files.
nlohmann::json to_json(const VaePrior& vae);
VaePrior vae_from_json(const nlohmann::json& doc);
void save_model(const std::filesystem::path& path, const VaePrior& vae);
VaePrior load_model(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// JSON array of 36-element arrays in degrees.
std::vector<PoseAngles> load_poses(const std::filesystem::path& path);
std::vector<PoseAngles> poses_from_json(const nlohmann::json& doc, std::string_view source = "poses");
nlohmann::json to_json(std::span<const PoseAngles> poses);
void save_poses(const std::filesystem::path& path, std::span<const PoseAngles> poses);

}  // namespace quadprior::vae
