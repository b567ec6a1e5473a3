#include "quadprior/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::vae {
namespace {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd relu(const MatrixXd& m) { return m.cwiseMax(0.0); }

MatrixXd affine(const VaePrior& vae, std::size_t layer, const MatrixXd& input) {
    return (vae.weight(layer) * input).colwise() + vae.bias(layer);
}

// Activations of one forward pass, kept for backpropagation.
struct EncoderPass {
    std::vector<MatrixXd> activations;  // [0] is the input, then one per hidden layer
    MatrixXd mu;
    MatrixXd logvar;
};

EncoderPass run_encoder(const VaePrior& vae, MatrixXd input) {
    EncoderPass pass;
    pass.activations.push_back(std::move(input));
    for (std::size_t l = 0; l < vae.hidden_widths().size(); ++l) {
        pass.activations.push_back(relu(affine(vae, l, pass.activations.back())));
    }
    pass.mu = affine(vae, vae.mean_head(), pass.activations.back());
    pass.logvar = affine(vae, vae.logvar_head(), pass.activations.back());
    return pass;
}

struct DecoderPass {
    std::vector<MatrixXd> activations;  // [0] is z
    MatrixXd output;                    // normalized units
};

DecoderPass run_decoder(const VaePrior& vae, MatrixXd z) {
    DecoderPass pass;
    pass.activations.push_back(std::move(z));
    const std::size_t first = vae.first_decoder_layer();
    const std::size_t last = vae.layers().size() - 1;
    for (std::size_t l = first; l < last; ++l) {
        pass.activations.push_back(relu(affine(vae, l, pass.activations.back())));
    }
    pass.output = affine(vae, last, pass.activations.back());
    return pass;
}

MatrixXd pose_matrix(const VaePrior& vae, std::span<const PoseAngles> poses) {
    MatrixXd m(kPoseDim, poses.size());
    for (std::size_t j = 0; j < poses.size(); ++j) {
        poses[j].validate();
        m.col(static_cast<Eigen::Index>(j)) = normalize(vae, poses[j]);
    }
    return m;
}

// Accumulates dW = delta * input^T and db = rowsum(delta) into the flat gradient.
void accumulate(const LayerShape& shape, const MatrixXd& delta, const MatrixXd& input, std::vector<double>& grads) {
    WeightMap dw(grads.data() + shape.offset, static_cast<Eigen::Index>(shape.out), static_cast<Eigen::Index>(shape.in));
    BiasMap db(grads.data() + shape.offset + shape.in * shape.out, static_cast<Eigen::Index>(shape.out));
    dw.noalias() += delta * input.transpose();
    db += delta.rowwise().sum();
}

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) throw UsageError(std::string(what) + " must be finite");
    }
}

}  // namespace

std::size_t joint_index(std::string_view name) {
    std::string canonical(name);
    std::replace(canonical.begin(), canonical.end(), '-', '_');
    for (std::size_t i = 0; i < kJointNames.size(); ++i) {
        if (kJointNames[i] == canonical) return i;
    }
    throw UsageError("unknown joint '" + std::string(name) + "'");
}

void PoseAngles::validate() const {
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (!std::isfinite(v) || v <= -360.0 || v >= 360.0) {
            throw UsageError("pose component " + std::to_string(i) + " (" +
                             std::string(kJointNames[i / kComponentsPerJoint]) + ") out of (-360, 360): " +
                             std::to_string(v));
        }
    }
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw UsageError("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw UsageError("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw UsageError("adam_eps must be positive");
    if (batch_size < 1) throw UsageError("batch_size must be at least 1");
    if (!std::isfinite(w1) || !std::isfinite(w2)) throw UsageError("loss weights must be finite");
}

VaePrior::VaePrior(std::vector<std::size_t> hidden, double angle_scale)
    : hidden_(std::move(hidden)), angle_scale_(angle_scale) {
    if (hidden_.empty()) throw ConfigError("encoder needs at least one hidden layer");
    if (!(angle_scale_ > 0.0) || !std::isfinite(angle_scale_)) throw ConfigError("angle_scale must be positive");
    std::size_t offset = 0;
    auto add = [&](LayerRole role, std::size_t in, std::size_t out) {
        if (in == 0 || out == 0) throw ConfigError("layer widths must be positive");
        layers_.push_back({role, in, out, offset});
        offset += in * out + out;
    };
    std::size_t width = kPoseDim;
    for (std::size_t h : hidden_) {
        add(LayerRole::EncoderHidden, width, h);
        width = h;
    }
    add(LayerRole::MeanHead, width, kLatentDim);
    add(LayerRole::LogVarHead, width, kLatentDim);
    width = kLatentDim;
    for (auto it = hidden_.rbegin(); it != hidden_.rend(); ++it) {
        add(LayerRole::DecoderHidden, width, *it);
        width = *it;
    }
    add(LayerRole::DecoderOutput, width, kPoseDim);
    params_.assign(offset, 0.0);
}

VaePrior VaePrior::he_uniform(std::uint64_t seed, std::vector<std::size_t> hidden, double angle_scale) {
    VaePrior vae(std::move(hidden), angle_scale);
    Rng rng(seed);
    for (std::size_t l = 0; l < vae.layers_.size(); ++l) {
        const auto& shape = vae.layers_[l];
        const double limit = std::sqrt(6.0 / static_cast<double>(shape.in));
        std::uniform_real_distribution<double> dist(-limit, limit);
        auto w = vae.weight(l);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
    }
    return vae;
}

WeightMap VaePrior::weight(std::size_t layer) {
    const auto& s = layers_.at(layer);
    return {params_.data() + s.offset, static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in)};
}

ConstWeightMap VaePrior::weight(std::size_t layer) const {
    const auto& s = layers_.at(layer);
    return {params_.data() + s.offset, static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in)};
}

BiasMap VaePrior::bias(std::size_t layer) {
    const auto& s = layers_.at(layer);
    return {params_.data() + s.offset + s.in * s.out, static_cast<Eigen::Index>(s.out)};
}

ConstBiasMap VaePrior::bias(std::size_t layer) const {
    const auto& s = layers_.at(layer);
    return {params_.data() + s.offset + s.in * s.out, static_cast<Eigen::Index>(s.out)};
}

void VaePrior::validate() const {
    const std::size_t depth = hidden_.size();
    if (layers_.size() != 2 * depth + 3) throw ConfigError("unexpected layer count");
    std::size_t width = kPoseDim;
    for (std::size_t l = 0; l < depth; ++l) {
        if (layers_[l].in != width) throw ConfigError("encoder layer " + std::to_string(l) + " input mismatch");
        width = layers_[l].out;
    }
    for (std::size_t head : {mean_head(), logvar_head()}) {
        if (layers_[head].in != width || layers_[head].out != kLatentDim)
            throw ConfigError("latent head shape mismatch");
    }
    width = kLatentDim;
    for (std::size_t l = first_decoder_layer(); l < layers_.size(); ++l) {
        if (layers_[l].in != width) throw ConfigError("decoder layer " + std::to_string(l) + " input mismatch");
        width = layers_[l].out;
    }
    if (width != kPoseDim) throw ConfigError("decoder output must have 36 components");
    for (std::size_t i = 0; i < depth; ++i) {
        const auto& enc = layers_[i];
        const auto& dec = layers_[layers_.size() - 1 - i];
        if (enc.in != dec.out || enc.out != dec.in) throw ConfigError("decoder is not the mirror of the encoder");
    }
    std::size_t expected = 0;
    for (const auto& s : layers_) expected += s.size();
    if (expected != params_.size()) throw ConfigError("parameter count does not match layer shapes");
}

VectorXd normalize(const VaePrior& vae, const PoseAngles& pose) {
    return Eigen::Map<const VectorXd>(pose.values.data(), kPoseDim) / vae.angle_scale();
}

LatentCode encode(const VaePrior& vae, const PoseAngles& pose) {
    vae.validate();
    pose.validate();
    const auto pass = run_encoder(vae, normalize(vae, pose));
    LatentCode code;
    for (std::size_t i = 0; i < kLatentDim; ++i) {
        code.mu[i] = pass.mu(static_cast<Eigen::Index>(i), 0);
        code.logvar[i] = pass.logvar(static_cast<Eigen::Index>(i), 0);
    }
    return code;
}

Latent reparameterize(const LatentCode& code, const Latent& eps) {
    check_finite(eps, "eps");
    check_finite(code.mu, "mu");
    check_finite(code.logvar, "logvar");
    Latent z{};
    for (std::size_t i = 0; i < kLatentDim; ++i) z[i] = code.mu[i] + eps[i] * std::exp(0.5 * code.logvar[i]);
    return z;
}

PoseAngles decode(const VaePrior& vae, const Latent& z) {
    check_finite(z, "z");
    const MatrixXd out = decode_batch(vae, Eigen::Map<const VectorXd>(z.data(), kLatentDim));
    PoseAngles pose;
    for (std::size_t i = 0; i < kPoseDim; ++i) pose.values[i] = out(static_cast<Eigen::Index>(i), 0);
    return pose;
}

MatrixXd decode_batch(const VaePrior& vae, const MatrixXd& z) {
    vae.validate();
    if (z.rows() != static_cast<Eigen::Index>(kLatentDim)) throw ConfigError("latent batch must have 16 rows");
    return run_decoder(vae, z).output * vae.angle_scale();
}

double kl_loss(const LatentCode& code) {
    double sum = 0.0;
    for (std::size_t i = 0; i < kLatentDim; ++i) {
        const double lv = code.logvar[i];
        sum += 0.5 * (code.mu[i] * code.mu[i] + std::exp(lv) - 1.0 - lv);
    }
    return sum;
}

double rec_loss(std::span<const double> a, std::span<const double> a_hat) {
    if (a.size() != a_hat.size()) throw UsageError("reconstruction operands differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - a_hat[i];
        sum += d * d;
    }
    return sum;
}

LossGradients loss_and_gradients(const VaePrior& vae, std::span<const PoseAngles> batch, std::span<const Latent> eps,
                                 const TrainConfig& config) {
    if (batch.empty()) throw UsageError("loss_and_gradients needs a non-empty batch");
    if (eps.size() != batch.size()) throw UsageError("noise batch must match the pose batch");
    vae.validate();

    const auto n = static_cast<Eigen::Index>(batch.size());
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    MatrixXd noise(kLatentDim, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        check_finite(eps[static_cast<std::size_t>(j)], "eps");
        noise.col(j) = Eigen::Map<const VectorXd>(eps[static_cast<std::size_t>(j)].data(), kLatentDim);
    }

    const MatrixXd target = pose_matrix(vae, batch);
    const EncoderPass enc = run_encoder(vae, target);
    const ArrayXXd sigma = (0.5 * enc.logvar.array()).exp();
    const ArrayXXd variance = enc.logvar.array().exp();
    const MatrixXd z = (enc.mu.array() + noise.array() * sigma).matrix();
    const DecoderPass dec = run_decoder(vae, z);

    const MatrixXd residual = dec.output - target;
    LossGradients out;
    out.rec = residual.squaredNorm() * inv_n;
    out.kl = 0.5 * (enc.mu.array().square() + variance - 1.0 - enc.logvar.array()).sum() * inv_n;
    out.total = config.w1 * out.kl + config.w2 * out.rec;
    out.gradients.assign(vae.parameters().size(), 0.0);

    const auto& layers = vae.layers();

    // Decoder, output layer first.
    MatrixXd delta = (2.0 * config.w2 * inv_n) * residual;
    for (std::size_t l = layers.size() - 1;; --l) {
        const MatrixXd& input = dec.activations[l - vae.first_decoder_layer()];
        accumulate(layers[l], delta, input, out.gradients);
        MatrixXd upstream = vae.weight(l).transpose() * delta;
        if (l == vae.first_decoder_layer()) {
            delta = std::move(upstream);
            break;
        }
        delta = (input.array() > 0.0).select(upstream, 0.0);
    }

    // delta is now dLoss/dz.
    const double kl_scale = config.w1 * inv_n;
    const MatrixXd d_mu = delta + kl_scale * enc.mu;
    const MatrixXd d_logvar =
        (delta.array() * noise.array() * 0.5 * sigma + kl_scale * 0.5 * (variance - 1.0)).matrix();

    const MatrixXd& trunk_out = enc.activations.back();
    accumulate(layers[vae.mean_head()], d_mu, trunk_out, out.gradients);
    accumulate(layers[vae.logvar_head()], d_logvar, trunk_out, out.gradients);
    MatrixXd upstream = vae.weight(vae.mean_head()).transpose() * d_mu +
                        vae.weight(vae.logvar_head()).transpose() * d_logvar;

    for (std::size_t l = vae.hidden_widths().size(); l-- > 0;) {
        delta = (enc.activations[l + 1].array() > 0.0).select(upstream, 0.0);
        accumulate(layers[l], delta, enc.activations[l], out.gradients);
        if (l > 0) upstream = vae.weight(l).transpose() * delta;
    }
    return out;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const TrainConfig& config) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw UsageError("adam_step: parameter, gradient and state sizes differ");
    }
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double correction1 = 1.0 - std::pow(config.adam_beta1, t);
    const double correction2 = 1.0 - std::pow(config.adam_beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * g;
        v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * g * g;
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    }
}

TrainResult train(VaePrior vae, std::span<const PoseAngles> dataset, const TrainConfig& config) {
    config.validate();
    vae.validate();
    if (dataset.empty()) throw UsageError("training needs at least one pose");
    for (const auto& pose : dataset) pose.validate();

    TrainResult result{std::move(vae), {}};
    result.model.training = config;
    AdamState state = AdamState::zeros(result.model.parameters().size());
    Rng rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<PoseAngles> batch;
    std::vector<Latent> eps;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochLoss sum;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            eps.clear();
            for (std::size_t k = start; k < end; ++k) {
                batch.push_back(dataset[order[k]]);
                Latent e{};
                for (double& v : e) v = normal(rng);
                eps.push_back(e);
            }
            auto step = loss_and_gradients(result.model, batch, eps, config);
            adam_step(result.model.parameters(), step.gradients, state, config);
            const auto weight = static_cast<double>(end - start);
            sum.kl += step.kl * weight;
            sum.rec += step.rec * weight;
            sum.total += step.total * weight;
        }
        const auto count = static_cast<double>(dataset.size());
        result.history.push_back({sum.kl / count, sum.rec / count, sum.total / count});
    }
    return result;
}

double mean_reconstruction_error(const VaePrior& vae, std::span<const PoseAngles> dataset) {
    if (dataset.empty()) throw UsageError("reconstruction error of an empty dataset");
    vae.validate();
    const MatrixXd target = pose_matrix(vae, dataset);
    const EncoderPass enc = run_encoder(vae, target);
    const DecoderPass dec = run_decoder(vae, enc.mu);
    return (dec.output - target).squaredNorm() / static_cast<double>(dataset.size());
}

}  // namespace quadprior::vae
