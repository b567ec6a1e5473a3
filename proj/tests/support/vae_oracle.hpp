#pragma once

// Reference computations for the VAE, written independently of the library's
// forward/backward code. Weights are read through VaePrior accessors only.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "quadprior/vae.hpp"

namespace oracle {

using quadprior::vae::kLatentDim;
using quadprior::vae::kPoseDim;
using quadprior::vae::LayerRole;
using quadprior::vae::Latent;
using quadprior::vae::PoseAngles;
using quadprior::vae::TrainConfig;
using quadprior::vae::VaePrior;

// Plain loops: out = W in + b, optionally rectified.
inline std::vector<double> dense(const VaePrior& vae, std::size_t layer, const std::vector<double>& in, bool rectify) {
    const auto& s = vae.layers()[layer];
    const auto w = vae.weight(layer);
    const auto b = vae.bias(layer);
    std::vector<double> out(s.out);
    for (std::size_t r = 0; r < s.out; ++r) {
        double acc = b(static_cast<Eigen::Index>(r));
        for (std::size_t c = 0; c < s.in; ++c) acc += w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * in[c];
        out[r] = rectify ? (acc > 0.0 ? acc : 0.0) : acc;
    }
    return out;
}

struct Encoded {
    std::vector<double> mu, logvar;
};

inline Encoded encode(const VaePrior& vae, const PoseAngles& pose) {
    std::vector<double> x(kPoseDim);
    for (std::size_t i = 0; i < kPoseDim; ++i) x[i] = pose.values[i] / vae.angle_scale();
    for (std::size_t l = 0; l < vae.hidden_widths().size(); ++l) x = dense(vae, l, x, true);
    return {dense(vae, vae.mean_head(), x, false), dense(vae, vae.logvar_head(), x, false)};
}

// Normalized decoder output.
inline std::vector<double> decode_normalized(const VaePrior& vae, const std::vector<double>& z) {
    std::vector<double> x = z;
    const std::size_t last = vae.layers().size() - 1;
    for (std::size_t l = vae.first_decoder_layer(); l < last; ++l) x = dense(vae, l, x, true);
    return dense(vae, last, x, false);
}

inline double total_loss(const VaePrior& vae, std::span<const PoseAngles> batch, std::span<const Latent> eps,
                         const TrainConfig& cfg) {
    double kl = 0.0, rec = 0.0;
    for (std::size_t j = 0; j < batch.size(); ++j) {
        const auto code = oracle::encode(vae, batch[j]);
        std::vector<double> z(kLatentDim);
        for (std::size_t i = 0; i < kLatentDim; ++i) {
            z[i] = code.mu[i] + eps[j][i] * std::exp(0.5 * code.logvar[i]);
            kl += 0.5 * (code.mu[i] * code.mu[i] + std::exp(code.logvar[i]) - 1.0 - code.logvar[i]);
        }
        const auto out = decode_normalized(vae, z);
        for (std::size_t i = 0; i < kPoseDim; ++i) {
            const double d = out[i] - batch[j].values[i] / vae.angle_scale();
            rec += d * d;
        }
    }
    const double n = static_cast<double>(batch.size());
    return cfg.w1 * kl / n + cfg.w2 * rec / n;
}

// Central finite differences of the total loss for every parameter. The base
// pass caches each layer's input and pre-activation and each batch column's
// loss. A perturbed parameter only changes one row of its layer, so the next
// layer is updated by a rank-one term, and only the batch columns where that
// row actually moves are pushed through the rest of the network.
class FiniteDifference {
public:
    using Mat = Eigen::MatrixXd;
    using Row = Eigen::RowVectorXd;
    using Columns = std::vector<Eigen::Index>;

    FiniteDifference(const VaePrior& vae, std::span<const PoseAngles> batch, std::span<const Latent> eps,
                     const TrainConfig& cfg)
        : vae_(vae), cfg_(cfg), n_(static_cast<Eigen::Index>(batch.size())) {
        x_.resize(kPoseDim, n_);
        eps_.resize(kLatentDim, n_);
        for (Eigen::Index j = 0; j < n_; ++j) {
            for (std::size_t i = 0; i < kPoseDim; ++i)
                x_(static_cast<Eigen::Index>(i), j) = batch[static_cast<std::size_t>(j)].values[i] / vae.angle_scale();
            for (std::size_t i = 0; i < kLatentDim; ++i)
                eps_(static_cast<Eigen::Index>(i), j) = eps[static_cast<std::size_t>(j)][i];
        }
        const std::size_t count = vae.layers().size();
        inputs_.resize(count);
        pre_.resize(count);
        Mat a = x_;
        for (std::size_t l = 0; l < vae.hidden_widths().size(); ++l) {
            inputs_[l] = a;
            pre_[l] = affine(l, a);
            a = pre_[l].cwiseMax(0.0);
        }
        for (std::size_t head : {vae.mean_head(), vae.logvar_head()}) {
            inputs_[head] = a;
            pre_[head] = affine(head, a);
        }
        Mat z = latent(pre_[vae.mean_head()], pre_[vae.logvar_head()], all_columns());
        a = z;
        for (std::size_t l = vae.first_decoder_layer(); l < count; ++l) {
            inputs_[l] = a;
            pre_[l] = affine(l, a);
            a = is_rectified(l) ? Mat(pre_[l].cwiseMax(0.0)) : pre_[l];
        }
        column_loss_ = column_losses(pre_[vae.mean_head()], pre_[vae.logvar_head()], pre_[count - 1], all_columns());
    }

    struct Probe {
        std::vector<double> gradient;
        // Set where the +h or -h probe flips the sign of some ReLU input, so the
        // central difference straddles a point where the loss is not differentiable.
        std::vector<bool> kinked;
    };

    Probe probe(double h) const {
        Probe out{std::vector<double>(vae_.parameters().size()), std::vector<bool>(vae_.parameters().size())};
        for (std::size_t l = 0; l < vae_.layers().size(); ++l) {
            const auto& s = vae_.layers()[l];
            for (std::size_t r = 0; r < s.out; ++r) {
                for (std::size_t c = 0; c <= s.in; ++c) {
                    // c == s.in addresses the bias.
                    bool crossed = false;
                    const double plus = perturbed_loss(l, r, c, h, crossed);
                    const double minus = perturbed_loss(l, r, c, -h, crossed);
                    const std::size_t index = c < s.in ? s.offset + r * s.in + c : s.offset + s.in * s.out + r;
                    out.gradient[index] = (plus - minus) / (2.0 * h);
                    out.kinked[index] = crossed;
                }
            }
        }
        return out;
    }

    std::vector<double> gradient(double h) const { return probe(h).gradient; }

private:
    Mat affine(std::size_t l, const Mat& in) const { return (vae_.weight(l) * in).colwise() + vae_.bias(l); }

    bool is_rectified(std::size_t l) const {
        const auto role = vae_.layers()[l].role;
        return role == LayerRole::EncoderHidden || role == LayerRole::DecoderHidden;
    }

    Columns all_columns() const {
        Columns all(static_cast<std::size_t>(n_));
        std::iota(all.begin(), all.end(), Eigen::Index{0});
        return all;
    }

    static Columns nonzero(const Row& v) {
        Columns cols;
        for (Eigen::Index j = 0; j < v.size(); ++j)
            if (v(j) != 0.0) cols.push_back(j);
        return cols;
    }

    template <typename A, typename B>
    static void note_crossing(const A& probe, const B& base, bool& crossed) {
        if (!crossed) crossed = ((probe.array() > 0.0) != (base.array() > 0.0)).any();
    }

    Mat latent(const Mat& mu, const Mat& logvar, const Columns& cols) const {
        return (mu.array() + eps_(Eigen::all, cols).array() * (0.5 * logvar.array()).exp()).matrix();
    }

    Row column_losses(const Mat& mu, const Mat& logvar, const Mat& out, const Columns& cols) const {
        const Row kl = 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array()).matrix().colwise().sum();
        const Row rec = (out - x_(Eigen::all, cols)).colwise().squaredNorm();
        return cfg_.w1 * kl + cfg_.w2 * rec;
    }

    // Base column losses with the listed columns replaced, summed in column order.
    double total(const Columns& cols, const Row& losses) const {
        Row all = column_loss_;
        for (std::size_t k = 0; k < cols.size(); ++k) all(cols[k]) = losses(static_cast<Eigen::Index>(k));
        return all.sum() / static_cast<double>(n_);
    }

    // Output of the decoder given the pre-activation of decoder layer `l` on `cols`.
    Mat decoder_from(std::size_t l, Mat pre, const Columns& cols, bool& crossed) const {
        const std::size_t last = vae_.layers().size() - 1;
        for (;; ++l) {
            if (l == last) return pre;
            note_crossing(pre, pre_[l](Eigen::all, cols), crossed);
            pre = affine(l + 1, pre.cwiseMax(0.0));
        }
    }

    double finish(const Mat& mu, const Mat& lv, const Columns& cols, bool& crossed) const {
        const std::size_t d0 = vae_.first_decoder_layer();
        const Mat out = decoder_from(d0, affine(d0, latent(mu, lv, cols)), cols, crossed);
        return total(cols, column_losses(mu, lv, out, cols));
    }

    double perturbed_loss(std::size_t l, std::size_t r, std::size_t c, double h, bool& crossed) const {
        const auto& s = vae_.layers()[l];
        const auto row = static_cast<Eigen::Index>(r);
        const Row base = pre_[l].row(row);
        const Row new_pre = c < s.in ? Row(base + h * inputs_[l].row(static_cast<Eigen::Index>(c)))
                                     : Row(base.array() + h);

        const std::size_t depth = vae_.hidden_widths().size();
        const std::size_t last = vae_.layers().size() - 1;
        const std::size_t mean = vae_.mean_head(), logvar = vae_.logvar_head();

        if (is_rectified(l)) {
            note_crossing(new_pre, base, crossed);
            const Row delta = new_pre.cwiseMax(0.0) - base.cwiseMax(0.0);
            const Columns cols = nonzero(delta);
            if (cols.empty()) return total(cols, Row());
            const Row d = delta(Eigen::all, cols);
            auto rank_one = [&](std::size_t next) {
                return Mat(pre_[next](Eigen::all, cols) + vae_.weight(next).col(row) * d);
            };
            if (l >= depth) return total(cols, column_losses(pre_[mean](Eigen::all, cols), pre_[logvar](Eigen::all, cols),
                                                             decoder_from(l + 1, rank_one(l + 1), cols, crossed), cols));
            if (l + 1 == depth) return finish(rank_one(mean), rank_one(logvar), cols, crossed);
            Mat next = rank_one(l + 1);
            for (std::size_t k = l + 1;; ++k) {
                note_crossing(next, pre_[k](Eigen::all, cols), crossed);
                const Mat a = next.cwiseMax(0.0);
                if (k + 1 == depth) return finish(affine(mean, a), affine(logvar, a), cols, crossed);
                next = affine(k + 1, a);
            }
        }

        const Columns cols = nonzero(new_pre - base);
        if (cols.empty()) return total(cols, Row());
        if (l == mean || l == logvar) {
            Mat mu = pre_[mean](Eigen::all, cols), lv = pre_[logvar](Eigen::all, cols);
            (l == mean ? mu : lv).row(row) = new_pre(Eigen::all, cols);
            return finish(mu, lv, cols, crossed);
        }
        // Output layer.
        Mat out = pre_[last](Eigen::all, cols);
        out.row(row) = new_pre(Eigen::all, cols);
        return total(cols, column_losses(pre_[mean](Eigen::all, cols), pre_[logvar](Eigen::all, cols), out, cols));
    }

    const VaePrior& vae_;
    TrainConfig cfg_;
    Eigen::Index n_;
    Mat x_, eps_;
    std::vector<Mat> inputs_, pre_;
    Row column_loss_;
};

/// Central differences at h = 1e-5 carry round-off near 1e-16 |loss| / h, so
/// gradient entries below this scale can only be checked to 1e-4 absolutely.
inline double gradient_floor(double loss) { return 1e-6 * std::max(1.0, std::abs(loss)); }

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor) {
    const double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

}  // namespace oracle
