#pragma once

// Exact t-SNE for 2-D views of feature vectors from several image domains.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace quadprior::embed {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureSet {
    std::string domain;
    Matrix vectors;  // one row per sample

    /// n >= 1, d >= 1, finite values. Throws UsageError.
    void validate() const;
};

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double early_exaggeration = 12.0;
    int exaggeration_iterations = 250;
    double learning_rate = 200.0;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch = 250;
    double init_sigma = 1e-4;
    std::uint64_t seed = 0;

    /// 1 < perplexity < n, iterations >= 1. Throws UsageError.
    void validate(std::size_t n) const;
};

/// Row i holds p(j|i) for a Gaussian kernel whose bandwidth is bisected until
/// the row's perplexity exp(H) is within 1e-5 of the target. A target of
/// n - 1 or more gives uniform rows (the largest perplexity a row can reach).
/// Throws DegenerateInputError naming the rows whose target is unreachable,
/// which happens when more than `perplexity` neighbours tie for nearest.
Matrix conditional_affinities(const Matrix& x, double perplexity);

/// (C + C^T) / 2n of the conditional affinities: symmetric, sums to 1.
Matrix affinities(const Matrix& x, double perplexity);

/// Perplexity exp(H) of one probability row, ignoring the diagonal entry.
double row_perplexity(const Matrix& conditional, std::size_t row);

/// KL(P || Q) with Q the normalized Student-t kernel on the rows of y.
double kl_divergence(const Matrix& p, const Matrix& y);
/// Gradient of kl_divergence with respect to y.
Matrix kl_gradient(const Matrix& p, const Matrix& y);

struct KlSample {
    int iteration = 0;
    double kl = 0.0;  // against the unexaggerated P
};

struct Embedding {
    Matrix points;                     // n x 2
    std::vector<std::string> domains;  // per row, in input order
    std::vector<KlSample> kl_history;  // iteration 0, every 50th, and the last
};

/// Pools the sets in order and runs gradient descent with gains, momentum and
/// early exaggeration. Throws DegenerateInputError when every point is the
/// same, NumericalError naming the iteration on overflow.
Embedding tsne(std::span<const FeatureSet> sets, const TsneConfig& config);

/// Mean silhouette over all points. Singleton clusters contribute 0. Throws
/// UsageError when fewer than two labels occur.
double silhouette_score(const Matrix& points, std::span<const int> labels);
double silhouette_score(const Embedding& embedding);

/// CSV with a `domain` column and numeric feature columns, or a JSON array of
/// {"domain": ..., "features": [...]}. Rows are grouped by domain in order of
/// first appearance.
std::vector<FeatureSet> load_features(const std::filesystem::path& path);

/// x,y,domain rows at 17 significant digits.
void write_embedding_csv(const std::filesystem::path& path, const Embedding& embedding);

}  // namespace quadprior::embed
