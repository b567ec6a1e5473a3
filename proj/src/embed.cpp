#include "quadprior/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/parallel.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::embed {
namespace {

constexpr double kPerplexityTolerance = 1e-5;
constexpr int kBisectionSteps = 200;
constexpr int kHistoryStride = 50;

Matrix squared_distances(const Matrix& x) {
    const auto n = static_cast<std::size_t>(x.rows());
    Matrix d(n, n);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            for (std::size_t j = 0; j < n; ++j) d(i, j) = (x.row(i) - x.row(j)).squaredNorm();
    });
    return d;
}

// Entropy of the row exp(-beta * s) / Z over the non-self entries.
double shifted_entropy(const std::vector<double>& s, double beta) {
    double z = 0.0, weighted = 0.0;
    for (double v : s) {
        const double w = std::exp(-beta * v);
        z += w;
        weighted += w * v;
    }
    return std::log(z) + beta * weighted / z;
}

std::string row_list(const std::vector<std::size_t>& rows, std::size_t limit = 10) {
    std::string out;
    for (std::size_t i = 0; i < rows.size() && i < limit; ++i) out += (i ? ", " : "") + std::to_string(rows[i]);
    if (rows.size() > limit) out += ", ...";
    return out;
}

struct Kernel {
    std::vector<double> row_sums;
    double z = 0.0;
};

Kernel student_kernel(const Matrix& y) {
    const auto n = static_cast<std::size_t>(y.rows());
    Kernel k;
    k.row_sums.assign(n, 0.0);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) s += 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
            k.row_sums[i] = s;
        }
    });
    for (double s : k.row_sums) k.z += s;
    return k;
}

// Gradient of KL(scale * P || Q).
Matrix gradient(const Matrix& p, double scale, const Matrix& y) {
    const auto n = static_cast<std::size_t>(y.rows());
    const double z = student_kernel(y).z;
    Matrix g = Matrix::Zero(n, y.cols());
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const auto diff = y.row(i) - y.row(j);
                const double w = 1.0 / (1.0 + diff.squaredNorm());
                g.row(i) += (4.0 * (scale * p(i, j) - w / z) * w) * diff;
            }
        }
    });
    return g;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else if (c != '\r') {
            fields.back() += c;
        }
    }
    return fields;
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

std::vector<FeatureSet> group_rows(const std::vector<std::string>& domains, const std::vector<std::vector<double>>& rows) {
    std::vector<FeatureSet> sets;
    std::map<std::string, std::size_t> index;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto [it, inserted] = index.emplace(domains[r], sets.size());
        if (inserted) {
            sets.push_back({domains[r], {}});
            members.emplace_back();
        }
        members[it->second].push_back(r);
    }
    for (std::size_t s = 0; s < sets.size(); ++s) {
        const auto d = rows[members[s].front()].size();
        sets[s].vectors.resize(static_cast<Eigen::Index>(members[s].size()), static_cast<Eigen::Index>(d));
        for (std::size_t k = 0; k < members[s].size(); ++k)
            for (std::size_t c = 0; c < d; ++c) sets[s].vectors(k, c) = rows[members[s][k]][c];
    }
    return sets;
}

std::vector<FeatureSet> load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string src = path.string();
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (header.empty() && std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") != std::string::npos) header = split_csv_line(line);
    }
    if (header.empty()) return {};
    const auto domain_it = std::find(header.begin(), header.end(), "domain");
    if (domain_it == header.end()) throw ParseError(src + ": header has no domain column");
    const auto domain_col = static_cast<std::size_t>(domain_it - header.begin());
    if (header.size() < 2) throw ParseError(src + ": no feature columns");

    std::vector<std::string> domains;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = split_csv_line(line);
        const std::string where = src + ":" + std::to_string(line_no);
        if (fields.size() != header.size())
            throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                             std::to_string(fields.size()));
        std::vector<double> row;
        row.reserve(fields.size() - 1);
        for (std::size_t c = 0; c < fields.size(); ++c) {
            if (c == domain_col) continue;
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(fields[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || fields[c].find_first_not_of(" \t", used) != std::string::npos)
                throw ParseError(where + ": column " + header[c] + " is not a number: '" + fields[c] + "'");
            row.push_back(v);
        }
        domains.push_back(fields[domain_col]);
        rows.push_back(std::move(row));
    }
    return group_rows(domains, rows);
}

std::vector<FeatureSet> load_json(const std::filesystem::path& path) {
    const auto doc = read_json_file(path);
    const std::string src = path.string();
    if (doc.is_null()) return {};
    if (!doc.is_array()) throw ParseError(src + ": expected an array of {domain, features}");
    std::vector<std::string> domains;
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const std::string where = src + "[" + std::to_string(i) + "]";
        const auto& e = doc[i];
        if (!e.is_object() || !e.contains("domain") || !e["domain"].is_string())
            throw ParseError(where + ".domain: expected a string");
        if (!e.contains("features") || !e["features"].is_array() || e["features"].empty())
            throw ParseError(where + ".features: expected a non-empty array");
        std::vector<double> row;
        for (std::size_t c = 0; c < e["features"].size(); ++c) {
            if (!e["features"][c].is_number())
                throw ParseError(where + ".features[" + std::to_string(c) + "]: not a number");
            row.push_back(e["features"][c].get<double>());
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw ParseError(where + ".features: expected " + std::to_string(rows.front().size()) + " values");
        domains.push_back(e["domain"].get<std::string>());
        rows.push_back(std::move(row));
    }
    return group_rows(domains, rows);
}

}  // namespace

void FeatureSet::validate() const {
    if (vectors.rows() < 1 || vectors.cols() < 1) throw UsageError("feature set '" + domain + "' is empty");
    if (!vectors.allFinite()) throw UsageError("feature set '" + domain + "' has non-finite values");
}

void TsneConfig::validate(std::size_t n) const {
    if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n)))
        throw UsageError("perplexity must lie in (1, " + std::to_string(n) + ")");
    if (iterations < 1) throw UsageError("iterations must be at least 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (!(early_exaggeration >= 1.0)) throw UsageError("early_exaggeration must be at least 1");
    if (!(init_sigma > 0.0)) throw UsageError("init_sigma must be positive");
}

Matrix conditional_affinities(const Matrix& x, double perplexity) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n < 2) throw UsageError("affinities need at least two points");
    if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n)))
        throw UsageError("perplexity must lie in (1, " + std::to_string(n) + ")");
    const Matrix d = squared_distances(x);
    Matrix c = Matrix::Zero(n, n);
    const double target_h = std::log(perplexity);
    const bool uniform = perplexity >= static_cast<double>(n - 1);
    std::vector<char> failed(n, 0);

    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        std::vector<double> s(n - 1);
        for (std::size_t i = begin; i < end; ++i) {
            if (uniform) {
                for (std::size_t j = 0; j < n; ++j)
                    if (j != i) c(i, j) = 1.0 / static_cast<double>(n - 1);
                continue;
            }
            double dmin = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0, k = 0; j < n; ++j)
                if (j != i) dmin = std::min(dmin, s[k++] = d(i, j));
            std::size_t ties = 0;
            double spread = 0.0;
            for (double& v : s) {
                ties += v == dmin;
                v -= dmin;
                spread += v;
            }
            // As beta grows the perplexity falls towards the nearest-tie count.
            if (static_cast<double>(ties) >= perplexity) {
                failed[i] = 1;
                continue;
            }
            double lo = 0.0;
            double hi = static_cast<double>(n - 1) / spread;
            while (shifted_entropy(s, hi) > target_h) {
                lo = hi;
                hi *= 2.0;
                if (!std::isfinite(hi)) break;
            }
            double beta = hi;
            for (int step = 0; step < kBisectionSteps && std::isfinite(hi); ++step) {
                beta = 0.5 * (lo + hi);
                const double h = shifted_entropy(s, beta);
                if (std::abs(std::exp(h) - perplexity) < 1e-3 * kPerplexityTolerance) break;
                (h > target_h ? lo : hi) = beta;
            }
            if (!std::isfinite(hi) || std::abs(std::exp(shifted_entropy(s, beta)) - perplexity) > kPerplexityTolerance) {
                failed[i] = 1;
                continue;
            }
            double z = 0.0;
            for (double v : s) z += std::exp(-beta * v);
            for (std::size_t j = 0, k = 0; j < n; ++j)
                if (j != i) c(i, j) = std::exp(-beta * s[k++]) / z;
        }
    });

    std::vector<std::size_t> bad;
    for (std::size_t i = 0; i < n; ++i)
        if (failed[i]) bad.push_back(i);
    if (!bad.empty()) {
        std::string msg = "perplexity " + std::to_string(perplexity) + " is unreachable for rows " + row_list(bad);
        std::vector<std::size_t> dups;
        for (std::size_t j = 0; j < n; ++j)
            if (j != bad.front() && d(bad.front(), j) == 0.0) dups.push_back(j);
        if (!dups.empty())
            msg += "; row " + std::to_string(bad.front()) + " duplicates rows " + row_list(dups);
        else
            msg += ": too many equidistant nearest neighbours";
        throw DegenerateInputError(msg);
    }
    return c;
}

Matrix affinities(const Matrix& x, double perplexity) {
    const Matrix c = conditional_affinities(x, perplexity);
    const Matrix p = (c + c.transpose()) / (2.0 * static_cast<double>(c.rows()));
    return p / p.sum();
}

double row_perplexity(const Matrix& conditional, std::size_t row) {
    double h = 0.0;
    for (Eigen::Index j = 0; j < conditional.cols(); ++j) {
        const double v = conditional(static_cast<Eigen::Index>(row), j);
        if (static_cast<std::size_t>(j) != row && v > 0.0) h -= v * std::log(v);
    }
    return std::exp(h);
}

double kl_divergence(const Matrix& p, const Matrix& y) {
    const auto n = static_cast<std::size_t>(y.rows());
    const double z = student_kernel(y).z;
    std::vector<double> rows(n, 0.0);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || p(i, j) <= 0.0) continue;
                const double q = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm()) / z;
                s += p(i, j) * std::log(p(i, j) / q);
            }
            rows[i] = s;
        }
    });
    double kl = 0.0;
    for (double v : rows) kl += v;
    return kl;
}

Matrix kl_gradient(const Matrix& p, const Matrix& y) { return gradient(p, 1.0, y); }

Embedding tsne(std::span<const FeatureSet> sets, const TsneConfig& config) {
    Embedding out;
    std::size_t n = 0;
    Eigen::Index dim = -1;
    for (const auto& set : sets) {
        set.validate();
        if (dim >= 0 && set.vectors.cols() != dim)
            throw UsageError("feature set '" + set.domain + "' has dimension " + std::to_string(set.vectors.cols()) +
                             ", expected " + std::to_string(dim));
        dim = set.vectors.cols();
        n += static_cast<std::size_t>(set.vectors.rows());
    }
    if (n < 4) throw UsageError("t-SNE needs at least 4 points, got " + std::to_string(n));
    config.validate(n);

    Matrix x(n, dim);
    Eigen::Index row = 0;
    for (const auto& set : sets) {
        x.middleRows(row, set.vectors.rows()) = set.vectors;
        row += set.vectors.rows();
        for (Eigen::Index r = 0; r < set.vectors.rows(); ++r) out.domains.push_back(set.domain);
    }
    bool all_same = true;
    for (Eigen::Index r = 1; r < x.rows() && all_same; ++r) all_same = x.row(r) == x.row(0);
    if (all_same) throw DegenerateInputError("all " + std::to_string(n) + " points are identical (rows 0.." +
                                             std::to_string(n - 1) + ")");

    const Matrix p = affinities(x, config.perplexity);

    Rng rng(derive_seed(config.seed, "tsne-init"));
    std::normal_distribution<double> normal(0.0, config.init_sigma);
    Matrix y(n, 2);
    for (Eigen::Index r = 0; r < y.rows(); ++r) y(r, 0) = normal(rng), y(r, 1) = normal(rng);

    Matrix update = Matrix::Zero(n, 2);
    Matrix gains = Matrix::Ones(n, 2);
    out.kl_history.push_back({0, kl_divergence(p, y)});
    for (int it = 0; it < config.iterations; ++it) {
        const double scale = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
        const double momentum = it < config.momentum_switch ? config.initial_momentum : config.final_momentum;
        const Matrix g = gradient(p, scale, y);
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            for (Eigen::Index k = 0; k < 2; ++k) {
                double& gain = gains(i, k);
                gain = (g(i, k) > 0.0) != (update(i, k) > 0.0) ? gain + 0.2 : gain * 0.8;
                gain = std::max(gain, 0.01);
                update(i, k) = momentum * update(i, k) - config.learning_rate * gain * g(i, k);
            }
        }
        y += update;
        y.rowwise() -= y.colwise().mean();
        if (!y.allFinite()) throw NumericalError("t-SNE overflowed at iteration " + std::to_string(it + 1));
        const int done = it + 1;
        if (done % kHistoryStride == 0 || done == config.iterations) {
            const double kl = kl_divergence(p, y);
            if (!std::isfinite(kl)) throw NumericalError("t-SNE KL is not finite at iteration " + std::to_string(done));
            out.kl_history.push_back({done, kl});
        }
    }
    out.points = std::move(y);
    return out;
}

double silhouette_score(const Matrix& points, std::span<const int> labels) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (labels.size() != n) throw UsageError("silhouette: one label per point required");
    std::map<int, std::size_t> sizes;
    for (int l : labels) ++sizes[l];
    if (sizes.size() < 2) throw UsageError("silhouette needs at least two clusters");
    std::vector<double> s(n, 0.0);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            if (sizes.at(labels[i]) == 1) continue;
            std::map<int, double> sum;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) sum[labels[j]] += (points.row(i) - points.row(j)).norm();
            const double a = sum[labels[i]] / static_cast<double>(sizes.at(labels[i]) - 1);
            double b = std::numeric_limits<double>::infinity();
            for (const auto& [label, total] : sum)
                if (label != labels[i]) b = std::min(b, total / static_cast<double>(sizes.at(label)));
            const double m = std::max(a, b);
            s[i] = m > 0.0 ? (b - a) / m : 0.0;
        }
    });
    double total = 0.0;
    for (double v : s) total += v;
    return total / static_cast<double>(n);
}

double silhouette_score(const Embedding& embedding) {
    std::map<std::string, int> ids;
    std::vector<int> labels;
    for (const auto& d : embedding.domains) labels.push_back(ids.emplace(d, static_cast<int>(ids.size())).first->second);
    return silhouette_score(embedding.points, labels);
}

std::vector<FeatureSet> load_features(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".json") return load_json(path);
    if (ext == ".csv") return load_csv(path);
    throw UsageError("feature file must be .csv or .json: " + path.string());
}

void write_embedding_csv(const std::filesystem::path& path, const Embedding& embedding) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "x,y,domain\n";
    char buf[80];
    for (Eigen::Index r = 0; r < embedding.points.rows(); ++r) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,", embedding.points(r, 0), embedding.points(r, 1));
        out << buf << csv_quote(embedding.domains[static_cast<std::size_t>(r)]) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace quadprior::embed
