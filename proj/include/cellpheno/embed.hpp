#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cellpheno {

/// Dense row-major matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

struct EmbeddingMatrix {
    Matrix data;
    std::vector<std::string> ids;
};

/// Row-wise concatenation of per-member embeddings; all members must have the same row count.
Matrix concat_member_embeddings(std::span<const Matrix> members);

struct Affinities {
    Matrix p;                        // symmetric joint probabilities, zero diagonal, sums to 1
    std::vector<double> row_entropy;  // bits, of the conditional rows before symmetrisation
    std::vector<double> row_beta;     // 1 / (2 sigma^2)
};

/// Binary search per row for the Gaussian bandwidth whose conditional distribution has
/// entropy log2(perplexity) (tolerance 1e-5 bits, at most 200 steps), then symmetrise.
Affinities pairwise_affinities(const Matrix& x, double perplexity);

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double exaggeration = 12.0;
    int exaggeration_iterations = 250;
    double learning_rate = 200.0;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch_iteration = 250;
    std::uint64_t seed = 0;
};

struct TsneResult {
    Matrix coordinates;  // N x 2
    double initial_kl = 0.0;
    double final_kl = 0.0;
    double perplexity = 0.0;  // after clamping for small N
    bool perplexity_clamped = false;
};

/// Perplexity clamped to (N - 1) / 3 when it would otherwise be too large for N.
double effective_perplexity(double requested, std::size_t n);

/// KL(P || Q) with Student-t (1 dof) Q computed from the 2-D coordinates.
double kl_divergence(const Matrix& p, const Matrix& y);

/// Exact O(N^2) t-SNE.
TsneResult tsne(const Matrix& x, const TsneConfig& cfg);

/// Mean silhouette coefficient under Euclidean distance. Points alone in their cluster score 0.
double silhouette(const Matrix& points, std::span<const int> labels);

void write_embeddings_csv(const EmbeddingMatrix& e, const std::filesystem::path& path);
EmbeddingMatrix read_embeddings_csv(const std::filesystem::path& path);
void write_tsne_csv(const Matrix& coords, std::span<const std::string> ids, std::span<const std::string> labels,
                    const std::filesystem::path& path);
/// Scatter plot with one colour per label; `palette` lists "#rrggbb" strings in label order.
void write_tsne_svg(const Matrix& coords, std::span<const std::string> labels,
                    std::span<const std::string> label_order, std::span<const std::string> palette,
                    const std::filesystem::path& path);

}  // namespace cellpheno
