#include "cellpheno/embed.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "cellpheno/rng.hpp"

namespace cellpheno {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols) throw std::invalid_argument("ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.values.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
    }
    return m;
}

Matrix concat_member_embeddings(std::span<const Matrix> members) {
    if (members.empty()) throw std::invalid_argument("no member embeddings to concatenate");
    const std::size_t n = members.front().rows;
    std::size_t d = 0;
    for (const auto& m : members) {
        if (m.rows != n)
            throw std::invalid_argument("member embeddings have different row counts (" + std::to_string(n) + " vs " +
                                        std::to_string(m.rows) + ")");
        d += m.cols;
    }
    Matrix out(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t c0 = 0;
        for (const auto& m : members) {
            for (std::size_t c = 0; c < m.cols; ++c) out(r, c0 + c) = m(r, c);
            c0 += m.cols;
        }
    }
    return out;
}

namespace {

Matrix squared_distances(const Matrix& x) {
    Matrix d(x.rows, x.rows);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = i + 1; j < x.rows; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < x.cols; ++k) {
                const double t = x(i, k) - x(j, k);
                s += t * t;
            }
            d(i, j) = d(j, i) = s;
        }
    return d;
}

constexpr double kSigmaFloor = 1e-12;

}  // namespace

Affinities pairwise_affinities(const Matrix& x, double perplexity) {
    const std::size_t n = x.rows;
    if (n < 2) throw std::invalid_argument("affinities need at least two points");
    if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n)))
        throw std::invalid_argument("perplexity must lie in (1, N)");
    for (double v : x.values)
        if (!std::isfinite(v)) throw std::invalid_argument("embedding contains non-finite values");

    const Matrix d = squared_distances(x);
    const double target = std::log2(perplexity);
    const double beta_max_allowed = 1.0 / (2.0 * kSigmaFloor * kSigmaFloor);
    Affinities out{Matrix(n, n), std::vector<double>(n), std::vector<double>(n)};
    Matrix cond(n, n);
    std::vector<double> row(n);

    for (std::size_t i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, d(i, j));
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double entropy = 0.0;
        for (int step = 0; step < 200; ++step) {
            double sum = 0.0, weighted = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = j == i ? 0.0 : std::exp(-beta * (d(i, j) - dmin));
                sum += row[j];
                weighted += row[j] * (d(i, j) - dmin);
            }
            entropy = (std::log(sum) + beta * weighted / sum) / std::log(2.0);
            for (auto& v : row) v /= sum;
            const double diff = entropy - target;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            if (beta >= beta_max_allowed) {
                beta = beta_max_allowed;
                if (lo >= beta_max_allowed) break;
            }
        }
        for (std::size_t j = 0; j < n; ++j) cond(i, j) = row[j];
        out.row_entropy[i] = entropy;
        out.row_beta[i] = beta;
    }
    const double denom = 2.0 * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out.p(i, j) = i == j ? 0.0 : (cond(i, j) + cond(j, i)) / denom;
    return out;
}

double effective_perplexity(double requested, std::size_t n) {
    const double cap = (static_cast<double>(n) - 1.0) / 3.0;
    return requested > cap ? cap : requested;
}

double kl_divergence(const Matrix& p, const Matrix& y) {
    const std::size_t n = p.rows;
    double z = 0.0;
    Matrix num(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
            num(i, j) = 1.0 / (1.0 + dx * dx + dy * dy);
            z += num(i, j);
        }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j || p(i, j) <= 0.0) continue;
            const double q = std::max(num(i, j) / z, 1e-300);
            kl += p(i, j) * std::log(p(i, j) / q);
        }
    return kl;
}

TsneResult tsne(const Matrix& x, const TsneConfig& cfg) {
    const std::size_t n = x.rows;
    if (n < 5) throw std::invalid_argument("t-SNE needs at least 5 points");
    if (cfg.iterations < 1) throw std::invalid_argument("t-SNE needs at least one iteration");
    TsneResult result;
    result.perplexity = effective_perplexity(cfg.perplexity, n);
    result.perplexity_clamped = result.perplexity != cfg.perplexity;
    const Matrix p = pairwise_affinities(x, result.perplexity).p;

    Rng rng(cfg.seed);
    Matrix y(n, 2);
    for (auto& v : y.values) v = rng.normal(0.0, 1e-4);
    result.initial_kl = kl_divergence(p, y);

    Matrix velocity(n, 2), gains(n, 2, 1.0), grad(n, 2), num(n, n);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double exaggeration = iter < cfg.exaggeration_iterations ? cfg.exaggeration : 1.0;
        const double momentum = iter < cfg.momentum_switch_iteration ? cfg.initial_momentum : cfg.final_momentum;
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
                const double v = 1.0 / (1.0 + dx * dx + dy * dy);
                num(i, j) = num(j, i) = v;
                z += 2.0 * v;
            }
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double mult = (exaggeration * p(i, j) - num(i, j) / z) * num(i, j);
                gx += mult * (y(i, 0) - y(j, 0));
                gy += mult * (y(i, 1) - y(j, 1));
            }
            grad(i, 0) = 4.0 * gx;
            grad(i, 1) = 4.0 * gy;
        }
        for (std::size_t k = 0; k < y.values.size(); ++k) {
            const double g = grad.values[k];
            auto& gain = gains.values[k];
            gain = (g > 0) != (velocity.values[k] > 0) ? gain + 0.2 : gain * 0.8;
            gain = std::max(gain, 0.01);
            velocity.values[k] = momentum * velocity.values[k] - cfg.learning_rate * gain * g;
            y.values[k] += velocity.values[k];
            if (!std::isfinite(y.values[k]))
                throw std::runtime_error("t-SNE produced a non-finite coordinate at iteration " + std::to_string(iter));
        }
        for (int c = 0; c < 2; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += y(i, c);
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) y(i, c) -= mean;
        }
    }
    result.final_kl = kl_divergence(p, y);
    result.coordinates = std::move(y);
    return result;
}

double silhouette(const Matrix& points, std::span<const int> labels) {
    const std::size_t n = points.rows;
    if (labels.size() != n) throw std::invalid_argument("silhouette: one label per point required");
    std::map<int, std::size_t> sizes;
    for (int l : labels) ++sizes[l];
    if (sizes.size() < 2) throw std::invalid_argument("silhouette needs at least two clusters");
    auto dist = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t k = 0; k < points.cols; ++k) {
            const double t = points(a, k) - points(b, k);
            s += t * t;
        }
        return std::sqrt(s);
    };
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (sizes[labels[i]] == 1) continue;
        std::map<int, double> sum;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sum[labels[j]] += dist(i, j);
        const double a = sum[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [label, s] : sum)
            if (label != labels[i]) b = std::min(b, s / static_cast<double>(sizes[label]));
        const double m = std::max(a, b);
        total += m > 0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

void write_embeddings_csv(const EmbeddingMatrix& e, const std::filesystem::path& path) {
    if (e.ids.size() != e.data.rows) throw std::invalid_argument("one id per embedding row required");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "id";
    for (std::size_t c = 0; c < e.data.cols; ++c) out << ",e" << c;
    out << '\n';
    out.precision(17);
    for (std::size_t r = 0; r < e.data.rows; ++r) {
        out << e.ids[r];
        for (std::size_t c = 0; c < e.data.cols; ++c) out << ',' << e.data(r, c);
        out << '\n';
    }
}

EmbeddingMatrix read_embeddings_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
    EmbeddingMatrix e;
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        e.ids.push_back(cell);
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell +
                                         "'");
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
        rows.push_back(std::move(row));
    }
    e.data = Matrix::from_rows(rows);
    return e;
}

void write_tsne_csv(const Matrix& coords, std::span<const std::string> ids, std::span<const std::string> labels,
                    const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "id,x,y,label\n";
    out.precision(10);
    for (std::size_t r = 0; r < coords.rows; ++r)
        out << ids[r] << ',' << coords(r, 0) << ',' << coords(r, 1) << ',' << (r < labels.size() ? labels[r] : "")
            << '\n';
}

void write_tsne_svg(const Matrix& coords, std::span<const std::string> labels,
                    std::span<const std::string> label_order, std::span<const std::string> palette,
                    const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (coords.rows > 0) {
        xmin = xmax = coords(0, 0);
        ymin = ymax = coords(0, 1);
        for (std::size_t r = 0; r < coords.rows; ++r) {
            xmin = std::min(xmin, coords(r, 0));
            xmax = std::max(xmax, coords(r, 0));
            ymin = std::min(ymin, coords(r, 1));
            ymax = std::max(ymax, coords(r, 1));
        }
    }
    const double size = 600, margin = 20, legend = 110;
    const double sx = (size - 2 * margin) / std::max(xmax - xmin, 1e-12);
    const double sy = (size - 2 * margin) / std::max(ymax - ymin, 1e-12);
    auto colour_of = [&](const std::string& l) -> std::string {
        for (std::size_t k = 0; k < label_order.size() && k < palette.size(); ++k)
            if (label_order[k] == l) return palette[k];
        return "#808080";
    };
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + legend << "\" height=\"" << size
        << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out.precision(6);
    for (std::size_t r = 0; r < coords.rows; ++r) {
        const std::string label = r < labels.size() ? labels[r] : "";
        out << "<circle cx=\"" << margin + (coords(r, 0) - xmin) * sx << "\" cy=\""
            << size - margin - (coords(r, 1) - ymin) * sy << "\" r=\"3\" fill=\"" << colour_of(label) << "\"/>\n";
    }
    for (std::size_t k = 0; k < label_order.size() && k < palette.size(); ++k) {
        const double y = margin + 20.0 * static_cast<double>(k);
        out << "<rect x=\"" << size + 10 << "\" y=\"" << y << "\" width=\"12\" height=\"12\" fill=\"" << palette[k]
            << "\"/>\n<text x=\"" << size + 28 << "\" y=\"" << y + 11 << "\" font-size=\"12\">" << label_order[k]
            << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace cellpheno
