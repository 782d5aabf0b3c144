#include "cellpheno/cnn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cellpheno/parallel.hpp"
#include "cellpheno/rng.hpp"

namespace cellpheno {

static_assert(std::endian::native == std::endian::little, "model files are written in host (little-endian) order");

CnnInput to_cnn_input(const Image& image, int input_size) {
    const Image small = resize_bilinear(image, input_size, input_size);
    const std::size_t plane = static_cast<std::size_t>(input_size) * input_size;
    CnnInput out(3 * plane);
    for (int y = 0; y < input_size; ++y)
        for (int x = 0; x < input_size; ++x)
            for (int c = 0; c < 3; ++c)
                out[c * plane + static_cast<std::size_t>(y) * input_size + x] = small.pixel(x, y)[c] / 127.5 - 1.0;
    return out;
}

namespace {

constexpr double kMinProb = 1e-12;
constexpr double kOutputInitStd = 0.01;

void conv3x3_forward(const double* in, int in_c, int size, const double* w, const double* b, int out_c, double* out) {
    const int n = size * size;
    for (int o = 0; o < out_c; ++o) {
        double* dst = out + static_cast<std::size_t>(o) * n;
        std::fill(dst, dst + n, b[o]);
        for (int i = 0; i < in_c; ++i) {
            const double* src = in + static_cast<std::size_t>(i) * n;
            const double* k = w + (static_cast<std::size_t>(o) * in_c + i) * 9;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = k[ky * 3 + kx];
                    const int dy = ky - 1, dx = kx - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(size, size - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(size, size - dx);
                    for (int y = y0; y < y1; ++y) {
                        const double* s = src + (y + dy) * size + dx;
                        double* d = dst + y * size;
                        for (int x = x0; x < x1; ++x) d[x] += wv * s[x];
                    }
                }
        }
    }
}

// d_out is the gradient w.r.t. the pre-activation output; d_in may be null.
void conv3x3_backward(const double* in, int in_c, int size, const double* w, int out_c, const double* d_out,
                      double* d_w, double* d_b, double* d_in) {
    const int n = size * size;
    for (int o = 0; o < out_c; ++o) {
        const double* g = d_out + static_cast<std::size_t>(o) * n;
        double gb = 0.0;
        for (int p = 0; p < n; ++p) gb += g[p];
        d_b[o] += gb;
        for (int i = 0; i < in_c; ++i) {
            const double* src = in + static_cast<std::size_t>(i) * n;
            const double* k = w + (static_cast<std::size_t>(o) * in_c + i) * 9;
            double* dk = d_w + (static_cast<std::size_t>(o) * in_c + i) * 9;
            double* di = d_in ? d_in + static_cast<std::size_t>(i) * n : nullptr;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int dy = ky - 1, dx = kx - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(size, size - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(size, size - dx);
                    const double wv = k[ky * 3 + kx];
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const double* s = src + (y + dy) * size + dx;
                        const double* gg = g + y * size;
                        for (int x = x0; x < x1; ++x) acc += gg[x] * s[x];
                        if (di) {
                            double* dd = di + (y + dy) * size + dx;
                            for (int x = x0; x < x1; ++x) dd[x] += wv * gg[x];
                        }
                    }
                    dk[ky * 3 + kx] += acc;
                }
        }
    }
}

void maxpool2_forward(const double* in, int channels, int size, double* out, int* arg) {
    const int half = size / 2;
    for (int c = 0; c < channels; ++c) {
        const double* src = in + static_cast<std::size_t>(c) * size * size;
        for (int y = 0; y < half; ++y)
            for (int x = 0; x < half; ++x) {
                int best = (2 * y) * size + 2 * x;
                for (int k = 1; k < 4; ++k) {
                    const int idx = (2 * y + k / 2) * size + 2 * x + k % 2;
                    if (src[idx] > src[best]) best = idx;
                }
                const std::size_t o = static_cast<std::size_t>(c) * half * half + y * half + x;
                out[o] = src[best];
                arg[o] = static_cast<int>(static_cast<std::size_t>(c) * size * size + best);
            }
    }
}

void relu_inplace(std::vector<double>& v) {
    for (auto& x : v) x = x > 0 ? x : 0.0;
}

Posterior softmax(const std::vector<double>& logits) {
    Posterior p{};
    double mx = logits[0];
    for (int k = 1; k < kNumClasses; ++k) mx = std::max(mx, logits[k]);
    double sum = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
        p[k] = std::exp(logits[k] - mx);
        sum += p[k];
    }
    for (auto& v : p) v /= sum;
    return p;
}

// dLoss/dlogit_k = factor * (delta_ky - p_k)
double loss_logit_factor(double py, const LossSpec& loss) {
    if (loss.kind == LossKind::CrossEntropy) return -1.0;
    const double p = std::clamp(py, kMinProb, 1.0 - kMinProb);
    const double a = loss.focal.alpha, g = loss.focal.gamma;
    const double first = g == 0.0 ? 0.0 : g * std::pow(1.0 - p, g - 1.0) * p * std::log(p);
    return a * (first - std::pow(1.0 - p, g));
}

}  // namespace

double classification_loss(const Posterior& probs, int label, const LossSpec& loss) {
    const double p = std::clamp(probs[label], kMinProb, 1.0);
    if (loss.kind == LossKind::CrossEntropy) return -std::log(p);
    return -loss.focal.alpha * std::pow(1.0 - p, loss.focal.gamma) * std::log(p);
}

TinyCnn::TinyCnn(const CnnConfig& config, std::uint64_t init_seed) : config_(config), init_seed_(init_seed) {
    layout();
    Rng rng(init_seed);
    for (const auto& t : tensors_) {
        if (t.shape.size() == 1) continue;  // biases stay zero
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= static_cast<std::size_t>(t.shape[d]);
        // small output head keeps the initial softmax near uniform
        const double stddev = t.name == "dense2.weight" ? kOutputInitStd : std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < t.size; ++i) params_[t.offset + i] = rng.normal(0.0, stddev);
    }
}

void TinyCnn::layout() {
    const auto& c = config_;
    if (c.input_size < 4 || c.input_size % 4 != 0) throw std::invalid_argument("CNN input size must be a multiple of 4");
    if (c.conv1_channels < 1 || c.conv2_channels < 1 || c.hidden < 1)
        throw std::invalid_argument("CNN layer widths must be positive");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw std::invalid_argument("dropout rate must be in [0, 1)");
    tensors_.clear();
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<int> shape) {
        std::size_t size = 1;
        for (int d : shape) size *= static_cast<std::size_t>(d);
        tensors_.push_back({std::move(name), std::move(shape), offset, size});
        offset += size;
    };
    add("conv1.weight", {c.conv1_channels, 3, 3, 3});
    add("conv1.bias", {c.conv1_channels});
    add("conv2.weight", {c.conv2_channels, c.conv1_channels, 3, 3});
    add("conv2.bias", {c.conv2_channels});
    add("dense1.weight", {c.hidden, c.conv2_channels});
    add("dense1.bias", {c.hidden});
    add("dense2.weight", {kNumClasses, c.hidden});
    add("dense2.bias", {kNumClasses});
    params_.assign(offset, 0.0);
}

const TensorInfo& TinyCnn::tensor(std::string_view name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw std::out_of_range("no tensor named " + std::string(name));
}

void TinyCnn::check_finite() const {
    for (const auto& t : tensors_)
        for (std::size_t i = 0; i < t.size; ++i)
            if (!std::isfinite(params_[t.offset + i]))
                throw std::runtime_error("non-finite parameter in " + t.name + "[" + std::to_string(i) + "]");
}

TinyCnn::Cache TinyCnn::forward(const CnnInput& input, Mode mode, std::uint64_t dropout_seed) const {
    if (input.size() != input_length())
        throw std::invalid_argument("CNN input has " + std::to_string(input.size()) + " values, expected " +
                                    std::to_string(input_length()));
    const int s0 = config_.input_size, s1 = s0 / 2, s2 = s0 / 4;
    const int c1 = config_.conv1_channels, c2 = config_.conv2_channels, hid = config_.hidden;
    const double* p = params_.data();
    const double* w1 = p + tensors_[0].offset;
    const double* b1 = p + tensors_[1].offset;
    const double* w2 = p + tensors_[2].offset;
    const double* b2 = p + tensors_[3].offset;
    const double* wd1 = p + tensors_[4].offset;
    const double* bd1 = p + tensors_[5].offset;
    const double* wd2 = p + tensors_[6].offset;
    const double* bd2 = p + tensors_[7].offset;

    Cache c;
    c.input = input;
    c.conv1.resize(static_cast<std::size_t>(c1) * s0 * s0);
    conv3x3_forward(input.data(), 3, s0, w1, b1, c1, c.conv1.data());
    relu_inplace(c.conv1);
    c.pool1.resize(static_cast<std::size_t>(c1) * s1 * s1);
    c.pool1_arg.resize(c.pool1.size());
    maxpool2_forward(c.conv1.data(), c1, s0, c.pool1.data(), c.pool1_arg.data());

    c.conv2.resize(static_cast<std::size_t>(c2) * s1 * s1);
    conv3x3_forward(c.pool1.data(), c1, s1, w2, b2, c2, c.conv2.data());
    relu_inplace(c.conv2);
    c.pool2.resize(static_cast<std::size_t>(c2) * s2 * s2);
    c.pool2_arg.resize(c.pool2.size());
    maxpool2_forward(c.conv2.data(), c2, s1, c.pool2.data(), c.pool2_arg.data());

    c.global.resize(c2);
    c.global_arg.resize(c2);
    const int n2 = s2 * s2;
    for (int ch = 0; ch < c2; ++ch) {
        int best = ch * n2;
        for (int k = 1; k < n2; ++k)
            if (c.pool2[ch * n2 + k] > c.pool2[best]) best = ch * n2 + k;
        c.global[ch] = c.pool2[best];
        c.global_arg[ch] = best;
    }

    // inverted dropout: train-time activations are rescaled so inference needs no scaling
    c.global_mask.assign(c2, 1.0);
    c.hidden_mask.assign(hid, 1.0);
    if (mode == Mode::Train && config_.dropout > 0.0) {
        Rng rng(dropout_seed);
        const double keep = 1.0 - config_.dropout;
        for (auto& m : c.global_mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
        for (auto& m : c.hidden_mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }

    c.hidden.resize(hid);
    for (int h = 0; h < hid; ++h) {
        double acc = bd1[h];
        for (int k = 0; k < c2; ++k) acc += wd1[h * c2 + k] * c.global[k] * c.global_mask[k];
        c.hidden[h] = acc > 0 ? acc : 0.0;
    }
    std::vector<double> logits(kNumClasses);
    for (int k = 0; k < kNumClasses; ++k) {
        double acc = bd2[k];
        for (int h = 0; h < hid; ++h) acc += wd2[k * hid + h] * c.hidden[h] * c.hidden_mask[h];
        logits[k] = acc;
    }
    c.probs = softmax(logits);
    return c;
}

double TinyCnn::backward(const Cache& c, int label, const LossSpec& loss, double weight, std::span<double> grad) const {
    if (grad.size() != params_.size()) throw std::invalid_argument("gradient buffer has wrong size");
    if (label < 0 || label >= kNumClasses) throw std::invalid_argument("label out of range");
    if (c.input.size() != input_length() || c.hidden.size() != static_cast<std::size_t>(config_.hidden))
        throw std::invalid_argument("forward cache does not match model shape");
    const int s0 = config_.input_size, s1 = s0 / 2;
    const int c1 = config_.conv1_channels, c2 = config_.conv2_channels, hid = config_.hidden;
    const double* p = params_.data();
    double* g = grad.data();
    const auto& T = tensors_;

    const double factor = loss_logit_factor(c.probs[label], loss) * weight;
    std::array<double, kNumClasses> d_logits{};
    for (int k = 0; k < kNumClasses; ++k) d_logits[k] = factor * ((k == label ? 1.0 : 0.0) - c.probs[k]);

    // dense2
    const double* wd2 = p + T[6].offset;
    std::vector<double> d_hidden(hid, 0.0);
    for (int k = 0; k < kNumClasses; ++k) {
        g[T[7].offset + k] += d_logits[k];
        for (int h = 0; h < hid; ++h) {
            g[T[6].offset + k * hid + h] += d_logits[k] * c.hidden[h] * c.hidden_mask[h];
            d_hidden[h] += d_logits[k] * wd2[k * hid + h];
        }
    }
    // dropout + ReLU
    for (int h = 0; h < hid; ++h) d_hidden[h] = c.hidden[h] > 0 ? d_hidden[h] * c.hidden_mask[h] : 0.0;

    // dense1
    const double* wd1 = p + T[4].offset;
    std::vector<double> d_global(c2, 0.0);
    for (int h = 0; h < hid; ++h) {
        if (d_hidden[h] == 0.0) continue;
        g[T[5].offset + h] += d_hidden[h];
        for (int k = 0; k < c2; ++k) {
            g[T[4].offset + h * c2 + k] += d_hidden[h] * c.global[k] * c.global_mask[k];
            d_global[k] += d_hidden[h] * wd1[h * c2 + k];
        }
    }

    // global max -> pool2 -> conv2 (post-ReLU)
    std::vector<double> d_conv2(c.conv2.size(), 0.0);
    for (int k = 0; k < c2; ++k) {
        const double gk = d_global[k] * c.global_mask[k];
        const int pool_idx = c.global_arg[k];
        const int conv_idx = c.pool2_arg[pool_idx];
        if (c.conv2[conv_idx] > 0) d_conv2[conv_idx] += gk;
    }
    std::vector<double> d_pool1(c.pool1.size(), 0.0);
    conv3x3_backward(c.pool1.data(), c1, s1, p + T[2].offset, c2, d_conv2.data(), g + T[2].offset, g + T[3].offset,
                     d_pool1.data());

    std::vector<double> d_conv1(c.conv1.size(), 0.0);
    for (std::size_t i = 0; i < d_pool1.size(); ++i) {
        const int idx = c.pool1_arg[i];
        if (c.conv1[idx] > 0) d_conv1[idx] += d_pool1[i];
    }
    conv3x3_backward(c.input.data(), 3, s0, p + T[0].offset, c1, d_conv1.data(), g + T[0].offset, g + T[1].offset,
                     nullptr);
    return classification_loss(c.probs, label, loss);
}

TinyCnn::BatchGradient TinyCnn::loss_and_gradient(std::span<const CnnInput> batch, std::span<const int> labels,
                                                  const LossSpec& loss, std::span<const double> class_weights,
                                                  Mode mode, std::uint64_t dropout_seed, int jobs) const {
    if (batch.size() != labels.size()) throw std::invalid_argument("batch and label counts differ");
    if (batch.empty()) throw std::invalid_argument("empty batch");
    if (!class_weights.empty() && class_weights.size() != kNumClasses)
        throw std::invalid_argument("class weights must have 5 entries");
    const std::size_t n = batch.size();
    std::vector<std::vector<double>> per_sample(n);
    std::vector<double> losses(n);
    std::vector<Posterior> probs(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        const auto cache = forward(batch[i], mode, derive_seed(dropout_seed, i));
        const double w = class_weights.empty() ? 1.0 : class_weights[labels[i]];
        per_sample[i].assign(params_.size(), 0.0);
        losses[i] = w * backward(cache, labels[i], loss, w, per_sample[i]);
        probs[i] = cache.probs;
    });
    BatchGradient out;
    out.grad.assign(params_.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        out.loss += losses[i];
        for (std::size_t k = 0; k < params_.size(); ++k) out.grad[k] += per_sample[i][k];
    }
    const double inv = 1.0 / static_cast<double>(n);
    out.loss *= inv;
    for (auto& v : out.grad) v *= inv;
    out.probs = std::move(probs);
    return out;
}

std::vector<Posterior> TinyCnn::predict(std::span<const CnnInput> batch, int jobs) const {
    check_finite();
    std::vector<Posterior> out(batch.size());
    parallel_for(batch.size(), jobs, [&](std::size_t i) { out[i] = forward(batch[i], Mode::Infer).probs; });
    return out;
}

std::vector<std::vector<double>> TinyCnn::embed(std::span<const CnnInput> batch, int jobs) const {
    check_finite();
    std::vector<std::vector<double>> out(batch.size());
    parallel_for(batch.size(), jobs, [&](std::size_t i) { out[i] = forward(batch[i], Mode::Infer).hidden; });
    return out;
}

namespace {
constexpr char kMagic[8] = {'C', 'E', 'L', 'L', 'C', 'N', 'N', '\0'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

void TinyCnn::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["seed"] = init_seed_;
    header["config"] = {{"input_size", config_.input_size},
                        {"conv1_channels", config_.conv1_channels},
                        {"conv2_channels", config_.conv2_channels},
                        {"hidden", config_.hidden},
                        {"dropout", config_.dropout}};
    auto shapes = nlohmann::json::array();
    for (const auto& t : tensors_) shapes.push_back({{"name", t.name}, {"shape", t.shape}});
    header["tensors"] = shapes;
    header["parameter_count"] = params_.size();
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write model " + path.string());
    const std::uint32_t version = kFormatVersion;
    const auto header_len = static_cast<std::uint32_t>(text.size());
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(params_.data()), static_cast<std::streamsize>(params_.size() * 8));
    if (!out) throw std::runtime_error("failed writing model " + path.string());
}

TinyCnn TinyCnn::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model " + path.string());
    char magic[8];
    std::uint32_t version = 0, header_len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error(path.string() + " is not a cellpheno model file");
    if (version != kFormatVersion)
        throw std::runtime_error("unsupported model format version " + std::to_string(version));
    std::string text(header_len, '\0');
    in.read(text.data(), header_len);
    const auto header = nlohmann::json::parse(text);
    CnnConfig cfg;
    const auto& jc = header.at("config");
    cfg.input_size = jc.at("input_size");
    cfg.conv1_channels = jc.at("conv1_channels");
    cfg.conv2_channels = jc.at("conv2_channels");
    cfg.hidden = jc.at("hidden");
    cfg.dropout = jc.at("dropout");
    TinyCnn model(cfg, header.at("seed").get<std::uint64_t>());
    if (header.at("parameter_count").get<std::size_t>() != model.params_.size())
        throw std::runtime_error("model parameter count does not match its declared shapes");
    in.read(reinterpret_cast<char*>(model.params_.data()), static_cast<std::streamsize>(model.params_.size() * 8));
    if (!in) throw std::runtime_error("truncated model file " + path.string());
    return model;
}

}  // namespace cellpheno
