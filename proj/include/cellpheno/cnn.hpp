#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cellpheno/cell_type.hpp"
#include "cellpheno/detect.hpp"
#include "cellpheno/image.hpp"

namespace cellpheno {

/// conv3x3(c1)+ReLU -> maxpool2 -> conv3x3(c2)+ReLU -> maxpool2 -> global max pool
/// -> dropout -> dense(hidden)+ReLU -> dropout -> dense(5) -> softmax
struct CnnConfig {
    int input_size = 32;
    int conv1_channels = 8;
    int conv2_channels = 16;
    int hidden = 128;
    double dropout = 0.5;
};

/// Planar CHW input in [-1, 1] (v / 127.5 - 1), 3 x input_size x input_size.
using CnnInput = std::vector<double>;

CnnInput to_cnn_input(const Image& image, int input_size);

enum class Mode { Train, Infer };

enum class LossKind { CrossEntropy, Focal };

struct LossSpec {
    LossKind kind = LossKind::CrossEntropy;
    FocalParams focal{1.0, 2.0};
};

/// Softmax loss for true class y; focal form is -alpha (1 - p_y)^gamma ln p_y.
double classification_loss(const Posterior& probs, int label, const LossSpec& loss);

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

class TinyCnn {
public:
    /// He-normal weights except the output layer (N(0, 0.01)); zero biases.
    TinyCnn(const CnnConfig& config, std::uint64_t init_seed);

    const CnnConfig& config() const { return config_; }
    std::uint64_t init_seed() const { return init_seed_; }
    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    const TensorInfo& tensor(std::string_view name) const;
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t input_length() const { return 3u * config_.input_size * config_.input_size; }

    struct Cache {
        CnnInput input;
        std::vector<double> conv1, pool1, conv2, pool2;  // post-ReLU activations
        std::vector<int> pool1_arg, pool2_arg;
        std::vector<double> global;
        std::vector<int> global_arg;
        std::vector<double> global_mask, hidden_mask;  // dropout multipliers
        std::vector<double> hidden;                   // post-ReLU, pre-dropout
        Posterior probs{};
    };

    /// Dropout masks are drawn from dropout_seed in train mode; infer mode is deterministic.
    Cache forward(const CnnInput& input, Mode mode, std::uint64_t dropout_seed = 0) const;

    /// Accumulates weight * dLoss/dparam into grad, returns the unweighted loss.
    double backward(const Cache& cache, int label, const LossSpec& loss, double weight, std::span<double> grad) const;

    struct BatchGradient {
        double loss = 0.0;  // weighted mean
        std::vector<double> grad;
        std::vector<Posterior> probs;
    };

    /// Mean weighted loss and gradient over a batch. Per-sample work may run on `jobs` threads;
    /// reduction happens in sample order so the result does not depend on jobs.
    BatchGradient loss_and_gradient(std::span<const CnnInput> batch, std::span<const int> labels,
                                    const LossSpec& loss, std::span<const double> class_weights, Mode mode,
                                    std::uint64_t dropout_seed, int jobs = 1) const;

    std::vector<Posterior> predict(std::span<const CnnInput> batch, int jobs = 1) const;
    /// Hidden-layer (post-ReLU) activations in inference mode.
    std::vector<std::vector<double>> embed(std::span<const CnnInput> batch, int jobs = 1) const;

    void check_finite() const;

    void save(const std::filesystem::path& path) const;
    static TinyCnn load(const std::filesystem::path& path);

    friend bool operator==(const TinyCnn& a, const TinyCnn& b) {
        return a.params_ == b.params_ && a.config_.input_size == b.config_.input_size &&
               a.config_.conv1_channels == b.config_.conv1_channels &&
               a.config_.conv2_channels == b.config_.conv2_channels && a.config_.hidden == b.config_.hidden;
    }

private:
    void layout();

    CnnConfig config_;
    std::uint64_t init_seed_ = 0;
    std::vector<TensorInfo> tensors_;
    std::vector<double> params_;
};

}  // namespace cellpheno
