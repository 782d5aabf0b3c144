#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cellpheno/cell_type.hpp"
#include "cellpheno/cnn.hpp"
#include "cellpheno/image.hpp"
#include "cellpheno/stain.hpp"

namespace cellpheno {

struct LabeledPatch {
    Patch patch;
    CellType label = CellType::CYT;
    std::string source_id;
};

std::array<std::size_t, kNumClasses> class_counts(std::span<const CellType> labels);

/// Indices into `labels`, each class resampled with replacement to the majority count.
std::vector<std::size_t> bootstrap_indices(std::span<const CellType> labels, std::uint64_t seed);
/// Indices into `labels`, each class subsampled without replacement to the minority count.
std::vector<std::size_t> downsample_indices(std::span<const CellType> labels, std::uint64_t seed);
/// w_c = N / (5 n_c)
std::array<double, kNumClasses> class_weights(std::span<const CellType> labels);

template <typename T>
std::vector<CellType> labels_of(const std::vector<T>& items) {
    std::vector<CellType> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.label);
    return out;
}

template <typename T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& indices) {
    std::vector<T> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(items[i]);
    return out;
}

template <typename T>
std::vector<T> balance_bootstrap(const std::vector<T>& data, std::uint64_t seed) {
    return select(data, bootstrap_indices(labels_of(data), seed));
}

template <typename T>
std::vector<T> balance_downsample(const std::vector<T>& data, std::uint64_t seed) {
    return select(data, downsample_indices(labels_of(data), seed));
}

enum class Balance { Bootstrap, Downsample, Weights, None };

std::string_view to_string(Balance b);
Balance parse_balance(std::string_view s);

struct TrainSample {
    Image image;  // already at the model's input size
    CellType label = CellType::CYT;
};

struct TrainConfig {
    int epochs = 20;
    int batch_size = 85;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double clip_norm = 1.0;  // global gradient-norm cap per step; 0 disables
    Balance balance = Balance::Bootstrap;
    bool augment = true;
    double max_shear = 0.2;
    StainTransformConfig stain{};
    LossSpec loss{};
    int jobs = 1;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
};

struct TrainResult {
    TinyCnn model;
    std::vector<EpochStats> history;
    int best_epoch = 0;
    double best_validation_accuracy = 0.0;
};

/// Mini-batch SGD with momentum; keeps the parameters of the epoch with the best validation accuracy
/// (earliest epoch on ties).
TrainResult train(const TinyCnn& initial, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& validation_set, const TrainConfig& cfg, std::uint64_t seed,
                  const StainMatrix& stain_matrix = {});

int argmax(const Posterior& p);
double accuracy(const TinyCnn& model, const std::vector<TrainSample>& data, int jobs = 1);

struct EnsembleVote {
    CellType label = CellType::CYT;
    double confidence = 0.0;
    std::size_t member = 0;
};

/// The globally largest posterior over all (member, class) cells decides; ties go to the
/// lower member index, then the lower class index.
EnsembleVote ensemble_predict(std::span<const Posterior> members);

using ConfusionMatrix = std::array<std::array<long long, kNumClasses>, kNumClasses>;  // [true][pred]

ConfusionMatrix confusion_matrix(std::span<const CellType> truth, std::span<const CellType> predicted);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f_measure = 0.0;
    long long support = 0;
};

struct ClassReport {
    std::array<ClassMetrics, kNumClasses> per_class{};
    ClassMetrics weighted{};
    double accuracy = 0.0;
    bool zero_division = false;  // some ratio had a zero denominator and was reported as 0
};

double f_measure(double precision, double recall);
ClassReport classification_report(const ConfusionMatrix& cm);
nlohmann::json report_to_json(const ClassReport& report, const ConfusionMatrix& cm);
std::string report_to_text(const ClassReport& report);

/// Anything that maps patches to posteriors and embeddings.
class ClassifierBackend {
public:
    virtual ~ClassifierBackend() = default;
    virtual std::string name() const = 0;
    virtual std::vector<Posterior> predict_posteriors(std::span<const Image> patches) const = 0;
    virtual std::vector<std::vector<double>> embed(std::span<const Image> patches) const = 0;
};

class CnnBackend final : public ClassifierBackend {
public:
    CnnBackend(TinyCnn model, std::string name, int jobs = 1)
        : model_(std::move(model)), name_(std::move(name)), jobs_(jobs) {}
    std::string name() const override { return name_; }
    std::vector<Posterior> predict_posteriors(std::span<const Image> patches) const override;
    std::vector<std::vector<double>> embed(std::span<const Image> patches) const override;
    const TinyCnn& model() const { return model_; }

private:
    TinyCnn model_;
    std::string name_;
    int jobs_ = 1;
};

/// 64-bit FNV-1a over dimensions and pixel bytes.
std::uint64_t patch_key(const Image& image);

/// Replays precomputed outputs keyed by patch content.
class ReplayBackend final : public ClassifierBackend {
public:
    struct Record {
        Posterior posterior{};
        std::vector<double> embedding;
    };

    ReplayBackend(std::map<std::uint64_t, Record> records, std::size_t embedding_dim, std::string name = "replay");

    /// Captures another backend's outputs for the given patches.
    static ReplayBackend record(const ClassifierBackend& source, std::span<const Image> patches);
    static ReplayBackend load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::string name() const override { return name_; }
    std::vector<Posterior> predict_posteriors(std::span<const Image> patches) const override;
    std::vector<std::vector<double>> embed(std::span<const Image> patches) const override;
    std::size_t size() const { return records_.size(); }

private:
    const Record& lookup(const Image& patch) const;

    std::map<std::uint64_t, Record> records_;
    std::size_t embedding_dim_ = 0;
    std::string name_;
};

/// Loads a TinyCnn model file or a replay file, by magic bytes.
std::unique_ptr<ClassifierBackend> load_backend(const std::filesystem::path& path, int jobs = 1);

}  // namespace cellpheno
