#include "cellpheno/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cellpheno/parallel.hpp"
#include "cellpheno/rng.hpp"

namespace cellpheno {

std::array<std::size_t, kNumClasses> class_counts(std::span<const CellType> labels) {
    std::array<std::size_t, kNumClasses> counts{};
    for (auto l : labels) ++counts[index_of(l)];
    return counts;
}

namespace {

std::array<std::vector<std::size_t>, kNumClasses> members_by_class(std::span<const CellType> labels) {
    std::array<std::vector<std::size_t>, kNumClasses> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[index_of(labels[i])].push_back(i);
    for (int c = 0; c < kNumClasses; ++c)
        if (members[c].empty())
            throw std::invalid_argument("class " + std::string(to_string(cell_type_from_index(c))) +
                                        " has no examples; cannot balance");
    return members;
}

}  // namespace

std::vector<std::size_t> bootstrap_indices(std::span<const CellType> labels, std::uint64_t seed) {
    const auto members = members_by_class(labels);
    std::size_t target = 0;
    for (const auto& m : members) target = std::max(target, m.size());
    Rng rng(seed);
    std::vector<std::size_t> out;
    out.reserve(target * kNumClasses);
    for (const auto& m : members)
        for (std::size_t k = 0; k < target; ++k) out.push_back(m[rng.below(m.size())]);
    return out;
}

std::vector<std::size_t> downsample_indices(std::span<const CellType> labels, std::uint64_t seed) {
    auto members = members_by_class(labels);
    std::size_t target = members[0].size();
    for (const auto& m : members) target = std::min(target, m.size());
    Rng rng(seed);
    std::vector<std::size_t> out;
    out.reserve(target * kNumClasses);
    for (auto& m : members) {
        rng.shuffle(m.begin(), m.end());
        out.insert(out.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(target));
    }
    return out;
}

std::array<double, kNumClasses> class_weights(std::span<const CellType> labels) {
    members_by_class(labels);
    const auto counts = class_counts(labels);
    std::array<double, kNumClasses> w{};
    for (int c = 0; c < kNumClasses; ++c)
        w[c] = static_cast<double>(labels.size()) / (kNumClasses * static_cast<double>(counts[c]));
    return w;
}

std::string_view to_string(Balance b) {
    switch (b) {
        case Balance::Bootstrap: return "bootstrap";
        case Balance::Downsample: return "downsample";
        case Balance::Weights: return "weights";
        case Balance::None: return "none";
    }
    return "none";
}

Balance parse_balance(std::string_view s) {
    for (auto b : {Balance::Bootstrap, Balance::Downsample, Balance::Weights, Balance::None})
        if (to_string(b) == s) return b;
    throw std::invalid_argument("unknown balancing mode '" + std::string(s) + "'");
}

int argmax(const Posterior& p) {
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k)
        if (p[k] > p[best]) best = k;
    return best;
}

double accuracy(const TinyCnn& model, const std::vector<TrainSample>& data, int jobs) {
    if (data.empty()) return 0.0;
    std::vector<CnnInput> inputs(data.size());
    parallel_for(data.size(), jobs,
                 [&](std::size_t i) { inputs[i] = to_cnn_input(data[i].image, model.config().input_size); });
    const auto probs = model.predict(inputs, jobs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += argmax(probs[i]) == index_of(data[i].label);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(const TinyCnn& initial, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& validation_set, const TrainConfig& cfg, std::uint64_t seed,
                  const StainMatrix& stain_matrix) {
    if (train_set.empty() || validation_set.empty())
        throw std::invalid_argument("training needs non-empty training and validation sets");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("epochs and batch size must be positive");
    if (cfg.augment) cfg.stain.validate();

    const auto labels = labels_of(train_set);
    std::vector<std::size_t> pool;
    std::vector<double> weights;
    switch (cfg.balance) {
        case Balance::Bootstrap: pool = bootstrap_indices(labels, derive_seed(seed, 1)); break;
        case Balance::Downsample: pool = downsample_indices(labels, derive_seed(seed, 1)); break;
        case Balance::Weights: {
            const auto w = class_weights(labels);
            weights.assign(w.begin(), w.end());
            [[fallthrough]];
        }
        case Balance::None:
            pool.resize(train_set.size());
            std::iota(pool.begin(), pool.end(), 0);
            break;
    }

    const int input_size = initial.config().input_size;
    TinyCnn model = initial;
    std::vector<double> velocity(model.parameters().size(), 0.0);
    TrainResult result{initial, {}, 0, -1.0};

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::uint64_t epoch_seed = derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order = pool;
        Rng(epoch_seed).shuffle(order.begin(), order.end());

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end - start;
            std::vector<CnnInput> inputs(n);
            std::vector<int> batch_labels(n);
            parallel_for(n, cfg.jobs, [&](std::size_t j) {
                const auto& sample = train_set[order[start + j]];
                batch_labels[j] = index_of(sample.label);
                if (!cfg.augment) {
                    inputs[j] = to_cnn_input(sample.image, input_size);
                    return;
                }
                const std::uint64_t s = derive_seed(epoch_seed, start + j);
                Image img = augment_geometric(sample.image, cfg.max_shear, derive_seed(s, 1));
                img = stain_transform(img, cfg.stain, derive_seed(s, 2), stain_matrix);
                inputs[j] = to_cnn_input(img, input_size);
            });
            auto bg = model.loss_and_gradient(inputs, batch_labels, cfg.loss, weights, Mode::Train,
                                              derive_seed(epoch_seed, 1'000'000 + start), cfg.jobs);
            if (!std::isfinite(bg.loss))
                throw std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            double scale = 1.0;
            if (cfg.clip_norm > 0) {
                double norm2 = 0.0;
                for (double g : bg.grad) norm2 += g * g;
                if (norm2 > cfg.clip_norm * cfg.clip_norm) scale = cfg.clip_norm / std::sqrt(norm2);
            }
            auto params = model.parameters();
            for (std::size_t k = 0; k < params.size(); ++k) {
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * scale * bg.grad[k];
                params[k] += velocity[k];
            }
            loss_sum += bg.loss * static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) correct += argmax(bg.probs[j]) == batch_labels[j];
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(order.size());
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        stats.validation_accuracy = accuracy(model, validation_set, cfg.jobs);
        result.history.push_back(stats);
        if (stats.validation_accuracy > result.best_validation_accuracy) {
            result.best_validation_accuracy = stats.validation_accuracy;
            result.best_epoch = epoch;
            result.model = model;
        }
    }
    return result;
}

EnsembleVote ensemble_predict(std::span<const Posterior> members) {
    if (members.empty()) throw std::invalid_argument("ensemble needs at least one member");
    EnsembleVote vote{CellType::CYT, -1.0, 0};
    for (std::size_t m = 0; m < members.size(); ++m)
        for (int k = 0; k < kNumClasses; ++k)
            if (members[m][k] > vote.confidence) vote = {cell_type_from_index(k), members[m][k], m};
    return vote;
}

ConfusionMatrix confusion_matrix(std::span<const CellType> truth, std::span<const CellType> predicted) {
    if (truth.size() != predicted.size()) throw std::invalid_argument("truth and prediction counts differ");
    ConfusionMatrix cm{};
    for (std::size_t i = 0; i < truth.size(); ++i) ++cm[index_of(truth[i])][index_of(predicted[i])];
    return cm;
}

double f_measure(double precision, double recall) {
    return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

ClassReport classification_report(const ConfusionMatrix& cm) {
    ClassReport r;
    long long total = 0, trace = 0;
    for (int t = 0; t < kNumClasses; ++t)
        for (int p = 0; p < kNumClasses; ++p) {
            if (cm[t][p] < 0) throw std::invalid_argument("confusion matrix has negative counts");
            total += cm[t][p];
            if (t == p) trace += cm[t][p];
        }
    for (int c = 0; c < kNumClasses; ++c) {
        long long row = 0, col = 0;
        for (int k = 0; k < kNumClasses; ++k) {
            row += cm[c][k];
            col += cm[k][c];
        }
        auto& m = r.per_class[c];
        const double tp = static_cast<double>(cm[c][c]);
        m.support = row;
        if (col > 0) m.precision = tp / static_cast<double>(col);
        else r.zero_division = true;
        if (row > 0) m.recall = tp / static_cast<double>(row);
        else r.zero_division = true;
        m.f_measure = f_measure(m.precision, m.recall);
    }
    if (total > 0) {
        for (const auto& m : r.per_class) {
            const double w = static_cast<double>(m.support) / static_cast<double>(total);
            r.weighted.precision += w * m.precision;
            r.weighted.recall += w * m.recall;
            r.weighted.f_measure += w * m.f_measure;
        }
        r.weighted.support = total;
        r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
    } else {
        r.zero_division = true;
    }
    return r;
}

nlohmann::json report_to_json(const ClassReport& report, const ConfusionMatrix& cm) {
    nlohmann::json j;
    auto classes = nlohmann::json::object();
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& m = report.per_class[c];
        classes[std::string(to_string(cell_type_from_index(c)))] = {
            {"precision", m.precision}, {"recall", m.recall}, {"f_measure", m.f_measure}, {"support", m.support}};
    }
    j["classes"] = classes;
    j["weighted_average"] = {{"precision", report.weighted.precision},
                             {"recall", report.weighted.recall},
                             {"f_measure", report.weighted.f_measure},
                             {"support", report.weighted.support}};
    j["accuracy"] = report.accuracy;
    j["zero_division"] = report.zero_division;
    auto rows = nlohmann::json::array();
    for (const auto& row : cm) rows.push_back(row);
    j["confusion_matrix"] = rows;
    return j;
}

std::string report_to_text(const ClassReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(10) << "class" << std::right << std::setw(11) << "precision" << std::setw(9)
       << "recall" << std::setw(11) << "F measure" << std::setw(9) << "support" << '\n';
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& m = report.per_class[c];
        os << std::left << std::setw(10) << to_string(cell_type_from_index(c)) << std::right << std::setw(11)
           << m.precision << std::setw(9) << m.recall << std::setw(11) << m.f_measure << std::setw(9) << m.support
           << '\n';
    }
    os << std::left << std::setw(10) << "average" << std::right << std::setw(11) << report.weighted.precision
       << std::setw(9) << report.weighted.recall << std::setw(11) << report.weighted.f_measure << std::setw(9)
       << report.weighted.support << '\n';
    os << "accuracy " << report.accuracy << '\n';
    if (report.zero_division) os << "warning: some metrics had a zero denominator and were set to 0\n";
    return os.str();
}

std::vector<Posterior> CnnBackend::predict_posteriors(std::span<const Image> patches) const {
    std::vector<CnnInput> inputs(patches.size());
    parallel_for(patches.size(), jobs_,
                 [&](std::size_t i) { inputs[i] = to_cnn_input(patches[i], model_.config().input_size); });
    return model_.predict(inputs, jobs_);
}

std::vector<std::vector<double>> CnnBackend::embed(std::span<const Image> patches) const {
    std::vector<CnnInput> inputs(patches.size());
    parallel_for(patches.size(), jobs_,
                 [&](std::size_t i) { inputs[i] = to_cnn_input(patches[i], model_.config().input_size); });
    return model_.embed(inputs, jobs_);
}

std::uint64_t patch_key(const Image& image) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](std::uint8_t b) {
        h ^= b;
        h *= 0x100000001b3ULL;
    };
    for (int v : {image.width(), image.height()})
        for (int k = 0; k < 4; ++k) feed(static_cast<std::uint8_t>(v >> (8 * k)));
    for (auto b : image.bytes()) feed(b);
    return h;
}

ReplayBackend::ReplayBackend(std::map<std::uint64_t, Record> records, std::size_t embedding_dim, std::string name)
    : records_(std::move(records)), embedding_dim_(embedding_dim), name_(std::move(name)) {
    for (const auto& [key, rec] : records_)
        if (rec.embedding.size() != embedding_dim_)
            throw std::invalid_argument("replay record embedding has the wrong dimension");
}

ReplayBackend ReplayBackend::record(const ClassifierBackend& source, std::span<const Image> patches) {
    const auto post = source.predict_posteriors(patches);
    auto emb = source.embed(patches);
    std::map<std::uint64_t, Record> records;
    const std::size_t dim = emb.empty() ? 0 : emb.front().size();
    for (std::size_t i = 0; i < patches.size(); ++i) records[patch_key(patches[i])] = {post[i], std::move(emb[i])};
    return ReplayBackend(std::move(records), dim, "replay:" + source.name());
}

const ReplayBackend::Record& ReplayBackend::lookup(const Image& patch) const {
    const auto it = records_.find(patch_key(patch));
    if (it == records_.end()) throw std::out_of_range("replay backend has no record for this patch");
    return it->second;
}

std::vector<Posterior> ReplayBackend::predict_posteriors(std::span<const Image> patches) const {
    std::vector<Posterior> out;
    out.reserve(patches.size());
    for (const auto& p : patches) out.push_back(lookup(p).posterior);
    return out;
}

std::vector<std::vector<double>> ReplayBackend::embed(std::span<const Image> patches) const {
    std::vector<std::vector<double>> out;
    out.reserve(patches.size());
    for (const auto& p : patches) out.push_back(lookup(p).embedding);
    return out;
}

namespace {
constexpr char kReplayMagic[8] = {'C', 'E', 'L', 'L', 'R', 'P', 'L', 'Y'};
constexpr char kModelMagic[8] = {'C', 'E', 'L', 'L', 'C', 'N', 'N', '\0'};
constexpr std::uint32_t kReplayVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_raw(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
}  // namespace

void ReplayBackend::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write replay file " + path.string());
    out.write(kReplayMagic, sizeof kReplayMagic);
    write_raw(out, kReplayVersion);
    write_raw(out, static_cast<std::uint64_t>(records_.size()));
    write_raw(out, static_cast<std::uint32_t>(embedding_dim_));
    for (const auto& [key, rec] : records_) {
        write_raw(out, key);
        for (double v : rec.posterior) write_raw(out, v);
        for (double v : rec.embedding) write_raw(out, v);
    }
    if (!out) throw std::runtime_error("failed writing replay file " + path.string());
}

ReplayBackend ReplayBackend::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open replay file " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kReplayMagic, sizeof magic) != 0)
        throw std::runtime_error(path.string() + " is not a replay file");
    if (read_raw<std::uint32_t>(in) != kReplayVersion) throw std::runtime_error("unsupported replay file version");
    const auto count = read_raw<std::uint64_t>(in);
    const auto dim = read_raw<std::uint32_t>(in);
    std::map<std::uint64_t, Record> records;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto key = read_raw<std::uint64_t>(in);
        Record rec;
        for (auto& v : rec.posterior) v = read_raw<double>(in);
        rec.embedding.resize(dim);
        for (auto& v : rec.embedding) v = read_raw<double>(in);
        records.emplace(key, std::move(rec));
    }
    if (!in) throw std::runtime_error("truncated replay file " + path.string());
    return ReplayBackend(std::move(records), dim, "replay:" + path.filename().string());
}

std::unique_ptr<ClassifierBackend> load_backend(const std::filesystem::path& path, int jobs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open classifier backend " + path.string());
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (std::memcmp(magic, kModelMagic, sizeof magic) == 0)
        return std::make_unique<CnnBackend>(TinyCnn::load(path), path.filename().string(), jobs);
    if (std::memcmp(magic, kReplayMagic, sizeof magic) == 0)
        return std::make_unique<ReplayBackend>(ReplayBackend::load(path));
    throw std::runtime_error(path.string() + " is neither a model nor a replay file");
}

}  // namespace cellpheno
