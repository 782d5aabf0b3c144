#include <cmath>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/classify.hpp"

using namespace cellpheno;

namespace {

std::vector<CellType> labels_with_counts(const std::array<std::size_t, kNumClasses>& counts) {
    std::vector<CellType> out;
    for (int c = 0; c < kNumClasses; ++c) out.insert(out.end(), counts[c], cell_type_from_index(c));
    Rng(1).shuffle(out.begin(), out.end());
    return out;
}

// Rows are true classes; derived so that per-class precision/recall reproduce the published report.
const ConfusionMatrix kPublishedMatrix{{
    {181, 8, 3, 2, 6},
    {5, 189, 1, 1, 4},
    {36, 10, 145, 2, 7},
    {3, 0, 0, 195, 2},
    {17, 9, 2, 2, 170},
}};

}  // namespace

TEST_CASE("bootstrap balances to the majority class") {
    const auto labels = labels_with_counts({1359, 2577, 478, 1576, 1539});
    const auto idx = bootstrap_indices(labels, 3);
    std::vector<CellType> out;
    for (auto i : idx) out.push_back(labels[i]);
    for (auto n : class_counts(out)) CHECK(n == 2577);
    CHECK(bootstrap_indices(labels, 3) == idx);
    CHECK(bootstrap_indices(labels, 4) != idx);
}

TEST_CASE("bootstrap on balanced input keeps counts") {
    const auto labels = labels_with_counts({10, 10, 10, 10, 10});
    std::vector<CellType> out;
    for (auto i : bootstrap_indices(labels, 5)) out.push_back(labels[i]);
    for (auto n : class_counts(out)) CHECK(n == 10);
}

TEST_CASE("downsample balances to the minority class without replacement") {
    const auto labels = labels_with_counts({1359, 2577, 478, 1576, 1539});
    auto idx = downsample_indices(labels, 3);
    std::vector<CellType> out;
    for (auto i : idx) out.push_back(labels[i]);
    for (auto n : class_counts(out)) CHECK(n == 478);
    std::sort(idx.begin(), idx.end());
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
}

TEST_CASE("balancing rejects an empty class") {
    const auto labels = labels_with_counts({3, 0, 3, 3, 3});
    CHECK_THROWS(bootstrap_indices(labels, 1));
    CHECK_THROWS(downsample_indices(labels, 1));
    CHECK_THROWS(class_weights(labels));
}

TEST_CASE("class weights") {
    for (double w : class_weights(labels_with_counts({7, 7, 7, 7, 7}))) CHECK(w == doctest::Approx(1.0));
    const auto w = class_weights(labels_with_counts({100, 100, 100, 100, 50}));
    CHECK(w[4] == doctest::Approx(450.0 / (5 * 50)));
    CHECK(w[4] == doctest::Approx(1.8));
}

TEST_CASE("balance names") {
    for (auto b : {Balance::Bootstrap, Balance::Downsample, Balance::Weights, Balance::None})
        CHECK(parse_balance(to_string(b)) == b);
    CHECK_THROWS(parse_balance("smote"));
}

TEST_CASE("ensemble takes the global maximum posterior") {
    const std::vector<Posterior> rows{{0.6, 0.1, 0.1, 0.1, 0.1}, {0.025, 0.9, 0.025, 0.025, 0.025}};
    const auto v = ensemble_predict(rows);
    CHECK(v.label == CellType::FIB);
    CHECK(v.confidence == 0.9);
    CHECK(v.member == 1);

    const std::vector<Posterior> same(3, Posterior{0.1, 0.1, 0.5, 0.2, 0.1});
    CHECK(ensemble_predict(same).label == CellType::HOF);
    CHECK(ensemble_predict(same).member == 0);

    const std::vector<Posterior> one{{0.1, 0.2, 0.3, 0.35, 0.05}};
    CHECK(ensemble_predict(one).label == CellType::SYN);

    const std::vector<Posterior> tie{{0.4, 0.4, 0.1, 0.05, 0.05}};
    CHECK(ensemble_predict(tie).label == CellType::CYT);
    CHECK_THROWS(ensemble_predict(std::vector<Posterior>{}));
}

TEST_CASE("ensemble is order invariant away from ties") {
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        std::vector<Posterior> rows(3);
        for (auto& r : rows) {
            double s = 0;
            for (auto& v : r) s += v = rng.uniform(0.01, 1.0);
            for (auto& v : r) v /= s;
        }
        auto rev = rows;
        std::reverse(rev.begin(), rev.end());
        CHECK(ensemble_predict(rows).label == ensemble_predict(rev).label);
        CHECK(ensemble_predict(rows).confidence == ensemble_predict(rev).confidence);
    }
}

TEST_CASE("f measure") {
    CHECK(f_measure(0.748, 0.905) == doctest::Approx(0.819).epsilon(0.001 / 0.819));
    CHECK(f_measure(0.0, 0.0) == 0.0);
}

TEST_CASE("report on the published confusion matrix") {
    const auto r = classification_report(kPublishedMatrix);
    const std::array<double, kNumClasses> p{0.748, 0.875, 0.960, 0.965, 0.899}, rc{0.905, 0.945, 0.725, 0.975, 0.850},
        f{0.819, 0.909, 0.826, 0.970, 0.874};
    for (int c = 0; c < kNumClasses; ++c) {
        CHECK(std::abs(r.per_class[c].precision - p[c]) < 0.0005);
        CHECK(std::abs(r.per_class[c].recall - rc[c]) < 0.0005);
        CHECK(std::abs(r.per_class[c].f_measure - f[c]) < 0.001);
        CHECK(r.per_class[c].support == 200);
    }
    CHECK(std::abs(r.weighted.precision - 0.890) < 0.001);
    CHECK(std::abs(r.weighted.recall - 0.880) < 0.001);
    CHECK(std::abs(r.weighted.f_measure - 0.880) < 0.001);
    CHECK(r.accuracy == doctest::Approx(880.0 / 1000.0));
}

TEST_CASE("perfect diagonal gives unit metrics") {
    ConfusionMatrix cm{};
    for (int c = 0; c < kNumClasses; ++c) cm[c][c] = 10 + c;
    const auto r = classification_report(cm);
    for (const auto& m : r.per_class) {
        CHECK(m.precision == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.f_measure == 1.0);
    }
    CHECK(r.weighted.f_measure == 1.0);
    CHECK(r.accuracy == 1.0);
    CHECK_FALSE(r.zero_division);
}

TEST_CASE("zero denominators report zero") {
    ConfusionMatrix cm{};
    cm[0][0] = 5;
    cm[1][0] = 5;
    const auto r = classification_report(cm);
    CHECK(r.per_class[1].precision == 0.0);
    CHECK(r.per_class[1].f_measure == 0.0);
    CHECK(r.zero_division);
}

TEST_CASE("confusion matrix matches a per-pair count") {
    Rng rng(8);
    std::vector<CellType> truth, pred;
    for (int i = 0; i < 500; ++i) {
        truth.push_back(cell_type_from_index(int(rng.below(5))));
        pred.push_back(cell_type_from_index(int(rng.below(5))));
    }
    const auto cm = confusion_matrix(truth, pred);
    long long trace = 0;
    for (int a = 0; a < kNumClasses; ++a) {
        trace += cm[a][a];
        for (int b = 0; b < kNumClasses; ++b) {
            long long n = 0;
            for (std::size_t i = 0; i < truth.size(); ++i) n += index_of(truth[i]) == a && index_of(pred[i]) == b;
            CHECK(cm[a][b] == n);
        }
    }
    const auto r = classification_report(cm);
    CHECK(r.accuracy == doctest::Approx(double(trace) / 500.0));
    for (const auto& m : r.per_class) {
        CHECK(m.precision >= 0.0);
        CHECK(m.precision <= 1.0);
        CHECK(m.f_measure <= 1.0);
    }
    CHECK_THROWS(confusion_matrix(truth, std::vector<CellType>(3)));
}

TEST_CASE("report rendering") {
    const auto r = classification_report(kPublishedMatrix);
    const auto text = report_to_text(r);
    CHECK(text.find("HOF") != std::string::npos);
    CHECK(text.find("0.826") != std::string::npos);
    const auto j = report_to_json(r, kPublishedMatrix);
    CHECK(j["confusion_matrix"][2][0] == 36);
}

namespace {

std::vector<TrainSample> colour_samples(std::size_t per_class, std::uint64_t seed) {
    const std::array<Rgb, kNumClasses> colours{{{200, 40, 40}, {40, 200, 40}, {40, 40, 200}, {200, 200, 40}, {40, 200, 200}}};
    Rng rng(seed);
    std::vector<TrainSample> out;
    for (int c = 0; c < kNumClasses; ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            Image img(8, 8, {235, 225, 230});
            const int x0 = int(rng.below(4)), y0 = int(rng.below(4));
            for (int y = y0; y < y0 + 4; ++y)
                for (int x = x0; x < x0 + 4; ++x) img.set(x, y, colours[c]);
            out.push_back({img, cell_type_from_index(c)});
        }
    return out;
}

CnnConfig tiny() {
    CnnConfig c;
    c.input_size = 8;
    c.conv1_channels = 4;
    c.conv2_channels = 8;
    c.hidden = 16;
    return c;
}

}  // namespace

TEST_CASE("training with zero learning rate leaves parameters unchanged") {
    const auto data = colour_samples(6, 1);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    cfg.learning_rate = 0.0;
    const TinyCnn init(tiny(), 3);
    const auto r = train(init, data, data, cfg, 4);
    CHECK(r.model == init);
    CHECK(r.best_validation_accuracy == doctest::Approx(accuracy(init, data)));
}

TEST_CASE("training is reproducible and learns an easy task") {
    const auto data = colour_samples(40, 2);
    const auto val = colour_samples(6, 3);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 10;
    cfg.augment = false;
    const TinyCnn init(tiny(), 5);
    const auto a = train(init, data, val, cfg, 6);
    cfg.jobs = 3;
    const auto b = train(init, data, val, cfg, 6);
    CHECK(a.model == b.model);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) CHECK(a.history[e].train_loss == b.history[e].train_loss);
    CHECK(a.best_validation_accuracy >= 0.9);
    CHECK(accuracy(a.model, val) == doctest::Approx(a.best_validation_accuracy));
}

TEST_CASE("training rejects empty sets") {
    const auto data = colour_samples(2, 2);
    CHECK_THROWS(train(TinyCnn(tiny(), 1), {}, data, {}, 1));
    CHECK_THROWS(train(TinyCnn(tiny(), 1), data, {}, {}, 1));
}

TEST_CASE("replay backend reproduces its source") {
    testutil::TempDir dir("replay");
    const CnnBackend cnn(TinyCnn(tiny(), 7), "m");
    std::vector<Image> patches;
    for (std::uint64_t s = 0; s < 5; ++s) patches.push_back(testutil::random_image(20, 20, s));
    const auto rec = ReplayBackend::record(cnn, patches);
    rec.save(dir / "r.replay");
    const auto loaded = load_backend(dir / "r.replay");
    CHECK(loaded->predict_posteriors(patches) == cnn.predict_posteriors(patches));
    CHECK(loaded->embed(patches) == cnn.embed(patches));
    CHECK_THROWS(loaded->predict_posteriors(std::vector<Image>{testutil::random_image(20, 20, 99)}));

    TinyCnn(tiny(), 7).save(dir / "m.cnn");
    CHECK(load_backend(dir / "m.cnn")->predict_posteriors(patches) == cnn.predict_posteriors(patches));
    CHECK_THROWS(load_backend(dir / "absent.cnn"));
}
