#include <doctest.h>

#include <cmath>
#include <map>

#include "cacao/error.hpp"
#include "cacao/trainer.hpp"
#include "support.hpp"

using namespace cacao;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Internal;
}

// Two linearly separable classes: bright vs dark 8x8 images with noise.
SampleSet separable(std::size_t per_class, std::uint64_t seed) {
    SampleSet out;
    for (std::size_t i = 0; i < per_class; ++i)
        for (std::size_t c = 0; c < 2; ++c) {
            Tensor img = testing::random_tensor({3, 8, 8}, seed * 1000 + i * 2 + c, 0.0f, 0.3f);
            if (c == 0) img = add_scalar(img, 0.6f);
            out.push_back(Sample{img, c});
        }
    return out;
}

ImageRecord rec(const std::string& path, const std::string& label, Split split = Split::Train) {
    ImageRecord r;
    r.path = path;
    r.label = label;
    r.split = split;
    return r;
}

std::map<std::string, std::size_t> count_labels(const DatasetManifest& m) {
    std::map<std::string, std::size_t> c;
    for (const auto& r : m.entries)
        if (r.accepted()) ++c[r.label];
    return c;
}

}  // namespace

TEST_CASE("cross_entropy") {
    CHECK(cross_entropy(Tensor::vector({0, 1, 0}), 1) == 0.0);
    CHECK(cross_entropy(Tensor::vector({1.f / 3, 1.f / 3, 1.f / 3}), 2) == doctest::Approx(1.0986).epsilon(1e-4));
    const double clamped = cross_entropy(Tensor::vector({1, 0}), 1);
    CHECK(std::isfinite(clamped));
    CHECK(clamped <= -std::log(1e-12) + 1e-9);
    CHECK(code_of([] { cross_entropy(Tensor::vector({0.5f, 0.5f}), 2); }) == ErrorCode::InvalidLabel);
}

TEST_CASE("augment") {
    const Tensor img = testing::random_tensor({3, 6, 6}, 1, 0, 1);
    SUBCASE("no flags gives the original only") {
        const auto v = augment(img, AugmentFlags{}, 5);
        REQUIRE(v.size() == 1);
        CHECK(v[0].bit_equal(img));
    }
    SUBCASE("hflip") {
        const Tensor x({1, 2, 2}, {1, 2, 3, 4});
        CHECK(hflip(x).values() == std::vector<float>{2, 1, 4, 3});
        CHECK(hflip(hflip(img)).bit_equal(img));
    }
    SUBCASE("all flags, original first, deterministic per seed") {
        const auto a = augment(img, AugmentFlags::all(), 9);
        const auto b = augment(img, AugmentFlags::all(), 9);
        REQUIRE(a.size() == 4);
        CHECK(a[0].bit_equal(img));
        CHECK(a[1].bit_equal(hflip(img)));
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].bit_equal(b[i]));
            CHECK(a[i].shape() == img.shape());
        }
        for (float v : a[3].values()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    SUBCASE("brightness scales and clamps") {
        const Tensor x({3, 1, 1}, {0.5f, 0.9f, 0.1f});
        const Tensor up = scale_brightness(x, 1.2f);
        CHECK(up[0] == doctest::Approx(0.6f));
        CHECK(up[1] == 1.0f);
        CHECK(scale_brightness(x, 0.8f)[2] == doctest::Approx(0.08f));
    }
    SUBCASE("rotation") {
        CHECK(rotate(img, 0.0).bit_equal(img));
        const Tensor flat({3, 5, 5}, 0.4f);
        const Tensor turned = rotate(flat, 15.0);
        for (float v : turned.values()) CHECK(v == doctest::Approx(0.4f));
        CHECK_FALSE(rotate(img, 15.0).bit_equal(img));
    }
    SUBCASE("flag text") {
        CHECK(AugmentFlags::parse("hflip,brightness20") == AugmentFlags{true, false, true});
        CHECK(AugmentFlags::parse("none").empty());
        CHECK(AugmentFlags::parse(AugmentFlags::all().to_string()) == AugmentFlags::all());
        CHECK(code_of([] { AugmentFlags::parse("sharpen"); }) == ErrorCode::InvalidArgument);
    }
}

TEST_CASE("rebalance") {
    SUBCASE("{A:4, B:2} -> {A:4, B:4}") {
        DatasetManifest m;
        for (int i = 0; i < 4; ++i) m.entries.push_back(rec("a" + std::to_string(i) + ".png", "A"));
        for (int i = 0; i < 2; ++i) m.entries.push_back(rec("b" + std::to_string(i) + ".png", "B"));
        const DatasetManifest out = rebalance(m, {"A", "B"}, 7);
        CHECK(count_labels(out) == std::map<std::string, std::size_t>{{"A", 4}, {"B", 4}});
        for (const auto& r : m.entries) CHECK(std::find(out.entries.begin(), out.entries.end(), r) != out.entries.end());
        std::size_t dups = 0;
        for (const auto& r : out.entries) dups += r.augment != 0;
        CHECK(dups == 2);
        CHECK(rebalance(m, {"A", "B"}, 7) == out);
    }
    SUBCASE("uneven cycling") {
        DatasetManifest m;
        for (int i = 0; i < 7; ++i) m.entries.push_back(rec("a" + std::to_string(i) + ".png", "A"));
        for (int i = 0; i < 3; ++i) m.entries.push_back(rec("b" + std::to_string(i) + ".png", "B"));
        m.entries.push_back(rec("c0.png", "C"));
        const auto counts = count_labels(rebalance(m, {"A", "B", "C"}, 1));
        CHECK(counts.at("A") == 7);
        CHECK(counts.at("B") == 7);
        CHECK(counts.at("C") == 7);
    }
    SUBCASE("balanced set is unchanged") {
        DatasetManifest m;
        m.entries = {rec("a.png", "A"), rec("b.png", "B")};
        CHECK(rebalance(m, {"A", "B"}, 3) == m);
    }
    SUBCASE("empty class") {
        DatasetManifest m;
        m.entries = {rec("a.png", "A")};
        CHECK(code_of([&] { rebalance(m, {"A", "B"}, 3); }) == ErrorCode::EmptyClass);
    }
    SUBCASE("test records are left alone") {
        DatasetManifest m;
        m.entries = {rec("a.png", "A"), rec("a2.png", "A"), rec("b.png", "B"), rec("t.png", "B", Split::Test)};
        const auto out = rebalance(m, {"A", "B"}, 3);
        std::size_t tests = 0;
        for (const auto& r : out.entries) tests += r.split == Split::Test;
        CHECK(tests == 1);
    }
    SUBCASE("planning") {
        const auto plan = plan_oversampling({0, 0, 0, 1}, 2);
        REQUIRE(plan.size() == 2);
        CHECK(plan[0].item == 3);
        CHECK(plan[0].cycle == 1);
        CHECK(plan[1].cycle == 2);
        CHECK(code_of([] { plan_oversampling({0, 0}, 2); }) == ErrorCode::EmptyClass);
    }
}

TEST_CASE("early stopping") {
    SUBCASE("peak at epoch 7 with patience 3 halts at epoch 10") {
        const std::vector<double> curve{0.52, 0.61, 0.70, 0.78, 0.86, 0.92, 0.9693, 0.9693, 0.95, 0.96, 0.97, 0.98};
        EarlyStopping es(3);
        std::size_t halted = 0;
        for (std::size_t i = 0; i < curve.size(); ++i)
            if (es.update(curve[i])) {
                halted = i + 1;
                break;
            }
        CHECK(halted == 10);
        CHECK(es.best_epoch() == 7);
    }
    SUBCASE("strictly improving runs to the end") {
        EarlyStopping es(3);
        for (int i = 0; i < 30; ++i) CHECK_FALSE(es.update(0.01 * i));
        CHECK(es.best_epoch() == 30);
    }
    SUBCASE("patience 0 halts at the first epoch without improvement") {
        EarlyStopping es(0);
        CHECK_FALSE(es.update(0.5));
        CHECK_FALSE(es.update(0.6));
        CHECK(es.update(0.6));
        CHECK(es.best_epoch() == 2);
    }
}

TEST_CASE("history CSV") {
    TrainHistory h;
    h.epochs = {{1, 0.5, 0.4, 1.2}, {2, 0.75, 0.6, 0.8}};
    h.best_epoch = 2;
    const std::string csv = h.to_csv();
    CHECK(csv.rfind("epoch,train_acc,val_acc,train_loss\n", 0) == 0);
    const TrainHistory back = TrainHistory::from_csv(csv);
    REQUIRE(back.epochs.size() == 2);
    CHECK(back.epochs[1].val_acc == 0.6);
    CHECK(back.best_epoch == 2);
}

TEST_CASE("config validation") {
    TrainConfig c;
    c.patience = 40;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
    c = TrainConfig{};
    c.learning_rate = -1;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("training a linearly separable set") {
    const ArchSpec arch = testing::toy_arch({"bright", "dark"});
    const SampleSet train_set = separable(20, 1), val_set = separable(8, 2);
    TrainConfig cfg;
    cfg.max_epochs = 50;
    cfg.patience = 50;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05f;
    std::size_t callbacks = 0;
    const TrainResult r = train(arch, train_set, val_set, cfg, [&](const EpochRecord&, bool) { ++callbacks; });
    CHECK(callbacks == r.history.epochs.size());
    bool reached = false;
    for (const auto& e : r.history.epochs) reached = reached || e.train_acc == 1.0;
    CHECK(reached);
    CHECK(accuracy(r.model, val_set) == r.history.best().val_acc);
    for (const auto& e : r.history.epochs) CHECK(e.val_acc <= r.history.best().val_acc);
}

TEST_CASE("training is deterministic") {
    const ArchSpec arch = testing::toy_arch({"bright", "dark"});
    const SampleSet train_set = separable(10, 3), val_set = separable(4, 4);
    TrainConfig cfg;
    cfg.max_epochs = 6;
    cfg.batch_size = 4;
    cfg.augmentation = AugmentFlags::all();
    cfg.rebalance = true;
    const TrainResult a = train(arch, train_set, val_set, cfg);
    const TrainResult b = train(arch, train_set, val_set, cfg);
    CHECK(a.model.bit_equal(b.model));
    CHECK(a.history.to_csv() == b.history.to_csv());
    cfg.seed = 43;
    CHECK_FALSE(train(arch, train_set, val_set, cfg).model.bit_equal(a.model));
}

TEST_CASE("divergence names the epoch") {
    const ArchSpec arch = testing::toy_arch({"bright", "dark"});
    TrainConfig cfg;
    cfg.learning_rate = 1e30f;
    cfg.max_epochs = 3;
    try {
        (void)train(arch, separable(6, 5), separable(2, 6), cfg);
        FAIL("expected divergence");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Divergence);
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
}

TEST_CASE("training input errors") {
    const ArchSpec arch = testing::toy_arch({"bright", "dark"});
    CHECK(code_of([&] { train(arch, {}, separable(2, 1), TrainConfig{}); }) == ErrorCode::InvalidArgument);
    SampleSet bad = separable(2, 1);
    bad[0].label = 5;
    CHECK(code_of([&] { train(arch, bad, separable(2, 1), TrainConfig{}); }) == ErrorCode::InvalidLabel);
}
