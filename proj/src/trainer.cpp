#include "cacao/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "cacao/error.hpp"
#include "cacao/image.hpp"
#include "parallel.hpp"

namespace cacao {

AugmentFlags AugmentFlags::parse(const std::string& text) {
    AugmentFlags f;
    if (text.empty() || text == "none") return f;
    std::istringstream in(text);
    for (std::string tok; std::getline(in, tok, ',');) {
        if (tok == "hflip") f.hflip = true;
        else if (tok == "rotate15") f.rotate15 = true;
        else if (tok == "brightness20") f.brightness20 = true;
        else if (tok == "all") f = all();
        else if (!tok.empty()) throw Error(ErrorCode::InvalidArgument, "unknown augmentation '" + tok + "'");
    }
    return f;
}

std::string AugmentFlags::to_string() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += ',';
        out += name;
    };
    add(hflip, "hflip");
    add(rotate15, "rotate15");
    add(brightness20, "brightness20");
    return out.empty() ? "none" : out;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
    if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
    if (max_epochs < 1) throw Error(ErrorCode::InvalidArgument, "max epochs must be >= 1");
    if (patience > max_epochs) throw Error(ErrorCode::InvalidArgument, "patience must not exceed max epochs");
}

std::string TrainHistory::to_csv() const {
    std::ostringstream os;
    os << "epoch,train_acc,val_acc,train_loss\n";
    os.precision(17);
    for (const auto& e : epochs) os << e.epoch << ',' << e.train_acc << ',' << e.val_acc << ',' << e.train_loss << '\n';
    return os.str();
}

TrainHistory TrainHistory::from_csv(const std::string& text) {
    TrainHistory h;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("epoch,train_acc,val_acc,train_loss", 0) != 0) {
        throw Error(ErrorCode::Input, "history CSV lacks the epoch,train_acc,val_acc,train_loss header");
    }
    double best = -1.0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochRecord e;
        char c1, c2, c3;
        std::istringstream ls(line);
        if (!(ls >> e.epoch >> c1 >> e.train_acc >> c2 >> e.val_acc >> c3 >> e.train_loss)) {
            throw Error(ErrorCode::Input, "bad history row: " + line);
        }
        if (e.val_acc > best) {
            best = e.val_acc;
            h.best_epoch = e.epoch;
        }
        h.epochs.push_back(e);
    }
    return h;
}

double cross_entropy(const Tensor& probs, std::size_t label) {
    if (probs.rank() != 1) throw Error(ErrorCode::InvalidShape, "cross_entropy expects rank-1 probabilities");
    if (label >= probs.size()) throw Error(ErrorCode::InvalidLabel, "label index " + std::to_string(label) + " out of range");
    const double p = std::max(static_cast<double>(probs[label]), 1e-12);
    return -std::log(p);
}

// ---------------------------------------------------------------------------
// augmentation

namespace {

void require_chw(const Tensor& image) {
    if (image.rank() != 3) throw Error(ErrorCode::InvalidShape, "expected a CHW image");
}

void require_image(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw Error(ErrorCode::InvalidShape, "augmentation expects a 3-channel CHW image");
}

}  // namespace

Tensor hflip(const Tensor& image) {
    require_chw(image);
    Tensor out(image.shape());
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
    return out;
}

Tensor rotate(const Tensor& image, double degrees) {
    require_chw(image);
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
    Tensor out(image.shape());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            // Inverse mapping; samples outside the frame take the nearest edge pixel.
            const double sx = std::clamp(cs * dx + sn * dy + cx, 0.0, static_cast<double>(w - 1));
            const double sy = std::clamp(-sn * dx + cs * dy + cy, 0.0, static_cast<double>(h - 1));
            const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            for (std::size_t c = 0; c < ch; ++c) {
                const double top = image.at(c, y0, x0) * (1 - fx) + image.at(c, y0, x1) * fx;
                const double bot = image.at(c, y1, x0) * (1 - fx) + image.at(c, y1, x1) * fx;
                out.at(c, y, x) = static_cast<float>(top * (1 - fy) + bot * fy);
            }
        }
    }
    return out;
}

Tensor scale_brightness(const Tensor& image, float factor) {
    require_chw(image);
    Tensor out = image;
    for (auto& v : out.data()) v = std::clamp(v * factor, 0.0f, 1.0f);
    return out;
}

std::vector<Tensor> augment(const Tensor& image, AugmentFlags flags, std::uint64_t seed) {
    require_image(image);
    std::vector<Tensor> out{image};
    const std::uint64_t draw = mix_seed(seed, 0xA5);
    if (flags.hflip) out.push_back(hflip(image));
    if (flags.rotate15) out.push_back(rotate(image, (draw & 1) ? 15.0 : -15.0));
    if (flags.brightness20) out.push_back(scale_brightness(image, (draw & 2) ? 1.2f : 0.8f));
    return out;
}

namespace {

Tensor augmented_variant(const Tensor& image, std::uint64_t seed) {
    const auto variants = augment(image, AugmentFlags::all(), seed);
    return variants[1 + seed % (variants.size() - 1)];
}

}  // namespace

// ---------------------------------------------------------------------------
// rebalancing

std::vector<Duplicate> plan_oversampling(const std::vector<std::size_t>& labels_of_items, std::size_t num_labels) {
    std::vector<std::vector<std::size_t>> members(num_labels);
    for (std::size_t i = 0; i < labels_of_items.size(); ++i) {
        if (labels_of_items[i] >= num_labels) throw Error(ErrorCode::InvalidLabel, "label index out of range");
        members[labels_of_items[i]].push_back(i);
    }
    std::size_t majority = 0;
    for (std::size_t c = 0; c < num_labels; ++c) {
        if (members[c].empty()) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no samples");
        majority = std::max(majority, members[c].size());
    }
    std::vector<Duplicate> plan;
    for (const auto& m : members) {
        for (std::size_t k = 0; m.size() + k < majority; ++k) plan.push_back({m[k % m.size()], 1 + k / m.size()});
    }
    return plan;
}

DatasetManifest rebalance(const DatasetManifest& manifest, const std::vector<std::string>& labels, std::uint64_t seed) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;

    const bool has_train = std::any_of(manifest.entries.begin(), manifest.entries.end(),
                                       [](const ImageRecord& r) { return r.accepted() && r.split == Split::Train; });
    std::vector<std::size_t> pool, pool_labels;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& r = manifest.entries[i];
        if (!r.accepted() || (has_train && r.split != Split::Train)) continue;
        auto it = index.find(r.label);
        if (it == index.end()) continue;
        pool.push_back(i);
        pool_labels.push_back(it->second);
    }
    std::vector<Duplicate> plan;
    try {
        plan = plan_oversampling(pool_labels, labels.size());
    } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptyClass) throw;
        for (std::size_t c = 0; c < labels.size(); ++c) {
            if (std::find(pool_labels.begin(), pool_labels.end(), c) == pool_labels.end()) {
                throw Error(ErrorCode::EmptyClass, "label '" + labels[c] + "' has no samples to rebalance");
            }
        }
        throw;
    }

    DatasetManifest out = manifest;
    for (const auto& d : plan) {
        ImageRecord r = manifest.entries[pool[d.item]];
        r.augment = mix_seed(seed, hash_string(r.path) ^ d.cycle) | 1u;
        out.entries.push_back(std::move(r));
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
    return out;
}

// ---------------------------------------------------------------------------

bool EarlyStopping::update(double val_acc) {
    ++epoch_;
    if (best_epoch_ == 0 || val_acc > best_) {
        best_ = val_acc;
        best_epoch_ = epoch_;
        since_best_ = 0;
    } else {
        ++since_best_;
    }
    // patience 0 still needs one non-improving epoch before halting.
    return since_best_ > 0 && since_best_ >= patience_;
}

SampleSet load_samples(const DatasetManifest& manifest, Split split, const std::vector<std::string>& labels,
                       std::size_t resolution) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
    std::vector<const ImageRecord*> picked;
    for (const auto& r : manifest.entries) {
        if (r.accepted() && r.split == split && index.contains(r.label)) picked.push_back(&r);
    }
    SampleSet out(picked.size());
    detail::parallel_for(picked.size(), [&](std::size_t i) {
        const ImageRecord& r = *picked[i];
        Tensor t = image_to_tensor(resize_bilinear(read_image(r.path), resolution, resolution));
        if (r.augment != 0) t = augmented_variant(t, r.augment);
        out[i] = Sample{std::move(t), index.at(r.label)};
    });
    return out;
}

std::vector<std::size_t> predict(const Model& model, const SampleSet& samples) {
    std::vector<std::size_t> out(samples.size());
    detail::parallel_for(samples.size(), [&](std::size_t i) {
        const Tensor p = model.forward(samples[i].image);
        const auto row = p.data();
        out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    });
    return out;
}

double accuracy(const Model& model, const SampleSet& samples) {
    if (samples.empty()) return 0.0;
    const auto preds = predict(model, samples);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) hits += preds[i] == samples[i].label;
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

TrainResult train(const ArchSpec& arch, const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    validate_arch(arch);
    if (train_set.empty()) throw Error(ErrorCode::InvalidArgument, "training set is empty");
    if (val_set.empty()) throw Error(ErrorCode::InvalidArgument, "validation set is empty");
    const std::size_t num_labels = arch.labels.size();
    for (const auto* set : {&train_set, &val_set}) {
        for (const auto& s : *set) {
            if (s.label >= num_labels) throw Error(ErrorCode::InvalidLabel, "sample label out of range for the arch");
        }
    }

    SampleSet pool = train_set;
    if (cfg.rebalance) {
        std::vector<std::size_t> lbl;
        for (const auto& s : pool) lbl.push_back(s.label);
        for (const auto& d : plan_oversampling(lbl, num_labels)) {
            const Sample& src = train_set[d.item];
            pool.push_back(Sample{augmented_variant(src.image, mix_seed(cfg.seed, d.item * 131 + d.cycle) | 1u), src.label});
        }
    }
    if (!cfg.augmentation.empty()) {
        const std::size_t n = pool.size();
        for (std::size_t i = 0; i < n; ++i) {
            auto variants = augment(pool[i].image, cfg.augmentation, mix_seed(cfg.seed, 0x100000 + i));
            for (std::size_t v = 1; v < variants.size(); ++v) pool.push_back(Sample{std::move(variants[v]), pool[i].label});
        }
    }

    Model model = Model::initialize(arch, cfg.seed);
    std::optional<Model> best;
    EarlyStopping stopper(cfg.patience);
    TrainHistory history;

    std::vector<std::size_t> order(pool.size());
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        shuffle_indices(order, mix_seed(cfg.seed, epoch));

        double loss_sum = 0.0;
        try {
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg.batch_size);
                std::vector<Tensor> images;
                std::vector<std::size_t> labels;
                for (std::size_t k = start; k < end; ++k) {
                    images.push_back(pool[order[k]].image);
                    labels.push_back(pool[order[k]].label);
                }
                const Gradients g = model.backward(stack(images), labels);
                for (std::size_t k = 0; k < labels.size(); ++k) loss_sum += cross_entropy(g.probs.sample(k), labels[k]);
                if (!std::isfinite(loss_sum)) throw Error(ErrorCode::InvalidValue, "non-finite loss");
                model.apply_sgd(g.params, cfg.learning_rate);
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InvalidValue) throw;
            throw Error(ErrorCode::Divergence, "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(pool.size());
        try {
            rec.train_acc = accuracy(model, pool);
            rec.val_acc = accuracy(model, val_set);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InvalidValue) throw;
            throw Error(ErrorCode::Divergence, "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }
        history.epochs.push_back(rec);
        const bool stop = stopper.update(rec.val_acc);
        if (stopper.last_improved()) best = model;
        if (on_epoch) on_epoch(rec, stopper.last_improved());
        if (stop) break;
    }
    history.best_epoch = stopper.best_epoch();
    return TrainResult{std::move(*best), std::move(history)};
}

}  // namespace cacao
