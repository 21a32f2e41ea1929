#include "cacao/evaluate.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cacao/error.hpp"
#include "cacao/image.hpp"
#include "cacao/io.hpp"
#include "cacao/trainer.hpp"
#include "parallel.hpp"

namespace cacao {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> l)
    : labels(std::move(l)), counts(labels.size(), std::vector<std::size_t>(labels.size(), 0)) {}

std::size_t ConfusionMatrix::total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
        for (auto v : row) n += v;
    return n;
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
    return n;
}

ConfusionMatrix confusion(std::span<const std::string> truths, std::span<const std::string> predictions,
                          const std::vector<std::string>& labels) {
    if (truths.size() != predictions.size()) {
        throw Error(ErrorCode::Input, "truth and prediction lists differ in length (" + std::to_string(truths.size()) +
                                          " vs " + std::to_string(predictions.size()) + ")");
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
    auto lookup = [&](const std::string& v) {
        auto it = index.find(v);
        if (it == index.end()) throw Error(ErrorCode::Input, "label '" + v + "' is not in the label set");
        return it->second;
    };
    ConfusionMatrix m(labels);
    for (std::size_t i = 0; i < truths.size(); ++i) m.add(lookup(truths[i]), lookup(predictions[i]));
    return m;
}

double f1_score(double precision, double recall) {
    const double denom = precision + recall;
    return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

EvalReport metrics(const ConfusionMatrix& matrix) {
    EvalReport r{matrix, {}, 0.0, matrix.total()};
    const std::size_t k = matrix.labels.size();
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t tp = matrix.counts[c][c], row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += matrix.counts[c][j];
            col += matrix.counts[j][c];
        }
        ClassMetrics m;
        m.support = row;
        m.precision_undefined = col == 0;
        m.recall_undefined = row == 0;
        m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        m.f1 = f1_score(m.precision, m.recall);
        r.per_class.push_back(m);
    }
    r.accuracy = r.total ? static_cast<double>(matrix.trace()) / static_cast<double>(r.total) : 0.0;
    return r;
}

AgreementResult agreement(std::span<const FieldLabel> app, std::span<const FieldLabel> expert, const std::string& trigger) {
    if (app.size() != expert.size()) throw Error(ErrorCode::Input, "app and expert lists differ in length");
    if (app.empty()) throw Error(ErrorCode::Input, "agreement needs at least one field sample");
    AgreementResult r;
    r.total = app.size();
    for (std::size_t i = 0; i < app.size(); ++i) {
        bool same = app[i].label == expert[i].label;
        if (same && app[i].label == trigger && app[i].level && expert[i].level) same = *app[i].level == *expert[i].level;
        r.matches += same;
    }
    r.rate = static_cast<double>(r.matches) / static_cast<double>(r.total);
    return r;
}

void read_agreement_csv(const std::filesystem::path& path, std::vector<FieldLabel>& app, std::vector<FieldLabel>& expert) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::Input, "agreement CSV is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "app_label,app_level,expert_label,expert_level") {
        throw Error(ErrorCode::Input, "agreement CSV header must be app_label,app_level,expert_label,expert_level");
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        if (line.back() == ',') cols.emplace_back();
        if (cols.size() != 4) throw Error(ErrorCode::Input, "agreement CSV line " + std::to_string(line_no) + " needs 4 columns");
        auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::string>(s); };
        app.push_back({cols[0], opt(cols[1])});
        expert.push_back({cols[2], opt(cols[3])});
    }
}

EvalReport evaluate_model(const Model& model, const DatasetManifest& manifest) {
    std::map<std::string, std::set<Split>> seen;
    std::vector<const ImageRecord*> test;
    for (const auto& r : manifest.entries) {
        if (!r.accepted()) continue;
        seen[r.path].insert(r.split);
        if (r.split == Split::Test && r.augment == 0) test.push_back(&r);
    }
    for (const auto& [path, splits] : seen) {
        if (splits.contains(Split::Train) && splits.contains(Split::Test)) {
            throw Error(ErrorCode::Input, "record " + path + " is tagged both train and test");
        }
    }
    if (test.empty()) throw Error(ErrorCode::Input, "manifest has no test records");

    const auto& labels = model.labels();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
    for (const auto* r : test) {
        if (!index.contains(r->label)) throw Error(ErrorCode::InvalidLabel, "test label '" + r->label + "' unknown to the model");
    }

    std::vector<std::size_t> preds(test.size());
    detail::parallel_for(test.size(), [&](std::size_t i) {
        const Tensor x = image_to_tensor(read_image(test[i]->path));
        const Tensor p = model.forward(x);
        const auto row = p.data();
        preds[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    });
    ConfusionMatrix m(labels);
    for (std::size_t i = 0; i < test.size(); ++i) m.add(index.at(test[i]->label), preds[i]);
    return metrics(m);
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["labels"] = report.matrix.labels;
    j["confusion"] = report.matrix.counts;
    j["accuracy"] = report.accuracy;
    j["total"] = report.total;
    auto& pc = j["per_class"];
    pc = nlohmann::json::array();
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const auto& m = report.per_class[c];
        nlohmann::json e{{"label", report.matrix.labels[c]},
                         {"precision", m.precision},
                         {"recall", m.recall},
                         {"f1", m.f1},
                         {"support", m.support}};
        if (m.precision_undefined || m.recall_undefined) {
            e["undefined"] = nlohmann::json::array();
            if (m.precision_undefined) e["undefined"].push_back("precision");
            if (m.recall_undefined) e["undefined"].push_back("recall");
        }
        pc.push_back(std::move(e));
    }
    return j.dump(2);
}

namespace {

std::string pct(double v, bool undefined) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v * 100.0 << '%' << (undefined ? "*" : "");
    return os.str();
}

}  // namespace

std::string render_report(const EvalReport& report) {
    std::size_t w = 5;
    for (const auto& l : report.matrix.labels) w = std::max(w, l.size());
    std::ostringstream os;
    const int lw = static_cast<int>(w);
    os << std::left << std::setw(lw) << "" << std::right << std::setw(12) << "Precision" << std::setw(12) << "Recall"
       << std::setw(12) << "F1-score" << std::setw(10) << "Support" << '\n';
    bool any_undefined = false;
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const auto& m = report.per_class[c];
        any_undefined |= m.precision_undefined || m.recall_undefined;
        os << std::left << std::setw(lw) << report.matrix.labels[c] << std::right << std::setw(12)
           << pct(m.precision, m.precision_undefined) << std::setw(12) << pct(m.recall, m.recall_undefined)
           << std::setw(12) << pct(m.f1, m.precision_undefined || m.recall_undefined) << std::setw(10) << m.support << '\n';
    }
    os << '\n' << std::left << std::setw(lw) << "accuracy" << std::right << std::setw(12) << pct(report.accuracy, false)
       << std::setw(34) << report.total << '\n';
    if (any_undefined) os << "* zero denominator, reported as 0\n";
    return os.str();
}

std::string confusion_to_csv(const ConfusionMatrix& matrix) {
    std::ostringstream os;
    os << "truth\\predicted";
    for (const auto& l : matrix.labels) os << ',' << l;
    os << '\n';
    for (std::size_t i = 0; i < matrix.labels.size(); ++i) {
        os << matrix.labels[i];
        for (auto v : matrix.counts[i]) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

}  // namespace cacao
