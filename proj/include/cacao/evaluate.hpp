#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cacao/dataset.hpp"
#include "cacao/nn.hpp"

namespace cacao {

struct ConfusionMatrix {
    std::vector<std::string> labels;
    std::vector<std::vector<std::size_t>> counts;  // [truth][prediction]

    explicit ConfusionMatrix(std::vector<std::string> labels = {});
    void add(std::size_t truth, std::size_t prediction) { ++counts.at(truth).at(prediction); }
    std::size_t total() const;
    std::size_t trace() const;
};

// Throws Input on length mismatch or a value outside `labels`.
ConfusionMatrix confusion(std::span<const std::string> truths, std::span<const std::string> predictions,
                          const std::vector<std::string>& labels);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
    // Set when the metric's denominator was zero and 0.0 was substituted.
    bool precision_undefined = false;
    bool recall_undefined = false;
};

struct EvalReport {
    ConfusionMatrix matrix;
    std::vector<ClassMetrics> per_class;
    double accuracy = 0.0;
    std::size_t total = 0;
};

// Harmonic mean; 0 when p + r == 0.
double f1_score(double precision, double recall);

EvalReport metrics(const ConfusionMatrix& matrix);

struct FieldLabel {
    std::string label;
    std::optional<std::string> level;
};

struct AgreementResult {
    std::size_t matches = 0;
    std::size_t total = 0;
    double rate = 0.0;
};

// A pair agrees when the stage-1 labels match and, if both sides name
// `trigger` with a level, the levels match too.
AgreementResult agreement(std::span<const FieldLabel> app, std::span<const FieldLabel> expert,
                          const std::string& trigger = "black-pod-rot");

// CSV with header app_label,app_level,expert_label,expert_level (levels may be blank).
void read_agreement_csv(const std::filesystem::path& path, std::vector<FieldLabel>& app, std::vector<FieldLabel>& expert);

// Runs the model over the manifest's test split. Images must already be at
// the model resolution (ShapeMismatch otherwise); a record tagged both train
// and test is an Input error.
EvalReport evaluate_model(const Model& model, const DatasetManifest& manifest);

std::string report_to_json(const EvalReport& report);
// Aligned precision / recall / f1-score / support table, percentages to 2 dp.
std::string render_report(const EvalReport& report);
std::string confusion_to_csv(const ConfusionMatrix& matrix);

}  // namespace cacao
