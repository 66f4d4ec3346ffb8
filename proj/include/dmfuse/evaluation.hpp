#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmfuse {

struct PerClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool present = false;  // class appears in the labels
};

struct ClassificationMetrics {
    std::vector<std::vector<std::size_t>> confusion;  // rows true, cols predicted
    double accuracy = 0.0;
    std::vector<PerClassMetrics> per_class;
    double macro_f1 = 0.0;            // mean over classes present in the labels
    std::vector<int> absent_classes;  // flagged when a class is missing
};

ClassificationMetrics confusion_and_metrics(const std::vector<int>& predictions,
                                            const std::vector<int>& labels,
                                            std::size_t num_classes = 5);

// Mann-Whitney AUC with midrank tie handling; equals the exhaustive pairwise
// count exactly.
double auroc_binary(const std::vector<double>& scores, const std::vector<int>& labels);

// unweighted mean of per-class one-vs-rest AUROCs
double auroc_macro_ovr(const std::vector<std::vector<double>>& probabilities,
                       const std::vector<int>& labels);

struct DeLongResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double var_diff = 0.0;
    double z = 0.0;
    double p_value = 1.0;  // two-sided
    bool degenerate = false;
};

DeLongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels);

// multiclass sum form, range [0, 2]
double brier_score(const std::vector<std::vector<double>>& probabilities,
                   const std::vector<int>& labels);

struct DeLongComparison {
    std::string baseline;  // e.g. "ct" or "he"
    std::vector<DeLongResult> per_class;
    double macro_auc_a = 0.0;
    double macro_auc_b = 0.0;
    std::size_t significant_classes = 0;  // p < 0.05
};

struct Provenance {
    std::string checkpoint_hash;
    std::uint64_t seed = 0;
    std::string split_id;
};

struct MetricsReport {
    ClassificationMetrics classification;
    double auroc_macro = 0.0;
    double brier = 0.0;
    std::vector<DeLongComparison> delong;
    Provenance provenance;
};

MetricsReport assemble_report(const std::vector<std::vector<double>>& probabilities,
                              const std::vector<int>& labels, const Provenance& provenance,
                              const std::vector<std::pair<std::string,
                                                          std::vector<std::vector<double>>>>&
                                  baseline_probabilities = {});

nlohmann::ordered_json report_to_json(const MetricsReport& report);

std::string confusion_to_csv(const ClassificationMetrics& metrics);

// FNV-1a over a file's bytes, hex encoded; used for report provenance.
std::string hash_file(const std::string& path);

}  // namespace dmfuse
