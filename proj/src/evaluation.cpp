#include "dmfuse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dmfuse/rng.hpp"

namespace dmfuse {

namespace {

void check_prob_rows(const std::vector<std::vector<double>>& probs, std::size_t n_labels) {
    if (probs.size() != n_labels)
        throw std::invalid_argument("probabilities/labels length mismatch");
    for (const auto& row : probs) {
        double sum = 0.0;
        for (double p : row) {
            if (p < -1e-9 || p > 1.0 + 1e-9)
                throw std::invalid_argument("probability outside [0,1]");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-6)
            throw std::invalid_argument("probability row does not sum to 1");
    }
}

// midranks (1-based, ties get the average rank)
std::vector<double> midranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = ((double)(i + 1) + (double)(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    return rank;
}

// DeLong structural components V10 (per positive) and V01 (per negative),
// computed via midranks.
struct Components {
    double auc;
    std::vector<double> v10, v01;
};

Components delong_components(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i)
        (labels[i] ? pos : neg).push_back(scores[i]);
    const std::size_t m = pos.size(), n = neg.size();
    if (m == 0 || n == 0)
        throw std::invalid_argument("delong/auroc: both classes must be present");
    std::vector<double> all = pos;
    all.insert(all.end(), neg.begin(), neg.end());
    const auto r_all = midranks(all);
    const auto r_pos = midranks(pos);
    const auto r_neg = midranks(neg);
    Components c;
    c.v10.resize(m);
    c.v01.resize(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        c.v10[i] = (r_all[i] - r_pos[i]) / (double)n;
        sum += r_all[i];
    }
    c.auc = (sum - (double)m * ((double)m + 1.0) / 2.0) / ((double)m * (double)n);
    for (std::size_t j = 0; j < n; ++j)
        c.v01[j] = 1.0 - (r_all[m + j] - r_neg[j]) / (double)m;
    return c;
}

double sample_cov(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    if (n < 2) return 0.0;
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= (double)n;
    mb /= (double)n;
    double c = 0;
    for (std::size_t i = 0; i < n; ++i) c += (a[i] - ma) * (b[i] - mb);
    return c / (double)(n - 1);
}

}  // namespace

ClassificationMetrics confusion_and_metrics(const std::vector<int>& predictions,
                                            const std::vector<int>& labels,
                                            std::size_t num_classes) {
    if (predictions.empty()) throw std::invalid_argument("confusion_and_metrics: empty input");
    if (predictions.size() != labels.size())
        throw std::invalid_argument("confusion_and_metrics: length mismatch");
    ClassificationMetrics m;
    m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || (std::size_t)labels[i] >= num_classes || predictions[i] < 0 ||
            (std::size_t)predictions[i] >= num_classes)
            throw std::invalid_argument("confusion_and_metrics: class id out of range");
        ++m.confusion[labels[i]][predictions[i]];
    }
    std::size_t trace = 0;
    m.per_class.resize(num_classes);
    double f1_sum = 0.0;
    std::size_t f1_n = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t tp = m.confusion[c][c];
        trace += tp;
        std::size_t fp = 0, fn = 0;
        for (std::size_t r = 0; r < num_classes; ++r) {
            if (r != c) {
                fp += m.confusion[r][c];
                fn += m.confusion[c][r];
            }
        }
        auto& pc = m.per_class[c];
        pc.present = (tp + fn) > 0;
        pc.precision = (tp + fp) ? (double)tp / (double)(tp + fp) : 0.0;
        pc.recall = (tp + fn) ? (double)tp / (double)(tp + fn) : 0.0;
        pc.f1 = (pc.precision + pc.recall) > 0.0
                    ? 2.0 * pc.precision * pc.recall / (pc.precision + pc.recall)
                    : 0.0;
        if (pc.present) {
            f1_sum += pc.f1;
            ++f1_n;
        } else {
            m.absent_classes.push_back((int)c);
        }
    }
    m.accuracy = (double)trace / (double)labels.size();
    m.macro_f1 = f1_n ? f1_sum / (double)f1_n : 0.0;
    return m;
}

double auroc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auroc_binary: length mismatch");
    return delong_components(scores, labels).auc;
}

double auroc_macro_ovr(const std::vector<std::vector<double>>& probabilities,
                       const std::vector<int>& labels) {
    check_prob_rows(probabilities, labels.size());
    const std::size_t k = probabilities.empty() ? 0 : probabilities[0].size();
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        bool present = false;
        for (int l : labels)
            if ((std::size_t)l == c) present = true;
        if (!present)
            throw std::invalid_argument("auroc_macro_ovr: class " + std::to_string(c) +
                                        " missing from labels");
        std::vector<double> scores;
        std::vector<int> binary;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            scores.push_back(probabilities[i][c]);
            binary.push_back((std::size_t)labels[i] == c ? 1 : 0);
        }
        sum += auroc_binary(scores, binary);
    }
    return sum / (double)k;
}

DeLongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels) {
    if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size())
        throw std::invalid_argument("delong_test: length mismatch");
    const auto ca = delong_components(scores_a, labels);
    const auto cb = delong_components(scores_b, labels);
    const std::size_t m = ca.v10.size(), n = ca.v01.size();
    const double s10 = sample_cov(ca.v10, ca.v10) + sample_cov(cb.v10, cb.v10) -
                       2.0 * sample_cov(ca.v10, cb.v10);
    const double s01 = sample_cov(ca.v01, ca.v01) + sample_cov(cb.v01, cb.v01) -
                       2.0 * sample_cov(ca.v01, cb.v01);
    DeLongResult r;
    r.auc_a = ca.auc;
    r.auc_b = cb.auc;
    r.var_diff = std::max(0.0, s10 / (double)m + s01 / (double)n);
    if (r.var_diff < 1e-12) {
        r.degenerate = true;
        r.z = 0.0;
        r.p_value = 1.0;
        return r;
    }
    r.z = (r.auc_a - r.auc_b) / std::sqrt(r.var_diff);
    r.p_value = std::erfc(std::fabs(r.z) / std::sqrt(2.0));
    return r;
}

double brier_score(const std::vector<std::vector<double>>& probabilities,
                   const std::vector<int>& labels) {
    if (probabilities.empty()) throw std::invalid_argument("brier_score: empty input");
    check_prob_rows(probabilities, labels.size());
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t c = 0; c < probabilities[i].size(); ++c) {
            const double y = (std::size_t)labels[i] == c ? 1.0 : 0.0;
            total += (probabilities[i][c] - y) * (probabilities[i][c] - y);
        }
    }
    return total / (double)labels.size();
}

MetricsReport assemble_report(
    const std::vector<std::vector<double>>& probabilities, const std::vector<int>& labels,
    const Provenance& provenance,
    const std::vector<std::pair<std::string, std::vector<std::vector<double>>>>&
        baseline_probabilities) {
    check_prob_rows(probabilities, labels.size());
    MetricsReport rep;
    std::vector<int> preds;
    for (const auto& row : probabilities) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c)
            if (row[c] > row[best]) best = c;
        preds.push_back((int)best);
    }
    const std::size_t k = probabilities[0].size();
    rep.classification = confusion_and_metrics(preds, labels, k);
    rep.auroc_macro = auroc_macro_ovr(probabilities, labels);
    rep.brier = brier_score(probabilities, labels);
    rep.provenance = provenance;
    for (const auto& [name, base_probs] : baseline_probabilities) {
        check_prob_rows(base_probs, labels.size());
        DeLongComparison cmp;
        cmp.baseline = name;
        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> sa, sb;
            std::vector<int> bl;
            for (std::size_t i = 0; i < labels.size(); ++i) {
                sa.push_back(probabilities[i][c]);
                sb.push_back(base_probs[i][c]);
                bl.push_back((std::size_t)labels[i] == c ? 1 : 0);
            }
            const auto res = delong_test(sa, sb, bl);
            cmp.macro_auc_a += res.auc_a / (double)k;
            cmp.macro_auc_b += res.auc_b / (double)k;
            if (res.p_value < 0.05) ++cmp.significant_classes;
            cmp.per_class.push_back(res);
        }
        rep.delong.push_back(std::move(cmp));
    }
    return rep;
}

nlohmann::ordered_json report_to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["confusion"] = report.classification.confusion;
    j["accuracy"] = report.classification.accuracy;
    auto& per_class = j["per_class"] = nlohmann::ordered_json::array();
    for (const auto& pc : report.classification.per_class) {
        per_class.push_back({{"precision", pc.precision},
                             {"recall", pc.recall},
                             {"f1", pc.f1},
                             {"present", pc.present}});
    }
    j["macro_f1"] = report.classification.macro_f1;
    j["absent_classes"] = report.classification.absent_classes;
    j["auroc_macro_ovr"] = report.auroc_macro;
    j["brier"] = report.brier;
    auto& delong = j["delong"] = nlohmann::ordered_json::array();
    for (const auto& cmp : report.delong) {
        nlohmann::ordered_json jc;
        jc["baseline"] = cmp.baseline;
        jc["macro_auc_model"] = cmp.macro_auc_a;
        jc["macro_auc_baseline"] = cmp.macro_auc_b;
        jc["significant_classes"] = cmp.significant_classes;
        auto& rows = jc["per_class"] = nlohmann::ordered_json::array();
        for (const auto& r : cmp.per_class)
            rows.push_back({{"auc_model", r.auc_a},
                            {"auc_baseline", r.auc_b},
                            {"var_diff", r.var_diff},
                            {"z", r.z},
                            {"p_value", r.p_value},
                            {"degenerate", r.degenerate}});
        delong.push_back(std::move(jc));
    }
    // headline numbers from the source publication; not reproducible at this scale
    j["paper_reference"] = {{"fusion", {{"accuracy", 0.87}, {"auroc", 0.97}, {"macro_f1", 0.88}}},
                            {"ct_only", {{"accuracy", 0.84}, {"auroc", 0.94}, {"macro_f1", 0.84}}},
                            {"he_only", {{"accuracy", 0.85}, {"auroc", 0.95}, {"macro_f1", 0.85}}}};
    j["provenance"] = {{"checkpoint_hash", report.provenance.checkpoint_hash},
                       {"seed", report.provenance.seed},
                       {"split_id", report.provenance.split_id}};
    return j;
}

std::string confusion_to_csv(const ClassificationMetrics& metrics) {
    std::ostringstream os;
    os << "true_class";
    for (std::size_t c = 0; c < metrics.confusion.size(); ++c) os << ",pred_" << c;
    os << "\n";
    std::size_t r = 0;
    for (const auto& row : metrics.confusion) {
        os << "class_" << r++ << ",";
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) os << ",";
            os << row[c];
        }
        os << "\n";
    }
    return os.str();
}

std::string hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("hash_file: cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= (unsigned char)buf[i];
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", (unsigned long long)h);
    return out;
}

}  // namespace dmfuse
