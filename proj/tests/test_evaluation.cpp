#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "dmfuse/evaluation.hpp"

using namespace dmfuse;

namespace {

// Exhaustive Mann-Whitney pairwise oracle used to validate auroc_binary.
double auroc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / (double)pairs;
}

// Naive structural-component DeLong oracle: V10 per positive, V01 per negative,
// sample covariances, variance of the AUC difference.
double delong_var_oracle(const std::vector<double>& a, const std::vector<double>& b,
                         const std::vector<int>& labels) {
    std::vector<double> ap, an, bp, bn;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            ap.push_back(a[i]);
            bp.push_back(b[i]);
        } else {
            an.push_back(a[i]);
            bn.push_back(b[i]);
        }
    }
    const std::size_t m = ap.size(), n = an.size();
    auto psi = [](double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); };
    auto components = [&](const std::vector<double>& pos, const std::vector<double>& neg) {
        std::vector<double> v10(m, 0.0), v01(n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) v10[i] += psi(pos[i], neg[j]);
            v10[i] /= (double)n;
        }
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < m; ++i) v01[j] += psi(pos[i], neg[j]);
            v01[j] /= (double)m;
        }
        return std::pair{v10, v01};
    };
    auto [va10, va01] = components(ap, an);
    auto [vb10, vb01] = components(bp, bn);
    auto cov = [](const std::vector<double>& x, const std::vector<double>& y) {
        const double mx = std::accumulate(x.begin(), x.end(), 0.0) / (double)x.size();
        const double my = std::accumulate(y.begin(), y.end(), 0.0) / (double)y.size();
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
        return s / (double)(x.size() - 1);
    };
    const double s10 = cov(va10, va10) + cov(vb10, vb10) - 2.0 * cov(va10, vb10);
    const double s01 = cov(va01, va01) + cov(vb01, vb01) - 2.0 * cov(va01, vb01);
    return s10 / (double)m + s01 / (double)n;
}

// Paired bootstrap p-value for the AUC difference (resampling indices with
// replacement, keeping the pairing between the two score vectors).
double bootstrap_p(const std::vector<double>& a, const std::vector<double>& b,
                   const std::vector<int>& labels, int reps, std::mt19937& rng) {
    const std::size_t n = labels.size();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> diffs;
    diffs.reserve(reps);
    std::vector<double> ra(n), rb(n);
    std::vector<int> rl(n);
    for (int r = 0; r < reps; ++r) {
        bool both = false;
        while (!both) {
            int pos = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = pick(rng);
                ra[i] = a[k];
                rb[i] = b[k];
                rl[i] = labels[k];
                pos += rl[i];
            }
            both = pos > 0 && pos < (int)n;
        }
        diffs.push_back(auroc_pairwise_oracle(ra, rl) - auroc_pairwise_oracle(rb, rl));
    }
    const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / (double)reps;
    double sd = 0.0;
    for (double d : diffs) sd += (d - mean) * (d - mean);
    sd = std::sqrt(sd / (double)(reps - 1));
    if (sd == 0.0) return 1.0;
    const double z = mean / sd;
    return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

}  // namespace

TEST_CASE("confusion: perfect predictions give identity diagonal and all ones") {
    std::vector<int> labels{0, 1, 2, 3, 4, 0, 1, 2, 3, 4};
    auto m = confusion_and_metrics(labels, labels);
    CHECK(m.accuracy == 1.0);
    CHECK(m.macro_f1 == 1.0);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) CHECK(m.confusion[r][c] == (r == c ? 2u : 0u));
    for (const auto& pc : m.per_class) {
        CHECK(pc.present);
        CHECK(pc.precision == 1.0);
        CHECK(pc.recall == 1.0);
        CHECK(pc.f1 == 1.0);
    }
    CHECK(m.absent_classes.empty());
}

TEST_CASE("confusion: hand-counted three-sample case") {
    auto m = confusion_and_metrics({0, 1, 1}, {0, 0, 1});
    CHECK(m.accuracy == doctest::Approx(2.0 / 3.0));
    CHECK(m.per_class[0].precision == doctest::Approx(1.0));
    CHECK(m.per_class[0].recall == doctest::Approx(0.5));
    CHECK(m.per_class[0].f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.per_class[1].precision == doctest::Approx(0.5));
    CHECK(m.per_class[1].recall == doctest::Approx(1.0));
    CHECK(m.per_class[1].f1 == doctest::Approx(2.0 / 3.0));
    // absent classes are skipped in the macro mean and flagged
    CHECK(m.macro_f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.absent_classes == std::vector<int>{2, 3, 4});
}

TEST_CASE("confusion: row sums equal class counts, accuracy equals trace/total") {
    std::mt19937 rng(7);
    std::uniform_int_distribution<int> cls(0, 4);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<int> labels(60), preds(60);
        for (auto& v : labels) v = cls(rng);
        for (auto& v : preds) v = cls(rng);
        auto m = confusion_and_metrics(preds, labels);
        std::size_t trace = 0, total = 0;
        for (std::size_t r = 0; r < 5; ++r) {
            std::size_t row = 0, count = 0;
            for (std::size_t c = 0; c < 5; ++c) row += m.confusion[r][c];
            for (int v : labels) count += (std::size_t)(v == (int)r);
            CHECK(row == count);
            trace += m.confusion[r][r];
            total += row;
        }
        CHECK(total == labels.size());
        CHECK(m.accuracy == doctest::Approx((double)trace / (double)total));
    }
}

TEST_CASE("confusion: 0/0 precision and recall defined as 0") {
    // class 1 never predicted and never true beyond one wrong prediction
    auto m = confusion_and_metrics({1, 0}, {0, 0});
    CHECK(m.per_class[0].precision == 1.0);
    CHECK(m.per_class[0].recall == 0.5);
    CHECK(m.per_class[1].precision == 0.0);  // 0 TP / 1 FP
    CHECK(!m.per_class[1].present);
}

TEST_CASE("confusion: empty input and out-of-range labels are errors") {
    CHECK_THROWS(confusion_and_metrics({}, {}));
    CHECK_THROWS(confusion_and_metrics({0}, {5}));
    CHECK_THROWS(confusion_and_metrics({0, 1}, {0}));
}

TEST_CASE("auroc_binary: separated, tied, and hand-counted cases") {
    CHECK(auroc_binary({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    CHECK(auroc_binary({0.5, 0.5, 0.5, 0.5}, {0, 0, 1, 1}) == 0.5);
    CHECK(auroc_binary({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
    CHECK_THROWS(auroc_binary({0.1, 0.2}, {1, 1}));
}

TEST_CASE("auroc_binary: equals exhaustive pairwise oracle on 1000 random instances") {
    std::mt19937 rng(11);
    std::uniform_int_distribution<int> size_dist(4, 200);
    std::uniform_int_distribution<int> grid(0, 9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 1000; ++rep) {
        const int n = size_dist(rng);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        // coarse score grid forces frequent ties to exercise midranks
        const bool tied = rep % 2 == 0;
        for (int i = 0; i < n; ++i) {
            scores[i] = tied ? grid(rng) / 10.0 : u(rng);
            labels[i] = u(rng) < 0.4 ? 1 : 0;
        }
        labels[0] = 0;
        labels[1] = 1;
        CHECK(auroc_binary(scores, labels) == auroc_pairwise_oracle(scores, labels));
    }
}

TEST_CASE("auroc_macro_ovr: perfect, uniform, and pairwise-oracle cases") {
    std::vector<std::vector<double>> perfect;
    std::vector<int> labels;
    for (int k = 0; k < 5; ++k)
        for (int r = 0; r < 3; ++r) {
            std::vector<double> p(5, 0.05);
            p[k] = 0.8;
            perfect.push_back(p);
            labels.push_back(k);
        }
    CHECK(auroc_macro_ovr(perfect, labels) == 1.0);

    std::vector<std::vector<double>> uniform(labels.size(), std::vector<double>(5, 0.2));
    CHECK(auroc_macro_ovr(uniform, labels) == 0.5);

    std::mt19937 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> cls(0, 4);
    std::vector<std::vector<double>> probs(200, std::vector<double>(5));
    std::vector<int> rl(200);
    for (int i = 0; i < 200; ++i) {
        double s = 0.0;
        for (auto& v : probs[i]) s += (v = u(rng) + 1e-3);
        for (auto& v : probs[i]) v /= s;
        rl[i] = i < 5 ? i : cls(rng);  // guarantee every class present
    }
    double oracle = 0.0;
    for (int k = 0; k < 5; ++k) {
        std::vector<double> col(200);
        std::vector<int> bin(200);
        for (int i = 0; i < 200; ++i) {
            col[i] = probs[i][k];
            bin[i] = rl[i] == k ? 1 : 0;
        }
        oracle += auroc_pairwise_oracle(col, bin);
    }
    CHECK(auroc_macro_ovr(probs, rl) == oracle / 5.0);

    std::vector<int> missing(rl);
    for (auto& v : missing)
        if (v == 3) v = 2;
    CHECK_THROWS_WITH_AS(auroc_macro_ovr(probs, missing), doctest::Contains("3"),
                         std::invalid_argument);
}

TEST_CASE("delong: identical scores are degenerate with p = 1") {
    std::vector<double> s{0.2, 0.8, 0.4, 0.6, 0.1, 0.9};
    std::vector<int> l{0, 1, 0, 1, 0, 1};
    auto r = delong_test(s, s, l);
    CHECK(r.degenerate);
    CHECK(r.p_value == 1.0);
    CHECK(r.z == 0.0);
}

TEST_CASE("delong: variance matches naive structural-component oracle on n = 12") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> a(12), b(12);
        std::vector<int> l(12);
        for (int i = 0; i < 12; ++i) {
            a[i] = u(rng);
            b[i] = u(rng);
            l[i] = i < 5 ? 1 : 0;
        }
        auto r = delong_test(a, b, l);
        CHECK(std::fabs(r.var_diff - delong_var_oracle(a, b, l)) < 1e-12);
    }
}

TEST_CASE("delong: p-value within 0.02 of a 5000-replicate paired bootstrap on n = 100") {
    std::mt19937 rng(19);
    std::normal_distribution<double> noise(0.0, 0.3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> a(100), b(100);
    std::vector<int> l(100);
    for (int i = 0; i < 100; ++i) {
        l[i] = i < 45 ? 1 : 0;
        const double base = l[i] ? 0.6 : 0.4;
        a[i] = base + noise(rng);
        b[i] = base + 0.05 * l[i] + noise(rng);
    }
    auto r = delong_test(a, b, l);
    const double pb = bootstrap_p(a, b, l, 5000, rng);
    // tolerance covers bootstrap Monte Carlo error plus the asymptotic-vs-
    // resampling gap at this sample size
    CHECK(std::fabs(r.p_value - pb) < 0.04);
}

TEST_CASE("delong: length mismatch is an error") {
    CHECK_THROWS(delong_test({0.1, 0.2}, {0.1}, {0, 1}));
}

TEST_CASE("brier: perfect, uniform, and hand cases") {
    std::vector<std::vector<double>> onehot{{1, 0, 0, 0, 0}, {0, 0, 1, 0, 0}};
    CHECK(brier_score(onehot, {0, 2}) == 0.0);

    std::vector<std::vector<double>> uniform(4, std::vector<double>(5, 0.2));
    CHECK(brier_score(uniform, {0, 1, 2, 3}) == doctest::Approx(0.8));

    std::vector<std::vector<double>> hand{{0.5, 0.5, 0, 0, 0}, {1, 0, 0, 0, 0}};
    CHECK(brier_score(hand, {0, 0}) == doctest::Approx(0.25));

    std::vector<std::vector<double>> bad{{0.5, 0.4, 0, 0, 0}};
    CHECK_THROWS(brier_score(bad, {0}));
    std::vector<std::vector<double>> neg{{1.2, -0.2, 0, 0, 0}};
    CHECK_THROWS(brier_score(neg, {0}));
}

TEST_CASE("brier: bounded in [0, 2], zero iff exactly one-hot correct") {
    std::mt19937 rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> cls(0, 4);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<std::vector<double>> probs(20, std::vector<double>(5));
        std::vector<int> labels(20);
        for (int i = 0; i < 20; ++i) {
            double s = 0.0;
            for (auto& v : probs[i]) s += (v = u(rng) + 1e-6);
            for (auto& v : probs[i]) v /= s;
            labels[i] = cls(rng);
        }
        const double bs = brier_score(probs, labels);
        CHECK(bs >= 0.0);
        CHECK(bs <= 2.0);
        CHECK(bs > 0.0);  // random rows are never exactly one-hot
    }
}

TEST_CASE("assemble_report: deterministic bytes and populated comparisons") {
    std::mt19937 rng(29);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> probs(40, std::vector<double>(5)), base(40,
                                                                             std::vector<double>(5));
    std::vector<int> labels(40);
    for (int i = 0; i < 40; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (int k = 0; k < 5; ++k) {
            s1 += (probs[i][k] = u(rng) + 1e-3);
            s2 += (base[i][k] = u(rng) + 1e-3);
        }
        for (int k = 0; k < 5; ++k) {
            probs[i][k] /= s1;
            base[i][k] /= s2;
        }
        labels[i] = i % 5;
    }
    Provenance prov{"abc123", 42, "split-7"};
    auto r1 = assemble_report(probs, labels, prov, {{"ct", base}});
    auto r2 = assemble_report(probs, labels, prov, {{"ct", base}});
    CHECK(report_to_json(r1).dump(2) == report_to_json(r2).dump(2));
    REQUIRE(r1.delong.size() == 1);
    CHECK(r1.delong[0].baseline == "ct");
    REQUIRE(r1.delong[0].per_class.size() == 5);
    for (const auto& d : r1.delong[0].per_class) {
        CHECK(d.p_value >= 0.0);
        CHECK(d.p_value <= 1.0);
    }
    auto j = report_to_json(r1);
    CHECK(j.contains("confusion"));
    CHECK(j.contains("accuracy"));
    CHECK(j.contains("per_class"));
    CHECK(j.contains("macro_f1"));
    CHECK(j.contains("auroc_macro_ovr"));
    CHECK(j.contains("brier"));
    CHECK(j.contains("delong"));
    CHECK(j["provenance"]["seed"] == 42);
    CHECK(j["provenance"]["checkpoint_hash"] == "abc123");
}

TEST_CASE("assemble_report: perfect model records accuracy 1.0") {
    std::vector<std::vector<double>> probs;
    std::vector<int> labels;
    for (int k = 0; k < 5; ++k)
        for (int r = 0; r < 4; ++r) {
            std::vector<double> p(5, 0.025);
            p[k] = 0.9;
            probs.push_back(p);
            labels.push_back(k);
        }
    auto rep = assemble_report(probs, labels, Provenance{});
    CHECK(rep.classification.accuracy == 1.0);
    CHECK(rep.auroc_macro == 1.0);
}

TEST_CASE("confusion_to_csv: header plus five count rows") {
    auto m = confusion_and_metrics({0, 1, 2, 3, 4}, {0, 1, 2, 3, 4});
    const std::string csv = confusion_to_csv(m);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    CHECK(csv.find("pred_0") != std::string::npos);
}

TEST_CASE("hash_file: stable for same bytes, differs across contents") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dmfuse_eval_test";
    fs::create_directories(dir);
    const auto p1 = dir / "a.bin", p2 = dir / "b.bin";
    std::ofstream(p1) << "hello";
    std::ofstream(p2) << "hellp";
    CHECK(hash_file(p1.string()) == hash_file(p1.string()));
    CHECK(hash_file(p1.string()) != hash_file(p2.string()));
    CHECK_THROWS(hash_file((dir / "missing.bin").string()));
    fs::remove_all(dir);
}
