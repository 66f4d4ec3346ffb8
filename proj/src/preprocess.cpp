#include "dmfuse/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dmfuse/rng.hpp"

namespace dmfuse {

namespace {

constexpr double kOdEpsilon = 1e-6;       // OD offset
constexpr double kOdBeta = 0.15;          // foreground OD threshold
constexpr double kAnglePercentile = 1.0;  // alpha / 100-alpha angular extremes
constexpr double kConcPercentile = 99.0;
constexpr double kMinTissueFraction = 0.05;

double percentile(std::vector<double> v, double pct) {
    // linear interpolation between order statistics
    if (v.empty()) throw std::invalid_argument("percentile of empty vector");
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * (double)(v.size() - 1);
    const std::size_t lo = (std::size_t)std::floor(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - (double)lo;
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// exact 2-variable nonnegative least squares for OD = S c
std::array<double, 2> nnls2(const std::array<std::array<double, 2>, 3>& s,
                            const std::array<double, 3>& od) {
    double a = 0, b = 0, c = 0, d = 0, e = 0;
    for (int i = 0; i < 3; ++i) {
        a += s[i][0] * s[i][0];
        b += s[i][0] * s[i][1];
        c += s[i][1] * s[i][1];
        d += s[i][0] * od[i];
        e += s[i][1] * od[i];
    }
    const double det = a * c - b * b;
    std::array<double, 2> sol{0.0, 0.0};
    if (std::fabs(det) > 1e-15) {
        sol[0] = (c * d - b * e) / det;
        sol[1] = (a * e - b * d) / det;
    }
    if (sol[0] < 0.0 || sol[1] < 0.0) {
        const double c0 = a > 0 ? std::max(0.0, d / a) : 0.0;
        const double c1 = c > 0 ? std::max(0.0, e / c) : 0.0;
        // pick the single-stain fit with smaller residual
        double r0 = 0, r1 = 0;
        for (int i = 0; i < 3; ++i) {
            r0 += (od[i] - s[i][0] * c0) * (od[i] - s[i][0] * c0);
            r1 += (od[i] - s[i][1] * c1) * (od[i] - s[i][1] * c1);
        }
        sol = r0 <= r1 ? std::array<double, 2>{c0, 0.0} : std::array<double, 2>{0.0, c1};
    }
    return sol;
}

std::vector<std::array<double, 3>> tile_od(const RGBTile& tile) {
    const std::size_t h = tile.pixels.shape[1], w = tile.pixels.shape[2];
    std::vector<std::array<double, 3>> od(h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            od[i][c] = -std::log10(((double)tile.pixels.values[c * h * w + i] + kOdEpsilon) / 1.0);
    return od;
}

struct StainEstimate {
    std::array<std::array<double, 2>, 3> matrix;
    std::vector<std::size_t> foreground;  // flat pixel indices
};

StainEstimate estimate_stains_impl(const RGBTile& tile) {
    if (tile.pixels.rank() != 3 || tile.pixels.shape[0] != 3)
        throw std::invalid_argument("macenko: tile must be [3,H,W], got " +
                                    shape_str(tile.pixels.shape));
    const auto od = tile_od(tile);
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < od.size(); ++i) {
        const double norm =
            std::sqrt(od[i][0] * od[i][0] + od[i][1] * od[i][1] + od[i][2] * od[i][2]);
        if (norm >= kOdBeta) fg.push_back(i);
    }
    if ((double)fg.size() < kMinTissueFraction * (double)od.size())
        throw TileRejected("tile has under 5% foreground OD pixels");

    // covariance of foreground OD
    std::array<double, 3> mu{0, 0, 0};
    for (std::size_t i : fg)
        for (int c = 0; c < 3; ++c) mu[c] += od[i][c];
    for (int c = 0; c < 3; ++c) mu[c] /= (double)fg.size();
    double cov[3][3] = {};
    for (std::size_t i : fg)
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) cov[r][c] += (od[i][r] - mu[r]) * (od[i][c] - mu[c]);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cov[r][c] /= (double)fg.size();

    // top-2 eigenvectors by orthogonal power iteration (3x3 symmetric PSD)
    auto matvec = [&](const std::array<double, 3>& v) {
        std::array<double, 3> r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r[i] += cov[i][j] * v[j];
        return r;
    };
    auto normalize3 = [](std::array<double, 3>& v) {
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n > 0)
            for (auto& x : v) x /= n;
        return n;
    };
    std::array<double, 3> e1{1, 1, 1}, e2{1, -1, 0};
    normalize3(e1);
    double lambda1 = 0, lambda2 = 0;
    for (int it = 0; it < 200; ++it) {
        e1 = matvec(e1);
        lambda1 = normalize3(e1);
    }
    for (int it = 0; it < 200; ++it) {
        e2 = matvec(e2);
        double dot = e2[0] * e1[0] + e2[1] * e1[1] + e2[2] * e1[2];
        for (int i = 0; i < 3; ++i) e2[i] -= dot * e1[i];
        lambda2 = normalize3(e2);
        if (lambda2 == 0) break;
    }
    if (lambda2 < 1e-10 || lambda2 < 1e-6 * lambda1)
        throw TileRejected("degenerate OD covariance (rank < 2)");

    // orient the plane basis so projections are mostly positive
    double s1 = 0, s2 = 0;
    for (std::size_t i : fg) {
        s1 += od[i][0] * e1[0] + od[i][1] * e1[1] + od[i][2] * e1[2];
        s2 += od[i][0] * e2[0] + od[i][1] * e2[1] + od[i][2] * e2[2];
    }
    if (s1 < 0)
        for (auto& x : e1) x = -x;

    std::vector<double> angles;
    angles.reserve(fg.size());
    for (std::size_t i : fg) {
        const double p1 = od[i][0] * e1[0] + od[i][1] * e1[1] + od[i][2] * e1[2];
        const double p2 = od[i][0] * e2[0] + od[i][1] * e2[1] + od[i][2] * e2[2];
        angles.push_back(std::atan2(p2, p1));
    }
    const double a_lo = percentile(angles, kAnglePercentile);
    const double a_hi = percentile(angles, 100.0 - kAnglePercentile);
    auto stain_vec = [&](double ang) {
        std::array<double, 3> v;
        for (int i = 0; i < 3; ++i) v[i] = std::cos(ang) * e1[i] + std::sin(ang) * e2[i];
        double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (auto& x : v) x /= n;
        if (v[0] + v[1] + v[2] < 0)
            for (auto& x : v) x = -x;
        return v;
    };
    auto v_lo = stain_vec(a_lo);
    auto v_hi = stain_vec(a_hi);
    // hematoxylin has the larger red-channel OD
    const bool lo_is_h = v_lo[0] > v_hi[0];
    const auto& vh = lo_is_h ? v_lo : v_hi;
    const auto& ve = lo_is_h ? v_hi : v_lo;
    StainEstimate est;
    for (int i = 0; i < 3; ++i) {
        est.matrix[i][0] = vh[i];
        est.matrix[i][1] = ve[i];
    }
    est.foreground = std::move(fg);
    return est;
}

}  // namespace

StainReference StainReference::standard() {
    // conventional H&E optical-density reference
    StainReference ref;
    const double h[3] = {0.65, 0.70, 0.29};
    const double e[3] = {0.07, 0.99, 0.11};
    const double hn = std::sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2]);
    const double en = std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
    for (int i = 0; i < 3; ++i) {
        ref.stain_matrix[i][0] = h[i] / hn;
        ref.stain_matrix[i][1] = e[i] / en;
    }
    ref.max_concentrations = {1.9705, 1.0308};
    return ref;
}

CTPatch hu_normalize(const CTPatch& patch, double window_low, double window_high) {
    if (!(window_low < window_high))
        throw std::invalid_argument("hu_normalize: window_low must be < window_high");
    CTPatch out = patch;
    const double range = window_high - window_low;
    for (auto& v : out.pixels.values) {
        double z = ((double)v - window_low) / range;
        v = (float)std::clamp(z, 0.0, 1.0);
    }
    return out;
}

std::array<std::array<double, 2>, 3> macenko_estimate_stains(const RGBTile& tile) {
    return estimate_stains_impl(tile).matrix;
}

RGBTile macenko_normalize(const RGBTile& tile, const StainReference& reference) {
    const auto est = estimate_stains_impl(tile);
    const auto od = tile_od(tile);
    const std::size_t n = od.size();
    std::vector<std::array<double, 2>> conc(n);
    std::vector<double> ch, ce;
    ch.reserve(est.foreground.size());
    ce.reserve(est.foreground.size());
    for (std::size_t i = 0; i < n; ++i)
        conc[i] = nnls2(est.matrix, {od[i][0], od[i][1], od[i][2]});
    for (std::size_t i : est.foreground) {
        ch.push_back(conc[i][0]);
        ce.push_back(conc[i][1]);
    }
    const double p_h = percentile(ch, kConcPercentile);
    const double p_e = percentile(ce, kConcPercentile);
    const double scale_h = p_h > 1e-9 ? reference.max_concentrations[0] / p_h : 0.0;
    const double scale_e = p_e > 1e-9 ? reference.max_concentrations[1] / p_e : 0.0;

    RGBTile out = tile;
    const std::size_t hw = n;
    for (std::size_t i = 0; i < n; ++i) {
        const double c0 = conc[i][0] * scale_h;
        const double c1 = conc[i][1] * scale_e;
        for (int c = 0; c < 3; ++c) {
            const double od_new =
                reference.stain_matrix[c][0] * c0 + reference.stain_matrix[c][1] * c1;
            out.pixels.values[c * hw + i] =
                (float)std::clamp(std::pow(10.0, -od_new), 0.0, 1.0);
        }
    }
    out.tissue_fraction = (double)est.foreground.size() / (double)n;
    return out;
}

namespace {

double sample_beta(double alpha, Rng& rng) {
    std::gamma_distribution<double> g(alpha, 1.0);
    const double a = g(rng);
    const double b = g(rng);
    const double s = a + b;
    return s > 0 ? a / s : 0.5;
}

void check_batches(const std::vector<Sample>& a, const std::vector<Sample>& b, double alpha,
                   const char* op) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": batch sizes differ");
    if (!(alpha > 0.0)) throw std::invalid_argument(std::string(op) + ": alpha must be > 0");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].image.shape != b[i].image.shape)
            throw std::invalid_argument(std::string(op) + ": image shape mismatch at sample " +
                                        std::to_string(i));
        if (a[i].label.size() != b[i].label.size())
            throw std::invalid_argument(std::string(op) + ": label size mismatch at sample " +
                                        std::to_string(i));
    }
}

}  // namespace

std::vector<Sample> mixup(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                          double alpha, std::uint64_t seed) {
    check_batches(batch_a, batch_b, alpha, "mixup");
    Rng rng(seed);
    std::vector<Sample> out(batch_a.size());
    for (std::size_t i = 0; i < batch_a.size(); ++i) {
        const double lam = sample_beta(alpha, rng);
        out[i].image = batch_a[i].image;
        for (std::size_t j = 0; j < out[i].image.size(); ++j)
            out[i].image[j] =
                (float)(lam * batch_a[i].image[j] + (1.0 - lam) * batch_b[i].image[j]);
        out[i].label.resize(batch_a[i].label.size());
        for (std::size_t j = 0; j < out[i].label.size(); ++j)
            out[i].label[j] = lam * batch_a[i].label[j] + (1.0 - lam) * batch_b[i].label[j];
    }
    return out;
}

std::vector<Sample> cutmix(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                           double alpha, std::uint64_t seed) {
    check_batches(batch_a, batch_b, alpha, "cutmix");
    Rng rng(seed);
    std::vector<Sample> out(batch_a.size());
    for (std::size_t i = 0; i < batch_a.size(); ++i) {
        const auto& shape = batch_a[i].image.shape;
        if (shape.size() < 2 || shape[shape.size() - 2] < 2 || shape.back() < 2)
            throw std::invalid_argument("cutmix: images must be at least 2x2");
        const std::size_t h = shape[shape.size() - 2], w = shape.back();
        const std::size_t planes = batch_a[i].image.size() / (h * w);

        const double lam = sample_beta(alpha, rng);
        const double cut = std::sqrt(1.0 - lam);
        const std::size_t bh = (std::size_t)std::llround(cut * (double)h);
        const std::size_t bw = (std::size_t)std::llround(cut * (double)w);
        std::uniform_int_distribution<std::size_t> uy(0, h - 1), ux(0, w - 1);
        const std::size_t cy = uy(rng), cx = ux(rng);
        const std::size_t y0 = cy >= bh / 2 ? cy - bh / 2 : 0;
        const std::size_t x0 = cx >= bw / 2 ? cx - bw / 2 : 0;
        const std::size_t y1 = std::min(y0 + bh, h);
        const std::size_t x1 = std::min(x0 + bw, w);

        out[i].image = batch_a[i].image;
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) {
                    const std::size_t idx = (p * h + y) * w + x;
                    out[i].image[idx] = batch_b[i].image[idx];
                }
        // label weight from the realized clipped box
        const double area_frac = (double)((y1 - y0) * (x1 - x0)) / (double)(h * w);
        const double lam_adj = 1.0 - area_frac;
        out[i].label.resize(batch_a[i].label.size());
        for (std::size_t j = 0; j < out[i].label.size(); ++j)
            out[i].label[j] = lam_adj * batch_a[i].label[j] + (1.0 - lam_adj) * batch_b[i].label[j];
    }
    return out;
}

SplitAssignment patient_split(const std::vector<std::string>& patient_ids,
                              const std::vector<int>& labels,
                              const std::array<double, 3>& ratios, std::uint64_t seed) {
    if (patient_ids.size() != labels.size())
        throw std::invalid_argument("patient_split: ids/labels length mismatch");
    if (std::fabs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
        throw std::invalid_argument("patient_split: ratios must sum to 1");
    {
        std::vector<std::string> sorted = patient_ids;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw std::invalid_argument("patient_split: duplicate patient id");
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < patient_ids.size(); ++i) by_class[labels[i]].push_back(i);

    SplitAssignment assignment;
    for (auto& [cls, members] : by_class) {
        if (members.size() < 3)
            throw std::invalid_argument("patient_split: class " + std::to_string(cls) +
                                        " has fewer patients than splits");
        Rng rng = make_rng(seed, "patient_split", (std::uint64_t)cls);
        std::shuffle(members.begin(), members.end(), rng);
        const std::size_t n = members.size();
        // largest-remainder apportionment of n into the three splits
        std::array<std::size_t, 3> counts;
        std::array<double, 3> rem;
        std::size_t used = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = ratios[s] * (double)n;
            counts[s] = (std::size_t)std::floor(exact);
            rem[s] = exact - (double)counts[s];
            used += counts[s];
        }
        while (used < n) {
            int best = 0;
            for (int s = 1; s < 3; ++s)
                if (rem[s] > rem[best]) best = s;
            ++counts[best];
            rem[best] = -1.0;
            ++used;
        }
        std::size_t k = 0;
        static constexpr Split order[3] = {Split::train, Split::val, Split::test};
        for (int s = 0; s < 3; ++s)
            for (std::size_t j = 0; j < counts[s]; ++j)
                assignment[patient_ids[members[k++]]] = order[s];
    }
    return assignment;
}

std::pair<std::vector<MetadataVector>, MetadataStats> standardize_metadata(
    const std::vector<MetadataVector>& raw, const std::vector<bool>& train_mask) {
    if (raw.size() != train_mask.size())
        throw std::invalid_argument("standardize_metadata: mask length mismatch");
    static const char* names[3] = {"age", "sex", "smoking"};
    for (const auto& m : raw) {
        if (!(m.age > 0)) throw std::invalid_argument("standardize_metadata: age must be positive");
        if (m.sex != 0 && m.sex != 1)
            throw std::invalid_argument("standardize_metadata: sex must be 0 or 1");
        if (m.smoking < 0 || m.smoking > 2)
            throw std::invalid_argument("standardize_metadata: smoking must be 0, 1, or 2");
    }
    MetadataStats stats;
    std::size_t n_train = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!train_mask[i]) continue;
        ++n_train;
        stats.mean[0] += raw[i].age;
        stats.mean[1] += raw[i].sex;
        stats.mean[2] += raw[i].smoking;
    }
    if (n_train == 0) throw std::invalid_argument("standardize_metadata: empty training split");
    for (auto& m : stats.mean) m /= (double)n_train;
    std::array<double, 3> var{};
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!train_mask[i]) continue;
        const double d[3] = {raw[i].age - stats.mean[0], raw[i].sex - stats.mean[1],
                             raw[i].smoking - stats.mean[2]};
        for (int c = 0; c < 3; ++c) var[c] += d[c] * d[c];
    }
    for (int c = 0; c < 3; ++c) {
        var[c] /= (double)n_train;
        if (var[c] < 1e-12)
            throw std::invalid_argument(std::string("standardize_metadata: zero variance in ") +
                                        names[c] + " on the training split");
        stats.stddev[c] = std::sqrt(var[c]);
    }
    std::vector<MetadataVector> out = raw;
    for (auto& m : out) m = apply_metadata_stats(m, stats);
    return {out, stats};
}

MetadataVector apply_metadata_stats(const MetadataVector& raw, const MetadataStats& stats) {
    MetadataVector m = raw;
    m.standardized[0] = (raw.age - stats.mean[0]) / stats.stddev[0];
    m.standardized[1] = ((double)raw.sex - stats.mean[1]) / stats.stddev[1];
    m.standardized[2] = ((double)raw.smoking - stats.mean[2]) / stats.stddev[2];
    return m;
}

}  // namespace dmfuse
