#include "dmfuse/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "dmfuse/image.hpp"
#include "dmfuse/rng.hpp"

namespace fs = std::filesystem;

namespace dmfuse {

namespace {

constexpr double kBackgroundHU = -750.0;
constexpr double kBrightThreshold = 0.45;  // windowed units, for the baseline self-test

struct Point {
    double y, x;
};

// smooth low-frequency noise from a few random cosine waves
std::vector<double> smooth_field(std::size_t h, std::size_t w, double amplitude, Rng& rng) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> freq(0.05, 0.25);
    std::vector<double> field(h * w, 0.0);
    for (int k = 0; k < 4; ++k) {
        const double fy = freq(rng), fx = freq(rng), ph = phase(rng);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                field[y * w + x] += std::cos(fy * (double)y + fx * (double)x + ph);
    }
    for (auto& v : field) v *= amplitude / 4.0;
    return field;
}

void generate_ct(PatientRecord& rec, const GeneratorConfig& cfg, Rng& rng) {
    const std::size_t n = cfg.ct_size;
    CTPatch raw;
    raw.pixels = Tensor<float>({n, n});
    raw.lesion_mask = Tensor<std::uint8_t>({n, n});
    std::normal_distribution<double> noise(0.0, cfg.noise_level * (cfg.window_high - cfg.window_low));
    const auto texture = smooth_field(n, n, 40.0, rng);
    // Diseased parenchyma is denser than healthy aerated lung, so the normal
    // class sits on a darker background; this gives it a positive signature of
    // its own instead of being "none of the lesion shapes".
    const double background = rec.label == 4 ? -880.0 : kBackgroundHU;
    for (std::size_t i = 0; i < n * n; ++i)
        raw.pixels[i] = (float)(background + texture[i] + noise(rng));

    std::uniform_real_distribution<double> ucenter((double)n * 0.3, (double)n * 0.7);
    const double cy = ucenter(rng), cx = ucenter(rng);
    auto set_lesion = [&](std::size_t y, std::size_t x, double hu) {
        raw.pixels[y * n + x] = (float)hu;
        raw.lesion_mask[y * n + x] = 1;
    };

    // Each class pairs its shape with a distinct intensity/extent/frequency
    // profile so the classes separate by construction.
    switch (rec.label) {
        case 0: {  // adenocarcinoma: large bright smooth blob (raises mean, low frequency)
            std::uniform_real_distribution<double> us(9.0, 11.0);
            const double sigma = us(rng);
            const double support = sigma * std::sqrt(2.0 * std::log(1.0 / 0.3));
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double d2 = ((double)y - cy) * ((double)y - cy) +
                                      ((double)x - cx) * ((double)x - cx);
                    if (d2 <= support * support) {
                        const double f = std::exp(-d2 / (2.0 * sigma * sigma));
                        set_lesion(y, x, -750.0 + 1050.0 * f);
                    }
                }
            break;
        }
        case 1: {  // squamous: wide mid-gray ring annulus (one large mid-frequency edge)
            std::uniform_real_distribution<double> ur(12.5, 14.5);
            const double r0 = ur(rng), half_th = 3.5;
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double d = std::hypot((double)y - cy, (double)x - cx);
                    if (std::fabs(d - r0) <= half_th) set_lesion(y, x, -50.0);
                    // the cavity enclosed by the ring belongs to the nodule extent
                    else if (d < r0) raw.lesion_mask[y * n + x] = 1;
                }
            break;
        }
        case 2: {  // large cell: very large near-black polygon (lowers mean)
            std::uniform_real_distribution<double> ur(16.0, 20.0);
            std::uniform_real_distribution<double> uph(0.0, 2.0 * M_PI);
            const double r0 = ur(rng), p1 = uph(rng), p2 = uph(rng);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double dy = (double)y - cy, dx = (double)x - cx;
                    const double d = std::hypot(dy, dx);
                    const double th = std::atan2(dy, dx);
                    const double edge =
                        r0 * (1.0 + 0.25 * std::sin(3.0 * th + p1) + 0.15 * std::sin(5.0 * th + p2));
                    if (d <= edge) set_lesion(y, x, -1000.0);
                }
            break;
        }
        case 3: {  // SCLC: cluster of many small very bright dots (high frequency)
            std::uniform_int_distribution<int> ucount(28, 34);
            std::uniform_real_distribution<double> uradius(13.0, 15.0);
            std::uniform_real_distribution<double> uang(0.0, 2.0 * M_PI);
            std::uniform_real_distribution<double> uu(0.0, 1.0);
            std::uniform_real_distribution<double> urad(1.3, 1.7);
            const double cluster_r = uradius(rng);
            const int dots = ucount(rng);
            for (int k = 0; k < dots; ++k) {
                // area-uniform placement inside the cluster disc
                const double rho = (cluster_r - 2.0) * std::sqrt(uu(rng));
                const double ang = uang(rng);
                const double dy = cy + rho * std::sin(ang), dx = cx + rho * std::cos(ang);
                const double r = urad(rng);
                for (std::size_t y = 0; y < n; ++y)
                    for (std::size_t x = 0; x < n; ++x)
                        if (std::hypot((double)y - dy, (double)x - dx) <= r)
                            raw.pixels[y * n + x] = 300.0f;
            }
            // the involved region is the cluster disc, not the individual dots
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x)
                    if (std::hypot((double)y - cy, (double)x - cx) <= cluster_r)
                        raw.lesion_mask[y * n + x] = 1;
            break;
        }
        default:
            break;  // normal: background only
    }
    CTPatch windowed = hu_normalize(raw, cfg.window_low, cfg.window_high);
    rec.ct.pixels = std::move(windowed.pixels);
    rec.ct.lesion_mask = std::move(raw.lesion_mask);
}

// per-slide stain matrix: reference columns with a small random perturbation
std::array<std::array<double, 2>, 3> slide_stain_matrix(Rng& rng) {
    auto m = StainReference::standard().stain_matrix;
    std::normal_distribution<double> jitter(0.0, 0.03);
    for (int col = 0; col < 2; ++col) {
        double norm = 0.0;
        for (int i = 0; i < 3; ++i) {
            m[i][col] = std::max(0.0, m[i][col] + jitter(rng));
            norm += m[i][col] * m[i][col];
        }
        norm = std::sqrt(norm);
        for (int i = 0; i < 3; ++i) m[i][col] /= norm;
    }
    return m;
}

void generate_tiles(PatientRecord& rec, const GeneratorConfig& cfg, Rng& rng) {
    const std::size_t s = cfg.tile_size;
    const auto stains = slide_stain_matrix(rng);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::size_t t = 0; t < cfg.tiles_per_slide; ++t) {
        std::vector<double> hema(s * s, 0.0), eos(s * s, 0.0);
        const auto hfield = smooth_field(s, s, 0.04, rng);
        const auto efield = smooth_field(s, s, 0.05, rng);
        for (std::size_t i = 0; i < s * s; ++i) {
            hema[i] = std::max(0.0, 0.08 + hfield[i]);
            eos[i] = std::max(0.0, 0.28 + efield[i]);
        }
        Tensor<std::uint8_t> mask({s, s});
        auto mark = [&](std::size_t i) { mask[i] = 1; };
        std::uniform_real_distribution<double> upos(3.0, (double)s - 3.0);
        switch (rec.label) {
            case 0: {  // coarse pink-dominant texture
                std::uniform_int_distribution<int> ucount(5, 7);
                std::uniform_real_distribution<double> urad(7.0, 10.0);
                const int blobs = ucount(rng);
                std::vector<double> field(s * s, 0.0);
                for (int k = 0; k < blobs; ++k) {
                    const double by = upos(rng), bx = upos(rng), r = urad(rng);
                    for (std::size_t y = 0; y < s; ++y)
                        for (std::size_t x = 0; x < s; ++x) {
                            const double d2 = ((double)y - by) * ((double)y - by) +
                                              ((double)x - bx) * ((double)x - bx);
                            field[y * s + x] =
                                std::max(field[y * s + x], std::exp(-d2 / (2.0 * r * r / 4.0)));
                        }
                }
                for (std::size_t i = 0; i < s * s; ++i)
                    if (field[i] >= 0.3) {
                        eos[i] += 1.5 * field[i];
                        hema[i] += 0.45 * field[i];  // faint glandular rims
                        mark(i);
                    }
                break;
            }
            case 1: {  // strongly stained purple clusters
                std::uniform_int_distribution<int> ucount(24, 30);
                std::uniform_real_distribution<double> urad(1.8, 2.5);
                const int discs = ucount(rng);
                for (int k = 0; k < discs; ++k) {
                    const double by = upos(rng), bx = upos(rng), r = urad(rng);
                    for (std::size_t y = 0; y < s; ++y)
                        for (std::size_t x = 0; x < s; ++x)
                            if (std::hypot((double)y - by, (double)x - bx) <= r) {
                                hema[y * s + x] += 1.6;
                                eos[y * s + x] *= 0.05;  // nuclei displace cytoplasm
                                mark(y * s + x);
                            }
                }
                break;
            }
            case 2: {  // sparse large pale nuclei blobs
                std::uniform_int_distribution<int> ucount(2, 3);
                std::uniform_real_distribution<double> urad(7.0, 10.0);
                const int blobs = ucount(rng);
                for (int k = 0; k < blobs; ++k) {
                    const double by = upos(rng), bx = upos(rng), r = urad(rng);
                    for (std::size_t y = 0; y < s; ++y)
                        for (std::size_t x = 0; x < s; ++x)
                            if (std::hypot((double)y - by, (double)x - bx) <= r) {
                                hema[y * s + x] += 0.55;
                                mark(y * s + x);
                            }
                }
                break;
            }
            case 3: {  // fine high-frequency speckle in both stains
                for (std::size_t i = 0; i < s * s; ++i)
                    if (u01(rng) < 0.30) {
                        hema[i] += 0.9;
                        eos[i] += 0.9;
                        mark(i);
                    }
                break;
            }
            default: {  // normal tissue: sparse pale nuclei, no lesion
                std::uniform_int_distribution<int> ucount(6, 9);
                std::uniform_real_distribution<double> urad(1.3, 1.8);
                const int discs = ucount(rng);
                for (int k = 0; k < discs; ++k) {
                    const double by = upos(rng), bx = upos(rng), r = urad(rng);
                    for (std::size_t y = 0; y < s; ++y)
                        for (std::size_t x = 0; x < s; ++x)
                            if (std::hypot((double)y - by, (double)x - bx) <= r)
                                hema[y * s + x] += 0.5;
                }
                break;
            }
        }
        RGBTile tile;
        tile.pixels = Tensor<float>({3, s, s});
        std::size_t fg = 0;
        for (std::size_t i = 0; i < s * s; ++i) {
            double od_norm2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double od = stains[c][0] * hema[i] + stains[c][1] * eos[i];
                od_norm2 += od * od;
                tile.pixels.values[c * s * s + i] =
                    (float)std::clamp(std::pow(10.0, -od), 0.0, 1.0);
            }
            if (std::sqrt(od_norm2) >= 0.15) ++fg;
        }
        tile.tissue_fraction = (double)fg / (double)(s * s);
        rec.tiles.push_back(std::move(tile));
        rec.tile_masks.push_back(std::move(mask));
    }
}

void generate_metadata(PatientRecord& rec, Rng& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> age_dist(65.0, 8.0);
    rec.meta.age = std::clamp(age_dist(rng), 30.0, 90.0);
    rec.meta.sex = u01(rng) < 0.5 ? 0 : 1;
    const double p_smoker = (rec.label == 1 || rec.label == 3) ? 0.8 : 0.3;
    if (u01(rng) < p_smoker)
        rec.meta.smoking = u01(rng) < 0.5 ? 1 : 2;
    else
        rec.meta.smoking = 0;
}

}  // namespace

PatientRecord generate_patient(int class_id, std::uint64_t seed, const GeneratorConfig& cfg) {
    if (class_id < 0 || class_id >= 5)
        throw std::invalid_argument("generate_patient: class id out of range");
    PatientRecord rec;
    rec.label = class_id;
    Rng rng(seed);
    generate_metadata(rec, rng);
    generate_ct(rec, cfg, rng);
    generate_tiles(rec, cfg, rng);
    return rec;
}

std::array<std::size_t, 5> class_counts(const GeneratorConfig& cfg) {
    double total = 0.0;
    for (double p : cfg.class_proportions) total += p;
    if (std::fabs(total - 1.0) > 1e-9)
        throw std::invalid_argument("generate_dataset: class proportions must sum to 1");
    std::array<std::size_t, 5> counts{};
    std::array<double, 5> rem{};
    std::size_t used = 0;
    for (int c = 0; c < 5; ++c) {
        const double exact = cfg.class_proportions[c] * (double)cfg.patients;
        counts[c] = (std::size_t)std::floor(exact);
        rem[c] = exact - (double)counts[c];
        used += counts[c];
    }
    while (used < cfg.patients) {
        int best = 0;
        for (int c = 1; c < 5; ++c)
            if (rem[c] > rem[best]) best = c;
        ++counts[best];
        rem[best] = -1.0;
        ++used;
    }
    for (int c = 0; c < 5; ++c)
        if (counts[c] < 1)
            throw std::invalid_argument("generate_dataset: class " + std::to_string(c) +
                                        " would receive zero patients");
    return counts;
}

PatientRecord corrupt_modality(const PatientRecord& record, const std::string& modality,
                               std::uint64_t seed) {
    if (modality != "ct" && modality != "he")
        throw std::invalid_argument("corrupt_modality: modality must be 'ct' or 'he'");
    PatientRecord out = record;
    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (modality == "ct") {
        for (auto& v : out.ct.pixels.values) v = (float)u01(rng);
        out.ct_corrupted = true;
    } else {
        for (auto& tile : out.tiles)
            for (auto& v : tile.pixels.values) v = (float)u01(rng);
        out.he_corrupted = true;
    }
    return out;
}

Dataset generate_dataset(const GeneratorConfig& cfg) {
    const auto counts = class_counts(cfg);
    std::vector<int> labels;
    for (int c = 0; c < 5; ++c) labels.insert(labels.end(), counts[c], c);
    {
        Rng rng = make_rng(cfg.seed, "class_order");
        std::shuffle(labels.begin(), labels.end(), rng);
    }
    Dataset ds;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::uint64_t pseed = derive_seed(cfg.seed, "patient", i);
        PatientRecord rec = generate_patient(labels[i], pseed, cfg);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "p%04zu", i);
        rec.patient_id = buf;
        if (cfg.corruption) {
            Rng crng = make_rng(cfg.seed, "corruption", i);
            std::uniform_real_distribution<double> u01(0.0, 1.0);
            if (rec.meta.smoking == 2) {
                if (u01(crng) < cfg.corruption_prob)
                    rec = corrupt_modality(rec, "ct", derive_seed(cfg.seed, "corrupt_ct", i));
            } else {
                if (u01(crng) < cfg.corruption_prob)
                    rec = corrupt_modality(rec, "he", derive_seed(cfg.seed, "corrupt_he", i));
            }
        }
        ids.push_back(rec.patient_id);
        ds.records.push_back(std::move(rec));
    }
    ds.split = patient_split(ids, labels, {0.70, 0.10, 0.20}, derive_seed(cfg.seed, "split"));

    std::vector<MetadataVector> raw;
    std::vector<bool> train_mask;
    for (const auto& r : ds.records) {
        raw.push_back(r.meta);
        train_mask.push_back(ds.split.at(r.patient_id) == Split::train);
    }
    auto [standardized, stats] = standardize_metadata(raw, train_mask);
    ds.meta_stats = stats;
    for (std::size_t i = 0; i < ds.records.size(); ++i) ds.records[i].meta = standardized[i];
    return ds;
}

double baseline_classifier_accuracy(const std::vector<PatientRecord>& records) {
    // features: log bright-pixel count, centroid-disc fill, radial spread,
    // and overall mean intensity (separates dark-lesion patches from the
    // darker healthy-parenchyma background)
    auto features = [](const PatientRecord& r) {
        const std::size_t n = r.ct.pixels.shape[0];
        std::vector<Point> bright;
        double mean_px = 0.0;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                mean_px += r.ct.pixels[y * n + x];
                if (r.ct.pixels[y * n + x] > kBrightThreshold)
                    bright.push_back({(double)y, (double)x});
            }
        std::array<double, 4> f{std::log(1.0 + (double)bright.size()), 0.0, 0.0,
                                mean_px / (double)(n * n)};
        if (bright.empty()) return f;
        double cy = 0, cx = 0;
        for (const auto& p : bright) {
            cy += p.y;
            cx += p.x;
        }
        cy /= (double)bright.size();
        cx /= (double)bright.size();
        std::size_t disc_total = 0, disc_bright = 0;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x)
                if (std::hypot((double)y - cy, (double)x - cx) <= 3.5) {
                    ++disc_total;
                    if (r.ct.pixels[y * n + x] > kBrightThreshold) ++disc_bright;
                }
        f[1] = disc_total ? (double)disc_bright / (double)disc_total : 0.0;
        double mean_d = 0;
        for (const auto& p : bright) mean_d += std::hypot(p.y - cy, p.x - cx);
        mean_d /= (double)bright.size();
        double var_d = 0;
        for (const auto& p : bright) {
            const double d = std::hypot(p.y - cy, p.x - cx) - mean_d;
            var_d += d * d;
        }
        f[2] = std::sqrt(var_d / (double)bright.size());
        return f;
    };
    std::array<std::array<double, 4>, 5> centroid{};
    std::array<std::size_t, 5> count{};
    std::vector<std::array<double, 4>> feats;
    for (const auto& r : records) {
        feats.push_back(features(r));
        for (int k = 0; k < 4; ++k) centroid[r.label][k] += feats.back()[k];
        ++count[r.label];
    }
    for (int c = 0; c < 5; ++c)
        if (count[c])
            for (int k = 0; k < 4; ++k) centroid[c][k] /= (double)count[c];
    // per-feature scale so no feature dominates
    std::array<double, 4> scale{};
    for (const auto& f : feats)
        for (int k = 0; k < 4; ++k) scale[k] += f[k] * f[k];
    for (int k = 0; k < 4; ++k) scale[k] = std::max(1e-9, std::sqrt(scale[k] / (double)feats.size()));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        int best = -1;
        double best_d = 0;
        for (int c = 0; c < 5; ++c) {
            if (!count[c]) continue;
            double d = 0;
            for (int k = 0; k < 4; ++k) {
                const double diff = (feats[i][k] - centroid[c][k]) / scale[k];
                d += diff * diff;
            }
            if (best < 0 || d < best_d) {
                best = c;
                best_d = d;
            }
        }
        if (best == records[i].label) ++correct;
    }
    return (double)correct / (double)records.size();
}

// ---- persistence -----------------------------------------------------------

namespace {

Raster gray_from_float(const Tensor<float>& img) {
    Tensor<float> planar({1, img.shape[0], img.shape[1]}, img.values);
    return planar_to_raster(planar);
}

Raster gray_from_mask(const Tensor<std::uint8_t>& mask) {
    Raster img;
    img.channels = 1;
    img.height = mask.shape[0];
    img.width = mask.shape[1];
    img.data.resize(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) img.data[i] = mask[i] ? 255 : 0;
    return img;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

Split split_from_name(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::runtime_error("unknown split name: " + s);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& root) {
    fs::create_directories(root);
    std::vector<const PatientRecord*> ordered;
    for (const auto& r : ds.records) ordered.push_back(&r);
    std::sort(ordered.begin(), ordered.end(),
              [](const PatientRecord* a, const PatientRecord* b) {
                  return a->patient_id < b->patient_id;
              });
    std::ofstream manifest(fs::path(root) / "manifest.csv");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + root);
    manifest << "patient_id,class,split,path\n";
    for (const PatientRecord* r : ordered) {
        const fs::path dir = fs::path(root) / r->patient_id;
        fs::create_directories(dir / "tiles");
        fs::create_directories(dir / "tiles_mask");
        write_pgm((dir / "ct.pgm").string(), gray_from_float(r->ct.pixels));
        write_pgm((dir / "ct_mask.pgm").string(), gray_from_mask(r->ct.lesion_mask));
        for (std::size_t t = 0; t < r->tiles.size(); ++t) {
            char name[16];
            std::snprintf(name, sizeof(name), "%02zu", t);
            write_ppm((dir / "tiles" / (std::string(name) + ".ppm")).string(),
                      planar_to_raster(r->tiles[t].pixels));
            write_pgm((dir / "tiles_mask" / (std::string(name) + ".pgm")).string(),
                      gray_from_mask(r->tile_masks[t]));
        }
        nlohmann::ordered_json meta;
        meta["patient_id"] = r->patient_id;
        meta["class"] = r->label;
        meta["age"] = r->meta.age;
        meta["sex"] = r->meta.sex;
        meta["smoking"] = r->meta.smoking;
        meta["ct_corrupted"] = r->ct_corrupted;
        meta["he_corrupted"] = r->he_corrupted;
        std::ofstream mf(dir / "meta.json");
        mf << meta.dump(2) << "\n";
        manifest << r->patient_id << "," << r->label << ","
                 << split_name(ds.split.at(r->patient_id)) << "," << r->patient_id << "\n";
    }
}

Dataset load_dataset(const std::string& root) {
    std::ifstream manifest(fs::path(root) / "manifest.csv");
    if (!manifest) throw std::runtime_error("missing manifest.csv in " + root);
    std::string line;
    std::getline(manifest, line);  // header
    Dataset ds;
    std::vector<MetadataVector> raw;
    std::vector<bool> train_mask;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t comma = line.find(',', pos);
            cols.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cols.size() != 4) throw std::runtime_error("malformed manifest row: " + line);
        PatientRecord rec;
        rec.patient_id = cols[0];
        rec.label = std::stoi(cols[1]);
        ds.split[rec.patient_id] = split_from_name(cols[2]);
        const fs::path dir = fs::path(root) / cols[3];

        nlohmann::json meta;
        std::ifstream mf(dir / "meta.json");
        if (!mf) throw std::runtime_error("missing meta.json for " + rec.patient_id);
        mf >> meta;
        rec.meta.age = meta.at("age").get<double>();
        rec.meta.sex = meta.at("sex").get<int>();
        rec.meta.smoking = meta.at("smoking").get<int>();
        rec.ct_corrupted = meta.value("ct_corrupted", false);
        rec.he_corrupted = meta.value("he_corrupted", false);

        const Raster ct = read_raster((dir / "ct.pgm").string());
        rec.ct.pixels = Tensor<float>({ct.height, ct.width});
        for (std::size_t i = 0; i < ct.data.size(); ++i)
            rec.ct.pixels[i] = (float)ct.data[i] / 255.0f;
        const Raster cm = read_raster((dir / "ct_mask.pgm").string());
        rec.ct.lesion_mask = Tensor<std::uint8_t>({cm.height, cm.width});
        for (std::size_t i = 0; i < cm.data.size(); ++i)
            rec.ct.lesion_mask[i] = cm.data[i] ? 1 : 0;

        for (std::size_t t = 0;; ++t) {
            char name[16];
            std::snprintf(name, sizeof(name), "%02zu", t);
            const fs::path tile_path = dir / "tiles" / (std::string(name) + ".ppm");
            if (!fs::exists(tile_path)) break;
            RGBTile tile;
            tile.pixels = raster_to_planar(read_raster(tile_path.string()));
            rec.tiles.push_back(std::move(tile));
            const Raster tm =
                read_raster((dir / "tiles_mask" / (std::string(name) + ".pgm")).string());
            Tensor<std::uint8_t> mask({tm.height, tm.width});
            for (std::size_t i = 0; i < tm.data.size(); ++i) mask[i] = tm.data[i] ? 1 : 0;
            rec.tile_masks.push_back(std::move(mask));
        }
        raw.push_back(rec.meta);
        train_mask.push_back(ds.split.at(rec.patient_id) == Split::train);
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.empty()) throw std::runtime_error("empty dataset in " + root);
    auto [standardized, stats] = standardize_metadata(raw, train_mask);
    ds.meta_stats = stats;
    for (std::size_t i = 0; i < ds.records.size(); ++i) ds.records[i].meta = standardized[i];
    return ds;
}

}  // namespace dmfuse
