#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dmfuse/preprocess.hpp"

namespace dmfuse {

struct GeneratorConfig {
    std::size_t patients = 500;
    // proportional to the CT class counts 380/320/210/290/250
    std::array<double, 5> class_proportions = {380.0 / 1450.0, 320.0 / 1450.0, 210.0 / 1450.0,
                                               290.0 / 1450.0, 250.0 / 1450.0};
    std::size_t ct_size = 64;
    std::size_t tile_size = 32;
    std::size_t tiles_per_slide = 8;
    double noise_level = 0.04;  // background texture amplitude, windowed units
    bool corruption = false;
    double corruption_prob = 0.5;  // P(corrupt CT | smoking==2), P(corrupt HE | smoking!=2)
    double window_low = -1000.0;
    double window_high = 400.0;
    std::uint64_t seed = 1234;
};

struct PatientRecord {
    std::string patient_id;
    int label = 0;
    MetadataVector meta;  // raw; standardized fields filled by the dataset pipeline
    CTPatch ct;           // pixels windowed to [0,1]
    std::vector<RGBTile> tiles;
    std::vector<Tensor<std::uint8_t>> tile_masks;
    bool ct_corrupted = false;
    bool he_corrupted = false;
};

struct Dataset {
    std::vector<PatientRecord> records;
    SplitAssignment split;
    MetadataStats meta_stats;  // fitted on the training split
};

PatientRecord generate_patient(int class_id, std::uint64_t seed, const GeneratorConfig& cfg);

Dataset generate_dataset(const GeneratorConfig& cfg);

// Replaces one modality's pixels with seeded uniform noise; mask unchanged.
PatientRecord corrupt_modality(const PatientRecord& record, const std::string& modality,
                               std::uint64_t seed);

// Generator health gate: a nearest-centroid classifier over a few handcrafted
// pixel-threshold features, trained and scored on the given records.
double baseline_classifier_accuracy(const std::vector<PatientRecord>& records);

// Largest-remainder class counts for a target patient total.
std::array<std::size_t, 5> class_counts(const GeneratorConfig& cfg);

// ---- on-disk layout --------------------------------------------------------
// <root>/<patient_id>/{ct.pgm, ct_mask.pgm, tiles/NN.ppm, tiles_mask/NN.pgm, meta.json}
// plus <root>/manifest.csv (patient_id, class, split, path)

void save_dataset(const Dataset& ds, const std::string& root);
Dataset load_dataset(const std::string& root);

}  // namespace dmfuse
