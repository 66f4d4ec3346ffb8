#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmfuse/tensor.hpp"

namespace dmfuse {

struct CTPatch {
    Tensor<float> pixels;             // [H,W], raw intensity until hu_normalize
    Tensor<std::uint8_t> lesion_mask; // [H,W], nonzero = lesion
};

struct RGBTile {
    Tensor<float> pixels;  // [3,H,W] in [0,1]
    double tissue_fraction = 1.0;
};

struct StainReference {
    // columns are unit-norm optical-density vectors: hematoxylin, eosin
    std::array<std::array<double, 2>, 3> stain_matrix;
    std::array<double, 2> max_concentrations;

    static StainReference standard();
};

struct TileRejected : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MetadataVector {
    double age = 0.0;
    int sex = 0;      // 0 female, 1 male
    int smoking = 0;  // 0 never, 1 former, 2 current
    std::array<double, 3> standardized{};
};

struct MetadataStats {
    std::array<double, 3> mean{};
    std::array<double, 3> stddev{};
};

enum class Split { train, val, test };

using SplitAssignment = std::map<std::string, Split>;

struct Sample {
    Tensor<float> image;         // any shape
    std::vector<double> label;   // soft label over K classes
};

// Affine map of [low, high] to [0,1], clipped outside the window.
CTPatch hu_normalize(const CTPatch& patch, double window_low, double window_high);

// Macenko stain normalization toward a fixed reference. Throws TileRejected
// on near-empty or degenerate tiles.
RGBTile macenko_normalize(const RGBTile& tile, const StainReference& reference);

// Stain-vector estimation half of the Macenko procedure, exposed for testing.
// Returns the 3x2 estimated unit-norm stain matrix.
std::array<std::array<double, 2>, 3> macenko_estimate_stains(const RGBTile& tile);

std::vector<Sample> mixup(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                          double alpha, std::uint64_t seed);

std::vector<Sample> cutmix(const std::vector<Sample>& batch_a, const std::vector<Sample>& batch_b,
                           double alpha, std::uint64_t seed);

// Stratified patient-level split, deterministic under seed. labels[i] is the
// class of patient_ids[i].
SplitAssignment patient_split(const std::vector<std::string>& patient_ids,
                              const std::vector<int>& labels,
                              const std::array<double, 3>& ratios, std::uint64_t seed);

// Z-scores (age, sex, smoking) with statistics fitted on the training rows only.
std::pair<std::vector<MetadataVector>, MetadataStats> standardize_metadata(
    const std::vector<MetadataVector>& raw, const std::vector<bool>& train_mask);

MetadataVector apply_metadata_stats(const MetadataVector& raw, const MetadataStats& stats);

}  // namespace dmfuse
