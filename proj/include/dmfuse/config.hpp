#pragma once

#include <stdexcept>
#include <string>

#include "dmfuse/synthdata.hpp"
#include "dmfuse/training.hpp"

namespace dmfuse {

struct AttributionConfig {
    std::size_t ig_steps = 128;
    std::size_t smoothgrad_samples = 25;
    double smoothgrad_sigma = 0.1;
    std::size_t occlusion_patch = 8;
    std::size_t occlusion_stride = 4;
    std::size_t insertion_steps = 100;
    double insertion_blur_sigma = 4.0;
};

struct RunConfig {
    TrainConfig train;
    GeneratorConfig gen;
    AttributionConfig attr;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// `key = value` lines, '#' comments, unknown keys rejected with key + line number
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace dmfuse
