#include "dmfuse/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace dmfuse {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

double parse_real(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) fail(line, "trailing characters in value '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        fail(line, "expected a number, got '" + v + "'");
    }
}

std::size_t parse_count(const std::string& v, std::size_t line) {
    const double x = parse_real(v, line);
    if (x < 0 || x != (double)(std::size_t)x)
        fail(line, "expected a nonnegative integer, got '" + v + "'");
    return (std::size_t)x;
}

bool parse_flag(const std::string& v, std::size_t line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(line, "expected true/false, got '" + v + "'");
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(lineno, "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(lineno, "empty key");
        if (value.empty()) fail(lineno, "empty value for key '" + key + "'");

        if (key == "seed") {
            cfg.train.seed = (std::uint64_t)parse_count(value, lineno);
            cfg.gen.seed = cfg.train.seed;
        } else if (key == "learning_rate") {
            cfg.train.learning_rate = parse_real(value, lineno);
        } else if (key == "batch_size") {
            cfg.train.batch_size = parse_count(value, lineno);
        } else if (key == "max_epochs") {
            cfg.train.max_epochs = parse_count(value, lineno);
        } else if (key == "dropout") {
            cfg.train.dropout = parse_real(value, lineno);
        } else if (key == "weight_decay") {
            cfg.train.weight_decay = parse_real(value, lineno);
        } else if (key == "early_stop_patience") {
            cfg.train.early_stop_patience = parse_count(value, lineno);
        } else if (key == "mixup_alpha") {
            cfg.train.mixup_alpha = parse_real(value, lineno);
        } else if (key == "cutmix_alpha") {
            cfg.train.cutmix_alpha = parse_real(value, lineno);
        } else if (key == "mixup_prob") {
            cfg.train.mixup_prob = parse_real(value, lineno);
        } else if (key == "augment") {
            cfg.train.augment = parse_flag(value, lineno);
        } else if (key == "patients") {
            cfg.gen.patients = parse_count(value, lineno);
        } else if (key == "ct_size") {
            cfg.gen.ct_size = parse_count(value, lineno);
        } else if (key == "tile_size") {
            cfg.gen.tile_size = parse_count(value, lineno);
        } else if (key == "tiles_per_slide") {
            cfg.gen.tiles_per_slide = parse_count(value, lineno);
        } else if (key == "noise_level") {
            cfg.gen.noise_level = parse_real(value, lineno);
        } else if (key == "corruption") {
            cfg.gen.corruption = parse_flag(value, lineno);
        } else if (key == "corruption_prob") {
            cfg.gen.corruption_prob = parse_real(value, lineno);
        } else if (key == "window_low") {
            cfg.gen.window_low = parse_real(value, lineno);
        } else if (key == "window_high") {
            cfg.gen.window_high = parse_real(value, lineno);
        } else if (key == "ig_steps") {
            cfg.attr.ig_steps = parse_count(value, lineno);
        } else if (key == "smoothgrad_samples") {
            cfg.attr.smoothgrad_samples = parse_count(value, lineno);
        } else if (key == "smoothgrad_sigma") {
            cfg.attr.smoothgrad_sigma = parse_real(value, lineno);
        } else if (key == "occlusion_patch") {
            cfg.attr.occlusion_patch = parse_count(value, lineno);
        } else if (key == "occlusion_stride") {
            cfg.attr.occlusion_stride = parse_count(value, lineno);
        } else if (key == "insertion_steps") {
            cfg.attr.insertion_steps = parse_count(value, lineno);
        } else if (key == "insertion_blur_sigma") {
            cfg.attr.insertion_blur_sigma = parse_real(value, lineno);
        } else {
            fail(lineno, "unknown key '" + key + "'");
        }
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config_text(ss.str());
}

}  // namespace dmfuse
