#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "dmfuse/model.hpp"
#include "dmfuse/params.hpp"

namespace dmfuse {

// A checkpoint is a ParamSet file plus a JSON sidecar (<path>.json) recording
// the architecture, class names, metadata statistics, head id and seed.
template <class T>
void save_checkpoint(const std::string& path, const DualModel<T>& model, const std::string& head,
                     std::uint64_t seed) {
    save_params(model.params, path);
    nlohmann::ordered_json j;
    j["head"] = head;
    j["seed"] = seed;
    j["class_names"] = kClassNames;
    j["config"] = {{"conv_channels", model.cfg.conv_channels},
                   {"kernel", model.cfg.kernel},
                   {"num_classes", model.cfg.num_classes},
                   {"dropout", model.cfg.dropout},
                   {"attention_hidden", model.cfg.attention_hidden},
                   {"meta_dropout", model.cfg.meta_dropout}};
    j["metadata_stats"] = {{"mean", model.meta_stats.mean}, {"stddev", model.meta_stats.stddev}};
    std::ofstream os(path + ".json");
    if (!os) throw std::runtime_error("cannot write " + path + ".json");
    os << j.dump(2) << "\n";
}

template <class T>
DualModel<T> load_checkpoint(const std::string& path, std::string* head = nullptr,
                             std::uint64_t* seed = nullptr) {
    DualModel<T> model;
    model.params = load_params<T>(path);
    std::ifstream is(path + ".json");
    if (!is) throw std::runtime_error("cannot open " + path + ".json");
    nlohmann::json j = nlohmann::json::parse(is);
    const auto& c = j.at("config");
    model.cfg.conv_channels = c.at("conv_channels").get<std::vector<std::size_t>>();
    model.cfg.kernel = c.at("kernel").get<std::size_t>();
    model.cfg.num_classes = c.at("num_classes").get<std::size_t>();
    model.cfg.dropout = c.at("dropout").get<double>();
    model.cfg.attention_hidden = c.at("attention_hidden").get<std::size_t>();
    model.cfg.meta_dropout = c.at("meta_dropout").get<double>();
    const auto& s = j.at("metadata_stats");
    for (std::size_t i = 0; i < 3; ++i) {
        model.meta_stats.mean[i] = s.at("mean")[i].get<double>();
        model.meta_stats.stddev[i] = s.at("stddev")[i].get<double>();
    }
    if (head) *head = j.at("head").get<std::string>();
    if (seed) *seed = j.at("seed").get<std::uint64_t>();
    return model;
}

}  // namespace dmfuse
