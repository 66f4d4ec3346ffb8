#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dmfuse/autodiff.hpp"
#include "dmfuse/params.hpp"
#include "dmfuse/preprocess.hpp"

namespace dmfuse {

inline const std::vector<std::string> kClassNames = {
    "adenocarcinoma", "squamous_cell_carcinoma", "large_cell_carcinoma", "sclc", "normal"};

struct BranchConfig {
    std::vector<std::size_t> conv_channels{8, 16, 32};
    std::size_t kernel = 3;          // 3x3 convs, pad 1, each block followed by 2x2 max-pool
    std::size_t num_classes = 5;
    double dropout = 0.5;            // before each classification head
    std::size_t attention_hidden = 16;
    double meta_dropout = 0.3;
    // fixed amplification of the standardized pooled feature as it enters the
    // classification head; leaves optimizer dynamics unchanged (Adam updates
    // are scale-invariant per coordinate) but widens the logit range so the
    // softmax can express confident predictions within a short schedule
    double head_gain = 32.0;

    std::size_t feature_dim() const { return conv_channels.back(); }
};

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

// ---- parameter construction -----------------------------------------------

template <class T>
void init_conv_stack(ParamSet<T>& p, const BranchConfig& cfg, const std::string& prefix,
                     std::size_t in_channels, Rng& rng) {
    std::size_t cin = in_channels;
    for (std::size_t b = 0; b < cfg.conv_channels.size(); ++b) {
        const std::size_t cout = cfg.conv_channels[b];
        const double std_dev = std::sqrt(2.0 / (double)(cin * cfg.kernel * cfg.kernel));
        std::normal_distribution<double> dist(0.0, std_dev);
        Tensor<T> k({cout, cin, cfg.kernel, cfg.kernel});
        for (auto& v : k.values) v = (T)dist(rng);
        p[prefix + ".block" + std::to_string(b) + ".k"] = std::move(k);
        p[prefix + ".block" + std::to_string(b) + ".b"] = Tensor<T>({cout});
        cin = cout;
    }
}

template <class T>
void init_dense(ParamSet<T>& p, const std::string& name, std::size_t out_dim, std::size_t in_dim,
                Rng& rng, double gain = 2.0) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / (double)in_dim));
    Tensor<T> w({out_dim, in_dim});
    for (auto& v : w.values) v = (T)dist(rng);
    p[name + ".w"] = std::move(w);
    p[name + ".b"] = Tensor<T>({out_dim});
}

template <class T>
struct DualModel {
    BranchConfig cfg;
    ParamSet<T> params;
    MetadataStats meta_stats;  // filled after standardize_metadata

    static DualModel init(const BranchConfig& cfg, std::uint64_t seed) {
        DualModel m;
        m.cfg = cfg;
        Rng rng = make_rng(seed, "model_init");
        const std::size_t d = cfg.feature_dim();
        init_conv_stack(m.params, cfg, "ct", 1, rng);
        // feature standardization starts at identity; calibrated on the
        // training set before the head is trained (see calibrate_feature_norm)
        m.params["ct.norm.mean"] = Tensor<T>({d});
        m.params["ct.norm.scale"] = Tensor<T>({d}, std::vector<T>(d, T(1)));
        // classification heads start at zero so early updates follow the
        // class-conditional feature statistics rather than random projections
        m.params["ct.head.w"] = Tensor<T>({cfg.num_classes, d});
        m.params["ct.head.b"] = Tensor<T>({cfg.num_classes});
        init_conv_stack(m.params, cfg, "he", 3, rng);
        std::normal_distribution<double> att(0.0, std::sqrt(1.0 / (double)d));
        Tensor<T> v_mat({cfg.attention_hidden, d});
        for (auto& x : v_mat.values) x = (T)att(rng);
        m.params["he.att.V"] = std::move(v_mat);
        Tensor<T> w_vec({1, cfg.attention_hidden});
        std::normal_distribution<double> att2(0.0, std::sqrt(1.0 / (double)cfg.attention_hidden));
        for (auto& x : w_vec.values) x = (T)att2(rng);
        m.params["he.att.w"] = std::move(w_vec);
        m.params["he.norm.mean"] = Tensor<T>({d});
        m.params["he.norm.scale"] = Tensor<T>({d}, std::vector<T>(d, T(1)));
        m.params["he.head.w"] = Tensor<T>({cfg.num_classes, d});
        m.params["he.head.b"] = Tensor<T>({cfg.num_classes});
        init_dense(m.params, "meta.fc1", 64, 3, rng);
        init_dense(m.params, "meta.fc2", 32, 64, rng);
        // gate starts at equal weighting (0.5, 0.5)
        m.params["gate.w"] = Tensor<T>({2, 32});
        m.params["gate.b"] = Tensor<T>({2});
        return m;
    }

    ParamVars<T> leaves(Tape<T>& tape,
                        const std::function<bool(const std::string&)>& trainable) const {
        ParamVars<T> vars;
        for (const auto& [name, tensor] : params)
            vars[name] = tape.leaf(tensor, trainable(name));
        return vars;
    }

    ParamVars<T> leaves(Tape<T>& tape, bool trainable = false) const {
        return leaves(tape, [trainable](const std::string&) { return trainable; });
    }
};

// ---- forwards --------------------------------------------------------------

template <class T>
struct BranchOut {
    std::vector<Var<T>> conv_acts;  // post-ReLU activation of each block, pre-pool
    Var<T> feature = nullptr;       // [D]
    Var<T> logits = nullptr;        // [K]
};

// Shared conv-stack encoder: conv(3x3, pad 1) -> ReLU -> maxpool(2) per block,
// then global average pool.
template <class T>
Var<T> encode_image(Tape<T>& tape, const ParamVars<T>& L, const BranchConfig& cfg,
                    const std::string& prefix, Var<T> x,
                    std::vector<Var<T>>* conv_acts = nullptr) {
    Var<T> h = x;
    for (std::size_t b = 0; b < cfg.conv_channels.size(); ++b) {
        const std::string base = prefix + ".block" + std::to_string(b);
        h = conv2d(tape, h, L.at(base + ".k"), L.at(base + ".b"), 1, cfg.kernel / 2);
        h = relu(tape, h);
        if (conv_acts) conv_acts->push_back(h);
        h = maxpool2d(tape, h, 2);
    }
    Var<T> f = global_avg_pool(tape, h);
    // standardize pooled features with training-set statistics (calibrated
    // once at initialization; identity until calibrate_feature_norm runs)
    Var<T> centered = add(tape, f, scale(tape, L.at(prefix + ".norm.mean"), T(-1)));
    return mul(tape, centered, L.at(prefix + ".norm.scale"));
}

template <class T>
BranchOut<T> ct_forward(Tape<T>& tape, const ParamVars<T>& L, const BranchConfig& cfg, Var<T> x,
                        bool train_mode, Rng& rng) {
    if (x->value.rank() != 3 || x->value.shape[0] != 1)
        throw std::invalid_argument("ct_forward: expected [1,H,W] input, got " +
                                    shape_str(x->value.shape));
    BranchOut<T> out;
    out.feature = encode_image(tape, L, cfg, "ct", x, &out.conv_acts);
    Var<T> f = dropout(tape, out.feature, cfg.dropout, train_mode, rng);
    f = scale(tape, f, (T)cfg.head_gain);
    out.logits = dense(tape, f, L.at("ct.head.w"), L.at("ct.head.b"));
    return out;
}

template <class T>
struct HEOut {
    std::vector<std::vector<Var<T>>> tile_conv_acts;
    std::vector<Var<T>> tile_embeds;  // h_i, each [D]
    Var<T> attention = nullptr;       // [n], softmax over tiles
    Var<T> feature = nullptr;         // attention-weighted embedding [D]
    Var<T> logits = nullptr;
};

// MIL attention pooling: s_i = w^T tanh(V h_i), a = softmax(s), f = sum a_i h_i
template <class T>
HEOut<T> he_forward(Tape<T>& tape, const ParamVars<T>& L, const BranchConfig& cfg,
                    const std::vector<Var<T>>& tiles, bool train_mode, Rng& rng) {
    if (tiles.empty())
        throw std::invalid_argument(
            "he_forward: empty tile bag; relax tile filtering for this slide");
    HEOut<T> out;
    std::vector<Var<T>> scores;
    for (Var<T> tile : tiles) {
        if (tile->value.rank() != 3 || tile->value.shape[0] != 3)
            throw std::invalid_argument("he_forward: expected [3,H,W] tiles, got " +
                                        shape_str(tile->value.shape));
        std::vector<Var<T>> acts;
        Var<T> h = encode_image(tape, L, cfg, "he", tile, &acts);
        out.tile_conv_acts.push_back(std::move(acts));
        out.tile_embeds.push_back(h);
        Var<T> hidden = tanh_op(tape, dense(tape, h, L.at("he.att.V"), (Var<T>) nullptr));
        scores.push_back(dense(tape, hidden, L.at("he.att.w"), (Var<T>) nullptr));
    }
    out.attention = softmax(tape, concat(tape, scores));
    Var<T> f = mul(tape, index(tape, out.attention, 0), out.tile_embeds[0]);
    for (std::size_t i = 1; i < tiles.size(); ++i)
        f = add(tape, f, mul(tape, index(tape, out.attention, i), out.tile_embeds[i]));
    out.feature = f;
    Var<T> fd = dropout(tape, f, cfg.dropout, train_mode, rng);
    fd = scale(tape, fd, (T)cfg.head_gain);
    out.logits = dense(tape, fd, L.at("he.head.w"), L.at("he.head.b"));
    return out;
}

// Two-layer MLP on the standardized metadata triple -> 32-d clinical embedding.
template <class T>
Var<T> metadata_encode(Tape<T>& tape, const ParamVars<T>& L, const BranchConfig& cfg,
                       const MetadataVector& meta, bool train_mode, Rng& rng,
                       Var<T>* input_leaf = nullptr) {
    if ((meta.sex != 0 && meta.sex != 1) || meta.smoking < 0 || meta.smoking > 2)
        throw std::invalid_argument("metadata_encode: raw codes out of range (unstandardized?)");
    Tensor<T> x({3}, {(T)meta.standardized[0], (T)meta.standardized[1], (T)meta.standardized[2]});
    Var<T> v = tape.leaf(std::move(x), input_leaf != nullptr);
    if (input_leaf) *input_leaf = v;
    Var<T> h = relu(tape, dense(tape, v, L.at("meta.fc1.w"), L.at("meta.fc1.b")));
    h = dropout(tape, h, cfg.meta_dropout, train_mode, rng);
    h = relu(tape, dense(tape, h, L.at("meta.fc2.w"), L.at("meta.fc2.b")));
    return dropout(tape, h, cfg.meta_dropout, train_mode, rng);
}

template <class T>
Var<T> gate_weights(Tape<T>& tape, const ParamVars<T>& L, Var<T> embedding) {
    return softmax(tape, dense(tape, embedding, L.at("gate.w"), L.at("gate.b")));
}

template <class T>
Var<T> fuse_logits(Tape<T>& tape, Var<T> z_ct, Var<T> z_he, Var<T> weights) {
    if (z_ct->value.shape != z_he->value.shape)
        throw std::invalid_argument("fuse_logits: logit length mismatch");
    Var<T> a = mul(tape, index(tape, weights, 0), z_ct);
    Var<T> b = mul(tape, index(tape, weights, 1), z_he);
    return add(tape, a, b);
}

template <class T>
struct FusedOut {
    BranchOut<T> ct;
    HEOut<T> he;
    Var<T> embedding = nullptr;
    Var<T> weights = nullptr;  // [w_ct, w_he]
    Var<T> logits = nullptr;
    Var<T> probs = nullptr;
};

template <class T>
FusedOut<T> fused_forward(Tape<T>& tape, const ParamVars<T>& L, const BranchConfig& cfg,
                          Var<T> ct_image, const std::vector<Var<T>>& tiles,
                          const MetadataVector& meta, bool train_mode, Rng& rng) {
    FusedOut<T> out;
    out.ct = ct_forward(tape, L, cfg, ct_image, train_mode, rng);
    out.he = he_forward(tape, L, cfg, tiles, train_mode, rng);
    out.embedding = metadata_encode(tape, L, cfg, meta, train_mode, rng);
    out.weights = gate_weights(tape, L, out.embedding);
    out.logits = fuse_logits(tape, out.ct.logits, out.he.logits, out.weights);
    out.probs = softmax(tape, out.logits);
    return out;
}

// lowest class index wins exact ties
template <class T>
std::size_t argmax_class(const Tensor<T>& probs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best]) best = i;
    return best;
}

}  // namespace dmfuse
