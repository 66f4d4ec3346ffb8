#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dmfuse/autodiff.hpp"
#include "dmfuse/evaluation.hpp"
#include "dmfuse/model.hpp"
#include "dmfuse/preprocess.hpp"
#include "dmfuse/synthdata.hpp"

namespace dmfuse {

struct TrainConfig {
    // defaults match the published training configuration
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 50;
    double dropout = 0.5;
    double weight_decay = 1e-4;
    std::size_t early_stop_patience = 10;
    std::uint64_t seed = 1234;
    double mixup_alpha = 0.2;
    double cutmix_alpha = 1.0;
    double mixup_prob = 0.5;  // per augmented batch: MixUp with this probability, else CutMix
    bool augment = true;      // branch stages only; fusion stage trains without augmentation
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct DivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_macro_f1 = 0.0;
    bool is_best = false;
};

struct History {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
};

inline void save_history_csv(const History& h, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "epoch,train_loss,val_loss,val_macro_f1,is_best\n";
    char buf[160];
    for (const auto& e : h.epochs) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%d\n", e.epoch, e.train_loss,
                      e.val_loss, e.val_macro_f1, e.is_best ? 1 : 0);
        os << buf;
    }
}

// -Sum target_k * ln(prob_k + 1e-12); supports MixUp/CutMix soft targets.
template <class T>
Var<T> cross_entropy(Tape<T>& tape, Var<T> probabilities, const std::vector<double>& target) {
    if (probabilities->value.size() != target.size())
        throw std::invalid_argument("cross_entropy: class-count mismatch");
    double psum = 0.0, tsum = 0.0;
    for (T p : probabilities->value.values) {
        if (p < T(-1e-6)) throw std::invalid_argument("cross_entropy: negative probability");
        psum += (double)p;
    }
    for (double t : target) {
        if (t < 0.0) throw std::invalid_argument("cross_entropy: negative target weight");
        tsum += t;
    }
    if (std::fabs(psum - 1.0) > 1e-4 || std::fabs(tsum - 1.0) > 1e-6)
        throw std::invalid_argument("cross_entropy: inputs must be distributions");
    Var<T> lg = log_op(tape, scale(tape, probabilities, T(1), T(1e-12)));
    Tensor<T> tvec({target.size()});
    for (std::size_t i = 0; i < target.size(); ++i) tvec[i] = (T)target[i];
    Var<T> weighted = mul(tape, lg, tape.leaf(std::move(tvec), false));
    return scale(tape, sum(tape, weighted), T(-1));
}

// ---- AdamW -----------------------------------------------------------------

template <class T>
struct OptimizerState {
    std::map<std::string, std::vector<T>> m, v;
    std::size_t t = 0;
};

// Decoupled weight decay: p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p
template <class T>
void adamw_step(ParamSet<T>& params, const std::map<std::string, std::vector<T>>& grads,
                OptimizerState<T>& state, const TrainConfig& cfg) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.t);
    for (auto& [name, grad] : grads) {
        auto it = params.find(name);
        if (it == params.end())
            throw std::invalid_argument("adamw_step: unknown parameter " + name);
        auto& p = it->second;
        if (grad.size() != p.size())
            throw std::invalid_argument("adamw_step: gradient shape mismatch for " + name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(p.size(), T(0));
        if (v.empty()) v.assign(p.size(), T(0));
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = (T)(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i]);
            v[i] = (T)(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i]);
            const double m_hat = (double)m[i] / bc1;
            const double v_hat = (double)v[i] / bc2;
            p[i] = (T)((double)p[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps) -
                       cfg.learning_rate * cfg.weight_decay * (double)p[i]);
        }
    }
}

// ---- staged training -------------------------------------------------------

enum class BranchId { ct, he };

template <class T>
History train_branch(DualModel<T>& model, const Dataset& data, const TrainConfig& cfg,
                     BranchId branch);

template <class T>
History train_fusion(DualModel<T>& model, const Dataset& data, const TrainConfig& cfg);

// Eval-mode class probabilities on one split (or all records when split empty).
enum class Head { ct, he, fused };

template <class T>
std::vector<std::vector<double>> predict_split(const DualModel<T>& model, const Dataset& data,
                                               Split split, Head head,
                                               std::vector<int>* labels_out = nullptr);

}  // namespace dmfuse

#include "dmfuse/training_impl.hpp"
