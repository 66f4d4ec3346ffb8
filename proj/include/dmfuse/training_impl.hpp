#pragma once

// implementation details for training.hpp

#include <algorithm>
#include <limits>
#include <numeric>

namespace dmfuse {

namespace train_detail {

// Macenko-normalized tile bags, shared by training, prediction and attribution.
// Rejected tiles are dropped; if every tile is rejected the original bag is kept.
template <class T>
std::vector<Tensor<T>> prepared_tiles(const PatientRecord& rec, const StainReference& ref) {
    std::vector<Tensor<T>> out;
    for (const auto& tile : rec.tiles) {
        try {
            out.push_back(macenko_normalize(tile, ref).pixels.template cast<T>());
        } catch (const TileRejected&) {
        }
    }
    if (out.empty())
        for (const auto& tile : rec.tiles) out.push_back(tile.pixels.template cast<T>());
    return out;
}

template <class T>
struct Prepared {
    std::vector<Tensor<T>> ct;
    std::vector<std::vector<Tensor<T>>> tiles;
    std::vector<int> labels;
    std::vector<MetadataVector> meta;
    std::vector<std::size_t> split_idx[3];  // train, val, test
};

template <class T>
Prepared<T> prepare(const Dataset& data) {
    Prepared<T> p;
    const StainReference ref = StainReference::standard();
    for (const auto& rec : data.records) {
        const std::size_t h = rec.ct.pixels.shape[0], w = rec.ct.pixels.shape[1];
        Tensor<T> ct({1, h, w});
        for (std::size_t i = 0; i < h * w; ++i) ct[i] = (T)rec.ct.pixels[i];
        p.ct.push_back(std::move(ct));
        p.tiles.push_back(prepared_tiles<T>(rec, ref));
        p.labels.push_back(rec.label);
        p.meta.push_back(rec.meta);
        const Split s = data.split.at(rec.patient_id);
        p.split_idx[(int)s].push_back(p.ct.size() - 1);
    }
    return p;
}

template <class T>
std::vector<double> one_hot(int label, std::size_t k) {
    std::vector<double> v(k, 0.0);
    v[(std::size_t)label] = 1.0;
    return v;
}

// stack a tile bag into one tensor so mixup/cutmix treat it as a single image
template <class T>
Tensor<float> stack_bag(const std::vector<Tensor<T>>& bag) {
    const auto& s = bag[0].shape;
    Tensor<float> out({bag.size() * s[0], s[1], s[2]});
    std::size_t off = 0;
    for (const auto& tile : bag)
        for (float v : tile.template cast<float>().values) out[off++] = v;
    return out;
}

template <class T>
std::vector<Tensor<T>> unstack_bag(const Tensor<float>& stacked, std::size_t tiles,
                                   std::size_t channels) {
    const std::size_t h = stacked.shape[1], w = stacked.shape[2];
    std::vector<Tensor<T>> bag;
    for (std::size_t t = 0; t < tiles; ++t) {
        Tensor<T> tile({channels, h, w});
        for (std::size_t i = 0; i < channels * h * w; ++i)
            tile[i] = (T)stacked.values[t * channels * h * w + i];
        bag.push_back(std::move(tile));
    }
    return bag;
}

template <class T>
double macro_f1_of(const std::vector<int>& preds, const std::vector<int>& labels,
                   std::size_t num_classes) {
    return confusion_and_metrics(preds, labels, num_classes).macro_f1;
}

// Calibrate the branch's feature standardization on the training split:
// reset to identity, measure per-dimension mean/std of the pooled features,
// then store mean and 1/std so standardized features feed the head.
template <class T>
void calibrate_feature_norm(DualModel<T>& model, const Prepared<T>& prep, BranchId branch) {
    const std::string prefix = branch == BranchId::ct ? "ct" : "he";
    const std::size_t d = model.cfg.feature_dim();
    model.params[prefix + ".norm.mean"] = Tensor<T>({d});
    model.params[prefix + ".norm.scale"] = Tensor<T>({d}, std::vector<T>(d, T(1)));
    std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
    std::size_t count = 0;
    for (std::size_t idx : prep.split_idx[(int)Split::train]) {
        Tape<T> tape;
        auto L = model.leaves(tape, false);
        std::vector<Tensor<T>> feats;
        if (branch == BranchId::ct) {
            feats.push_back(
                encode_image(tape, L, model.cfg, prefix, tape.leaf(prep.ct[idx], false))->value);
        } else {
            for (const auto& tile : prep.tiles[idx])
                feats.push_back(
                    encode_image(tape, L, model.cfg, prefix, tape.leaf(tile, false))->value);
        }
        for (const auto& f : feats) {
            for (std::size_t j = 0; j < d; ++j) {
                sum[j] += (double)f[j];
                sum_sq[j] += (double)f[j] * (double)f[j];
            }
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("calibrate_feature_norm: empty training split");
    Tensor<T> mean({d}), inv_std({d});
    for (std::size_t j = 0; j < d; ++j) {
        const double m = sum[j] / (double)count;
        const double var = std::max(0.0, sum_sq[j] / (double)count - m * m);
        mean[j] = (T)m;
        inv_std[j] = (T)(1.0 / (std::sqrt(var) + 1e-6));
    }
    model.params[prefix + ".norm.mean"] = std::move(mean);
    model.params[prefix + ".norm.scale"] = std::move(inv_std);
}

template <class T>
struct BestTracker {
    double best_f1 = -1.0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t since_best = 0;
    ParamSet<T> best_params;

    // Validation improves when macro-F1 rises, or holds steady while the
    // validation loss keeps dropping (the confidence of already-correct
    // predictions is still improving). Returns true when training should stop.
    bool update(double f1, double val_loss, std::size_t epoch, const ParamSet<T>& params,
                std::size_t patience) {
        if (f1 > best_f1 || (f1 == best_f1 && val_loss < best_val_loss)) {
            best_f1 = f1;
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_params = params;
            since_best = 0;
        } else {
            ++since_best;
        }
        return since_best >= patience;
    }
};

}  // namespace train_detail

template <class T>
History train_branch(DualModel<T>& model, const Dataset& data, const TrainConfig& cfg,
                     BranchId branch) {
    using namespace train_detail;
    auto prepared = prepare<T>(data);
    const auto& train_idx = prepared.split_idx[(int)Split::train];
    const auto& val_idx = prepared.split_idx[(int)Split::val];
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_branch: empty train or val split");
    const std::string prefix = branch == BranchId::ct ? "ct." : "he.";
    const std::size_t k = model.cfg.num_classes;

    // the calibrated standardization stats stay frozen during training
    // The conv stack stays frozen at its random initialization: it acts as a
    // fixed feature projection whose outputs are standardized by the calibrated
    // norm layer. Only the head (and, for the tile branch, the attention
    // parameters) receive gradient updates, which keeps the calibration valid
    // for the whole run and makes the short training schedule stable.
    auto trainable = [&prefix](const std::string& name) {
        return name.rfind(prefix, 0) == 0 && name.find(".norm.") == std::string::npos &&
               name.find(".block") == std::string::npos;
    };
    train_detail::calibrate_feature_norm(model, prepared, branch);

    auto forward_probs = [&](Tape<T>& tape, const ParamVars<T>& L, std::size_t idx, bool train,
                             Rng& rng, const Tensor<T>* ct_override,
                             const std::vector<Tensor<T>>* bag_override) {
        if (branch == BranchId::ct) {
            Var<T> x = tape.leaf(ct_override ? *ct_override : prepared.ct[idx], false);
            auto out = ct_forward(tape, L, model.cfg, x, train, rng);
            return softmax(tape, out.logits);
        }
        const auto& bag = bag_override ? *bag_override : prepared.tiles[idx];
        std::vector<Var<T>> tile_vars;
        for (const auto& tile : bag) tile_vars.push_back(tape.leaf(tile, false));
        auto out = he_forward(tape, L, model.cfg, tile_vars, train, rng);
        return softmax(tape, out.logits);
    };

    History history;
    BestTracker<T> best;
    OptimizerState<T> opt;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        {
            Rng shuffle_rng = make_rng(cfg.seed, "shuffle", epoch);
            std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        Rng drop_rng = make_rng(cfg.seed, "dropout", epoch);
        Rng aug_rng = make_rng(cfg.seed, "augment", epoch);
        std::uniform_real_distribution<double> u01(0.0, 1.0);

        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            // batch inputs, possibly augmented
            std::vector<Tensor<T>> ct_in(n);
            std::vector<std::vector<Tensor<T>>> bag_in(n);
            std::vector<std::vector<double>> targets(n);
            for (std::size_t b = 0; b < n; ++b)
                targets[b] = one_hot<T>(prepared.labels[order[start + b]], k);

            bool augmented = false;
            if (cfg.augment && n >= 2) {
                bool uniform_bags = true;
                if (branch == BranchId::he) {
                    const std::size_t bag0 = prepared.tiles[order[start]].size();
                    for (std::size_t b = 1; b < n; ++b)
                        if (prepared.tiles[order[start + b]].size() != bag0) uniform_bags = false;
                }
                if (branch == BranchId::ct || uniform_bags) {
                    std::vector<Sample> batch_a(n);
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t idx = order[start + b];
                        batch_a[b].image = branch == BranchId::ct
                                               ? prepared.ct[idx].template cast<float>()
                                               : stack_bag(prepared.tiles[idx]);
                        batch_a[b].label = targets[b];
                    }
                    std::vector<std::size_t> perm(n);
                    std::iota(perm.begin(), perm.end(), 0);
                    std::shuffle(perm.begin(), perm.end(), aug_rng);
                    std::vector<Sample> batch_b(n);
                    for (std::size_t b = 0; b < n; ++b) batch_b[b] = batch_a[perm[b]];
                    const bool use_mixup = u01(aug_rng) < cfg.mixup_prob;
                    const std::uint64_t aug_seed = aug_rng();
                    const auto mixed = use_mixup
                                           ? mixup(batch_a, batch_b, cfg.mixup_alpha, aug_seed)
                                           : cutmix(batch_a, batch_b, cfg.cutmix_alpha, aug_seed);
                    for (std::size_t b = 0; b < n; ++b) {
                        targets[b] = mixed[b].label;
                        if (branch == BranchId::ct) {
                            ct_in[b] = mixed[b].image.template cast<T>();
                        } else {
                            const std::size_t idx = order[start + b];
                            bag_in[b] = unstack_bag<T>(mixed[b].image,
                                                       prepared.tiles[idx].size(), 3);
                        }
                    }
                    augmented = true;
                }
            }

            std::map<std::string, std::vector<T>> grads;
            double batch_loss = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t idx = order[start + b];
                Tape<T> tape;
                auto L = model.leaves(tape, trainable);
                Var<T> probs = forward_probs(tape, L, idx, true, drop_rng,
                                             augmented && branch == BranchId::ct ? &ct_in[b]
                                                                                 : nullptr,
                                             augmented && branch == BranchId::he ? &bag_in[b]
                                                                                 : nullptr);
                Var<T> loss = cross_entropy(tape, probs, targets[b]);
                const double lv = (double)loss->value[0];
                if (!std::isfinite(lv)) throw DivergedError("train_branch: non-finite loss");
                batch_loss += lv;
                tape.backward(loss);
                for (auto& [name, var] : L) {
                    if (!trainable(name)) continue;
                    auto& g = grads[name];
                    const auto& tg = Tape<T>::grad(var);
                    if (g.empty()) g.assign(tg.size(), T(0));
                    for (std::size_t i = 0; i < tg.size(); ++i)
                        g[i] += tg[i] / (T)n;
                }
            }
            adamw_step(model.params, grads, opt, cfg);
            epoch_loss += batch_loss;
            seen += n;
        }

        // validation, eval mode
        Rng eval_rng = make_rng(cfg.seed, "eval", epoch);
        double val_loss = 0.0;
        std::vector<int> val_preds, val_labels;
        for (std::size_t idx : val_idx) {
            Tape<T> tape;
            auto L = model.leaves(tape, false);
            Var<T> probs = forward_probs(tape, L, idx, false, eval_rng, nullptr, nullptr);
            val_loss += -std::log((double)probs->value[(std::size_t)prepared.labels[idx]] + 1e-12);
            val_preds.push_back((int)argmax_class(probs->value));
            val_labels.push_back(prepared.labels[idx]);
        }
        val_loss /= (double)val_idx.size();
        const double f1 = train_detail::macro_f1_of<T>(val_preds, val_labels, k);
        history.epochs.push_back({epoch, epoch_loss / (double)seen, val_loss, f1, false});
        if (best.update(f1, val_loss, epoch, model.params, cfg.early_stop_patience)) break;
    }
    model.params = best.best_params;
    history.best_epoch = best.best_epoch;
    history.epochs[best.best_epoch].is_best = true;
    return history;
}

namespace train_detail {
// branch logits precomputed once with frozen branches (eval mode)
template <class T>
struct FrozenLogits {
    std::vector<Tensor<T>> ct, he;
};

template <class T>
FrozenLogits<T> freeze_branch_logits(const DualModel<T>& model, const Prepared<T>& prepared) {
    FrozenLogits<T> out;
    Rng rng = make_rng(0, "unused");
    for (std::size_t i = 0; i < prepared.ct.size(); ++i) {
        Tape<T> tape;
        auto L = model.leaves(tape, false);
        Var<T> x = tape.leaf(prepared.ct[i], false);
        out.ct.push_back(ct_forward(tape, L, model.cfg, x, false, rng).logits->value);
        std::vector<Var<T>> tiles;
        for (const auto& tile : prepared.tiles[i]) tiles.push_back(tape.leaf(tile, false));
        out.he.push_back(he_forward(tape, L, model.cfg, tiles, false, rng).logits->value);
    }
    return out;
}
}  // namespace train_detail

template <class T>
History train_fusion(DualModel<T>& model, const Dataset& data, const TrainConfig& cfg) {
    using namespace train_detail;
    auto prepared = prepare<T>(data);
    const auto& train_idx = prepared.split_idx[(int)Split::train];
    const auto& val_idx = prepared.split_idx[(int)Split::val];
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_fusion: empty train or val split");
    const std::size_t k = model.cfg.num_classes;
    const std::function<bool(const std::string&)> trainable = [](const std::string& name) {
        return name.rfind("meta.", 0) == 0 || name.rfind("gate.", 0) == 0;
    };
    const auto frozen = freeze_branch_logits(model, prepared);

    auto gate_forward = [&](Tape<T>& tape, const ParamVars<T>& L, std::size_t idx, bool train,
                            Rng& rng) {
        Var<T> e = metadata_encode(tape, L, model.cfg, prepared.meta[idx], train, rng);
        Var<T> w = gate_weights(tape, L, e);
        Var<T> z_ct = tape.leaf(frozen.ct[idx], false);
        Var<T> z_he = tape.leaf(frozen.he[idx], false);
        return softmax(tape, fuse_logits(tape, z_ct, z_he, w));
    };

    History history;
    BestTracker<T> best;
    OptimizerState<T> opt;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        {
            Rng shuffle_rng = make_rng(cfg.seed, "fusion_shuffle", epoch);
            std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        Rng drop_rng = make_rng(cfg.seed, "fusion_dropout", epoch);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            std::map<std::string, std::vector<T>> grads;
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t idx = order[start + b];
                Tape<T> tape;
                auto L = model.leaves(tape, trainable);
                Var<T> probs = gate_forward(tape, L, idx, true, drop_rng);
                Var<T> loss = cross_entropy(tape, probs, one_hot<T>(prepared.labels[idx], k));
                const double lv = (double)loss->value[0];
                if (!std::isfinite(lv)) throw DivergedError("train_fusion: non-finite loss");
                epoch_loss += lv;
                tape.backward(loss);
                for (auto& [name, var] : L) {
                    if (!trainable(name)) continue;
                    auto& g = grads[name];
                    const auto& tg = Tape<T>::grad(var);
                    if (g.empty()) g.assign(tg.size(), T(0));
                    for (std::size_t i = 0; i < tg.size(); ++i) g[i] += tg[i] / (T)n;
                }
            }
            adamw_step(model.params, grads, opt, cfg);
        }

        Rng eval_rng = make_rng(cfg.seed, "fusion_eval", epoch);
        double val_loss = 0.0;
        std::vector<int> val_preds, val_labels;
        for (std::size_t idx : val_idx) {
            Tape<T> tape;
            auto L = model.leaves(tape, false);
            Var<T> probs = gate_forward(tape, L, idx, false, eval_rng);
            val_loss += -std::log((double)probs->value[(std::size_t)prepared.labels[idx]] + 1e-12);
            val_preds.push_back((int)argmax_class(probs->value));
            val_labels.push_back(prepared.labels[idx]);
        }
        val_loss /= (double)val_idx.size();
        const double f1 = macro_f1_of<T>(val_preds, val_labels, k);
        history.epochs.push_back(
            {epoch, epoch_loss / (double)order.size(), val_loss, f1, false});
        if (best.update(f1, val_loss, epoch, model.params, cfg.early_stop_patience)) break;
    }
    model.params = best.best_params;
    history.best_epoch = best.best_epoch;
    history.epochs[best.best_epoch].is_best = true;
    return history;
}

template <class T>
std::vector<std::vector<double>> predict_split(const DualModel<T>& model, const Dataset& data,
                                               Split split, Head head,
                                               std::vector<int>* labels_out) {
    auto prepared = train_detail::prepare<T>(data);
    const auto& idxs = prepared.split_idx[(int)split];
    std::vector<std::vector<double>> probs;
    Rng rng = make_rng(0, "unused");
    for (std::size_t idx : idxs) {
        Tape<T> tape;
        auto L = model.leaves(tape, false);
        Var<T> p = nullptr;
        if (head == Head::ct) {
            Var<T> x = tape.leaf(prepared.ct[idx], false);
            p = softmax(tape, ct_forward(tape, L, model.cfg, x, false, rng).logits);
        } else if (head == Head::he) {
            std::vector<Var<T>> tiles;
            for (const auto& tile : prepared.tiles[idx]) tiles.push_back(tape.leaf(tile, false));
            p = softmax(tape, he_forward(tape, L, model.cfg, tiles, false, rng).logits);
        } else {
            Var<T> x = tape.leaf(prepared.ct[idx], false);
            std::vector<Var<T>> tiles;
            for (const auto& tile : prepared.tiles[idx]) tiles.push_back(tape.leaf(tile, false));
            auto out = fused_forward(tape, L, model.cfg, x, tiles, prepared.meta[idx], false, rng);
            p = out.probs;
        }
        std::vector<double> row;
        for (auto v : p->value.values) row.push_back((double)v);
        probs.push_back(std::move(row));
        if (labels_out) labels_out->push_back(prepared.labels[idx]);
    }
    return probs;
}

}  // namespace dmfuse
