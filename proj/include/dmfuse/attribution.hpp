#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dmfuse/autodiff.hpp"
#include "dmfuse/image.hpp"
#include "dmfuse/model.hpp"

namespace dmfuse {

// Per-pixel nonnegative relevance, max-normalized to 1 unless all-zero.
struct Heatmap {
    Tensor<double> values;  // [H,W] in [0,1]
    int class_id = -1;
    std::string method;
};

// scalar score (a logit) and its gradient w.r.t. the input
template <class T>
using GradScorer = std::function<std::pair<T, Tensor<T>>(const Tensor<T>&)>;

// target-class softmax probability
template <class T>
using ProbFn = std::function<double(const Tensor<T>&)>;

// conv activation [K,h,w] and d(score)/d(activation), both at a fixed layer
template <class T>
using LayerGradFn = std::function<std::pair<Tensor<T>, Tensor<T>>(const Tensor<T>&)>;

// ---- map utilities ---------------------------------------------------------

// channel-summed absolute values, then max-normalized
template <class T>
Heatmap to_heatmap(const Tensor<T>& attribution, int class_id, const std::string& method) {
    std::size_t h, w, channels;
    if (attribution.rank() == 3) {
        channels = attribution.shape[0];
        h = attribution.shape[1];
        w = attribution.shape[2];
    } else if (attribution.rank() == 2) {
        channels = 1;
        h = attribution.shape[0];
        w = attribution.shape[1];
    } else {
        throw std::invalid_argument("to_heatmap: need [H,W] or [C,H,W]");
    }
    Heatmap hm;
    hm.values = Tensor<double>({h, w});
    hm.class_id = class_id;
    hm.method = method;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < h * w; ++i)
            hm.values[i] += std::fabs((double)attribution.values[c * h * w + i]);
    double mx = 0.0;
    for (double v : hm.values.values) mx = std::max(mx, v);
    if (mx > 0.0)
        for (auto& v : hm.values.values) v /= mx;
    return hm;
}

inline Tensor<double> bilinear_upsample(const Tensor<double>& src, std::size_t out_h,
                                        std::size_t out_w) {
    const std::size_t h = src.shape[0], w = src.shape[1];
    Tensor<double> out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            // half-pixel-center mapping
            double sy = ((double)y + 0.5) * (double)h / (double)out_h - 0.5;
            double sx = ((double)x + 0.5) * (double)w / (double)out_w - 0.5;
            sy = std::clamp(sy, 0.0, (double)h - 1.0);
            sx = std::clamp(sx, 0.0, (double)w - 1.0);
            const std::size_t y0 = (std::size_t)sy, x0 = (std::size_t)sx;
            const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double fy = sy - (double)y0, fx = sx - (double)x0;
            out[y * out_w + x] = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                                 fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
        }
    return out;
}

template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
    if (img.rank() != 3) throw std::invalid_argument("gaussian_blur: need [C,H,W]");
    if (sigma <= 0.0) return img;
    const std::size_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
    const int radius = (int)std::ceil(3.0 * sigma);
    std::vector<double> kernel(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i)
        kernel[i + radius] = std::exp(-(double)(i * i) / (2.0 * sigma * sigma));
    Tensor<T> tmp = img, out = img;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = img.values.data() + ch * h * w;
        T* dst = tmp.values.data() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = (int)x + i;
                    if (xx < 0 || xx >= (int)w) continue;
                    acc += kernel[i + radius] * (double)src[y * w + xx];
                    wsum += kernel[i + radius];
                }
                dst[y * w + x] = (T)(acc / wsum);
            }
        const T* src2 = tmp.values.data() + ch * h * w;
        T* dst2 = out.values.data() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = (int)y + i;
                    if (yy < 0 || yy >= (int)h) continue;
                    acc += kernel[i + radius] * (double)src2[yy * w + x];
                    wsum += kernel[i + radius];
                }
                dst2[y * w + x] = (T)(acc / wsum);
            }
    }
    return out;
}

// ---- gradient-based methods ------------------------------------------------

template <class T>
Tensor<T> saliency(const GradScorer<T>& scorer, const Tensor<T>& input) {
    Tensor<T> grad = scorer(input).second;
    for (auto& v : grad.values) v = std::fabs((double)v);
    return grad;
}

// mean gradient over Gaussian perturbations (std = sigma * value range),
// absolute value taken after averaging; sigma = 0 degenerates to saliency.
template <class T>
Tensor<T> smoothgrad(const GradScorer<T>& scorer, const Tensor<T>& input, std::size_t n_samples,
                     double sigma, std::uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("smoothgrad: n_samples must be >= 1");
    if (sigma < 0.0) throw std::invalid_argument("smoothgrad: sigma must be >= 0");
    if (sigma == 0.0) return saliency(scorer, input);
    T lo = input.values[0], hi = input.values[0];
    for (T v : input.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double noise_std = sigma * (double)(hi - lo);
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std);
    Tensor<double> acc(input.shape);
    Tensor<T> point = input;
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < point.size(); ++i)
            point[i] = input[i] + (T)noise(rng);
        const Tensor<T> grad = scorer(point).second;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (double)grad[i];
    }
    Tensor<T> out(input.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (T)std::fabs(acc[i] / (double)n_samples);
    return out;
}

// midpoint-rule path integral of gradients, scaled by (x - baseline)
template <class T>
Tensor<T> integrated_gradients(const GradScorer<T>& scorer, const Tensor<T>& input,
                               const Tensor<T>& baseline, std::size_t steps) {
    if (input.shape != baseline.shape)
        throw std::invalid_argument("integrated_gradients: baseline shape mismatch");
    if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
    Tensor<double> acc(input.shape);
    Tensor<T> point = input;
    for (std::size_t s = 0; s < steps; ++s) {
        const double alpha = ((double)s + 0.5) / (double)steps;
        for (std::size_t i = 0; i < point.size(); ++i)
            point[i] = (T)((double)baseline[i] + alpha * ((double)input[i] - (double)baseline[i]));
        const Tensor<T> grad = scorer(point).second;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (double)grad[i];
    }
    Tensor<T> out(input.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (T)(((double)input[i] - (double)baseline[i]) * acc[i] / (double)steps);
    return out;
}

// ---- occlusion -------------------------------------------------------------

template <class T>
Heatmap occlusion(const ProbFn<T>& score, const Tensor<T>& input, int class_id,
                  std::size_t patch_size, std::size_t stride, T fill_value) {
    if (input.rank() != 3) throw std::invalid_argument("occlusion: need [C,H,W]");
    const std::size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
    if (patch_size > h || patch_size > w)
        throw std::invalid_argument("occlusion: patch larger than image");
    if (stride < 1) throw std::invalid_argument("occlusion: stride must be >= 1");
    const double base = score(input);
    Tensor<double> acc({h, w});
    Tensor<double> counts({h, w});
    Tensor<T> work = input;
    for (std::size_t y0 = 0;; y0 += stride) {
        if (y0 + patch_size > h) break;
        for (std::size_t x0 = 0;; x0 += stride) {
            if (x0 + patch_size > w) break;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = y0; y < y0 + patch_size; ++y)
                    for (std::size_t x = x0; x < x0 + patch_size; ++x)
                        work.values[(ch * h + y) * w + x] = fill_value;
            const double drop = base - score(work);
            for (std::size_t y = y0; y < y0 + patch_size; ++y)
                for (std::size_t x = x0; x < x0 + patch_size; ++x) {
                    acc[y * w + x] += drop;
                    counts[y * w + x] += 1.0;
                }
            // restore
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = y0; y < y0 + patch_size; ++y)
                    for (std::size_t x = x0; x < x0 + patch_size; ++x)
                        work.values[(ch * h + y) * w + x] = input.values[(ch * h + y) * w + x];
        }
    }
    Tensor<double> map({h, w});
    for (std::size_t i = 0; i < h * w; ++i)
        map[i] = counts[i] > 0.0 ? std::max(0.0, acc[i] / counts[i]) : 0.0;
    double mx = 0.0;
    for (double v : map.values) mx = std::max(mx, v);
    if (mx > 0.0)
        for (auto& v : map.values) v /= mx;
    Heatmap hm;
    hm.values = std::move(map);
    hm.class_id = class_id;
    hm.method = "occlusion";
    return hm;
}

// ---- Grad-CAM family -------------------------------------------------------

template <class T>
Heatmap gradcam(const LayerGradFn<T>& layer, const Tensor<T>& input, int class_id,
                std::size_t out_h, std::size_t out_w) {
    const auto [act, grad] = layer(input);
    const std::size_t k = act.shape[0], h = act.shape[1], w = act.shape[2];
    Tensor<double> map({h, w});
    for (std::size_t ch = 0; ch < k; ++ch) {
        double weight = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) weight += (double)grad.values[ch * h * w + i];
        weight /= (double)(h * w);
        for (std::size_t i = 0; i < h * w; ++i)
            map[i] += weight * (double)act.values[ch * h * w + i];
    }
    for (auto& v : map.values) v = std::max(0.0, v);
    Tensor<double> up = bilinear_upsample(map, out_h, out_w);
    double mx = 0.0;
    for (double v : up.values) mx = std::max(mx, v);
    if (mx > 0.0)
        for (auto& v : up.values) v /= mx;
    Heatmap hm;
    hm.values = std::move(up);
    hm.class_id = class_id;
    hm.method = "gradcam";
    return hm;
}

// location weights alpha from first/second/third gradient powers of the
// exponentiated score, normalized per channel; weights = sum alpha * ReLU(g)
template <class T>
Heatmap gradcampp(const LayerGradFn<T>& layer, const Tensor<T>& input, int class_id,
                  std::size_t out_h, std::size_t out_w) {
    const auto [act, grad] = layer(input);
    const std::size_t k = act.shape[0], h = act.shape[1], w = act.shape[2];
    Tensor<double> map({h, w});
    for (std::size_t ch = 0; ch < k; ++ch) {
        const T* a = act.values.data() + ch * h * w;
        const T* g = grad.values.data() + ch * h * w;
        double sum_ag3 = 0.0;
        for (std::size_t i = 0; i < h * w; ++i)
            sum_ag3 += (double)a[i] * (double)g[i] * (double)g[i] * (double)g[i];
        std::vector<double> alpha(h * w, 0.0);
        double alpha_sum = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) {
            const double g2 = (double)g[i] * (double)g[i];
            const double denom = 2.0 * g2 + sum_ag3;
            alpha[i] = denom != 0.0 ? g2 / denom : 0.0;
            alpha_sum += alpha[i];
        }
        if (alpha_sum != 0.0)
            for (auto& v : alpha) v /= alpha_sum;
        double weight = 0.0;
        for (std::size_t i = 0; i < h * w; ++i)
            weight += alpha[i] * std::max(0.0, (double)g[i]);
        for (std::size_t i = 0; i < h * w; ++i) map[i] += weight * (double)a[i];
    }
    for (auto& v : map.values) v = std::max(0.0, v);
    Tensor<double> up = bilinear_upsample(map, out_h, out_w);
    double mx = 0.0;
    for (double v : up.values) mx = std::max(mx, v);
    if (mx > 0.0)
        for (auto& v : up.values) v /= mx;
    Heatmap hm;
    hm.values = std::move(up);
    hm.class_id = class_id;
    hm.method = "gradcampp";
    return hm;
}

// ---- explanation quality metrics -------------------------------------------

struct InsertionCurve {
    std::vector<double> fraction;
    std::vector<double> probability;
    double auc = 0.0;
    bool raster_fallback = false;  // set when the heatmap was all-zero
};

// descending heatmap order, ties broken by raster order
inline std::vector<std::size_t> heatmap_order(const Heatmap& hm, bool* raster_fallback = nullptr) {
    const std::size_t n = hm.values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    bool all_zero = true;
    for (double v : hm.values.values)
        if (v != 0.0) { all_zero = false; break; }
    if (raster_fallback) *raster_fallback = all_zero;
    if (!all_zero)
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return hm.values[a] > hm.values[b];
        });
    return order;
}

// reveal pixels of `input` over `baseline` in the given order, n_steps equal
// batches; trapezoidal area under probability vs fraction inserted
template <class T>
InsertionCurve insertion_curve_order(const ProbFn<T>& prob, const Tensor<T>& input,
                                     const Tensor<T>& baseline,
                                     const std::vector<std::size_t>& order,
                                     std::size_t n_steps) {
    if (input.rank() != 3) throw std::invalid_argument("insertion: need [C,H,W]");
    const std::size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
    if (order.size() != h * w)
        throw std::invalid_argument("insertion: order length must equal pixel count");
    if (n_steps < 1) throw std::invalid_argument("insertion: n_steps must be >= 1");
    InsertionCurve curve;
    Tensor<T> work = baseline;
    curve.fraction.push_back(0.0);
    curve.probability.push_back(prob(work));
    std::size_t revealed = 0;
    for (std::size_t s = 1; s <= n_steps; ++s) {
        const std::size_t target = (h * w) * s / n_steps;
        for (; revealed < target; ++revealed) {
            const std::size_t px = order[revealed];
            for (std::size_t ch = 0; ch < c; ++ch)
                work.values[ch * h * w + px] = input.values[ch * h * w + px];
        }
        curve.fraction.push_back((double)revealed / (double)(h * w));
        curve.probability.push_back(prob(work));
    }
    for (std::size_t i = 1; i < curve.fraction.size(); ++i)
        curve.auc += 0.5 * (curve.probability[i] + curve.probability[i - 1]) *
                     (curve.fraction[i] - curve.fraction[i - 1]);
    return curve;
}

template <class T>
InsertionCurve insertion_auc(const ProbFn<T>& prob, const Tensor<T>& input, const Heatmap& heatmap,
                             std::size_t n_steps, const Tensor<T>& baseline) {
    if (heatmap.values.shape[0] != input.shape[input.rank() - 2] ||
        heatmap.values.shape[1] != input.shape.back())
        throw std::invalid_argument("insertion_auc: heatmap/input shape mismatch");
    bool fallback = false;
    const auto order = heatmap_order(heatmap, &fallback);
    auto curve = insertion_curve_order(prob, input, baseline, order, n_steps);
    curve.raster_fallback = fallback;
    return curve;
}

// area-matched IoU: binarize the heatmap at its top-k pixels, k = |mask|
inline double localization_iou(const Heatmap& heatmap, const Tensor<std::uint8_t>& mask) {
    if (heatmap.values.shape != mask.shape)
        throw std::invalid_argument("localization_iou: shape mismatch");
    std::size_t k = 0;
    for (auto m : mask.values)
        if (m) ++k;
    if (k == 0)
        throw std::invalid_argument("localization_iou: empty mask (IoU undefined)");
    auto order = heatmap_order(heatmap);
    std::size_t inter = 0;
    for (std::size_t i = 0; i < k; ++i)
        if (mask[order[i]]) ++inter;
    return (double)inter / (double)(2 * k - inter);
}

// ---- model adapters --------------------------------------------------------

template <class T>
struct ExplainTarget {
    const DualModel<T>* model = nullptr;
    Tensor<T> ct;                   // [1,H,W]
    std::vector<Tensor<T>> tiles;   // prepared (stain-normalized) bag
    MetadataVector meta;
    bool fused = false;  // score fused logits instead of branch logits
};

namespace attr_detail {

inline void check_class(int class_id, std::size_t k) {
    if (class_id < 0 || (std::size_t)class_id >= k)
        throw std::invalid_argument("attribution: class id " + std::to_string(class_id) +
                                    " out of range");
}

// forward for an ExplainTarget with one substituted input; returns the score
// var (branch or fused logit), the conv activations of the scored branch, and
// the substituted leaf.
template <class T>
struct ForwardResult {
    Var<T> score = nullptr;
    Var<T> input_leaf = nullptr;
    std::vector<Var<T>> conv_acts;
    Var<T> probs = nullptr;  // softmax over the scored head
};

template <class T>
ForwardResult<T> target_forward(Tape<T>& tape, const ExplainTarget<T>& tgt, bool ct_branch,
                                std::size_t tile_idx, const Tensor<T>& substituted, int class_id,
                                bool need_grad) {
    const auto& model = *tgt.model;
    check_class(class_id, model.cfg.num_classes);
    auto L = model.leaves(tape, false);
    Rng rng = make_rng(0, "unused");
    ForwardResult<T> res;
    Var<T> logits = nullptr;
    if (ct_branch) {
        res.input_leaf = tape.leaf(substituted, need_grad);
        auto ct = ct_forward(tape, L, model.cfg, res.input_leaf, false, rng);
        res.conv_acts = ct.conv_acts;
        logits = ct.logits;
        if (tgt.fused) {
            std::vector<Var<T>> tiles;
            for (const auto& tile : tgt.tiles) tiles.push_back(tape.leaf(tile, false));
            auto he = he_forward(tape, L, model.cfg, tiles, false, rng);
            Var<T> e = metadata_encode(tape, L, model.cfg, tgt.meta, false, rng);
            logits = fuse_logits(tape, ct.logits, he.logits, gate_weights(tape, L, e));
        }
    } else {
        std::vector<Var<T>> tiles;
        for (std::size_t i = 0; i < tgt.tiles.size(); ++i) {
            const Tensor<T>& src = i == tile_idx ? substituted : tgt.tiles[i];
            Var<T> leaf = tape.leaf(src, need_grad && i == tile_idx);
            if (i == tile_idx) res.input_leaf = leaf;
            tiles.push_back(leaf);
        }
        auto he = he_forward(tape, L, model.cfg, tiles, false, rng);
        res.conv_acts = he.tile_conv_acts[tile_idx];
        logits = he.logits;
        if (tgt.fused) {
            Var<T> x = tape.leaf(tgt.ct, false);
            auto ct = ct_forward(tape, L, model.cfg, x, false, rng);
            Var<T> e = metadata_encode(tape, L, model.cfg, tgt.meta, false, rng);
            logits = fuse_logits(tape, ct.logits, he.logits, gate_weights(tape, L, e));
        }
    }
    res.score = index(tape, logits, (std::size_t)class_id);
    res.probs = softmax(tape, logits);
    return res;
}

}  // namespace attr_detail

template <class T>
GradScorer<T> input_scorer(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                           int class_id) {
    return [&tgt, ct_branch, tile_idx, class_id](const Tensor<T>& x) {
        Tape<T> tape;
        auto res =
            attr_detail::target_forward(tape, tgt, ct_branch, tile_idx, x, class_id, true);
        tape.backward(res.score);
        return std::make_pair(res.score->value[0],
                              Tensor<T>(x.shape, Tape<T>::grad(res.input_leaf)));
    };
}

template <class T>
ProbFn<T> prob_fn(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                  int class_id) {
    return [&tgt, ct_branch, tile_idx, class_id](const Tensor<T>& x) {
        Tape<T> tape;
        auto res =
            attr_detail::target_forward(tape, tgt, ct_branch, tile_idx, x, class_id, false);
        return (double)res.probs->value[(std::size_t)class_id];
    };
}

template <class T>
LayerGradFn<T> layer_grad_fn(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                             int class_id, std::size_t block) {
    const std::size_t n_blocks = tgt.model->cfg.conv_channels.size();
    if (block >= n_blocks)
        throw std::invalid_argument("layer_grad_fn: block " + std::to_string(block) +
                                    " does not name a conv activation");
    return [&tgt, ct_branch, tile_idx, class_id, block](const Tensor<T>& x) {
        Tape<T> tape;
        auto res =
            attr_detail::target_forward(tape, tgt, ct_branch, tile_idx, x, class_id, true);
        tape.backward(res.score);
        Var<T> act = res.conv_acts[block];
        return std::make_pair(act->value, Tensor<T>(act->value.shape, Tape<T>::grad(act)));
    };
}

// Forward-only evaluators for occlusion and insertion: everything that does
// not depend on the substituted input (the other branch's logits, the gate
// weights, the other tiles' embeddings and attention scores) is computed once.
namespace attr_detail {

template <class T>
struct FastEval {
    const DualModel<T>* model = nullptr;
    bool ct_branch = true;
    bool fused = false;
    int class_id = 0;
    // caches
    std::vector<Tensor<T>> other_embeds;  // he branch: embeddings of the other tiles
    std::vector<T> other_scores;          // and their raw attention scores
    std::size_t tile_idx = 0;
    std::size_t bag_size = 0;
    Tensor<T> other_logits;  // fused mode: frozen logits of the other branch
    Tensor<T> gate;          // fused mode: [w_ct, w_he]

    std::pair<double, double> operator()(const Tensor<T>& x) const {
        const auto& cfg = model->cfg;
        Tape<T> tape;
        auto L = model->leaves(tape, false);
        Rng rng = make_rng(0, "unused");
        Var<T> logits = nullptr;
        if (ct_branch) {
            Var<T> leaf = tape.leaf(x, false);
            logits = ct_forward(tape, L, cfg, leaf, false, rng).logits;
        } else {
            Var<T> h = encode_image(tape, L, cfg, "he", tape.leaf(x, false));
            Var<T> hidden = tanh_op(tape, dense(tape, h, L.at("he.att.V"), (Var<T>) nullptr));
            Var<T> s = dense(tape, hidden, L.at("he.att.w"), (Var<T>) nullptr);
            Tensor<T> scores({bag_size});
            std::size_t j = 0;
            for (std::size_t i = 0; i < bag_size; ++i)
                if (i != tile_idx) scores[i] = other_scores[j++];
            Var<T> score_vec = add(tape, tape.leaf(std::move(scores), false),
                                   mul(tape, s, one_hot_leaf(tape)));
            Var<T> att = softmax(tape, score_vec);
            Var<T> f = nullptr;
            j = 0;
            for (std::size_t i = 0; i < bag_size; ++i) {
                Var<T> embed = i == tile_idx ? h : tape.leaf(other_embeds[j++], false);
                Var<T> term = mul(tape, index(tape, att, i), embed);
                f = f ? add(tape, f, term) : term;
            }
            logits = dense(tape, scale(tape, f, (T)cfg.head_gain), L.at("he.head.w"),
                           L.at("he.head.b"));
        }
        if (fused) {
            Var<T> own = logits;
            Var<T> other = tape.leaf(other_logits, false);
            Var<T> z_a = mul(tape, tape.leaf(Tensor<T>({1}, {gate[ct_branch ? 0 : 1]}), false),
                             own);
            Var<T> z_b = mul(tape, tape.leaf(Tensor<T>({1}, {gate[ct_branch ? 1 : 0]}), false),
                             other);
            logits = add(tape, z_a, z_b);
        }
        Var<T> probs = softmax(tape, logits);
        return {(double)logits->value[(std::size_t)class_id],
                (double)probs->value[(std::size_t)class_id]};
    }

    Var<T> one_hot_leaf(Tape<T>& tape) const {
        Tensor<T> sel({bag_size});
        sel[tile_idx] = T(1);
        return tape.leaf(std::move(sel), false);
    }
};

template <class T>
FastEval<T> make_fast_eval(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                           int class_id) {
    check_class(class_id, tgt.model->cfg.num_classes);
    FastEval<T> fe;
    fe.model = tgt.model;
    fe.ct_branch = ct_branch;
    fe.fused = tgt.fused;
    fe.class_id = class_id;
    fe.tile_idx = tile_idx;
    fe.bag_size = tgt.tiles.size();
    const auto& cfg = tgt.model->cfg;
    Tape<T> tape;
    auto L = tgt.model->leaves(tape, false);
    Rng rng = make_rng(0, "unused");
    if (!ct_branch) {
        for (std::size_t i = 0; i < tgt.tiles.size(); ++i) {
            if (i == tile_idx) continue;
            Var<T> h = encode_image(tape, L, cfg, "he", tape.leaf(tgt.tiles[i], false));
            Var<T> hidden = tanh_op(tape, dense(tape, h, L.at("he.att.V"), (Var<T>) nullptr));
            Var<T> s = dense(tape, hidden, L.at("he.att.w"), (Var<T>) nullptr);
            fe.other_embeds.push_back(h->value);
            fe.other_scores.push_back(s->value[0]);
        }
    }
    if (tgt.fused) {
        if (ct_branch) {
            std::vector<Var<T>> tiles;
            for (const auto& tile : tgt.tiles) tiles.push_back(tape.leaf(tile, false));
            fe.other_logits = he_forward(tape, L, cfg, tiles, false, rng).logits->value;
        } else {
            Var<T> x = tape.leaf(tgt.ct, false);
            fe.other_logits = ct_forward(tape, L, cfg, x, false, rng).logits->value;
        }
        Var<T> e = metadata_encode(tape, L, cfg, tgt.meta, false, rng);
        fe.gate = gate_weights(tape, L, e)->value;
    }
    return fe;
}

}  // namespace attr_detail

// scored-head logit; used by occlusion
template <class T>
ProbFn<T> fast_score_fn(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                        int class_id) {
    auto fe = attr_detail::make_fast_eval(tgt, ct_branch, tile_idx, class_id);
    return [fe](const Tensor<T>& x) { return fe(x).first; };
}

// scored-head softmax probability; used by insertion
template <class T>
ProbFn<T> fast_prob_fn(const ExplainTarget<T>& tgt, bool ct_branch, std::size_t tile_idx,
                       int class_id) {
    auto fe = attr_detail::make_fast_eval(tgt, ct_branch, tile_idx, class_id);
    return [fe](const Tensor<T>& x) { return fe(x).second; };
}

// ---- export ----------------------------------------------------------------

Raster heatmap_to_gray(const Heatmap& hm);
// input blended with a fixed color ramp
Raster heatmap_overlay(const Tensor<float>& image_planar, const Heatmap& hm);
void save_insertion_csv(const InsertionCurve& curve, const std::string& path);

}  // namespace dmfuse
