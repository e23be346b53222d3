#include "vlplan/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vlplan {

namespace {

int current_thread() {
#ifdef _OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void log_softmax(const double* logits, int n, double* out) {
    double maxv = logits[0];
    for (int i = 1; i < n; ++i) maxv = std::max(maxv, logits[i]);
    double denom = 0.0;
    for (int i = 0; i < n; ++i) denom += std::exp(logits[i] - maxv);
    const double log_denom = std::log(denom) + maxv;
    for (int i = 0; i < n; ++i) out[i] = logits[i] - log_denom;
}

}  // namespace

// Scratch slots are created up front: lazy initialization inside the
// parallel loops would race.
LossContext::LossContext(const Vocab& vocab) : vocab_(&vocab) {
    scratch_.resize(static_cast<std::size_t>(max_threads()));
    for (auto& s : scratch_) s = std::make_unique<Scratch>();
}

LossContext::Scratch& LossContext::thread_scratch() {
    return *scratch_[static_cast<std::size_t>(current_thread())];
}

std::vector<std::vector<double>>& LossContext::item_grads(std::size_t items, std::size_t params) {
    if (item_grads_.size() < items) item_grads_.resize(items);
    for (std::size_t i = 0; i < items; ++i) item_grads_[i].assign(params, 0.0);
    return item_grads_;
}

namespace {

// Sums per-item gradients in item order: deterministic under any thread
// scheduling.
void reduce_grads(const std::vector<std::vector<double>>& item_grads, std::size_t items,
                  std::vector<double>& out) {
    for (std::size_t i = 0; i < items; ++i) {
        const auto& g = item_grads[i];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += g[j];
    }
}

// Cross entropy over the sequence's text targets; fills d_text (scaled by
// `weight` per target position) and returns the summed -log p.
double text_ce(const ForwardResult& fwd, const BuiltSequence& seq, int vocab, double weight,
               std::vector<double>& d_text, std::vector<double>& logp) {
    d_text.assign(fwd.text_logits.size(), 0.0);
    logp.resize(static_cast<std::size_t>(vocab));
    double loss = 0.0;
    for (std::size_t r = 0; r < seq.text_target.size(); ++r) {
        const double* row = fwd.text_logits.data() + r * static_cast<std::size_t>(vocab);
        log_softmax(row, vocab, logp.data());
        const int target = seq.text_target[r];
        loss -= logp[static_cast<std::size_t>(target)];
        double* drow = d_text.data() + r * static_cast<std::size_t>(vocab);
        for (int o = 0; o < vocab; ++o) drow[o] = std::exp(logp[static_cast<std::size_t>(o)]) * weight;
        drow[target] -= weight;
    }
    return loss;
}

// Cross entropy over the sequence's image targets; adds into d_image.
double image_ce(const ForwardResult& fwd, const BuiltSequence& seq, double weight,
                std::vector<double>& d_image, std::vector<double>& logp) {
    const int vocab = fwd.image.vocab;
    logp.resize(static_cast<std::size_t>(vocab));
    double loss = 0.0;
    for (std::size_t r = 0; r < seq.image_target.size(); ++r) {
        log_softmax(fwd.image.row(static_cast<int>(r)), vocab, logp.data());
        const int target = seq.image_target[r];
        loss -= logp[static_cast<std::size_t>(target)];
        double* drow = d_image.data() + r * static_cast<std::size_t>(vocab);
        for (int o = 0; o < vocab; ++o)
            drow[o] += std::exp(logp[static_cast<std::size_t>(o)]) * weight;
        drow[target] -= weight;
    }
    return loss;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dynamics losses
// ---------------------------------------------------------------------------

namespace {

// Shared one-pass batch loop: build -> forward -> per-item logit grads ->
// backward into the item's grad slot.
template <typename BuildFn, typename ItemFn>
LossBreakdown batched_loss(LossContext& ctx, const Model& model, std::size_t items,
                           BuildFn&& build, ItemFn&& item_fn) {
    require(items > 0, ErrorKind::EmptyBatch, "empty batch");
    auto& grads = ctx.item_grads(items, model.params.size());
    std::vector<double> item_totals(items, 0.0);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < items; ++i) {
        auto& scratch = ctx.thread_scratch();
        const BuiltSequence seq = build(i);
        const ForwardResult fwd = forward(model, seq, scratch.acts.p);
        scratch.d_text.assign(fwd.text_logits.size(), 0.0);
        scratch.d_image.assign(fwd.image.logits.size(), 0.0);
        item_totals[i] = item_fn(i, seq, fwd, scratch.d_text, scratch.d_image, scratch.logp);
        backward(model, seq, *scratch.acts.p, fwd, scratch.d_text, scratch.d_image, grads[i]);
    }

    LossBreakdown out;
    out.grad.assign(model.params.size(), 0.0);
    reduce_grads(grads, items, out.grad);
    for (double v : item_totals) out.total += v;
    return out;
}

}  // namespace

LossBreakdown inverse_dynamics_loss(LossContext& ctx, const Model& model,
                                    std::span<const GoalTransition> batch) {
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    const double b = static_cast<double>(batch.size());
    LossBreakdown out = batched_loss(
        ctx, model, batch.size(),
        [&](std::size_t i) {
            return builder.inverse_dyn(batch[i].x_t, batch[i].a_t, batch[i].x_t1);
        },
        [&](std::size_t, const BuiltSequence& seq, const ForwardResult& fwd,
            std::vector<double>& d_text, std::vector<double>&, std::vector<double>& logp) {
            const double norm = 1.0 / (static_cast<double>(seq.text_target.size()) * b);
            return text_ce(fwd, seq, model.cfg.text_vocab, norm, d_text, logp) * norm;
        });
    out.parts["inverse"] = out.total;
    return out;
}

LossBreakdown forward_dynamics_loss(LossContext& ctx, const Model& model,
                                    std::span<const GoalTransition> batch) {
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    const double b = static_cast<double>(batch.size());
    LossBreakdown out = batched_loss(
        ctx, model, batch.size(),
        [&](std::size_t i) {
            return builder.forward_dyn(batch[i].x_t, batch[i].a_t, &batch[i].x_t1);
        },
        [&](std::size_t, const BuiltSequence& seq, const ForwardResult& fwd,
            std::vector<double>&, std::vector<double>& d_image, std::vector<double>& logp) {
            const double norm = 1.0 / (static_cast<double>(seq.image_target.size()) * b);
            return image_ce(fwd, seq, norm, d_image, logp) * norm;
        });
    out.parts["forward"] = out.total;
    return out;
}

LossBreakdown sft_loss(LossContext& ctx, const Model& model,
                       std::span<const GoalTransition> batch, const SftOptions& opts) {
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    const double b = static_cast<double>(batch.size());
    std::vector<double> text_totals(batch.size(), 0.0), image_totals(batch.size(), 0.0);
    LossBreakdown out = batched_loss(
        ctx, model, batch.size(),
        [&](std::size_t i) {
            return builder.plan(batch[i].g, batch[i].x_t, &batch[i].a_t, &batch[i].x_t1,
                                opts.include_image);
        },
        [&](std::size_t i, const BuiltSequence& seq, const ForwardResult& fwd,
            std::vector<double>& d_text, std::vector<double>& d_image,
            std::vector<double>& logp) {
            const double tnorm = 1.0 / (static_cast<double>(seq.text_target.size()) * b);
            double item = text_ce(fwd, seq, model.cfg.text_vocab, tnorm, d_text, logp) * tnorm;
            text_totals[i] = item;
            if (!seq.image_target.empty()) {
                const double inorm =
                    opts.image_unnormalized
                        ? 1.0 / b
                        : 1.0 / (static_cast<double>(seq.image_target.size()) * b);
                const double img = image_ce(fwd, seq, inorm, d_image, logp) * inorm;
                image_totals[i] = img;
                item += img;
            }
            return item;
        });
    double text_total = 0.0, image_total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        text_total += text_totals[i];
        image_total += image_totals[i];
    }
    out.parts["sft_text"] = text_total;
    if (opts.include_image) out.parts["sft_image"] = image_total;
    return out;
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

const char* advantage_mode_name(AdvantageMode m) {
    return m == AdvantageMode::PerPrompt ? "per_prompt" : "per_batch";
}

namespace {

// Normalizes one contiguous group in place (valid entries only); invalid
// entries get zero advantage.
void normalize_group(const double* r, const char* valid, int n, double eps, double* normalized,
                     double* advantages) {
    int count = 0;
    double mean = 0.0;
    for (int i = 0; i < n; ++i)
        if (!valid || valid[i]) {
            mean += r[i];
            ++count;
        }
    if (count == 0) {
        for (int i = 0; i < n; ++i) normalized[i] = advantages[i] = 0.0;
        return;
    }
    mean /= count;
    double var = 0.0;
    for (int i = 0; i < n; ++i)
        if (!valid || valid[i]) {
            const double c = r[i] - mean;
            var += c * c;
        }
    var /= count;  // population variance
    const double sd = std::sqrt(var);
    for (int i = 0; i < n; ++i) {
        if ((valid && !valid[i]) || sd <= eps || count < 2) {
            normalized[i] = advantages[i] = 0.0;
        } else {
            normalized[i] = (r[i] - mean) / sd;
            advantages[i] = normalized[i];
        }
    }
}

}  // namespace

AdvantageBatch normalize_advantages(const std::vector<double>& rewards, int groups, int per_group,
                                    AdvantageMode mode, double eps) {
    require(groups > 0 && per_group > 0, ErrorKind::ShapeMismatch, "empty reward layout");
    require(static_cast<int>(rewards.size()) == groups * per_group, ErrorKind::ShapeMismatch,
            "reward count does not match layout");
    if (mode == AdvantageMode::PerPrompt)
        require(per_group >= 2, ErrorKind::DegenerateGroup,
                "per-prompt normalization needs K >= 2");
    AdvantageBatch out;
    out.rewards = rewards;
    out.groups = groups;
    out.per_group = per_group;
    out.normalized.assign(rewards.size(), 0.0);
    out.advantages.assign(rewards.size(), 0.0);
    if (mode == AdvantageMode::PerBatch) {
        normalize_group(rewards.data(), nullptr, groups * per_group, eps, out.normalized.data(),
                        out.advantages.data());
    } else {
        for (int g = 0; g < groups; ++g) {
            const std::size_t off = static_cast<std::size_t>(g) * per_group;
            normalize_group(rewards.data() + off, nullptr, per_group, eps,
                            out.normalized.data() + off, out.advantages.data() + off);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Policy gradient losses
// ---------------------------------------------------------------------------

namespace {

// Adds the REINFORCE logit gradient for one context and returns the
// advantage-weighted log-prob sum (the per-context RL loss numerator).
double rl_logit_grads(const ForwardResult& fwd, const std::vector<SampledImage>& samples,
                      const double* advantages, double norm, std::vector<double>& d_image,
                      std::vector<double>& logp) {
    const int vocab = fwd.image.vocab;
    const int rows = fwd.image.n_positions;
    logp.resize(static_cast<std::size_t>(vocab));
    double weighted_logp = 0.0;
    for (int r = 0; r < rows; ++r) {
        log_softmax(fwd.image.row(r), vocab, logp.data());
        double asum = 0.0;
        for (std::size_t k = 0; k < samples.size(); ++k) {
            const double a = advantages[k];
            if (a == 0.0) continue;
            asum += a;
            const int id = samples[k].tokens.tokens[static_cast<std::size_t>(r)];
            weighted_logp += a * logp[static_cast<std::size_t>(id)];
            d_image[static_cast<std::size_t>(r) * vocab + id] -= a * norm;
        }
        if (asum != 0.0) {
            double* drow = d_image.data() + static_cast<std::size_t>(r) * vocab;
            for (int o = 0; o < vocab; ++o)
                drow[o] += asum * std::exp(logp[static_cast<std::size_t>(o)]) * norm;
        }
    }
    return weighted_logp;
}

}  // namespace

LossBreakdown rl_loss(LossContext& ctx, const Model& model,
                      std::span<const BuiltSequence> contexts,
                      std::span<const std::vector<SampledImage>> samples,
                      const AdvantageBatch& advantages) {
    require(contexts.size() == samples.size(), ErrorKind::ShapeMismatch,
            "contexts and samples must align");
    require(advantages.groups == static_cast<int>(contexts.size()), ErrorKind::ShapeMismatch,
            "advantage groups must match contexts");
    const std::size_t items = contexts.size();
    const int k = advantages.per_group;
    for (const auto& s : samples)
        require(static_cast<int>(s.size()) == k, ErrorKind::ShapeMismatch,
                "sample count does not match advantage layout");
    const double norm = 1.0 / (static_cast<double>(items) * k);

    LossBreakdown out = batched_loss(
        ctx, model, items, [&](std::size_t i) { return contexts[i]; },
        [&](std::size_t i, const BuiltSequence&, const ForwardResult& fwd, std::vector<double>&,
            std::vector<double>& d_image, std::vector<double>& logp) {
            const double* adv = advantages.advantages.data() + static_cast<std::size_t>(i) * k;
            return -norm * rl_logit_grads(fwd, samples[i], adv, norm, d_image, logp);
        });
    out.parts["rl"] = out.total;
    return out;
}

// ---------------------------------------------------------------------------
// RSFT
// ---------------------------------------------------------------------------

namespace {

struct RsftItemResult {
    double sft_text = 0.0;
    double sft_image = 0.0;
    double rl_weighted_logp = 0.0;
};

// SFT + policy-gradient logit gradients and backward for one item, given its
// forward result and final advantages. The RL value is reported even at
// lambda == 0, where it contributes no gradient.
RsftItemResult rsft_item_grads(LossContext::Scratch& scratch, const Model& model,
                               const BuiltSequence& seq, const ForwardResult& fwd,
                               const std::vector<SampledImage>& samples, const double* advantages,
                               const RsftOptions& opts, double batch_size, double rl_norm,
                               std::vector<double>& grad) {
    scratch.d_text.assign(fwd.text_logits.size(), 0.0);
    scratch.d_image.assign(fwd.image.logits.size(), 0.0);

    RsftItemResult res;
    const double sft_w = opts.rl_only ? 0.0 : 1.0;
    // Arithmetic mirrors sft_loss exactly so the lambda = 0 identity is
    // bit-level, not approximate.
    const double tnorm = 1.0 / (static_cast<double>(seq.text_target.size()) * batch_size);
    res.sft_text =
        text_ce(fwd, seq, model.cfg.text_vocab, sft_w * tnorm, scratch.d_text, scratch.logp) *
        tnorm;
    if (!seq.image_target.empty()) {
        const double inorm =
            opts.sft.image_unnormalized
                ? 1.0 / batch_size
                : 1.0 / (static_cast<double>(seq.image_target.size()) * batch_size);
        res.sft_image =
            image_ce(fwd, seq, sft_w * inorm, scratch.d_image, scratch.logp) * inorm;
    }
    if (!samples.empty()) {
        res.rl_weighted_logp = rl_logit_grads(fwd, samples, advantages, opts.lambda * rl_norm,
                                              scratch.d_image, scratch.logp);
    }
    backward(model, seq, *scratch.acts.p, fwd, scratch.d_text, scratch.d_image, grad);
    return res;
}

LossBreakdown rsft_collect(const Model& model, const std::vector<std::vector<double>>& grads,
                           const std::vector<RsftItemResult>& results, std::size_t items,
                           double rl_norm, const RsftOptions& opts) {
    LossBreakdown out;
    out.grad.assign(model.params.size(), 0.0);
    reduce_grads(grads, items, out.grad);
    double sft_text = 0.0, sft_image = 0.0, sft_total = 0.0, rl = 0.0;
    for (const auto& r : results) {
        sft_text += r.sft_text;
        sft_image += r.sft_image;
        // Same per-item association as sft_loss (text + image, then sum).
        double item = r.sft_text;
        if (opts.sft.include_image) item += r.sft_image;
        sft_total += item;
        rl -= rl_norm * r.rl_weighted_logp;
    }
    out.parts["sft_text"] = sft_text;
    if (opts.sft.include_image) out.parts["sft_image"] = sft_image;
    out.parts["rl"] = rl;
    if (opts.rl_only) sft_total = 0.0;
    out.total = sft_total + opts.lambda * rl;
    return out;
}

}  // namespace

LossBreakdown rsft_loss_frozen(LossContext& ctx, const Model& model,
                               std::span<const GoalTransition> batch,
                               std::span<const std::vector<SampledImage>> samples,
                               const AdvantageBatch& advantages, const RsftOptions& opts) {
    require(!batch.empty(), ErrorKind::EmptyBatch, "empty batch");
    require(samples.size() == batch.size(), ErrorKind::ShapeMismatch,
            "samples must align with batch");
    const std::size_t items = batch.size();
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    auto& grads = ctx.item_grads(items, model.params.size());
    std::vector<RsftItemResult> results(items);
    const int k = advantages.per_group;
    const double rl_norm = 1.0 / (static_cast<double>(items) * k);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < items; ++i) {
        auto& scratch = ctx.thread_scratch();
        const BuiltSequence seq = builder.plan(batch[i].g, batch[i].x_t, &batch[i].a_t,
                                               &batch[i].x_t1, opts.sft.include_image);
        const ForwardResult fwd = forward(model, seq, scratch.acts.p);
        const double* adv = advantages.advantages.data() + static_cast<std::size_t>(i) * k;
        results[i] = rsft_item_grads(scratch, model, seq, fwd, samples[i], adv, opts,
                                     static_cast<double>(items), rl_norm, grads[i]);
    }
    return rsft_collect(model, grads, results, items, rl_norm, opts);
}

LossBreakdown rsft_loss(LossContext& ctx, const Model& model,
                        std::span<const GoalTransition> batch, const RewardFn& reward_fn,
                        const RsftOptions& opts, std::uint64_t sample_seed, RsftStats* stats) {
    require(!batch.empty(), ErrorKind::EmptyBatch, "empty batch");
    require(opts.lambda >= 0.0, ErrorKind::BadConfig, "lambda must be nonnegative");
    require(opts.k_samples >= 2, ErrorKind::DegenerateGroup, "K must be >= 2 for normalization");
    const std::size_t items = batch.size();
    const int k = opts.k_samples;
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    auto& grads = ctx.item_grads(items, model.params.size());
    std::vector<RsftItemResult> results(items);
    std::vector<double> rewards(items * static_cast<std::size_t>(k), 0.0);
    std::vector<char> valid(items * static_cast<std::size_t>(k), 1);
    const double rl_norm = 1.0 / (static_cast<double>(items) * k);
    const bool per_batch = opts.advantage_mode == AdvantageMode::PerBatch;

    // Per-batch advantages couple all prompts before any gradient can be
    // taken, so that mode pays a second forward pass; the default per-prompt
    // mode samples, scores, normalizes and backpropagates from a single
    // forward per prompt (the sequence builder and activations stay live in
    // the loop body).
    std::vector<std::vector<SampledImage>> all_samples(items);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < items; ++i) {
        auto& scratch = ctx.thread_scratch();
        const BuiltSequence seq = builder.plan(batch[i].g, batch[i].x_t, &batch[i].a_t,
                                               &batch[i].x_t1, opts.sft.include_image);
        const ForwardResult fwd = forward(model, seq, scratch.acts.p);
        require(!fwd.image.logits.empty(), ErrorKind::MissingField,
                "RSFT requires the image segment (an image-free plan cannot sample)");
        Rng rng = Rng::derive(sample_seed, 0x5a3eull, i);
        all_samples[i] = sample_images(fwd.image, k, rng, model.cfg.grid);
        double* r_i = rewards.data() + i * static_cast<std::size_t>(k);
        char* v_i = valid.data() + i * static_cast<std::size_t>(k);
        for (int s = 0; s < k; ++s) {
            try {
                r_i[s] = reward_fn(batch[i], all_samples[i][static_cast<std::size_t>(s)].tokens);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::RewardFailure) throw;
                v_i[s] = 0;
            }
        }
        if (!per_batch) {
            std::vector<double> adv(static_cast<std::size_t>(k), 0.0);
            std::vector<double> norm(static_cast<std::size_t>(k), 0.0);
            normalize_group(r_i, v_i, k, opts.eps, norm.data(), adv.data());
            results[i] = rsft_item_grads(scratch, model, seq, fwd, all_samples[i], adv.data(),
                                         opts, static_cast<double>(items), rl_norm, grads[i]);
        }
    }

    if (per_batch) {
        std::vector<double> norm(rewards.size(), 0.0), adv(rewards.size(), 0.0);
        normalize_group(rewards.data(), valid.data(), static_cast<int>(rewards.size()), opts.eps,
                        norm.data(), adv.data());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::size_t i = 0; i < items; ++i) {
            auto& scratch = ctx.thread_scratch();
            const BuiltSequence seq = builder.plan(batch[i].g, batch[i].x_t, &batch[i].a_t,
                                                   &batch[i].x_t1, opts.sft.include_image);
            const ForwardResult fwd = forward(model, seq, scratch.acts.p);
            results[i] =
                rsft_item_grads(scratch, model, seq, fwd, all_samples[i],
                                adv.data() + i * static_cast<std::size_t>(k), opts,
                                static_cast<double>(items), rl_norm, grads[i]);
        }
    }

    if (stats) {
        stats->excluded_samples = 0;
        stats->mean_reward = 0.0;
        int included = 0;
        for (std::size_t i = 0; i < rewards.size(); ++i) {
            if (valid[i]) {
                stats->mean_reward += rewards[i];
                ++included;
            } else {
                ++stats->excluded_samples;
            }
        }
        if (included) stats->mean_reward /= included;
    }
    return rsft_collect(model, grads, results, items, rl_norm, opts);
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<LossBreakdown(const Model&)>& loss_fn, Model& model,
                         int n_probes, double h, std::uint64_t probe_seed) {
    const LossBreakdown first = loss_fn(model);
    const LossBreakdown second = loss_fn(model);
    require(first.total == second.total, ErrorKind::NonDeterministicLoss,
            "loss is not deterministic at fixed parameters");
    require(first.grad.size() == model.params.size(), ErrorKind::ShapeMismatch,
            "loss gradient missing");

    Rng rng = Rng::derive(probe_seed, 0xfdfdull);
    double max_rel = 0.0;
    for (int probe = 0; probe < n_probes; ++probe) {
        const std::size_t idx = rng.below(model.params.size());
        const double saved = model.params[idx];
        model.params[idx] = saved + h;
        const double up = loss_fn(model).total;
        model.params[idx] = saved - h;
        const double down = loss_fn(model).total;
        model.params[idx] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::abs(first.grad[idx] - fd) / (std::abs(fd) + 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace vlplan
