#include "vlplan/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vlplan {

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

PlannerPolicy make_model_policy(const Model& model, const Vocab& vocab) {
    const Model* m = &model;
    const Vocab* v = &vocab;
    return [m, v](const TaskSpec& g, const SymbolicState& s, Rng& rng) {
        const SequenceBuilder builder(m->cfg, *v);
        PlanDecision out;
        const BuiltSequence condition = builder.plan(g, s, nullptr, nullptr);
        const DecodedAction decoded = decode_action(*m, condition, *v, /*greedy=*/true, rng);
        if (!decoded.truncated) {
            if (auto action = parse_action_tokens(decoded.tokens, *v)) out.action = *action;
        }
        // One sampled subgoal image conditioned on the decoded action text.
        LanguageAction cond_action = out.action ? *out.action : LanguageAction{};
        const BuiltSequence full = builder.plan(g, s, &cond_action, nullptr);
        if (m->cfg.variant == Variant::OneStep) {
            const ForwardResult fwd = forward(*m, full);
            out.subgoal = sample_images(fwd.image, 1, rng, m->cfg.grid).front().tokens;
        } else {
            out.subgoal = ar_sample_image(*m, full, rng, /*greedy=*/false).tokens;
        }
        return out;
    };
}

PlannerPolicy make_oracle_policy() {
    return [](const TaskSpec& g, const SymbolicState& s, Rng&) {
        PlanDecision out;
        if (auto next = oracle_next(g, s)) {
            out.action = *next;
            out.subgoal = tokenize(apply_action(s, *next));
        }
        return out;
    };
}

PlannerPolicy make_random_policy() {
    return [](const TaskSpec&, const SymbolicState& s, Rng& rng) {
        PlanDecision out;
        LanguageAction a;
        a.color = rng.below_int(kNumColors);
        a.src_r = rng.below_int(s.grid);
        a.src_c = rng.below_int(s.grid);
        a.dst_r = rng.below_int(s.grid);
        a.dst_c = rng.below_int(s.grid);
        out.action = a;
        return out;
    };
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

EpisodeResult rollout_episode(const PlannerPolicy& policy, const Task& task, int horizon,
                              Rng& rng, const RewardParams& reward_params) {
    EpisodeResult res;
    res.task = task.spec;
    SymbolicState state = task.state;
    for (int step = 0; step < horizon; ++step) {
        if (check_success(task.spec, state)) break;
        const auto oracle = oracle_next(task.spec, state);
        const PlanDecision decision = policy(task.spec, state, rng);

        const bool match = decision.action && oracle && *decision.action == *oracle;
        res.action_match.push_back(match ? 1 : 0);

        SymbolicState next = state;
        if (decision.action) {
            try {
                next = apply_action(state, *decision.action);
            } catch (const Error&) {
                // Executor failure: the step is spent, the state unchanged.
            }
        }
        if (decision.subgoal) {
            const SymbolicState realized = next;
            double token_acc = 0.0;
            const auto& gen = decision.subgoal->tokens;
            const TokenImage real = tokenize(realized);
            for (std::size_t i = 0; i < gen.size(); ++i)
                token_acc += gen[i] == real.tokens[i];
            token_acc /= static_cast<double>(gen.size());
            res.token_acc_sum += token_acc;
            Raster gen_raster;
            bool decodable = true;
            try {
                gen_raster = render(detokenize(*decision.subgoal));
            } catch (const Error&) {
                decodable = false;
            }
            if (decodable) {
                const Raster real_raster = render(realized);
                res.ssim_sum += ssim(gen_raster, real_raster);
                res.reward_sum +=
                    dynamic_reward(render(state), gen_raster, real_raster, reward_params);
            }
            ++res.image_steps;
        }
        state = next;
        ++res.steps;
    }
    res.success = check_success(task.spec, state);
    return res;
}

std::vector<Task> tasks_from_transitions(std::span<const GoalTransition> transitions) {
    std::vector<Task> tasks;
    int last_episode = -1;
    for (const auto& tr : transitions) {
        if (tr.episode == last_episode) continue;
        if (tr.step != 0) continue;  // need the episode's initial state
        tasks.push_back(Task{tr.g, tr.x_t});
        last_episode = tr.episode;
    }
    return tasks;
}

namespace {

struct EpisodeStats {
    double success = 0.0;
    int matches = 0;
    int steps = 0;
};

std::pair<double, double> bootstrap_ci(const std::vector<double>& per_episode, std::uint64_t seed,
                                       int resamples = 1000) {
    if (per_episode.empty()) return {0.0, 0.0};
    Rng rng = Rng::derive(seed, 0xb007ull);
    std::vector<double> means;
    means.reserve(static_cast<std::size_t>(resamples));
    for (int r = 0; r < resamples; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < per_episode.size(); ++i)
            acc += per_episode[rng.below(per_episode.size())];
        means.push_back(acc / static_cast<double>(per_episode.size()));
    }
    std::sort(means.begin(), means.end());
    const auto at = [&](double q) {
        const double pos = q * static_cast<double>(means.size() - 1);
        return means[static_cast<std::size_t>(std::llround(pos))];
    };
    return {at(0.025), at(0.975)};
}

}  // namespace

EvalSummary evaluate(const PlannerPolicy& policy, std::span<const Task> tasks, int n_episodes,
                     std::uint64_t seed, const RewardParams& reward_params, int horizon,
                     std::vector<EpisodeResult>* per_episode) {
    require(n_episodes >= 30, ErrorKind::BadConfig, "need at least 30 episodes");
    require(!tasks.empty(), ErrorKind::EmptyBatch, "no evaluation tasks");
    std::vector<EpisodeResult> episodes(static_cast<std::size_t>(n_episodes));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int e = 0; e < n_episodes; ++e) {
        Rng rng = Rng::derive(seed, 0xe915ull, static_cast<std::uint64_t>(e));
        episodes[static_cast<std::size_t>(e)] =
            rollout_episode(policy, tasks[static_cast<std::size_t>(e) % tasks.size()], horizon,
                            rng, reward_params);
    }

    EvalSummary s;
    s.episodes = n_episodes;
    std::vector<double> suc, la_ep;
    long match = 0, steps = 0;
    double tok = 0.0, ss = 0.0, rew = 0.0;
    long image_steps = 0;
    for (const auto& ep : episodes) {
        suc.push_back(ep.success ? 1.0 : 0.0);
        double ep_match = 0.0;
        for (char m : ep.action_match) ep_match += m;
        la_ep.push_back(ep.action_match.empty() ? 1.0
                                                : ep_match / static_cast<double>(ep.action_match.size()));
        for (char m : ep.action_match) match += m;
        steps += static_cast<long>(ep.action_match.size());
        tok += ep.token_acc_sum;
        ss += ep.ssim_sum;
        rew += ep.reward_sum;
        image_steps += ep.image_steps;
    }
    s.sr = std::accumulate(suc.begin(), suc.end(), 0.0) / static_cast<double>(n_episodes);
    s.la = steps ? static_cast<double>(match) / static_cast<double>(steps) : 1.0;
    std::tie(s.sr_lo, s.sr_hi) = bootstrap_ci(suc, seed ^ 0x1);
    std::tie(s.la_lo, s.la_hi) = bootstrap_ci(la_ep, seed ^ 0x2);
    if (image_steps) {
        s.image_token_acc = tok / static_cast<double>(image_steps);
        s.ssim = ss / static_cast<double>(image_steps);
        s.mean_reward = rew / static_cast<double>(image_steps);
    }
    if (per_episode) *per_episode = std::move(episodes);
    return s;
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

double ssim(const Raster& a, const Raster& b) {
    require(a.same_dims(b), ErrorKind::DimensionMismatch, "raster dims differ");
    constexpr int kWin = 8;
    constexpr int kStride = 4;
    constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);

    // Grayscale on the 0..255 scale (the constants assume this range).
    const std::size_t npx = static_cast<std::size_t>(a.height) * a.width;
    std::vector<double> ga(npx), gb(npx);
    for (std::size_t i = 0; i < npx; ++i) {
        const std::uint8_t* pa = a.data.data() + i * 3;
        const std::uint8_t* pb = b.data.data() + i * 3;
        ga[i] = 0.299 * pa[0] + 0.587 * pa[1] + 0.114 * pa[2];
        gb[i] = 0.299 * pb[0] + 0.587 * pb[1] + 0.114 * pb[2];
    }

    double total = 0.0;
    long windows = 0;
    for (int y = 0; y + kWin <= a.height; y += kStride)
        for (int x = 0; x + kWin <= a.width; x += kStride) {
            double ma = 0.0, mb = 0.0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    ma += ga[static_cast<std::size_t>(y + i) * a.width + (x + j)];
                    mb += gb[static_cast<std::size_t>(y + i) * a.width + (x + j)];
                }
            const double n = kWin * kWin;
            ma /= n;
            mb /= n;
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double da = ga[static_cast<std::size_t>(y + i) * a.width + (x + j)] - ma;
                    const double db = gb[static_cast<std::size_t>(y + i) * a.width + (x + j)] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    return windows ? total / static_cast<double>(windows) : 1.0;
}

// ---------------------------------------------------------------------------
// Sampling benchmark
// ---------------------------------------------------------------------------

namespace {

struct BenchContext {
    GoalTransition tr;
    BuiltSequence seq_one_step;  // with queries
    BuiltSequence seq_ar;        // condition only
};

std::vector<BenchContext> bench_contexts(const Model& one_step, const Model& ar, int trials,
                                         std::uint64_t seed) {
    const Vocab vocab(one_step.cfg.grid);
    const SequenceBuilder b_one(one_step.cfg, vocab);
    const SequenceBuilder b_ar(ar.cfg, vocab);
    std::vector<BenchContext> out;
    const TaskFamily fams[3] = {TaskFamily::MoveToZone, TaskFamily::StackByColor,
                                TaskFamily::MatchBowls};
    for (int t = 0; t < trials; ++t) {
        BenchContext c;
        const Task task = new_task(seed + static_cast<std::uint64_t>(t), fams[t % 3],
                                   one_step.cfg.grid);
        const auto plan = oracle_plan(task.spec, task.state);
        c.tr.g = task.spec;
        c.tr.x_t = task.state;
        c.tr.a_t = plan.front();
        c.tr.x_t1 = apply_action(task.state, plan.front());
        c.seq_one_step = b_one.forward_dyn(c.tr.x_t, c.tr.a_t, nullptr);
        c.seq_ar = b_ar.forward_dyn(c.tr.x_t, c.tr.a_t, nullptr);
        out.push_back(std::move(c));
    }
    return out;
}

BenchRecord run_bench(const Model& model, const std::vector<BenchContext>& contexts, int k,
                      bool one_step, std::uint64_t seed) {
    BenchRecord rec;
    rec.variant = variant_name(model.cfg.variant);
    rec.k = k;
    rec.n_tokens = model.cfg.n_cells();
    const std::uint64_t calls_before = model.forward_calls;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        Rng rng = Rng::derive(seed, 0xbe9cull, i);
        if (one_step) {
            const ForwardResult fwd = forward(model, contexts[i].seq_one_step);
            (void)sample_images(fwd.image, k, rng, model.cfg.grid);
        } else {
            for (int s = 0; s < k; ++s)
                (void)ar_sample_image(model, contexts[i].seq_ar, rng, /*greedy=*/false);
        }
    }
    const auto t1 = std::chrono::steady_clock::now();
    rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    rec.forward_calls = model.forward_calls - calls_before;

    const std::uint64_t expected =
        one_step ? contexts.size()
                 : contexts.size() * static_cast<std::uint64_t>(k) *
                       static_cast<std::uint64_t>(model.cfg.n_cells());
    require(rec.forward_calls == expected, ErrorKind::CounterMismatch,
            "forward count " + std::to_string(rec.forward_calls) + " != expected " +
                std::to_string(expected));
    return rec;
}

}  // namespace

BenchReport bench_sampling(const Model& one_step, const Model& ar, int k, int trials,
                           std::uint64_t seed) {
    require(one_step.cfg.variant == Variant::OneStep && ar.cfg.variant == Variant::AR,
            ErrorKind::BadConfig, "bench needs a one-step and an AR model");
    require(one_step.cfg.d_model == ar.cfg.d_model && one_step.cfg.n_layers == ar.cfg.n_layers &&
                one_step.cfg.grid == ar.cfg.grid,
            ErrorKind::BadConfig, "bench models must share dimensions");
    require(k >= 1 && trials >= 1, ErrorKind::BadConfig, "k and trials must be positive");

    const auto contexts = bench_contexts(one_step, ar, trials, seed);
    BenchReport report;
    for (int kk : {1, k}) {
        report.records.push_back(run_bench(one_step, contexts, kk, true, seed + kk));
        report.records.push_back(run_bench(ar, contexts, kk, false, seed + kk));
        if (k == 1) break;
    }

    std::ostringstream md;
    md << "| Method | Forward passes (" << trials << " contexts) | 1 image (s) | " << k
       << " images (s) |\n";
    md << "|---|---|---|---|\n";
    auto find = [&](const std::string& variant, int kk) -> const BenchRecord* {
        for (const auto& r : report.records)
            if (r.variant == variant && r.k == kk) return &r;
        return nullptr;
    };
    const BenchRecord* os1 = find("one_step", 1);
    const BenchRecord* osk = find("one_step", k);
    const BenchRecord* ar1 = find("ar", 1);
    const BenchRecord* ark = find("ar", k);
    md << "| one-step (this model) | " << (osk ? osk->forward_calls : 0) << " | "
       << (os1 ? os1->wall_seconds : 0.0) << " | " << (osk ? osk->wall_seconds : 0.0) << " |\n";
    md << "| autoregressive | " << (ark ? ark->forward_calls : 0) << " | "
       << (ar1 ? ar1->wall_seconds : 0.0) << " | " << (ark ? ark->wall_seconds : 0.0) << " |\n";
    md << "| diffusion | n/a | n/a | n/a |\n\n";
    md << "One-step sampling uses exactly one forward pass per context for any K; the AR\n"
          "variant uses K*N. No diffusion model exists in this artifact, so that row is\n"
          "reported as not applicable.\n";
    report.markdown = md.str();
    return report;
}

// ---------------------------------------------------------------------------
// Reward curve
// ---------------------------------------------------------------------------

std::vector<CurvePoint> reward_curve(const std::vector<std::string>& ckpt_paths,
                                     std::span<const GoalTransition> test_items,
                                     const RewardFn& reward_fn, int max_items) {
    std::vector<CurvePoint> out;
    std::vector<GoalTransition> items;
    for (int i = 0; i < max_items && i < static_cast<int>(test_items.size()); ++i)
        items.push_back(test_items[static_cast<std::size_t>(i)]);
    for (const auto& path : ckpt_paths) {
        Checkpoint ckpt = load_checkpoint(path);
        const Vocab vocab(ckpt.model_cfg.grid);
        LossContext ctx(vocab);
        CurvePoint p;
        p.step = ckpt.step;
        p.mean_reward = eval_test_reward(ctx, ckpt.model, items, reward_fn);
        out.push_back(p);
    }
    return out;
}

}  // namespace vlplan
