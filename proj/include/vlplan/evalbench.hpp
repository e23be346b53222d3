#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlplan/genmodel.hpp"
#include "vlplan/objectives.hpp"
#include "vlplan/trainer.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

// One planning decision: a language action plus an optional subgoal image
// (the image is diagnostic; the executor consumes only the action).
struct PlanDecision {
    std::optional<LanguageAction> action;
    std::optional<TokenImage> subgoal;
};

using PlannerPolicy =
    std::function<PlanDecision(const TaskSpec& g, const SymbolicState& s, Rng& rng)>;

// Greedy action decoding + one sampled subgoal image per step.
PlannerPolicy make_model_policy(const Model& model, const Vocab& vocab);
// Replays the deterministic oracle (perfect agent; subgoal = true next state).
PlannerPolicy make_oracle_policy();
// Uniformly random (mostly illegal) actions.
PlannerPolicy make_random_policy();

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct EpisodeResult {
    TaskSpec task;
    int steps = 0;
    bool success = false;
    std::vector<char> action_match;  // per step: decoded == oracle next action
    double token_acc_sum = 0.0;      // summed over steps with a subgoal image
    double ssim_sum = 0.0;
    double reward_sum = 0.0;
    int image_steps = 0;
};

// Closed loop: decide -> execute symbolically (illegal actions leave the
// state unchanged and count as failed steps) -> stop on success or horizon.
EpisodeResult rollout_episode(const PlannerPolicy& policy, const Task& task, int horizon,
                              Rng& rng, const RewardParams& reward_params);

struct EvalSummary {
    int episodes = 0;
    double sr = 0.0, la = 0.0;
    double sr_lo = 0.0, sr_hi = 0.0;  // 95% bootstrap interval
    double la_lo = 0.0, la_hi = 0.0;
    double image_token_acc = 0.0;
    double ssim = 0.0;
    double mean_reward = 0.0;
};

// n_episodes >= 30; tasks are cycled. Deterministic per seed.
EvalSummary evaluate(const PlannerPolicy& policy, std::span<const Task> tasks, int n_episodes,
                     std::uint64_t seed, const RewardParams& reward_params, int horizon = 12,
                     std::vector<EpisodeResult>* per_episode = nullptr);

// Builds evaluation tasks from the distinct episodes of a test split.
std::vector<Task> tasks_from_transitions(std::span<const GoalTransition> transitions);

// ---------------------------------------------------------------------------
// Image metric
// ---------------------------------------------------------------------------

// Structural similarity: grayscale, 8x8 windows, stride 4,
// C1=(0.01*255)^2, C2=(0.03*255)^2; mean over windows.
double ssim(const Raster& a, const Raster& b);

// ---------------------------------------------------------------------------
// Sampling-efficiency benchmark
// ---------------------------------------------------------------------------

struct BenchRecord {
    std::string variant;  // "one_step" | "ar"
    int k = 0;
    int n_tokens = 0;
    std::uint64_t forward_calls = 0;
    double wall_seconds = 0.0;
};

struct BenchReport {
    std::vector<BenchRecord> records;  // one per (variant, k)
    std::string markdown;              // tabular report
};

// Instrumented sampling comparison; asserts exact forward counts (1 per
// context for one-step; K*N per context for AR) and throws CounterMismatch
// otherwise.
BenchReport bench_sampling(const Model& one_step, const Model& ar, int k, int trials,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Reward curve
// ---------------------------------------------------------------------------

struct CurvePoint {
    int step = 0;
    double mean_reward = 0.0;
};

// Mean greedy-generation dynamic reward per checkpoint over held-out
// transitions.
std::vector<CurvePoint> reward_curve(const std::vector<std::string>& ckpt_paths,
                                     std::span<const GoalTransition> test_items,
                                     const RewardFn& reward_fn, int max_items = 64);

}  // namespace vlplan
