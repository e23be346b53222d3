#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlplan/genmodel.hpp"
#include "vlplan/gridworld.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Loss values and gradients
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double total = 0.0;
    std::map<std::string, double> parts;  // inverse / forward / sft_text / sft_image / rl
    std::vector<double> grad;             // aligned with Model::params

    double part(const std::string& name) const {
        auto it = parts.find(name);
        return it == parts.end() ? 0.0 : it->second;
    }
};

struct SftOptions {
    bool include_image = true;        // false = language-only planner (no_gen)
    bool image_unnormalized = false;  // drop the 1/N on the image term
};

// Scratch pools for batched loss evaluation; reusable across steps. One
// LossContext per training thread-group; not shareable concurrently.
class LossContext {
public:
    explicit LossContext(const Vocab& vocab);  // allocates per-thread scratch up front
    const Vocab& vocab() const { return *vocab_; }

    struct Scratch {
        ActivationsPtr acts;
        std::vector<double> d_text, d_image, logp;
    };

    Scratch& thread_scratch();
    std::vector<std::vector<double>>& item_grads(std::size_t items, std::size_t params);

private:
    const Vocab* vocab_;
    std::vector<std::unique_ptr<Scratch>> scratch_;
    std::vector<std::vector<double>> item_grads_;
};

// Mean over the batch of the length-normalized action-token cross entropy,
// conditioned on (x_t, x_t+1).
LossBreakdown inverse_dynamics_loss(LossContext& ctx, const Model& model,
                                    std::span<const GoalTransition> batch);

// Mean over the batch of the (1/N) image-token cross entropy for x_t+1,
// conditioned on (x_t, a_t).
LossBreakdown forward_dynamics_loss(LossContext& ctx, const Model& model,
                                    std::span<const GoalTransition> batch);

// Joint action + image likelihood on plan prompts (text part conditioned on
// (g, x_t); image part on (g, x_t, a_t)).
LossBreakdown sft_loss(LossContext& ctx, const Model& model,
                       std::span<const GoalTransition> batch, const SftOptions& opts = {});

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

enum class AdvantageMode { PerPrompt, PerBatch };
const char* advantage_mode_name(AdvantageMode m);

struct AdvantageBatch {
    std::vector<double> rewards;
    std::vector<double> normalized;
    std::vector<double> advantages;  // == normalized (zeroed for flat groups)
    int groups = 0;
    int per_group = 0;
};

// r~ = (r - mean)/std over each group (population std); groups with
// std <= eps get zero advantages. PerPrompt groups rows of K; PerBatch uses
// one group spanning everything.
AdvantageBatch normalize_advantages(const std::vector<double>& rewards, int groups, int per_group,
                                    AdvantageMode mode, double eps = 1e-6);

// ---------------------------------------------------------------------------
// Policy gradient losses
// ---------------------------------------------------------------------------

// REINFORCE on image samples: -(1/(B*K)) sum A_k log P(x^k | context).
// Advantages are constants; no gradient flows through sampling or rewards.
LossBreakdown rl_loss(LossContext& ctx, const Model& model,
                      std::span<const BuiltSequence> contexts,
                      std::span<const std::vector<SampledImage>> samples,
                      const AdvantageBatch& advantages);

// Reward callback for RSFT; throwing Error(RewardFailure) excludes the
// sample and renormalizes its group.
using RewardFn = std::function<double(const GoalTransition& item, const TokenImage& generated)>;

struct RsftOptions {
    double lambda = 0.5;
    int k_samples = 8;
    AdvantageMode advantage_mode = AdvantageMode::PerPrompt;
    double eps = 1e-6;
    bool rl_only = false;  // zero weight on the SFT term (GPG form)
    SftOptions sft;
};

struct RsftStats {
    int excluded_samples = 0;
    double mean_reward = 0.0;  // over included samples
};

// Full RSFT objective: one forward per prompt serves the SFT terms, the K
// image samples, and the policy-gradient backward. sample_seed derives the
// per-item sampling streams.
LossBreakdown rsft_loss(LossContext& ctx, const Model& model,
                        std::span<const GoalTransition> batch, const RewardFn& reward_fn,
                        const RsftOptions& opts, std::uint64_t sample_seed,
                        RsftStats* stats = nullptr);

// Deterministic RSFT core on frozen samples and advantages (used by the
// finite-difference checks and shared by the live path).
LossBreakdown rsft_loss_frozen(LossContext& ctx, const Model& model,
                               std::span<const GoalTransition> batch,
                               std::span<const std::vector<SampledImage>> samples,
                               const AdvantageBatch& advantages, const RsftOptions& opts);

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

// Central finite differences on n_probes randomly chosen coordinates;
// returns max |g_analytic - g_fd| / (|g_fd| + 1e-8). Throws
// NonDeterministicLoss when two evaluations at identical parameters differ.
double finite_diff_check(const std::function<LossBreakdown(const Model&)>& loss_fn, Model& model,
                         int n_probes, double h, std::uint64_t probe_seed);

}  // namespace vlplan
