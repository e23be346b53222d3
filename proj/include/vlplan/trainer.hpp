#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vlplan/dynreward.hpp"
#include "vlplan/genmodel.hpp"
#include "vlplan/objectives.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 32;
    int k_samples = 8;
    double lambda_rsft = 0.5;
    int pretrain_steps = 2000;
    int sft_steps = 500;
    int rsft_steps = 2000;
    double warmup_frac = 0.03;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    AdvantageMode advantage_mode = AdvantageMode::PerPrompt;
    double advantage_eps = 1e-6;

    // ablation switches
    bool no_idm = false;
    bool no_fdm = false;
    bool no_se = false;
    bool no_en = false;
    bool no_gen = false;
    bool rl_only = false;
    bool ar_variant = false;
    bool image_loss_unnormalized = false;

    // bookkeeping
    int eval_interval = 50;
    int eval_items = 64;     // held-out transitions per evaluation
    int ckpt_interval = 0;   // periodic checkpoint saves; 0 = final only
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    bool operator==(const TrainConfig&) const = default;

    // Applies the architecture-level ablations to a model config.
    ModelConfig apply_to(ModelConfig cfg) const;
};

// ---------------------------------------------------------------------------
// Dataset views
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<GoalTransition> train;
    std::vector<GoalTransition> test;

    static Dataset split(std::vector<GoalTransition> all);
};

// ---------------------------------------------------------------------------
// Metrics stream
// ---------------------------------------------------------------------------

struct MetricsRow {
    int step = 0;
    std::string phase;
    std::optional<double> loss_total, loss_sft_text, loss_sft_image, loss_rl;
    std::optional<double> mean_reward, test_reward, action_acc, image_token_acc;
    std::uint64_t fwd_calls = 0;
};

// Append-only CSV writer with a fixed column set and exact float formatting
// (re-runs produce byte-identical files).
class MetricsWriter {
public:
    static constexpr const char* kHeader =
        "step,phase,loss_total,loss_sft_text,loss_sft_image,loss_rl,mean_reward,test_reward,"
        "action_acc,image_token_acc,fwd_calls";

    MetricsWriter(const std::string& path, bool append);
    void write(const MetricsRow& row);
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    std::uint64_t seed = 0;
    int step = 0;  // completed steps within `phase`
    std::string phase = "init";
    std::uint64_t fwd_calls = 0;
    Model model;
    std::vector<double> adam_m, adam_v;
    long adam_t = 0;
    std::array<std::uint64_t, 6> rng_state{};
};

// Self-describing binary container: magic, JSON header (configs, codebook,
// color map, tensor manifest), named float64 arrays, CRC32 trailer.
// save -> load -> save is byte-identical.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint init_checkpoint(const ModelConfig& mcfg, const TrainConfig& tcfg);

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

struct PhaseHooks {
    MetricsWriter* metrics = nullptr;
    std::string ckpt_dir;  // periodic checkpoint directory ("" = none)
};

// Joint inverse+forward dynamics pretraining on the same batch each step.
void pretrain_phase(Checkpoint& ckpt, const Dataset& data, const PhaseHooks& hooks = {});

// Supervised fine-tuning on plan prompts (text + image unless no_gen).
void sft_phase(Checkpoint& ckpt, const Dataset& data, const PhaseHooks& hooks = {});

// RSFT: per step, L_SFT plus lambda * L_RL on K sampled images per prompt.
void rsft_phase(Checkpoint& ckpt, const Dataset& data, const RewardFn& reward_fn,
                const PhaseHooks& hooks = {});

// Builds the dynamic-aware reward callback used by the standard pipeline.
RewardFn make_dynamic_reward_fn(const RewardParams& params);

// ---------------------------------------------------------------------------
// Held-out metrics
// ---------------------------------------------------------------------------

struct TeacherForcedMetrics {
    std::optional<double> action_acc;
    std::optional<double> image_token_acc;
};

// Teacher-forced argmax accuracy on held-out transitions. Pretrain measures
// on the dynamics prompts; later phases measure on plan prompts.
TeacherForcedMetrics eval_teacher_forced(LossContext& ctx, const Model& model,
                                         std::span<const GoalTransition> items, bool plan_prompts,
                                         bool include_image);

// Mean dynamic reward of greedy generations on held-out transitions
// (teacher-forced action conditioning).
double eval_test_reward(LossContext& ctx, const Model& model,
                        std::span<const GoalTransition> items, const RewardFn& reward_fn);

}  // namespace vlplan
