#include "vlplan/json_io.hpp"

#include <set>

#include "vlplan/error.hpp"

namespace vlplan {

namespace {

Variant variant_from_name(const std::string& s) {
    if (s == "one_step") return Variant::OneStep;
    if (s == "ar") return Variant::AR;
    fail(ErrorKind::BadConfig, "unknown variant: " + s);
}

FuseMode fuse_from_name(const std::string& s) {
    if (s == "full") return FuseMode::Full;
    if (s == "no_se") return FuseMode::NoSe;
    if (s == "no_en") return FuseMode::NoEn;
    fail(ErrorKind::BadConfig, "unknown fuse mode: " + s);
}

AdvantageMode advantage_from_name(const std::string& s) {
    if (s == "per_prompt") return AdvantageMode::PerPrompt;
    if (s == "per_batch") return AdvantageMode::PerBatch;
    fail(ErrorKind::BadConfig, "unknown advantage mode: " + s);
}

}  // namespace

void check_known_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                      const std::string& scope) {
    std::set<std::string> allowed(known.begin(), known.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        require(allowed.count(it.key()) != 0, ErrorKind::BadConfig,
                "unknown config key '" + scope + it.key() + "'");
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["d_sem"] = cfg.d_sem;
    j["grid"] = cfg.grid;
    j["text_vocab"] = cfg.text_vocab;
    j["codebook"] = cfg.codebook;
    j["max_seq_len"] = cfg.max_seq_len;
    j["variant"] = variant_name(cfg.variant);
    j["fuse"] = fuse_mode_name(cfg.fuse);
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    check_known_keys(j,
                     {"d_model", "n_layers", "n_heads", "d_sem", "grid", "text_vocab", "codebook",
                      "max_seq_len", "variant", "fuse"},
                     "model.");
    ModelConfig cfg;
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.d_sem = j.value("d_sem", cfg.d_sem);
    cfg.grid = j.value("grid", cfg.grid);
    cfg.text_vocab = j.value("text_vocab", cfg.text_vocab);
    cfg.codebook = j.value("codebook", cfg.codebook);
    cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
    if (j.contains("variant")) cfg.variant = variant_from_name(j["variant"].get<std::string>());
    if (j.contains("fuse")) cfg.fuse = fuse_from_name(j["fuse"].get<std::string>());
    return cfg;
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["lr"] = cfg.lr;
    j["batch_size"] = cfg.batch_size;
    j["k_samples"] = cfg.k_samples;
    j["lambda_rsft"] = cfg.lambda_rsft;
    j["pretrain_steps"] = cfg.pretrain_steps;
    j["sft_steps"] = cfg.sft_steps;
    j["rsft_steps"] = cfg.rsft_steps;
    j["warmup_frac"] = cfg.warmup_frac;
    j["weight_decay"] = cfg.weight_decay;
    j["seed"] = cfg.seed;
    j["advantage_mode"] = advantage_mode_name(cfg.advantage_mode);
    j["advantage_eps"] = cfg.advantage_eps;
    j["no_idm"] = cfg.no_idm;
    j["no_fdm"] = cfg.no_fdm;
    j["no_se"] = cfg.no_se;
    j["no_en"] = cfg.no_en;
    j["no_gen"] = cfg.no_gen;
    j["rl_only"] = cfg.rl_only;
    j["ar_variant"] = cfg.ar_variant;
    j["image_loss_unnormalized"] = cfg.image_loss_unnormalized;
    j["eval_interval"] = cfg.eval_interval;
    j["eval_items"] = cfg.eval_items;
    j["ckpt_interval"] = cfg.ckpt_interval;
    j["adam_beta1"] = cfg.adam_beta1;
    j["adam_beta2"] = cfg.adam_beta2;
    j["adam_eps"] = cfg.adam_eps;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    check_known_keys(
        j, {"lr",           "batch_size",     "k_samples",     "lambda_rsft", "pretrain_steps",
            "sft_steps",    "rsft_steps",     "warmup_frac",   "weight_decay", "seed",
            "advantage_mode", "advantage_eps", "no_idm",       "no_fdm",      "no_se",
            "no_en",        "no_gen",         "rl_only",       "ar_variant",
            "image_loss_unnormalized",        "eval_interval", "eval_items",  "ckpt_interval",
            "adam_beta1",   "adam_beta2",     "adam_eps"},
        "train.");
    TrainConfig cfg;
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.k_samples = j.value("k_samples", cfg.k_samples);
    cfg.lambda_rsft = j.value("lambda_rsft", cfg.lambda_rsft);
    cfg.pretrain_steps = j.value("pretrain_steps", cfg.pretrain_steps);
    cfg.sft_steps = j.value("sft_steps", cfg.sft_steps);
    cfg.rsft_steps = j.value("rsft_steps", cfg.rsft_steps);
    cfg.warmup_frac = j.value("warmup_frac", cfg.warmup_frac);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("advantage_mode"))
        cfg.advantage_mode = advantage_from_name(j["advantage_mode"].get<std::string>());
    cfg.advantage_eps = j.value("advantage_eps", cfg.advantage_eps);
    cfg.no_idm = j.value("no_idm", cfg.no_idm);
    cfg.no_fdm = j.value("no_fdm", cfg.no_fdm);
    cfg.no_se = j.value("no_se", cfg.no_se);
    cfg.no_en = j.value("no_en", cfg.no_en);
    cfg.no_gen = j.value("no_gen", cfg.no_gen);
    cfg.rl_only = j.value("rl_only", cfg.rl_only);
    cfg.ar_variant = j.value("ar_variant", cfg.ar_variant);
    cfg.image_loss_unnormalized = j.value("image_loss_unnormalized", cfg.image_loss_unnormalized);
    cfg.eval_interval = j.value("eval_interval", cfg.eval_interval);
    cfg.eval_items = j.value("eval_items", cfg.eval_items);
    cfg.ckpt_interval = j.value("ckpt_interval", cfg.ckpt_interval);
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    return cfg;
}

nlohmann::ordered_json reward_params_to_json(const RewardParams& p) {
    nlohmann::ordered_json j;
    j["tau_iou"] = p.tau_iou;
    j["lambda_mse"] = p.lambda_mse;
    j["gamma_pen"] = p.gamma_pen;
    j["blur_ksize"] = p.blur_ksize;
    j["blur_sigma"] = p.blur_sigma;
    j["diff_thresh"] = p.diff_thresh;
    j["nms_iou"] = p.nms_iou;
    j["min_area"] = p.min_area;
    return j;
}

RewardParams reward_params_from_json(const nlohmann::json& j) {
    check_known_keys(j,
                     {"tau_iou", "lambda_mse", "gamma_pen", "blur_ksize", "blur_sigma",
                      "diff_thresh", "nms_iou", "min_area"},
                     "reward.");
    RewardParams p;
    p.tau_iou = j.value("tau_iou", p.tau_iou);
    p.lambda_mse = j.value("lambda_mse", p.lambda_mse);
    p.gamma_pen = j.value("gamma_pen", p.gamma_pen);
    p.blur_ksize = j.value("blur_ksize", p.blur_ksize);
    p.blur_sigma = j.value("blur_sigma", p.blur_sigma);
    p.diff_thresh = j.value("diff_thresh", p.diff_thresh);
    p.nms_iou = j.value("nms_iou", p.nms_iou);
    p.min_area = j.value("min_area", p.min_area);
    return p;
}

}  // namespace vlplan
