#include "vlplan/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <zlib.h>

#include "vlplan/json_io.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

ModelConfig TrainConfig::apply_to(ModelConfig cfg) const {
    require(!(no_se && no_en), ErrorKind::BadConfig, "no_se and no_en are mutually exclusive");
    if (no_se) cfg.fuse = FuseMode::NoSe;
    if (no_en) cfg.fuse = FuseMode::NoEn;
    if (ar_variant) cfg.variant = Variant::AR;
    return cfg;
}

Dataset Dataset::split(std::vector<GoalTransition> all) {
    Dataset d;
    for (auto& t : all) {
        if (t.is_test)
            d.test.push_back(std::move(t));
        else
            d.train.push_back(std::move(t));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

}  // namespace

MetricsWriter::MetricsWriter(const std::string& path, bool append) : path_(path) {
    const bool exists = std::filesystem::exists(path);
    std::ofstream out(path, append ? (std::ios::app | std::ios::binary)
                                   : (std::ios::trunc | std::ios::binary));
    require(out.good(), ErrorKind::Io, "cannot open metrics file: " + path);
    if (!append || !exists) out << kHeader << '\n';
}

void MetricsWriter::write(const MetricsRow& row) {
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot append metrics file: " + path_);
    out << row.step << ',' << row.phase << ',' << fmt_opt(row.loss_total) << ','
        << fmt_opt(row.loss_sft_text) << ',' << fmt_opt(row.loss_sft_image) << ','
        << fmt_opt(row.loss_rl) << ',' << fmt_opt(row.mean_reward) << ','
        << fmt_opt(row.test_reward) << ',' << fmt_opt(row.action_acc) << ','
        << fmt_opt(row.image_token_acc) << ',' << row.fwd_calls << '\n';
    require(out.good(), ErrorKind::Io, "metrics write failed: " + path_);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'V', 'L', 'P', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_doubles(std::string& buf, const double* p, std::size_t n) {
    const std::size_t at = buf.size();
    buf.resize(at + n * sizeof(double));
    std::memcpy(buf.data() + at, p, n * sizeof(double));
}

struct Reader {
    const std::string& buf;
    std::size_t at = 0;

    void expect(std::size_t n) const {
        require(at + n <= buf.size(), ErrorKind::CorruptCheckpoint, "truncated checkpoint");
    }
    std::uint32_t u32() {
        expect(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    std::uint64_t u64() {
        expect(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        expect(n);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
    void doubles(double* p, std::size_t n) {
        expect(n * sizeof(double));
        std::memcpy(p, buf.data() + at, n * sizeof(double));
        at += n * sizeof(double);
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::ordered_json header;
    header["model"] = model_config_to_json(ckpt.model_cfg);
    header["train"] = train_config_to_json(ckpt.train_cfg);
    header["seed"] = ckpt.seed;
    header["step"] = ckpt.step;
    header["phase"] = ckpt.phase;
    header["fwd_calls"] = ckpt.fwd_calls;
    header["adam_t"] = ckpt.adam_t;
    header["rng_state"] = ckpt.rng_state;
    header["codebook"] = Codebook{}.describe();
    nlohmann::ordered_json colors;
    for (int c = 0; c < kNumColors; ++c) {
        std::uint8_t rgb[3];
        color_rgb(c, rgb);
        colors[color_name(c)] = {rgb[0], rgb[1], rgb[2]};
    }
    header["color_map"] = colors;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    for (const auto& t : ckpt.model.layout.manifest)
        manifest.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    header["tensors"] = manifest;

    std::string body;
    const std::string hj = header.dump();
    put_u32(body, static_cast<std::uint32_t>(hj.size()));
    body += hj;
    auto put_array = [&](const std::string& name, const std::vector<double>& v) {
        put_u32(body, static_cast<std::uint32_t>(name.size()));
        body += name;
        put_u64(body, v.size());
        put_doubles(body, v.data(), v.size());
    };
    put_u32(body, 3);
    put_array("params", ckpt.model.params);
    put_array("adam_m", ckpt.adam_m);
    put_array("adam_v", ckpt.adam_v);

    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Io, "cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    std::string tail;
    put_u32(tail, crc);
    out.write(tail.data(), static_cast<std::streamsize>(tail.size()));
    require(out.good(), ErrorKind::Io, "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open checkpoint: " + path);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(all.size() >= sizeof(kMagic) + 4, ErrorKind::CorruptCheckpoint, "file too short");
    require(std::memcmp(all.data(), kMagic, sizeof(kMagic)) == 0, ErrorKind::CorruptCheckpoint,
            "bad magic");
    const std::string body = all.substr(sizeof(kMagic), all.size() - sizeof(kMagic) - 4);
    const std::string crc_bytes = all.substr(all.size() - 4);
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(
                      static_cast<unsigned char>(crc_bytes[static_cast<std::size_t>(i)]))
                  << (8 * i);
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    require(crc == stored, ErrorKind::CorruptCheckpoint, "CRC mismatch");

    Reader r{body};
    const std::uint32_t hlen = r.u32();
    const nlohmann::json header = nlohmann::json::parse(r.bytes(hlen));
    Checkpoint ckpt;
    ckpt.model_cfg = model_config_from_json(header.at("model"));
    ckpt.train_cfg = train_config_from_json(header.at("train"));
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.step = header.at("step").get<int>();
    ckpt.phase = header.at("phase").get<std::string>();
    ckpt.fwd_calls = header.at("fwd_calls").get<std::uint64_t>();
    ckpt.adam_t = header.at("adam_t").get<long>();
    const auto& rs = header.at("rng_state");
    for (std::size_t i = 0; i < ckpt.rng_state.size(); ++i)
        ckpt.rng_state[i] = rs[i].get<std::uint64_t>();

    ckpt.model.cfg = ckpt.model_cfg;
    ckpt.model.layout = ParamLayout::build(ckpt.model_cfg);
    ckpt.model.forward_calls = ckpt.fwd_calls;

    const std::uint32_t n_arrays = r.u32();
    require(n_arrays == 3, ErrorKind::CorruptCheckpoint, "unexpected array count");
    auto read_array = [&](const std::string& expect_name, std::vector<double>& out_vec) {
        const std::uint32_t nlen = r.u32();
        const std::string name = r.bytes(nlen);
        require(name == expect_name, ErrorKind::CorruptCheckpoint, "unexpected array " + name);
        const std::uint64_t count = r.u64();
        out_vec.resize(count);
        r.doubles(out_vec.data(), count);
    };
    read_array("params", ckpt.model.params);
    read_array("adam_m", ckpt.adam_m);
    read_array("adam_v", ckpt.adam_v);
    require(ckpt.model.params.size() == ckpt.model.layout.total, ErrorKind::CorruptCheckpoint,
            "parameter count does not match config");
    return ckpt;
}

Checkpoint init_checkpoint(const ModelConfig& mcfg, const TrainConfig& tcfg) {
    Checkpoint ckpt;
    ckpt.model_cfg = tcfg.apply_to(mcfg);
    ckpt.train_cfg = tcfg;
    ckpt.seed = tcfg.seed;
    ckpt.model = init_model(ckpt.model_cfg, tcfg.seed);
    ckpt.adam_m.assign(ckpt.model.params.size(), 0.0);
    ckpt.adam_v.assign(ckpt.model.params.size(), 0.0);
    ckpt.rng_state = Rng(tcfg.seed).serialize();
    return ckpt;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

// Decoupled weight decay with moment scaling and linear warmup; decay applies
// to 2-D weights only.
void adamw_step(Checkpoint& ckpt, const std::vector<double>& grad, int phase_steps) {
    const TrainConfig& tc = ckpt.train_cfg;
    ckpt.adam_t += 1;
    const int warmup = std::max(1, static_cast<int>(std::ceil(tc.warmup_frac * phase_steps)));
    const double lr =
        tc.lr * std::min(1.0, static_cast<double>(ckpt.step + 1) / static_cast<double>(warmup));
    const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(ckpt.adam_t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(ckpt.adam_t));

    auto& p = ckpt.model.params;
    auto& m = ckpt.adam_m;
    auto& v = ckpt.adam_v;
    for (const auto& t : ckpt.model.layout.manifest) {
        const double wd = t.decay ? tc.weight_decay : 0.0;
        for (std::size_t i = t.offset; i < t.offset + t.count(); ++i) {
            const double g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= lr * (mh / (std::sqrt(vh) + tc.adam_eps) + wd * p[i]);
        }
    }
}

void check_finite(const LossBreakdown& loss, int step, const std::string& phase) {
    bool ok = std::isfinite(loss.total);
    if (ok)
        for (double g : loss.grad)
            if (!std::isfinite(g)) {
                ok = false;
                break;
            }
    if (!ok)
        fail(ErrorKind::NonFiniteLoss,
             "non-finite loss or gradient at " + phase + " step " + std::to_string(step));
}

// Deterministic batch of distinct indices (Floyd's sampling); uniform draws
// with replacement when the pool is smaller than the batch.
std::vector<std::size_t> sample_batch(std::size_t pool, int batch, Rng& rng) {
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(batch));
    if (pool <= static_cast<std::size_t>(batch)) {
        for (int i = 0; i < batch; ++i) out.push_back(rng.below(pool));
        return out;
    }
    std::vector<char> seen(pool, 0);
    for (std::size_t j = pool - static_cast<std::size_t>(batch); j < pool; ++j) {
        std::size_t t = rng.below(j + 1);
        if (seen[t]) t = j;
        seen[t] = 1;
        out.push_back(t);
    }
    return out;
}

std::vector<GoalTransition> gather(const std::vector<GoalTransition>& pool,
                                   const std::vector<std::size_t>& idx) {
    std::vector<GoalTransition> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(pool[i]);
    return out;
}

// Data-sampling stream id. sft and rsft share one stream so the degenerate
// configuration identities hold step for step.
std::uint64_t phase_hash(const std::string& phase) { return phase == "pretrain" ? 0x11 : 0x22; }

std::vector<GoalTransition> eval_slice(const Dataset& data, int n) {
    const auto& src = data.test.empty() ? data.train : data.test;
    std::vector<GoalTransition> out;
    for (int i = 0; i < n && i < static_cast<int>(src.size()); ++i)
        out.push_back(src[static_cast<std::size_t>(i)]);
    return out;
}

void maybe_save_periodic(const Checkpoint& ckpt, const PhaseHooks& hooks) {
    if (hooks.ckpt_dir.empty() || ckpt.train_cfg.ckpt_interval <= 0) return;
    if (ckpt.step % ckpt.train_cfg.ckpt_interval != 0) return;
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_%s_%06d.bin", ckpt.phase.c_str(), ckpt.step);
    save_checkpoint(ckpt, hooks.ckpt_dir + "/" + name);
}

const Vocab& vocab_for_grid(int grid) {
    static std::unordered_map<int, Vocab> cache;
    auto it = cache.find(grid);
    if (it == cache.end()) it = cache.emplace(grid, Vocab(grid)).first;
    return it->second;
}

}  // namespace

// ---------------------------------------------------------------------------
// Held-out metrics
// ---------------------------------------------------------------------------

namespace {

int argmax_row(const double* row, int n) {
    int best = 0;
    for (int o = 1; o < n; ++o)
        if (row[o] > row[best]) best = o;
    return best;
}

}  // namespace

TeacherForcedMetrics eval_teacher_forced(LossContext& ctx, const Model& model,
                                         std::span<const GoalTransition> items, bool plan_prompts,
                                         bool include_image) {
    TeacherForcedMetrics out;
    if (items.empty()) return out;
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    std::vector<long> per_item(items.size() * 4, 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& scratch = ctx.thread_scratch();
        const auto& tr = items[i];
        long th = 0, tt = 0, ih = 0, it = 0;
        if (plan_prompts) {
            const BuiltSequence seq = builder.plan(tr.g, tr.x_t, &tr.a_t, &tr.x_t1, include_image);
            const ForwardResult fwd = forward(model, seq, scratch.acts.p);
            for (std::size_t r = 0; r < seq.text_target.size(); ++r) {
                const double* row =
                    fwd.text_logits.data() + r * static_cast<std::size_t>(model.cfg.text_vocab);
                th += argmax_row(row, model.cfg.text_vocab) == seq.text_target[r];
                ++tt;
            }
            for (std::size_t r = 0; r < seq.image_target.size(); ++r) {
                ih += argmax_row(fwd.image.row(static_cast<int>(r)), model.cfg.codebook) ==
                      seq.image_target[r];
                ++it;
            }
        } else {
            const BuiltSequence inv = builder.inverse_dyn(tr.x_t, tr.a_t, tr.x_t1);
            const ForwardResult fi = forward(model, inv, scratch.acts.p);
            for (std::size_t r = 0; r < inv.text_target.size(); ++r) {
                const double* row =
                    fi.text_logits.data() + r * static_cast<std::size_t>(model.cfg.text_vocab);
                th += argmax_row(row, model.cfg.text_vocab) == inv.text_target[r];
                ++tt;
            }
            if (include_image) {
                const BuiltSequence fd = builder.forward_dyn(tr.x_t, tr.a_t, &tr.x_t1);
                const ForwardResult ff = forward(model, fd, scratch.acts.p);
                for (std::size_t r = 0; r < fd.image_target.size(); ++r) {
                    ih += argmax_row(ff.image.row(static_cast<int>(r)), model.cfg.codebook) ==
                          fd.image_target[r];
                    ++it;
                }
            }
        }
        per_item[i * 4] = th;
        per_item[i * 4 + 1] = tt;
        per_item[i * 4 + 2] = ih;
        per_item[i * 4 + 3] = it;
    }
    long text_hits = 0, text_total = 0, img_hits = 0, img_total = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        text_hits += per_item[i * 4];
        text_total += per_item[i * 4 + 1];
        img_hits += per_item[i * 4 + 2];
        img_total += per_item[i * 4 + 3];
    }
    if (text_total) out.action_acc = static_cast<double>(text_hits) / text_total;
    if (img_total) out.image_token_acc = static_cast<double>(img_hits) / img_total;
    return out;
}

double eval_test_reward(LossContext& ctx, const Model& model,
                        std::span<const GoalTransition> items, const RewardFn& reward_fn) {
    if (items.empty()) return 0.0;
    const SequenceBuilder builder(model.cfg, ctx.vocab());
    std::vector<double> rewards(items.size(), 0.0);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& scratch = ctx.thread_scratch();
        const auto& tr = items[i];
        const BuiltSequence seq = builder.plan(tr.g, tr.x_t, &tr.a_t, nullptr, true);
        SampledImage gen;
        if (model.cfg.variant == Variant::OneStep) {
            const ForwardResult fwd = forward(model, seq, scratch.acts.p);
            gen = greedy_image(fwd.image, model.cfg.grid);
        } else {
            Rng rng;  // unused under greedy decoding
            gen = ar_sample_image(model, seq, rng, /*greedy=*/true);
        }
        try {
            rewards[i] = reward_fn(tr, gen.tokens);
        } catch (const Error&) {
            rewards[i] = 0.0;
        }
    }
    double mean = 0.0;
    for (double r : rewards) mean += r;
    return mean / static_cast<double>(items.size());
}

RewardFn make_dynamic_reward_fn(const RewardParams& params) {
    return [params](const GoalTransition& item, const TokenImage& generated) {
        Raster gen;
        try {
            gen = render(detokenize(generated));
        } catch (const Error&) {
            fail(ErrorKind::RewardFailure, "generated image does not decode");
        }
        RewardScorer scorer(render(item.x_t), render(item.x_t1), params);
        return scorer.score(gen);
    };
}

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

namespace {

struct PhaseDriver {
    Checkpoint& ckpt;
    const Dataset& data;
    const PhaseHooks& hooks;
    LossContext ctx;
    std::vector<GoalTransition> eval_items;

    PhaseDriver(Checkpoint& c, const Dataset& d, const PhaseHooks& h)
        : ckpt(c), data(d), hooks(h), ctx(vocab_for_grid(c.model_cfg.grid)) {
        eval_items = eval_slice(data, c.train_cfg.eval_items);
    }

    void enter_phase(const std::string& name) {
        if (ckpt.phase != name) {
            ckpt.phase = name;
            ckpt.step = 0;
        }
    }

    std::vector<GoalTransition> next_batch(int step) const {
        require(!data.train.empty(), ErrorKind::EmptyBatch, "training split is empty");
        Rng rng = Rng::derive(ckpt.seed, phase_hash(ckpt.phase), static_cast<std::uint64_t>(step));
        return gather(data.train, sample_batch(data.train.size(), ckpt.train_cfg.batch_size, rng));
    }

    bool eval_step(int step, int total) const {
        const int every = std::max(1, ckpt.train_cfg.eval_interval);
        return step % every == 0 || step == total;
    }
};

}  // namespace

void pretrain_phase(Checkpoint& ckpt, const Dataset& data, const PhaseHooks& hooks) {
    PhaseDriver drv(ckpt, data, hooks);
    drv.enter_phase("pretrain");
    const TrainConfig& tc = ckpt.train_cfg;
    require(!(tc.no_idm && (tc.no_fdm || tc.no_gen)), ErrorKind::BadConfig,
            "no pretraining objective remains enabled");

    while (ckpt.step < tc.pretrain_steps) {
        const int step = ckpt.step + 1;
        const auto batch = drv.next_batch(step);

        LossBreakdown combined;
        combined.grad.assign(ckpt.model.params.size(), 0.0);
        std::optional<double> inv_part, fwd_part;
        if (!tc.no_idm) {
            LossBreakdown inv = inverse_dynamics_loss(drv.ctx, ckpt.model, batch);
            inv_part = inv.part("inverse");
            combined.total += inv.total;
            for (std::size_t i = 0; i < combined.grad.size(); ++i) combined.grad[i] += inv.grad[i];
        }
        if (!tc.no_fdm && !tc.no_gen) {
            LossBreakdown fwd = forward_dynamics_loss(drv.ctx, ckpt.model, batch);
            fwd_part = fwd.part("forward");
            combined.total += fwd.total;
            for (std::size_t i = 0; i < combined.grad.size(); ++i) combined.grad[i] += fwd.grad[i];
        }
        check_finite(combined, step, ckpt.phase);
        adamw_step(ckpt, combined.grad, tc.pretrain_steps);
        ckpt.step = step;
        ckpt.fwd_calls = ckpt.model.forward_calls;

        if (hooks.metrics) {
            MetricsRow row;
            row.step = step;
            row.phase = ckpt.phase;
            row.loss_total = combined.total;
            row.loss_sft_text = inv_part;   // text-head loss part for this phase
            row.loss_sft_image = fwd_part;  // image-head loss part for this phase
            if (drv.eval_step(step, tc.pretrain_steps)) {
                const auto m =
                    eval_teacher_forced(drv.ctx, ckpt.model, drv.eval_items,
                                        /*plan_prompts=*/false, /*include_image=*/!tc.no_gen);
                row.action_acc = m.action_acc;
                row.image_token_acc = m.image_token_acc;
                ckpt.fwd_calls = ckpt.model.forward_calls;
            }
            row.fwd_calls = ckpt.fwd_calls;
            hooks.metrics->write(row);
        }
        maybe_save_periodic(ckpt, hooks);
    }
}

void sft_phase(Checkpoint& ckpt, const Dataset& data, const PhaseHooks& hooks) {
    PhaseDriver drv(ckpt, data, hooks);
    drv.enter_phase("sft");
    const TrainConfig& tc = ckpt.train_cfg;
    SftOptions opts;
    opts.include_image = !tc.no_gen;
    opts.image_unnormalized = tc.image_loss_unnormalized;

    while (ckpt.step < tc.sft_steps) {
        const int step = ckpt.step + 1;
        const auto batch = drv.next_batch(step);
        LossBreakdown loss = sft_loss(drv.ctx, ckpt.model, batch, opts);
        check_finite(loss, step, ckpt.phase);
        adamw_step(ckpt, loss.grad, tc.sft_steps);
        ckpt.step = step;
        ckpt.fwd_calls = ckpt.model.forward_calls;

        if (hooks.metrics) {
            MetricsRow row;
            row.step = step;
            row.phase = ckpt.phase;
            row.loss_total = loss.total;
            row.loss_sft_text = loss.part("sft_text");
            if (opts.include_image) row.loss_sft_image = loss.part("sft_image");
            if (drv.eval_step(step, tc.sft_steps)) {
                const auto m =
                    eval_teacher_forced(drv.ctx, ckpt.model, drv.eval_items,
                                        /*plan_prompts=*/true, /*include_image=*/opts.include_image);
                row.action_acc = m.action_acc;
                row.image_token_acc = m.image_token_acc;
                ckpt.fwd_calls = ckpt.model.forward_calls;
            }
            row.fwd_calls = ckpt.fwd_calls;
            hooks.metrics->write(row);
        }
        maybe_save_periodic(ckpt, hooks);
    }
}

void rsft_phase(Checkpoint& ckpt, const Dataset& data, const RewardFn& reward_fn,
                const PhaseHooks& hooks) {
    PhaseDriver drv(ckpt, data, hooks);
    drv.enter_phase("rsft");
    const TrainConfig& tc = ckpt.train_cfg;
    require(!tc.no_gen, ErrorKind::BadConfig,
            "rsft requires the image segment; run sft for the no_gen ablation");
    RsftOptions opts;
    opts.lambda = tc.lambda_rsft;
    opts.k_samples = tc.k_samples;
    opts.advantage_mode = tc.advantage_mode;
    opts.eps = tc.advantage_eps;
    opts.rl_only = tc.rl_only;
    opts.sft.include_image = true;
    opts.sft.image_unnormalized = tc.image_loss_unnormalized;

    while (ckpt.step < tc.rsft_steps) {
        const int step = ckpt.step + 1;
        const auto batch = drv.next_batch(step);
        RsftStats stats;
        std::uint64_t s = ckpt.seed;
        const std::uint64_t sample_seed = splitmix64(s) ^ static_cast<std::uint64_t>(step);
        LossBreakdown loss =
            rsft_loss(drv.ctx, ckpt.model, batch, reward_fn, opts, sample_seed, &stats);
        check_finite(loss, step, ckpt.phase);
        adamw_step(ckpt, loss.grad, tc.rsft_steps);
        ckpt.step = step;
        ckpt.fwd_calls = ckpt.model.forward_calls;

        if (hooks.metrics) {
            MetricsRow row;
            row.step = step;
            row.phase = ckpt.phase;
            row.loss_total = loss.total;
            row.loss_sft_text = loss.part("sft_text");
            row.loss_sft_image = loss.part("sft_image");
            row.loss_rl = loss.part("rl");
            row.mean_reward = stats.mean_reward;
            if (drv.eval_step(step, tc.rsft_steps)) {
                const auto m = eval_teacher_forced(drv.ctx, ckpt.model, drv.eval_items,
                                                   /*plan_prompts=*/true, /*include_image=*/true);
                row.action_acc = m.action_acc;
                row.image_token_acc = m.image_token_acc;
                row.test_reward = eval_test_reward(drv.ctx, ckpt.model, drv.eval_items, reward_fn);
                ckpt.fwd_calls = ckpt.model.forward_calls;
            }
            row.fwd_calls = ckpt.fwd_calls;
            hooks.metrics->write(row);
        }
        maybe_save_periodic(ckpt, hooks);
    }
}

}  // namespace vlplan
