// Command-line entry point: data generation, the three training phases,
// evaluation, the sampling benchmark, reward scoring and metric plots.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "vlplan/config.hpp"
#include "vlplan/evalbench.hpp"
#include "vlplan/json_io.hpp"

namespace vlplan {
namespace {

// ---------------------------------------------------------------------------
// Shared option plumbing
// ---------------------------------------------------------------------------

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
};

// Registers --config plus one --<dotted.key> option per config leaf.
void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    static const std::vector<std::string> keys = run_config_keys();
    for (const auto& key : keys) {
        cmd->add_option_function<std::string>(
            "--" + key, [&args, key](const std::string& v) { args.overrides.push_back(key + "=" + v); },
            "override " + key);
    }
}

RunConfig resolve_config(const ConfigArgs& args) { return load_run_config(args.config_path, args.overrides); }

Dataset load_dataset(const RunConfig& cfg) {
    require(!cfg.data.empty(), ErrorKind::BadConfig, "paths.data is required");
    return Dataset::split(read_dataset_jsonl(cfg.data));
}

Checkpoint phase_start(const RunConfig& cfg, const std::string& run_dir) {
    Checkpoint ckpt;
    std::string source = cfg.init_ckpt;
    if (cfg.resume && source.empty()) source = run_dir + "/ckpt_final.bin";
    if (!source.empty()) {
        ckpt = load_checkpoint(source);
        ckpt.train_cfg = cfg.train;
        ckpt.seed = cfg.train.seed;
    } else {
        ckpt = init_checkpoint(cfg.model, cfg.train);
    }
    return ckpt;
}

void phase_finish(const Checkpoint& ckpt, const std::string& run_dir) {
    save_checkpoint(ckpt, run_dir + "/ckpt_final.bin");
    std::cout << "phase " << ckpt.phase << " done at step " << ckpt.step << "; checkpoint "
              << run_dir << "/ckpt_final.bin\n";
}

int run_phase(const ConfigArgs& args, const std::string& phase) {
    RunConfig cfg = resolve_config(args);
    const std::string run_dir = prepare_run_dir(cfg);
    const Dataset data = load_dataset(cfg);
    Checkpoint ckpt = phase_start(cfg, run_dir);
    MetricsWriter metrics(run_dir + "/metrics.csv", /*append=*/cfg.resume);
    PhaseHooks hooks{&metrics, run_dir};
    if (phase == "pretrain") {
        pretrain_phase(ckpt, data, hooks);
    } else if (phase == "sft") {
        sft_phase(ckpt, data, hooks);
    } else {
        rsft_phase(ckpt, data, make_dynamic_reward_fn(cfg.reward), hooks);
    }
    phase_finish(ckpt, run_dir);
    return 0;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

std::vector<TaskFamily> parse_families(const std::string& arg) {
    if (arg == "all")
        return {TaskFamily::MoveToZone, TaskFamily::StackByColor, TaskFamily::MatchBowls};
    std::vector<TaskFamily> out;
    std::stringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(family_from_name(item));
    require(!out.empty(), ErrorKind::BadConfig, "no task families given");
    return out;
}

int cmd_gen_data(const std::string& out_path, int count, std::uint64_t seed,
                 const std::string& families, int grid) {
    const auto data = sample_dataset(seed, count, parse_families(families), grid);
    if (const auto parent = std::filesystem::path(out_path).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    write_dataset_jsonl(data, out_path);
    long train = 0, test = 0;
    for (const auto& t : data) (t.is_test ? test : train) += 1;
    std::cout << "episodes=" << count << " transitions=" << data.size() << " train=" << train
              << " test=" << test << " file=" << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const ConfigArgs& args, const std::string& ckpt_path, int episodes, int horizon,
             std::uint64_t seed, const std::string& out_path) {
    RunConfig cfg = resolve_config(args);
    require(episodes >= 30, ErrorKind::BadConfig, "eval needs at least 30 episodes");
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset data = load_dataset(cfg);
    const auto tasks = tasks_from_transitions(data.test.empty() ? data.train : data.test);
    const Vocab vocab(ckpt.model_cfg.grid);
    const auto policy = make_model_policy(ckpt.model, vocab);
    std::vector<EpisodeResult> per_episode;
    const EvalSummary s =
        evaluate(policy, tasks, episodes, seed, cfg.reward, horizon, &per_episode);

    nlohmann::ordered_json j;
    j["episodes"] = s.episodes;
    j["sr"] = s.sr;
    j["sr_ci95"] = {s.sr_lo, s.sr_hi};
    j["la"] = s.la;
    j["la_ci95"] = {s.la_lo, s.la_hi};
    j["image_token_acc"] = s.image_token_acc;
    j["ssim"] = s.ssim;
    j["mean_dynamic_reward"] = s.mean_reward;
    std::cout << j.dump(2) << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        require(out.good(), ErrorKind::Io, "cannot write " + out_path);
        out << j.dump(2) << "\n";
        // Per-episode CSV next to the JSON summary.
        const std::string csv_path =
            (std::filesystem::path(out_path).parent_path() /
             (std::filesystem::path(out_path).stem().string() + "_episodes.csv"))
                .string();
        std::ofstream csv(csv_path);
        csv << "episode,family,steps,success,la,token_acc,ssim,reward\n";
        for (std::size_t e = 0; e < per_episode.size(); ++e) {
            const auto& ep = per_episode[e];
            double la = 1.0;
            if (!ep.action_match.empty()) {
                double m = 0.0;
                for (char c : ep.action_match) m += c;
                la = m / static_cast<double>(ep.action_match.size());
            }
            const double inv = ep.image_steps ? 1.0 / ep.image_steps : 0.0;
            csv << e << ',' << family_name(ep.task.family) << ',' << ep.steps << ','
                << (ep.success ? 1 : 0) << ',' << la << ',' << ep.token_acc_sum * inv << ','
                << ep.ssim_sum * inv << ',' << ep.reward_sum * inv << '\n';
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const std::string& one_step_path, const std::string& ar_path, int k, int trials,
              std::uint64_t seed, const std::string& out_path) {
    Checkpoint a = load_checkpoint(one_step_path);
    Checkpoint b = load_checkpoint(ar_path);
    const BenchReport report = bench_sampling(a.model, b.model, k, trials, seed);
    std::cout << report.markdown;
    for (const auto& r : report.records)
        std::cout << r.variant << " k=" << r.k << " forward_calls=" << r.forward_calls
                  << " wall_seconds=" << r.wall_seconds << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        require(out.good(), ErrorKind::Io, "cannot write " + out_path);
        out << report.markdown;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

int cmd_score(const ConfigArgs& args, const std::string& x_t_path, const std::string& gen_path,
              const std::string& real_path) {
    RunConfig cfg = resolve_config(args);
    const Raster x_t = read_ppm(x_t_path);
    const Raster gen = read_ppm(gen_path);
    const Raster real = read_ppm(real_path);
    const DynamicRewardResult res = dynamic_reward_detail(x_t, gen, real, cfg.reward);
    nlohmann::ordered_json j;
    j["reward"] = res.reward;
    auto boxes = [](const std::vector<BBox>& bs) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& b : bs) arr.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
        return arr;
    };
    j["label_boxes"] = boxes(res.label_boxes);
    j["gen_boxes"] = boxes(res.gen_boxes);
    auto matches = nlohmann::ordered_json::array();
    for (const auto& m : res.matches.pairs)
        matches.push_back(
            {{"label", m.label_idx}, {"gen", m.gen_idx}, {"iou", m.iou}, {"mse", m.mse}});
    j["matches"] = matches;
    std::cout << j.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct Series {
    std::vector<double> x, y;
};

void write_svg(const std::string& path, const std::string& title, const Series& s) {
    const int w = 640, h = 400, ml = 60, mr = 20, mt = 30, mb = 40;
    double xmin = s.x.front(), xmax = s.x.back(), ymin = s.y.front(), ymax = s.y.front();
    for (double v : s.x) {
        xmin = std::min(xmin, v);
        xmax = std::max(xmax, v);
    }
    for (double v : s.y) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double v) { return h - mb - (v - ymin) / (ymax - ymin) * (h - mt - mb); };

    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot write " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
        << "</text>\n";
    out << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    out << "<text x='" << ml << "' y='" << h - mb + 16 << "' font-size='11'>" << xmin
        << "</text>\n";
    out << "<text x='" << w - mr - 30 << "' y='" << h - mb + 16 << "' font-size='11'>" << xmax
        << "</text>\n";
    out << "<text x='4' y='" << h - mb << "' font-size='11'>" << ymin << "</text>\n";
    out << "<text x='4' y='" << mt + 10 << "' font-size='11'>" << ymax << "</text>\n";
    out << "<polyline fill='none' stroke='#c0392b' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i) out << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    out << "'/>\n</svg>\n";
}

int cmd_plot(const std::string& csv_path, const std::string& out_dir) {
    std::ifstream in(csv_path);
    require(in.good(), ErrorKind::Io, "cannot open " + csv_path);
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorKind::Io, "empty metrics file");
    std::vector<std::string> cols;
    {
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
    }
    require(cols.size() >= 2 && cols[0] == "step", ErrorKind::Io,
            "metrics csv must start with a step column");
    std::map<std::string, Series> series;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::vector<std::string> cells;
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        cells.resize(cols.size());
        const double step = std::atof(cells[0].c_str());
        for (std::size_t i = 1; i < cols.size(); ++i) {
            if (cells[i].empty()) continue;
            char* end = nullptr;
            const double v = std::strtod(cells[i].c_str(), &end);
            if (end == cells[i].c_str() || *end != '\0') continue;  // non-numeric column
            series[cols[i]].x.push_back(step);
            series[cols[i]].y.push_back(v);
        }
    }
    std::filesystem::create_directories(out_dir);
    int written = 0;
    for (const auto& [name, s] : series) {
        if (s.x.empty()) continue;
        write_svg(out_dir + "/" + name + ".svg", name, s);
        ++written;
    }
    std::cout << "wrote " << written << " plots to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, char** argv) {
    CLI::App app{"grid-world vision-language planner"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate an expert dataset");
    std::string gen_out = "data/dataset.jsonl", gen_families = "all";
    int gen_count = 500, gen_grid = 8;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output JSONL path");
    gen->add_option("--count", gen_count, "episode count");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--families", gen_families, "comma list or 'all'");
    gen->add_option("--grid", gen_grid, "grid side length");

    // training phases
    ConfigArgs pre_args, sft_args, rsft_args;
    auto* pre = app.add_subcommand("pretrain", "joint dynamics pretraining");
    add_config_options(pre, pre_args);
    auto* sft = app.add_subcommand("sft", "supervised fine-tuning");
    add_config_options(sft, sft_args);
    auto* rsft = app.add_subcommand("rsft", "reinforced supervised fine-tuning");
    add_config_options(rsft, rsft_args);
    double rsft_lambda = -1.0;
    bool rsft_rl_only = false;
    rsft->add_option("--lambda", rsft_lambda, "shorthand for --train.lambda_rsft");
    rsft->add_flag("--rl-only", rsft_rl_only, "shorthand for --train.rl_only true");

    // eval
    ConfigArgs eval_args;
    auto* ev = app.add_subcommand("eval", "closed-loop planning evaluation");
    add_config_options(ev, eval_args);
    std::string eval_ckpt, eval_out;
    int eval_episodes = 100, eval_horizon = 12;
    std::uint64_t eval_seed = 0;
    ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    ev->add_option("--episodes", eval_episodes, "episode count (>= 30)");
    ev->add_option("--horizon", eval_horizon, "step cap per episode");
    ev->add_option("--seed", eval_seed, "evaluation seed");
    ev->add_option("--out", eval_out, "summary JSON path");

    // bench
    auto* bn = app.add_subcommand("bench", "sampling-efficiency benchmark");
    std::string bench_one, bench_ar, bench_out;
    int bench_k = 8, bench_trials = 4;
    std::uint64_t bench_seed = 0;
    bn->add_option("--ckpt-onestep", bench_one, "one-step checkpoint")->required();
    bn->add_option("--ckpt-ar", bench_ar, "AR checkpoint")->required();
    bn->add_option("--k", bench_k, "samples per context");
    bn->add_option("--trials", bench_trials, "context count");
    bn->add_option("--seed", bench_seed, "bench seed");
    bn->add_option("--out", bench_out, "markdown report path");

    // score
    ConfigArgs score_args;
    auto* sc = app.add_subcommand("score", "dynamic-aware reward for an image triple");
    add_config_options(sc, score_args);
    std::string score_a, score_b, score_c;
    sc->add_option("x_t", score_a, "current-state image (PPM)")->required();
    sc->add_option("x_gen", score_b, "generated next-state image (PPM)")->required();
    sc->add_option("x_real", score_c, "real next-state image (PPM)")->required();

    // plot
    auto* pl = app.add_subcommand("plot", "render metric CSVs to SVG");
    std::string plot_csv, plot_out = "plots";
    pl->add_option("csv", plot_csv, "metrics CSV")->required();
    pl->add_option("--out", plot_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) return cmd_gen_data(gen_out, gen_count, gen_seed, gen_families, gen_grid);
    if (pre->parsed()) return run_phase(pre_args, "pretrain");
    if (sft->parsed()) return run_phase(sft_args, "sft");
    if (rsft->parsed()) {
        if (rsft_lambda >= 0.0)
            rsft_args.overrides.push_back("train.lambda_rsft=" + std::to_string(rsft_lambda));
        if (rsft_rl_only) rsft_args.overrides.push_back("train.rl_only=true");
        return run_phase(rsft_args, "rsft");
    }
    if (ev->parsed())
        return cmd_eval(eval_args, eval_ckpt, eval_episodes, eval_horizon, eval_seed, eval_out);
    if (bn->parsed())
        return cmd_bench(bench_one, bench_ar, bench_k, bench_trials, bench_seed, bench_out);
    if (sc->parsed()) return cmd_score(score_args, score_a, score_b, score_c);
    if (pl->parsed()) return cmd_plot(plot_csv, plot_out);
    return 1;
}

}  // namespace
}  // namespace vlplan

int main(int argc, char** argv) {
    try {
        return vlplan::run_cli(argc, argv);
    } catch (const vlplan::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
