// SPDX-License-Identifier: Apache-2.0
//
// ctrlregen: train the toy diffusion stack, watermark images, run removal
// attacks and evaluate them.

#include "ctrlregen/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace ctrlregen;

namespace {

std::vector<fs::path> image_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() != ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no images in " + dir.string());
    return files;
}

torch::Tensor load_all(const std::vector<fs::path>& files, int resolution) {
    std::vector<torch::Tensor> imgs;
    for (const auto& f : files) imgs.push_back(load_image(f, resolution));
    return torch::stack(imgs);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream(path) << j.dump(2) << '\n';
}

void print_rows(const std::vector<MetricRow>& rows) { std::cout << to_csv(rows); }

int fail(const std::string& kind, const std::string& what, int code) {
    std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", what}}}}.dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Controlled regeneration attacks on image watermarks (toy scale)"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;

    auto* corpus = app.add_subcommand("make-corpus", "Write a procedural image corpus");
    std::string corpus_out;
    int corpus_count = 2000, corpus_res = 64;
    std::uint64_t corpus_seed = 0;
    corpus->add_option("--out", corpus_out, "Output directory")->required();
    corpus->add_option("--count", corpus_count, "Number of images");
    corpus->add_option("--resolution", corpus_res, "Image side length");
    corpus->add_option("--seed", corpus_seed, "Seed");

    struct StageCmd {
        const char* name;
        const char* stage;
    };
    const StageCmd stage_cmds[] = {{"train-codec", "codec"},       {"train-backbone", "backbone"},
                                   {"train-semantic", "semantic"}, {"train-spatial", "spatial"},
                                   {"train-watermark", "watermark"}};
    std::map<CLI::App*, std::string> stage_of;
    for (const auto& c : stage_cmds) {
        auto* sub = app.add_subcommand(c.name, std::string("Train the ") + c.stage + " stage");
        sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_flag("--force", force, "Retrain even if a matching checkpoint exists");
        stage_of[sub] = c.stage;
    }
    auto* train_all = app.add_subcommand("train-all", "Train every stage in order");
    train_all->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    train_all->add_flag("--force", force, "Retrain even if matching checkpoints exist");

    auto* embed = app.add_subcommand("embed", "Watermark a folder of images");
    std::string scheme, in_dir, out_dir;
    embed->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    embed->add_option("--scheme", scheme, "dwtdctsvd or stega")->required();
    embed->add_option("--in", in_dir, "Input image folder")->required();
    embed->add_option("--out", out_dir, "Output folder")->required();

    auto* attack = app.add_subcommand("attack", "Run one removal attack over a folder");
    std::string attack_name;
    int t_star = 70, k = 2;
    std::uint64_t attack_seed = 0;
    bool seed_given = false;
    attack->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    attack->add_option("--attack", attack_name, "regen, rinse, ctrl_regen, ctrl_regen_semantic, ctrl_regen_plus")
        ->required();
    attack->add_option("--t-star", t_star, "Noising steps");
    attack->add_option("--k", k, "Rinse passes");
    attack->add_option("--seed", attack_seed, "Base seed (default: from config)")->each([&](const std::string&) {
        seed_given = true;
    });
    attack->add_option("--in", in_dir, "Input image folder")->required();
    attack->add_option("--out", out_dir, "Output folder")->required();
    attack->add_option("--scheme", scheme, "Score inputs and outputs with this scheme's detector");

    auto* eval = app.add_subcommand("eval", "Attacks x schemes evaluation with CSV, plots and manifest");
    std::string replay;
    auto* eval_cfg = eval->add_option("--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    eval->add_option("--replay", replay, "Re-run the config stored in a manifest")
        ->check(CLI::ExistingFile)
        ->excludes(eval_cfg);
    std::string out_override;
    eval->add_option("--out", out_override, "Override the output directory");

    auto* sweep = app.add_subcommand("sweep", "Evaluate one attack over a noising-step grid");
    std::vector<int> t_grid{100, 200, 300, 400, 500, 1000};
    sweep->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sweep->add_option("--attack", attack_name, "Attack name")->default_val("ctrl_regen_plus");
    sweep->add_option("--t-stars", t_grid, "Noising-step grid");
    sweep->add_option("--out", out_override, "Override the output directory");

    auto* report = app.add_subcommand("report", "Print a manifest's metrics and redraw its plots");
    std::string manifest_path;
    report->add_option("--manifest", manifest_path, "Manifest JSON")->required()->check(CLI::ExistingFile);
    report->add_option("--out", out_dir, "Directory for CSV and plots (default: next to the manifest)");

    CLI11_PARSE(app, argc, argv);
    set_deterministic(true);

    try {
        if (corpus->parsed()) {
            make_synthetic_corpus(corpus_out, corpus_count, corpus_res, corpus_seed);
            return 0;
        }
        for (const auto& [sub, stage] : stage_of) {
            if (!sub->parsed()) continue;
            const auto cfg = ExperimentConfig::load(config_path);
            const auto data = load_corpus(cfg);
            std::cout << run_stage(cfg, data, stage, force).to_json().dump(2) << '\n';
            return 0;
        }
        if (train_all->parsed()) {
            const auto cfg = ExperimentConfig::load(config_path);
            const auto data = load_corpus(cfg);
            nlohmann::json out = nlohmann::json::array();
            for (const auto& r : run_pipeline_train(cfg, data, force)) out.push_back(r.to_json());
            std::cout << out.dump(2) << '\n';
            return 0;
        }
        if (embed->parsed()) {
            const auto cfg = ExperimentConfig::load(config_path);
            const auto stack = load_stack(cfg, scheme == "stega" ? "watermark" : "codec");
            auto wm = std::dynamic_pointer_cast<PostHocWatermarker>(make_scheme(cfg, stack, scheme));
            if (!wm) throw RangeError("scheme '" + scheme + "' does not watermark existing images");
            const auto files = image_files(in_dir);
            const auto payload = scheme_payload(cfg, scheme, wm->payload_bits());
            const auto marked = wm->embed(load_all(files, cfg.resolution), payload);
            for (std::size_t i = 0; i < files.size(); ++i) {
                save_image(fs::path(out_dir) / files[i].filename().replace_extension(".png"),
                           marked[static_cast<int64_t>(i)]);
            }
            write_json(fs::path(out_dir) / "payload.json",
                       {{"scheme", scheme}, {"payload", bits_to_hex(payload)}, {"bits", wm->payload_bits()}});
            return 0;
        }
        if (attack->parsed()) {
            const auto cfg = ExperimentConfig::load(config_path);
            const bool controlled = attack_name.rfind("ctrl_regen", 0) == 0;
            const auto stack = load_stack(cfg, scheme == "stega" ? "watermark" : controlled ? "spatial" : "backbone");
            auto pipe = make_pipeline(cfg, stack);
            if (seed_given) pipe.seed = attack_seed;
            auto spec = AttackSpec::from_json({{"name", attack_name}, {"t_star", t_star}, {"k", k}});
            const auto files = image_files(in_dir);
            const auto x = load_all(files, cfg.resolution);
            const int t = attack_name == "ctrl_regen" || attack_name == "ctrl_regen_semantic" ? pipe.schedule.T : t_star;
            const auto y = run_attack(pipe, spec, t, x);
            const auto ps = psnr_per_image(y, x);
            std::vector<DetectionOutcome> before, after;
            if (!scheme.empty()) {
                const auto wm = make_scheme(cfg, stack, scheme);
                const auto payload = scheme_payload(cfg, scheme, wm->payload_bits());
                before = wm->detect(x, payload);
                after = wm->detect(quantize_8bit(y), payload);
            }
            for (std::size_t i = 0; i < files.size(); ++i) {
                const auto stem = files[i].stem().string();
                save_image(fs::path(out_dir) / (stem + ".png"), y[static_cast<int64_t>(i)]);
                nlohmann::json rec{{"source", files[i].string()}, {"attack", attack_name}, {"t_star", t},
                                   {"seed", pipe.seed + i}, {"psnr", ps[i]}};
                if (!scheme.empty()) {
                    rec["scheme"] = scheme;
                    rec["score_before"] = before[i].score;
                    rec["score_after"] = after[i].score;
                }
                write_json(fs::path(out_dir) / (stem + ".json"), rec);
            }
            return 0;
        }
        if (eval->parsed() || sweep->parsed()) {
            ExperimentConfig cfg;
            if (!replay.empty()) {
                std::ifstream in(replay);
                cfg = ExperimentConfig::from_json(nlohmann::json::parse(in).at("config"));
            } else if (!config_path.empty()) {
                cfg = ExperimentConfig::load(config_path);
            } else {
                throw RangeError("eval needs --config or --replay");
            }
            if (sweep->parsed()) cfg.eval.attacks = {AttackSpec::from_json({{"name", attack_name}, {"t_star", t_grid}})};
            if (!out_override.empty()) cfg.output_dir = out_override;
            bool needs_stega = std::find(cfg.eval.schemes.begin(), cfg.eval.schemes.end(), "stega") != cfg.eval.schemes.end();
            const auto data = load_corpus(cfg);
            const auto stack = load_stack(cfg, needs_stega ? "watermark" : "spatial");
            print_rows(run_attack_eval(cfg, data, stack).rows);
            return 0;
        }
        if (report->parsed()) {
            std::ifstream in(manifest_path);
            const auto m = nlohmann::json::parse(in);
            std::vector<MetricRow> rows;
            for (const auto& r : m.at("summary")) {
                MetricRow row;
                row.scheme = r.at("scheme");
                row.attack = r.at("attack");
                row.t_star = r.at("t_star");
                if (!r.at("bitacc_before").is_null()) row.bitacc_before = r.at("bitacc_before").get<double>();
                if (!r.at("bitacc_after").is_null()) row.bitacc_after = r.at("bitacc_after").get<double>();
                row.tpr_before = r.at("tpr1fpr_before");
                row.tpr_after = r.at("tpr1fpr_after");
                row.psnr = r.at("psnr");
                row.ffid = r.at("ffid");
                rows.push_back(row);
            }
            const fs::path dir = out_dir.empty() ? fs::path(manifest_path).parent_path() : fs::path(out_dir);
            fs::create_directories(dir);
            std::ofstream(dir / "metrics.csv", std::ios::binary) << to_csv(rows);
            write_plots(rows, dir);
            print_rows(rows);
            if (m.contains("schemes")) std::cout << m.at("schemes").dump(2) << '\n';
            return 0;
        }
    } catch (const Error& e) {
        return fail(e.kind(), e.what(), 2);
    } catch (const nlohmann::json::exception& e) {
        return fail("invalid-config", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
    return 0;
}
