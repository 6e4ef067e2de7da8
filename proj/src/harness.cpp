// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/harness.hpp"

#include "ctrlregen/checkpoint.hpp"
#include "ctrlregen/metrics.hpp"

#include <opencv2/core.hpp>
#include <opencv2/core/version.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

namespace ctrlregen {

namespace fs = std::filesystem;

// ---- images

torch::Tensor load_image(const fs::path& path, int resolution) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot decode image " + path.string());
    const int side = std::min(bgr.rows, bgr.cols);
    cv::Mat square = bgr(cv::Rect((bgr.cols - side) / 2, (bgr.rows - side) / 2, side, side));
    cv::Mat resized;
    cv::resize(square, resized, cv::Size(resolution, resolution), 0, 0,
               side > resolution ? cv::INTER_AREA : cv::INTER_LINEAR);
    cv::Mat rgb;
    cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {resolution, resolution, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void save_image(const fs::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("save_image: expected [3,H,W], got " + shape_str(image));
    auto u8 = image.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3, u8.data_ptr<std::uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

torch::Tensor quantize_8bit(const torch::Tensor& images) {
    return images.clamp(0.0, 1.0).mul(255.0).round().div(255.0);
}

torch::Tensor ImageDataset::subset(const std::vector<int64_t>& idx) const {
    if (idx.empty()) return images.slice(0, 0, 0);
    return images.index_select(0, torch::tensor(idx, torch::kLong));
}

std::string ImageDataset::fingerprint() const {
    std::string joined;
    for (const auto& n : names) joined += n + '\n';
    return hex64(checksum({images}) ^ checksum_bytes(joined));
}

Split split_by_hash(const std::vector<std::string>& names, double val_frac, double eval_frac, std::uint64_t seed) {
    if (val_frac < 0.0 || eval_frac < 0.0 || val_frac + eval_frac >= 1.0) {
        throw RangeError("split fractions must be nonnegative and sum below 1");
    }
    Split s;
    const auto salt = derive_seed(seed, "split");
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double u = static_cast<double>(checksum_bytes(names[i], salt) >> 11) * 0x1.0p-53;
        auto& dst = u < eval_frac ? s.eval : (u < eval_frac + val_frac ? s.val : s.train);
        dst.push_back(static_cast<int64_t>(i));
    }
    return s;
}

ImageDataset ingest(const fs::path& dir, int resolution, double val_frac, double eval_frac, std::uint64_t seed) {
    if (resolution < 8) throw RangeError("resolution must be at least 8");
    if (!fs::is_directory(dir)) throw DataError("corpus directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    ImageDataset d;
    std::vector<torch::Tensor> imgs;
    for (const auto& f : files) {
        try {
            imgs.push_back(load_image(f, resolution));
            d.names.push_back(f.filename().string());
        } catch (const DataError& e) {
            std::cerr << "warning: skipping " << f.string() << ": " << e.what() << '\n';
        }
    }
    if (imgs.empty()) throw DataError("no decodable images in " + dir.string());
    d.images = torch::stack(imgs);
    d.split = split_by_hash(d.names, val_frac, eval_frac, seed);
    return d;
}

void make_synthetic_corpus(const fs::path& dir, int count, int resolution, std::uint64_t seed) {
    if (count < 1 || resolution < 8) throw RangeError("synthetic corpus: count and resolution must be positive");
    fs::create_directories(dir);
    const int s = 2 * resolution;
    for (int i = 0; i < count; ++i) {
        std::mt19937_64 rng(derive_seed(seed, "corpus-" + std::to_string(i)));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        auto colour = [&]() { return cv::Scalar(255 * u(rng), 255 * u(rng), 255 * u(rng)); };

        cv::Mat img(s, s, CV_8UC3);
        const auto c0 = colour(), c1 = colour();
        const double angle = 2.0 * CV_PI * u(rng);
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (int y = 0; y < s; ++y) {
            auto* row = img.ptr<cv::Vec3b>(y);
            for (int x = 0; x < s; ++x) {
                const double t = std::clamp(0.5 + ((x - s / 2.0) * ca + (y - s / 2.0) * sa) / s, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uchar>(c0[c] * (1 - t) + c1[c] * t);
            }
        }
        const int shapes = 2 + static_cast<int>(u(rng) * 4);
        for (int k = 0; k < shapes; ++k) {
            const cv::Point centre(static_cast<int>(u(rng) * s), static_cast<int>(u(rng) * s));
            const int size = static_cast<int>((0.1 + 0.35 * u(rng)) * s);
            const auto col = colour();
            switch (static_cast<int>(u(rng) * 5)) {
            case 0:
                cv::circle(img, centre, size / 2, col, cv::FILLED, cv::LINE_AA);
                break;
            case 1:
                cv::rectangle(img, cv::Rect(centre.x - size / 2, centre.y - size / 3, size, 2 * size / 3), col,
                              cv::FILLED, cv::LINE_AA);
                break;
            case 2: {
                std::vector<cv::Point> tri;
                for (int v = 0; v < 3; ++v) {
                    const double a = 2.0 * CV_PI * (v / 3.0 + u(rng) * 0.2);
                    tri.emplace_back(centre.x + static_cast<int>(size * 0.6 * std::cos(a)),
                                     centre.y + static_cast<int>(size * 0.6 * std::sin(a)));
                }
                cv::fillPoly(img, std::vector<std::vector<cv::Point>>{tri}, col, cv::LINE_AA);
                break;
            }
            case 3:
                cv::ellipse(img, centre, cv::Size(size / 2, size / 4), 180.0 * u(rng), 0, 360, col, cv::FILLED,
                            cv::LINE_AA);
                break;
            default: {
                const cv::Point end(static_cast<int>(u(rng) * s), static_cast<int>(u(rng) * s));
                cv::line(img, centre, end, col, 2 + static_cast<int>(u(rng) * s / 16), cv::LINE_AA);
            }
            }
        }
        cv::Mat small;
        cv::resize(img, small, cv::Size(resolution, resolution), 0, 0, cv::INTER_AREA);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.png", i);
        if (!cv::imwrite((dir / name).string(), small)) throw DataError("cannot write corpus image");
    }
}

// ---- configuration

nlohmann::json AttackSpec::to_json() const {
    nlohmann::json j{{"name", name}};
    if (!t_star.empty()) j["t_star"] = t_star;
    if (name == "rinse") j["k"] = k;
    return j;
}

namespace {
const std::set<std::string> kAttackNames{"regen", "rinse", "ctrl_regen", "ctrl_regen_semantic", "ctrl_regen_plus"};
const std::set<std::string> kSchemeNames{"dwtdctsvd", "stega", "ring"};

bool takes_t_star(const std::string& attack) {
    return attack == "regen" || attack == "rinse" || attack == "ctrl_regen_plus";
}
} // namespace

AttackSpec AttackSpec::from_json(const nlohmann::json& j) {
    AttackSpec a;
    a.name = j.at("name").get<std::string>();
    if (!kAttackNames.count(a.name)) throw RangeError("unknown attack '" + a.name + "'");
    if (j.contains("t_star")) {
        a.t_star = j.at("t_star").is_array() ? j.at("t_star").get<std::vector<int>>()
                                             : std::vector<int>{j.at("t_star").get<int>()};
    }
    a.k = j.value("k", a.k);
    if (takes_t_star(a.name) && a.t_star.empty()) a.t_star = {70};
    return a;
}

nlohmann::json EvalConfig::to_json() const {
    nlohmann::json atk = nlohmann::json::array();
    for (const auto& a : attacks) atk.push_back(a.to_json());
    return {{"schemes", schemes}, {"attacks", atk}, {"images", images}, {"negatives", negatives},
            {"full_steps", full_steps}, {"batch", batch}, {"fpr", fpr}, {"save_images", save_images},
            {"quantize", quantize}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    c.schemes = j.value("schemes", c.schemes);
    for (const auto& s : c.schemes)
        if (!kSchemeNames.count(s)) throw RangeError("unknown scheme '" + s + "'");
    if (j.contains("attacks")) {
        for (const auto& a : j.at("attacks")) c.attacks.push_back(AttackSpec::from_json(a));
    } else {
        c.attacks = {AttackSpec::from_json({{"name", "regen"}, {"t_star", {70}}}),
                     AttackSpec::from_json({{"name", "rinse"}, {"t_star", {70}}, {"k", 2}}),
                     AttackSpec::from_json({{"name", "ctrl_regen"}})};
    }
    c.images = j.value("images", c.images);
    c.negatives = j.value("negatives", c.negatives);
    c.full_steps = j.value("full_steps", c.full_steps);
    c.batch = j.value("batch", c.batch);
    c.fpr = j.value("fpr", c.fpr);
    c.save_images = j.value("save_images", c.save_images);
    c.quantize = j.value("quantize", c.quantize);
    if (c.images < 1 || c.negatives < 1 || c.full_steps < 1 || c.batch < 1 || c.fpr <= 0.0 || c.fpr >= 1.0) {
        throw RangeError("eval: invalid config");
    }
    return c;
}

nlohmann::json ExperimentConfig::to_json() const {
    return {
        {"seed", seed},
        {"resolution", resolution},
        {"corpus", {{"dir", corpus_dir}, {"synthetic_count", synthetic_count}, {"val_frac", val_frac},
                    {"eval_frac", eval_frac}}},
        {"checkpoint_dir", checkpoint_dir},
        {"output_dir", output_dir},
        {"schedule", schedule},
        {"codec", {{"model", codec.to_json()}, {"train", codec_train.to_json()}}},
        {"backbone", {{"model", unet.to_json()}, {"train", backbone_train.to_json()}}},
        {"semantic", {{"model", adapter.to_json()}, {"train", adapter_train.to_json()}}},
        {"spatial", {{"train", spatial_train.to_json()}}},
        {"watermarks",
         {{"dwtdctsvd", {{"step", dwt_step}, {"bits", dwt_bits}}},
          {"stega", {{"model", stega.to_json()}, {"train", stega_train.to_json()}}},
          {"ring", ring.to_json()}}},
        {"eval", eval.to_json()},
    };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.resolution = j.value("resolution", c.resolution);
    const auto corpus = j.value("corpus", nlohmann::json::object());
    c.corpus_dir = corpus.value("dir", std::string());
    c.synthetic_count = corpus.value("synthetic_count", 0);
    c.val_frac = corpus.value("val_frac", c.val_frac);
    c.eval_frac = corpus.value("eval_frac", c.eval_frac);
    c.checkpoint_dir = j.value("checkpoint_dir", std::string("checkpoints"));
    c.output_dir = j.value("output_dir", std::string("results"));
    c.schedule = j.value("schedule", nlohmann::json{{"T", 1000}, {"beta_min", 1e-4}, {"beta_max", 0.02},
                                                    {"kind", "linear"}});
    schedule_from_json(c.schedule); // validates

    auto section = [&](const char* name) { return j.value(name, nlohmann::json::object()); };
    auto train = [&](const nlohmann::json& s, const char* stage) {
        TrainConfig d;
        d.seed = derive_seed(c.seed, stage);
        return TrainConfig::from_json(s.value("train", nlohmann::json::object()), d);
    };
    const auto codec_j = section("codec");
    c.codec = AutoencoderConfig::from_json(codec_j.value("model", nlohmann::json::object()));
    c.codec_train = train(codec_j, "codec");
    const auto bb = section("backbone");
    c.unet = UNetConfig::from_json(bb.value("model", nlohmann::json::object()));
    c.backbone_train = train(bb, "backbone");
    const auto sem = section("semantic");
    c.adapter = AdapterConfig::from_json(sem.value("model", nlohmann::json::object()));
    c.adapter_train = train(sem, "semantic");
    c.spatial_train = train(section("spatial"), "spatial");
    const auto wm = section("watermarks");
    const auto dwt = wm.value("dwtdctsvd", nlohmann::json::object());
    c.dwt_step = dwt.value("step", c.dwt_step);
    c.dwt_bits = dwt.value("bits", c.dwt_bits);
    const auto st = wm.value("stega", nlohmann::json::object());
    c.stega = StegaConfig::from_json(st.value("model", nlohmann::json::object()));
    c.stega_train = train(st, "watermark");
    c.ring = RingConfig::from_json(wm.value("ring", nlohmann::json::object()));
    c.eval = EvalConfig::from_json(section("eval"));
    if (c.codec.latent_channels != c.unet.latent_channels) {
        throw RangeError("codec latent_channels and backbone latent_channels differ");
    }
    if (c.resolution % (c.codec.factor << (c.unet.widths.size() - 1)) != 0) {
        throw RangeError("resolution must be divisible by the codec factor times the U-Net downsampling");
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

NoiseSchedule ExperimentConfig::make_noise_schedule() const { return schedule_from_json(schedule); }

fs::path ExperimentConfig::checkpoint(const std::string& stage) const {
    return fs::path(checkpoint_dir) / (stage + ".pt");
}

// ---- staged training

nlohmann::json StageRecord::to_json() const {
    return {{"stage", stage}, {"path", path}, {"reused", reused}, {"stage_key", stage_key}, {"weights", weights},
            {"report", report}};
}

ImageDataset load_corpus(const ExperimentConfig& cfg) {
    if (cfg.corpus_dir.empty()) throw DataError("config has no corpus directory");
    if (!fs::exists(cfg.corpus_dir) && cfg.synthetic_count > 0) {
        std::cerr << "generating synthetic corpus of " << cfg.synthetic_count << " images in " << cfg.corpus_dir
                  << '\n';
        make_synthetic_corpus(cfg.corpus_dir, cfg.synthetic_count, cfg.resolution, derive_seed(cfg.seed, "corpus"));
    }
    return ingest(cfg.corpus_dir, cfg.resolution, cfg.val_frac, cfg.eval_frac, cfg.seed);
}

namespace {

std::size_t stage_index(const std::string& stage) {
    auto it = std::find(kStages.begin(), kStages.end(), stage);
    if (it == kStages.end()) throw RangeError("unknown stage '" + stage + "'");
    return static_cast<std::size_t>(it - kStages.begin());
}

std::vector<std::string> stage_parents(const std::string& stage) {
    if (stage == "backbone") return {"codec"};
    if (stage == "semantic") return {"codec", "backbone"};
    if (stage == "spatial") return {"codec", "backbone", "semantic"};
    return {};
}

nlohmann::json stage_inputs(const ExperimentConfig& cfg, const std::string& stage, const std::string& corpus_fp,
                            const nlohmann::json& parents) {
    nlohmann::json j{{"stage", stage}, {"corpus", corpus_fp}, {"resolution", cfg.resolution}, {"parents", parents}};
    if (stage == "codec") {
        j["model"] = cfg.codec.to_json();
        j["train"] = cfg.codec_train.to_json();
    } else if (stage == "backbone") {
        j["model"] = cfg.unet.to_json();
        j["train"] = cfg.backbone_train.to_json();
        j["schedule"] = cfg.make_noise_schedule().fingerprint();
    } else if (stage == "semantic") {
        j["model"] = cfg.adapter.to_json();
        j["train"] = cfg.adapter_train.to_json();
        j["schedule"] = cfg.make_noise_schedule().fingerprint();
    } else if (stage == "spatial") {
        j["train"] = cfg.spatial_train.to_json();
        j["schedule"] = cfg.make_noise_schedule().fingerprint();
    } else {
        j["model"] = cfg.stega.to_json();
        j["train"] = cfg.stega_train.to_json();
    }
    return j;
}

ProgressFn stage_logger(const std::string& stage) {
    const auto start = std::chrono::steady_clock::now();
    return [stage, start](int step, double loss) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cerr << "[" << stage << "] step " << step << " loss " << loss << " (" << static_cast<int>(s) << " s)"
                  << std::endl;
    };
}

void verify_parents(const nlohmann::json& meta, const Stack& stack, const std::string& stage, const std::string& path) {
    for (const auto& p : stage_parents(stage)) {
        const auto recorded = meta.value("parents", nlohmann::json::object()).value(p, std::string());
        const auto actual = stack.fingerprints.value(p, std::string());
        if (recorded != actual) {
            throw FingerprintError(stage + " checkpoint " + path + " was trained against " + p + " '" + recorded +
                                   "' but the loaded " + p + " is '" + actual + "'");
        }
    }
}

} // namespace

Stack load_stack(const ExperimentConfig& cfg, const std::string& through) {
    const auto last = stage_index(through);
    Stack st;
    st.schedule = cfg.make_noise_schedule();
    auto load_meta = [&](const std::string& stage) {
        const auto path = cfg.checkpoint(stage).string();
        auto meta = read_checkpoint_meta(path);
        verify_parents(meta, st, stage, path);
        if (meta.contains("schedule") && meta["schedule"] != st.schedule.fingerprint()) {
            throw FingerprintError(stage + " checkpoint " + path + " was trained with a different noise schedule");
        }
        return std::pair{path, meta};
    };
    auto check_weights = [&](const std::string& stage, const nlohmann::json& meta, const std::string& fp,
                             const std::string& path) {
        expect_fingerprint(meta, "weights", fp, stage + " checkpoint " + path);
        st.fingerprints[stage] = fp;
    };

    {
        auto [path, meta] = load_meta("codec");
        st.codec = std::make_shared<AutoencoderCodec>(AutoencoderCodec::load(path));
        check_weights("codec", meta, st.codec->fingerprint(), path);
    }
    if (last >= stage_index("backbone")) {
        auto [path, meta] = load_meta("backbone");
        st.denoiser = Denoiser(UNetConfig::from_json(meta.at("config")));
        load_checkpoint(path, *st.denoiser);
        st.denoiser->eval();
        check_weights("backbone", meta, module_fingerprint(*st.denoiser), path);
    }
    if (last >= stage_index("semantic")) {
        auto [path, meta] = load_meta("semantic");
        st.adapter = SemanticAdapter(AdapterConfig::from_json(meta.at("config")), st.codec->config(),
                                     st.denoiser->attention_site_channels(), st.denoiser->cfg.d_ctx);
        load_checkpoint(path, *st.adapter);
        st.adapter->eval();
        check_weights("semantic", meta, module_fingerprint(*st.adapter), path);
    }
    if (last >= stage_index("spatial")) {
        auto [path, meta] = load_meta("spatial");
        st.spatial = SpatialControlNet(*st.denoiser, st.codec->factor());
        load_checkpoint(path, *st.spatial);
        st.spatial->eval();
        check_weights("spatial", meta, module_fingerprint(*st.spatial), path);
    }
    if (last >= stage_index("watermark")) {
        auto [path, meta] = load_meta("watermark");
        st.stega = std::make_shared<StegaToy>(StegaToy::load(path));
        check_weights("watermark", meta, hex64(checksum(nn::parameter_list(*st.stega->net()))), path);
    }
    return st;
}

StageRecord run_stage(const ExperimentConfig& cfg, const ImageDataset& data, const std::string& stage, bool force) {
    const auto idx = stage_index(stage);
    Stack parents;
    if (stage != "codec" && stage != "watermark") parents = load_stack(cfg, kStages[idx - 1]);
    nlohmann::json parent_fps = nlohmann::json::object();
    for (const auto& p : stage_parents(stage)) parent_fps[p] = parents.fingerprints.at(p);

    const auto inputs = stage_inputs(cfg, stage, data.fingerprint(), parent_fps);
    StageRecord rec;
    rec.stage = stage;
    rec.path = cfg.checkpoint(stage).string();
    rec.stage_key = hex64(checksum_bytes(inputs.dump()));

    if (!force && fs::exists(rec.path)) {
        const auto meta = read_checkpoint_meta(rec.path);
        if (meta.value("stage_key", std::string()) == rec.stage_key) {
            rec.reused = true;
            rec.weights = meta.value("weights", std::string());
            rec.report = meta.value("report", nlohmann::json::object());
            std::cerr << "[" << stage << "] reusing " << rec.path << '\n';
            return rec;
        }
        std::cerr << "[" << stage << "] inputs changed since " << rec.path << " was written; retraining\n";
    }

    const auto train = data.subset(data.split.train);
    const auto val = data.subset(data.split.val);
    nlohmann::json meta{{"stage", stage}, {"stage_key", rec.stage_key}, {"parents", parent_fps}, {"inputs", inputs}};
    if (inputs.contains("schedule")) meta["schedule"] = inputs["schedule"];
    const auto log = stage_logger(stage);

    if (stage == "codec") {
        auto r = train_autoencoder(train, val, cfg.codec, cfg.codec_train, log);
        rec.weights = r.codec->fingerprint();
        rec.report = r.report.to_json();
        meta["weights"] = rec.weights;
        meta["report"] = rec.report;
        r.codec->save(rec.path, meta);
    } else if (stage == "backbone") {
        auto r = train_backbone(train, val, *parents.codec, parents.schedule, cfg.unet, cfg.backbone_train, log);
        rec.weights = module_fingerprint(*r.denoiser);
        rec.report = r.report.to_json();
        meta["config"] = cfg.unet.to_json();
        meta["weights"] = rec.weights;
        meta["report"] = rec.report;
        save_checkpoint(rec.path, *r.denoiser, meta);
    } else if (stage == "semantic") {
        auto adapter = make_semantic_adapter(cfg.adapter, parents.codec->config(), *parents.codec->net()->trunk,
                                             *parents.denoiser, derive_seed(cfg.seed, "semantic-init"));
        auto r = train_semantic_adapter(train, val, parents.denoiser, adapter, *parents.codec, parents.schedule,
                                        cfg.adapter_train, log);
        rec.weights = module_fingerprint(*r.adapter);
        rec.report = r.report.to_json();
        meta["config"] = cfg.adapter.to_json();
        meta["weights"] = rec.weights;
        meta["report"] = rec.report;
        save_checkpoint(rec.path, *r.adapter, meta);
    } else if (stage == "spatial") {
        auto net = make_spatial_net(*parents.denoiser, parents.codec->factor(), derive_seed(cfg.seed, "spatial-init"));
        auto r = train_spatial_net(train, val, parents.denoiser, parents.adapter, net, *parents.codec,
                                   parents.schedule, cfg.spatial_train, log);
        rec.weights = module_fingerprint(*r.net);
        rec.report = r.report.to_json();
        rec.report["semantic_only_val_loss"] = r.semantic_only_val_loss;
        meta["weights"] = rec.weights;
        meta["report"] = rec.report;
        save_checkpoint(rec.path, *r.net, meta);
    } else {
        auto r = train_stega_toy(train, val, cfg.stega, cfg.stega_train, log);
        rec.weights = hex64(checksum(nn::parameter_list(*r.scheme->net())));
        rec.report = r.report.to_json();
        meta["weights"] = rec.weights;
        meta["report"] = rec.report;
        r.scheme->save(rec.path, meta);
    }
    return rec;
}

std::vector<StageRecord> run_pipeline_train(const ExperimentConfig& cfg, const ImageDataset& data, bool force) {
    std::vector<StageRecord> recs;
    nlohmann::json manifest{{"config", cfg.to_json()}, {"corpus", data.fingerprint()}, {"stages", nlohmann::json::array()}};
    for (const auto& s : kStages) {
        recs.push_back(run_stage(cfg, data, s, force));
        manifest["stages"].push_back(recs.back().to_json());
    }
    fs::create_directories(cfg.checkpoint_dir);
    std::ofstream(fs::path(cfg.checkpoint_dir) / "train_manifest.json") << manifest.dump(2) << '\n';
    return recs;
}

ControlledPipeline make_pipeline(const ExperimentConfig& cfg, const Stack& stack) {
    ControlledPipeline p;
    p.codec = stack.codec;
    p.schedule = stack.schedule;
    p.denoiser = stack.denoiser;
    p.adapter = stack.adapter;
    p.spatial = stack.spatial;
    p.full_steps = cfg.eval.full_steps;
    p.seed = derive_seed(cfg.seed, "attack");
    p.batch = cfg.eval.batch;
    return p;
}

std::shared_ptr<Watermarker> make_scheme(const ExperimentConfig& cfg, const Stack& stack, const std::string& name) {
    if (name == "dwtdctsvd") return std::make_shared<DwtDctSvd>(cfg.dwt_step, cfg.dwt_bits);
    if (name == "stega") {
        if (!stack.stega) throw MissingComponentError("stega scheme requires the watermark checkpoint");
        return stack.stega;
    }
    if (name == "ring") {
        if (!stack.codec || !stack.denoiser) throw MissingComponentError("ring scheme requires codec and backbone");
        auto rc = cfg.ring;
        rc.full_steps = cfg.eval.full_steps;
        const auto shape = stack.codec->latent_shape(cfg.resolution, cfg.resolution);
        return std::make_shared<RingWatermark>(rc, GenerationPipeline{stack.codec, stack.schedule, stack.denoiser},
                                               static_cast<int>(shape[1]), static_cast<int>(shape[2]));
    }
    throw RangeError("unknown scheme '" + name + "'");
}

Bits scheme_payload(const ExperimentConfig& cfg, const std::string& scheme, int bits) {
    return random_bits(static_cast<std::size_t>(bits), derive_seed(cfg.seed, "payload-" + scheme));
}

torch::Tensor run_attack(const ControlledPipeline& p, const AttackSpec& a, int t_star, const torch::Tensor& images,
                         int64_t first_index) {
    if (a.name == "regen") return regen(p, images, t_star, first_index);
    if (a.name == "rinse") return rinse(p, images, t_star, a.k, first_index);
    if (a.name == "ctrl_regen") return ctrl_regen(p, images, first_index);
    if (a.name == "ctrl_regen_semantic") return ctrl_regen(p, images, first_index, ControlMode{true, false});
    if (a.name == "ctrl_regen_plus") return ctrl_regen_plus(p, images, t_star, first_index);
    throw RangeError("unknown attack '" + a.name + "'");
}

// ---- evaluation

std::string csv_header() {
    return "scheme,attack,t_star,bitacc_before,bitacc_after,tpr1fpr_before,tpr1fpr_after,psnr,ffid";
}

namespace {
std::string fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}
} // namespace

std::string csv_line(const MetricRow& r) {
    std::ostringstream o;
    o << r.scheme << ',' << r.attack << ',' << r.t_star << ',' << (r.bitacc_before ? fixed(*r.bitacc_before) : "")
      << ',' << (r.bitacc_after ? fixed(*r.bitacc_after) : "") << ',' << fixed(r.tpr_before) << ','
      << fixed(r.tpr_after) << ',' << fixed(r.psnr) << ',' << fixed(r.ffid);
    return o.str();
}

std::string to_csv(const std::vector<MetricRow>& rows) {
    std::string out = csv_header() + '\n';
    for (const auto& r : rows) out += csv_line(r) + '\n';
    return out;
}

namespace {

std::vector<double> scores_of(const std::vector<DetectionOutcome>& d) {
    std::vector<double> s;
    for (const auto& o : d) s.push_back(o.score);
    return s;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

} // namespace

EvalResult run_attack_eval(const ExperimentConfig& cfg, const ImageDataset& data, const Stack& stack) {
    const auto started = std::chrono::steady_clock::now();
    const auto& ec = cfg.eval;
    const auto pipe = make_pipeline(cfg, stack);
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);

    const auto n_pos = std::min<int64_t>(ec.images, static_cast<int64_t>(data.split.eval.size()));
    const auto n_neg = std::min<int64_t>(ec.negatives, static_cast<int64_t>(data.split.eval.size()));
    if (n_pos == 0) throw DataError("eval split is empty");
    const std::vector<int64_t> pos_idx(data.split.eval.begin(), data.split.eval.begin() + n_pos);
    const std::vector<int64_t> neg_idx(data.split.eval.begin(), data.split.eval.begin() + n_neg);
    const auto originals = data.subset(pos_idx);
    const auto clean_neg = data.subset(neg_idx);
    auto fid_encoder = [&](const torch::Tensor& x) {
        return map_batched(x, 64, [&](const torch::Tensor& b) { return stack.codec->pooled_features(b); });
    };
    auto maybe_quantize = [&](const torch::Tensor& x) { return ec.quantize ? quantize_8bit(x) : x; };

    EvalResult res;
    nlohmann::json records = nlohmann::json::array();
    nlohmann::json schemes_j = nlohmann::json::object();

    for (const auto& scheme_name : ec.schemes) {
        const auto scheme = make_scheme(cfg, stack, scheme_name);
        const auto payload = scheme_payload(cfg, scheme_name, scheme->payload_bits());
        torch::Tensor positives, negatives;
        nlohmann::json sj{{"payload", bits_to_hex(payload)}, {"payload_bits", scheme->payload_bits()}};
        if (auto posthoc = std::dynamic_pointer_cast<PostHocWatermarker>(scheme)) {
            positives = maybe_quantize(posthoc->embed(originals, payload));
            negatives = clean_neg;
            const auto probe = perturbation_probe(originals, positives, *stack.codec);
            sj["perturbation"] = {{"pixel_l2", probe.pixel_l2}, {"latent_l2", probe.latent_l2}};
        } else {
            auto ring = std::dynamic_pointer_cast<RingWatermark>(scheme);
            const auto base = derive_seed(cfg.seed, "ring-generation");
            positives = maybe_quantize(ring->generate(n_pos, base, true));
            negatives = maybe_quantize(ring->generate(n_neg, base + static_cast<std::uint64_t>(n_pos), false));
        }
        std::cerr << "[eval] " << scheme_name << ": scoring " << positives.size(0) << " positives, "
                  << negatives.size(0) << " negatives\n";
        const auto pos_before = scores_of(scheme->detect(positives, payload));
        const auto neg_scores = scores_of(scheme->detect(negatives, payload));
        const bool has_bits = scheme->payload_bits() > 0;
        const double tpr_before = tpr_at_fpr(pos_before, neg_scores, ec.fpr);
        sj["negatives_mean_score"] = mean(neg_scores);
        sj["positives_mean_score"] = mean(pos_before);
        schemes_j[scheme_name] = sj;

        for (const auto& atk : ec.attacks) {
            const auto grid = takes_t_star(atk.name) ? atk.t_star : std::vector<int>{pipe.schedule.T};
            for (int t : grid) {
                std::cerr << "[eval] " << scheme_name << " / " << atk.name << " @ " << t << '\n';
                const auto attacked = maybe_quantize(run_attack(pipe, atk, t, positives));
                const auto pos_after = scores_of(scheme->detect(attacked, payload));
                const auto ps = psnr_per_image(attacked, positives);
                MetricRow row;
                row.scheme = scheme_name;
                row.attack = atk.name;
                row.t_star = t;
                if (has_bits) {
                    row.bitacc_before = mean(pos_before);
                    row.bitacc_after = mean(pos_after);
                }
                row.tpr_before = tpr_before;
                row.tpr_after = tpr_at_fpr(pos_after, neg_scores, ec.fpr);
                row.psnr = mean(ps);
                row.ffid = feature_fid(attacked, positives, fid_encoder).value;
                res.rows.push_back(row);

                for (int64_t i = 0; i < attacked.size(0); ++i) {
                    const auto ui = static_cast<std::size_t>(i);
                    records.push_back({{"scheme", scheme_name}, {"attack", atk.name}, {"t_star", t}, {"index", i},
                                       {"seed", pipe.seed + static_cast<std::uint64_t>(i)},
                                       {"score_before", pos_before[ui]}, {"score_after", pos_after[ui]},
                                       {"psnr", ps[ui]}});
                    if (ec.save_images) {
                        char name[64];
                        std::snprintf(name, sizeof(name), "%05lld.png", static_cast<long long>(i));
                        save_image(out_dir / "images" / scheme_name / (atk.name + "_" + std::to_string(t)) / name,
                                   attacked[i]);
                    }
                }
            }
        }
    }

    const auto csv = to_csv(res.rows);
    std::ofstream(out_dir / "metrics.csv", std::ios::binary) << csv;
    const auto plots = write_plots(res.rows, out_dir);

    nlohmann::json summary = nlohmann::json::array();
    for (const auto& r : res.rows) {
        summary.push_back({{"scheme", r.scheme}, {"attack", r.attack}, {"t_star", r.t_star},
                           {"bitacc_before", r.bitacc_before ? nlohmann::json(*r.bitacc_before) : nlohmann::json()},
                           {"bitacc_after", r.bitacc_after ? nlohmann::json(*r.bitacc_after) : nlohmann::json()},
                           {"tpr1fpr_before", r.tpr_before}, {"tpr1fpr_after", r.tpr_after}, {"psnr", r.psnr},
                           {"ffid", r.ffid}});
    }
    nlohmann::json plot_files = nlohmann::json::array();
    for (const auto& p : plots) plot_files.push_back(p.filename().string());
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    res.manifest = {{"config", cfg.to_json()},
                    {"fingerprints", stack.fingerprints},
                    {"corpus", {{"fingerprint", data.fingerprint()}, {"images", data.size()},
                                {"eval_images", n_pos}, {"negatives", n_neg}}},
                    {"schemes", schemes_j},
                    {"records", records},
                    {"summary", summary},
                    {"metrics_csv_checksum", hex64(checksum_bytes(csv))},
                    {"plots", plot_files},
                    {"wall_clock_seconds", seconds},
                    {"versions", {{"torch", TORCH_VERSION}, {"opencv", CV_VERSION}}}};
    std::ofstream(out_dir / "manifest.json") << res.manifest.dump(2) << '\n';
    return res;
}

// ---- plots

void render_plot(const PlotSpec& spec, const fs::path& path, int width, int height) {
    cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    const int left = 80, right = 30, top = 50, bottom = 60;
    const cv::Rect area(left, top, width - left - right, height - top - bottom);

    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& s : spec.series)
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double px = 0.05 * (x1 - x0), py = 0.05 * (y1 - y0);
    x0 -= px, x1 += px, y0 -= py, y1 += py;

    auto map = [&](double x, double y) {
        double fy = (y - y0) / (y1 - y0);
        if (spec.invert_y) fy = 1.0 - fy;
        return cv::Point(area.x + static_cast<int>((x - x0) / (x1 - x0) * area.width),
                         area.y + area.height - static_cast<int>(fy * area.height));
    };
    const auto black = cv::Scalar(0, 0, 0), grey = cv::Scalar(220, 220, 220);
    const auto font = cv::FONT_HERSHEY_SIMPLEX;
    char buf[32];
    for (int i = 0; i <= 5; ++i) {
        const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
        const auto px_ = map(xv, y0), py_ = map(x0, yv);
        cv::line(img, {px_.x, area.y}, {px_.x, area.y + area.height}, grey, 1);
        cv::line(img, {area.x, py_.y}, {area.x + area.width, py_.y}, grey, 1);
        std::snprintf(buf, sizeof(buf), "%.3g", xv);
        cv::putText(img, buf, {px_.x - 15, area.y + area.height + 18}, font, 0.4, black, 1, cv::LINE_AA);
        std::snprintf(buf, sizeof(buf), "%.3g", yv);
        cv::putText(img, buf, {8, py_.y + 4}, font, 0.4, black, 1, cv::LINE_AA);
    }
    cv::rectangle(img, area, black, 1);
    cv::putText(img, spec.title, {left, 30}, font, 0.6, black, 1, cv::LINE_AA);
    cv::putText(img, spec.x_label, {area.x + area.width / 2 - 40, height - 15}, font, 0.5, black, 1, cv::LINE_AA);
    cv::putText(img, spec.y_label + (spec.invert_y ? " (inverted)" : ""), {8, top - 8}, font, 0.45, black, 1,
                cv::LINE_AA);

    static const cv::Scalar palette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                                         {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};
    int legend_y = area.y + 16;
    for (std::size_t k = 0; k < spec.series.size(); ++k) {
        const auto& s = spec.series[k];
        const auto colour = palette[k % std::size(palette)];
        for (std::size_t i = 0; i < s.points.size(); ++i) {
            const auto p = map(s.points[i].first, s.points[i].second);
            cv::circle(img, p, 4, colour, cv::FILLED, cv::LINE_AA);
            if (i > 0) cv::line(img, map(s.points[i - 1].first, s.points[i - 1].second), p, colour, 2, cv::LINE_AA);
        }
        cv::line(img, {area.x + area.width - 170, legend_y - 4}, {area.x + area.width - 145, legend_y - 4}, colour, 2);
        cv::putText(img, s.label, {area.x + area.width - 140, legend_y}, font, 0.45, black, 1, cv::LINE_AA);
        legend_y += 18;
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw DataError("cannot write plot " + path.string());
}

std::vector<fs::path> write_plots(const std::vector<MetricRow>& rows, const fs::path& dir) {
    std::vector<std::string> schemes, attacks;
    for (const auto& r : rows) {
        if (std::find(schemes.begin(), schemes.end(), r.scheme) == schemes.end()) schemes.push_back(r.scheme);
        if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
    }
    std::vector<fs::path> out;
    for (const auto& s : schemes) {
        PlotSpec det{"detection vs noising steps: " + s, "t_star", "", false, {}};
        PlotSpec qual{"quality vs detection: " + s, "", "feature-FID", true, {}};
        for (const auto& a : attacks) {
            PlotSeries ds{a, {}}, qs{a, {}};
            for (const auto& r : rows) {
                if (r.scheme != s || r.attack != a) continue;
                const double d = r.bitacc_after ? *r.bitacc_after : r.tpr_after;
                det.y_label = r.bitacc_after ? "bit accuracy" : "TPR@1%FPR";
                qual.x_label = det.y_label;
                ds.points.emplace_back(r.t_star, d);
                qs.points.emplace_back(d, r.ffid);
            }
            if (!ds.points.empty()) {
                det.series.push_back(ds);
                qual.series.push_back(qs);
            }
        }
        out.push_back(dir / ("detection_" + s + ".png"));
        render_plot(det, out.back());
        out.push_back(dir / ("quality_" + s + ".png"));
        render_plot(qual, out.back());
    }
    return out;
}

} // namespace ctrlregen
