// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/attacks.hpp"
#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/semantic_control.hpp"
#include "ctrlregen/spatial_control.hpp"
#include "ctrlregen/watermarks.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ctrlregen {

// ---- images and corpora

// Reads one image, centre-crops it to a square and resizes it to
// resolution x resolution. Returns [3,R,R] float in [0,1], RGB order.
torch::Tensor load_image(const std::filesystem::path& path, int resolution);
// Writes a [3,H,W] image in [0,1] as 8-bit PNG.
void save_image(const std::filesystem::path& path, const torch::Tensor& image);
// Rounds to the 8-bit grid a PNG round trip would produce.
torch::Tensor quantize_8bit(const torch::Tensor& images);

struct Split {
    std::vector<int64_t> train, val, eval;
};

struct ImageDataset {
    std::vector<std::string> names; // lexicographic
    torch::Tensor images;           // [N,3,R,R]
    Split split;

    int64_t size() const { return static_cast<int64_t>(names.size()); }
    torch::Tensor subset(const std::vector<int64_t>& idx) const;
    std::string fingerprint() const;
};

// Every decodable image under `dir` (non-recursive). Undecodable files are
// skipped with a warning on stderr.
ImageDataset ingest(const std::filesystem::path& dir, int resolution, double val_frac, double eval_frac,
                    std::uint64_t seed);

// Seeded-hash split of file names; stable under adding or removing files.
Split split_by_hash(const std::vector<std::string>& names, double val_frac, double eval_frac, std::uint64_t seed);

// Procedural scenes (gradients plus filled shapes), anti-aliased by rendering
// at twice the resolution. Writes img_00000.png, ...
void make_synthetic_corpus(const std::filesystem::path& dir, int count, int resolution, std::uint64_t seed);

// ---- configuration

struct AttackSpec {
    std::string name;        // regen, rinse, ctrl_regen, ctrl_regen_semantic, ctrl_regen_plus
    std::vector<int> t_star; // empty for ctrl_regen variants
    int k = 2;               // rinse passes

    nlohmann::json to_json() const;
    static AttackSpec from_json(const nlohmann::json& j);
};

struct EvalConfig {
    std::vector<std::string> schemes{"dwtdctsvd", "stega", "ring"};
    std::vector<AttackSpec> attacks;
    int images = 200;
    int negatives = 1000; // capped by the eval split size
    int full_steps = 50;
    int batch = 16;
    double fpr = 0.01;
    bool save_images = false;
    bool quantize = true; // round watermarked and attacked images to 8 bits

    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    int resolution = 64;
    std::string corpus_dir;
    int synthetic_count = 0; // generate the corpus when the directory is missing
    double val_frac = 0.05;
    double eval_frac = 0.1;
    std::string checkpoint_dir;
    std::string output_dir;

    nlohmann::json schedule;
    AutoencoderConfig codec;
    TrainConfig codec_train;
    UNetConfig unet;
    TrainConfig backbone_train;
    AdapterConfig adapter;
    TrainConfig adapter_train;
    TrainConfig spatial_train;
    double dwt_step = 36.0;
    int dwt_bits = 32;
    StegaConfig stega;
    TrainConfig stega_train;
    RingConfig ring;
    EvalConfig eval;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);

    NoiseSchedule make_noise_schedule() const;
    std::filesystem::path checkpoint(const std::string& stage) const;
};

// ---- staged training

inline const std::vector<std::string> kStages{"codec", "backbone", "semantic", "spatial", "watermark"};

struct StageRecord {
    std::string stage;
    std::string path;
    bool reused = false;
    std::string stage_key;
    std::string weights;
    nlohmann::json report;

    nlohmann::json to_json() const;
};

// Trained components. Members stay null until loaded.
struct Stack {
    NoiseSchedule schedule;
    std::shared_ptr<AutoencoderCodec> codec;
    Denoiser denoiser{nullptr};
    SemanticAdapter adapter{nullptr};
    SpatialControlNet spatial{nullptr};
    std::shared_ptr<StegaToy> stega;
    nlohmann::json fingerprints = nlohmann::json::object();
};

// Loads the corpus, generating the synthetic one first when configured.
ImageDataset load_corpus(const ExperimentConfig& cfg);

// Trains (or reuses, when the stored stage key matches) one stage. Parents
// must already exist on disk.
StageRecord run_stage(const ExperimentConfig& cfg, const ImageDataset& data, const std::string& stage,
                      bool force = false);

// All stages in order; writes <checkpoint_dir>/train_manifest.json.
std::vector<StageRecord> run_pipeline_train(const ExperimentConfig& cfg, const ImageDataset& data,
                                            bool force = false);

// Loads stages up to and including `through`, verifying every parent
// fingerprint recorded in each child.
Stack load_stack(const ExperimentConfig& cfg, const std::string& through = "watermark");

ControlledPipeline make_pipeline(const ExperimentConfig& cfg, const Stack& stack);

// Builds a scheme by name from the loaded stack.
std::shared_ptr<Watermarker> make_scheme(const ExperimentConfig& cfg, const Stack& stack, const std::string& name);

// Fixed payload of a scheme, derived from the experiment seed.
Bits scheme_payload(const ExperimentConfig& cfg, const std::string& scheme, int bits);

// Runs one attack over a batch of images at one noising budget.
torch::Tensor run_attack(const ControlledPipeline& p, const AttackSpec& a, int t_star, const torch::Tensor& images,
                         int64_t first_index = 0);

// ---- evaluation

struct MetricRow {
    std::string scheme, attack;
    int t_star = 0;
    std::optional<double> bitacc_before, bitacc_after;
    double tpr_before = 0.0, tpr_after = 0.0;
    double psnr = 0.0, ffid = 0.0;
};

std::string csv_header();
std::string csv_line(const MetricRow& r);
std::string to_csv(const std::vector<MetricRow>& rows);

struct EvalResult {
    std::vector<MetricRow> rows;
    nlohmann::json manifest;
};

// Attacks x schemes x t_star sweep; writes metrics.csv, manifest.json and
// plots into cfg.output_dir.
EvalResult run_attack_eval(const ExperimentConfig& cfg, const ImageDataset& data, const Stack& stack);

// Figure output. Each series is (x, y) pairs in drawing order.
struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};
struct PlotSpec {
    std::string title, x_label, y_label;
    bool invert_y = false;
    std::vector<PlotSeries> series;
};
void render_plot(const PlotSpec& spec, const std::filesystem::path& path, int width = 640, int height = 480);

// Detection-vs-t_star and quality-vs-detection plots per scheme.
std::vector<std::filesystem::path> write_plots(const std::vector<MetricRow>& rows, const std::filesystem::path& dir);

} // namespace ctrlregen
