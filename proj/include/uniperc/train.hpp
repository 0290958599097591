#pragma once

#include <filesystem>
#include <functional>
#include <random>

#include <nlohmann/json.hpp>

#include "uniperc/losses.hpp"
#include "uniperc/metrics.hpp"
#include "uniperc/nets.hpp"
#include "uniperc/synth.hpp"

namespace uniperc::train {

// splitmix64 mix of two seeds; every derived RNG stream in a run comes from
// the run seed through this, so reruns are bit-identical.
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b);

struct Stage {
    std::vector<std::string> components;  // trainable this stage; the rest are frozen
    long steps = 0;                       // nominal full-scale step count

    nlohmann::json to_json() const;
    static Stage from_json(const nlohmann::json& j);
};

struct StageSchedule {
    std::vector<Stage> stages;
    double scale = 0.01;  // desk-scale factor applied to every stage's steps

    // four student stages: depth/pose/seg warm-up, flow, pose+flow+mask, everything
    static StageSchedule student_default();
    // three teacher stages over its per-task encoders and decoders
    static StageSchedule teacher_default();

    long scaled_steps(std::size_t stage) const;  // max(1, lround(steps * scale))
    void validate() const;
    nlohmann::json to_json() const;
    static StageSchedule from_json(const nlohmann::json& j);
};

struct TrainConfig {
    std::uint64_t seed = 0;
    nets::NetConfig net;
    losses::LossWeights weights;
    StageSchedule schedule = StageSchedule::student_default();
    int batch_triples = 1;     // scenes per step feeding the view-synthesis terms
    int batch_supervised = 1;  // scenes per step feeding the segmentation terms
    double lr = 1e-4;          // halved at 75% of the final stage
    double clip_norm = 10.0;
    bool use_seg = true;
    bool use_flow_mask = true;  // false: warp with the rigid flow only
    bool use_ground = true;
    int photometric_scales = 4;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Cycles shuffled indices; every item is drawn exactly once per epoch-aligned
// block of n draws. Deterministic for a fixed seed.
class BatchComposer {
public:
    BatchComposer(int n_items, std::uint64_t seed);
    std::vector<int> next(int count);

private:
    void reshuffle();
    std::vector<int> order_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
};

struct TrainHooks {
    // called after every optimizer step with the step's loss breakdown
    std::function<void(int stage, long step, const losses::LossReport&)> on_step;
};

// Stage-wise training of the unified student. If `teacher` is non-null its
// flow and mask predictions are distilled whenever the student's flow or mask
// decoder is trainable. When `run_dir` is non-empty, writes
// checkpoints/stage<i>.ckpt per stage and logs/steps.jsonl (one loss record
// per step). Frozen components run in eval mode, so their normalization
// statistics freeze along with their weights.
nets::Model train_student(const std::vector<synth::SyntheticScene>& scenes,
                          const TrainConfig& cfg, nets::Teacher* teacher,
                          const std::filesystem::path& run_dir = {},
                          const TrainHooks& hooks = {});

// Same loop over the separate-encoder teacher (no distillation). Writes
// run_dir/teacher.ckpt on completion.
nets::Teacher train_teacher(const std::vector<synth::SyntheticScene>& scenes,
                            const TrainConfig& cfg,
                            const std::filesystem::path& run_dir = {},
                            const TrainHooks& hooks = {});

// checksum over the parameters and buffers of the named components
std::uint64_t component_checksum(const nets::Model& m,
                                 const std::vector<std::string>& components);
std::uint64_t component_checksum(const nets::Teacher& t,
                                 const std::vector<std::string>& components);

// mean depth metrics over each scene's target frame (eval mode)
metrics::DepthMetrics evaluate_depth(nets::Model& model,
                                     const std::vector<synth::SyntheticScene>& scenes,
                                     bool median_scale = true, double max_depth = 0);

// mean segmentation metrics at quarter resolution for one task
metrics::SegMetrics evaluate_seg(nets::Model& model,
                                 const std::vector<synth::SyntheticScene>& scenes,
                                 const std::string& task);

// disjoint, covering, seed-deterministic cross-validation folds
struct FoldPlan {
    std::vector<std::vector<int>> test_indices;
    static FoldPlan make(int n_items, int n_folds, std::uint64_t seed);
    std::vector<int> train_indices(std::size_t fold) const;
};

struct SteeringOptions {
    bool freeze_encoder = true;  // also freezes every other perception head
    long steps = 150;
    int batch = 4;
    double lr = 1e-3;
    double clip_norm = 10.0;
    double lambda_steer = 0.1;  // exponent of the |target|-dependent sample weight
    double weight_decay = 0.0;  // decoupled L2 on the head parameters
    // standardize the coarsest features with per-channel statistics of the
    // training fold before the head sees them (frozen-encoder mode only)
    bool standardize_tokens = true;
};

struct SteeringRunResult {
    metrics::SteeringReport report;  // per-fold train/test MSE, mean +/- std
    // checksum of everything except the steering head, per fold, taken before
    // and after fine-tuning; equal pairs prove the freeze was exact
    std::vector<std::uint64_t> frozen_before, frozen_after;
};

// Tenfold cross-validation: each fold gets a freshly initialized steering head
// on top of the (typically frozen) perception weights of `pretrained`.
SteeringRunResult finetune_steering(nets::Model& pretrained,
                                    const std::vector<synth::SteeringSequence>& sequences,
                                    const FoldPlan& plan, const SteeringOptions& opt,
                                    std::uint64_t seed);

// predict-the-training-mean baseline over the same folds
metrics::SteeringReport steering_constant_baseline(
    const std::vector<synth::SteeringSequence>& sequences, const FoldPlan& plan);

}  // namespace uniperc::train
