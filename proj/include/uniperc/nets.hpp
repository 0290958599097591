#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uniperc/nn.hpp"

namespace uniperc::nets {

struct NetConfig {
    int width = 96;
    int height = 64;
    std::vector<int> enc_widths = {16, 24, 32, 48, 64};
    int block_width = 32;     // pose decoder residual block width
    int flow_width = 16;      // flow/mask recurrence width
    int num_queries = 8;
    int num_classes = 4;      // real classes; logits carry one extra no-object column
    int embed_dim = 16;       // query / token embedding dim
    int steer_dim = 32;       // steering token dim
    double d_min = 0.1;
    double d_max = 100.0;
    bool multiscale_pose = true;    // false: naive coarsest-level pose head
    bool steering_pos_enc = true;
    std::uint64_t init_seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NetConfig from_json(const nlohmann::json& j);
};

// finest-first: level i has spatial size (H/2^(i+1), W/2^(i+1))
struct FeaturePyramid {
    std::vector<Var> levels;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
            std::mt19937_64& rng);
    FeaturePyramid forward(const Var& image, bool training);

private:
    struct Stage {
        nn::Conv2d c1, c2;
        nn::BatchNorm2d b1, b2;
    };
    std::vector<Stage> stages_;
};

struct DepthMaps {
    std::vector<Var> disparity;  // index 0 = full resolution, then /2, /4, /8
    std::vector<Var> depth;      // same order, mapped into [d_min, d_max]
};

class DepthDecoder {
public:
    DepthDecoder() = default;
    DepthDecoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                 std::mt19937_64& rng);
    DepthMaps forward(const FeaturePyramid& f, bool training);

private:
    double d_min_ = 0.1, d_max_ = 100.0;
    struct Up {
        nn::Conv2d conv;
        nn::BatchNorm2d bn;
    };
    std::vector<Up> ups_;
    nn::Conv2d top_;
    std::vector<nn::Conv2d> disp_heads_;  // one per emitted scale, finest-first
};

// residual unit: out = ReLU(ConvBNReLU(ConvBN(x)) + Shortcut(x))
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int in_ch, int out_ch,
             std::mt19937_64& rng);
    Var forward(const Var& x, bool training);

private:
    nn::Conv2d c1_, c2_, shortcut_;
    nn::BatchNorm2d b1_, b2_;
    bool has_shortcut_ = false;
};

class PoseDecoder {
public:
    PoseDecoder() = default;
    PoseDecoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                std::mt19937_64& rng);
    // 6-vector (axis-angle, translation), scaled near identity at init
    Var forward(const FeaturePyramid& fs, const FeaturePyramid& ft, bool training);

private:
    bool multiscale_ = true;
    std::vector<ResBlock> blocks_;  // two per level when multiscale
    nn::Conv2d head1_, head2_;
};

// coarse-to-fine recurrence shared by the flow (3ch) and mask (1ch) heads
class RecurrentDecoder {
public:
    RecurrentDecoder() = default;
    RecurrentDecoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                     int out_ch, bool sigmoid_out, std::mt19937_64& rng);
    // full-resolution field; flow is unbounded, mask is sigmoid-squashed
    Var forward(const FeaturePyramid& fs, const FeaturePyramid& ft, const Var& pose6,
                bool training);

private:
    int out_ch_ = 3;
    bool sigmoid_out_ = false;
    Var seed_w_;  // {6, out_ch} linear seed from the pose
    struct Level {
        nn::Conv2d attend, inner, emit;
    };
    std::vector<Level> levels_;  // coarsest-first application order
};

struct SegOutput {
    Var class_logits;       // {Q, num_classes+1}
    Var mask_logits;        // {Q, H/4, W/4}
    Var query_embeddings;   // {Q, embed_dim}
    std::string task;
};

class SegDecoder {
public:
    SegDecoder() = default;
    SegDecoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
               std::mt19937_64& rng);
    SegOutput forward(const FeaturePyramid& f, const std::string& task, bool training);
    // learned per-class embeddings standing in for encoded text prompts
    const Var& text_embeddings() const { return text_embed_; }

private:
    int num_queries_ = 8, embed_dim_ = 16;
    Var queries_, task_embed_, text_embed_;  // {Q,D}, {3,D}, {num_classes,D}
    nn::Conv2d token_proj_, mask_proj_;
    nn::Linear mlp1_, mlp2_, cls_head_, embed_head_, mask_head_;
};

class SteeringHead {
public:
    SteeringHead() = default;
    SteeringHead(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                 std::mt19937_64& rng);
    // attentive pooling over the coarsest features of exactly 16 frames
    Var forward(const std::vector<FeaturePyramid>& frames, bool training);

    // Frozen per-channel standardization of the coarsest features, meant to
    // be set from training-fold statistics before fine-tuning on top of a
    // frozen encoder. Defaults to the identity transform. Stored as buffers
    // so it round-trips through checkpoints.
    void set_token_norm(const Tensor& mean, const Tensor& inv_std);

private:
    bool pos_enc_ = true;
    Var query_, frame_embed_;  // {1,S}, {16,S}
    nn::Linear token_proj_, out_;
    std::unique_ptr<Tensor> tok_mu_, tok_isig_;  // {C} each
};

// the unified student: one encoder, six heads, one parameter registry
struct Model {
    NetConfig cfg;
    nn::ParamRegistry reg;
    Encoder encoder;
    DepthDecoder depth;
    PoseDecoder pose;
    RecurrentDecoder flow;
    RecurrentDecoder mask;
    SegDecoder seg;
    SteeringHead steering;

    Model(NetConfig cfg, std::uint64_t seed);
    Model(Model&&) = default;
    Model(const Model&) = delete;

    // component names: encoder, depth, pose, flow, mask, seg, steering
    static const std::vector<std::string>& component_names();
    static std::vector<std::string> component_prefixes(const std::vector<std::string>& components);
    std::vector<std::string> param_names(const std::vector<std::string>& components) const;

    void save(const std::filesystem::path& path) const;
    void load_values(const std::filesystem::path& path);
    static Model load(const std::filesystem::path& path);
};

// separate-encoder teacher: three encoders, five decoders
struct Teacher {
    NetConfig cfg;
    nn::ParamRegistry reg;
    Encoder enc_depth_seg, enc_pose, enc_flow;
    DepthDecoder depth;
    SegDecoder seg;
    PoseDecoder pose;
    RecurrentDecoder flow;
    RecurrentDecoder mask;

    Teacher(NetConfig cfg, std::uint64_t seed);
    Teacher(Teacher&&) = default;
    Teacher(const Teacher&) = delete;

    static std::vector<std::string> component_prefixes(const std::vector<std::string>& components);
    std::vector<std::string> param_names(const std::vector<std::string>& components) const;

    void save(const std::filesystem::path& path) const;
    void load_values(const std::filesystem::path& path);
    static Teacher load(const std::filesystem::path& path);
};

}  // namespace uniperc::nets
