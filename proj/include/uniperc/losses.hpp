#pragma once

#include <map>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "uniperc/autograd.hpp"
#include "uniperc/geom.hpp"

namespace uniperc::losses {

inline constexpr double kEps = 1e-7;

struct LossWeights {
    // supervised segmentation
    double lambda_cls = 2.0;
    double lambda_bce = 5.0;
    double lambda_dice = 5.0;
    double lambda_contrast = 0.5;
    // self-supervised
    double lambda_c = 5.0;
    double lambda_m = 0.1;
    double lambda_g = 0.1;
    double alpha = 0.85;  // SSIM / L1 mix
    // distillation
    double beta1 = 0.1;
    double beta2 = 1e-3;
    // combination
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 1.0;
    // steering weight exponent
    double lambda_steer = 0.1;
    // per-field smoothness sub-weights
    double smooth_inv_depth = 1e-3;
    double smooth_flow = 1e-3;
    double smooth_mask = 1e-2;

    void validate() const;
    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
};

struct LossReport {
    double total = 0;
    std::map<std::string, double> components;

    nlohmann::json to_json() const;  // flat object: components plus "total"
};

// differentiable scalar plus the value breakdown for logging
struct WeightedSum {
    Var total;
    LossReport report;
};

// per-pixel SSIM map over a 3x3 uniform window, same shape as the inputs
Var ssim_map(const Var& a, const Var& b);

// mean over valid pixels of alpha*(1-SSIM)/2 + (1-alpha)*|a-b|
Var photometric_loss(const Var& pred, const Var& target, const Tensor& validity, double alpha);

// mean |dx f|*exp(-|dx g|) + mean |dy f|*exp(-|dy g|) for one field
Var edge_aware_smoothness(const Var& field, const Tensor& guide);

// weighted sum over inverse depth (mean-normalized), complete flow and mask
Var smoothness_loss(const Var& inv_depth, const Var& flow, const Var& mask,
                    const Tensor& guide, const LossWeights& w);

Var motion_consistency_loss(const Var& flow_complete, const Var& flow_rigid, const Var& mask);

// per-pixel channel-summed L1 gap between complete and rigid flow (detached)
Tensor flow_discrepancy(const Tensor& flow_complete, const Tensor& flow_rigid);

Var motion_sparsity_loss(const Var& mask, const Tensor& discrepancy);

// mean over points of max(0, -height_above_plane)
Var above_ground_loss(const Var& points, const geom::Plane& plane);

WeightedSum ssup_total(const Var& recon, const Var& smooth, const Var& consistency,
                       const Var& sparsity, const Var& ground, const LossWeights& w);

// --- supervised segmentation ---

struct SegTargets {
    std::vector<int> classes;    // one label per target segment, in [0, num_classes)
    std::vector<Tensor> masks;   // binary {1,h,w} per target segment
};

struct MatchResult {
    std::vector<int> query_for_target;  // index of the matched query per target
    double cost = 0;
};

// assignment cost combines classification probability and mask BCE/dice terms
MatchResult hungarian_match(const Tensor& class_logits, const Tensor& mask_logits,
                            const SegTargets& targets, const LossWeights& w);
// exhaustive-permutation reference matcher, identical optimum
MatchResult brute_force_match(const Tensor& class_logits, const Tensor& mask_logits,
                              const SegTargets& targets, const LossWeights& w);

// class_logits {Q, C+1}; last column is the no-object class
Var seg_classification_loss(const Var& class_logits, const SegTargets& targets,
                            const MatchResult& match);

// mask_logits {Q, h, w}; returns (bce, dice) over matched pairs
std::pair<Var, Var> seg_mask_losses(const Var& mask_logits, const SegTargets& targets,
                                    const MatchResult& match);

// object / text embeddings {B, D}; symmetric InfoNCE over cosine similarity
Var seg_contrastive_loss(const Var& object_embeddings, const Var& text_embeddings,
                         double temperature);

WeightedSum sup_total(const Var& cls, const Var& bce, const Var& dice, const Var& contrast,
                      const LossWeights& w);

// --- distillation and combination ---

Var distill_loss(const Var& flow_student, const Tensor& flow_teacher, const Var& mask_student,
                 const Tensor& mask_teacher, double beta1, double beta2);

WeightedSum total_loss(const WeightedSum& sup, const WeightedSum& ssup, const Var& distil,
                       const LossWeights& w);

// --- steering ---

// predictions {N} against constant targets {N}; weights w_i = exp(lambda*|y_i|)
Var steering_loss(const Var& predictions, const Tensor& targets, double lambda_steer);

}  // namespace uniperc::losses
