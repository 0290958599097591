#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uniperc/tensor.hpp"

namespace uniperc::metrics {

struct DepthMetrics {
    double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
    double d1 = 0, d2 = 0, d3 = 0;  // delta < 1.25, 1.25^2, 1.25^3
    bool median_scaled = false;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

// optional max_depth clamp (0 disables); gt must be positive on the mask
DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& valid,
                           bool median_scale, double max_depth = 0);

struct SegMetrics {
    double iou = 0, pq = 0, ap = 0;
    std::string task;
    bool simplified_ap = true;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

// labels/instances are {1,H,W} integer-valued maps; instance id 0 means stuff.
// task selects the segment definition: semantic (class regions), instance
// (things only), panoptic (stuff classes plus things).
SegMetrics seg_metrics(const Tensor& pred_labels, const Tensor& gt_labels,
                       const Tensor& pred_instances, const Tensor& gt_instances,
                       const std::string& task);

struct SteeringReport {
    std::vector<double> fold_train, fold_test;  // MSE per fold
    double mean_train = 0, std_train = 0;       // population std
    double mean_test = 0, std_test = 0;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
    static std::string format_mean_std(double mean, double sd);  // "m±s"
};

SteeringReport steering_report(const std::vector<std::pair<double, double>>& fold_mse);

// entries >= threshold map to 1, the rest to 0
Tensor binarize_mask(const Tensor& mask, double threshold);

}  // namespace uniperc::metrics
