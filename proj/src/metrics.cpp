#include "uniperc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace uniperc::metrics {

namespace {

double median_of(std::vector<double> v) {
    std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1, v.end());
    return 0.5 * (v[mid - 1] + hi);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// segment key: (class id, instance id); instance 0 groups stuff by class
using SegKey = std::pair<int, int>;

std::map<SegKey, std::vector<std::int64_t>> collect_segments(const Tensor& labels,
                                                             const Tensor& instances,
                                                             const std::string& task) {
    std::map<SegKey, std::vector<std::int64_t>> segs;
    for (std::int64_t i = 0; i < labels.numel(); ++i) {
        int cls = static_cast<int>(std::lround(labels[i]));
        int inst = static_cast<int>(std::lround(instances[i]));
        if (task == "semantic") {
            segs[{cls, 0}].push_back(i);
        } else if (task == "instance") {
            if (inst > 0) segs[{cls, inst}].push_back(i);
        } else {  // panoptic
            segs[{cls, inst}].push_back(i);
        }
    }
    return segs;
}

}  // namespace

DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const Tensor& valid,
                           bool median_scale, double max_depth) {
    require_same_shape(pred, gt, "depth_metrics");
    require_same_shape(pred, valid, "depth_metrics valid");
    std::vector<double> ps, gs;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        if (valid[i] < 0.5) continue;
        if (!(gt[i] > 0)) throw std::invalid_argument("depth_metrics: non-positive gt depth");
        double p = pred[i], g = gt[i];
        if (max_depth > 0) {
            p = std::min(p, max_depth);
            g = std::min(g, max_depth);
        }
        ps.push_back(p);
        gs.push_back(g);
    }
    if (ps.empty()) throw std::invalid_argument("depth_metrics: empty valid mask");

    if (median_scale) {
        double s = median_of(gs) / median_of(ps);
        for (double& p : ps) p *= s;
    }

    DepthMetrics m;
    m.median_scaled = median_scale;
    double n = static_cast<double>(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        double p = ps[i], g = gs[i], d = p - g;
        m.abs_rel += std::abs(d) / g;
        m.sq_rel += d * d / g;
        m.rmse += d * d;
        double dl = std::log(p) - std::log(g);
        m.rmse_log += dl * dl;
        double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) m.d1 += 1;
        if (ratio < 1.25 * 1.25) m.d2 += 1;
        if (ratio < 1.25 * 1.25 * 1.25) m.d3 += 1;
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = std::sqrt(m.rmse / n);
    m.rmse_log = std::sqrt(m.rmse_log / n);
    m.d1 /= n;
    m.d2 /= n;
    m.d3 /= n;
    return m;
}

nlohmann::json DepthMetrics::to_json() const {
    return {{"abs_rel", abs_rel}, {"sq_rel", sq_rel},   {"rmse", rmse},
            {"rmse_log", rmse_log}, {"delta1", d1},     {"delta2", d2},
            {"delta3", d3},         {"median_scaled", median_scaled}};
}

std::string DepthMetrics::csv_header() {
    return "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";
}

std::string DepthMetrics::csv_row() const {
    return fmt(abs_rel) + "," + fmt(sq_rel) + "," + fmt(rmse) + "," + fmt(rmse_log) + "," +
           fmt(d1) + "," + fmt(d2) + "," + fmt(d3);
}

SegMetrics seg_metrics(const Tensor& pred_labels, const Tensor& gt_labels,
                       const Tensor& pred_instances, const Tensor& gt_instances,
                       const std::string& task) {
    if (task != "semantic" && task != "instance" && task != "panoptic")
        throw std::invalid_argument("seg_metrics: unknown task " + task);
    require_same_shape(pred_labels, gt_labels, "seg_metrics labels");
    require_same_shape(pred_instances, gt_instances, "seg_metrics instances");

    SegMetrics out;
    out.task = task;

    // mean IoU over classes present in either map
    {
        std::set<int> classes;
        for (std::int64_t i = 0; i < gt_labels.numel(); ++i) {
            classes.insert(static_cast<int>(std::lround(gt_labels[i])));
            classes.insert(static_cast<int>(std::lround(pred_labels[i])));
        }
        double acc = 0;
        for (int c : classes) {
            std::int64_t inter = 0, uni = 0;
            for (std::int64_t i = 0; i < gt_labels.numel(); ++i) {
                bool g = std::lround(gt_labels[i]) == c;
                bool p = std::lround(pred_labels[i]) == c;
                inter += g && p;
                uni += g || p;
            }
            acc += uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
        }
        out.iou = classes.empty() ? 0.0 : acc / static_cast<double>(classes.size());
    }

    // PQ over matched segments (IoU > 0.5 matches are unique)
    auto gt_segs = collect_segments(gt_labels, gt_instances, task);
    auto pr_segs = collect_segments(pred_labels, pred_instances, task);
    int tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
    std::set<SegKey> matched_pred;
    int tp75 = 0;
    for (const auto& [gk, gpix] : gt_segs) {
        double best_iou = 0;
        SegKey best_key{-1, -1};
        for (const auto& [pk, ppix] : pr_segs) {
            if (pk.first != gk.first) continue;  // class must agree
            std::vector<std::int64_t> inter;
            std::set_intersection(gpix.begin(), gpix.end(), ppix.begin(), ppix.end(),
                                  std::back_inserter(inter));
            double iou = static_cast<double>(inter.size()) /
                         static_cast<double>(gpix.size() + ppix.size() - inter.size());
            if (iou > best_iou) {
                best_iou = iou;
                best_key = pk;
            }
        }
        if (best_iou > 0.5) {
            ++tp;
            iou_sum += best_iou;
            matched_pred.insert(best_key);
            if (best_iou > 0.75) ++tp75;
        } else {
            ++fn;
        }
    }
    fp = static_cast<int>(pr_segs.size() - matched_pred.size());
    double denom = tp + 0.5 * fp + 0.5 * fn;
    out.pq = denom > 0 ? iou_sum / denom : (gt_segs.empty() && pr_segs.empty() ? 1.0 : 0.0);

    // simplified AP: precision averaged over IoU thresholds {0.5, 0.75}
    double npred = static_cast<double>(pr_segs.size());
    double p50 = npred > 0 ? tp / npred : (gt_segs.empty() ? 1.0 : 0.0);
    double p75 = npred > 0 ? tp75 / npred : (gt_segs.empty() ? 1.0 : 0.0);
    out.ap = 0.5 * (p50 + p75);
    return out;
}

nlohmann::json SegMetrics::to_json() const {
    return {{"pq", pq}, {"ap", ap}, {"iou", iou}, {"task", task},
            {"simplified_ap", simplified_ap}};
}

std::string SegMetrics::csv_header() { return "pq,ap,iou"; }

std::string SegMetrics::csv_row() const {
    return fmt(pq) + "," + fmt(ap) + "," + fmt(iou);
}

SteeringReport steering_report(const std::vector<std::pair<double, double>>& fold_mse) {
    if (fold_mse.size() != 10)
        throw std::invalid_argument("steering_report: need exactly 10 folds");
    SteeringReport r;
    for (const auto& [tr, te] : fold_mse) {
        r.fold_train.push_back(tr);
        r.fold_test.push_back(te);
    }
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
        mean = 0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        sd = 0;
        for (double x : v) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(v.size()));  // population std
    };
    stats(r.fold_train, r.mean_train, r.std_train);
    stats(r.fold_test, r.mean_test, r.std_test);
    return r;
}

std::string SteeringReport::format_mean_std(double mean, double sd) {
    std::ostringstream os;
    os.precision(4);
    os << mean << "±" << sd;
    return os.str();
}

nlohmann::json SteeringReport::to_json() const {
    return {{"fold_train_mse", fold_train},
            {"fold_test_mse", fold_test},
            {"mean_train", mean_train},
            {"std_train", std_train},
            {"mean_test", mean_test},
            {"std_test", std_test},
            {"std_kind", "population"},
            {"train", format_mean_std(mean_train, std_train)},
            {"test", format_mean_std(mean_test, std_test)}};
}

std::string SteeringReport::csv_header() { return "train_mse,test_mse"; }

std::string SteeringReport::csv_row() const {
    return format_mean_std(mean_train, std_train) + "," + format_mean_std(mean_test, std_test);
}

Tensor binarize_mask(const Tensor& mask, double threshold) {
    if (threshold <= 0 || threshold >= 1)
        throw std::invalid_argument("binarize_mask: threshold must be in (0,1)");
    Tensor out(mask.shape);
    for (std::int64_t i = 0; i < mask.numel(); ++i) out[i] = mask[i] >= threshold ? 1.0 : 0.0;
    return out;
}

}  // namespace uniperc::metrics
