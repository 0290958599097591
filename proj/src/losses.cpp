#include "uniperc/losses.hpp"

#include <algorithm>
#include <functional>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace uniperc::losses {

namespace {

double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double median_of(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty range");
    std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1, v.end());
    return 0.5 * (v[mid - 1] + hi);
}

// pairwise assignment cost between one query and one target segment
double pair_cost(const Tensor& class_logits, const Tensor& mask_logits, int q,
                 const SegTargets& t, std::size_t j, const LossWeights& w) {
    int C1 = class_logits.dim(1);
    double mx = -1e300;
    for (int c = 0; c < C1; ++c) mx = std::max(mx, class_logits.m(q, c));
    double Z = 0;
    for (int c = 0; c < C1; ++c) Z += std::exp(class_logits.m(q, c) - mx);
    double p_class = std::exp(class_logits.m(q, t.classes[j]) - mx) / Z;

    const Tensor& tm = t.masks[j];
    double bce = 0, inter = 0, psum = 0, tsum = 0;
    std::int64_t n = tm.numel();
    for (int y = 0; y < tm.dim(1); ++y)
        for (int x = 0; x < tm.dim(2); ++x) {
            double p = sigmoid_val(mask_logits.at(q, y, x));
            double tv = tm.at(0, y, x);
            bce += -tv * std::log(std::max(p, kEps)) -
                   (1 - tv) * std::log(std::max(1 - p, kEps));
            inter += p * tv;
            psum += p;
            tsum += tv;
        }
    bce /= static_cast<double>(n);
    double dice = 1.0 - (2 * inter + kEps) / (psum + tsum + kEps);
    return -w.lambda_cls * p_class + w.lambda_bce * bce + w.lambda_dice * dice;
}

std::vector<std::vector<double>> cost_matrix(const Tensor& class_logits,
                                             const Tensor& mask_logits, const SegTargets& t,
                                             const LossWeights& w) {
    int Q = class_logits.dim(0);
    std::size_t T = t.classes.size();
    if (t.masks.size() != T) throw std::invalid_argument("seg targets: class/mask count mismatch");
    if (static_cast<int>(T) > Q)
        throw std::invalid_argument("seg matching: more targets than queries");
    std::vector<std::vector<double>> c(static_cast<std::size_t>(Q), std::vector<double>(T));
    for (int q = 0; q < Q; ++q)
        for (std::size_t j = 0; j < T; ++j)
            c[static_cast<std::size_t>(q)][j] = pair_cost(class_logits, mask_logits, q, t, j, w);
    return c;
}

Var weighted(const Var& x, double w) { return ag::mul_scalar(x, w); }

}  // namespace

void LossWeights::validate() const {
    for (double v : {lambda_cls, lambda_bce, lambda_dice, lambda_contrast, lambda_c, lambda_m,
                     lambda_g, alpha, beta1, beta2, lambda1, lambda2, lambda3, lambda_steer,
                     smooth_inv_depth, smooth_flow, smooth_mask})
        if (v < 0 || !std::isfinite(v))
            throw std::invalid_argument("loss weights must be finite and >= 0");
    if (alpha > 1) throw std::invalid_argument("alpha must be in [0,1]");
}

nlohmann::json LossWeights::to_json() const {
    return {{"lambda_cls", lambda_cls},       {"lambda_bce", lambda_bce},
            {"lambda_dice", lambda_dice},     {"lambda_contrast", lambda_contrast},
            {"lambda_c", lambda_c},           {"lambda_m", lambda_m},
            {"lambda_g", lambda_g},           {"alpha", alpha},
            {"beta1", beta1},                 {"beta2", beta2},
            {"lambda1", lambda1},             {"lambda2", lambda2},
            {"lambda3", lambda3},             {"lambda_steer", lambda_steer},
            {"smooth_inv_depth", smooth_inv_depth},
            {"smooth_flow", smooth_flow},     {"smooth_mask", smooth_mask}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
    LossWeights w;
    auto get = [&](const char* k, double& out) {
        if (j.contains(k)) out = j.at(k).get<double>();
    };
    get("lambda_cls", w.lambda_cls);
    get("lambda_bce", w.lambda_bce);
    get("lambda_dice", w.lambda_dice);
    get("lambda_contrast", w.lambda_contrast);
    get("lambda_c", w.lambda_c);
    get("lambda_m", w.lambda_m);
    get("lambda_g", w.lambda_g);
    get("alpha", w.alpha);
    get("beta1", w.beta1);
    get("beta2", w.beta2);
    get("lambda1", w.lambda1);
    get("lambda2", w.lambda2);
    get("lambda3", w.lambda3);
    get("lambda_steer", w.lambda_steer);
    get("smooth_inv_depth", w.smooth_inv_depth);
    get("smooth_flow", w.smooth_flow);
    get("smooth_mask", w.smooth_mask);
    w.validate();
    return w;
}

nlohmann::json LossReport::to_json() const {
    nlohmann::json j;
    for (const auto& [k, v] : components) j[k] = v;
    j["total"] = total;
    return j;
}

Var ssim_map(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "ssim_map");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    Var mu_a = ag::boxfilter3(a);
    Var mu_b = ag::boxfilter3(b);
    Var mu_aa = ag::square(mu_a);
    Var mu_bb = ag::square(mu_b);
    Var mu_ab = ag::mul(mu_a, mu_b);
    Var sig_a = ag::sub(ag::boxfilter3(ag::square(a)), mu_aa);
    Var sig_b = ag::sub(ag::boxfilter3(ag::square(b)), mu_bb);
    Var sig_ab = ag::sub(ag::boxfilter3(ag::mul(a, b)), mu_ab);
    Var num = ag::mul(ag::add_scalar(ag::mul_scalar(mu_ab, 2.0), C1),
                      ag::add_scalar(ag::mul_scalar(sig_ab, 2.0), C2));
    Var den = ag::mul(ag::add_scalar(ag::add(mu_aa, mu_bb), C1),
                      ag::add_scalar(ag::add(sig_a, sig_b), C2));
    return ag::div(num, den);
}

Var photometric_loss(const Var& pred, const Var& target, const Tensor& validity, double alpha) {
    require_same_shape(pred.value(), target.value(), "photometric_loss");
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("photometric_loss: alpha in [0,1]");
    double valid_count = 0;
    for (double v : validity.data) valid_count += v;
    if (valid_count <= 0) throw std::invalid_argument("photometric_loss: empty validity mask");

    Var l1 = ag::vabs(ag::sub(pred, target));
    Var dssim = ag::mul_scalar(ag::add_scalar(ag::neg(ssim_map(pred, target)), 1.0), 0.5);
    Var per_px = ag::add(ag::mul_scalar(dssim, alpha), ag::mul_scalar(l1, 1.0 - alpha));

    Tensor mask = validity;
    if (mask.dim(0) == 1 && pred.value().dim(0) != 1) {
        Tensor wide(pred.value().shape);
        for (int c = 0; c < wide.dim(0); ++c)
            for (int y = 0; y < wide.dim(1); ++y)
                for (int x = 0; x < wide.dim(2); ++x) wide.at(c, y, x) = mask.at(0, y, x);
        mask = wide;
        valid_count *= pred.value().dim(0);
    }
    return ag::mul_scalar(ag::sum(ag::mul_const(per_px, mask)), 1.0 / valid_count);
}

Var edge_aware_smoothness(const Var& field, const Tensor& guide) {
    if (field.value().dim(1) != guide.dim(1) || field.value().dim(2) != guide.dim(2))
        throw std::invalid_argument("edge_aware_smoothness: field/guide spatial mismatch");

    // edge weights from the guide image, averaged over its channels
    auto edge_w = [&](bool along_x) {
        int H = guide.dim(1), W = guide.dim(2);
        int oh = along_x ? H : H - 1, ow = along_x ? W - 1 : W;
        Tensor e({1, oh, ow});
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double g = 0;
                for (int c = 0; c < guide.dim(0); ++c)
                    g += std::abs(along_x ? guide.at(c, y, x + 1) - guide.at(c, y, x)
                                          : guide.at(c, y + 1, x) - guide.at(c, y, x));
                e.at(0, y, x) = std::exp(-g / guide.dim(0));
            }
        return e;
    };
    Var dx = ag::mean(ag::mul_bcast_ch(ag::vabs(ag::grad_x(field)), Var::constant(edge_w(true))));
    Var dy = ag::mean(ag::mul_bcast_ch(ag::vabs(ag::grad_y(field)), Var::constant(edge_w(false))));
    return ag::add(dx, dy);
}

Var smoothness_loss(const Var& inv_depth, const Var& flow, const Var& mask,
                    const Tensor& guide, const LossWeights& w) {
    // normalize inverse depth by its mean so the term is scale-free
    Var m = ag::clamp_min(ag::mean(inv_depth), kEps);
    Var norm = ag::div(inv_depth,
                       ag::broadcast_ch(m, inv_depth.value().dim(0), inv_depth.value().dim(1),
                                        inv_depth.value().dim(2)));
    Var out = weighted(edge_aware_smoothness(norm, guide), w.smooth_inv_depth);
    if (flow.defined())
        out = ag::add(out, weighted(edge_aware_smoothness(flow, guide), w.smooth_flow));
    if (mask.defined())
        out = ag::add(out, weighted(edge_aware_smoothness(mask, guide), w.smooth_mask));
    return out;
}

Var motion_consistency_loss(const Var& flow_complete, const Var& flow_rigid, const Var& mask) {
    require_same_shape(flow_complete.value(), flow_rigid.value(), "motion_consistency_loss");
    Var diff = ag::vabs(ag::sub(flow_complete, flow_rigid));
    Var inv_mask = ag::add_scalar(ag::neg(mask), 1.0);
    Var gated = ag::mul_bcast_ch(diff, inv_mask);
    double px = static_cast<double>(mask.value().dim(1)) * mask.value().dim(2);
    return ag::mul_scalar(ag::sum(gated), 1.0 / px);
}

Tensor flow_discrepancy(const Tensor& flow_complete, const Tensor& flow_rigid) {
    require_same_shape(flow_complete, flow_rigid, "flow_discrepancy");
    Tensor d({1, flow_complete.dim(1), flow_complete.dim(2)});
    for (int c = 0; c < flow_complete.dim(0); ++c)
        for (int y = 0; y < d.dim(1); ++y)
            for (int x = 0; x < d.dim(2); ++x)
                d.at(0, y, x) += std::abs(flow_complete.at(c, y, x) - flow_rigid.at(c, y, x));
    return d;
}

Var motion_sparsity_loss(const Var& mask, const Tensor& discrepancy) {
    require_same_shape(mask.value(), discrepancy, "motion_sparsity_loss");
    std::vector<double> shifted(discrepancy.data);
    for (double& v : shifted) v += kEps;
    double med = median_of(shifted);
    Tensor w(discrepancy.shape);
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = std::exp(-discrepancy[i] / med);
    // cross-entropy toward a zero mask, down-weighted where the flows disagree
    Var nll = ag::neg(ag::vlog(ag::clamp_min(ag::add_scalar(ag::neg(mask), 1.0), kEps)));
    return ag::mean(ag::mul_const(nll, w));
}

Var above_ground_loss(const Var& points, const geom::Plane& plane) {
    Var h = geom::signed_height_above(points, plane);
    return ag::mean(ag::relu(ag::neg(h)));
}

WeightedSum ssup_total(const Var& recon, const Var& smooth, const Var& consistency,
                       const Var& sparsity, const Var& ground, const LossWeights& w) {
    for (const Var* v : {&recon, &smooth, &consistency, &sparsity, &ground})
        if (!v->defined()) throw std::invalid_argument("ssup_total: missing component");
    Var total = ag::add(ag::add(recon, smooth),
                        ag::add(weighted(consistency, w.lambda_c),
                                ag::add(weighted(sparsity, w.lambda_m),
                                        weighted(ground, w.lambda_g))));
    WeightedSum out{total, {}};
    out.report.total = total.item();
    out.report.components = {{"recon", recon.item()},
                             {"smooth", smooth.item()},
                             {"consistency", consistency.item()},
                             {"sparsity", sparsity.item()},
                             {"ground", ground.item()}};
    return out;
}

// Hungarian algorithm with potentials on the (targets x queries) cost matrix.
MatchResult hungarian_match(const Tensor& class_logits, const Tensor& mask_logits,
                            const SegTargets& targets, const LossWeights& w) {
    auto cost = cost_matrix(class_logits, mask_logits, targets, w);
    int Q = class_logits.dim(0);
    int T = static_cast<int>(targets.classes.size());
    MatchResult res;
    res.query_for_target.assign(static_cast<std::size_t>(T), -1);
    if (T == 0) return res;

    // rows = targets (each must be assigned), cols = queries
    std::vector<double> u(static_cast<std::size_t>(T + 1)), v(static_cast<std::size_t>(Q + 1));
    std::vector<int> p(static_cast<std::size_t>(Q + 1), 0), way(static_cast<std::size_t>(Q + 1));
    constexpr double kInf = 1e300;
    for (int i = 1; i <= T; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(Q + 1), kInf);
        std::vector<char> used(static_cast<std::size_t>(Q + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = p[static_cast<std::size_t>(j0)], j1 = 0;
            double delta = kInf;
            for (int j = 1; j <= Q; ++j)
                if (!used[static_cast<std::size_t>(j)]) {
                    double cur = cost[static_cast<std::size_t>(j - 1)]
                                     [static_cast<std::size_t>(i0 - 1)] -
                                 u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                    if (cur < minv[static_cast<std::size_t>(j)]) {
                        minv[static_cast<std::size_t>(j)] = cur;
                        way[static_cast<std::size_t>(j)] = j0;
                    }
                    if (minv[static_cast<std::size_t>(j)] < delta) {
                        delta = minv[static_cast<std::size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= Q; ++j)
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    for (int j = 1; j <= Q; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            res.query_for_target[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] =
                j - 1;
    for (int t = 0; t < T; ++t)
        res.cost += cost[static_cast<std::size_t>(res.query_for_target[static_cast<std::size_t>(
            t)])][static_cast<std::size_t>(t)];
    return res;
}

MatchResult brute_force_match(const Tensor& class_logits, const Tensor& mask_logits,
                              const SegTargets& targets, const LossWeights& w) {
    auto cost = cost_matrix(class_logits, mask_logits, targets, w);
    int Q = class_logits.dim(0);
    int T = static_cast<int>(targets.classes.size());
    MatchResult best;
    best.query_for_target.assign(static_cast<std::size_t>(T), -1);
    if (T == 0) return best;
    best.cost = 1e300;

    std::vector<int> qidx(static_cast<std::size_t>(Q));
    std::iota(qidx.begin(), qidx.end(), 0);
    std::vector<int> pick(static_cast<std::size_t>(T));
    std::vector<char> used(static_cast<std::size_t>(Q), 0);
    std::function<void(int, double)> rec = [&](int t, double acc) {
        if (acc >= best.cost) return;
        if (t == T) {
            best.cost = acc;
            best.query_for_target.assign(pick.begin(), pick.end());
            return;
        }
        for (int q = 0; q < Q; ++q)
            if (!used[static_cast<std::size_t>(q)]) {
                used[static_cast<std::size_t>(q)] = 1;
                pick[static_cast<std::size_t>(t)] = q;
                rec(t + 1, acc + cost[static_cast<std::size_t>(q)][static_cast<std::size_t>(t)]);
                used[static_cast<std::size_t>(q)] = 0;
            }
    };
    rec(0, 0.0);
    return best;
}

Var seg_classification_loss(const Var& class_logits, const SegTargets& targets,
                            const MatchResult& match) {
    int Q = class_logits.value().dim(0);
    int C1 = class_logits.value().dim(1);
    if (Q == 0 && targets.classes.empty()) return Var::scalar(0.0);

    Tensor onehot({Q, C1});
    std::vector<int> cls(static_cast<std::size_t>(Q), C1 - 1);  // default: no-object
    for (std::size_t j = 0; j < targets.classes.size(); ++j) {
        int q = match.query_for_target[j];
        if (targets.classes[j] >= C1 - 1)
            throw std::invalid_argument("seg_classification_loss: class id out of range");
        cls[static_cast<std::size_t>(q)] = targets.classes[j];
    }
    for (int q = 0; q < Q; ++q) onehot.m(q, cls[static_cast<std::size_t>(q)]) = 1.0;

    Var log_probs = ag::vlog(ag::clamp_min(ag::softmax_rows(class_logits), kEps));
    return ag::mul_scalar(ag::neg(ag::sum(ag::mul_const(log_probs, onehot))), 1.0 / Q);
}

std::pair<Var, Var> seg_mask_losses(const Var& mask_logits, const SegTargets& targets,
                                    const MatchResult& match) {
    std::size_t T = targets.classes.size();
    if (T == 0) return {Var::scalar(0.0), Var::scalar(0.0)};

    Var bce_acc, dice_acc;
    for (std::size_t j = 0; j < T; ++j) {
        int q = match.query_for_target[j];
        const Tensor& t = targets.masks[j];
        Var p = ag::sigmoid(ag::slice_ch(mask_logits, q, 1));
        require_same_shape(p.value(), t, "seg_mask_losses");

        Tensor inv_t(t.shape);
        double tsum = 0;
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            inv_t[i] = 1.0 - t[i];
            tsum += t[i];
        }
        Var log_p = ag::vlog(ag::clamp_min(p, kEps));
        Var log_np = ag::vlog(ag::clamp_min(ag::add_scalar(ag::neg(p), 1.0), kEps));
        Var bce = ag::neg(ag::mean(
            ag::add(ag::mul_const(log_p, t), ag::mul_const(log_np, inv_t))));

        Var num = ag::add_scalar(ag::mul_scalar(ag::sum(ag::mul_const(p, t)), 2.0), kEps);
        Var den = ag::add_scalar(ag::sum(p), tsum + kEps);
        Var dice = ag::add_scalar(ag::neg(ag::div(num, den)), 1.0);

        bce_acc = bce_acc.defined() ? ag::add(bce_acc, bce) : bce;
        dice_acc = dice_acc.defined() ? ag::add(dice_acc, dice) : dice;
    }
    double inv = 1.0 / static_cast<double>(T);
    return {ag::mul_scalar(bce_acc, inv), ag::mul_scalar(dice_acc, inv)};
}

Var seg_contrastive_loss(const Var& object_embeddings, const Var& text_embeddings,
                         double temperature) {
    require_same_shape(object_embeddings.value(), text_embeddings.value(),
                       "seg_contrastive_loss");
    int B = object_embeddings.value().dim(0);
    int D = object_embeddings.value().dim(1);
    for (const Var* e : {&object_embeddings, &text_embeddings})
        for (int r = 0; r < B; ++r) {
            double n = 0;
            for (int c = 0; c < D; ++c) n += e->value().m(r, c) * e->value().m(r, c);
            if (n < kEps * kEps)
                throw std::invalid_argument("seg_contrastive_loss: zero-norm embedding");
        }

    auto normalize = [&](const Var& x) {
        Var sq = ag::matmul(ag::square(x), Var::constant(Tensor::full({D, 1}, 1.0)));
        Var inv = ag::div(Var::constant(Tensor::full({B, 1}, 1.0)),
                          ag::vsqrt(ag::clamp_min(sq, kEps * kEps)));
        return ag::mul(x, ag::matmul(inv, Var::constant(Tensor::full({1, D}, 1.0))));
    };
    Var sims = ag::mul_scalar(
        ag::matmul(normalize(object_embeddings), ag::transpose(normalize(text_embeddings))),
        1.0 / temperature);

    Tensor eye({B, B});
    for (int i = 0; i < B; ++i) eye.m(i, i) = 1.0;
    auto ce_diag = [&](const Var& s) {
        Var lp = ag::vlog(ag::clamp_min(ag::softmax_rows(s), kEps));
        return ag::mul_scalar(ag::neg(ag::sum(ag::mul_const(lp, eye))), 1.0 / B);
    };
    return ag::mul_scalar(ag::add(ce_diag(sims), ce_diag(ag::transpose(sims))), 0.5);
}

WeightedSum sup_total(const Var& cls, const Var& bce, const Var& dice, const Var& contrast,
                      const LossWeights& w) {
    for (const Var* v : {&cls, &bce, &dice, &contrast})
        if (!v->defined()) throw std::invalid_argument("sup_total: missing component");
    Var total = ag::add(ag::add(weighted(cls, w.lambda_cls), weighted(bce, w.lambda_bce)),
                        ag::add(weighted(dice, w.lambda_dice),
                                weighted(contrast, w.lambda_contrast)));
    WeightedSum out{total, {}};
    out.report.total = total.item();
    out.report.components = {{"cls", cls.item()},
                             {"bce", bce.item()},
                             {"dice", dice.item()},
                             {"contrast", contrast.item()}};
    return out;
}

Var distill_loss(const Var& flow_student, const Tensor& flow_teacher, const Var& mask_student,
                 const Tensor& mask_teacher, double beta1, double beta2) {
    require_same_shape(flow_student.value(), flow_teacher, "distill_loss flow");
    require_same_shape(mask_student.value(), mask_teacher, "distill_loss mask");
    Var f = ag::mean(ag::vabs(ag::sub(flow_student, Var::constant(flow_teacher))));
    Var m = ag::mean(ag::vabs(ag::sub(mask_student, Var::constant(mask_teacher))));
    return ag::add(ag::mul_scalar(f, beta1), ag::mul_scalar(m, beta2));
}

WeightedSum total_loss(const WeightedSum& sup, const WeightedSum& ssup, const Var& distil,
                       const LossWeights& w) {
    for (double v : {sup.report.total, ssup.report.total, distil.item()})
        if (!std::isfinite(v)) throw std::invalid_argument("total_loss: non-finite component");
    Var total = ag::add(ag::add(weighted(sup.total, w.lambda1), weighted(ssup.total, w.lambda2)),
                        weighted(distil, w.lambda3));
    WeightedSum out{total, {}};
    out.report.total = total.item();
    out.report.components = {{"sup", sup.report.total},
                             {"ssup", ssup.report.total},
                             {"distil", distil.item()}};
    return out;
}

Var steering_loss(const Var& predictions, const Tensor& targets, double lambda_steer) {
    require_same_shape(predictions.value(), targets, "steering_loss");
    if (targets.numel() == 0) throw std::invalid_argument("steering_loss: empty batch");
    Tensor w(targets.shape);
    double wsum = 0;
    for (std::int64_t i = 0; i < targets.numel(); ++i) {
        w[i] = std::exp(lambda_steer * std::abs(targets[i]));
        wsum += w[i];
    }
    Var sq = ag::square(ag::sub(predictions, Var::constant(targets)));
    return ag::mul_scalar(ag::sum(ag::mul_const(sq, w)), 1.0 / wsum);
}

}  // namespace uniperc::losses
