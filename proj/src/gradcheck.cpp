#include "uniperc/gradcheck.hpp"

#include <cmath>
#include <random>

#include "uniperc/geom.hpp"
#include "uniperc/losses.hpp"

namespace uniperc::gradcheck {

CheckResult run_check(const Check& check, double step) {
    std::vector<Var> leaves;
    leaves.reserve(check.inputs.size());
    for (const auto& t : check.inputs) leaves.push_back(Var::leaf(t, true));

    Var out = check.build(leaves);
    out.backward();

    CheckResult res{check.name, 0.0, true};
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        Tensor analytic = leaves[k].grad().shape.empty()
                              ? Tensor::zeros(check.inputs[k].shape)
                              : leaves[k].grad();
        for (std::int64_t i = 0; i < check.inputs[k].numel(); ++i) {
            auto eval = [&](double delta) {
                std::vector<Var> probe;
                for (std::size_t j = 0; j < check.inputs.size(); ++j) {
                    Tensor t = check.inputs[j];
                    if (j == k) t[i] += delta;
                    probe.push_back(Var::leaf(std::move(t), false));
                }
                return check.build(probe).item();
            };
            double h = step * std::max(1.0, std::abs(check.inputs[k][i]));
            double numeric = (eval(h) - eval(-h)) / (2 * h);
            double a = analytic[i];
            double scale = std::max(std::abs(a), std::abs(numeric));
            if (scale < 1e-7) continue;  // both effectively zero
            double rel = std::abs(a - numeric) / scale;
            res.max_rel_err = std::max(res.max_rel_err, rel);
        }
    }
    res.pass = res.max_rel_err <= check.tolerance;
    return res;
}

std::vector<CheckResult> run_all(std::uint64_t seed, const std::string& flip_gradient_of) {
    std::vector<CheckResult> out;
    for (const auto& c : default_checks(seed, flip_gradient_of)) out.push_back(run_check(c));
    return out;
}

namespace {

// identity in value, negated in gradient; used only for injected-bug checks
Var flip_grad(const Var& x) {
    auto n = std::make_shared<Node>();
    n->value = x.value();
    n->requires_grad = x.requires_grad();
    n->parents = {x.node()};
    n->backprop = [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    };
    return Var(n);
}

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double uni(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen);
    }
    // magnitude in [lo,hi], random sign: keeps values away from |x| kinks at 0
    double away(double lo, double hi) { return (gen() & 1 ? 1 : -1) * uni(lo, hi); }
    Tensor fill(std::vector<int> shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = uni(lo, hi);
        return t;
    }
};

}  // namespace

std::vector<Check> default_checks(std::uint64_t seed, const std::string& flip_gradient_of) {
    Rng rng(seed);
    std::vector<Check> checks;
    auto add = [&](std::string name, std::vector<Tensor> inputs,
                   std::function<Var(const std::vector<Var>&)> build) {
        bool flip = name == flip_gradient_of;
        checks.push_back(Check{
            std::move(name), std::move(inputs),
            [build = std::move(build), flip](const std::vector<Var>& in) {
                if (!flip) return build(in);
                std::vector<Var> flipped;
                flipped.reserve(in.size());
                for (const auto& v : in) flipped.push_back(flip_grad(v));
                return build(flipped);
            }});
    };

    geom::CameraIntrinsics K{6.0, 6.0, 4.0, 4.0, 8, 8};

    // photometric: keep |pred-target| away from the L1 kink
    {
        Tensor pred = rng.fill({1, 8, 8}, 0.25, 0.75);
        Tensor target(pred.shape);
        for (std::int64_t i = 0; i < pred.numel(); ++i)
            target[i] = pred[i] + rng.away(0.05, 0.15);
        Tensor valid({1, 8, 8});
        for (auto& v : valid.data) v = rng.uni(0, 1) < 0.8 ? 1.0 : 0.0;
        valid[0] = 1.0;
        add("photometric_loss", {pred, target},
            [valid](const std::vector<Var>& in) {
                return losses::photometric_loss(in[0], in[1], valid, 0.85);
            });
        add("ssim", {pred, target}, [](const std::vector<Var>& in) {
            return ag::mean(losses::ssim_map(in[0], in[1]));
        });
    }

    // smoothness over inverse depth + flow + mask
    {
        Tensor inv_d = rng.fill({1, 8, 8}, 0.5, 2.0);
        Tensor flow = rng.fill({3, 8, 8}, -1.0, 1.0);
        Tensor mask = rng.fill({1, 8, 8}, 0.1, 0.9);
        Tensor guide = rng.fill({1, 8, 8}, 0.0, 1.0);
        losses::LossWeights w;
        add("smoothness_loss", {inv_d, flow, mask},
            [guide, w](const std::vector<Var>& in) {
                return losses::smoothness_loss(in[0], in[1], in[2], guide, w);
            });
    }

    // motion consistency: flows kept apart so the L1 term is smooth
    {
        Tensor fr = rng.fill({3, 6, 6}, -1.0, 1.0);
        Tensor fc(fr.shape);
        for (std::int64_t i = 0; i < fr.numel(); ++i) fc[i] = fr[i] + rng.away(0.05, 0.3);
        Tensor mask = rng.fill({1, 6, 6}, 0.1, 0.9);
        add("motion_consistency_loss", {fc, fr, mask}, [](const std::vector<Var>& in) {
            return losses::motion_consistency_loss(in[0], in[1], in[2]);
        });
    }

    // motion sparsity
    {
        Tensor mask = rng.fill({1, 6, 6}, 0.05, 0.9);
        Tensor disc = rng.fill({1, 6, 6}, 0.0, 2.0);
        add("motion_sparsity_loss", {mask}, [disc](const std::vector<Var>& in) {
            return losses::motion_sparsity_loss(in[0], disc);
        });
    }

    // above-ground hinge: heights kept away from 0
    {
        geom::Plane plane{{0, 1, 0}, 0.0};
        Tensor pts({3, 4, 4});
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                pts.at(0, y, x) = rng.uni(-2, 2);
                pts.at(1, y, x) = rng.away(0.2, 1.5);
                pts.at(2, y, x) = rng.uni(1, 5);
            }
        add("above_ground_loss", {pts}, [plane](const std::vector<Var>& in) {
            return losses::above_ground_loss(in[0], plane);
        });
    }

    // segmentation losses; the assignment is fixed from the unperturbed inputs
    {
        int Q = 4, C1 = 4, h = 6, wdt = 6;
        Tensor cls = rng.fill({Q, C1}, -1.0, 1.0);
        Tensor masks = rng.fill({Q, h, wdt}, -2.0, 2.0);
        losses::SegTargets tg;
        tg.classes = {0, 2};
        for (int j = 0; j < 2; ++j) {
            Tensor m({1, h, wdt});
            for (auto& v : m.data) v = rng.uni(0, 1) < 0.4 ? 1.0 : 0.0;
            tg.masks.push_back(m);
        }
        losses::LossWeights w;
        auto match = losses::hungarian_match(cls, masks, tg, w);
        add("seg_classification_loss", {cls}, [tg, match](const std::vector<Var>& in) {
            return losses::seg_classification_loss(in[0], tg, match);
        });
        add("seg_mask_bce", {masks}, [tg, match](const std::vector<Var>& in) {
            return losses::seg_mask_losses(in[0], tg, match).first;
        });
        add("seg_mask_dice", {masks}, [tg, match](const std::vector<Var>& in) {
            return losses::seg_mask_losses(in[0], tg, match).second;
        });
    }

    // contrastive
    {
        Tensor obj = rng.fill({4, 5}, -1.0, 1.0);
        Tensor txt = rng.fill({4, 5}, -1.0, 1.0);
        add("seg_contrastive_loss", {obj, txt}, [](const std::vector<Var>& in) {
            return losses::seg_contrastive_loss(in[0], in[1], 0.5);
        });
    }

    // distillation, student kept away from the teacher
    {
        Tensor ft = rng.fill({3, 6, 6}, -1.0, 1.0);
        Tensor fs(ft.shape);
        for (std::int64_t i = 0; i < ft.numel(); ++i) fs[i] = ft[i] + rng.away(0.05, 0.3);
        Tensor mt = rng.fill({1, 6, 6}, 0.1, 0.9);
        Tensor ms(mt.shape);
        for (std::int64_t i = 0; i < mt.numel(); ++i)
            ms[i] = std::clamp(mt[i] + rng.away(0.03, 0.08), 0.01, 0.99);
        add("distill_loss", {fs, ms}, [ft, mt](const std::vector<Var>& in) {
            return losses::distill_loss(in[0], ft, in[1], mt, 0.1, 1e-3);
        });
    }

    // composite reports (scalar components)
    {
        Tensor parts = rng.fill({5}, 0.1, 2.0);
        losses::LossWeights w;
        add("ssup_total", {parts}, [w](const std::vector<Var>& in) {
            auto comp = [&](int i) { return ag::flatten(ag::slice_ch(
                ag::flatten(in[0], {5, 1, 1}), i, 1), {1}); };
            return losses::ssup_total(comp(0), comp(1), comp(2), comp(3), comp(4), w).total;
        });
        Tensor parts4 = rng.fill({4}, 0.1, 2.0);
        add("sup_total", {parts4}, [w](const std::vector<Var>& in) {
            auto comp = [&](int i) { return ag::flatten(ag::slice_ch(
                ag::flatten(in[0], {4, 1, 1}), i, 1), {1}); };
            return losses::sup_total(comp(0), comp(1), comp(2), comp(3), w).total;
        });
        Tensor parts3 = rng.fill({3}, 0.1, 2.0);
        add("total_loss", {parts3}, [w](const std::vector<Var>& in) {
            auto comp = [&](int i) { return ag::flatten(ag::slice_ch(
                ag::flatten(in[0], {3, 1, 1}), i, 1), {1}); };
            losses::WeightedSum sup{comp(0), {}};
            sup.report.total = sup.total.item();
            losses::WeightedSum ssup{comp(1), {}};
            ssup.report.total = ssup.total.item();
            return losses::total_loss(sup, ssup, comp(2), w).total;
        });
    }

    // steering
    {
        Tensor y = rng.fill({6}, -10.0, 10.0);
        Tensor pred(y.shape);
        for (std::int64_t i = 0; i < y.numel(); ++i) pred[i] = y[i] + rng.away(0.2, 2.0);
        add("steering_loss", {pred}, [y](const std::vector<Var>& in) {
            return losses::steering_loss(in[0], y, 1.0);
        });
    }

    // warp_synthesize: flows constructed so every sample point lands well
    // inside the image with fractional coordinates away from grid lines
    {
        Tensor source = rng.fill({1, 8, 8}, 0.1, 0.9);
        Tensor depth = rng.fill({1, 8, 8}, 2.5, 3.5);
        Tensor flow({3, 8, 8});
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                double d = depth.at(0, y, x);
                double u = std::clamp(x + rng.away(0.3, 0.6), 0.5, 6.5);
                double v = std::clamp(y + rng.away(0.3, 0.6), 0.5, 6.5);
                double fz = rng.uni(-0.05, 0.05);
                double z = d + fz;
                flow.at(0, y, x) = (u - K.cx) * z / K.fx - (x - K.cx) * d / K.fx;
                flow.at(1, y, x) = (v - K.cy) * z / K.fy - (y - K.cy) * d / K.fy;
                flow.at(2, y, x) = fz;
            }
        // reuse the unperturbed validity so tiny probes cannot flip the mask
        Tensor valid_fixed;
        {
            auto wr = geom::warp_synthesize(Var::constant(source), Var::constant(depth),
                                            Var::constant(flow), K);
            valid_fixed = wr.valid;
        }
        Tensor target = rng.fill({1, 8, 8}, 0.1, 0.9);
        add("warp_synthesize", {source, depth, flow},
            [K, valid_fixed, target](const std::vector<Var>& in) {
                auto wr = geom::warp_synthesize(in[0], in[1], in[2], K);
                return losses::photometric_loss(wr.image, Var::constant(target), valid_fixed,
                                                0.85);
            });
    }

    return checks;
}

}  // namespace uniperc::gradcheck
