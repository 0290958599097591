#include "uniperc/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace uniperc::nn {

Var ParamRegistry::add_param(const std::string& name, Tensor init) {
    if (params_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    Var v = Var::leaf(std::move(init), true);
    params_.emplace(name, v);
    return v;
}

void ParamRegistry::add_buffer(const std::string& name, Tensor* buf) {
    if (buffers_.count(name)) throw std::logic_error("duplicate buffer: " + name);
    buffers_.emplace(name, buf);
}

Var ParamRegistry::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

void ParamRegistry::zero_grads() const {
    for (const auto& [name, v] : params_) v.zero_grad();
}

Tensor he_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = dist(rng);
    return t;
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, int k,
               int stride, int pad, std::mt19937_64& rng)
    : stride_(stride), pad_(pad) {
    w_ = reg.add_param(name + ".w", he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng));
    b_ = reg.add_param(name + ".b", Tensor::zeros({out_ch}));
}

BatchNorm2d::BatchNorm2d(ParamRegistry& reg, const std::string& name, int ch) {
    gamma_ = reg.add_param(name + ".gamma", Tensor::full({ch}, 1.0));
    beta_ = reg.add_param(name + ".beta", Tensor::zeros({ch}));
    run_mean_ = std::make_unique<Tensor>(Tensor::zeros({ch}));
    run_var_ = std::make_unique<Tensor>(Tensor::full({ch}, 1.0));
    reg.add_buffer(name + ".run_mean", run_mean_.get());
    reg.add_buffer(name + ".run_var", run_var_.get());
}

Var BatchNorm2d::forward(const Var& x, bool training) {
    if (training) {
        Tensor mu, var;
        Var out = ag::batchnorm_train(x, gamma_, beta_, eps_, &mu, &var);
        for (std::int64_t i = 0; i < mu.numel(); ++i) {
            run_mean_->data[i] = (1 - momentum_) * run_mean_->data[i] + momentum_ * mu[i];
            run_var_->data[i] = (1 - momentum_) * run_var_->data[i] + momentum_ * var[i];
        }
        return out;
    }
    return ag::batchnorm_eval(x, gamma_, beta_, *run_mean_, *run_var_, eps_);
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in_dim, int out_dim,
               std::mt19937_64& rng) {
    w_ = reg.add_param(name + ".w", he_uniform({in_dim, out_dim}, in_dim, rng));
    b_ = reg.add_param(name + ".b", Tensor::zeros({out_dim}));
}

Var Linear::forward(const Var& x) const {
    return ag::add_row_bcast(ag::matmul(x, w_), b_);
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

double AdamOptimizer::step(const std::map<std::string, Var>& params,
                           const std::vector<std::string>& active, double clip_norm) {
    ++t_;
    double norm_sq = 0;
    for (const auto& name : active) {
        const Var& p = params.at(name);
        if (p.grad().shape.empty()) continue;
        for (double g : p.grad().data) norm_sq += g * g;
    }
    double norm = std::sqrt(norm_sq);
    double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& name : active) {
        const Var& p = params.at(name);
        if (p.grad().shape.empty()) continue;
        Tensor& m = m_.try_emplace(name, Tensor::zeros(p.value().shape)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(p.value().shape)).first->second;
        Tensor& val = const_cast<Var&>(p).value_mut();
        const Tensor& g = p.grad();
        for (std::int64_t i = 0; i < val.numel(); ++i) {
            double gi = g[i] * scale;
            m[i] = beta1_ * m[i] + (1 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1 - beta2_) * gi * gi;
            val[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
    return norm;
}

namespace {
std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}
}  // namespace

std::uint64_t checksum(const std::map<std::string, Var>& params,
                       const std::vector<std::string>& names) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& name : names) {
        const Var& p = params.at(name);
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, p.value().data.data(), p.value().data.size() * sizeof(double));
    }
    return h;
}

std::uint64_t checksum_all(const ParamRegistry& reg) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& [name, p] : reg.params()) {
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, p.value().data.data(), p.value().data.size() * sizeof(double));
    }
    for (const auto& [name, buf] : reg.buffers()) {
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, buf->data.data(), buf->data.size() * sizeof(double));
    }
    return h;
}

std::uint64_t checksum_prefixed(const ParamRegistry& reg,
                                const std::vector<std::string>& prefixes) {
    auto starts_with_any = [&](const std::string& name) {
        for (const auto& p : prefixes)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    };
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& [name, p] : reg.params()) {
        if (!starts_with_any(name)) continue;
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, p.value().data.data(), p.value().data.size() * sizeof(double));
    }
    for (const auto& [name, buf] : reg.buffers()) {
        if (!starts_with_any(name)) continue;
        h = fnv1a(h, name.data(), name.size());
        h = fnv1a(h, buf->data.data(), buf->data.size() * sizeof(double));
    }
    return h;
}

}  // namespace uniperc::nn
