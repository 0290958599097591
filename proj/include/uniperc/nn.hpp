#pragma once

#include <map>
#include <random>
#include <string>

#include "uniperc/autograd.hpp"

namespace uniperc::nn {

// Named parameter/buffer registry. Parameters are autograd leaves updated by
// the optimizer; buffers (batchnorm running stats) are plain tensors that
// still round-trip through checkpoints. std::map keeps iteration order
// deterministic for checksums and serialization.
class ParamRegistry {
public:
    Var add_param(const std::string& name, Tensor init);
    void add_buffer(const std::string& name, Tensor* buf);

    const std::map<std::string, Var>& params() const { return params_; }
    const std::map<std::string, Tensor*>& buffers() const { return buffers_; }
    Var param(const std::string& name) const;

    void zero_grads() const;

private:
    std::map<std::string, Var> params_;
    std::map<std::string, Tensor*> buffers_;
};

// weight init helpers (He-uniform for conv/linear)
Tensor he_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng);

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, int k, int stride,
           int pad, std::mt19937_64& rng);
    Var forward(const Var& x) const { return ag::conv2d(x, w_, b_, stride_, pad_); }

private:
    Var w_, b_;
    int stride_ = 1, pad_ = 0;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(ParamRegistry& reg, const std::string& name, int ch);
    // training=true uses batch statistics and updates the running ones;
    // training=false uses the frozen running statistics.
    Var forward(const Var& x, bool training);

private:
    Var gamma_, beta_;
    std::unique_ptr<Tensor> run_mean_, run_var_;
    double momentum_ = 0.1;
    double eps_ = 1e-5;
};

class Linear {
public:
    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, int in_dim, int out_dim,
           std::mt19937_64& rng);
    Var forward(const Var& x) const;  // x: {n, in} -> {n, out}

private:
    Var w_, b_;
};

// Adam over a subset of registry parameters (the stage's trainable set).
class AdamOptimizer {
public:
    AdamOptimizer(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    // Applies one update to every listed parameter from its accumulated grad,
    // then leaves grads untouched (caller zeroes them). Returns the global
    // grad norm before clipping.
    double step(const std::map<std::string, Var>& params,
                const std::vector<std::string>& active, double clip_norm);
    void reset_state() { m_.clear(); v_.clear(); t_ = 0; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// FNV-1a over the raw bytes of a set of tensors; used for freeze checks and
// determinism assertions.
std::uint64_t checksum(const std::map<std::string, Var>& params,
                       const std::vector<std::string>& names);
std::uint64_t checksum_all(const ParamRegistry& reg);
// parameters and buffers whose name starts with any of the prefixes
std::uint64_t checksum_prefixed(const ParamRegistry& reg,
                                const std::vector<std::string>& prefixes);

}  // namespace uniperc::nn
