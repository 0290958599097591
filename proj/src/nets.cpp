#include "uniperc/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "uniperc/checkpoint.hpp"

namespace uniperc::nets {

namespace {

void save_registry(const nn::ParamRegistry& reg, const nlohmann::json& meta,
                   const std::filesystem::path& path) {
    TensorArchive arc;
    arc.meta = meta;
    for (const auto& [name, v] : reg.params()) arc.tensors[name] = v.value();
    for (const auto& [name, buf] : reg.buffers()) arc.tensors[name] = *buf;
    arc.save(path);
}

void load_registry(nn::ParamRegistry& reg, const std::filesystem::path& path) {
    TensorArchive arc = TensorArchive::load(path);
    for (auto& [name, v] : reg.params()) {
        auto it = arc.tensors.find(name);
        if (it == arc.tensors.end())
            throw std::runtime_error("checkpoint missing parameter " + name);
        require_same_shape(v.value(), it->second, ("load_registry " + name).c_str());
        const_cast<Var&>(v).value_mut() = it->second;
    }
    for (auto& [name, buf] : reg.buffers()) {
        auto it = arc.tensors.find(name);
        if (it == arc.tensors.end())
            throw std::runtime_error("checkpoint missing buffer " + name);
        *buf = it->second;
    }
}

std::vector<std::string> names_with_prefixes(const nn::ParamRegistry& reg,
                                             const std::vector<std::string>& prefixes) {
    std::vector<std::string> out;
    for (const auto& [name, v] : reg.params())
        for (const auto& p : prefixes)
            if (name.rfind(p, 0) == 0) {
                out.push_back(name);
                break;
            }
    return out;
}

int task_index(const std::string& task) {
    if (task == "panoptic") return 0;
    if (task == "instance") return 1;
    if (task == "semantic") return 2;
    throw std::invalid_argument("unknown segmentation task: " + task);
}

}  // namespace

void NetConfig::validate() const {
    if (width % 32 != 0 || height % 32 != 0)
        throw std::invalid_argument("image size must be divisible by 32");
    if (enc_widths.size() != 5) throw std::invalid_argument("need exactly 5 encoder widths");
    for (int w : enc_widths)
        if (w <= 0) throw std::invalid_argument("encoder widths must be positive");
    if (num_queries < 1 || num_queries > 8)
        throw std::invalid_argument("query count must be in [1,8]");
    if (num_classes < 3 || num_classes > 8)
        throw std::invalid_argument("class count must be in [3,8]");
    if (d_min <= 0 || d_max <= d_min) throw std::invalid_argument("bad depth range");
    if (block_width <= 0 || flow_width <= 0 || embed_dim <= 0 || steer_dim <= 0)
        throw std::invalid_argument("widths must be positive");
}

nlohmann::json NetConfig::to_json() const {
    return {{"width", width},
            {"height", height},
            {"enc_widths", enc_widths},
            {"block_width", block_width},
            {"flow_width", flow_width},
            {"num_queries", num_queries},
            {"num_classes", num_classes},
            {"embed_dim", embed_dim},
            {"steer_dim", steer_dim},
            {"d_min", d_min},
            {"d_max", d_max},
            {"multiscale_pose", multiscale_pose},
            {"steering_pos_enc", steering_pos_enc},
            {"init_seed", init_seed}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
    NetConfig c;
    auto opt = [&](const char* k, auto& out) {
        if (j.contains(k)) out = j.at(k).get<std::decay_t<decltype(out)>>();
    };
    opt("width", c.width);
    opt("height", c.height);
    opt("enc_widths", c.enc_widths);
    opt("block_width", c.block_width);
    opt("flow_width", c.flow_width);
    opt("num_queries", c.num_queries);
    opt("num_classes", c.num_classes);
    opt("embed_dim", c.embed_dim);
    opt("steer_dim", c.steer_dim);
    opt("d_min", c.d_min);
    opt("d_max", c.d_max);
    opt("multiscale_pose", c.multiscale_pose);
    opt("steering_pos_enc", c.steering_pos_enc);
    opt("init_seed", c.init_seed);
    c.validate();
    return c;
}

// --- encoder ---

Encoder::Encoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                 std::mt19937_64& rng) {
    int in_ch = 1;
    for (std::size_t i = 0; i < cfg.enc_widths.size(); ++i) {
        int w = cfg.enc_widths[i];
        std::string base = prefix + "stage" + std::to_string(i) + ".";
        Stage s;
        s.c1 = nn::Conv2d(reg, base + "c1", in_ch, w, 3, 2, 1, rng);
        s.b1 = nn::BatchNorm2d(reg, base + "b1", w);
        s.c2 = nn::Conv2d(reg, base + "c2", w, w, 3, 1, 1, rng);
        s.b2 = nn::BatchNorm2d(reg, base + "b2", w);
        stages_.push_back(std::move(s));
        in_ch = w;
    }
}

FeaturePyramid Encoder::forward(const Var& image, bool training) {
    if (image.value().dim(1) % 32 != 0 || image.value().dim(2) % 32 != 0)
        throw std::invalid_argument("encoder input must be divisible by 32");
    FeaturePyramid out;
    Var x = image;
    for (auto& s : stages_) {
        x = ag::relu(s.b1.forward(s.c1.forward(x), training));
        x = ag::relu(s.b2.forward(s.c2.forward(x), training));
        out.levels.push_back(x);
    }
    return out;
}

// --- depth decoder ---

DepthDecoder::DepthDecoder(nn::ParamRegistry& reg, const std::string& prefix,
                           const NetConfig& cfg, std::mt19937_64& rng)
    : d_min_(cfg.d_min), d_max_(cfg.d_max) {
    const auto& ew = cfg.enc_widths;
    std::vector<int> dw = {16, 16, 24, 32, 48};  // decoder widths, finest-first
    top_ = nn::Conv2d(reg, prefix + "top", ew[4], dw[4], 3, 1, 1, rng);
    int prev = dw[4];
    for (int i = 3; i >= 0; --i) {
        Up u;
        u.conv = nn::Conv2d(reg, prefix + "up" + std::to_string(i), prev + ew[static_cast<std::size_t>(i)],
                            dw[static_cast<std::size_t>(i)], 3, 1, 1, rng);
        u.bn = nn::BatchNorm2d(reg, prefix + "upbn" + std::to_string(i),
                               dw[static_cast<std::size_t>(i)]);
        ups_.push_back(std::move(u));
        prev = dw[static_cast<std::size_t>(i)];
    }
    {
        Up u;
        u.conv = nn::Conv2d(reg, prefix + "full", prev, dw[0], 3, 1, 1, rng);
        u.bn = nn::BatchNorm2d(reg, prefix + "fullbn", dw[0]);
        ups_.push_back(std::move(u));
    }
    // heads at full, /2, /4, /8; channels dw0, dw0, dw1, dw2
    for (int s = 0; s < 4; ++s) {
        int ch = s == 0 ? dw[0] : dw[static_cast<std::size_t>(s - 1)];
        disp_heads_.push_back(nn::Conv2d(reg, prefix + "disp" + std::to_string(s), ch, 1, 3, 1,
                                         1, rng));
    }
}

DepthMaps DepthDecoder::forward(const FeaturePyramid& f, bool training) {
    Var x = ag::relu(top_.forward(f.levels[4]));
    std::vector<Var> taps;  // level outputs at /8, /4, /2 then full
    for (int k = 0; k < 4; ++k) {
        auto& u = ups_[static_cast<std::size_t>(k)];
        int level = 3 - k;
        x = ag::upsample2(x);
        x = ag::relu(u.bn.forward(
            u.conv.forward(ag::concat_ch({x, f.levels[static_cast<std::size_t>(level)]})),
            training));
        if (level <= 2) taps.push_back(x);  // /8, /4, /2
    }
    auto& fu = ups_.back();
    Var full = ag::relu(fu.bn.forward(fu.conv.forward(ag::upsample2(x)), training));

    DepthMaps out;
    std::vector<Var> feats = {full, taps[2], taps[1], taps[0]};  // full, /2, /4, /8
    double inv_span = 1.0 / d_min_ - 1.0 / d_max_;
    for (std::size_t s = 0; s < feats.size(); ++s) {
        Var disp = ag::sigmoid(disp_heads_[s].forward(feats[s]));
        out.disparity.push_back(disp);
        Var denom = ag::add_scalar(ag::mul_scalar(disp, inv_span), 1.0 / d_max_);
        out.depth.push_back(ag::div(Var::constant(Tensor::full(denom.value().shape, 1.0)),
                                    denom));
    }
    return out;
}

// --- pose decoder ---

ResBlock::ResBlock(nn::ParamRegistry& reg, const std::string& prefix, int in_ch, int out_ch,
                   std::mt19937_64& rng) {
    c1_ = nn::Conv2d(reg, prefix + "c1", in_ch, out_ch, 3, 1, 1, rng);
    b1_ = nn::BatchNorm2d(reg, prefix + "b1", out_ch);
    c2_ = nn::Conv2d(reg, prefix + "c2", out_ch, out_ch, 3, 1, 1, rng);
    b2_ = nn::BatchNorm2d(reg, prefix + "b2", out_ch);
    has_shortcut_ = in_ch != out_ch;
    if (has_shortcut_) shortcut_ = nn::Conv2d(reg, prefix + "sc", in_ch, out_ch, 1, 1, 0, rng);
}

Var ResBlock::forward(const Var& x, bool training) {
    Var h = b1_.forward(c1_.forward(x), training);
    h = ag::relu(b2_.forward(c2_.forward(h), training));
    Var s = has_shortcut_ ? shortcut_.forward(x) : x;
    return ag::relu(ag::add(h, s));
}

PoseDecoder::PoseDecoder(nn::ParamRegistry& reg, const std::string& prefix,
                         const NetConfig& cfg, std::mt19937_64& rng)
    : multiscale_(cfg.multiscale_pose) {
    const auto& ew = cfg.enc_widths;
    int bw = cfg.block_width;
    if (multiscale_) {
        int in_ch = 2 * ew[0];
        for (int i = 0; i < 5; ++i) {
            std::string base = prefix + "lvl" + std::to_string(i) + ".";
            blocks_.emplace_back(reg, base + "blk0.", in_ch, bw, rng);
            blocks_.emplace_back(reg, base + "blk1.", bw, bw, rng);
            if (i < 4) in_ch = bw + 2 * ew[static_cast<std::size_t>(i + 1)];
        }
        head1_ = nn::Conv2d(reg, prefix + "head1", bw, bw, 1, 1, 0, rng);
    } else {
        head1_ = nn::Conv2d(reg, prefix + "head1", 2 * ew[4], bw, 1, 1, 0, rng);
    }
    head2_ = nn::Conv2d(reg, prefix + "head2", cfg.block_width, 6, 1, 1, 0, rng);
}

Var PoseDecoder::forward(const FeaturePyramid& fs, const FeaturePyramid& ft, bool training) {
    if (fs.levels.size() != 5 || ft.levels.size() != 5)
        throw std::invalid_argument("pose decoder expects 5-level pyramids");
    Var x;
    if (multiscale_) {
        // cascade finest to coarsest, downsampling and folding in each level
        x = ag::concat_ch({fs.levels[0], ft.levels[0]});
        for (int i = 0; i < 5; ++i) {
            x = blocks_[static_cast<std::size_t>(2 * i)].forward(x, training);
            x = blocks_[static_cast<std::size_t>(2 * i + 1)].forward(x, training);
            if (i < 4)
                x = ag::concat_ch({ag::avgpool2(x),
                                   ag::concat_ch({fs.levels[static_cast<std::size_t>(i + 1)],
                                                  ft.levels[static_cast<std::size_t>(i + 1)]})});
        }
    } else {
        x = ag::concat_ch({fs.levels[4], ft.levels[4]});
    }
    Var h = ag::relu(head1_.forward(x));
    return ag::mul_scalar(ag::global_avg(head2_.forward(h)), 0.01);
}

// --- flow / mask recurrence ---

RecurrentDecoder::RecurrentDecoder(nn::ParamRegistry& reg, const std::string& prefix,
                                   const NetConfig& cfg, int out_ch, bool sigmoid_out,
                                   std::mt19937_64& rng)
    : out_ch_(out_ch), sigmoid_out_(sigmoid_out) {
    seed_w_ = reg.add_param(prefix + "seed.w", nn::he_uniform({6, out_ch}, 6, rng));
    int fw = cfg.flow_width;
    for (int i = 4; i >= 0; --i) {
        std::string base = prefix + "lvl" + std::to_string(i) + ".";
        Level l;
        int feat_ch = 2 * cfg.enc_widths[static_cast<std::size_t>(i)];
        l.attend = nn::Conv2d(reg, base + "attend", out_ch + feat_ch, fw, 3, 1, 1, rng);
        l.inner = nn::Conv2d(reg, base + "inner", fw, fw, 3, 1, 1, rng);
        l.emit = nn::Conv2d(reg, base + "emit", 2 * fw, out_ch, 3, 1, 1, rng);
        levels_.push_back(std::move(l));
    }
}

Var RecurrentDecoder::forward(const FeaturePyramid& fs, const FeaturePyramid& ft,
                              const Var& pose6, bool training) {
    (void)training;
    // pose-seeded coarsest field, broadcast spatially
    Var seed = ag::matmul(ag::flatten(pose6, {1, 6}), seed_w_);  // {1, out_ch}
    int h4 = fs.levels[4].value().dim(1), w4 = fs.levels[4].value().dim(2);
    Var f = ag::resize_bilinear(ag::flatten(seed, {out_ch_, 1, 1}), h4, w4);

    for (std::size_t k = 0; k < levels_.size(); ++k) {
        int level = 4 - static_cast<int>(k);
        Var u = k == 0 ? f : ag::upsample2(f);
        Var feats = ag::concat_ch({fs.levels[static_cast<std::size_t>(level)],
                                   ft.levels[static_cast<std::size_t>(level)]});
        auto& l = levels_[k];
        Var a = l.attend.forward(ag::concat_ch({u, feats}));
        Var inner = l.inner.forward(a);
        Var r = l.emit.forward(ag::elu(ag::concat_ch({a, inner})));
        f = ag::add(u, ag::mul_scalar(r, 0.1));
    }
    Var full = ag::upsample2(f);
    return sigmoid_out_ ? ag::sigmoid(full) : full;
}

// --- segmentation decoder ---

SegDecoder::SegDecoder(nn::ParamRegistry& reg, const std::string& prefix, const NetConfig& cfg,
                       std::mt19937_64& rng)
    : num_queries_(cfg.num_queries), embed_dim_(cfg.embed_dim) {
    int D = embed_dim_;
    queries_ = reg.add_param(prefix + "queries", nn::he_uniform({num_queries_, D}, D, rng));
    task_embed_ = reg.add_param(prefix + "task_embed", nn::he_uniform({3, D}, D, rng));
    token_proj_ = nn::Conv2d(reg, prefix + "token_proj", cfg.enc_widths[2], D, 1, 1, 0, rng);
    mask_proj_ = nn::Conv2d(reg, prefix + "mask_proj", cfg.enc_widths[1], D, 1, 1, 0, rng);
    mlp1_ = nn::Linear(reg, prefix + "mlp1", D, D, rng);
    mlp2_ = nn::Linear(reg, prefix + "mlp2", D, D, rng);
    cls_head_ = nn::Linear(reg, prefix + "cls", D, cfg.num_classes + 1, rng);
    embed_head_ = nn::Linear(reg, prefix + "embed", D, D, rng);
    mask_head_ = nn::Linear(reg, prefix + "mask", D, D, rng);
    text_embed_ =
        reg.add_param(prefix + "text_embed", nn::he_uniform({cfg.num_classes, D}, D, rng));
}

SegOutput SegDecoder::forward(const FeaturePyramid& f, const std::string& task, bool training) {
    (void)training;
    int ti = task_index(task);
    int D = embed_dim_;

    Var tok = token_proj_.forward(f.levels[2]);  // {D, H/8, W/8}
    int n = tok.value().dim(1) * tok.value().dim(2);
    Var tokens = ag::transpose(ag::flatten(tok, {D, n}));  // {N, D}

    Var trow = ag::flatten(
        ag::slice_ch(ag::flatten(task_embed_, {3, D, 1}), ti, 1), {D});
    Var q = ag::add_row_bcast(queries_, trow);

    double scale = 1.0 / std::sqrt(static_cast<double>(D));
    for (int round = 0; round < 2; ++round) {
        Var attn = ag::softmax_rows(
            ag::mul_scalar(ag::matmul(q, ag::transpose(tokens)), scale));
        q = ag::add(q, ag::matmul(attn, tokens));
        q = ag::add(q, mlp2_.forward(ag::relu(mlp1_.forward(q))));
    }

    SegOutput out;
    out.task = task;
    out.class_logits = cls_head_.forward(q);
    out.query_embeddings = embed_head_.forward(q);

    Var mf = mask_proj_.forward(f.levels[1]);  // {D, H/4, W/4}
    int mh = mf.value().dim(1), mw = mf.value().dim(2);
    Var logits = ag::matmul(mask_head_.forward(q), ag::flatten(mf, {D, mh * mw}));
    out.mask_logits = ag::flatten(logits, {num_queries_, mh, mw});
    return out;
}

// --- steering head ---

SteeringHead::SteeringHead(nn::ParamRegistry& reg, const std::string& prefix,
                           const NetConfig& cfg, std::mt19937_64& rng)
    : pos_enc_(cfg.steering_pos_enc) {
    int S = cfg.steer_dim;
    query_ = reg.add_param(prefix + "query", nn::he_uniform({1, S}, S, rng));
    frame_embed_ = reg.add_param(prefix + "frame_embed", nn::he_uniform({16, S}, S, rng));
    token_proj_ = nn::Linear(reg, prefix + "token_proj", cfg.enc_widths[4], S, rng);
    out_ = nn::Linear(reg, prefix + "out", S, 1, rng);
    int C = cfg.enc_widths[4];
    tok_mu_ = std::make_unique<Tensor>(std::vector<int>{C});
    tok_isig_ = std::make_unique<Tensor>(std::vector<int>{C});
    for (auto& v : tok_isig_->data) v = 1.0;
    reg.add_buffer(prefix + "token_mu", tok_mu_.get());
    reg.add_buffer(prefix + "token_isig", tok_isig_.get());
}

void SteeringHead::set_token_norm(const Tensor& mean, const Tensor& inv_std) {
    if (mean.shape != tok_mu_->shape || inv_std.shape != tok_isig_->shape)
        throw std::invalid_argument("token norm shape mismatch");
    *tok_mu_ = mean;
    *tok_isig_ = inv_std;
}

Var SteeringHead::forward(const std::vector<FeaturePyramid>& frames, bool training) {
    (void)training;
    if (frames.size() != 16) throw std::invalid_argument("steering head expects 16 frames");
    int S = query_.value().dim(1);

    std::vector<Var> flat_tokens;
    int per_frame = 0;
    for (std::size_t fidx = 0; fidx < frames.size(); ++fidx) {
        Var c = frames[fidx].levels[4];  // {C, h, w}
        int C = c.value().dim(0);
        int h = c.value().dim(1), w = c.value().dim(2);
        per_frame = h * w;
        c = ag::mul(ag::sub(c, ag::broadcast_ch(Var::constant(*tok_mu_), C, h, w)),
                    ag::broadcast_ch(Var::constant(*tok_isig_), C, h, w));
        Var t = token_proj_.forward(ag::transpose(ag::flatten(c, {C, per_frame})));
        if (pos_enc_) {
            Var row = ag::flatten(ag::slice_ch(ag::flatten(frame_embed_, {16, S, 1}),
                                               static_cast<int>(fidx), 1),
                                  {S});
            t = ag::add_row_bcast(t, row);
        }
        flat_tokens.push_back(ag::flatten(t, {per_frame * S, 1, 1}));
    }
    Var tokens = ag::flatten(ag::concat_ch(flat_tokens),
                             {16 * per_frame, S});  // {16*hw, S}

    Var attn = ag::softmax_rows(ag::mul_scalar(ag::matmul(query_, ag::transpose(tokens)),
                                               1.0 / std::sqrt(static_cast<double>(S))));
    Var pooled = ag::matmul(attn, tokens);  // {1, S}
    return ag::flatten(out_.forward(pooled), {1});
}

// --- model / teacher assembly ---

Model::Model(NetConfig cfg_in, std::uint64_t seed) : cfg(std::move(cfg_in)) {
    cfg.validate();
    cfg.init_seed = seed;
    std::mt19937_64 rng(seed);
    encoder = Encoder(reg, "enc.", cfg, rng);
    depth = DepthDecoder(reg, "depth.", cfg, rng);
    pose = PoseDecoder(reg, "pose.", cfg, rng);
    flow = RecurrentDecoder(reg, "flow.", cfg, 3, false, rng);
    mask = RecurrentDecoder(reg, "mask.", cfg, 1, true, rng);
    seg = SegDecoder(reg, "seg.", cfg, rng);
    steering = SteeringHead(reg, "steer.", cfg, rng);
}

const std::vector<std::string>& Model::component_names() {
    static const std::vector<std::string> names = {"encoder", "depth", "pose", "flow",
                                                   "mask", "seg", "steering"};
    return names;
}

std::vector<std::string> Model::component_prefixes(const std::vector<std::string>& components) {
    std::vector<std::string> prefixes;
    for (const auto& c : components) {
        if (c == "encoder") prefixes.push_back("enc.");
        else if (c == "depth") prefixes.push_back("depth.");
        else if (c == "pose") prefixes.push_back("pose.");
        else if (c == "flow") prefixes.push_back("flow.");
        else if (c == "mask") prefixes.push_back("mask.");
        else if (c == "seg") prefixes.push_back("seg.");
        else if (c == "steering") prefixes.push_back("steer.");
        else throw std::invalid_argument("unknown component: " + c);
    }
    return prefixes;
}

std::vector<std::string> Model::param_names(const std::vector<std::string>& components) const {
    return names_with_prefixes(reg, component_prefixes(components));
}

void Model::save(const std::filesystem::path& path) const {
    nlohmann::json meta = cfg.to_json();
    meta["kind"] = "model";
    save_registry(reg, meta, path);
}

void Model::load_values(const std::filesystem::path& path) { load_registry(reg, path); }

Model Model::load(const std::filesystem::path& path) {
    TensorArchive arc = TensorArchive::load(path);
    NetConfig cfg = NetConfig::from_json(arc.meta);
    Model m(cfg, cfg.init_seed);
    m.load_values(path);
    return m;
}

Teacher::Teacher(NetConfig cfg_in, std::uint64_t seed) : cfg(std::move(cfg_in)) {
    cfg.validate();
    cfg.init_seed = seed;
    std::mt19937_64 rng(seed);
    enc_depth_seg = Encoder(reg, "enc_ds.", cfg, rng);
    enc_pose = Encoder(reg, "enc_pose.", cfg, rng);
    enc_flow = Encoder(reg, "enc_fm.", cfg, rng);
    depth = DepthDecoder(reg, "depth.", cfg, rng);
    seg = SegDecoder(reg, "seg.", cfg, rng);
    pose = PoseDecoder(reg, "pose.", cfg, rng);
    flow = RecurrentDecoder(reg, "flow.", cfg, 3, false, rng);
    mask = RecurrentDecoder(reg, "mask.", cfg, 1, true, rng);
}

std::vector<std::string> Teacher::component_prefixes(const std::vector<std::string>& components) {
    std::vector<std::string> prefixes;
    for (const auto& c : components) {
        if (c == "enc_depth_seg") prefixes.push_back("enc_ds.");
        else if (c == "enc_pose") prefixes.push_back("enc_pose.");
        else if (c == "enc_flow") prefixes.push_back("enc_fm.");
        else if (c == "depth") prefixes.push_back("depth.");
        else if (c == "seg") prefixes.push_back("seg.");
        else if (c == "pose") prefixes.push_back("pose.");
        else if (c == "flow") prefixes.push_back("flow.");
        else if (c == "mask") prefixes.push_back("mask.");
        else throw std::invalid_argument("unknown teacher component: " + c);
    }
    return prefixes;
}

std::vector<std::string> Teacher::param_names(const std::vector<std::string>& components) const {
    return names_with_prefixes(reg, component_prefixes(components));
}

void Teacher::save(const std::filesystem::path& path) const {
    nlohmann::json meta = cfg.to_json();
    meta["kind"] = "teacher";
    save_registry(reg, meta, path);
}

void Teacher::load_values(const std::filesystem::path& path) { load_registry(reg, path); }

Teacher Teacher::load(const std::filesystem::path& path) {
    TensorArchive arc = TensorArchive::load(path);
    NetConfig cfg = NetConfig::from_json(arc.meta);
    Teacher t(cfg, cfg.init_seed);
    t.load_values(path);
    return t;
}

}  // namespace uniperc::nets
