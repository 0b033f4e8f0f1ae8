#include "dfseg/blocks.hpp"

#include <stdexcept>

namespace dfseg {

TensorPtr ParamStore::add(const std::string& name, std::vector<int> shape, InitKind init,
                          int fan_in) {
    if (entries_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto t = Tensor::zeros(std::move(shape), true);
    if (init == InitKind::ones) std::fill(t->values.begin(), t->values.end(), 1.0);
    names_.push_back(name);
    entries_[name] = {t, init, fan_in};
    return t;
}

TensorPtr ParamStore::find(const std::string& name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : it->second.tensor;
}

TensorPtr ParamStore::at(const std::string& name) const {
    auto t = find(name);
    if (!t) throw std::out_of_range("unknown parameter: " + name);
    return t;
}

InitKind ParamStore::init_kind(const std::string& name) const {
    return entries_.at(name).init;
}

int ParamStore::fan_in(const std::string& name) const { return entries_.at(name).fan_in; }

std::int64_t ParamStore::total_values() const {
    std::int64_t n = 0;
    for (const auto& name : names_) n += entries_.at(name).tensor->numel();
    return n;
}

void ParamStore::zero_grad() {
    for (const auto& name : names_) {
        auto& t = entries_.at(name).tensor;
        t->ensure_grad();
        t->zero_grad();
    }
}

ConvNormAct::ConvNormAct(ParamStore& ps, const std::string& prefix, int cin, int cout, int kernel,
                         Dims3 stride)
    : stride_(stride) {
    int pad = kernel / 2;
    pad_ = {pad, pad, pad};
    int fan = cin * kernel * kernel * kernel;
    w_ = ps.add(prefix + ".w", {cout, cin, kernel, kernel, kernel}, InitKind::kaiming, fan);
    b_ = ps.add(prefix + ".b", {cout}, InitKind::zeros);
    gamma_ = ps.add(prefix + ".gamma", {cout}, InitKind::ones);
    beta_ = ps.add(prefix + ".beta", {cout}, InitKind::zeros);
}

TensorPtr ConvNormAct::forward(const TensorPtr& x) const {
    auto y = conv3d(x, w_, b_, stride_, pad_);
    y = instance_norm(y, gamma_, beta_, kNormEps);
    return leaky_relu(y, kLeakySlope);
}

ResidualStage::ResidualStage(ParamStore& ps, const std::string& prefix, const StageSpec& spec)
    : cin_(spec.channels_in) {
    c1_ = ConvNormAct(ps, prefix + ".c1", spec.channels_in, spec.channels_out, 3, {1, 1, 1});
    c2_ = ConvNormAct(ps, prefix + ".c2", spec.channels_out, spec.channels_out, 3, {1, 1, 1});
    if (spec.channels_in != spec.channels_out) {
        proj_w_ = ps.add(prefix + ".proj.w", {spec.channels_out, spec.channels_in, 1, 1, 1},
                         InitKind::kaiming, spec.channels_in);
        proj_b_ = ps.add(prefix + ".proj.b", {spec.channels_out}, InitKind::zeros);
    }
}

TensorPtr ResidualStage::forward(const TensorPtr& x) const {
    if (x->shape.size() != 5 || x->shape[1] != cin_) {
        throw std::invalid_argument("residual_stage: expected " + std::to_string(cin_) +
                                    " input channels, got " + shape_str(x->shape));
    }
    auto y = c2_.forward(c1_.forward(x));
    auto skip = proj_w_ ? conv3d(x, proj_w_, proj_b_, {1, 1, 1}, {0, 0, 0}) : x;
    return add(y, skip);
}

DownPool::DownPool(ParamStore& ps, const std::string& prefix, const StageSpec& spec)
    : pool_(spec.pool) {
    for (int a = 0; a < 3; ++a) {
        if (spec.pool[a] != 1 && spec.pool[a] != 2) {
            throw std::invalid_argument("down_pool: pool strides must be 1 or 2");
        }
    }
    c_ = ConvNormAct(ps, prefix + ".c", spec.channels_in, spec.channels_out, 3, spec.pool);
}

TensorPtr DownPool::forward(const TensorPtr& x) const {
    for (int a = 0; a < 3; ++a) {
        if (x->shape[2 + a] % pool_[a] != 0) {
            throw std::invalid_argument("down_pool: spatial dims " + shape_str(x->shape) +
                                        " not divisible by pool stride on axis " +
                                        std::to_string(a));
        }
    }
    return c_.forward(x);
}

UpSample::UpSample(ParamStore& ps, const std::string& prefix, int cin, int cout, Dims3 stride)
    : stride_(stride) {
    // kernel == stride doubles pooled axes exactly; every output voxel sees
    // cin inputs, which is the fan-in for initialization
    w_ = ps.add(prefix + ".wt", {cin, cout, stride[0], stride[1], stride[2]}, InitKind::kaiming,
                cin);
    b_ = ps.add(prefix + ".bt", {cout}, InitKind::zeros);
    post_ = ResidualStage(ps, prefix + ".res", StageSpec{2 * cout, cout, {1, 1, 1}});
}

TensorPtr UpSample::forward(const TensorPtr& x, const TensorPtr& skip) const {
    auto up = conv3d_transposed(x, w_, b_, stride_);
    for (int a = 0; a < 3; ++a) {
        if (up->shape[2 + a] != skip->shape[2 + a]) {
            throw std::invalid_argument("up_sample: upsampled " + shape_str(up->shape) +
                                        " does not match skip " + shape_str(skip->shape));
        }
    }
    return post_.forward(concat_channel(up, skip));
}

SupervisionHead::SupervisionHead(ParamStore& ps, const std::string& prefix, int cin,
                                 int num_classes) {
    w_ = ps.add(prefix + ".w", {num_classes, cin, 1, 1, 1}, InitKind::kaiming, cin);
    b_ = ps.add(prefix + ".b", {num_classes}, InitKind::zeros);
}

TensorPtr SupervisionHead::forward(const TensorPtr& x) const {
    return conv3d(x, w_, b_, {1, 1, 1}, {0, 0, 0});
}

CrossAttention::CrossAttention(ParamStore& ps, const std::string& prefix,
                               const CrossAttentionSpec& spec)
    : channels_(spec.channels) {
    if (spec.reduction < 1 || spec.channels % spec.reduction != 0) {
        throw std::invalid_argument("cross_attention: channels " + std::to_string(spec.channels) +
                                    " not divisible by reduction " +
                                    std::to_string(spec.reduction));
    }
    int hidden = spec.channels / spec.reduction;
    fc1_w_ = ps.add(prefix + ".fc1.w", {hidden, 2 * spec.channels}, InitKind::kaiming,
                    2 * spec.channels);
    fc1_b_ = ps.add(prefix + ".fc1.b", {hidden}, InitKind::zeros);
    fc2_w_ = ps.add(prefix + ".fc2.w", {spec.channels, hidden}, InitKind::kaiming, hidden);
    fc2_b_ = ps.add(prefix + ".fc2.b", {spec.channels}, InitKind::zeros);
    sp_w_ = ps.add(prefix + ".sp.w", {1, 2, 7, 7, 7}, InitKind::kaiming, 2 * 343);
    sp_b_ = ps.add(prefix + ".sp.b", {1}, InitKind::zeros);
}

TensorPtr CrossAttention::forward(const TensorPtr& f_mid, const TensorPtr& f_pre) const {
    if (f_mid->shape != f_pre->shape) {
        throw std::invalid_argument("cross_attention: stream shapes differ, " +
                                    shape_str(f_mid->shape) + " vs " + shape_str(f_pre->shape));
    }
    if (f_mid->shape[1] != channels_) {
        throw std::invalid_argument("cross_attention: expected " + std::to_string(channels_) +
                                    " channels, got " + shape_str(f_mid->shape));
    }
    auto pooled = global_avg_pool(concat_channel(f_mid, f_pre));
    auto hidden = leaky_relu(fully_connected(pooled, fc1_w_, fc1_b_), kLeakySlope);
    auto a_c = sigmoid(fully_connected(hidden, fc2_w_, fc2_b_));
    auto gated = mul_channel_gate(f_pre, a_c);
    auto maps = concat_channel(channel_mean(gated), channel_max(gated));
    auto a_s = sigmoid(conv3d(maps, sp_w_, sp_b_, {1, 1, 1}, {3, 3, 3}));
    return add(f_mid, mul_spatial_gate(gated, a_s));
}

}  // namespace dfseg
