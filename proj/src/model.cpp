#include "dfseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace dfseg {

std::string arch_name(Arch a) { return a == Arch::basic ? "basic" : "dualflow"; }

Arch arch_from_name(const std::string& s) {
    if (s == "basic") return Arch::basic;
    if (s == "dualflow") return Arch::dualflow;
    throw std::invalid_argument("unknown arch '" + s + "' (expected basic|dualflow)");
}

void ModelConfig::validate() const {
    if (channels.size() < 2) throw std::invalid_argument("model config: need at least 2 stages");
    for (int c : channels) {
        if (c <= 0) throw std::invalid_argument("model config: channels must be positive");
    }
    if (pools.size() != channels.size() - 1) {
        throw std::invalid_argument("model config: expected " +
                                    std::to_string(channels.size() - 1) + " pool entries, got " +
                                    std::to_string(pools.size()));
    }
    for (const auto& p : pools) {
        for (int a = 0; a < 3; ++a) {
            if (p[a] != 1 && p[a] != 2) {
                throw std::invalid_argument("model config: pool strides must be 1 or 2");
            }
        }
    }
    if (deep_supervision_levels < 1 || deep_supervision_levels > num_stages()) {
        throw std::invalid_argument("model config: deep_supervision_levels must be in [1, stages]");
    }
    if (arch == Arch::basic && in_channels != 1 && in_channels != 3) {
        throw std::invalid_argument("model config: basic arch takes 1 or 3 input channels");
    }
    if (arch == Arch::dualflow) {
        if (primary_channels < 1 || secondary_channels < 1) {
            throw std::invalid_argument("model config: dualflow stream widths must be positive");
        }
        for (int c : channels) {
            if (c % attn_reduction != 0) {
                throw std::invalid_argument(
                    "model config: stage channels must be divisible by attn_reduction");
            }
        }
    }
    if (num_classes < 2) throw std::invalid_argument("model config: need >= 2 classes");
}

std::string ModelConfig::canonical() const {
    KvConfig kv;
    kv.set("model.arch", arch_name(arch));
    kv.set("model.in_channels", std::to_string(in_channels));
    kv.set("model.num_classes", std::to_string(num_classes));
    std::string ch;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (i) ch += ",";
        ch += std::to_string(channels[i]);
    }
    kv.set("model.channels", ch);
    std::string ps;
    for (std::size_t i = 0; i < pools.size(); ++i) {
        if (i) ps += ";";
        ps += std::to_string(pools[i][0]) + "," + std::to_string(pools[i][1]) + "," +
              std::to_string(pools[i][2]);
    }
    kv.set("model.pools", ps);
    kv.set("model.deep_supervision_levels", std::to_string(deep_supervision_levels));
    kv.set("model.attn_reduction", std::to_string(attn_reduction));
    kv.set("model.primary_channels", std::to_string(primary_channels));
    kv.set("model.secondary_channels", std::to_string(secondary_channels));
    return kv.canonical();
}

ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
    ModelConfig cfg;
    cfg.arch = arch_from_name(kv.get_or("model.arch", "basic"));
    cfg.in_channels = static_cast<int>(kv.get_int("model.in_channels", 1));
    cfg.num_classes = static_cast<int>(kv.get_int("model.num_classes", 3));
    cfg.channels.clear();
    for (const auto& tok : split(kv.get("model.channels"), ',')) {
        cfg.channels.push_back(std::stoi(tok));
    }
    cfg.pools.clear();
    for (const auto& group : split(kv.get("model.pools"), ';')) {
        auto parts = split(group, ',');
        if (parts.size() != 3) throw std::invalid_argument("model.pools: expected z,y,x triples");
        cfg.pools.push_back({std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])});
    }
    cfg.deep_supervision_levels =
        static_cast<int>(kv.get_int("model.deep_supervision_levels", 4));
    cfg.attn_reduction = static_cast<int>(kv.get_int("model.attn_reduction", 4));
    cfg.primary_channels = static_cast<int>(kv.get_int("model.primary_channels", 1));
    cfg.secondary_channels = static_cast<int>(kv.get_int("model.secondary_channels", 2));
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::paper_scale(Arch arch, int in_channels) {
    ModelConfig cfg;
    cfg.arch = arch;
    cfg.in_channels = in_channels;
    cfg.channels = {32, 64, 128, 256, 320, 320};
    cfg.pools = {{1, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}};
    cfg.deep_supervision_levels = 4;
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::toy(Arch arch, int in_channels, int stages, int base_channels,
                             std::vector<Dims3> pools, int ds_levels) {
    ModelConfig cfg;
    cfg.arch = arch;
    cfg.in_channels = in_channels;
    for (int i = 0; i < stages; ++i) {
        cfg.channels.push_back(std::min(base_channels << i, 320));
    }
    cfg.pools = std::move(pools);
    cfg.deep_supervision_levels = ds_levels;
    cfg.validate();
    return cfg;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int S = cfg_.num_stages();
    const int in_a = cfg_.arch == Arch::basic ? cfg_.in_channels : cfg_.primary_channels;

    for (int i = 0; i < S; ++i) {
        int cin = i == 0 ? in_a : cfg_.channels[i];
        enc_a_.emplace_back(params_, "enc_a." + std::to_string(i),
                            StageSpec{cin, cfg_.channels[i], {1, 1, 1}});
        if (i + 1 < S) {
            down_a_.emplace_back(params_, "down_a." + std::to_string(i),
                                 StageSpec{cfg_.channels[i], cfg_.channels[i + 1], cfg_.pools[i]});
        }
    }
    if (cfg_.arch == Arch::dualflow) {
        for (int i = 0; i < S; ++i) {
            int cin = i == 0 ? cfg_.secondary_channels : cfg_.channels[i];
            enc_b_.emplace_back(params_, "enc_b." + std::to_string(i),
                                StageSpec{cin, cfg_.channels[i], {1, 1, 1}});
            if (i + 1 < S) {
                down_b_.emplace_back(params_, "down_b." + std::to_string(i),
                                     StageSpec{cfg_.channels[i], cfg_.channels[i + 1],
                                               cfg_.pools[i]});
            }
            attn_.emplace_back(params_, "attn." + std::to_string(i),
                               CrossAttentionSpec{cfg_.channels[i], cfg_.attn_reduction});
        }
    }
    for (int i = 0; i < S - 1; ++i) {
        dec_.emplace_back(params_, "dec." + std::to_string(i), cfg_.channels[i + 1],
                          cfg_.channels[i], cfg_.pools[i]);
    }
    for (int d = 0; d < cfg_.deep_supervision_levels; ++d) {
        heads_.emplace_back(params_, "head." + std::to_string(d), cfg_.channels[d],
                            cfg_.num_classes);
    }
}

std::vector<TensorPtr> Model::encode_primary(const TensorPtr& x, const TensorPtr* secondary) const {
    const int S = cfg_.num_stages();
    std::vector<TensorPtr> skips(S);
    TensorPtr b;
    if (secondary) b = enc_b_[0].forward(*secondary);
    TensorPtr a = enc_a_[0].forward(x);
    skips[0] = secondary ? attn_[0].forward(a, b) : a;
    for (int i = 1; i < S; ++i) {
        a = enc_a_[i].forward(down_a_[i - 1].forward(skips[i - 1]));
        if (secondary) {
            b = enc_b_[i].forward(down_b_[i - 1].forward(b));
            skips[i] = attn_[i].forward(a, b);
        } else {
            skips[i] = a;
        }
    }
    return skips;
}

std::vector<TensorPtr> Model::decode(const std::vector<TensorPtr>& skips) const {
    const int S = cfg_.num_stages();
    std::vector<TensorPtr> dec(S);
    dec[S - 1] = skips[S - 1];
    for (int i = S - 2; i >= 0; --i) dec[i] = dec_[i].forward(dec[i + 1], skips[i]);
    std::vector<TensorPtr> logits;
    for (int d = 0; d < cfg_.deep_supervision_levels; ++d) {
        logits.push_back(heads_[d].forward(dec[d]));
    }
    return logits;
}

std::vector<TensorPtr> Model::forward(const TensorPtr& x) const {
    if (cfg_.arch != Arch::basic) {
        throw std::invalid_argument("forward(x): model is not the basic arch; use forward_dual");
    }
    if (x->shape.size() != 5 || x->shape[1] != cfg_.in_channels) {
        throw std::invalid_argument("forward: expected " + std::to_string(cfg_.in_channels) +
                                    " input channels, got " + shape_str(x->shape));
    }
    return decode(encode_primary(x, nullptr));
}

std::vector<TensorPtr> Model::forward_dual(const TensorPtr& primary,
                                           const TensorPtr& secondary) const {
    if (cfg_.arch != Arch::dualflow) {
        throw std::invalid_argument("forward_dual: model is not the dualflow arch");
    }
    if (primary->shape[1] != cfg_.primary_channels ||
        secondary->shape[1] != cfg_.secondary_channels) {
        throw std::invalid_argument("forward_dual: stream channel mismatch, primary " +
                                    shape_str(primary->shape) + " secondary " +
                                    shape_str(secondary->shape));
    }
    return decode(encode_primary(primary, &secondary));
}

std::vector<TensorPtr> Model::forward_primary_only(const TensorPtr& primary) const {
    if (cfg_.arch != Arch::dualflow) {
        throw std::invalid_argument("forward_primary_only: model is not the dualflow arch");
    }
    return decode(encode_primary(primary, nullptr));
}

std::vector<TensorPtr> Model::forward_any(const TensorPtr& x) const {
    if (cfg_.arch == Arch::basic) return forward(x);
    const int cp = cfg_.primary_channels, cs = cfg_.secondary_channels;
    if (x->shape[1] != cp + cs) {
        throw std::invalid_argument("forward_any: expected " + std::to_string(cp + cs) +
                                    " stacked channels, got " + shape_str(x->shape));
    }
    // split channels into the two streams
    const int N = x->shape[0];
    const std::int64_t V = static_cast<std::int64_t>(x->shape[2]) * x->shape[3] * x->shape[4];
    auto prim = Tensor::zeros({N, cp, x->shape[2], x->shape[3], x->shape[4]});
    auto sec = Tensor::zeros({N, cs, x->shape[2], x->shape[3], x->shape[4]});
    for (int n = 0; n < N; ++n) {
        std::copy_n(x->values.data() + (static_cast<std::int64_t>(n) * (cp + cs)) * V, cp * V,
                    prim->values.data() + static_cast<std::int64_t>(n) * cp * V);
        std::copy_n(x->values.data() + (static_cast<std::int64_t>(n) * (cp + cs) + cp) * V, cs * V,
                    sec->values.data() + static_cast<std::int64_t>(n) * cs * V);
    }
    return forward_dual(prim, sec);
}

void init_parameters(Model& model, std::uint64_t seed) {
    Rng rng(seed);
    auto& ps = model.params();
    for (const auto& name : ps.names()) {
        auto t = ps.at(name);
        switch (ps.init_kind(name)) {
            case InitKind::zeros:
                std::fill(t->values.begin(), t->values.end(), 0.0);
                break;
            case InitKind::ones:
                std::fill(t->values.begin(), t->values.end(), 1.0);
                break;
            case InitKind::kaiming: {
                int fan = std::max(1, ps.fan_in(name));
                double std_dev = std::sqrt(2.0 / static_cast<double>(fan));
                for (auto& v : t->values) {
                    v = static_cast<double>(static_cast<float>(rng.normal(0.0, std_dev)));
                }
                break;
            }
        }
    }
}

namespace {

constexpr char kMagic[4] = {'D', 'F', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
    store_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    store_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) store_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values) store_le<float>(out, static_cast<float>(v));
}

}  // namespace

std::uint64_t config_digest(const KvConfig& kv) {
    KvConfig semantic;
    for (const auto& line : split(kv.canonical(), '\n')) {
        auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        if (key == "data_dir" || key == "out_dir" || key == "match_ref") continue;
        semantic.set(key, line.substr(eq + 3));
    }
    return fnv1a64(semantic.canonical());
}

void save_checkpoint(const std::string& path, const Model& model, const KvConfig& run_config,
                     const TrainerState* trainer) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    store_le<std::uint16_t>(out, kVersion);
    store_le<std::uint64_t>(out, config_digest(run_config));
    std::string cfg = run_config.canonical();
    store_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());
    store_le<std::uint8_t>(out, trainer ? 1 : 0);
    if (trainer) {
        store_le<std::uint32_t>(out, trainer->epoch);
        store_le<double>(out, trainer->best_metric);
        for (auto s : trainer->rng.s) store_le<std::uint64_t>(out, s);
        store_le<std::uint8_t>(out, trainer->rng.has_spare ? 1 : 0);
        store_le<double>(out, trainer->rng.spare);
    }
    const auto& ps = model.params();
    store_le<std::uint32_t>(out, static_cast<std::uint32_t>(ps.size()));
    for (const auto& name : ps.names()) put_tensor(out, name, *ps.at(name));
    if (trainer) {
        if (trainer->velocity.size() != ps.size()) {
            throw std::runtime_error("checkpoint: velocity buffers out of sync with parameters");
        }
        for (std::size_t i = 0; i < ps.names().size(); ++i) {
            for (double v : trainer->velocity[i]) store_le<float>(out, static_cast<float>(v));
        }
    }
    write_file_bytes(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    auto bytes = read_file_bytes(path);
    const std::uint8_t* p = bytes.data();
    const std::uint8_t* end = p + bytes.size();
    auto need = [&](std::size_t n, const char* what) {
        if (static_cast<std::size_t>(end - p) < n) {
            throw std::runtime_error("checkpoint '" + path + "': truncated at " + what);
        }
    };
    need(4 + 2 + 8 + 4, "header");
    if (std::memcmp(p, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint '" + path + "': bad magic");
    }
    p += 4;
    std::uint16_t version = load_le<std::uint16_t>(p);
    p += 2;
    if (version != kVersion) {
        throw std::runtime_error("checkpoint '" + path + "': unsupported version " +
                                 std::to_string(version));
    }
    std::uint64_t digest = load_le<std::uint64_t>(p);
    p += 8;
    std::uint32_t cfg_len = load_le<std::uint32_t>(p);
    p += 4;
    need(cfg_len, "config");
    std::string cfg_text(reinterpret_cast<const char*>(p), cfg_len);
    p += cfg_len;

    LoadedCheckpoint lc;
    lc.run_config = KvConfig::parse(cfg_text);
    if (config_digest(lc.run_config) != digest) {
        throw std::runtime_error("checkpoint '" + path + "': config digest mismatch");
    }
    lc.model = std::make_unique<Model>(ModelConfig::from_kv(lc.run_config));

    need(1, "flags");
    bool has_trainer = *p++ != 0;
    if (has_trainer) {
        need(4 + 8 + 32 + 1 + 8, "trainer state");
        lc.trainer.present = true;
        lc.trainer.epoch = load_le<std::uint32_t>(p);
        p += 4;
        lc.trainer.best_metric = load_le<double>(p);
        p += 8;
        for (auto& s : lc.trainer.rng.s) {
            s = load_le<std::uint64_t>(p);
            p += 8;
        }
        lc.trainer.rng.has_spare = *p++ != 0;
        lc.trainer.rng.spare = load_le<double>(p);
        p += 8;
    }

    need(4, "tensor count");
    std::uint32_t count = load_le<std::uint32_t>(p);
    p += 4;
    auto& ps = lc.model->params();
    if (count != ps.size()) {
        throw std::runtime_error("checkpoint '" + path + "': expected " +
                                 std::to_string(ps.size()) + " tensors, found " +
                                 std::to_string(count));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        need(2, "tensor name");
        std::uint16_t nlen = load_le<std::uint16_t>(p);
        p += 2;
        need(nlen, "tensor name");
        std::string name(reinterpret_cast<const char*>(p), nlen);
        p += nlen;
        need(1, "tensor rank");
        std::uint8_t ndim = *p++;
        need(static_cast<std::size_t>(ndim) * 4, "tensor dims");
        std::vector<int> shape(ndim);
        for (auto& d : shape) {
            d = static_cast<int>(load_le<std::uint32_t>(p));
            p += 4;
        }
        auto t = ps.find(name);
        if (!t) throw std::runtime_error("checkpoint '" + path + "': unknown tensor '" + name + "'");
        if (t->shape != shape) {
            throw std::runtime_error("checkpoint '" + path + "': tensor '" + name +
                                     "' has shape " + shape_str(shape) + ", model expects " +
                                     shape_str(t->shape));
        }
        need(t->values.size() * 4, "tensor payload");
        for (auto& v : t->values) {
            v = static_cast<double>(load_le<float>(p));
            p += 4;
        }
    }
    if (has_trainer) {
        for (const auto& name : ps.names()) {
            auto t = ps.at(name);
            need(t->values.size() * 4, "velocity payload");
            std::vector<double> vel(t->values.size());
            for (auto& v : vel) {
                v = static_cast<double>(load_le<float>(p));
                p += 4;
            }
            lc.trainer.velocity.push_back(std::move(vel));
        }
    }
    if (p != end) {
        throw std::runtime_error("checkpoint '" + path + "': trailing bytes");
    }
    return lc;
}

int load_pretrained(Model& model, const std::string& path) {
    auto lc = load_checkpoint(path);
    int applied = 0;
    auto& dst = model.params();
    const auto& src = lc.model->params();
    for (const auto& name : dst.names()) {
        auto s = src.find(name);
        if (!s) continue;
        auto d = dst.at(name);
        if (s->shape != d->shape) continue;
        d->values = s->values;
        ++applied;
    }
    return applied;
}

}  // namespace dfseg
