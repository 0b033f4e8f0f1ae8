#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dfseg/blocks.hpp"
#include "dfseg/rng.hpp"
#include "dfseg/util.hpp"

namespace dfseg {

enum class Arch { basic, dualflow };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);

struct ModelConfig {
    Arch arch = Arch::basic;
    int in_channels = 1;  // basic arch: 1 (image only) or 3 (image + prior image + prior mask)
    int num_classes = 3;
    std::vector<int> channels;  // per resolution stage
    std::vector<Dims3> pools;   // between consecutive stages, entries in {1,2}
    int deep_supervision_levels = 4;
    int attn_reduction = 4;
    int primary_channels = 1;    // dualflow stream widths
    int secondary_channels = 2;

    int num_stages() const { return static_cast<int>(channels.size()); }
    void validate() const;
    std::string canonical() const;
    static ModelConfig from_kv(const KvConfig& kv);

    // Six stages; stride-2 pooling five times on y/x and three times on z.
    static ModelConfig paper_scale(Arch arch, int in_channels);
    // Small ladder base, base*2, ... capped at 320.
    static ModelConfig toy(Arch arch, int in_channels, int stages, int base_channels,
                           std::vector<Dims3> pools, int ds_levels);
};

// Realized network. Parameters live in a ParamStore; forward passes are
// const and safe to run concurrently on separate graphs.
class Model {
  public:
    explicit Model(ModelConfig cfg);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::int64_t parameter_count() const { return params_.total_values(); }

    // Logits per supervision level, d = 0 (full resolution) first.
    std::vector<TensorPtr> forward(const TensorPtr& x) const;
    std::vector<TensorPtr> forward_dual(const TensorPtr& primary,
                                        const TensorPtr& secondary) const;
    // Encoder A + decoder with the attention blocks bypassed; the network the
    // dualflow degrades to when the secondary features vanish.
    std::vector<TensorPtr> forward_primary_only(const TensorPtr& primary) const;

    // Dispatch on arch: channels of `x` are split into primary/secondary for
    // the dualflow case.
    std::vector<TensorPtr> forward_any(const TensorPtr& x) const;

  private:
    std::vector<TensorPtr> decode(const std::vector<TensorPtr>& skips) const;
    std::vector<TensorPtr> encode_primary(const TensorPtr& x, const TensorPtr* secondary) const;

    ModelConfig cfg_;
    ParamStore params_;
    std::vector<ResidualStage> enc_a_;
    std::vector<DownPool> down_a_;
    std::vector<ResidualStage> enc_b_;
    std::vector<DownPool> down_b_;
    std::vector<CrossAttention> attn_;
    std::vector<UpSample> dec_;
    std::vector<SupervisionHead> heads_;
};

// Kaiming fan-in normals for conv/fc weights, zeros/ones for biases and norm
// affines; every value is rounded through f32 so checkpoints are exact.
void init_parameters(Model& model, std::uint64_t seed);

struct TrainerState {
    bool present = false;
    std::uint32_t epoch = 0;
    double best_metric = -1.0;
    Rng::State rng{};
    std::vector<std::vector<double>> velocity;  // aligned with ParamStore order
};

// Named-parameter container, f32 little-endian payloads, versioned header.
void save_checkpoint(const std::string& path, const Model& model, const KvConfig& run_config,
                     const TrainerState* trainer = nullptr);

struct LoadedCheckpoint {
    KvConfig run_config;
    std::unique_ptr<Model> model;
    TrainerState trainer;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Warm start: copies parameters whose name and shape match; returns how many
// tensors were applied.
int load_pretrained(Model& model, const std::string& path);

// Digest over the semantic keys (paths excluded) of a run config.
std::uint64_t config_digest(const KvConfig& kv);

}  // namespace dfseg
