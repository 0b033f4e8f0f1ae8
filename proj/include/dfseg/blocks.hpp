#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dfseg/ops.hpp"
#include "dfseg/tensor.hpp"
#include "dfseg/util.hpp"

namespace dfseg {

enum class InitKind { kaiming, zeros, ones };

// Named parameter collection. Iteration order is registration order, which
// fixes checkpoint layout and the initialization stream.
class ParamStore {
  public:
    TensorPtr add(const std::string& name, std::vector<int> shape, InitKind init, int fan_in = 0);
    TensorPtr find(const std::string& name) const;  // null when absent
    const std::vector<std::string>& names() const { return names_; }
    TensorPtr at(const std::string& name) const;
    InitKind init_kind(const std::string& name) const;
    int fan_in(const std::string& name) const;
    std::size_t size() const { return names_.size(); }
    std::int64_t total_values() const;
    void zero_grad();

  private:
    struct Entry {
        TensorPtr tensor;
        InitKind init;
        int fan_in;
    };
    std::vector<std::string> names_;
    std::unordered_map<std::string, Entry> entries_;
};

struct StageSpec {
    int channels_in = 0;
    int channels_out = 0;
    Dims3 pool = {1, 1, 1};  // strides in {1,2}
};

struct CrossAttentionSpec {
    int channels = 0;
    int reduction = 4;
};

// conv(k3, pad1 unless 1x1x1) -> instance_norm -> leaky_relu
class ConvNormAct {
  public:
    ConvNormAct() = default;
    ConvNormAct(ParamStore& ps, const std::string& prefix, int cin, int cout, int kernel,
                Dims3 stride);
    TensorPtr forward(const TensorPtr& x) const;

  private:
    TensorPtr w_, b_, gamma_, beta_;
    Dims3 stride_{1, 1, 1};
    Dims3 pad_{0, 0, 0};
};

// two ConvNormAct layers plus a skip from stage input to stage output;
// 1x1x1 projection when the channel count changes
class ResidualStage {
  public:
    ResidualStage() = default;
    ResidualStage(ParamStore& ps, const std::string& prefix, const StageSpec& spec);
    TensorPtr forward(const TensorPtr& x) const;

  private:
    ConvNormAct c1_, c2_;
    TensorPtr proj_w_, proj_b_;
    int cin_ = 0;
};

// strided conv -> instance_norm -> leaky_relu; pooled axes must divide evenly
class DownPool {
  public:
    DownPool() = default;
    DownPool(ParamStore& ps, const std::string& prefix, const StageSpec& spec);
    TensorPtr forward(const TensorPtr& x) const;

  private:
    ConvNormAct c_;
    Dims3 pool_{1, 1, 1};
};

// transposed conv (kernel == stride) -> concat with skip -> ResidualStage
class UpSample {
  public:
    UpSample() = default;
    UpSample(ParamStore& ps, const std::string& prefix, int cin, int cout, Dims3 stride);
    TensorPtr forward(const TensorPtr& x, const TensorPtr& skip) const;

  private:
    TensorPtr w_, b_;
    ResidualStage post_;
    Dims3 stride_{1, 1, 1};
};

// 1x1x1 conv to the class logits
class SupervisionHead {
  public:
    SupervisionHead() = default;
    SupervisionHead(ParamStore& ps, const std::string& prefix, int cin, int num_classes);
    TensorPtr forward(const TensorPtr& x) const;

  private:
    TensorPtr w_, b_;
};

// Channel gate from the pooled concat of both streams, spatial gate from
// mean/max maps of the gated secondary, residual add into the primary.
// f_pre == 0 collapses to the identity on f_mid for any parameters.
class CrossAttention {
  public:
    CrossAttention() = default;
    CrossAttention(ParamStore& ps, const std::string& prefix, const CrossAttentionSpec& spec);
    TensorPtr forward(const TensorPtr& f_mid, const TensorPtr& f_pre) const;

  private:
    TensorPtr fc1_w_, fc1_b_, fc2_w_, fc2_b_, sp_w_, sp_b_;
    int channels_ = 0;
};

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

}  // namespace dfseg
