#pragma once

// Dual-branch range regressor.
//
// Each branch (log-mel, GCC-PHAT) is a 1x1 stem followed by residual conv
// blocks
//
//   y = x + lambda * norm(conv(relu(norm(conv(x)))))
//
// each followed by 2x2 max-pooling and dropout. For every 3x3 kernel the
// central 2x2 sub-window (rows {1,2} x cols {1,2}) can be tied across the two
// branches. Branch outputs are flattened per frame, concatenated, projected to
// the model width and passed through Conformer blocks; a temporal mean-pool
// and an MLP head produce one range value per segment.

#include "uwloc/features.hpp"
#include "uwloc/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>

namespace uwloc {

struct InputShape {
  Index mel_channels = 0;
  Index gcc_pairs = 0;
  Index frames = 0;
  Index mel_bins = 0;
  Index lags = 0;

  bool operator==(const InputShape&) const = default;
};

InputShape input_shape_of(const FeaturePair& f);

struct NetConfig {
  InputShape input;
  int conv_blocks = 3;
  int base_filters = 16;
  double dropout_p = 0.2;
  int conformer_blocks = 2;
  int model_dim = 64;
  int attn_heads = 4;
  int ff_expansion = 4;
  int conv_kernel_temporal = 7;
  int head_hidden = 128;  // 0 = single linear output
  double residual_scale_init = 0.5;
  bool share_centers = true;
  bool use_gcc_branch = true;
  std::uint64_t seed = 0;

  bool operator==(const NetConfig&) const = default;
};

/// Throws usage_error on an inconsistent configuration (including pooling
/// that would shrink the input below one frame or bin).
void validate(const NetConfig& cfg);

/// Canonical `key=value` lines, one per field, in fixed order.
std::string to_canonical_text(const NetConfig& cfg);
NetConfig net_config_from_text(const std::string& text);

template <typename Scalar>
using ParamMap = std::map<std::string, Tensor<Scalar>>;

/// Learnable tensors plus non-learnable normalization statistics.
template <typename Scalar>
struct NetParams {
  NetConfig config;
  ParamMap<Scalar> params;
  ParamMap<Scalar> buffers;

  template <typename Other>
  NetParams<Other> cast() const {
    NetParams<Other> out;
    out.config = config;
    for (const auto& [k, v] : params) out.params.emplace(k, v.template cast<Other>());
    for (const auto& [k, v] : buffers) out.buffers.emplace(k, v.template cast<Other>());
    return out;
  }
};

/// Exact learnable-scalar count; shared tensors count once.
std::int64_t param_count(const NetConfig& cfg);

template <typename Scalar>
NetParams<Scalar> build_model(const NetConfig& cfg);

/// Full 3x3 kernel [cout x cin*9] seen by `branch` ("mel" or "gcc") for a
/// block conv (`conv` is 1 or 2), after assembling shared and private parts.
template <typename Scalar>
MatrixR<Scalar> effective_kernel(const NetParams<Scalar>& p, const std::string& branch, int block, int conv);

namespace detail {
template <typename Scalar>
class Graph;
}

/// Intermediates recorded by a training-mode forward pass.
template <typename Scalar>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;

  bool recorded() const;

  /// Per-branch activations right before fusion, [batch*filters x frames*bins].
  const MatrixR<Scalar>& branch_output(const std::string& branch) const;

  detail::Graph<Scalar>* graph() const { return graph_.get(); }
  void reset(std::unique_ptr<detail::Graph<Scalar>> graph);

 private:
  std::unique_ptr<detail::Graph<Scalar>> graph_;
};

/// One prediction (km) per segment. In train mode dropout is active, batch
/// statistics are used and running statistics are updated; eval mode is
/// deterministic and leaves `p` untouched. Pass a tape to enable backward.
template <typename Scalar>
VectorX<Scalar> forward(NetParams<Scalar>& p, std::span<const FeaturePair> batch, bool train_mode,
                        std::mt19937_64& rng, Tape<Scalar>* tape = nullptr);

/// Eval-mode prediction without mutation.
template <typename Scalar>
VectorX<Scalar> predict(const NetParams<Scalar>& p, std::span<const FeaturePair> batch);

/// Gradients for every parameter, keyed like p.params. Shared kernel centres
/// receive the sum of both branches' contributions.
template <typename Scalar>
ParamMap<Scalar> backward(const NetParams<Scalar>& p, Tape<Scalar>& tape, const VectorX<Scalar>& grad_out);

// Checkpoint: "ACAN", u32 version, canonical NetConfig text, then tensors.
void write_checkpoint(const std::filesystem::path& path, const NetParams<float>& p);
NetParams<float> read_checkpoint(const std::filesystem::path& path);

}  // namespace uwloc
