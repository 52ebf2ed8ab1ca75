#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resbm/tensor.hpp"

namespace resbm::model {

/// Bottleneck at one stage boundary.
struct BottleneckSpec {
  std::size_t h = 0;          // communicated width
  std::size_t inner_dim = 0;  // hidden width of the encoder/decoder MLPs
  /// Replace encoder and decoder by exact identity maps (requires h == H).
  /// Only used to check that a ResBM collapses to the vanilla transformer.
  bool identity_codec = false;

  bool operator==(const BottleneckSpec&) const = default;
};

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_inner_dim = 256;
  std::size_t vocab_size = 256;
  std::size_t context_len = 64;
  bool qk_norm = false;
  /// Entry i describes the boundary after block i; size num_layers - 1.
  std::vector<std::optional<BottleneckSpec>> bottleneck;

  bool operator==(const ModelConfig&) const = default;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// 4 blocks, H=64, 4 heads, FFN 256, byte vocab, L=64. With
  /// `compressed`, every boundary carries an h=8 (8x) bottleneck with
  /// inner width 16.
  static ModelConfig toy(bool compressed = true);
};

/// Rectangular identity I_{c x C}: zero-pads (c < C), truncates (c > C) or
/// passes through (c == C). `rank` is min over every dimension the
/// projection was composed through.
struct IdentityProjection {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::size_t rank = 0;
};

IdentityProjection make_projection(std::size_t in_dim, std::size_t out_dim);
/// x I_{c x C}, keeping only the leading `rank` columns nonzero.
Tensor identity_project(const Tensor& x, const IdentityProjection& proj);
/// Collapses a chain c_0 -> c_1 -> ... -> c_D into I_{c_0 x c_D} with
/// rank min(c_0..c_D). Throws ContractError on fewer than two entries.
IdentityProjection compose_projections(std::span<const std::size_t> dims);

enum class ParamKind { Matrix, Vector, Embedding };

std::string_view to_string(ParamKind kind);
ParamKind param_kind_from_string(std::string_view text);

struct Param {
  std::string name;
  ParamKind kind;
  Tensor tensor;
};

/// Named parameter set in creation order.
class Parameters {
 public:
  Tensor& add(std::string name, ParamKind kind, Tensor tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Param& entry(const std::string& name) const;

  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  void zero_grad();

 private:
  std::vector<Param> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic initialization. Each tensor draws from its own stream keyed
/// by (seed, parameter name). Matrices are N(0, 1/fan_in); output
/// projections (attention out, FFN down, encoder/decoder second layers) are
/// further scaled by 1/sqrt(2 * num_layers); embeddings N(0, 1); norm gains 1.
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Attention residual branch Attn(RMSNorm(u)) of block `layer` (no skip).
Tensor attention_branch(const Tensor& u, const Parameters& params, const ModelConfig& config,
                        std::size_t layer);
/// x + Attn(RMSNorm(x)).
Tensor attention_block(const Tensor& x, const Parameters& params, const ModelConfig& config,
                       std::size_t layer);
/// SwiGLU feed-forward branch FFN(RMSNorm(y)) of block `layer`.
Tensor ffn_branch(const Tensor& y, const Parameters& params, const ModelConfig& config,
                  std::size_t layer);
/// y + FFN(RMSNorm(y)).
Tensor ffn_block(const Tensor& y, const Parameters& params, const ModelConfig& config,
                 std::size_t layer);

/// Sender side of boundary `boundary` (after block `boundary`):
/// b = P(y, H->h) + E(FFN(RMSNorm(y))). Only b crosses the boundary.
Tensor boundary_forward(const Tensor& y, const BottleneckSpec& spec, const Parameters& params,
                        const ModelConfig& config, std::size_t boundary);
/// Receiver side, in block boundary+1: z = P(b, h->H) + Attn(RMSNorm(D(b))).
Tensor boundary_receive(const Tensor& b, const BottleneckSpec& spec, const Parameters& params,
                        const ModelConfig& config, std::size_t boundary);

/// Runs every block (with boundary bottlenecks) on an embedded sequence
/// x0 [L x H] and returns the final residual stream [L x H].
/// `boundary_widths`, when given, receives the width of each tensor that
/// crossed a stage boundary.
Tensor forward_blocks(const Tensor& x0, const Parameters& params, const ModelConfig& config,
                      std::vector<std::size_t>* boundary_widths = nullptr);

struct LmOutput {
  Tensor logits;  // L x V
  Tensor loss;    // scalar mean next-token cross-entropy
};

/// Embedding -> blocks -> final RMSNorm -> unembedding -> cross-entropy
/// against `targets` (one per input position).
LmOutput forward_lm(std::span<const int> inputs, std::span<const int> targets,
                    const Parameters& params, const ModelConfig& config);
/// Next-token form: position t predicts tokens[t + 1]; L - 1 predictions.
LmOutput forward_lm(std::span<const int> tokens, const Parameters& params, const ModelConfig& config);

struct ParameterCount {
  std::size_t total = 0;
  std::size_t bottleneck_overhead = 0;
  /// overhead / (total - overhead), i.e. relative to the same model without
  /// bottlenecks.
  double overhead_fraction = 0.0;
};

/// Analytic count. Linear layers carry no biases; identity codecs carry no
/// parameters.
ParameterCount count_parameters(const ModelConfig& config);

/// "scope.index.leaf", e.g. param_name("block", 3, "ffn.w_up").
std::string param_name(std::string_view scope, std::size_t index, std::string_view leaf);

}  // namespace resbm::model
