#include "resbm/model.hpp"

#include <algorithm>
#include <cmath>

#include "resbm/error.hpp"
#include "resbm/rng.hpp"

namespace resbm::model {

namespace {

constexpr double kNormEps = 1e-6;

std::string block_param(std::size_t layer, std::string_view leaf) {
  return param_name("block", layer, leaf);
}

std::string boundary_param(std::size_t boundary, std::string_view leaf) {
  return param_name("boundary", boundary, leaf);
}

Tensor normed(const Tensor& x, const Tensor& gain) { return mul(rms_normalize(x, kNormEps), gain); }

// Two linear layers with SiLU between them: x -> w2(silu(w1 x)).
Tensor two_layer(const Tensor& x, const Tensor& w1, const Tensor& w2) {
  return matmul_nt(silu(matmul_nt(x, w1)), w2);
}

Tensor qk_normalize(const Tensor& x, const Tensor& gain, const ModelConfig& config) {
  const std::size_t len = x.rows();
  Tensor grouped = reshape(x, {len, config.num_heads, config.head_dim});
  return reshape(normed(grouped, gain), {len, config.hidden_dim});
}

Tensor random_matrix(std::uint64_t seed, const std::string& name, std::size_t rows,
                     std::size_t cols, double stddev) {
  Xoshiro256 rng = Xoshiro256::stream(seed, name);
  std::vector<double> values(rows * cols);
  for (double& v : values) v = stddev * rng.normal();
  return Tensor::from({rows, cols}, std::move(values), true);
}

}  // namespace

std::string param_name(std::string_view scope, std::size_t index, std::string_view leaf) {
  std::string out(scope);
  out += '.';
  out += std::to_string(index);
  out += '.';
  out += leaf;
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (num_layers < 1) fail("num_layers", "must be >= 1");
  if (hidden_dim < 1) fail("hidden_dim", "must be >= 1");
  if (num_heads < 1) fail("num_heads", "must be >= 1");
  if (hidden_dim % num_heads != 0) fail("num_heads", "must divide hidden_dim");
  if (head_dim * num_heads != hidden_dim) fail("head_dim", "must equal hidden_dim / num_heads");
  if (head_dim % 2 != 0) fail("head_dim", "must be even (rotary embedding)");
  if (ffn_inner_dim < 1) fail("ffn_inner_dim", "must be >= 1");
  if (vocab_size < 1) fail("vocab_size", "must be >= 1");
  if (context_len < 1) fail("context_len", "must be >= 1");
  if (bottleneck.size() != num_layers - 1) {
    fail("bottleneck", "expected " + std::to_string(num_layers - 1) + " entries (one per boundary), got " +
                           std::to_string(bottleneck.size()));
  }
  for (std::size_t i = 0; i < bottleneck.size(); ++i) {
    if (!bottleneck[i]) continue;
    const BottleneckSpec& spec = *bottleneck[i];
    const std::string field = "bottleneck[" + std::to_string(i) + "]";
    if (spec.h < 1 || spec.h > hidden_dim) fail(field + ".h", "must lie in [1, hidden_dim]");
    if (spec.identity_codec) {
      if (spec.h != hidden_dim) fail(field + ".identity_codec", "requires h == hidden_dim");
    } else if (spec.inner_dim < spec.h) {
      fail(field + ".inner_dim", "must be >= h");
    }
  }
}

ModelConfig ModelConfig::toy(bool compressed) {
  ModelConfig c;
  c.bottleneck.assign(c.num_layers - 1, std::nullopt);
  if (compressed) {
    for (auto& entry : c.bottleneck) entry = BottleneckSpec{8, 16, false};
  }
  return c;
}

// ------------------------------------------------------- identity projection

IdentityProjection make_projection(std::size_t in_dim, std::size_t out_dim) {
  return IdentityProjection{in_dim, out_dim, std::min(in_dim, out_dim)};
}

Tensor identity_project(const Tensor& x, const IdentityProjection& proj) {
  if (x.dim() != 2 || x.cols() != proj.in_dim) {
    throw DimensionError("identity_project: expected [L x " + std::to_string(proj.in_dim) + "], got " +
                         shape_str(x.shape()));
  }
  if (proj.rank < std::min(proj.in_dim, proj.out_dim)) {
    return resize_cols(resize_cols(x, proj.rank), proj.out_dim);
  }
  if (proj.in_dim == proj.out_dim) return x;
  return resize_cols(x, proj.out_dim);
}

IdentityProjection compose_projections(std::span<const std::size_t> dims) {
  if (dims.size() < 2) {
    throw ContractError("compose_projections: need at least two dimensions (D >= 1)");
  }
  if (std::find(dims.begin(), dims.end(), std::size_t{0}) != dims.end()) {
    throw ContractError("compose_projections: dimensions must be >= 1");
  }
  IdentityProjection p = make_projection(dims.front(), dims.back());
  p.rank = *std::min_element(dims.begin(), dims.end());
  return p;
}

// ------------------------------------------------------- parameters

std::string_view to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::Matrix: return "matrix-2d";
    case ParamKind::Vector: return "vector-1d";
    case ParamKind::Embedding: return "embedding";
  }
  return "unknown";
}

ParamKind param_kind_from_string(std::string_view text) {
  if (text == "matrix-2d") return ParamKind::Matrix;
  if (text == "vector-1d") return ParamKind::Vector;
  if (text == "embedding") return ParamKind::Embedding;
  throw DataError("unknown parameter kind '" + std::string(text) + "'");
}

Tensor& Parameters::add(std::string name, ParamKind kind, Tensor tensor) {
  if (contains(name)) throw ConfigError("duplicate parameter " + name);
  tensor.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back(Param{std::move(name), kind, std::move(tensor)});
  return entries_.back().tensor;
}

const Param& Parameters::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + name);
  return entries_[it->second];
}

const Tensor& Parameters::get(const std::string& name) const { return entry(name).tensor; }

Tensor& Parameters::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + name);
  return entries_[it->second].tensor;
}

std::size_t Parameters::total_elements() const {
  std::size_t n = 0;
  for (const Param& p : entries_) n += p.tensor.numel();
  return n;
}

void Parameters::zero_grad() {
  for (Param& p : entries_) p.tensor.zero_grad();
}

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t H = config.hidden_dim;
  const std::size_t F = config.ffn_inner_dim;
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  auto fan_in = [](std::size_t cols) { return 1.0 / std::sqrt(static_cast<double>(cols)); };

  Parameters p;
  auto matrix = [&](const std::string& name, std::size_t rows, std::size_t cols, double extra = 1.0) {
    p.add(name, ParamKind::Matrix, random_matrix(seed, name, rows, cols, extra * fan_in(cols)));
  };
  auto gain = [&](const std::string& name, std::size_t n) {
    p.add(name, ParamKind::Vector, Tensor::full({n}, 1.0, true));
  };

  p.add("embed.weight", ParamKind::Embedding,
        random_matrix(seed, "embed.weight", config.vocab_size, H, 1.0));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    gain(block_param(l, "attn_norm.weight"), H);
    matrix(block_param(l, "attn.wq"), H, H);
    matrix(block_param(l, "attn.wk"), H, H);
    matrix(block_param(l, "attn.wv"), H, H);
    matrix(block_param(l, "attn.wo"), H, H, out_scale);
    if (config.qk_norm) {
      gain(block_param(l, "attn.q_norm"), config.head_dim);
      gain(block_param(l, "attn.k_norm"), config.head_dim);
    }
    gain(block_param(l, "ffn_norm.weight"), H);
    matrix(block_param(l, "ffn.w_gate"), F, H);
    matrix(block_param(l, "ffn.w_up"), F, H);
    matrix(block_param(l, "ffn.w_down"), H, F, out_scale);
    if (l + 1 < config.num_layers && config.bottleneck[l] && !config.bottleneck[l]->identity_codec) {
      const BottleneckSpec& spec = *config.bottleneck[l];
      matrix(boundary_param(l, "encoder.w1"), spec.inner_dim, H);
      matrix(boundary_param(l, "encoder.w2"), spec.h, spec.inner_dim, out_scale);
      matrix(boundary_param(l, "decoder.w1"), spec.inner_dim, spec.h);
      matrix(boundary_param(l, "decoder.w2"), H, spec.inner_dim, out_scale);
    }
  }
  gain("final_norm.weight", H);
  p.add("unembed.weight", ParamKind::Embedding,
        random_matrix(seed, "unembed.weight", config.vocab_size, H, fan_in(H)));
  return p;
}

// ------------------------------------------------------- blocks

Tensor attention_branch(const Tensor& u, const Parameters& params, const ModelConfig& config,
                        std::size_t layer) {
  const std::size_t hd = config.head_dim;
  Tensor n = normed(u, params.get(block_param(layer, "attn_norm.weight")));
  Tensor q = matmul_nt(n, params.get(block_param(layer, "attn.wq")));
  Tensor k = matmul_nt(n, params.get(block_param(layer, "attn.wk")));
  Tensor v = matmul_nt(n, params.get(block_param(layer, "attn.wv")));
  if (config.qk_norm) {
    q = qk_normalize(q, params.get(block_param(layer, "attn.q_norm")), config);
    k = qk_normalize(k, params.get(block_param(layer, "attn.k_norm")), config);
  }
  q = rope(q, hd);
  k = rope(k, hd);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  heads.reserve(config.num_heads);
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, hd);
    Tensor kh = slice_cols(k, h * hd, hd);
    Tensor vh = slice_cols(v, h * hd, hd);
    Tensor probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), /*causal=*/true);
    heads.push_back(matmul(probs, vh));
  }
  return matmul_nt(concat_cols(heads), params.get(block_param(layer, "attn.wo")));
}

Tensor attention_block(const Tensor& x, const Parameters& params, const ModelConfig& config,
                       std::size_t layer) {
  return add(x, attention_branch(x, params, config, layer));
}

Tensor ffn_branch(const Tensor& y, const Parameters& params, const ModelConfig& config,
                  std::size_t layer) {
  (void)config;
  Tensor n = normed(y, params.get(block_param(layer, "ffn_norm.weight")));
  Tensor gate = silu(matmul_nt(n, params.get(block_param(layer, "ffn.w_gate"))));
  Tensor up = matmul_nt(n, params.get(block_param(layer, "ffn.w_up")));
  return matmul_nt(mul(gate, up), params.get(block_param(layer, "ffn.w_down")));
}

Tensor ffn_block(const Tensor& y, const Parameters& params, const ModelConfig& config,
                 std::size_t layer) {
  return add(y, ffn_branch(y, params, config, layer));
}

Tensor boundary_forward(const Tensor& y, const BottleneckSpec& spec, const Parameters& params,
                        const ModelConfig& config, std::size_t boundary) {
  Tensor branch = ffn_branch(y, params, config, boundary);
  if (!spec.identity_codec) {
    branch = two_layer(branch, params.get(boundary_param(boundary, "encoder.w1")),
                       params.get(boundary_param(boundary, "encoder.w2")));
  }
  return add(identity_project(y, make_projection(config.hidden_dim, spec.h)), branch);
}

Tensor boundary_receive(const Tensor& b, const BottleneckSpec& spec, const Parameters& params,
                        const ModelConfig& config, std::size_t boundary) {
  if (b.dim() != 2 || b.cols() != spec.h) {
    throw DimensionError("boundary_receive: expected [L x " + std::to_string(spec.h) + "], got " +
                         shape_str(b.shape()));
  }
  Tensor decoded = b;
  if (!spec.identity_codec) {
    decoded = two_layer(b, params.get(boundary_param(boundary, "decoder.w1")),
                        params.get(boundary_param(boundary, "decoder.w2")));
  }
  Tensor branch = attention_branch(decoded, params, config, boundary + 1);
  return add(identity_project(b, make_projection(spec.h, config.hidden_dim)), branch);
}

Tensor forward_blocks(const Tensor& x0, const Parameters& params, const ModelConfig& config,
                      std::vector<std::size_t>* boundary_widths) {
  if (x0.dim() != 2 || x0.cols() != config.hidden_dim) {
    throw DimensionError("forward_blocks: expected [L x " + std::to_string(config.hidden_dim) +
                         "], got " + shape_str(x0.shape()));
  }
  Tensor x = x0;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto* incoming = (l > 0 && config.bottleneck[l - 1]) ? &*config.bottleneck[l - 1] : nullptr;
    const auto* outgoing =
        (l + 1 < config.num_layers && config.bottleneck[l]) ? &*config.bottleneck[l] : nullptr;
    Tensor attn_out = incoming ? boundary_receive(x, *incoming, params, config, l - 1)
                               : attention_block(x, params, config, l);
    x = outgoing ? boundary_forward(attn_out, *outgoing, params, config, l)
                 : ffn_block(attn_out, params, config, l);
    if (boundary_widths != nullptr && l + 1 < config.num_layers) boundary_widths->push_back(x.cols());
  }
  return x;
}

LmOutput forward_lm(std::span<const int> inputs, std::span<const int> targets,
                    const Parameters& params, const ModelConfig& config) {
  if (inputs.empty() || inputs.size() > config.context_len) {
    throw DimensionError("forward_lm: sequence length " + std::to_string(inputs.size()) +
                         " outside [1, " + std::to_string(config.context_len) + "]");
  }
  Tensor x0 = embedding(params.get("embed.weight"), inputs);
  Tensor x = forward_blocks(x0, params, config);
  Tensor h = normed(x, params.get("final_norm.weight"));
  Tensor logits = matmul_nt(h, params.get("unembed.weight"));
  Tensor loss = cross_entropy(logits, targets);
  return LmOutput{logits, loss};
}

LmOutput forward_lm(std::span<const int> tokens, const Parameters& params, const ModelConfig& config) {
  if (tokens.size() < 2) throw DimensionError("forward_lm: need at least two tokens");
  return forward_lm(tokens.first(tokens.size() - 1), tokens.subspan(1), params, config);
}

ParameterCount count_parameters(const ModelConfig& config) {
  config.validate();
  const std::size_t H = config.hidden_dim, F = config.ffn_inner_dim, V = config.vocab_size;
  std::size_t per_block = 2 * H + 4 * H * H + 3 * H * F;
  if (config.qk_norm) per_block += 2 * config.head_dim;
  std::size_t overhead = 0;
  for (const auto& spec : config.bottleneck) {
    if (!spec || spec->identity_codec) continue;
    const std::size_t encoder = spec->inner_dim * H + spec->h * spec->inner_dim;
    const std::size_t decoder = spec->inner_dim * spec->h + H * spec->inner_dim;
    overhead += encoder + decoder;
  }
  ParameterCount out;
  out.total = 2 * V * H + H + config.num_layers * per_block + overhead;
  out.bottleneck_overhead = overhead;
  const std::size_t base = out.total - overhead;
  out.overhead_fraction = static_cast<double>(overhead) / static_cast<double>(base);
  return out;
}

}  // namespace resbm::model
