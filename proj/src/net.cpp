#include "uwloc/net.hpp"

#include "layers.hpp"
#include "uwloc/error.hpp"

#include <cmath>
#include <optional>
#include <sstream>

namespace uwloc {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;
constexpr double kLayerNormEps = 1e-5;

// Kernel positions (kh*3 + kw) of the tied central window and of the rest.
constexpr Index kCentre[4] = {4, 5, 7, 8};
constexpr Index kPrivate[5] = {0, 1, 2, 3, 6};

enum class Init { uniform, ones, zeros, constant };

struct ParamSpec {
  std::string key;
  std::vector<Index> shape;
  Index fan_in = 1;
  Init init = Init::uniform;
  double value = 0.0;
};

struct BranchLayout {
  std::string name;
  Index in_channels;
  Index width;  // mel bins or lags
};

std::vector<BranchLayout> branches_of(const NetConfig& cfg) {
  std::vector<BranchLayout> out{{"mel", cfg.input.mel_channels, cfg.input.mel_bins}};
  if (cfg.use_gcc_branch) out.push_back({"gcc", cfg.input.gcc_pairs, cfg.input.lags});
  return out;
}

bool tied(const NetConfig& cfg) { return cfg.share_centers && cfg.use_gcc_branch && cfg.conv_blocks > 0; }

Index pooled(Index n, int blocks) {
  for (int i = 0; i < blocks; ++i) n /= 2;
  return n;
}

Index fused_width(const NetConfig& cfg) {
  Index total = 0;
  for (const auto& b : branches_of(cfg)) {
    const Index channels = cfg.conv_blocks > 0 ? cfg.base_filters : b.in_channels;
    total += channels * pooled(b.width, cfg.conv_blocks);
  }
  return total;
}

std::string conv_key(const std::string& branch, int block, int conv) {
  return "branch." + branch + ".block" + std::to_string(block) + ".conv" + std::to_string(conv);
}

std::string centre_key(int block, int conv) {
  return "shared.block" + std::to_string(block) + ".conv" + std::to_string(conv) + ".centre";
}

std::vector<ParamSpec> param_specs(const NetConfig& cfg) {
  std::vector<ParamSpec> specs;
  auto linear = [&](const std::string& key, Index out, Index in) {
    specs.push_back({key + ".weight", {out, in}, in});
    specs.push_back({key + ".bias", {out}, in});
  };
  auto norm = [&](const std::string& key, Index dim) {
    specs.push_back({key + ".gamma", {dim}, 1, Init::ones});
    specs.push_back({key + ".beta", {dim}, 1, Init::zeros});
  };

  const Index f = cfg.base_filters;
  const bool share = tied(cfg);
  for (const auto& b : branches_of(cfg)) {
    if (cfg.conv_blocks == 0) continue;
    linear("branch." + b.name + ".stem", f, b.in_channels);
    for (int i = 0; i < cfg.conv_blocks; ++i) {
      for (int j = 1; j <= 2; ++j) {
        const std::string key = conv_key(b.name, i, j);
        if (share) {
          specs.push_back({key + ".private", {f, f, 5}, f * 9});
          if (b.name == "mel") specs.push_back({centre_key(i, j), {f, f, 4}, f * 9});
        } else {
          specs.push_back({key + ".kernel", {f, f, 9}, f * 9});
        }
        norm("branch." + b.name + ".block" + std::to_string(i) + ".norm" + std::to_string(j), f);
      }
      specs.push_back({"branch." + b.name + ".block" + std::to_string(i) + ".residual_scale", {1}, 1,
                       Init::constant, cfg.residual_scale_init});
    }
  }

  const Index d = cfg.model_dim;
  Index head_in = fused_width(cfg);
  if (cfg.conformer_blocks > 0) {
    linear("trunk.proj", d, head_in);
    for (int k = 0; k < cfg.conformer_blocks; ++k) {
      const std::string c = "trunk.conformer" + std::to_string(k);
      const Index e = static_cast<Index>(cfg.ff_expansion) * d;
      norm(c + ".ff1.norm", d);
      linear(c + ".ff1.fc1", e, d);
      linear(c + ".ff1.fc2", d, e);
      norm(c + ".attn.norm", d);
      linear(c + ".attn.query", d, d);
      linear(c + ".attn.key", d, d);
      linear(c + ".attn.value", d, d);
      linear(c + ".attn.out", d, d);
      norm(c + ".conv.norm", d);
      linear(c + ".conv.pointwise1", 2 * d, d);
      specs.push_back({c + ".conv.depthwise.weight", {d, static_cast<Index>(cfg.conv_kernel_temporal)},
                       static_cast<Index>(cfg.conv_kernel_temporal)});
      norm(c + ".conv.bn", d);
      linear(c + ".conv.pointwise2", d, d);
      norm(c + ".ff2.norm", d);
      linear(c + ".ff2.fc1", e, d);
      linear(c + ".ff2.fc2", d, e);
      norm(c + ".final_norm", d);
    }
    head_in = d;
  }
  if (cfg.head_hidden > 0) {
    linear("head.hidden", cfg.head_hidden, head_in);
    linear("head.out", 1, cfg.head_hidden);
  } else {
    linear("head.out", 1, head_in);
  }
  return specs;
}

std::vector<std::pair<std::string, Index>> buffer_specs(const NetConfig& cfg) {
  std::vector<std::pair<std::string, Index>> out;
  for (const auto& b : branches_of(cfg)) {
    for (int i = 0; i < cfg.conv_blocks; ++i) {
      for (int j = 1; j <= 2; ++j) {
        out.emplace_back("branch." + b.name + ".block" + std::to_string(i) + ".norm" + std::to_string(j),
                         cfg.base_filters);
      }
    }
  }
  for (int k = 0; k < cfg.conformer_blocks; ++k) {
    out.emplace_back("trunk.conformer" + std::to_string(k) + ".conv.bn", cfg.model_dim);
  }
  return out;
}

// Uniform double in [0, 1) from the top 53 bits.
double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// ---------------------------------------------------------------------------
// Parameter access helpers.

template <typename S>
MatrixR<S> mat(const ParamMap<S>& m, const std::string& key) {
  const auto& t = m.at(key);
  return t.matrix(t.shape[0], t.size() / t.shape[0]);
}

template <typename S>
const VectorX<S>& vec(const ParamMap<S>& m, const std::string& key) {
  return m.at(key).values;
}

template <typename S>
void add_grad(ParamMap<S>& g, const std::string& key, const MatrixR<S>& d) {
  auto& t = g.at(key);
  t.values += Eigen::Map<const VectorX<S>>(d.data(), d.size());
}

template <typename S>
void add_grad(ParamMap<S>& g, const std::string& key, const VectorX<S>& d) {
  g.at(key).values += d;
}

template <typename S>
void check_finite(const MatrixR<S>& m, const std::string& where) {
  if (!m.allFinite()) throw numeric_error("non-finite activations in " + where);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

InputShape input_shape_of(const FeaturePair& f) {
  return {f.channels, f.pairs, f.frames, f.mel_bins, f.lags};
}

void validate(const NetConfig& cfg) {
  const auto& in = cfg.input;
  if (in.mel_channels <= 0 || in.frames <= 0 || in.mel_bins <= 0) {
    throw usage_error("net input shape must be positive");
  }
  if (cfg.use_gcc_branch && (in.gcc_pairs <= 0 || in.lags <= 0)) {
    throw usage_error("net gcc input shape must be positive");
  }
  if (cfg.conv_blocks < 0 || cfg.conformer_blocks < 0 || cfg.head_hidden < 0) {
    throw usage_error("net block counts must be non-negative");
  }
  if (cfg.conv_blocks > 0 && cfg.base_filters <= 0) throw usage_error("net.base_filters must be positive");
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0)) throw usage_error("net.dropout_p must lie in [0, 1)");
  if (cfg.conformer_blocks > 0) {
    if (cfg.model_dim <= 0 || cfg.attn_heads <= 0 || cfg.model_dim % cfg.attn_heads != 0) {
      throw usage_error("net.model_dim must be a positive multiple of net.attn_heads");
    }
    if (cfg.ff_expansion <= 0) throw usage_error("net.ff_expansion must be positive");
    if (cfg.conv_kernel_temporal <= 0 || cfg.conv_kernel_temporal % 2 == 0) {
      throw usage_error("net.conv_kernel_temporal must be odd and positive");
    }
  }
  const Index frames = pooled(in.frames, cfg.conv_blocks);
  Index min_width = pooled(in.mel_bins, cfg.conv_blocks);
  if (cfg.use_gcc_branch) min_width = std::min(min_width, pooled(in.lags, cfg.conv_blocks));
  if (frames < 1 || min_width < 1) {
    throw usage_error("net.conv_blocks pools the input below one frame or bin");
  }
}

std::string to_canonical_text(const NetConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "input.mel_channels=" << cfg.input.mel_channels << '\n'
      << "input.gcc_pairs=" << cfg.input.gcc_pairs << '\n'
      << "input.frames=" << cfg.input.frames << '\n'
      << "input.mel_bins=" << cfg.input.mel_bins << '\n'
      << "input.lags=" << cfg.input.lags << '\n'
      << "conv_blocks=" << cfg.conv_blocks << '\n'
      << "base_filters=" << cfg.base_filters << '\n'
      << "dropout_p=" << cfg.dropout_p << '\n'
      << "conformer_blocks=" << cfg.conformer_blocks << '\n'
      << "model_dim=" << cfg.model_dim << '\n'
      << "attn_heads=" << cfg.attn_heads << '\n'
      << "ff_expansion=" << cfg.ff_expansion << '\n'
      << "conv_kernel_temporal=" << cfg.conv_kernel_temporal << '\n'
      << "head_hidden=" << cfg.head_hidden << '\n'
      << "residual_scale_init=" << cfg.residual_scale_init << '\n'
      << "share_centers=" << (cfg.share_centers ? 1 : 0) << '\n'
      << "use_gcc_branch=" << (cfg.use_gcc_branch ? 1 : 0) << '\n'
      << "seed=" << cfg.seed << '\n';
  return out.str();
}

NetConfig net_config_from_text(const std::string& text) {
  NetConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw data_error("malformed net config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "input.mel_channels") cfg.input.mel_channels = std::stoll(value);
      else if (key == "input.gcc_pairs") cfg.input.gcc_pairs = std::stoll(value);
      else if (key == "input.frames") cfg.input.frames = std::stoll(value);
      else if (key == "input.mel_bins") cfg.input.mel_bins = std::stoll(value);
      else if (key == "input.lags") cfg.input.lags = std::stoll(value);
      else if (key == "conv_blocks") cfg.conv_blocks = std::stoi(value);
      else if (key == "base_filters") cfg.base_filters = std::stoi(value);
      else if (key == "dropout_p") cfg.dropout_p = std::stod(value);
      else if (key == "conformer_blocks") cfg.conformer_blocks = std::stoi(value);
      else if (key == "model_dim") cfg.model_dim = std::stoi(value);
      else if (key == "attn_heads") cfg.attn_heads = std::stoi(value);
      else if (key == "ff_expansion") cfg.ff_expansion = std::stoi(value);
      else if (key == "conv_kernel_temporal") cfg.conv_kernel_temporal = std::stoi(value);
      else if (key == "head_hidden") cfg.head_hidden = std::stoi(value);
      else if (key == "residual_scale_init") cfg.residual_scale_init = std::stod(value);
      else if (key == "share_centers") cfg.share_centers = std::stoi(value) != 0;
      else if (key == "use_gcc_branch") cfg.use_gcc_branch = std::stoi(value) != 0;
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw data_error("unknown net config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw data_error("malformed value for net config key '" + key + "'");
    } catch (const std::out_of_range&) {
      throw data_error("out-of-range value for net config key '" + key + "'");
    }
  }
  return cfg;
}

std::int64_t param_count(const NetConfig& cfg) {
  validate(cfg);
  std::int64_t total = 0;
  for (const auto& spec : param_specs(cfg)) total += Tensor<float>::element_count(spec.shape);
  return total;
}

template <typename Scalar>
NetParams<Scalar> build_model(const NetConfig& cfg) {
  validate(cfg);
  NetParams<Scalar> p;
  p.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  for (const auto& spec : param_specs(cfg)) {
    Tensor<Scalar> t(spec.shape);
    switch (spec.init) {
      case Init::uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (Index i = 0; i < t.size(); ++i) {
          t.values(i) = static_cast<Scalar>((2.0 * unit_uniform(rng) - 1.0) * bound);
        }
        break;
      }
      case Init::ones: t.values.setOnes(); break;
      case Init::zeros: t.values.setZero(); break;
      case Init::constant: t.values.setConstant(static_cast<Scalar>(spec.value)); break;
    }
    p.params.emplace(spec.key, std::move(t));
  }
  for (const auto& [key, dim] : buffer_specs(cfg)) {
    Tensor<Scalar> mean({dim});
    Tensor<Scalar> var({dim});
    var.values.setOnes();
    p.buffers.emplace(key + ".running_mean", std::move(mean));
    p.buffers.emplace(key + ".running_var", std::move(var));
  }
  return p;
}

template <typename Scalar>
MatrixR<Scalar> effective_kernel(const NetParams<Scalar>& p, const std::string& branch, int block, int conv) {
  const Index f = p.config.base_filters;
  const std::string key = conv_key(branch, block, conv);
  if (!tied(p.config)) return mat(p.params, key + ".kernel");
  const auto& priv = p.params.at(key + ".private").values;
  const auto& centre = p.params.at(centre_key(block, conv)).values;
  MatrixR<Scalar> k(f, f * 9);
  for (Index o = 0; o < f; ++o) {
    for (Index c = 0; c < f; ++c) {
      for (Index j = 0; j < 5; ++j) k(o, c * 9 + kPrivate[j]) = priv((o * f + c) * 5 + j);
      for (Index j = 0; j < 4; ++j) k(o, c * 9 + kCentre[j]) = centre((o * f + c) * 4 + j);
    }
  }
  return k;
}

namespace detail {

// Dropout that remembers its mask.
template <typename S>
struct Dropout {
  MatrixR<S> mask;

  MatrixR<S> forward(const MatrixR<S>& x, double p, bool train, std::mt19937_64& rng) {
    if (!train || p <= 0.0) {
      mask.resize(0, 0);
      return x;
    }
    mask = dropout_mask<S>(x.rows(), x.cols(), p, rng);
    return x.cwiseProduct(mask);
  }
  MatrixR<S> backward(const MatrixR<S>& dy) const { return mask.size() ? dy.cwiseProduct(mask) : dy; }
};

template <typename S>
struct Linear {
  std::string key;
  MatrixR<S> x;

  MatrixR<S> forward(const ParamMap<S>& p, const MatrixR<S>& in, bool record) {
    if (record) x = in;
    return linear_forward(in, mat(p, key + ".weight"), vec(p, key + ".bias"));
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy) const {
    const MatrixR<S> w = mat(p, key + ".weight");
    MatrixR<S> dw = MatrixR<S>::Zero(w.rows(), w.cols());
    VectorX<S> db = VectorX<S>::Zero(w.rows());
    MatrixR<S> dx = linear_backward(x, w, dy, dw, db);
    add_grad(g, key + ".weight", dw);
    add_grad(g, key + ".bias", db);
    return dx;
  }
};

template <typename S>
struct LayerNorm {
  std::string key;
  LayerNormCache<S> cache;

  MatrixR<S> forward(const ParamMap<S>& p, const MatrixR<S>& x, bool record) {
    return layer_norm_forward<S>(x, vec(p, key + ".gamma"), vec(p, key + ".beta"), S(kLayerNormEps),
                                 record ? &cache : nullptr);
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy) const {
    const auto& gamma = vec(p, key + ".gamma");
    VectorX<S> dgamma = VectorX<S>::Zero(gamma.size()), dbeta = VectorX<S>::Zero(gamma.size());
    MatrixR<S> dx = layer_norm_backward(cache, gamma, dy, dgamma, dbeta);
    add_grad(g, key + ".gamma", dgamma);
    add_grad(g, key + ".beta", dbeta);
    return dx;
  }
};

struct Pass {
  bool train;
  bool record;
  double dropout;
  std::mt19937_64* rng;
};

template <typename S>
struct FeedForward {
  LayerNorm<S> norm;
  Linear<S> fc1, fc2;
  MatrixR<S> pre_act;
  Dropout<S> drop1, drop2;

  explicit FeedForward(const std::string& key)
      : norm{key + ".norm", {}}, fc1{key + ".fc1", {}}, fc2{key + ".fc2", {}} {}

  MatrixR<S> forward(const ParamMap<S>& p, const MatrixR<S>& x, const Pass& pass) {
    MatrixR<S> h = fc1.forward(p, norm.forward(p, x, pass.record), pass.record);
    if (pass.record) pre_act = h;
    h = drop1.forward(swish_forward(h), pass.dropout, pass.train, *pass.rng);
    return drop2.forward(fc2.forward(p, h, pass.record), pass.dropout, pass.train, *pass.rng);
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy) const {
    MatrixR<S> d = fc2.backward(p, g, drop2.backward(dy));
    d = swish_backward(pre_act, drop1.backward(d));
    return norm.backward(p, g, fc1.backward(p, g, d));
  }
};

template <typename S>
struct SelfAttention {
  LayerNorm<S> norm;
  Linear<S> query, key, value, out;
  MatrixR<S> q, k, v;
  AttentionCache<S> cache;
  Dropout<S> drop;
  Index heads;

  SelfAttention(const std::string& prefix, Index heads_)
      : norm{prefix + ".norm", {}},
        query{prefix + ".query", {}},
        key{prefix + ".key", {}},
        value{prefix + ".value", {}},
        out{prefix + ".out", {}},
        heads(heads_) {}

  MatrixR<S> forward(const ParamMap<S>& p, const MatrixR<S>& x, Index batch, Index frames, const Pass& pass) {
    const MatrixR<S> h = norm.forward(p, x, pass.record);
    MatrixR<S> qq = query.forward(p, h, pass.record);
    MatrixR<S> kk = key.forward(p, h, pass.record);
    MatrixR<S> vv = value.forward(p, h, pass.record);
    const MatrixR<S> a = attention_forward(qq, kk, vv, batch, frames, heads, pass.record ? &cache : nullptr);
    if (pass.record) {
      q = std::move(qq);
      k = std::move(kk);
      v = std::move(vv);
    }
    return drop.forward(out.forward(p, a, pass.record), pass.dropout, pass.train, *pass.rng);
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy, Index batch,
                      Index frames) const {
    const MatrixR<S> da = out.backward(p, g, drop.backward(dy));
    MatrixR<S> dq, dk, dv;
    attention_backward(cache, q, k, v, batch, frames, heads, da, dq, dk, dv);
    MatrixR<S> dh = query.backward(p, g, dq);
    dh += key.backward(p, g, dk);
    dh += value.backward(p, g, dv);
    return norm.backward(p, g, dh);
  }
};

template <typename S>
struct ConvModule {
  std::string prefix;
  LayerNorm<S> norm;
  Linear<S> pw1, pw2;
  MatrixR<S> pre_glu, dw_in, pre_swish;
  SeqNormCache<S> bn;
  Dropout<S> drop;

  explicit ConvModule(const std::string& key)
      : prefix(key), norm{key + ".norm", {}}, pw1{key + ".pointwise1", {}}, pw2{key + ".pointwise2", {}} {}

  MatrixR<S> forward(NetParams<S>& params, const MatrixR<S>& x, Index batch, Index frames, const Pass& pass) {
    const auto& p = params.params;
    MatrixR<S> u = pw1.forward(p, norm.forward(p, x, pass.record), pass.record);
    MatrixR<S> gl = glu_forward(u);
    const MatrixR<S> w = mat(p, prefix + ".depthwise.weight");
    MatrixR<S> z = depthwise_time_forward(gl, batch, frames, w);
    auto& rm = params.buffers.at(prefix + ".bn.running_mean").values;
    auto& rv = params.buffers.at(prefix + ".bn.running_var").values;
    z = seq_norm_forward<S>(z, vec(p, prefix + ".bn.gamma"), vec(p, prefix + ".bn.beta"), pass.train, rm, rv,
                            S(kNormMomentum), S(kNormEps), pass.record ? &bn : nullptr);
    if (pass.record) {
      pre_glu = std::move(u);
      dw_in = std::move(gl);
      pre_swish = z;
    }
    return drop.forward(pw2.forward(p, swish_forward(z), pass.record), pass.dropout, pass.train, *pass.rng);
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy, Index batch,
                      Index frames) const {
    MatrixR<S> d = pw2.backward(p, g, drop.backward(dy));
    d = swish_backward(pre_swish, d);
    const auto& gamma = vec(p, prefix + ".bn.gamma");
    VectorX<S> dgamma = VectorX<S>::Zero(gamma.size()), dbeta = VectorX<S>::Zero(gamma.size());
    d = seq_norm_backward(bn, gamma, d, dgamma, dbeta);
    add_grad(g, prefix + ".bn.gamma", dgamma);
    add_grad(g, prefix + ".bn.beta", dbeta);
    const MatrixR<S> w = mat(p, prefix + ".depthwise.weight");
    MatrixR<S> dw = MatrixR<S>::Zero(w.rows(), w.cols());
    d = depthwise_time_backward(dw_in, batch, frames, w, d, dw);
    add_grad(g, prefix + ".depthwise.weight", dw);
    d = glu_backward(pre_glu, d);
    return norm.backward(p, g, pw1.backward(p, g, d));
  }
};

template <typename S>
struct ConformerBlock {
  FeedForward<S> ff1;
  SelfAttention<S> attn;
  ConvModule<S> conv;
  FeedForward<S> ff2;
  LayerNorm<S> final_norm;

  ConformerBlock(const std::string& key, Index heads)
      : ff1(key + ".ff1"), attn(key + ".attn", heads), conv(key + ".conv"), ff2(key + ".ff2"),
        final_norm{key + ".final_norm", {}} {}

  MatrixR<S> forward(NetParams<S>& params, const MatrixR<S>& x, Index batch, Index frames, const Pass& pass) {
    const auto& p = params.params;
    MatrixR<S> h = x + S(0.5) * ff1.forward(p, x, pass);
    h += attn.forward(p, h, batch, frames, pass);
    h += conv.forward(params, h, batch, frames, pass);
    h += S(0.5) * ff2.forward(p, h, pass);
    return final_norm.forward(p, h, pass.record);
  }
  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy, Index batch,
                      Index frames) const {
    MatrixR<S> d = final_norm.backward(p, g, dy);
    d += ff2.backward(p, g, MatrixR<S>(S(0.5) * d));
    d += conv.backward(p, g, d, batch, frames);
    d += attn.backward(p, g, d, batch, frames);
    d += ff1.backward(p, g, MatrixR<S>(S(0.5) * d));
    return d;
  }
};

template <typename S>
struct ConvBlock {
  std::string prefix;  // branch.<name>.block<i>
  std::string branch;
  int index;
  Index h, w;  // input spatial dims
  MatrixR<S> x, kernel1, kernel2, a1, n2, sum;
  MapNormCache<S> norm1, norm2;
  PoolIndex pool;
  Dropout<S> drop;
  S lambda = 0;

  MatrixR<S> forward(NetParams<S>& params, const MatrixR<S>& in, Index batch, Index f, const Pass& pass) {
    const auto& p = params.params;
    MatrixR<S> k1 = effective_kernel(params, branch, index, 1);
    MatrixR<S> k2 = effective_kernel(params, branch, index, 2);
    const std::string n1 = prefix + ".norm1", n2k = prefix + ".norm2";

    MatrixR<S> h1 = conv3x3_forward(in, batch, f, h, w, k1);
    h1 = map_norm_forward<S>(h1, batch, f, vec(p, n1 + ".gamma"), vec(p, n1 + ".beta"), pass.train,
                             params.buffers.at(n1 + ".running_mean").values,
                             params.buffers.at(n1 + ".running_var").values, S(kNormMomentum), S(kNormEps),
                             pass.record ? &norm1 : nullptr);
    MatrixR<S> act = h1.cwiseMax(S(0));
    MatrixR<S> h2 = conv3x3_forward(act, batch, f, h, w, k2);
    h2 = map_norm_forward<S>(h2, batch, f, vec(p, n2k + ".gamma"), vec(p, n2k + ".beta"), pass.train,
                             params.buffers.at(n2k + ".running_mean").values,
                             params.buffers.at(n2k + ".running_var").values, S(kNormMomentum), S(kNormEps),
                             pass.record ? &norm2 : nullptr);
    lambda = p.at(prefix + ".residual_scale").values(0);
    MatrixR<S> s = in + lambda * h2;
    MatrixR<S> pooled_out = maxpool2x2_forward(s, h, w, pass.record ? &pool : nullptr);
    if (pass.record) {
      x = in;
      kernel1 = std::move(k1);
      kernel2 = std::move(k2);
      a1 = std::move(act);
      n2 = std::move(h2);
      sum = std::move(s);
    }
    return drop.forward(pooled_out, pass.dropout, pass.train, *pass.rng);
  }

  MatrixR<S> backward(const ParamMap<S>& p, ParamMap<S>& g, const MatrixR<S>& dy, Index batch, Index f,
                      bool share) const {
    const MatrixR<S> dsum = maxpool2x2_backward(pool, batch * f, h, w, drop.backward(dy));
    VectorX<S> dlambda(1);
    dlambda(0) = dsum.cwiseProduct(n2).sum();
    add_grad(g, prefix + ".residual_scale", dlambda);

    VectorX<S> dgamma = VectorX<S>::Zero(f), dbeta = VectorX<S>::Zero(f);
    MatrixR<S> d = map_norm_backward(norm2, batch, f, vec(p, prefix + ".norm2.gamma"),
                                     MatrixR<S>(lambda * dsum), dgamma, dbeta);
    add_grad(g, prefix + ".norm2.gamma", dgamma);
    add_grad(g, prefix + ".norm2.beta", dbeta);
    MatrixR<S> dk2 = MatrixR<S>::Zero(f, f * 9);
    d = conv3x3_backward(a1, batch, f, h, w, kernel2, d, dk2);
    d = relu_backward(a1, d);
    dgamma.setZero();
    dbeta.setZero();
    d = map_norm_backward(norm1, batch, f, vec(p, prefix + ".norm1.gamma"), d, dgamma, dbeta);
    add_grad(g, prefix + ".norm1.gamma", dgamma);
    add_grad(g, prefix + ".norm1.beta", dbeta);
    MatrixR<S> dk1 = MatrixR<S>::Zero(f, f * 9);
    MatrixR<S> dx = conv3x3_backward(x, batch, f, h, w, kernel1, d, dk1);
    scatter_kernel_grad(g, dk1, 1, f, share);
    scatter_kernel_grad(g, dk2, 2, f, share);
    return dx + dsum;
  }

  void scatter_kernel_grad(ParamMap<S>& g, const MatrixR<S>& dk, int conv, Index f, bool share) const {
    const std::string key = conv_key(branch, index, conv);
    if (!share) {
      add_grad(g, key + ".kernel", dk);
      return;
    }
    auto& priv = g.at(key + ".private").values;
    auto& centre = g.at(centre_key(index, conv)).values;
    for (Index o = 0; o < f; ++o) {
      for (Index c = 0; c < f; ++c) {
        for (Index j = 0; j < 5; ++j) priv((o * f + c) * 5 + j) += dk(o, c * 9 + kPrivate[j]);
        for (Index j = 0; j < 4; ++j) centre((o * f + c) * 4 + j) += dk(o, c * 9 + kCentre[j]);
      }
    }
  }
};

template <typename S>
struct Branch {
  std::string name;
  Index in_channels, frames, width;
  MatrixR<S> input;
  std::vector<ConvBlock<S>> blocks;
  MatrixR<S> output;
  Index out_channels = 0, out_frames = 0, out_width = 0;
};

template <typename S>
class Graph {
 public:
  explicit Graph(const NetConfig& cfg) : cfg_(cfg) {
    for (const auto& b : branches_of(cfg)) {
      Branch<S> br;
      br.name = b.name;
      br.in_channels = b.in_channels;
      br.frames = cfg.input.frames;
      br.width = b.width;
      Index h = br.frames, w = br.width;
      for (int i = 0; i < cfg.conv_blocks; ++i) {
        ConvBlock<S> blk;
        blk.prefix = "branch." + b.name + ".block" + std::to_string(i);
        blk.branch = b.name;
        blk.index = i;
        blk.h = h;
        blk.w = w;
        br.blocks.push_back(std::move(blk));
        h /= 2;
        w /= 2;
      }
      br.out_channels = cfg.conv_blocks > 0 ? cfg.base_filters : br.in_channels;
      br.out_frames = h;
      br.out_width = w;
      branches_.push_back(std::move(br));
    }
    frames_out_ = branches_.front().out_frames;
    if (cfg.conformer_blocks > 0) {
      proj_.emplace(Linear<S>{"trunk.proj", {}});
      for (int k = 0; k < cfg.conformer_blocks; ++k) {
        conformers_.emplace_back("trunk.conformer" + std::to_string(k), cfg.attn_heads);
      }
    }
    if (cfg.head_hidden > 0) hidden_.emplace(Linear<S>{"head.hidden", {}});
    head_out_.key = "head.out";
  }

  bool recorded() const { return recorded_; }

  const MatrixR<S>& branch_output(const std::string& name) const {
    for (const auto& b : branches_) {
      if (b.name == name) return b.output;
    }
    throw usage_error("no branch named '" + name + "'");
  }

  VectorX<S> forward(NetParams<S>& params, std::span<const FeaturePair> batch, bool train, std::mt19937_64& rng,
                     bool record) {
    recorded_ = false;
    if (batch.empty()) throw data_error("forward: empty batch");
    for (const auto& f : batch) {
      if (!(input_shape_of(f) == cfg_.input)) {
        throw data_error("feature shape mismatch: segment " + std::to_string(f.index) +
                         " does not match the network input shape");
      }
    }
    batch_ = static_cast<Index>(batch.size());
    const Pass pass{train, record, cfg_.dropout_p, &rng};
    const auto& p = params.params;

    for (auto& br : branches_) {
      const bool is_mel = br.name == "mel";
      MatrixR<S> x(batch_ * br.in_channels, br.frames * br.width);
      for (Index b = 0; b < batch_; ++b) {
        const auto& src = is_mel ? batch[static_cast<std::size_t>(b)].logmel : batch[static_cast<std::size_t>(b)].gcc;
        x.middleRows(b * br.in_channels, br.in_channels) = src.template cast<S>();
      }
      if (cfg_.conv_blocks > 0) {
        const MatrixR<S> w = mat(p, "branch." + br.name + ".stem.weight");
        const VectorX<S>& bias = vec(p, "branch." + br.name + ".stem.bias");
        const Index f = cfg_.base_filters;
        MatrixR<S> y(batch_ * f, x.cols());
        for (Index b = 0; b < batch_; ++b) {
          y.middleRows(b * f, f).noalias() = w * x.middleRows(b * br.in_channels, br.in_channels);
          y.middleRows(b * f, f).colwise() += bias;
        }
        if (record) br.input = std::move(x);
        x = std::move(y);
        for (auto& blk : br.blocks) x = blk.forward(params, x, batch_, f, pass);
      }
      check_finite(x, "branch " + br.name);
      br.output = std::move(x);
    }

    // Fuse: one row per (sample, frame), branch features flattened channel-major.
    Index width = 0;
    for (const auto& br : branches_) width += br.out_channels * br.out_width;
    MatrixR<S> z(batch_ * frames_out_, width);
    Index offset = 0;
    for (const auto& br : branches_) {
      for (Index b = 0; b < batch_; ++b) {
        for (Index c = 0; c < br.out_channels; ++c) {
          const auto row = br.output.row(b * br.out_channels + c);
          for (Index t = 0; t < frames_out_; ++t) {
            z.row(b * frames_out_ + t).segment(offset + c * br.out_width, br.out_width) =
                row.segment(t * br.out_width, br.out_width);
          }
        }
      }
      offset += br.out_channels * br.out_width;
    }

    if (proj_) {
      z = proj_->forward(p, z, record);
      for (std::size_t k = 0; k < conformers_.size(); ++k) {
        z = conformers_[k].forward(params, z, batch_, frames_out_, pass);
        check_finite(z, "conformer " + std::to_string(k));
      }
    }

    MatrixR<S> pooled_rows(batch_, z.cols());
    for (Index b = 0; b < batch_; ++b) {
      pooled_rows.row(b) = z.middleRows(b * frames_out_, frames_out_).colwise().mean();
    }
    MatrixR<S> h = pooled_rows;
    if (hidden_) {
      h = hidden_->forward(p, h, record).cwiseMax(S(0));
      if (record) hidden_act_ = h;
    }
    const MatrixR<S> out = head_out_.forward(p, h, record);
    check_finite(out, "head");
    recorded_ = record && train;
    return Eigen::Map<const VectorX<S>>(out.data(), out.rows());
  }

  ParamMap<S> backward(const NetParams<S>& params, const VectorX<S>& grad_out) {
    if (!recorded_) throw usage_error("backward called without a stored training forward pass");
    if (grad_out.size() != batch_) throw data_error("backward: gradient length does not match the batch");
    const auto& p = params.params;
    ParamMap<S> g;
    for (const auto& [key, t] : p) {
      Tensor<S> z(t.shape);
      g.emplace(key, std::move(z));
    }

    MatrixR<S> d = head_out_.backward(p, g, MatrixR<S>(grad_out));
    if (hidden_) d = hidden_->backward(p, g, relu_backward(hidden_act_, d));

    MatrixR<S> dz(batch_ * frames_out_, d.cols());
    for (Index b = 0; b < batch_; ++b) {
      dz.middleRows(b * frames_out_, frames_out_).rowwise() = d.row(b) / static_cast<S>(frames_out_);
    }
    if (proj_) {
      for (auto it = conformers_.rbegin(); it != conformers_.rend(); ++it) {
        dz = it->backward(p, g, dz, batch_, frames_out_);
      }
      dz = proj_->backward(p, g, dz);
    }
    if (cfg_.conv_blocks == 0) return g;

    Index offset = 0;
    const bool share = tied(cfg_);
    for (const auto& br : branches_) {
      MatrixR<S> dx(batch_ * br.out_channels, frames_out_ * br.out_width);
      for (Index b = 0; b < batch_; ++b) {
        for (Index c = 0; c < br.out_channels; ++c) {
          auto row = dx.row(b * br.out_channels + c);
          for (Index t = 0; t < frames_out_; ++t) {
            row.segment(t * br.out_width, br.out_width) =
                dz.row(b * frames_out_ + t).segment(offset + c * br.out_width, br.out_width);
          }
        }
      }
      offset += br.out_channels * br.out_width;
      const Index f = cfg_.base_filters;
      for (auto it = br.blocks.rbegin(); it != br.blocks.rend(); ++it) {
        dx = it->backward(p, g, dx, batch_, f, share);
      }
      // Stem: y_b = W x_b + bias.
      const std::string stem = "branch." + br.name + ".stem";
      MatrixR<S> dw = MatrixR<S>::Zero(f, br.in_channels);
      VectorX<S> db = VectorX<S>::Zero(f);
      for (Index b = 0; b < batch_; ++b) {
        const auto dyb = dx.middleRows(b * f, f);
        dw.noalias() += dyb * br.input.middleRows(b * br.in_channels, br.in_channels).transpose();
        db += dyb.rowwise().sum();
      }
      add_grad(g, stem + ".weight", dw);
      add_grad(g, stem + ".bias", db);
    }
    return g;
  }

 private:
  NetConfig cfg_;
  std::vector<Branch<S>> branches_;
  Index frames_out_ = 0;
  Index batch_ = 0;
  std::optional<Linear<S>> proj_;
  std::vector<ConformerBlock<S>> conformers_;
  std::optional<Linear<S>> hidden_;
  MatrixR<S> hidden_act_;
  Linear<S> head_out_;
  bool recorded_ = false;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape

template <typename S>
Tape<S>::Tape() = default;
template <typename S>
Tape<S>::~Tape() = default;
template <typename S>
Tape<S>::Tape(Tape&&) noexcept = default;
template <typename S>
Tape<S>& Tape<S>::operator=(Tape&&) noexcept = default;

template <typename S>
bool Tape<S>::recorded() const {
  return graph_ && graph_->recorded();
}

template <typename S>
const MatrixR<S>& Tape<S>::branch_output(const std::string& branch) const {
  if (!graph_) throw usage_error("tape holds no forward pass");
  return graph_->branch_output(branch);
}

template <typename S>
void Tape<S>::reset(std::unique_ptr<detail::Graph<S>> graph) {
  graph_ = std::move(graph);
}

template <typename S>
VectorX<S> forward(NetParams<S>& p, std::span<const FeaturePair> batch, bool train_mode, std::mt19937_64& rng,
                   Tape<S>* tape) {
  auto graph = std::make_unique<detail::Graph<S>>(p.config);
  VectorX<S> out = graph->forward(p, batch, train_mode, rng, tape != nullptr);
  if (tape) tape->reset(std::move(graph));
  return out;
}

template <typename S>
VectorX<S> predict(const NetParams<S>& p, std::span<const FeaturePair> batch) {
  // Eval mode never writes to the buffers, so the const_cast is not observable.
  std::mt19937_64 unused(0);
  detail::Graph<S> graph(p.config);
  return graph.forward(const_cast<NetParams<S>&>(p), batch, false, unused, false);
}

template <typename S>
ParamMap<S> backward(const NetParams<S>& p, Tape<S>& tape, const VectorX<S>& grad_out) {
  if (!tape.graph()) throw usage_error("backward called without a stored training forward pass");
  return tape.graph()->backward(p, grad_out);
}

#define UWLOC_INSTANTIATE_NET(S)                                                                          \
  template NetParams<S> build_model<S>(const NetConfig&);                                                 \
  template MatrixR<S> effective_kernel<S>(const NetParams<S>&, const std::string&, int, int);            \
  template class Tape<S>;                                                                                 \
  template VectorX<S> forward<S>(NetParams<S>&, std::span<const FeaturePair>, bool, std::mt19937_64&,     \
                                 Tape<S>*);                                                               \
  template VectorX<S> predict<S>(const NetParams<S>&, std::span<const FeaturePair>);                      \
  template ParamMap<S> backward<S>(const NetParams<S>&, Tape<S>&, const VectorX<S>&);

UWLOC_INSTANTIATE_NET(float)
UWLOC_INSTANTIATE_NET(double)

}  // namespace uwloc
