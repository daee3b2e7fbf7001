#include "pathseg/backbone.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "pathseg/checkpoint.hpp"
#include "pathseg/nn.hpp"
#include "pathseg/random.hpp"

namespace pathseg {

using nn::Conv2d;
using nn::Param;

UNetConfig full_scale_unet_config() {
  UNetConfig c;
  c.level_channels = {320, 640, 1280, 1280};
  c.blocks_per_level = 2;
  c.middle_channels = 1280;
  c.time_dim = 1280;
  c.cond_tokens = 1;
  c.attn_dim = 64;
  return c;
}

// ---------------------------------------------------------------------------
// Descriptor

BackboneDescriptor BackboneDescriptor::from_unet(const UNetConfig& unet, std::size_t patch_size,
                                                 std::size_t cond_dim) {
  BackboneDescriptor d;
  d.patch_size = patch_size;
  d.cond_dim = cond_dim;
  d.block_ids.push_back("middle");
  d.block_channels.push_back(unet.middle_channels);
  std::size_t k = 1;
  for (std::size_t l = unet.level_channels.size(); l-- > 0;) {
    for (std::size_t i = 0; i <= unet.blocks_per_level; ++i) {
      d.block_ids.push_back("up_" + std::to_string(k++));
      d.block_channels.push_back(unet.level_channels[l]);
    }
  }
  return d;
}

void BackboneDescriptor::validate() const {
  require(!block_ids.empty(), ErrorKind::Validation, "descriptor declares zero blocks");
  require(block_ids.front() == "middle", ErrorKind::Validation, "descriptor must list 'middle' first");
  require(block_channels.size() == block_ids.size(), ErrorKind::Validation,
          "descriptor block_channels length differs from block_ids");
  for (std::size_t i = 0; i < block_ids.size(); ++i) {
    require(block_channels[i] > 0, ErrorKind::Validation, "block '" + block_ids[i] + "' has zero channels");
    for (std::size_t j = 0; j < i; ++j)
      require(block_ids[i] != block_ids[j], ErrorKind::Validation, "duplicate block id '" + block_ids[i] + "'");
  }
  require(latent_downsample_factor > 0 && latent_channels > 0 && patch_size > 0 && cond_dim > 0,
          ErrorKind::Validation, "descriptor sizes must be positive");
  require(patch_size % latent_downsample_factor == 0, ErrorKind::Validation,
          "patch size not divisible by the latent downsample factor");
}

std::size_t BackboneDescriptor::block_index(const std::string& id) const {
  for (std::size_t i = 0; i < block_ids.size(); ++i)
    if (block_ids[i] == id) return i;
  fail(ErrorKind::Parameter, "unknown block id '" + id + "'");
}

std::uint64_t BackboneDescriptor::hash() const {
  Fnv1a h;
  h.update_value(latent_downsample_factor);
  h.update_value(latent_channels);
  h.update_value(patch_size);
  h.update_value(cond_dim);
  for (std::size_t i = 0; i < block_ids.size(); ++i) {
    h.update(block_ids[i]);
    h.update_value(block_channels.at(i));
  }
  h.update(cross_attention);
  return h.digest();
}

bool BackboneDescriptor::same_layout(const BackboneDescriptor& o) const {
  return latent_downsample_factor == o.latent_downsample_factor && latent_channels == o.latent_channels &&
         patch_size == o.patch_size && cond_dim == o.cond_dim && block_ids == o.block_ids &&
         block_channels == o.block_channels && cross_attention == o.cross_attention;
}

// ---------------------------------------------------------------------------
// Building blocks (forward only, frozen)

namespace {

struct Linear {
  Param weight, bias;
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(const std::string& name, std::size_t in_dim, std::size_t out_dim, Rng& rng)
      : weight(name + ".weight", {in_dim, out_dim}), bias(name + ".bias", {out_dim}), in(in_dim), out(out_dim) {
    nn::init_uniform(weight, in_dim, rng);
    nn::init_uniform(bias, in_dim, rng);
  }

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(bias.value);
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = x[i];
      const double* row = weight.value.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) y[j] += xv * row[j];
    }
    return y;
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

struct Norm {
  Param gamma, beta;
  std::size_t groups = 1;

  Norm() = default;
  Norm(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}), groups(std::gcd(channels, std::size_t{4})) {
    std::fill(gamma.value.begin(), gamma.value.end(), 1.0);
  }
  Tensor apply(const Tensor& x) const { return nn::group_norm(x, groups, gamma, beta); }

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

std::vector<double> silu_vec(std::vector<double> v) {
  for (double& x : v) x = x / (1.0 + std::exp(-x));
  return v;
}

struct ResBlock {
  Norm norm1, norm2;
  Conv2d conv1, conv2;
  Linear time_proj;
  std::optional<Conv2d> skip;

  ResBlock() = default;
  ResBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t time_dim, Rng& rng)
      : norm1(name + ".norm1", cin),
        norm2(name + ".norm2", cout),
        conv1(name + ".conv1", cin, cout, 3, 1, 1, rng),
        conv2(name + ".conv2", cout, cout, 3, 1, 1, rng),
        time_proj(name + ".time_proj", time_dim, cout, rng) {
    if (cin != cout) skip.emplace(name + ".skip", cin, cout, 1, 1, 0, rng);
  }

  Tensor forward(const Tensor& x, const std::vector<double>& temb_act) const {
    Tensor h = conv1.forward(nn::silu(norm1.apply(x)));
    const auto t = time_proj.apply(temb_act);
    const std::size_t C = h.c();
    double* d = h.values().data();
    for (std::size_t p = 0; p < h.size() / C; ++p)
      for (std::size_t c = 0; c < C; ++c) d[p * C + c] += t[c];
    h = conv2.forward(nn::silu(norm2.apply(h)));
    const Tensor shortcut = skip ? skip->forward(x) : x;
    auto hv = h.values();
    auto sv = shortcut.values();
    for (std::size_t i = 0; i < hv.size(); ++i) hv[i] += sv[i];
    return h;
  }

  template <class F>
  void visit(F&& f) {
    norm1.visit(f);
    f(conv1.weight());
    f(conv1.bias());
    time_proj.visit(f);
    norm2.visit(f);
    f(conv2.weight());
    f(conv2.bias());
    if (skip) {
      f(skip->weight());
      f(skip->bias());
    }
  }
};

/// Cross-attention from pixel queries to conditioning tokens. The conditioning
/// vector is split into `tokens` equal chunks.
struct CrossAttention {
  Norm norm;
  Linear to_q, to_k, to_v, to_out;
  std::size_t tokens = 1, token_dim = 1, dim = 1;

  CrossAttention() = default;
  CrossAttention(const std::string& name, std::size_t channels, std::size_t cond_dim, std::size_t n_tokens,
                 std::size_t attn_dim, Rng& rng)
      : norm(name + ".norm", channels),
        to_q(name + ".to_q", channels, attn_dim, rng),
        to_k(name + ".to_k", cond_dim / n_tokens, attn_dim, rng),
        to_v(name + ".to_v", cond_dim / n_tokens, attn_dim, rng),
        to_out(name + ".to_out", attn_dim, channels, rng),
        tokens(n_tokens),
        token_dim(cond_dim / n_tokens),
        dim(attn_dim) {}

  Tensor forward(const Tensor& x, const std::vector<double>& y) const {
    const std::size_t C = x.c();
    std::vector<std::vector<double>> keys(tokens), values_out(tokens);
    for (std::size_t j = 0; j < tokens; ++j) {
      std::span<const double> tok(y.data() + j * token_dim, token_dim);
      keys[j] = to_k.apply(tok);
      // Fold the output projection into each value: out = sum_j p_j (v_j W_o) + b_o.
      const auto v = to_v.apply(tok);
      values_out[j].assign(C, 0.0);
      for (std::size_t d = 0; d < dim; ++d) {
        const double* row = to_out.weight.value.data() + d * C;
        for (std::size_t c = 0; c < C; ++c) values_out[j][c] += v[d] * row[c];
      }
    }
    const Tensor normed = norm.apply(x);
    Tensor out = x;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> scores(tokens);
    const std::size_t pixels = x.size() / C;
    for (std::size_t p = 0; p < pixels; ++p) {
      const auto q = to_q.apply(std::span<const double>(normed.values().data() + p * C, C));
      double mx = -1e300;
      for (std::size_t j = 0; j < tokens; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += q[d] * keys[j][d];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (double& s : scores) z += (s = std::exp(s - mx));
      double* o = out.values().data() + p * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += to_out.bias.value[c];
      for (std::size_t j = 0; j < tokens; ++j) {
        const double pj = scores[j] / z;
        for (std::size_t c = 0; c < C; ++c) o[c] += pj * values_out[j][c];
      }
    }
    return out;
  }

  template <class F>
  void visit(F&& f) {
    norm.visit(f);
    to_q.visit(f);
    to_k.visit(f);
    to_v.visit(f);
    to_out.visit(f);
  }
};

std::vector<double> timestep_embedding(int t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> e(dim, 0.0);
  const double log_base = std::log(10000.0) / static_cast<double>(std::max<std::size_t>(half, 1));
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(t) * std::exp(-static_cast<double>(i) * log_base);
    e[i] = std::cos(angle);
    e[i + half] = std::sin(angle);
  }
  return e;
}

struct ImageEncoder {
  Conv2d c1, c2, c3;

  ImageEncoder() = default;
  ImageEncoder(std::size_t latent_channels, Rng& rng)
      : c1("vae.enc1", 3, 16, 3, 2, 1, rng), c2("vae.enc2", 16, 16, 3, 2, 1, rng),
        c3("vae.enc3", 16, latent_channels, 3, 2, 1, rng) {}

  template <class F>
  void visit(F&& f) {
    for (Conv2d* c : {&c1, &c2, &c3}) {
      f(c->weight());
      f(c->bias());
    }
  }
};

struct ImageDecoder {
  nn::ConvTranspose2d t1, t2, t3;

  ImageDecoder(std::size_t latent_channels, Rng& rng)
      : t1("vae.dec1", latent_channels, 16, 2, 2, 0, rng), t2("vae.dec2", 16, 16, 2, 2, 0, rng),
        t3("vae.dec3", 16, 3, 2, 2, 0, rng) {}

  template <class F>
  void visit(F&& f) {
    for (nn::ConvTranspose2d* c : {&t1, &t2, &t3}) {
      f(c->weight());
      f(c->bias());
    }
  }
};

struct ConditionEncoder {
  Conv2d c1, c2, c3, c4;

  ConditionEncoder() = default;
  ConditionEncoder(std::size_t cond_dim, Rng& rng)
      : c1("ssl.conv1", 3, 8, 3, 2, 1, rng), c2("ssl.conv2", 8, 16, 3, 2, 1, rng),
        c3("ssl.conv3", 16, 32, 3, 2, 1, rng), c4("ssl.conv4", 32, cond_dim, 3, 2, 1, rng) {}

  template <class F>
  void visit(F&& f) {
    for (Conv2d* c : {&c1, &c2, &c3, &c4}) {
      f(c->weight());
      f(c->bias());
    }
  }
};

struct UNet {
  UNetConfig cfg;
  Conv2d conv_in;
  Linear time1, time2;
  std::vector<std::vector<ResBlock>> down;
  std::vector<Conv2d> downsample;
  ResBlock mid1, mid2;
  CrossAttention mid_attn;
  std::vector<std::vector<ResBlock>> up;
  std::vector<std::vector<CrossAttention>> up_attn;
  std::vector<Conv2d> upsample;

  UNet() = default;
  UNet(const UNetConfig& c, std::size_t latent_channels, std::size_t cond_dim, Rng& rng) : cfg(c) {
    const auto& lc = cfg.level_channels;
    const std::size_t L = lc.size();
    const std::size_t td = cfg.time_dim;
    conv_in = Conv2d("unet.conv_in", latent_channels, lc[0], 3, 1, 1, rng);
    time1 = Linear("unet.time1", td, td, rng);
    time2 = Linear("unet.time2", td, td, rng);
    std::vector<std::size_t> skip_channels{lc[0]};
    std::size_t ch = lc[0];
    down.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) {
        down[l].emplace_back("unet.down" + std::to_string(l) + "." + std::to_string(i), ch, lc[l], td, rng);
        ch = lc[l];
        skip_channels.push_back(ch);
      }
      if (l + 1 < L) {
        downsample.emplace_back("unet.downsample" + std::to_string(l), ch, ch, 3, 2, 1, rng);
        skip_channels.push_back(ch);
      }
    }
    mid1 = ResBlock("unet.mid1", ch, cfg.middle_channels, td, rng);
    mid_attn = CrossAttention("unet.mid_attn", cfg.middle_channels, cond_dim, cfg.cond_tokens, cfg.attn_dim, rng);
    mid2 = ResBlock("unet.mid2", cfg.middle_channels, cfg.middle_channels, td, rng);
    ch = cfg.middle_channels;
    up.resize(L);
    up_attn.resize(L);
    for (std::size_t l = L; l-- > 0;) {
      for (std::size_t i = 0; i <= cfg.blocks_per_level; ++i) {
        const std::size_t skip = skip_channels.back();
        skip_channels.pop_back();
        const std::string name = "unet.up" + std::to_string(l) + "." + std::to_string(i);
        up[l].emplace_back(name, ch + skip, lc[l], td, rng);
        up_attn[l].emplace_back(name + ".attn", lc[l], cond_dim, cfg.cond_tokens, cfg.attn_dim, rng);
        ch = lc[l];
      }
      if (l > 0) upsample.emplace_back("unet.upsample" + std::to_string(l), ch, ch, 3, 1, 1, rng);
    }
  }

  std::vector<Tensor> forward(const Tensor& z, int t, const std::vector<double>& y) const {
    const std::size_t L = cfg.level_channels.size();
    auto temb = time2.apply(silu_vec(time1.apply(timestep_embedding(t, cfg.time_dim))));
    const auto temb_act = silu_vec(temb);

    std::vector<Tensor> skips;
    Tensor h = conv_in.forward(z);
    skips.push_back(h);
    for (std::size_t l = 0; l < L; ++l) {
      for (const auto& block : down[l]) {
        h = block.forward(h, temb_act);
        skips.push_back(h);
      }
      if (l + 1 < L) {
        h = downsample[l].forward(h);
        skips.push_back(h);
      }
    }
    h = mid2.forward(mid_attn.forward(mid1.forward(h, temb_act), y), temb_act);
    std::vector<Tensor> taps{h};
    std::size_t up_index = 0;
    for (std::size_t l = L; l-- > 0;) {
      for (std::size_t i = 0; i <= cfg.blocks_per_level; ++i) {
        const Tensor parts[2] = {h, skips.back()};
        skips.pop_back();
        h = up_attn[l][i].forward(up[l][i].forward(concat_channels(parts), temb_act), y);
        if (i == cfg.blocks_per_level && l > 0) h = upsample[up_index++].forward(nn::upsample_nearest(h, 2));
        taps.push_back(h);
      }
    }
    return taps;
  }

  /// Scales the last layer of every residual branch (ResBlock conv2 and
  /// attention output projection) so blocks start close to their shortcut.
  void damp_residual_branches(double gain) {
    auto scale = [gain](Param& p) {
      for (double& v : p.value) v *= gain;
    };
    auto damp_block = [&](ResBlock& b) {
      scale(b.conv2.weight());
      scale(b.conv2.bias());
    };
    auto damp_attn = [&](CrossAttention& a) {
      scale(a.to_out.weight);
      scale(a.to_out.bias);
    };
    for (auto& level : down)
      for (auto& b : level) damp_block(b);
    damp_block(mid1);
    damp_block(mid2);
    damp_attn(mid_attn);
    for (auto& level : up)
      for (auto& b : level) damp_block(b);
    for (auto& level : up_attn)
      for (auto& a : level) damp_attn(a);
  }

  template <class F>
  void visit(F&& f) {
    f(conv_in.weight());
    f(conv_in.bias());
    time1.visit(f);
    time2.visit(f);
    for (auto& level : down)
      for (auto& b : level) b.visit(f);
    for (auto& d : downsample) {
      f(d.weight());
      f(d.bias());
    }
    mid1.visit(f);
    mid_attn.visit(f);
    mid2.visit(f);
    for (std::size_t l = up.size(); l-- > 0;)
      for (std::size_t i = 0; i < up[l].size(); ++i) {
        up[l][i].visit(f);
        up_attn[l][i].visit(f);
      }
    for (auto& u : upsample) {
      f(u.weight());
      f(u.bias());
    }
  }
};

Tensor to_signed(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = 2.0 * v - 1.0;
  return y;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::Validation, "checkpoint field '" + what + "' is not an integer: '" + s + "'");
  }
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& item : split(s)) out.push_back(parse_size(item, what));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

struct Backbone::Impl {
  Options options;
  BackboneDescriptor descriptor;
  ImageEncoder encoder;
  ConditionEncoder condition;
  UNet unet;
  Param null_cond;
  double latent_scale = 1.0;
  std::string conditioning;

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    condition.visit(f);
    unet.visit(f);
    f(null_cond);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Impl*>(this)->visit([&](Param& p) { f(static_cast<const Param&>(p)); });
  }
};

Backbone::Backbone(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Backbone::Backbone(Backbone&&) noexcept = default;
Backbone& Backbone::operator=(Backbone&&) noexcept = default;
Backbone::Backbone(const Backbone& o) : impl_(std::make_unique<Impl>(*o.impl_)) {}
Backbone& Backbone::operator=(const Backbone& o) {
  if (this != &o) impl_ = std::make_unique<Impl>(*o.impl_);
  return *this;
}
Backbone::~Backbone() = default;

Backbone Backbone::create_toy(const Options& options) {
  require(!options.unet.level_channels.empty(), ErrorKind::Validation, "UNet needs at least one level");
  require(options.unet.cond_tokens > 0 && options.cond_dim % options.unet.cond_tokens == 0,
          ErrorKind::Validation, "cond_dim must split evenly into conditioning tokens");
  require(options.unet.time_dim >= 2 && options.unet.time_dim % 2 == 0, ErrorKind::Validation,
          "time embedding dimension must be even");
  auto impl = std::make_unique<Impl>();
  impl->options = options;
  impl->descriptor = BackboneDescriptor::from_unet(options.unet, options.patch_size, options.cond_dim);
  impl->descriptor.frozen = false;
  impl->descriptor.validate();
  Rng rng(derive_seed({options.seed, 0xbac0b0e}));
  impl->encoder = ImageEncoder(impl->descriptor.latent_channels, rng);
  impl->condition = ConditionEncoder(options.cond_dim, rng);
  impl->unet = UNet(options.unet, impl->descriptor.latent_channels, options.cond_dim, rng);
  impl->unet.damp_residual_branches(options.residual_gain);
  impl->null_cond = Param("null_condition", {options.cond_dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : impl->null_cond.value) v = normal(rng);
  Backbone b(std::move(impl));
  b.set_conditioning(options.conditioning);
  return b;
}

const BackboneDescriptor& Backbone::descriptor() const { return impl_->descriptor; }
const UNetConfig& Backbone::unet_config() const { return impl_->options.unet; }
bool Backbone::frozen() const { return impl_->descriptor.frozen; }
void Backbone::freeze() { impl_->descriptor.frozen = true; }
double Backbone::latent_scale() const { return impl_->latent_scale; }
const std::string& Backbone::conditioning() const { return impl_->conditioning; }

void Backbone::set_conditioning(const std::string& mode) {
  require(mode == kConditionToySsl || mode == kConditionNone, ErrorKind::Parameter,
          "unknown conditioning mode '" + mode + "' (expected toy-ssl or none)");
  impl_->conditioning = mode;
}

namespace {

Tensor encode_raw(const ImageEncoder& e, const Tensor& signed_x) {
  return e.c3.forward(nn::silu(e.c2.forward(nn::silu(e.c1.forward(signed_x)))));
}

}  // namespace

Latent Backbone::encode_image(const Tensor& x) const {
  const auto f = impl_->descriptor.latent_downsample_factor;
  require(x.n() == 1 && x.c() == 3, ErrorKind::Shape, "encode_image expects one RGB image, got " + x.shape_string());
  require(x.h() > 0 && x.w() > 0 && x.h() % f == 0 && x.w() % f == 0, ErrorKind::Shape,
          "image dims " + std::to_string(x.h()) + "x" + std::to_string(x.w()) + " not divisible by " +
              std::to_string(f));
  Tensor z = encode_raw(impl_->encoder, to_signed(x));
  for (double& v : z.values()) v *= impl_->latent_scale;
  return Latent{std::move(z), 0};
}

ConditioningVector Backbone::encode_condition(const Tensor& x) const {
  const auto P = impl_->descriptor.patch_size;
  require(x.n() == 1 && x.h() == P && x.w() == P && x.c() == 3, ErrorKind::Shape,
          "conditioning encoder expects " + std::to_string(P) + "x" + std::to_string(P) + "x3, got " +
              x.shape_string());
  if (impl_->conditioning == kConditionNone) return null_condition();
  const auto& c = impl_->condition;
  Tensor h = nn::relu(c.c1.forward(to_signed(x)));
  h = nn::relu(c.c2.forward(h));
  h = nn::relu(c.c3.forward(h));
  h = c.c4.forward(h);
  ConditioningVector y{std::vector<double>(h.c(), 0.0), kConditionToySsl};
  const std::size_t pixels = h.h() * h.w();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t k = 0; k < h.c(); ++k) y.values[k] += h.values()[p * h.c() + k];
  for (double& v : y.values) v /= static_cast<double>(pixels);
  return y;
}

ConditioningVector Backbone::null_condition() const {
  return ConditioningVector{impl_->null_cond.value, kConditionNone};
}

std::vector<BlockActivation> Backbone::run_unet_with_taps(const Latent& z, const ConditioningVector& y) const {
  const auto& d = impl_->descriptor;
  require(d.frozen, ErrorKind::Validation, "feature extraction requires a frozen backbone");
  require(y.values.size() == d.cond_dim, ErrorKind::Shape,
          "conditioning dimension " + std::to_string(y.values.size()) + " != " + std::to_string(d.cond_dim));
  require(z.timestep >= 0, ErrorKind::Timestep, "negative timestep");
  require(z.values.n() == 1 && z.values.c() == d.latent_channels, ErrorKind::Shape,
          "latent must be (h, w, " + std::to_string(d.latent_channels) + "), got " + z.values.shape_string());
  const std::size_t div = std::size_t{1} << (impl_->options.unet.level_channels.size() - 1);
  require(z.values.h() % div == 0 && z.values.w() % div == 0 && z.values.h() > 0, ErrorKind::Shape,
          "latent dims must be divisible by " + std::to_string(div));
  auto taps = impl_->unet.forward(z.values, z.timestep, y.values);
  std::vector<BlockActivation> out;
  out.reserve(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) out.push_back({d.block_ids[i], std::move(taps[i]), z.timestep});
  return out;
}

AePretrainReport Backbone::pretrain_autoencoder(std::span<const Tensor> images, const AePretrainOptions& opt) {
  require(!frozen(), ErrorKind::Validation, "cannot pre-train a frozen backbone");
  require(!images.empty(), ErrorKind::Parameter, "autoencoder pre-training needs images");
  const auto f = impl_->descriptor.latent_downsample_factor;
  std::size_t crop = opt.crop;
  for (const auto& im : images) crop = std::min({crop, im.h(), im.w()});
  crop -= crop % f;
  require(crop >= f, ErrorKind::Parameter, "images too small for autoencoder pre-training");

  Rng rng(derive_seed({opt.seed, 0xae}));
  ImageDecoder decoder(impl_->descriptor.latent_channels, rng);
  auto& enc = impl_->encoder;
  std::vector<Param*> params;
  enc.visit([&](Param& p) { params.push_back(&p); });
  decoder.visit([&](Param& p) { params.push_back(&p); });
  nn::Adam adam(opt.learning_rate);

  auto sample_batch = [&](Rng& r) {
    std::vector<Tensor> crops;
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const Tensor& im = images[pick(r)];
      std::uniform_int_distribution<std::size_t> oy(0, im.h() - crop), ox(0, im.w() - crop);
      const std::size_t y0 = oy(r), x0 = ox(r);
      crops.push_back(to_signed(im.crop(y0, x0, crop, crop)));
    }
    return stack(crops);
  };

  AePretrainReport report;
  for (int step = 0; step < opt.steps; ++step) {
    const Tensor x = sample_batch(rng);
    const Tensor a1 = enc.c1.forward(x);
    const Tensor h1 = nn::silu(a1);
    const Tensor a2 = enc.c2.forward(h1);
    const Tensor h2 = nn::silu(a2);
    const Tensor z = enc.c3.forward(h2);
    const Tensor d1 = decoder.t1.forward(z);
    const Tensor g1 = nn::silu(d1);
    const Tensor d2 = decoder.t2.forward(g1);
    const Tensor g2 = nn::silu(d2);
    const Tensor r = decoder.t3.forward(g2);

    Tensor dr(r.n(), r.h(), r.w(), r.c());
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double diff = r.values()[i] - x.values()[i];
      loss += diff * diff * inv;
      dr.values()[i] = 2.0 * diff * inv;
    }
    if (step == 0) report.initial_loss = loss;
    report.final_loss = loss;
    require(std::isfinite(loss), ErrorKind::Runtime, "autoencoder pre-training diverged");

    for (Param* p : params) p->zero_grad();
    Tensor g = decoder.t3.backward(g2, dr);
    g = decoder.t2.backward(g1, nn::silu_backward(d2, g));
    g = decoder.t1.backward(z, nn::silu_backward(d1, g));
    g = enc.c3.backward(h2, g);
    g = enc.c2.backward(h1, nn::silu_backward(a2, g));
    enc.c1.backward(x, nn::silu_backward(a1, g));
    adam.step(params);
  }
  for (Param* p : params) p->zero_grad();

  // Normalise latent scale on a fresh, fixed set of crops.
  Rng probe(derive_seed({opt.seed, 0x5ca1e}));
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < 4; ++i) {
    const Tensor z = encode_raw(enc, sample_batch(probe));
    for (double v : z.values()) {
      sum += v;
      sq += v * v;
      ++count;
    }
  }
  const double mean = sum / static_cast<double>(count);
  const double sd = std::sqrt(std::max(sq / static_cast<double>(count) - mean * mean, 1e-12));
  impl_->latent_scale = 1.0 / sd;
  report.latent_scale = impl_->latent_scale;
  return report;
}

std::uint64_t Backbone::weight_hash() const {
  Fnv1a h;
  impl_->visit([&](const Param& p) {
    h.update(p.name);
    h.update(std::span<const double>(p.value));
  });
  h.update_value(impl_->latent_scale);
  return h.digest();
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  impl_->visit([&](const Param& p) { n += p.size(); });
  return n;
}

void Backbone::save(const std::filesystem::path& path) const {
  const auto& d = impl_->descriptor;
  const auto& u = impl_->options.unet;
  Checkpoint ck;
  ck.set("kind", std::string("backbone"));
  ck.set("latent_downsample_factor", static_cast<long long>(d.latent_downsample_factor));
  ck.set("latent_channels", static_cast<long long>(d.latent_channels));
  ck.set("patch_size", static_cast<long long>(d.patch_size));
  ck.set("cond_dim", static_cast<long long>(d.cond_dim));
  ck.set("block_ids", join(d.block_ids));
  ck.set("block_channels", join(d.block_channels));
  ck.set("cross_attention", d.cross_attention);
  ck.set("unet.level_channels", join(u.level_channels));
  ck.set("unet.blocks_per_level", static_cast<long long>(u.blocks_per_level));
  ck.set("unet.middle_channels", static_cast<long long>(u.middle_channels));
  ck.set("unet.time_dim", static_cast<long long>(u.time_dim));
  ck.set("unet.cond_tokens", static_cast<long long>(u.cond_tokens));
  ck.set("unet.attn_dim", static_cast<long long>(u.attn_dim));
  ck.set("latent_scale", impl_->latent_scale);
  ck.set("conditioning", impl_->conditioning);
  ck.set("weight_hash", std::to_string(weight_hash()));
  impl_->visit([&](const Param& p) { ck.add_array(p.name, p.shape, p.value); });
  ck.save(path);
}

Backbone Backbone::load(const std::filesystem::path& path, const BackboneDescriptor* expected) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.get("kind").value_or("") != "backbone") fail(ErrorKind::Load, path.string() + " is not a backbone checkpoint");

  BackboneDescriptor declared;
  declared.latent_downsample_factor = parse_size(ck.require_key("latent_downsample_factor"), "latent_downsample_factor");
  declared.latent_channels = parse_size(ck.require_key("latent_channels"), "latent_channels");
  declared.patch_size = parse_size(ck.require_key("patch_size"), "patch_size");
  declared.cond_dim = parse_size(ck.require_key("cond_dim"), "cond_dim");
  declared.block_ids = split(ck.require_key("block_ids"));
  declared.block_channels = parse_sizes(ck.require_key("block_channels"), "block_channels");
  declared.cross_attention = ck.get("cross_attention").value_or("one-per-block");
  declared.validate();
  require(declared.latent_downsample_factor == 8, ErrorKind::Validation,
          "toy autoencoder supports a downsample factor of 8 only");
  require(declared.latent_channels == 4, ErrorKind::Validation, "toy autoencoder supports 4 latent channels only");

  Options opt;
  opt.patch_size = declared.patch_size;
  opt.cond_dim = declared.cond_dim;
  opt.unet.level_channels = parse_sizes(ck.require_key("unet.level_channels"), "unet.level_channels");
  opt.unet.blocks_per_level = parse_size(ck.require_key("unet.blocks_per_level"), "unet.blocks_per_level");
  opt.unet.middle_channels = parse_size(ck.require_key("unet.middle_channels"), "unet.middle_channels");
  opt.unet.time_dim = parse_size(ck.require_key("unet.time_dim"), "unet.time_dim");
  opt.unet.cond_tokens = parse_size(ck.require_key("unet.cond_tokens"), "unet.cond_tokens");
  opt.unet.attn_dim = parse_size(ck.require_key("unet.attn_dim"), "unet.attn_dim");
  opt.conditioning = ck.get("conditioning").value_or(kConditionToySsl);

  Backbone b = create_toy(opt);
  require(b.descriptor().same_layout(declared), ErrorKind::Validation,
          "checkpoint descriptor does not match its UNet layout");
  if (expected) {
    require(declared.same_layout(*expected), ErrorKind::Validation,
            "checkpoint descriptor does not match the configured backbone descriptor");
  }
  b.impl_->visit([&](Param& p) { p.value = ck.require_array(p.name, p.size()).data; });
  try {
    b.impl_->latent_scale = std::stod(ck.require_key("latent_scale"));
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(ErrorKind::Validation, "latent_scale is not a number");
  }
  b.freeze();
  if (auto stored = ck.get("weight_hash"); stored && *stored != std::to_string(b.weight_hash())) {
    fail(ErrorKind::Load, "backbone weights are corrupt (hash mismatch): " + path.string());
  }
  return b;
}

}  // namespace pathseg
