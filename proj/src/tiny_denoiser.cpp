#include "finecontrol/tiny_denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "finecontrol/error.hpp"
#include "finecontrol/png_io.hpp"

namespace finecontrol::denoise {
namespace {

constexpr int kTimeFeatures = 7;
constexpr int kHeadFeatures = 4;
constexpr char kMagic[8] = {'F', 'C', 'N', 'T', 'I', 'N', 'Y', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::array<double, kTimeFeatures> time_features(int t, const diffusion::NoiseSchedule& sched) {
  const double s = static_cast<double>(t) / sched.horizon();
  const double ab = sched.alpha_bar(t);
  const double pi = std::numbers::pi;
  return {std::sin(pi * s),       std::cos(pi * s),       std::sin(2 * pi * s), std::cos(2 * pi * s),
          std::sin(4 * pi * s),   std::cos(4 * pi * s),   std::log(ab / (1.0 - ab)) / 10.0};
}

std::array<double, kHeadFeatures> head_features(int t, const diffusion::NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  return {inv, std::sqrt(ab) * inv, 1.0, std::sqrt(ab)};
}

// Offsets of one level's parameters inside the flat vector.
struct Block {
  int cin = 0;
  int cout = 0;
  std::size_t conv_w = 0, conv_b = 0, time = 0;
  std::size_t wq = 0, bq = 0, wk = 0, wv = 0;
  std::size_t ctrl_w = 0, ctrl_b = 0;
  bool has_ctrl = false;
};

struct Layout {
  Block enc[3];
  Block dec[3];  // dec[0] is the 1/4 level, dec[2] the full level
  std::size_t out_w = 0, out_b = 0, head_skip = 0, head_scale = 0;
  int c[3] = {0, 0, 0};
  int key_dim = 0;
};

Layout make_layout(const TinyParams& p) {
  Layout l;
  const TinyConfig& cfg = p.config();
  l.c[0] = cfg.c0;
  l.c[1] = cfg.c1;
  l.c[2] = cfg.c2;
  l.key_dim = cfg.key_dim;
  auto fill = [&](Block& b, const std::string& prefix, int cin, int cout, bool ctrl) {
    b.cin = cin;
    b.cout = cout;
    b.conv_w = p.slice_info(prefix + ".conv.w").offset;
    b.conv_b = p.slice_info(prefix + ".conv.b").offset;
    b.time = p.slice_info(prefix + ".time").offset;
    b.wq = p.slice_info(prefix + ".attn.wq").offset;
    b.bq = p.slice_info(prefix + ".attn.bq").offset;
    b.wk = p.slice_info(prefix + ".attn.wk").offset;
    b.wv = p.slice_info(prefix + ".attn.wv").offset;
    b.has_ctrl = ctrl;
    if (ctrl) {
      b.ctrl_w = p.slice_info(prefix + ".ctrl.w").offset;
      b.ctrl_b = p.slice_info(prefix + ".ctrl.b").offset;
    }
  };
  fill(l.enc[0], "enc0", 3, cfg.c0, false);
  fill(l.enc[1], "enc1", cfg.c0, cfg.c1, false);
  fill(l.enc[2], "enc2", cfg.c1, cfg.c2, false);
  fill(l.dec[0], "dec2", cfg.c2, cfg.c2, true);
  fill(l.dec[1], "dec1", cfg.c2, cfg.c1, true);
  fill(l.dec[2], "dec0", cfg.c1, cfg.c0, true);
  l.out_w = p.slice_info("out.conv.w").offset;
  l.out_b = p.slice_info("out.conv.b").offset;
  l.head_skip = p.slice_info("head.skip").offset;
  l.head_scale = p.slice_info("head.scale").offset;
  return l;
}

// 3x3 convolution with zero padding.
Tensor conv3x3(const double* w, const double* b, int cout, const Tensor& in) {
  const int cin = in.channels();
  const int h = in.height();
  const int wd = in.width();
  Tensor out(cout, h, wd);
  for (int o = 0; o < cout; ++o) {
    auto dst_plane = out.plane(o);
    std::fill(dst_plane.begin(), dst_plane.end(), b[o]);
    for (int i = 0; i < cin; ++i) {
      const double* src_plane = in.plane(i).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy);
        const int y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(wd, wd - dx);
          const double wv = w[((o * cin + i) * 3 + ky) * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            const double* src = src_plane + (y + dy) * wd + dx;
            double* dst = dst_plane.data() + y * wd;
            for (int x = x0; x < x1; ++x) dst[x] += wv * src[x];
          }
        }
      }
    }
  }
  return out;
}

void conv3x3_backward(const double* w, int cout, const Tensor& in, const Tensor& gout, Tensor* gin,
                      double* gw, double* gb) {
  const int cin = in.channels();
  const int h = in.height();
  const int wd = in.width();
  for (int o = 0; o < cout; ++o) {
    const double* g_plane = gout.plane(o).data();
    double sum = 0.0;
    for (std::size_t k = 0; k < gout.plane_size(); ++k) sum += g_plane[k];
    gb[o] += sum;
    for (int i = 0; i < cin; ++i) {
      const double* src_plane = in.plane(i).data();
      double* gin_plane = gin ? gin->plane(i).data() : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy);
        const int y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(wd, wd - dx);
          const std::size_t widx = ((o * cin + i) * 3 + ky) * 3 + kx;
          const double wv = w[widx];
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const double* src = src_plane + (y + dy) * wd + dx;
            const double* g = g_plane + y * wd;
            for (int x = x0; x < x1; ++x) acc += g[x] * src[x];
            if (gin_plane) {
              double* dst = gin_plane + (y + dy) * wd + dx;
              for (int x = x0; x < x1; ++x) dst[x] += wv * g[x];
            }
          }
          gw[widx] += acc;
        }
      }
    }
  }
}

void add_time_bias(Tensor& z, const double* time, const std::array<double, kTimeFeatures>& psi) {
  for (int c = 0; c < z.channels(); ++c) {
    double bias = 0.0;
    for (int f = 0; f < kTimeFeatures; ++f) bias += time[c * kTimeFeatures + f] * psi[f];
    for (double& v : z.plane(c)) v += bias;
  }
}

void time_bias_backward(const Tensor& gz, double* gtime, const std::array<double, kTimeFeatures>& psi) {
  for (int c = 0; c < gz.channels(); ++c) {
    double sum = 0.0;
    for (double v : gz.plane(c)) sum += v;
    for (int f = 0; f < kTimeFeatures; ++f) gtime[c * kTimeFeatures + f] += sum * psi[f];
  }
}

void relu_inplace(Tensor& t) {
  for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
}

void relu_backward(const Tensor& pre, Tensor& g) {
  auto p = pre.data();
  auto d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(p[i] > 0.0)) d[i] = 0.0;
  }
}

Tensor pool_backward(const Tensor& gout) {
  Tensor gin(gout.channels(), gout.height() * 2, gout.width() * 2);
  for (int c = 0; c < gin.channels(); ++c) {
    for (int y = 0; y < gin.height(); ++y) {
      for (int x = 0; x < gin.width(); ++x) gin.at(c, y, x) = 0.25 * gout.at(c, y / 2, x / 2);
    }
  }
  return gin;
}

Tensor upsample_backward(const Tensor& gout) {
  Tensor gin(gout.channels(), gout.height() / 2, gout.width() / 2);
  for (int c = 0; c < gout.channels(); ++c) {
    for (int y = 0; y < gout.height(); ++y) {
      for (int x = 0; x < gout.width(); ++x) gin.at(c, y / 2, x / 2) += gout.at(c, y, x);
    }
  }
  return gin;
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct AttnCache {
  Tensor input;
  std::vector<std::vector<double>> q;       // key_dim planes
  std::vector<std::vector<double>> weights;  // token planes
  std::vector<std::vector<double>> keys;     // token x key_dim
  std::vector<std::vector<double>> values;   // token x channels
};

// out = h + sum_j softmax_j(q(h) . k_j / sqrt(d)) v_j, per pixel.
Tensor cross_attention(const double* params, const Block& b, int key_dim, const Tensor& h,
                       const std::vector<TextEmbedding>& tokens, AttnCache* cache) {
  const int c = h.channels();
  const std::size_t np = h.plane_size();
  const std::size_t nt = tokens.size();
  const double* wq = params + b.wq;
  const double* bq = params + b.bq;
  const double* wk = params + b.wk;
  const double* wv = params + b.wv;
  const double scale = 1.0 / std::sqrt(static_cast<double>(key_dim));

  std::vector<std::vector<double>> keys(nt, std::vector<double>(key_dim, 0.0));
  std::vector<std::vector<double>> values(nt, std::vector<double>(c, 0.0));
  for (std::size_t j = 0; j < nt; ++j) {
    const auto& tv = tokens[j].vector;
    for (int d = 0; d < key_dim; ++d) {
      double s = 0.0;
      for (int e = 0; e < kTextWidth; ++e) s += wk[d * kTextWidth + e] * tv[e];
      keys[j][d] = s;
    }
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int e = 0; e < kTextWidth; ++e) s += wv[ch * kTextWidth + e] * tv[e];
      values[j][ch] = s;
    }
  }

  std::vector<std::vector<double>> q(key_dim, std::vector<double>(np));
  for (int d = 0; d < key_dim; ++d) {
    auto& qd = q[d];
    std::fill(qd.begin(), qd.end(), bq[d]);
    for (int ch = 0; ch < c; ++ch) {
      const double w = wq[d * c + ch];
      const double* hp = h.plane(ch).data();
      for (std::size_t p = 0; p < np; ++p) qd[p] += w * hp[p];
    }
  }

  std::vector<std::vector<double>> a(nt, std::vector<double>(np, 0.0));
  for (std::size_t j = 0; j < nt; ++j) {
    auto& aj = a[j];
    for (int d = 0; d < key_dim; ++d) {
      const double k = keys[j][d] * scale;
      const auto& qd = q[d];
      for (std::size_t p = 0; p < np; ++p) aj[p] += k * qd[p];
    }
  }
  for (std::size_t p = 0; p < np; ++p) {
    double peak = a[0][p];
    for (std::size_t j = 1; j < nt; ++j) peak = std::max(peak, a[j][p]);
    double total = 0.0;
    for (std::size_t j = 0; j < nt; ++j) {
      a[j][p] = std::exp(a[j][p] - peak);
      total += a[j][p];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < nt; ++j) a[j][p] *= inv;
  }

  Tensor out = h;
  for (int ch = 0; ch < c; ++ch) {
    double* op = out.plane(ch).data();
    for (std::size_t j = 0; j < nt; ++j) {
      const double v = values[j][ch];
      const auto& aj = a[j];
      for (std::size_t p = 0; p < np; ++p) op[p] += aj[p] * v;
    }
  }
  if (cache) {
    cache->input = h;
    cache->q = std::move(q);
    cache->weights = std::move(a);
    cache->keys = std::move(keys);
    cache->values = std::move(values);
  }
  return out;
}

Tensor cross_attention_backward(const double* params, const Block& b, int key_dim,
                                const std::vector<TextEmbedding>& tokens, const AttnCache& cache,
                                const Tensor& gout, double* grad) {
  const Tensor& h = cache.input;
  const int c = h.channels();
  const std::size_t np = h.plane_size();
  const std::size_t nt = tokens.size();
  const double* wq = params + b.wq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(key_dim));
  const auto& a = cache.weights;
  const auto& q = cache.q;

  Tensor gin = gout;
  std::vector<std::vector<double>> ga(nt, std::vector<double>(np, 0.0));
  std::vector<std::vector<double>> gvalues(nt, std::vector<double>(c, 0.0));
  for (std::size_t j = 0; j < nt; ++j) {
    for (int ch = 0; ch < c; ++ch) {
      const double v = cache.values[j][ch];
      const double* g = gout.plane(ch).data();
      double acc = 0.0;
      for (std::size_t p = 0; p < np; ++p) {
        ga[j][p] += v * g[p];
        acc += a[j][p] * g[p];
      }
      gvalues[j][ch] = acc;
    }
  }
  // Softmax backward: gs_j = a_j (ga_j - sum_k a_k ga_k).
  std::vector<double> mean(np, 0.0);
  for (std::size_t j = 0; j < nt; ++j) {
    for (std::size_t p = 0; p < np; ++p) mean[p] += a[j][p] * ga[j][p];
  }
  for (std::size_t j = 0; j < nt; ++j) {
    for (std::size_t p = 0; p < np; ++p) ga[j][p] = a[j][p] * (ga[j][p] - mean[p]);
  }
  std::vector<std::vector<double>> gkeys(nt, std::vector<double>(key_dim, 0.0));
  std::vector<std::vector<double>> gq(key_dim, std::vector<double>(np, 0.0));
  for (std::size_t j = 0; j < nt; ++j) {
    for (int d = 0; d < key_dim; ++d) {
      const double k = cache.keys[j][d] * scale;
      double acc = 0.0;
      for (std::size_t p = 0; p < np; ++p) {
        gq[d][p] += k * ga[j][p];
        acc += ga[j][p] * q[d][p];
      }
      gkeys[j][d] = acc * scale;
    }
  }
  double* gwq = grad + b.wq;
  double* gbq = grad + b.bq;
  double* gwk = grad + b.wk;
  double* gwv = grad + b.wv;
  for (int d = 0; d < key_dim; ++d) {
    double sum = 0.0;
    for (std::size_t p = 0; p < np; ++p) sum += gq[d][p];
    gbq[d] += sum;
    for (int ch = 0; ch < c; ++ch) {
      const double* hp = h.plane(ch).data();
      double* gp = gin.plane(ch).data();
      const double w = wq[d * c + ch];
      double acc = 0.0;
      for (std::size_t p = 0; p < np; ++p) {
        acc += gq[d][p] * hp[p];
        gp[p] += w * gq[d][p];
      }
      gwq[d * c + ch] += acc;
    }
  }
  for (std::size_t j = 0; j < nt; ++j) {
    const auto& tv = tokens[j].vector;
    for (int d = 0; d < key_dim; ++d) {
      for (int e = 0; e < kTextWidth; ++e) gwk[d * kTextWidth + e] += gkeys[j][d] * tv[e];
    }
    for (int ch = 0; ch < c; ++ch) {
      for (int e = 0; e < kTextWidth; ++e) gwv[ch * kTextWidth + e] += gvalues[j][ch] * tv[e];
    }
  }
  return gin;
}

struct ForwardCache {
  std::array<double, kTimeFeatures> psi{};
  std::array<double, kHeadFeatures> phi{};
  Tensor x;
  Tensor controls[3];     // full, 1/2, 1/4 control fields
  Tensor enc_in[3];       // conv input per encoder level
  Tensor enc_pre[3];      // pre-activation
  AttnCache enc_attn[3];
  Tensor dec_in[3];       // conv input per decoder level (dec[0] = 1/4)
  Tensor dec_pre[3];
  AttnCache dec_attn[3];
  Tensor head_in;         // input of the output convolution
  Tensor u;
  double a = 0.0;
  double b = 0.0;
};

Image forward(const TinyParams& params, const Layout& l, const diffusion::NoiseSchedule& sched,
              const Image& x, int t, const BranchCondition& cond, const SiteHooks* hooks,
              ForwardCache* cache) {
  if (x.channels() != 3 || x.height() % 4 != 0 || x.width() % 4 != 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "tiny denoiser needs 3 channels and sides divisible by 4, got " + shape_string(x));
  }
  if (cond.tokens.empty()) throw Error(ErrorCode::kShapeMismatch, "at least one text token required");
  if (cond.control.field.channels() != 1 || cond.control.field.shape2() != x.shape2()) {
    throw Error(ErrorCode::kShapeMismatch, "control field must be 1 x H x W of the canvas");
  }
  const double* p = params.values().data();
  const auto psi = time_features(t, sched);
  const auto phi = head_features(t, sched);

  auto site = [&](int index, Tensor& latent) {
    if (hooks && hooks->after_cross_attention[index]) hooks->after_cross_attention[index](latent);
  };
  auto control_site = [&](int index, Tensor& ctrl) {
    if (hooks && !hooks->before_control_injection.empty() && hooks->before_control_injection[index]) {
      hooks->before_control_injection[index](ctrl);
    }
  };

  Tensor ctrl_full = cond.control.field;
  Tensor ctrl_half = avg_pool2(ctrl_full);
  Tensor ctrl_quarter = avg_pool2(ctrl_half);

  Tensor skips[3];
  Tensor cur = x;
  for (int lvl = 0; lvl < 3; ++lvl) {
    const Block& b = l.enc[lvl];
    Tensor in = lvl == 0 ? cur : avg_pool2(cur);
    Tensor z = conv3x3(p + b.conv_w, p + b.conv_b, b.cout, in);
    add_time_bias(z, p + b.time, psi);
    Tensor act = z;
    relu_inplace(act);
    Tensor hlat = cross_attention(p, b, l.key_dim, act, cond.tokens, cache ? &cache->enc_attn[lvl] : nullptr);
    site(lvl, hlat);
    if (cache) {
      cache->enc_in[lvl] = std::move(in);
      cache->enc_pre[lvl] = std::move(z);
    }
    skips[lvl] = hlat;
    cur = std::move(hlat);
  }

  const Tensor* level_ctrl[3] = {&ctrl_quarter, &ctrl_half, &ctrl_full};
  for (int k = 0; k < 3; ++k) {
    const Block& b = l.dec[k];
    const int skip_level = 2 - k;  // dec[0] pairs with enc2 (no additive skip)
    Tensor in = k == 0 ? cur : upsample2(cur);
    Tensor z = conv3x3(p + b.conv_w, p + b.conv_b, b.cout, in);
    add_time_bias(z, p + b.time, psi);
    if (k > 0) add_into(z, skips[skip_level]);
    Tensor act = z;
    relu_inplace(act);
    Tensor ctrl = conv3x3(p + b.ctrl_w, p + b.ctrl_b, b.cout, *level_ctrl[k]);
    control_site(k, ctrl);
    add_into(act, ctrl);
    Tensor hlat = cross_attention(p, b, l.key_dim, act, cond.tokens, cache ? &cache->dec_attn[k] : nullptr);
    site(3 + k, hlat);
    if (cache) {
      cache->dec_in[k] = std::move(in);
      cache->dec_pre[k] = std::move(z);
    }
    cur = std::move(hlat);
  }

  Tensor u = conv3x3(p + l.out_w, p + l.out_b, 3, cur);
  double a = 0.0, bs = 0.0;
  for (int f = 0; f < kHeadFeatures; ++f) {
    a += p[l.head_skip + f] * phi[f];
    bs += p[l.head_scale + f] * phi[f];
  }
  Image eps(3, x.height(), x.width());
  auto e = eps.data();
  auto xs = x.data();
  auto us = u.data();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = a * xs[i] + bs * us[i];

  if (cache) {
    cache->psi = psi;
    cache->phi = phi;
    cache->x = x;
    cache->controls[0] = std::move(ctrl_full);
    cache->controls[1] = std::move(ctrl_half);
    cache->controls[2] = std::move(ctrl_quarter);
    cache->head_in = std::move(cur);
    cache->u = std::move(u);
    cache->a = a;
    cache->b = bs;
  }
  return eps;
}

void backward(const TinyParams& params, const Layout& l, const BranchCondition& cond,
              const ForwardCache& cache, const Image& geps, double* grad) {
  const double* p = params.values().data();
  // Output head.
  {
    double ga = 0.0, gb = 0.0;
    auto g = geps.data();
    auto xs = cache.x.data();
    auto us = cache.u.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga += g[i] * xs[i];
      gb += g[i] * us[i];
    }
    for (int f = 0; f < kHeadFeatures; ++f) {
      grad[l.head_skip + f] += ga * cache.phi[f];
      grad[l.head_scale + f] += gb * cache.phi[f];
    }
  }
  Tensor gu(3, cache.x.height(), cache.x.width());
  {
    auto g = geps.data();
    auto d = gu.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = cache.b * g[i];
  }
  Tensor gcur(cache.head_in.channels(), cache.head_in.height(), cache.head_in.width());
  conv3x3_backward(p + l.out_w, 3, cache.head_in, gu, &gcur, grad + l.out_w, grad + l.out_b);

  Tensor gskips[3];
  for (int lvl = 0; lvl < 3; ++lvl) {
    gskips[lvl] = Tensor(l.c[lvl], cache.enc_pre[lvl].height(), cache.enc_pre[lvl].width());
  }
  const int ctrl_index[3] = {2, 1, 0};  // dec[k] uses controls[ctrl_index[k]]
  for (int k = 2; k >= 0; --k) {
    const Block& b = l.dec[k];
    Tensor gact = cross_attention_backward(p, b, l.key_dim, cond.tokens, cache.dec_attn[k], gcur, grad);
    conv3x3_backward(p + b.ctrl_w, b.cout, cache.controls[ctrl_index[k]], gact, nullptr,
                     grad + b.ctrl_w, grad + b.ctrl_b);
    relu_backward(cache.dec_pre[k], gact);
    time_bias_backward(gact, grad + b.time, cache.psi);
    if (k > 0) add_into(gskips[2 - k], gact);
    Tensor gin(cache.dec_in[k].channels(), cache.dec_in[k].height(), cache.dec_in[k].width());
    conv3x3_backward(p + b.conv_w, b.cout, cache.dec_in[k], gact, &gin, grad + b.conv_w, grad + b.conv_b);
    gcur = k == 0 ? std::move(gin) : upsample_backward(gin);
  }
  // gcur is now the gradient w.r.t. the enc2 latent (excluding skips).
  for (int lvl = 2; lvl >= 0; --lvl) {
    const Block& b = l.enc[lvl];
    add_into(gcur, gskips[lvl]);
    Tensor gact = cross_attention_backward(p, b, l.key_dim, cond.tokens, cache.enc_attn[lvl], gcur, grad);
    relu_backward(cache.enc_pre[lvl], gact);
    time_bias_backward(gact, grad + b.time, cache.psi);
    const bool need_input = lvl > 0;
    Tensor gin(cache.enc_in[lvl].channels(), cache.enc_in[lvl].height(), cache.enc_in[lvl].width());
    conv3x3_backward(p + b.conv_w, b.cout, cache.enc_in[lvl], gact, need_input ? &gin : nullptr,
                     grad + b.conv_w, grad + b.conv_b);
    if (need_input) gcur = pool_backward(gin);
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

TinyParams::TinyParams(TinyConfig config) : config_(config) {
  const int c[3] = {config.c0, config.c1, config.c2};
  const int dk = config.key_dim;
  auto level = [&](const std::string& prefix, int cin, int cout, bool ctrl) {
    add(prefix + ".conv.w", {cout, cin, 3, 3});
    add(prefix + ".conv.b", {cout});
    add(prefix + ".time", {cout, kTimeFeatures});
    if (ctrl) {
      add(prefix + ".ctrl.w", {cout, 1, 3, 3});
      add(prefix + ".ctrl.b", {cout});
    }
    add(prefix + ".attn.wq", {dk, cout});
    add(prefix + ".attn.bq", {dk});
    add(prefix + ".attn.wk", {dk, kTextWidth});
    add(prefix + ".attn.wv", {cout, kTextWidth});
  };
  level("enc0", 3, c[0], false);
  level("enc1", c[0], c[1], false);
  level("enc2", c[1], c[2], false);
  level("dec2", c[2], c[2], true);
  level("dec1", c[2], c[1], true);
  level("dec0", c[1], c[0], true);
  add("out.conv.w", {3, c[0], 3, 3});
  add("out.conv.b", {3});
  add("head.skip", {kHeadFeatures});
  add("head.scale", {kHeadFeatures});
}

void TinyParams::add(std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  slices_.push_back({std::move(name), std::move(shape), values_.size(), n});
  values_.resize(values_.size() + n, 0.0);
}

const ParamSlice& TinyParams::slice_info(std::string_view name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::kIo, "no parameter named " + std::string(name));
}

std::span<double> TinyParams::slice(std::string_view name) {
  const auto& s = slice_info(name);
  return {values_.data() + s.offset, s.size};
}

std::span<const double> TinyParams::slice(std::string_view name) const {
  const auto& s = slice_info(name);
  return {values_.data() + s.offset, s.size};
}

void TinyParams::randomize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& s : slices_) {
    double std_dev = 0.0;
    const std::string& n = s.name;
    auto ends_with = [&](std::string_view suffix) {
      return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".conv.w") || ends_with(".ctrl.w")) {
      const int fan_in = s.shape[1] * 9;
      std_dev = std::sqrt(2.0 / fan_in);
      if (n == "out.conv.w") std_dev *= 0.5;
    } else if (ends_with(".attn.wq")) {
      std_dev = 1.0 / std::sqrt(static_cast<double>(s.shape[1]));
    } else if (ends_with(".attn.wk") || ends_with(".attn.wv")) {
      std_dev = 1.0 / std::sqrt(static_cast<double>(kTextWidth));
    }
    for (std::size_t i = 0; i < s.size; ++i) {
      values_[s.offset + i] = std_dev > 0.0 ? std_dev * normal(rng) : 0.0;
    }
  }
}

std::vector<std::uint8_t> TinyParams::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(config_.c0));
  put_u32(out, static_cast<std::uint32_t>(config_.c1));
  put_u32(out, static_cast<std::uint32_t>(config_.c2));
  put_u32(out, static_cast<std::uint32_t>(config_.key_dim));
  put_u32(out, static_cast<std::uint32_t>(slices_.size()));
  for (const auto& s : slices_) {
    put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    put_u32(out, static_cast<std::uint32_t>(s.shape.size()));
    for (int d : s.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < s.size; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &values_[s.offset + i], 8);
      for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
    }
  }
  return out;
}

TinyParams TinyParams::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(kMagic, kMagic + 8, bytes.begin())) {
    throw Error(ErrorCode::kIo, "not a tiny denoiser checkpoint");
  }
  std::size_t pos = 8;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kIo, "unsupported checkpoint version " + std::to_string(version));
  }
  TinyConfig cfg;
  cfg.c0 = static_cast<int>(get_u32(bytes, pos));
  cfg.c1 = static_cast<int>(get_u32(bytes, pos));
  cfg.c2 = static_cast<int>(get_u32(bytes, pos));
  cfg.key_dim = static_cast<int>(get_u32(bytes, pos));
  TinyParams params(cfg);
  const std::uint32_t count = get_u32(bytes, pos);
  if (count != params.slices_.size()) throw Error(ErrorCode::kIo, "checkpoint tensor count mismatch");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = get_u32(bytes, pos);
    if (pos + name_len > bytes.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const ParamSlice& s = params.slice_info(name);
    const std::uint32_t ndim = get_u32(bytes, pos);
    if (ndim != s.shape.size()) throw Error(ErrorCode::kIo, "rank mismatch for " + name);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      if (static_cast<int>(get_u32(bytes, pos)) != s.shape[d]) {
        throw Error(ErrorCode::kIo, "shape mismatch for " + name);
      }
    }
    if (pos + 8 * s.size > bytes.size()) throw Error(ErrorCode::kIo, "truncated checkpoint");
    for (std::size_t i = 0; i < s.size; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[pos + b]) << (8 * b);
      std::memcpy(&params.values_[s.offset + i], &bits, 8);
      pos += 8;
    }
  }
  return params;
}

void TinyParams::save(const std::filesystem::path& path) const { png::write_file(path, serialize()); }

TinyParams TinyParams::load(const std::filesystem::path& path) { return deserialize(png::read_file(path)); }

TinyDenoiser::TinyDenoiser(std::shared_ptr<const TinyParams> params, diffusion::NoiseSchedule schedule)
    : params_(std::move(params)), schedule_(std::move(schedule)) {}

std::vector<CompositionSite> TinyDenoiser::sites(Shape2 canvas) const {
  const TinyConfig& c = params_->config();
  const Shape2 half{canvas.height / 2, canvas.width / 2};
  const Shape2 quarter{canvas.height / 4, canvas.width / 4};
  return {{"enc0", canvas, c.c0},  {"enc1", half, c.c1}, {"enc2", quarter, c.c2},
          {"dec2", quarter, c.c2}, {"dec1", half, c.c1}, {"dec0", canvas, c.c0}};
}

Image TinyDenoiser::epsilon(const Image& x_t, int t, const BranchCondition& cond,
                            const SiteHooks& hooks) const {
  check_hooks(hooks, x_t.shape2());
  const Layout layout = make_layout(*params_);
  return forward(*params_, layout, schedule_, x_t, t, cond, &hooks, nullptr);
}

double TinyDenoiser::loss_and_gradient(const Image& x_t, int t, const BranchCondition& cond,
                                       const Image& eps_true, std::span<double> grad) const {
  require_same_shape(x_t, eps_true, "loss_and_gradient");
  if (grad.size() != params_->size()) throw Error(ErrorCode::kShapeMismatch, "gradient buffer size");
  const Layout layout = make_layout(*params_);
  ForwardCache cache;
  Image eps = forward(*params_, layout, schedule_, x_t, t, cond, nullptr, &cache);
  double loss = 0.0;
  Image geps(3, x_t.height(), x_t.width());
  auto e = eps.data();
  auto et = eps_true.data();
  auto g = geps.data();
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double diff = e[i] - et[i];
    loss += diff * diff;
    g[i] = 2.0 * diff;
  }
  backward(*params_, layout, cond, cache, geps, grad.data());
  return loss;
}

BranchCondition condition_from_clauses(const std::vector<std::string>& clauses, ControlEmbedding control) {
  BranchCondition cond;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    if (i) cond.prompt += ", ";
    cond.prompt += clauses[i];
    cond.tokens.push_back(embed_token(clauses[i]));
  }
  if (cond.tokens.empty()) cond.tokens.push_back(embed_token(""));
  cond.control = std::move(control);
  return cond;
}

TrainResult train_tiny_denoiser(std::span<const TrainingExample> dataset,
                                const diffusion::NoiseSchedule& sched, const TrainConfig& cfg,
                                const EpochCallback& on_epoch) {
  if (dataset.empty()) throw Error(ErrorCode::kEmptyScene, "empty training set");
  auto params = std::make_shared<TinyParams>(cfg.net);
  params->randomize(cfg.seed);
  TinyDenoiser model(params, sched);

  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  std::uniform_int_distribution<int> pick_t(1, sched.horizon());
  const std::size_t n = params->size();
  std::vector<double> grad(n), m(n, 0.0), v(n, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long step = 0;

  std::vector<BranchCondition> conds;
  conds.reserve(dataset.size());
  for (const auto& ex : dataset) conds.push_back(condition_from_clauses(ex.clauses, ex.control));

  TrainResult result{TinyParams(cfg.net), {}};
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const TrainingExample& ex = dataset[order[k]];
        const int t = pick_t(rng);
        Image eps = diffusion::gaussian_image(3, ex.image.height(), ex.image.width(), rng);
        Image x_t = diffusion::add_noise(ex.image, t, eps, sched);
        batch_loss += model.loss_and_gradient(x_t, t, conds[order[k]], eps, grad);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::kDivergence, "non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm2 = 0.0;
      for (double& g : grad) {
        g *= inv;
        norm2 += g * g;
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) throw Error(ErrorCode::kDivergence, "non-finite gradient");
      const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      ++step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      auto values = params->values();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i] * clip;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        values[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + adam_eps);
      }
    }
    const double mean_loss = epoch_loss / static_cast<double>(dataset.size());
    result.epoch_losses.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  result.params = *params;
  return result;
}

}  // namespace finecontrol::denoise
