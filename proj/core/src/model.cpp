#include "vstory/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vstory/error.hpp"

namespace vstory {
namespace {

constexpr double kLayerNormEps = 1e-5;

// ---- kernels -------------------------------------------------------------------

// y = b + x W, W stored [in x out].
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int in, int out) {
  std::copy(b, b + out, y);
  for (int i = 0; i < in; ++i) {
    const T xi = x[i];
    const T* row = w + static_cast<std::size_t>(i) * out;
    for (int o = 0; o < out; ++o) y[o] += xi * row[o];
  }
}

// Accumulates gradients of y = x W + b over n rows. dx may be null.
template <typename T>
void linear_backward(const T* x, const T* dy, const T* w, T* dx, T* dw, T* db, int n, int in, int out) {
  for (int t = 0; t < n; ++t) {
    const T* dyt = dy + static_cast<std::size_t>(t) * out;
    const T* xt = x + static_cast<std::size_t>(t) * in;
    for (int o = 0; o < out; ++o) db[o] += dyt[o];
    for (int i = 0; i < in; ++i) {
      const T xi = xt[i];
      T* dwrow = dw + static_cast<std::size_t>(i) * out;
      for (int o = 0; o < out; ++o) dwrow[o] += xi * dyt[o];
    }
    if (dx != nullptr) {
      T* dxt = dx + static_cast<std::size_t>(t) * in;
      for (int i = 0; i < in; ++i) {
        const T* row = w + static_cast<std::size_t>(i) * out;
        T acc = 0;
        for (int o = 0; o < out; ++o) acc += row[o] * dyt[o];
        dxt[i] += acc;
      }
    }
  }
}

template <typename T>
void layer_norm_forward(const T* x, const T* gain, const T* bias, T* y, T* xhat, T& rstd, int d) {
  T mean = 0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<T>(d);
  T var = 0;
  for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<T>(d);
  rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (int i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * gain[i] + bias[i];
  }
}

template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* gain, T* dx, T* dgain, T* dbias, int d) {
  T mean_dxhat = 0;
  T mean_dxhat_xhat = 0;
  for (int i = 0; i < d; ++i) {
    const T g = dy[i] * gain[i];
    mean_dxhat += g;
    mean_dxhat_xhat += g * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
  }
  mean_dxhat /= static_cast<T>(d);
  mean_dxhat_xhat /= static_cast<T>(d);
  for (int i = 0; i < d; ++i) {
    dx[i] += rstd * (dy[i] * gain[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  const T th = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
T dot(const T* a, const T* b, int n) {
  T acc = 0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void check_frames(std::span<const ImageFrame> frames, const ModelConfig& config) {
  if (frames.empty() || frames.size() > static_cast<std::size_t>(config.max_frames)) {
    throw ValidationError("expected 1-" + std::to_string(config.max_frames) + " frames, got " +
                          std::to_string(frames.size()));
  }
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].width != kFrameWidth || frames[f].height != kFrameHeight) {
      throw ValidationError("frame " + std::to_string(f) + " is " + std::to_string(frames[f].width) + "x" +
                            std::to_string(frames[f].height) + ", expected 16x16");
    }
  }
}

// Flattened, [0,1]-scaled 4x4 patches: (n_frames*16) x 48.
template <typename T>
std::vector<T> extract_patches(std::span<const ImageFrame> frames) {
  std::vector<T> out(frames.size() * kPatchesPerFrame * kPatchDim);
  std::size_t idx = 0;
  constexpr int kGrid = kFrameWidth / kPatchSize;
  for (const auto& frame : frames) {
    for (int pr = 0; pr < kGrid; ++pr) {
      for (int pc = 0; pc < kGrid; ++pc) {
        for (int r = 0; r < kPatchSize; ++r) {
          for (int c = 0; c < kPatchSize; ++c) {
            for (int ch = 0; ch < kFrameChannels; ++ch) {
              out[idx++] = static_cast<T>(frame.at(pr * kPatchSize + r, pc * kPatchSize + c, ch)) / T(255);
            }
          }
        }
      }
    }
  }
  return out;
}

// ---- decoder ---------------------------------------------------------------------

// Runs the decoder one position at a time, keeping every intermediate needed
// for the batched backward pass. Scoring and generation share this path, so
// teacher-forced and sampled log-probabilities agree bit for bit.
template <typename T>
class Decoder {
 public:
  Decoder(const ModelParams<T>& params, std::span<const ImageFrame> frames, int capacity)
      : params_(params),
        w_(params.values.data()),
        layout_(params.config),
        d_(params.config.d_model),
        heads_(params.config.n_heads),
        head_dim_(d_ / heads_),
        vocab_(params.config.vocab_size),
        ff_(params.config.d_ff),
        cap_(capacity),
        cross_(params.config.cross_attention),
        scale_(T(1) / std::sqrt(static_cast<T>(head_dim_))) {
    check_frames(frames, params.config);
    if (capacity > params.config.max_seq) {
      throw ValidationError("sequence of " + std::to_string(capacity) + " positions exceeds max_seq " +
                            std::to_string(params.config.max_seq));
    }
    mem_len_ = static_cast<int>(frames.size()) * kPatchesPerFrame;
    patches_ = extract_patches<T>(frames);
    memory_.assign(static_cast<std::size_t>(mem_len_) * d_, T(0));
    const auto& pe = layout_.patch_embed;
    for (int j = 0; j < mem_len_; ++j) {
      T* m = &memory_[static_cast<std::size_t>(j) * d_];
      linear_forward(&patches_[static_cast<std::size_t>(j) * kPatchDim], w_ + pe.w, w_ + pe.b, m, kPatchDim, d_);
      const T* pp = w_ + layout_.patch_pos + static_cast<std::size_t>(j % kPatchesPerFrame) * d_;
      const T* fp = w_ + layout_.frame_pos + static_cast<std::size_t>(j / kPatchesPerFrame) * d_;
      for (int i = 0; i < d_; ++i) m[i] += pp[i] + fp[i];
    }
    if (!cross_) {
      pooled_.assign(static_cast<std::size_t>(d_), T(0));
      for (int j = 0; j < mem_len_; ++j) {
        for (int i = 0; i < d_; ++i) pooled_[i] += memory_[static_cast<std::size_t>(j) * d_ + i];
      }
      for (auto& v : pooled_) v /= static_cast<T>(mem_len_);
    }

    const auto n = static_cast<std::size_t>(cap_);
    const auto nd = n * d_;
    layers_.resize(layout_.layers.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& c = layers_[l];
      for (auto* v : {&c.xhat1, &c.a1, &c.q, &c.k, &c.v, &c.o1, &c.xhat3, &c.a3}) v->assign(nd, T(0));
      c.rstd1.assign(n, T(0));
      c.rstd3.assign(n, T(0));
      c.p1.assign(static_cast<std::size_t>(heads_) * n * n, T(0));
      c.pre.assign(n * ff_, T(0));
      c.act.assign(n * ff_, T(0));
      if (cross_) {
        for (auto* v : {&c.xhat2, &c.a2, &c.q2, &c.o2}) v->assign(nd, T(0));
        c.rstd2.assign(n, T(0));
        c.p2.assign(static_cast<std::size_t>(heads_) * n * mem_len_, T(0));
        const auto& ca = layout_.layers[l].cross_attn;
        c.k2.assign(static_cast<std::size_t>(mem_len_) * d_, T(0));
        c.v2.assign(static_cast<std::size_t>(mem_len_) * d_, T(0));
        for (int j = 0; j < mem_len_; ++j) {
          const T* m = &memory_[static_cast<std::size_t>(j) * d_];
          linear_forward(m, w_ + ca.k.w, w_ + ca.k.b, &c.k2[static_cast<std::size_t>(j) * d_], d_, d_);
          linear_forward(m, w_ + ca.v.w, w_ + ca.v.b, &c.v2[static_cast<std::size_t>(j) * d_], d_, d_);
        }
      }
    }
    xhat_f_.assign(nd, T(0));
    rstd_f_.assign(n, T(0));
    a_f_.assign(nd, T(0));
    logits_.assign(n * vocab_, T(0));
    has_logits_.assign(n, false);
    tokens_.reserve(n);
  }

  int length() const { return static_cast<int>(tokens_.size()); }
  const std::vector<T>& memory() const { return memory_; }
  const T* logits(int t) const { return &logits_[static_cast<std::size_t>(t) * vocab_]; }

  void push(TokenId id, bool want_logits) {
    const int t = length();
    if (t >= cap_) throw ValidationError("decoder capacity exceeded");
    if (id < 0 || id >= vocab_) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
    tokens_.push_back(id);
    const auto td = static_cast<std::size_t>(t) * d_;

    std::vector<T> x(static_cast<std::size_t>(d_));
    std::vector<T> tmp(static_cast<std::size_t>(std::max(d_, ff_)));
    const T* emb = w_ + layout_.token_embed + static_cast<std::size_t>(id) * d_;
    const T* pos = w_ + layout_.text_pos + td;
    for (int i = 0; i < d_; ++i) x[i] = emb[i] + pos[i];
    if (!cross_) {
      for (int i = 0; i < d_; ++i) x[i] += pooled_[i];
    }

    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& c = layers_[l];
      const auto& L = layout_.layers[l];

      // Causal self-attention.
      layer_norm_forward(x.data(), w_ + L.ln_self.gain, w_ + L.ln_self.bias, &c.a1[td], &c.xhat1[td], c.rstd1[t], d_);
      const auto& sa = L.self_attn;
      linear_forward(&c.a1[td], w_ + sa.q.w, w_ + sa.q.b, &c.q[td], d_, d_);
      linear_forward(&c.a1[td], w_ + sa.k.w, w_ + sa.k.b, &c.k[td], d_, d_);
      linear_forward(&c.a1[td], w_ + sa.v.w, w_ + sa.v.b, &c.v[td], d_, d_);
      for (int h = 0; h < heads_; ++h) {
        const int off = h * head_dim_;
        T* p = &c.p1[(static_cast<std::size_t>(h) * cap_ + t) * cap_];
        T mx = -std::numeric_limits<T>::infinity();
        for (int s = 0; s <= t; ++s) {
          p[s] = dot(&c.q[td + off], &c.k[static_cast<std::size_t>(s) * d_ + off], head_dim_) * scale_;
          mx = std::max(mx, p[s]);
        }
        T sum = 0;
        for (int s = 0; s <= t; ++s) {
          p[s] = std::exp(p[s] - mx);
          sum += p[s];
        }
        T* o = &c.o1[td + off];
        std::fill(o, o + head_dim_, T(0));
        for (int s = 0; s <= t; ++s) {
          p[s] /= sum;
          const T* vs = &c.v[static_cast<std::size_t>(s) * d_ + off];
          for (int i = 0; i < head_dim_; ++i) o[i] += p[s] * vs[i];
        }
      }
      linear_forward(&c.o1[td], w_ + sa.o.w, w_ + sa.o.b, tmp.data(), d_, d_);
      for (int i = 0; i < d_; ++i) x[i] += tmp[i];

      // Cross-attention over the visual tokens.
      if (cross_) {
        layer_norm_forward(x.data(), w_ + L.ln_cross.gain, w_ + L.ln_cross.bias, &c.a2[td], &c.xhat2[td], c.rstd2[t],
                           d_);
        const auto& ca = L.cross_attn;
        linear_forward(&c.a2[td], w_ + ca.q.w, w_ + ca.q.b, &c.q2[td], d_, d_);
        for (int h = 0; h < heads_; ++h) {
          const int off = h * head_dim_;
          T* p = &c.p2[(static_cast<std::size_t>(h) * cap_ + t) * mem_len_];
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j < mem_len_; ++j) {
            p[j] = dot(&c.q2[td + off], &c.k2[static_cast<std::size_t>(j) * d_ + off], head_dim_) * scale_;
            mx = std::max(mx, p[j]);
          }
          T sum = 0;
          for (int j = 0; j < mem_len_; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
          }
          T* o = &c.o2[td + off];
          std::fill(o, o + head_dim_, T(0));
          for (int j = 0; j < mem_len_; ++j) {
            p[j] /= sum;
            const T* vj = &c.v2[static_cast<std::size_t>(j) * d_ + off];
            for (int i = 0; i < head_dim_; ++i) o[i] += p[j] * vj[i];
          }
        }
        linear_forward(&c.o2[td], w_ + ca.o.w, w_ + ca.o.b, tmp.data(), d_, d_);
        for (int i = 0; i < d_; ++i) x[i] += tmp[i];
      }

      // Feed-forward.
      layer_norm_forward(x.data(), w_ + L.ln_ffn.gain, w_ + L.ln_ffn.bias, &c.a3[td], &c.xhat3[td], c.rstd3[t], d_);
      const auto tf = static_cast<std::size_t>(t) * ff_;
      linear_forward(&c.a3[td], w_ + L.ffn_in.w, w_ + L.ffn_in.b, &c.pre[tf], d_, ff_);
      for (int i = 0; i < ff_; ++i) c.act[tf + i] = gelu(c.pre[tf + i]);
      linear_forward(&c.act[tf], w_ + L.ffn_out.w, w_ + L.ffn_out.b, tmp.data(), ff_, d_);
      for (int i = 0; i < d_; ++i) x[i] += tmp[i];
    }

    if (want_logits) {
      layer_norm_forward(x.data(), w_ + layout_.final_ln.gain, w_ + layout_.final_ln.bias, &a_f_[td], &xhat_f_[td],
                         rstd_f_[t], d_);
      linear_forward(&a_f_[td], w_ + layout_.output.w, w_ + layout_.output.b,
                     &logits_[static_cast<std::size_t>(t) * vocab_], d_, vocab_);
      has_logits_[static_cast<std::size_t>(t)] = true;
    }
  }

  // dlogits: length() x V. Rows for positions pushed without logits must be zero.
  void backward(const std::vector<T>& dlogits, ModelParams<T>& grad) const {
    const int n = length();
    const auto nd = static_cast<std::size_t>(n) * d_;
    T* g = grad.values.data();
    std::vector<T> dx(nd, T(0));
    std::vector<T> buf(static_cast<std::size_t>(d_));

    const auto& out = layout_.output;
    for (int t = 0; t < n; ++t) {
      if (!has_logits_[static_cast<std::size_t>(t)]) continue;
      const auto td = static_cast<std::size_t>(t) * d_;
      std::fill(buf.begin(), buf.end(), T(0));
      linear_backward(&a_f_[td], &dlogits[static_cast<std::size_t>(t) * vocab_], w_ + out.w, buf.data(), g + out.w,
                      g + out.b, 1, d_, vocab_);
      layer_norm_backward(buf.data(), &xhat_f_[td], rstd_f_[t], w_ + layout_.final_ln.gain, &dx[td],
                          g + layout_.final_ln.gain, g + layout_.final_ln.bias, d_);
    }

    std::vector<T> dmem;
    if (mem_len_ > 0) dmem.assign(static_cast<std::size_t>(mem_len_) * d_, T(0));
    std::vector<T> da(nd), dq(nd), dk(nd), dv(nd), dattn(nd);
    std::vector<T> dact(static_cast<std::size_t>(n) * ff_);
    std::vector<T> dp(static_cast<std::size_t>(std::max(n, mem_len_)));

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& c = layers_[li];
      const auto& L = layout_.layers[li];

      // Feed-forward.
      std::fill(dact.begin(), dact.end(), T(0));
      linear_backward(c.act.data(), dx.data(), w_ + L.ffn_out.w, dact.data(), g + L.ffn_out.w, g + L.ffn_out.b, n, ff_,
                      d_);
      for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(c.pre[i]);
      std::fill(da.begin(), da.end(), T(0));
      linear_backward(c.a3.data(), dact.data(), w_ + L.ffn_in.w, da.data(), g + L.ffn_in.w, g + L.ffn_in.b, n, d_,
                      ff_);
      for (int t = 0; t < n; ++t) {
        const auto td = static_cast<std::size_t>(t) * d_;
        layer_norm_backward(&da[td], &c.xhat3[td], c.rstd3[t], w_ + L.ln_ffn.gain, &dx[td], g + L.ln_ffn.gain,
                            g + L.ln_ffn.bias, d_);
      }

      // Cross-attention.
      if (cross_) {
        const auto& ca = L.cross_attn;
        std::fill(dattn.begin(), dattn.end(), T(0));
        linear_backward(c.o2.data(), dx.data(), w_ + ca.o.w, dattn.data(), g + ca.o.w, g + ca.o.b, n, d_, d_);
        std::fill(dq.begin(), dq.end(), T(0));
        std::vector<T> dk2(static_cast<std::size_t>(mem_len_) * d_, T(0));
        std::vector<T> dv2(static_cast<std::size_t>(mem_len_) * d_, T(0));
        for (int t = 0; t < n; ++t) {
          const auto td = static_cast<std::size_t>(t) * d_;
          for (int h = 0; h < heads_; ++h) {
            const int off = h * head_dim_;
            const T* p = &c.p2[(static_cast<std::size_t>(h) * cap_ + t) * mem_len_];
            const T* dout = &dattn[td + off];
            T weighted = 0;
            for (int j = 0; j < mem_len_; ++j) {
              const auto jd = static_cast<std::size_t>(j) * d_ + off;
              dp[j] = dot(dout, &c.v2[jd], head_dim_);
              weighted += p[j] * dp[j];
              for (int i = 0; i < head_dim_; ++i) dv2[jd + i] += p[j] * dout[i];
            }
            for (int j = 0; j < mem_len_; ++j) {
              const T ds = p[j] * (dp[j] - weighted) * scale_;
              const auto jd = static_cast<std::size_t>(j) * d_ + off;
              for (int i = 0; i < head_dim_; ++i) {
                dq[td + off + i] += ds * c.k2[jd + i];
                dk2[jd + i] += ds * c.q2[td + off + i];
              }
            }
          }
        }
        std::fill(da.begin(), da.end(), T(0));
        linear_backward(c.a2.data(), dq.data(), w_ + ca.q.w, da.data(), g + ca.q.w, g + ca.q.b, n, d_, d_);
        linear_backward(memory_.data(), dk2.data(), w_ + ca.k.w, dmem.data(), g + ca.k.w, g + ca.k.b, mem_len_, d_, d_);
        linear_backward(memory_.data(), dv2.data(), w_ + ca.v.w, dmem.data(), g + ca.v.w, g + ca.v.b, mem_len_, d_, d_);
        for (int t = 0; t < n; ++t) {
          const auto td = static_cast<std::size_t>(t) * d_;
          layer_norm_backward(&da[td], &c.xhat2[td], c.rstd2[t], w_ + L.ln_cross.gain, &dx[td], g + L.ln_cross.gain,
                              g + L.ln_cross.bias, d_);
        }
      }

      // Causal self-attention.
      const auto& sa = L.self_attn;
      std::fill(dattn.begin(), dattn.end(), T(0));
      linear_backward(c.o1.data(), dx.data(), w_ + sa.o.w, dattn.data(), g + sa.o.w, g + sa.o.b, n, d_, d_);
      std::fill(dq.begin(), dq.end(), T(0));
      std::fill(dk.begin(), dk.end(), T(0));
      std::fill(dv.begin(), dv.end(), T(0));
      for (int t = 0; t < n; ++t) {
        const auto td = static_cast<std::size_t>(t) * d_;
        for (int h = 0; h < heads_; ++h) {
          const int off = h * head_dim_;
          const T* p = &c.p1[(static_cast<std::size_t>(h) * cap_ + t) * cap_];
          const T* dout = &dattn[td + off];
          T weighted = 0;
          for (int s = 0; s <= t; ++s) {
            const auto sd = static_cast<std::size_t>(s) * d_ + off;
            dp[s] = dot(dout, &c.v[sd], head_dim_);
            weighted += p[s] * dp[s];
            for (int i = 0; i < head_dim_; ++i) dv[sd + i] += p[s] * dout[i];
          }
          for (int s = 0; s <= t; ++s) {
            const T ds = p[s] * (dp[s] - weighted) * scale_;
            const auto sd = static_cast<std::size_t>(s) * d_ + off;
            for (int i = 0; i < head_dim_; ++i) {
              dq[td + off + i] += ds * c.k[sd + i];
              dk[sd + i] += ds * c.q[td + off + i];
            }
          }
        }
      }
      std::fill(da.begin(), da.end(), T(0));
      linear_backward(c.a1.data(), dq.data(), w_ + sa.q.w, da.data(), g + sa.q.w, g + sa.q.b, n, d_, d_);
      linear_backward(c.a1.data(), dk.data(), w_ + sa.k.w, da.data(), g + sa.k.w, g + sa.k.b, n, d_, d_);
      linear_backward(c.a1.data(), dv.data(), w_ + sa.v.w, da.data(), g + sa.v.w, g + sa.v.b, n, d_, d_);
      for (int t = 0; t < n; ++t) {
        const auto td = static_cast<std::size_t>(t) * d_;
        layer_norm_backward(&da[td], &c.xhat1[td], c.rstd1[t], w_ + L.ln_self.gain, &dx[td], g + L.ln_self.gain,
                            g + L.ln_self.bias, d_);
      }
    }

    // Embeddings.
    std::vector<T> dpool(cross_ ? 0 : static_cast<std::size_t>(d_), T(0));
    for (int t = 0; t < n; ++t) {
      const auto td = static_cast<std::size_t>(t) * d_;
      T* de = g + layout_.token_embed + static_cast<std::size_t>(tokens_[static_cast<std::size_t>(t)]) * d_;
      T* dpos = g + layout_.text_pos + td;
      for (int i = 0; i < d_; ++i) {
        de[i] += dx[td + i];
        dpos[i] += dx[td + i];
      }
      if (!cross_) {
        for (int i = 0; i < d_; ++i) dpool[i] += dx[td + i];
      }
    }
    if (!cross_) {
      const T inv = T(1) / static_cast<T>(mem_len_);
      for (int j = 0; j < mem_len_; ++j) {
        for (int i = 0; i < d_; ++i) dmem[static_cast<std::size_t>(j) * d_ + i] += dpool[i] * inv;
      }
    }

    // Visual tokens.
    const auto& pe = layout_.patch_embed;
    linear_backward(patches_.data(), dmem.data(), w_ + pe.w, static_cast<T*>(nullptr), g + pe.w, g + pe.b, mem_len_,
                    kPatchDim, d_);
    for (int j = 0; j < mem_len_; ++j) {
      T* dpp = g + layout_.patch_pos + static_cast<std::size_t>(j % kPatchesPerFrame) * d_;
      T* dfp = g + layout_.frame_pos + static_cast<std::size_t>(j / kPatchesPerFrame) * d_;
      for (int i = 0; i < d_; ++i) {
        dpp[i] += dmem[static_cast<std::size_t>(j) * d_ + i];
        dfp[i] += dmem[static_cast<std::size_t>(j) * d_ + i];
      }
    }
  }

 private:
  struct LayerCache {
    std::vector<T> xhat1, rstd1, a1, q, k, v, p1, o1;
    std::vector<T> xhat2, rstd2, a2, q2, p2, o2, k2, v2;
    std::vector<T> xhat3, rstd3, a3, pre, act;
  };

  const ModelParams<T>& params_;
  const T* w_;
  ParamLayout layout_;
  int d_, heads_, head_dim_, vocab_, ff_, cap_;
  bool cross_;
  T scale_;
  int mem_len_ = 0;
  std::vector<T> patches_, memory_, pooled_;
  std::vector<LayerCache> layers_;
  std::vector<T> xhat_f_, rstd_f_, a_f_, logits_;
  std::vector<bool> has_logits_;
  std::vector<TokenId> tokens_;
};

// Log-softmax of logits/temperature, optionally excluding PAD.
template <typename T>
std::vector<double> log_softmax(const T* logits, int vocab, bool pad_masked, double temperature) {
  std::vector<double> out(static_cast<std::size_t>(vocab));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < vocab; ++i) {
    if (pad_masked && i == kPad) continue;
    mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
  }
  double sum = 0;
  for (int i = 0; i < vocab; ++i) {
    if (pad_masked && i == kPad) continue;
    sum += std::exp(static_cast<double>(logits[i]) / temperature - mx);
  }
  const double lse = mx + std::log(sum);
  for (int i = 0; i < vocab; ++i) {
    out[static_cast<std::size_t>(i)] = (pad_masked && i == kPad) ? -std::numeric_limits<double>::infinity()
                                                                 : static_cast<double>(logits[i]) / temperature - lse;
  }
  return out;
}

void check_tokens(std::span<const TokenId> ids, int vocab, const char* what) {
  for (const auto id : ids) {
    if (id < 0 || id >= vocab) {
      throw ValidationError(std::string(what) + " token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

}  // namespace

// ---- config & layout ---------------------------------------------------------------

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.vocab_size = 5;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size <= kNumSpecials || vocab_size > kMaxVocab) {
    throw ConfigError("vocab_size must be in (4, 256], got " + std::to_string(vocab_size));
  }
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers <= 0 || d_ff <= 0) throw ConfigError("n_layers and d_ff must be positive");
  if (max_frames < 1 || max_frames > kMaxFrames) throw ConfigError("max_frames must be in [1, 5]");
  if (max_seq < 2) throw ConfigError("max_seq must be at least 2");
}

ParamLayout::ParamLayout(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  auto add = [this](std::string name, std::vector<int> shape) {
    std::size_t size = 1;
    for (const int s : shape) size *= static_cast<std::size_t>(s);
    blocks.push_back({std::move(name), std::move(shape), total, size});
    total += size;
    return blocks.back().offset;
  };
  auto linear = [&](const std::string& name, int in, int out) {
    Linear lin;
    lin.in = in;
    lin.out = out;
    lin.w = add(name + ".weight", {in, out});
    lin.b = add(name + ".bias", {out});
    return lin;
  };
  auto norm = [&](const std::string& name) {
    LayerNorm ln;
    ln.gain = add(name + ".gain", {d});
    ln.bias = add(name + ".bias", {d});
    return ln;
  };

  patch_embed = linear("patch_embed", kPatchDim, d);
  patch_pos = add("patch_pos", {kPatchesPerFrame, d});
  frame_pos = add("frame_pos", {config.max_frames, d});
  token_embed = add("token_embed", {config.vocab_size, d});
  text_pos = add("text_pos", {config.max_seq, d});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Layer layer;
    layer.ln_self = norm(p + "ln_self");
    layer.self_attn = {linear(p + "self_attn.q", d, d), linear(p + "self_attn.k", d, d),
                       linear(p + "self_attn.v", d, d), linear(p + "self_attn.o", d, d)};
    if (config.cross_attention) {
      layer.ln_cross = norm(p + "ln_cross");
      layer.cross_attn = {linear(p + "cross_attn.q", d, d), linear(p + "cross_attn.k", d, d),
                          linear(p + "cross_attn.v", d, d), linear(p + "cross_attn.o", d, d)};
    }
    layer.ln_ffn = norm(p + "ln_ffn");
    layer.ffn_in = linear(p + "ffn.in", d, config.d_ff);
    layer.ffn_out = linear(p + "ffn.out", config.d_ff, d);
    layers.push_back(layer);
  }
  final_ln = norm("final_ln");
  output = linear("output", d, config.vocab_size);
}

const ParamBlock& ParamLayout::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b;
  }
  throw ValidationError("no parameter named '" + name + "'");
}

// ---- params ------------------------------------------------------------------------

template <typename T>
ModelParams<T>::ModelParams(const ModelConfig& c) : config(c), values(ParamLayout(c).total, T(0)) {}

template <typename T>
std::span<T> ModelParams<T>::block(const std::string& name) {
  const auto b = layout().block(name);
  return std::span<T>(values).subspan(b.offset, b.size);
}

template <typename T>
std::span<const T> ModelParams<T>::block(const std::string& name) const {
  const auto b = layout().block(name);
  return std::span<const T>(values).subspan(b.offset, b.size);
}

template <typename T>
void ModelParams<T>::check_finite() const {
  for (const auto& b : layout().blocks) {
    for (std::size_t i = 0; i < b.size; ++i) {
      if (!std::isfinite(values[b.offset + i])) {
        throw NumericError("non-finite value in parameter '" + b.name + "' at index " + std::to_string(i));
      }
    }
  }
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<T> params(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const auto& b : params.layout().blocks) {
    const bool is_bias = b.name.ends_with(".bias");
    const bool is_gain = b.name.ends_with(".gain");
    for (std::size_t i = 0; i < b.size; ++i) {
      T v = T(0);
      if (is_gain) {
        v = T(1);
      } else if (!is_bias) {
        v = static_cast<T>(normal(rng));
      }
      params.values[b.offset + i] = v;
    }
  }
  return params;
}

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.config = params.config;
  out.values.assign(params.values.begin(), params.values.end());
  return out;
}

// ---- operations ---------------------------------------------------------------------

template <typename T>
std::vector<T> encode_images(const ModelParams<T>& params, std::span<const ImageFrame> frames) {
  Decoder<T> dec(params, frames, 1);
  return dec.memory();
}

template <typename T>
SequenceScore<T> score_tokens(const ModelParams<T>& params, std::span<const ImageFrame> frames,
                              std::span<const TokenId> prompt, std::span<const TokenId> target, ScoreOptions options,
                              ModelParams<T>* grad, T grad_scale) {
  const int vocab = params.config.vocab_size;
  if (target.empty()) throw ValidationError("cannot score an empty target");
  check_tokens(prompt, vocab, "prompt");
  check_tokens(target, vocab, "target");
  const auto total_len = prompt.size() + 1 + target.size();
  if (total_len > static_cast<std::size_t>(params.config.max_seq)) {
    throw ValidationError("sequence of " + std::to_string(total_len) + " tokens (instruction + SEP + text + EOS) exceeds " +
                          std::to_string(params.config.max_seq));
  }
  if (options.pad_masked && std::find(target.begin(), target.end(), kPad) != target.end()) {
    throw ValidationError("PAD cannot be scored under the PAD-masked distribution");
  }

  const int n = static_cast<int>(prompt.size() + target.size());
  Decoder<T> dec(params, frames, n);
  for (const auto id : prompt) dec.push(id, false);
  dec.push(kSep, true);
  for (std::size_t i = 0; i + 1 < target.size(); ++i) dec.push(target[i], true);

  SequenceScore<T> score;
  score.token_logprobs.reserve(target.size());
  std::vector<T> dlogits;
  if (grad != nullptr) dlogits.assign(static_cast<std::size_t>(n) * vocab, T(0));
  const int first = static_cast<int>(prompt.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const int t = first + static_cast<int>(i);
    const auto lp = log_softmax(dec.logits(t), vocab, options.pad_masked, 1.0);
    const T chosen = static_cast<T>(lp[static_cast<std::size_t>(target[i])]);
    score.token_logprobs.push_back(chosen);
    score.total += chosen;
    if (grad != nullptr) {
      T* row = &dlogits[static_cast<std::size_t>(t) * vocab];
      for (int v = 0; v < vocab; ++v) {
        const T p = (options.pad_masked && v == kPad) ? T(0) : static_cast<T>(std::exp(lp[static_cast<std::size_t>(v)]));
        row[v] = grad_scale * ((v == target[i] ? T(1) : T(0)) - p);
      }
    }
  }
  if (grad != nullptr) {
    if (grad->config != params.config || grad->values.size() != params.values.size()) {
      throw ValidationError("gradient buffer does not match the parameter layout");
    }
    dec.backward(dlogits, *grad);
  }
  return score;
}

template <typename T>
double log_prob(const Model<T>& model, std::span<const ImageFrame> frames, const std::string& instruction,
                const std::string& text) {
  const auto prompt = model.vocab.tokenize(instruction);
  auto target = model.vocab.tokenize(text);
  target.push_back(kEos);
  return static_cast<double>(score_tokens(model.params, frames, prompt, target).total);
}

void DecodeConfig::validate() const {
  if (max_len < 1 || max_len > 64) throw ConfigError("decode max_len must be in [1, 64], got " + std::to_string(max_len));
  if (mode == DecodeMode::kSample && !(temperature > 0 && std::isfinite(temperature))) {
    throw ConfigError("sampling temperature must be positive");
  }
  if (mode == DecodeMode::kGreedy && !(temperature > 0 && std::isfinite(temperature))) {
    throw ConfigError("temperature must be positive");
  }
}

template <typename T>
GenerationOutput generate(const ModelParams<T>& params, const Vocab* vocab, std::span<const ImageFrame> frames,
                          std::span<const TokenId> prompt, const DecodeConfig& decode, std::mt19937_64& rng) {
  decode.validate();
  const int V = params.config.vocab_size;
  check_tokens(prompt, V, "prompt");
  if (prompt.size() + 1 + static_cast<std::size_t>(decode.max_len) > static_cast<std::size_t>(params.config.max_seq)) {
    throw ConfigError("instruction of " + std::to_string(prompt.size()) + " tokens plus max_len " +
                      std::to_string(decode.max_len) + " exceeds the sequence limit");
  }
  Decoder<T> dec(params, frames, static_cast<int>(prompt.size()) + decode.max_len);
  for (const auto id : prompt) dec.push(id, false);
  dec.push(kSep, true);

  GenerationOutput out;
  for (int step = 0; step < decode.max_len; ++step) {
    const auto lp = log_softmax(dec.logits(dec.length() - 1), V, true, decode.temperature);
    TokenId choice = kPad;
    if (decode.mode == DecodeMode::kGreedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < V; ++v) {
        if (v == kPad) continue;
        if (lp[static_cast<std::size_t>(v)] > best) {
          best = lp[static_cast<std::size_t>(v)];
          choice = v;
        }
      }
    } else {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      double cum = 0;
      for (int v = 0; v < V; ++v) {
        if (v == kPad) continue;
        choice = v;
        cum += std::exp(lp[static_cast<std::size_t>(v)]);
        if (u < cum) break;
      }
    }
    out.token_ids.push_back(choice);
    out.per_token_logprobs.push_back(lp[static_cast<std::size_t>(choice)]);
    out.total_logprob += lp[static_cast<std::size_t>(choice)];
    if (choice == kEos || step + 1 == decode.max_len) break;
    dec.push(choice, true);
  }
  if (vocab != nullptr) {
    auto body = std::span<const TokenId>(out.token_ids);
    if (!body.empty() && body.back() == kEos) body = body.first(body.size() - 1);
    out.text = vocab->detokenize(body);
  }
  return out;
}

template <typename T>
GenerationOutput generate(const Model<T>& model, std::span<const ImageFrame> frames, const std::string& instruction,
                          const DecodeConfig& decode) {
  std::mt19937_64 rng(decode.seed);
  const auto prompt = model.vocab.tokenize(instruction);
  return generate(model.params, &model.vocab, frames, prompt, decode, rng);
}

template <typename T>
std::vector<double> next_token_distribution(const ModelParams<T>& params, std::span<const ImageFrame> frames,
                                            std::span<const TokenId> prompt, std::span<const TokenId> generated,
                                            bool pad_masked, double temperature) {
  Decoder<T> dec(params, frames, static_cast<int>(prompt.size() + 1 + generated.size()));
  for (const auto id : prompt) dec.push(id, false);
  dec.push(kSep, generated.empty());
  for (std::size_t i = 0; i < generated.size(); ++i) dec.push(generated[i], i + 1 == generated.size());
  auto lp = log_softmax(dec.logits(dec.length() - 1), params.config.vocab_size, pad_masked, temperature);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

#define VSTORY_INSTANTIATE(T)                                                                                      \
  template struct ModelParams<T>;                                                                                  \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                                       \
  template std::vector<T> encode_images<T>(const ModelParams<T>&, std::span<const ImageFrame>);                    \
  template SequenceScore<T> score_tokens<T>(const ModelParams<T>&, std::span<const ImageFrame>,                    \
                                            std::span<const TokenId>, std::span<const TokenId>, ScoreOptions,      \
                                            ModelParams<T>*, T);                                                   \
  template double log_prob<T>(const Model<T>&, std::span<const ImageFrame>, const std::string&, const std::string&); \
  template GenerationOutput generate<T>(const ModelParams<T>&, const Vocab*, std::span<const ImageFrame>,          \
                                        std::span<const TokenId>, const DecodeConfig&, std::mt19937_64&);          \
  template GenerationOutput generate<T>(const Model<T>&, std::span<const ImageFrame>, const std::string&,          \
                                        const DecodeConfig&);                                                      \
  template std::vector<double> next_token_distribution<T>(const ModelParams<T>&, std::span<const ImageFrame>,      \
                                                          std::span<const TokenId>, std::span<const TokenId>, bool, \
                                                          double);

VSTORY_INSTANTIATE(float)
VSTORY_INSTANTIATE(double)
#undef VSTORY_INSTANTIATE

template ModelParams<float> convert_params<float, double>(const ModelParams<double>&);
template ModelParams<double> convert_params<double, float>(const ModelParams<float>&);
template ModelParams<float> convert_params<float, float>(const ModelParams<float>&);
template ModelParams<double> convert_params<double, double>(const ModelParams<double>&);

}  // namespace vstory
