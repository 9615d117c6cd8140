#pragma once

// Batched layer primitives with hand-written vector-Jacobian products.
//
// Layout conventions:
//   feature maps  MatrixR [batch*channels x height*width], one contiguous
//                 [channels x height*width] block per sample;
//   sequences     MatrixR [batch*frames x dim], one contiguous block per sample.

#include "uwloc/types.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace uwloc::detail {

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero "same" padding.

template <typename S>
void im2col3x3(const S* x, Index cin, Index h, Index w, MatrixR<S>& cols) {
  cols.setZero(cin * 9, h * w);
  for (Index c = 0; c < cin; ++c) {
    const S* plane = x + c * h * w;
    for (Index kh = 0; kh < 3; ++kh) {
      for (Index kw = 0; kw < 3; ++kw) {
        S* row = cols.row(c * 9 + kh * 3 + kw).data();
        const Index dh = kh - 1, dw = kw - 1;
        const Index w0 = std::max<Index>(0, -dw), w1 = std::min(w, w - dw);
        for (Index r = 0; r < h; ++r) {
          const Index sr = r + dh;
          if (sr < 0 || sr >= h) continue;
          const S* src = plane + sr * w + dw;
          S* dst = row + r * w;
          for (Index q = w0; q < w1; ++q) dst[q] = src[q];
        }
      }
    }
  }
}

template <typename S>
void col2im3x3_add(const MatrixR<S>& cols, Index cin, Index h, Index w, S* dx) {
  for (Index c = 0; c < cin; ++c) {
    S* plane = dx + c * h * w;
    for (Index kh = 0; kh < 3; ++kh) {
      for (Index kw = 0; kw < 3; ++kw) {
        const S* row = cols.row(c * 9 + kh * 3 + kw).data();
        const Index dh = kh - 1, dw = kw - 1;
        const Index w0 = std::max<Index>(0, -dw), w1 = std::min(w, w - dw);
        for (Index r = 0; r < h; ++r) {
          const Index sr = r + dh;
          if (sr < 0 || sr >= h) continue;
          S* dst = plane + sr * w + dw;
          const S* src = row + r * w;
          for (Index q = w0; q < w1; ++q) dst[q] += src[q];
        }
      }
    }
  }
}

/// y_b = K * im2col(x_b), K is [cout x cin*9].
template <typename S>
MatrixR<S> conv3x3_forward(const MatrixR<S>& x, Index batch, Index cin, Index h, Index w,
                           const MatrixR<S>& kernel) {
  const Index cout = kernel.rows();
  MatrixR<S> y(batch * cout, h * w);
  MatrixR<S> cols;
  for (Index b = 0; b < batch; ++b) {
    im2col3x3(x.data() + b * cin * h * w, cin, h, w, cols);
    y.middleRows(b * cout, cout).noalias() = kernel * cols;
  }
  return y;
}

/// Accumulates dK and returns dx.
template <typename S>
MatrixR<S> conv3x3_backward(const MatrixR<S>& x, Index batch, Index cin, Index h, Index w,
                            const MatrixR<S>& kernel, const MatrixR<S>& dy, MatrixR<S>& dkernel) {
  const Index cout = kernel.rows();
  MatrixR<S> dx = MatrixR<S>::Zero(batch * cin, h * w);
  MatrixR<S> cols, dcols;
  for (Index b = 0; b < batch; ++b) {
    im2col3x3(x.data() + b * cin * h * w, cin, h, w, cols);
    const auto dyb = dy.middleRows(b * cout, cout);
    dkernel.noalias() += dyb * cols.transpose();
    dcols.noalias() = kernel.transpose() * dyb;
    col2im3x3_add(dcols, cin, h, w, dx.data() + b * cin * h * w);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Per-channel normalization over (batch, spatial) for feature maps.

template <typename S>
struct MapNormCache {
  MatrixR<S> xhat;
  VectorX<S> inv_std;
};

template <typename S>
MatrixR<S> map_norm_forward(const MatrixR<S>& x, Index batch, Index channels, const VectorX<S>& gamma,
                            const VectorX<S>& beta, bool train, VectorX<S>& running_mean,
                            VectorX<S>& running_var, S momentum, S eps, MapNormCache<S>* cache) {
  const Index hw = x.cols();
  const S count = static_cast<S>(batch * hw);
  VectorX<S> mean(channels), var(channels);
  if (train) {
    for (Index c = 0; c < channels; ++c) {
      S sum = 0;
      for (Index b = 0; b < batch; ++b) sum += x.row(b * channels + c).sum();
      const S mu = sum / count;
      S sq = 0;
      for (Index b = 0; b < batch; ++b) sq += (x.row(b * channels + c).array() - mu).square().sum();
      mean(c) = mu;
      var(c) = sq / count;
    }
    const S unbias = count > 1 ? count / (count - 1) : S(1);
    running_mean = (1 - momentum) * running_mean + momentum * mean;
    running_var = (1 - momentum) * running_var + momentum * unbias * var;
  } else {
    mean = running_mean;
    var = running_var;
  }
  const VectorX<S> inv_std = (var.array() + eps).rsqrt().matrix();
  MatrixR<S> xhat(x.rows(), hw);
  MatrixR<S> y(x.rows(), hw);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index r = b * channels + c;
      xhat.row(r) = (x.row(r).array() - mean(c)) * inv_std(c);
      y.row(r) = xhat.row(r).array() * gamma(c) + beta(c);
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

/// Training-mode backward (batch statistics).
template <typename S>
MatrixR<S> map_norm_backward(const MapNormCache<S>& cache, Index batch, Index channels,
                             const VectorX<S>& gamma, const MatrixR<S>& dy, VectorX<S>& dgamma,
                             VectorX<S>& dbeta) {
  const Index hw = dy.cols();
  const S count = static_cast<S>(batch * hw);
  MatrixR<S> dx(dy.rows(), hw);
  for (Index c = 0; c < channels; ++c) {
    S sum_dy = 0, sum_dy_xhat = 0;
    for (Index b = 0; b < batch; ++b) {
      const Index r = b * channels + c;
      sum_dy += dy.row(r).sum();
      sum_dy_xhat += dy.row(r).cwiseProduct(cache.xhat.row(r)).sum();
    }
    dgamma(c) += sum_dy_xhat;
    dbeta(c) += sum_dy;
    const S mean_dxhat = gamma(c) * sum_dy / count;
    const S mean_dxhat_xhat = gamma(c) * sum_dy_xhat / count;
    for (Index b = 0; b < batch; ++b) {
      const Index r = b * channels + c;
      dx.row(r) = ((dy.row(r).array() * gamma(c) - mean_dxhat) -
                   cache.xhat.row(r).array() * mean_dxhat_xhat) *
                  cache.inv_std(c);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Per-column normalization over rows for sequences [batch*frames x dim].

template <typename S>
struct SeqNormCache {
  MatrixR<S> xhat;
  VectorX<S> inv_std;
};

template <typename S>
MatrixR<S> seq_norm_forward(const MatrixR<S>& x, const VectorX<S>& gamma, const VectorX<S>& beta,
                            bool train, VectorX<S>& running_mean, VectorX<S>& running_var,
                            S momentum, S eps, SeqNormCache<S>* cache) {
  const S count = static_cast<S>(x.rows());
  VectorX<S> mean, var;
  if (train) {
    mean = x.colwise().mean().transpose();
    var = (x.rowwise() - mean.transpose()).array().square().colwise().sum().transpose() / count;
    const S unbias = count > 1 ? count / (count - 1) : S(1);
    running_mean = (1 - momentum) * running_mean + momentum * mean;
    running_var = (1 - momentum) * running_var + momentum * unbias * var;
  } else {
    mean = running_mean;
    var = running_var;
  }
  const VectorX<S> inv_std = (var.array() + eps).rsqrt().matrix();
  MatrixR<S> xhat = ((x.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array()).matrix();
  MatrixR<S> y = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename S>
MatrixR<S> seq_norm_backward(const SeqNormCache<S>& cache, const VectorX<S>& gamma, const MatrixR<S>& dy,
                             VectorX<S>& dgamma, VectorX<S>& dbeta) {
  const S count = static_cast<S>(dy.rows());
  const VectorX<S> sum_dy = dy.colwise().sum().transpose();
  const VectorX<S> sum_dy_xhat = dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
  dgamma += sum_dy_xhat;
  dbeta += sum_dy;
  const auto g = gamma.transpose().array();
  MatrixR<S> dx = (((dy.array().rowwise() * g).rowwise() - (g * sum_dy.transpose().array() / count)) -
                   cache.xhat.array().rowwise() * (g * sum_dy_xhat.transpose().array() / count))
                      .rowwise() *
                  cache.inv_std.transpose().array();
  return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis.

template <typename S>
struct LayerNormCache {
  MatrixR<S> xhat;
  VectorX<S> inv_std;  // per row
};

template <typename S>
MatrixR<S> layer_norm_forward(const MatrixR<S>& x, const VectorX<S>& gamma, const VectorX<S>& beta, S eps,
                              LayerNormCache<S>* cache) {
  const VectorX<S> mean = x.rowwise().mean();
  MatrixR<S> centred = x.colwise() - mean;
  const VectorX<S> inv_std =
      ((centred.array().square().rowwise().sum() / static_cast<S>(x.cols())) + eps).rsqrt().matrix();
  MatrixR<S> xhat = (centred.array().colwise() * inv_std.array()).matrix();
  MatrixR<S> y = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename S>
MatrixR<S> layer_norm_backward(const LayerNormCache<S>& cache, const VectorX<S>& gamma, const MatrixR<S>& dy,
                               VectorX<S>& dgamma, VectorX<S>& dbeta) {
  dgamma += dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
  dbeta += dy.colwise().sum().transpose();
  const MatrixR<S> dxhat = (dy.array().rowwise() * gamma.transpose().array()).matrix();
  const S dim = static_cast<S>(dy.cols());
  const VectorX<S> mean_dxhat = dxhat.rowwise().sum() / dim;
  const VectorX<S> mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat).rowwise().sum() / dim;
  MatrixR<S> dx = ((dxhat.colwise() - mean_dxhat).array() - cache.xhat.array().colwise() * mean_dxhat_xhat.array())
                      .colwise() *
                  cache.inv_std.array();
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise activations.

template <typename S>
S sigmoid(S v) {
  return S(1) / (S(1) + std::exp(-v));
}

template <typename S>
MatrixR<S> swish_forward(const MatrixR<S>& x) {
  return x.unaryExpr([](S v) { return v * sigmoid(v); });
}

template <typename S>
MatrixR<S> swish_backward(const MatrixR<S>& x, const MatrixR<S>& dy) {
  return dy.binaryExpr(x, [](S g, S v) {
    const S s = sigmoid(v);
    return g * (s + v * s * (S(1) - s));
  });
}

template <typename S>
MatrixR<S> relu_backward(const MatrixR<S>& y, const MatrixR<S>& dy) {
  return dy.binaryExpr(y, [](S g, S v) { return v > S(0) ? g : S(0); });
}

/// Gated linear unit over columns: [a | b] -> a * sigmoid(b).
template <typename S>
MatrixR<S> glu_forward(const MatrixR<S>& x) {
  const Index d = x.cols() / 2;
  return x.leftCols(d).cwiseProduct(x.rightCols(d).unaryExpr([](S v) { return sigmoid(v); }));
}

template <typename S>
MatrixR<S> glu_backward(const MatrixR<S>& x, const MatrixR<S>& dy) {
  const Index d = x.cols() / 2;
  MatrixR<S> dx(x.rows(), x.cols());
  const MatrixR<S> gate = x.rightCols(d).unaryExpr([](S v) { return sigmoid(v); });
  dx.leftCols(d) = dy.cwiseProduct(gate);
  dx.rightCols(d) = (dy.array() * x.leftCols(d).array() * gate.array() * (S(1) - gate.array())).matrix();
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout with a stored keep mask (values 0 or 1/(1-p)).

template <typename S>
MatrixR<S> dropout_mask(Index rows, Index cols, double p, std::mt19937_64& rng) {
  MatrixR<S> mask(rows, cols);
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask.data()[i] = u >= p ? scale : S(0);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2, floor on odd sizes.

struct PoolIndex {
  std::vector<Index> argmax;  // per output element, flat index into the input row
};

template <typename S>
MatrixR<S> maxpool2x2_forward(const MatrixR<S>& x, Index h, Index w, PoolIndex* index) {
  const Index oh = h / 2, ow = w / 2;
  MatrixR<S> y(x.rows(), oh * ow);
  if (index) index->argmax.resize(static_cast<std::size_t>(y.size()));
  for (Index r = 0; r < x.rows(); ++r) {
    const S* src = x.row(r).data();
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        Index best = (2 * i) * w + 2 * j;
        for (Index candidate : {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1}) {
          if (src[candidate] > src[best]) best = candidate;
        }
        y(r, i * ow + j) = src[best];
        if (index) index->argmax[static_cast<std::size_t>(r * oh * ow + i * ow + j)] = best;
      }
    }
  }
  return y;
}

template <typename S>
MatrixR<S> maxpool2x2_backward(const PoolIndex& index, Index rows, Index h, Index w, const MatrixR<S>& dy) {
  MatrixR<S> dx = MatrixR<S>::Zero(rows, h * w);
  const Index per_row = dy.cols();
  for (Index r = 0; r < rows; ++r) {
    for (Index k = 0; k < per_row; ++k) {
      dx(r, index.argmax[static_cast<std::size_t>(r * per_row + k)]) += dy(r, k);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Depthwise convolution along frames with "same" padding; weight [dim x kernel].

template <typename S>
MatrixR<S> depthwise_time_forward(const MatrixR<S>& x, Index batch, Index frames, const MatrixR<S>& weight) {
  const Index dim = x.cols(), k = weight.cols(), half = k / 2;
  MatrixR<S> y = MatrixR<S>::Zero(x.rows(), dim);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < frames; ++t) {
      auto out = y.row(b * frames + t);
      for (Index j = 0; j < k; ++j) {
        const Index src = t + j - half;
        if (src < 0 || src >= frames) continue;
        out.array() += x.row(b * frames + src).array() * weight.col(j).transpose().array();
      }
    }
  }
  return y;
}

template <typename S>
MatrixR<S> depthwise_time_backward(const MatrixR<S>& x, Index batch, Index frames, const MatrixR<S>& weight,
                                   const MatrixR<S>& dy, MatrixR<S>& dweight) {
  const Index k = weight.cols(), half = k / 2;
  MatrixR<S> dx = MatrixR<S>::Zero(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < frames; ++t) {
      const auto g = dy.row(b * frames + t);
      for (Index j = 0; j < k; ++j) {
        const Index src = t + j - half;
        if (src < 0 || src >= frames) continue;
        dweight.col(j) += g.cwiseProduct(x.row(b * frames + src)).transpose();
        dx.row(b * frames + src).array() += g.array() * weight.col(j).transpose().array();
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Row-wise affine map y = x W^T + b.

template <typename S>
MatrixR<S> linear_forward(const MatrixR<S>& x, const MatrixR<S>& weight, const VectorX<S>& bias) {
  MatrixR<S> y = x * weight.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

template <typename S>
MatrixR<S> linear_backward(const MatrixR<S>& x, const MatrixR<S>& weight, const MatrixR<S>& dy,
                           MatrixR<S>& dweight, VectorX<S>& dbias) {
  dweight.noalias() += dy.transpose() * x;
  dbias += dy.colwise().sum().transpose();
  return dy * weight;
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention per sample and head, on projected q, k, v.

template <typename S>
struct AttentionCache {
  std::vector<MatrixR<S>> probs;  // [batch*heads] of frames x frames
};

template <typename S>
MatrixR<S> attention_forward(const MatrixR<S>& q, const MatrixR<S>& k, const MatrixR<S>& v, Index batch,
                             Index frames, Index heads, AttentionCache<S>* cache) {
  const Index dim = q.cols(), dh = dim / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  MatrixR<S> out(q.rows(), dim);
  if (cache) cache->probs.assign(static_cast<std::size_t>(batch * heads), MatrixR<S>());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qh = q.block(b * frames, h * dh, frames, dh);
      const auto kh = k.block(b * frames, h * dh, frames, dh);
      const auto vh = v.block(b * frames, h * dh, frames, dh);
      MatrixR<S> scores = (qh * kh.transpose()) * scale;
      for (Index r = 0; r < frames; ++r) {
        const S peak = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - peak).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      out.block(b * frames, h * dh, frames, dh).noalias() = scores * vh;
      if (cache) cache->probs[static_cast<std::size_t>(b * heads + h)] = std::move(scores);
    }
  }
  return out;
}

template <typename S>
void attention_backward(const AttentionCache<S>& cache, const MatrixR<S>& q, const MatrixR<S>& k,
                        const MatrixR<S>& v, Index batch, Index frames, Index heads, const MatrixR<S>& dout,
                        MatrixR<S>& dq, MatrixR<S>& dk, MatrixR<S>& dv) {
  const Index dim = q.cols(), dh = dim / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  dq.setZero(q.rows(), dim);
  dk.setZero(k.rows(), dim);
  dv.setZero(v.rows(), dim);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const MatrixR<S>& p = cache.probs[static_cast<std::size_t>(b * heads + h)];
      const auto qh = q.block(b * frames, h * dh, frames, dh);
      const auto kh = k.block(b * frames, h * dh, frames, dh);
      const auto vh = v.block(b * frames, h * dh, frames, dh);
      const auto go = dout.block(b * frames, h * dh, frames, dh);
      dv.block(b * frames, h * dh, frames, dh).noalias() = p.transpose() * go;
      const MatrixR<S> dp = go * vh.transpose();
      const VectorX<S> row_dot = dp.cwiseProduct(p).rowwise().sum();
      const MatrixR<S> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
      dq.block(b * frames, h * dh, frames, dh).noalias() = ds * kh;
      dk.block(b * frames, h * dh, frames, dh).noalias() = ds.transpose() * qh;
    }
  }
}

}  // namespace uwloc::detail
