#pragma once

// Conditional multi-class occupancy + signed-distance network with hand-written gradients.
//
// Encoder: shared per-point layers 3 -> 64 -> 128 -> 1024 (ReLU), max pooled to the latent.
// Decoder: [latent; query] -> 512 x3 -> [h; latent; query] -> 512 x3 -> (C + 1 logits, sdf).
// Hidden decoder layers are linear (no bias) -> batch norm -> ReLU.

#include <occloc/deform.hpp>
#include <occloc/sensor.hpp>
#include <occloc/sortsample.hpp>

#include <Eigen/Dense>

#include <functional>
#include <span>

namespace occloc {

struct NetworkShape {
  int num_classes = 5;  // C; the head has C + 1 logits and one distance
  int latent = 1024;
  std::array<int, 2> encoder_hidden{64, 128};
  int decoder_width = 512;
  int layers_before_skip = 3;
  int layers_after_skip = 3;

  int outputs() const { return num_classes + 2; }
  int decoder_layers() const { return layers_before_skip + layers_after_skip; }
  bool operator==(const NetworkShape&) const = default;
};

inline void to_json(nlohmann::json& j, const NetworkShape& s) {
  j = {{"num_classes", s.num_classes},       {"latent", s.latent},
       {"encoder_hidden", s.encoder_hidden}, {"decoder_width", s.decoder_width},
       {"layers_before_skip", s.layers_before_skip}, {"layers_after_skip", s.layers_after_skip}};
}
inline void from_json(const nlohmann::json& j, NetworkShape& s) {
  s = NetworkShape{};
  s.num_classes = j.value("num_classes", s.num_classes);
  s.latent = j.value("latent", s.latent);
  s.encoder_hidden = j.value("encoder_hidden", s.encoder_hidden);
  s.decoder_width = j.value("decoder_width", s.decoder_width);
  s.layers_before_skip = j.value("layers_before_skip", s.layers_before_skip);
  s.layers_after_skip = j.value("layers_after_skip", s.layers_after_skip);
}

/// Parameter storage aligned for the widest vector unit. Every block also starts on a 64-byte
/// boundary, so vectorized reductions take the same path regardless of where the buffer lives.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Where each tensor lives inside the flat parameter vector (column-major rows x cols).
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0, cols = 1;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct ParamLayout {
  std::array<ParamBlock, 3> enc_w, enc_b;
  std::vector<ParamBlock> dec_w, dec_gamma, dec_beta;
  ParamBlock out_w, out_b;
  std::size_t total = 0;
  std::vector<ParamBlock> blocks;  // all of the above, in storage order

  explicit ParamLayout(const NetworkShape& s) {
    auto add = [&](const std::string& name, int rows, int cols) {
      total = (total + 15) / 16 * 16;
      ParamBlock b{name, total, rows, cols};
      total += b.size();
      blocks.push_back(b);
      return b;
    };
    const int widths[4] = {3, s.encoder_hidden[0], s.encoder_hidden[1], s.latent};
    for (int l = 0; l < 3; ++l) {
      enc_w[l] = add("enc" + std::to_string(l) + ".weight", widths[l + 1], widths[l]);
      enc_b[l] = add("enc" + std::to_string(l) + ".bias", widths[l + 1], 1);
    }
    const int w = s.decoder_width;
    for (int l = 0; l < s.decoder_layers(); ++l) {
      int in = w;
      if (l == 0) in = s.latent + 3;
      if (l == s.layers_before_skip) in = w + s.latent + 3;
      const std::string p = "dec" + std::to_string(l);
      dec_w.push_back(add(p + ".weight", w, in));
      dec_gamma.push_back(add(p + ".bn_gamma", w, 1));
      dec_beta.push_back(add(p + ".bn_beta", w, 1));
    }
    out_w = add("out.weight", s.outputs(), w);
    out_b = add("out.bias", s.outputs(), 1);
    total = (total + 15) / 16 * 16;
  }

  bool is_encoder(std::size_t index) const { return index < dec_w.front().offset; }
};

/// Training-ready example in normalized coordinates: the cloud, query points, class labels and
/// target distances (already multiplied by the normalization scale).
struct TrainExample {
  std::vector<Vec3> cloud;
  std::vector<Vec3> queries;
  std::vector<int> labels;
  std::vector<double> distances;
};

struct LossTerms {
  double ce = 0.0;   // mean cross-entropy
  double sdf = 0.0;  // lambda * mean squared distance error
  double total() const { return ce + sdf; }
};

/// Single-sample loss: CE(label, softmax(logits)) + lambda (sdf - d)^2.
inline LossTerms sample_loss(std::span<const double> logits, double sdf, int label, double d, double lambda) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return {m + std::log(z) - logits[static_cast<std::size_t>(label)], lambda * (sdf - d) * (sdf - d)};
}

inline double normal(Rng& rng) {
  // Box-Muller on the portable uniform stream.
  const double u1 = uniform(rng, 0.0, 1.0), u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * kPi * u2);
}

/// Network parameters plus batch-norm running statistics. Scalar is float or double.
template <typename T>
class OccupancyModel {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using MapV = Eigen::Map<Vec>;
  using CMapV = Eigen::Map<const Vec>;

  static constexpr double kBatchNormEps = 1e-5;
  static constexpr double kBatchNormMomentum = 0.1;

  OccupancyModel() : OccupancyModel(NetworkShape{}) {}
  explicit OccupancyModel(const NetworkShape& shape)
      : shape_(shape), layout_(shape), params_(layout_.total, T(0)) {
    running_mean_.assign(shape.decoder_layers(), Vec::Zero(shape.decoder_width));
    running_var_.assign(shape.decoder_layers(), Vec::Ones(shape.decoder_width));
  }

  /// He-normal hidden weights, small output weights, zero biases, unit BN scale.
  static OccupancyModel initialized(const NetworkShape& shape, std::uint64_t seed, bool zero_head = false) {
    OccupancyModel m(shape);
    Rng rng(seed);
    auto fill = [&](const ParamBlock& b, double stddev) {
      for (std::size_t i = 0; i < b.size(); ++i) m.params_[b.offset + i] = static_cast<T>(stddev * normal(rng));
    };
    for (const auto& b : m.layout_.enc_w) fill(b, std::sqrt(2.0 / b.cols));
    for (const auto& b : m.layout_.dec_w) fill(b, std::sqrt(2.0 / b.cols));
    for (const auto& b : m.layout_.dec_gamma) m.block(b).setOnes();
    if (!zero_head) fill(m.layout_.out_w, std::sqrt(1.0 / m.layout_.out_w.cols));
    return m;
  }

  const NetworkShape& shape() const { return shape_; }
  const ParamLayout& layout() const { return layout_; }
  AlignedVector<T>& params() { return params_; }
  const AlignedVector<T>& params() const { return params_; }
  std::vector<Vec>& running_mean() { return running_mean_; }
  std::vector<Vec>& running_var() { return running_var_; }
  const std::vector<Vec>& running_mean() const { return running_mean_; }
  const std::vector<Vec>& running_var() const { return running_var_; }

  MapM block(const ParamBlock& b) { return MapM(params_.data() + b.offset, b.rows, b.cols); }
  CMapM block(const ParamBlock& b) const { return CMapM(params_.data() + b.offset, b.rows, b.cols); }

  template <typename U>
  OccupancyModel<U> cast() const {
    OccupancyModel<U> m(shape_);
    for (std::size_t i = 0; i < params_.size(); ++i) m.params()[i] = static_cast<U>(params_[i]);
    for (int l = 0; l < shape_.decoder_layers(); ++l) {
      m.running_mean()[l] = running_mean_[l].template cast<U>();
      m.running_var()[l] = running_var_[l].template cast<U>();
    }
    return m;
  }

  // ------------------------------------------------------------------ encoder

  /// Points are sorted and exact duplicates removed first, so the latent is a function of the
  /// point set alone.
  static Mat canonical_cloud(const std::vector<Vec3>& cloud) {
    if (cloud.empty()) fail_data("cannot encode an empty point cloud");
    std::vector<Vec3> pts = cloud;
    auto less = [](const Vec3& a, const Vec3& b) { return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3); };
    std::sort(pts.begin(), pts.end(), less);
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    Mat x(3, static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = pts[i].cast<T>();
    return x;
  }

  struct EncoderCache {
    Mat x;
    std::array<Mat, 3> h;  // post-ReLU activations
    Vec latent;
    std::vector<Eigen::Index> argmax;
  };

  EncoderCache encode_cached(const std::vector<Vec3>& cloud) const {
    EncoderCache c;
    c.x = canonical_cloud(cloud);
    const Mat* in = &c.x;
    for (int l = 0; l < 3; ++l) {
      c.h[l] = block(layout_.enc_w[l]) * *in;
      c.h[l].colwise() += CMapV(params_.data() + layout_.enc_b[l].offset, layout_.enc_b[l].rows);
      c.h[l] = c.h[l].cwiseMax(T(0));
      in = &c.h[l];
    }
    const Mat& top = c.h[2];
    c.latent.resize(top.rows());
    c.argmax.resize(static_cast<std::size_t>(top.rows()));
    for (Eigen::Index f = 0; f < top.rows(); ++f) {
      Eigen::Index best = 0;
      T v = top(f, 0);
      for (Eigen::Index p = 1; p < top.cols(); ++p)
        if (top(f, p) > v) v = top(f, p), best = p;
      c.latent[f] = v;
      c.argmax[static_cast<std::size_t>(f)] = best;
    }
    return c;
  }

  Vec encode(const std::vector<Vec3>& cloud) const { return encode_cached(cloud).latent; }

  // ------------------------------------------------------------------ decoder

  struct DecoderCache {
    Mat latents;                      // latent x B
    std::vector<Eigen::Index> start;  // query range per cloud, size B + 1
    Mat q;                            // 3 x N
    std::vector<Mat> xhat, h;         // per hidden layer
    std::vector<Vec> inv_std;
    Mat out;                          // outputs x N
  };

  /// Forward pass for B clouds; queries of cloud b occupy columns [start[b], start[b+1]).
  /// Train mode normalizes with batch statistics (and updates the running estimates when
  /// `update_running` is set); eval mode uses the running estimates.
  void decode_batch(DecoderCache& c, bool train, bool update_running, double momentum = kBatchNormMomentum) {
    decode_impl(c, train);
    if (train && update_running) {
      const T m = static_cast<T>(momentum);
      const Eigen::Index n = c.q.cols();
      for (int l = 0; l < shape_.decoder_layers(); ++l) {
        running_mean_[l] = (T(1) - m) * running_mean_[l] + m * batch_mean_[l];
        const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T(1);
        running_var_[l] = (T(1) - m) * running_var_[l] + m * unbias * batch_var_[l];
      }
    }
  }

  void decode_eval(DecoderCache& c) const { decode_impl(c, false); }

  /// Eval-mode outputs for `queries` (normalized) given a latent; columns of the result are
  /// [logits (C + 1); sdf]. Evaluated in chunks.
  Mat predict(const Vec& latent, const std::vector<Vec3>& queries, std::size_t chunk = 4096) const {
    Mat all(shape_.outputs(), static_cast<Eigen::Index>(queries.size()));
    for (std::size_t s = 0; s < queries.size(); s += chunk) {
      const std::size_t e = std::min(queries.size(), s + chunk);
      DecoderCache c;
      c.latents = latent;
      c.start = {0, static_cast<Eigen::Index>(e - s)};
      c.q.resize(3, static_cast<Eigen::Index>(e - s));
      for (std::size_t i = s; i < e; ++i) c.q.col(static_cast<Eigen::Index>(i - s)) = queries[i].cast<T>();
      decode_impl(c, false);
      all.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) = c.out;
    }
    return all;
  }

  /// Argmax class per query (0 = none).
  std::vector<int> classify(const Vec& latent, const std::vector<Vec3>& queries) const {
    const Mat out = predict(latent, queries);
    std::vector<int> cls(queries.size());
    for (Eigen::Index n = 0; n < out.cols(); ++n) {
      Eigen::Index best;
      out.col(n).head(shape_.num_classes + 1).maxCoeff(&best);
      cls[static_cast<std::size_t>(n)] = static_cast<int>(best);
    }
    return cls;
  }

  // ------------------------------------------------------------------ loss and gradient

  /// Mean loss over all queries of the batch and, if `grad` is given, its gradient with respect
  /// to every parameter (train-mode batch norm).
  LossTerms loss_and_gradient(const std::vector<const TrainExample*>& batch, double lambda, AlignedVector<T>* grad,
                              bool update_running = false, double momentum = kBatchNormMomentum) {
    if (batch.empty()) fail_data("empty batch");
    const int B = static_cast<int>(batch.size());
    std::vector<EncoderCache> enc;
    enc.reserve(static_cast<std::size_t>(B));
    DecoderCache dc;
    dc.latents.resize(shape_.latent, B);
    dc.start.assign(1, 0);
    Eigen::Index n_total = 0;
    for (int b = 0; b < B; ++b) {
      enc.push_back(encode_cached(batch[b]->cloud));
      dc.latents.col(b) = enc.back().latent;
      n_total += static_cast<Eigen::Index>(batch[b]->queries.size());
      dc.start.push_back(n_total);
    }
    if (n_total == 0) fail_data("batch has no occupancy samples");
    dc.q.resize(3, n_total);
    std::vector<int> labels;
    std::vector<double> targets;
    labels.reserve(static_cast<std::size_t>(n_total));
    targets.reserve(static_cast<std::size_t>(n_total));
    for (int b = 0; b < B; ++b) {
      const auto& ex = *batch[b];
      for (std::size_t i = 0; i < ex.queries.size(); ++i) {
        dc.q.col(dc.start[b] + static_cast<Eigen::Index>(i)) = ex.queries[i].cast<T>();
        if (ex.labels[i] < 0 || ex.labels[i] > shape_.num_classes) fail_data("sample label out of range");
      }
      labels.insert(labels.end(), ex.labels.begin(), ex.labels.end());
      targets.insert(targets.end(), ex.distances.begin(), ex.distances.end());
    }
    decode_batch(dc, true, update_running, momentum);

    // Loss and d(loss)/d(output).
    const int K = shape_.num_classes + 1;
    const double inv_n = 1.0 / static_cast<double>(n_total);
    LossTerms terms;
    Mat d_out(shape_.outputs(), n_total);
    for (Eigen::Index n = 0; n < n_total; ++n) {
      const auto col = dc.out.col(n);
      double m = static_cast<double>(col.head(K).maxCoeff());
      double z = 0.0;
      for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(col[k]) - m);
      const int y = labels[static_cast<std::size_t>(n)];
      terms.ce += m + std::log(z) - static_cast<double>(col[y]);
      const double diff = static_cast<double>(col[K]) - targets[static_cast<std::size_t>(n)];
      terms.sdf += lambda * diff * diff;
      for (int k = 0; k < K; ++k)
        d_out(k, n) = static_cast<T>((std::exp(static_cast<double>(col[k]) - m) / z - (k == y ? 1.0 : 0.0)) * inv_n);
      d_out(K, n) = static_cast<T>(2.0 * lambda * diff * inv_n);
    }
    terms.ce *= inv_n;
    terms.sdf *= inv_n;
    if (!std::isfinite(terms.total()))
      fail_numeric("non-finite loss (ce " + std::to_string(terms.ce) + ", sdf " + std::to_string(terms.sdf) + ")");
    if (grad) backward(enc, dc, d_out, *grad);
    return terms;
  }

 private:
  void decode_impl(DecoderCache& c, bool train) const {
    const int layers = shape_.decoder_layers();
    const int B = static_cast<int>(c.latents.cols());
    const int L = shape_.latent;
    const int w = shape_.decoder_width;
    c.xhat.assign(static_cast<std::size_t>(layers), Mat());
    c.h.assign(static_cast<std::size_t>(layers), Mat());
    c.inv_std.assign(static_cast<std::size_t>(layers), Vec());
    if (train) {
      batch_mean_.assign(static_cast<std::size_t>(layers), Vec());
      batch_var_.assign(static_cast<std::size_t>(layers), Vec());
    }
    for (int l = 0; l < layers; ++l) {
      const CMapM W = block(layout_.dec_w[l]);
      Mat z;
      if (l == 0 || l == shape_.layers_before_skip) {
        const Eigen::Index h_cols = l == 0 ? 0 : w;
        z.noalias() = W.middleCols(h_cols + L, 3) * c.q;
        if (h_cols > 0) z.noalias() += W.leftCols(h_cols) * c.h[l - 1];
        // The latent block is multiplied once per cloud and broadcast to its queries.
        const Mat per_cloud = W.middleCols(h_cols, L) * c.latents;
        for (int b = 0; b < B; ++b)
          z.middleCols(c.start[b], c.start[b + 1] - c.start[b]).colwise() += per_cloud.col(b);
      } else {
        z.noalias() = W * c.h[l - 1];
      }
      Vec mean, var;
      if (train) {
        mean = z.rowwise().mean();
        var = (z.colwise() - mean).array().square().rowwise().mean();
        batch_mean_[l] = mean;
        batch_var_[l] = var;
      } else {
        mean = running_mean_[l];
        var = running_var_[l];
      }
      c.inv_std[l] = (var.array() + static_cast<T>(kBatchNormEps)).rsqrt();
      c.xhat[l] = ((z.colwise() - mean).array().colwise() * c.inv_std[l].array()).matrix();
      const CMapV gamma(params_.data() + layout_.dec_gamma[l].offset, w);
      const CMapV beta(params_.data() + layout_.dec_beta[l].offset, w);
      c.h[l] = ((c.xhat[l].array().colwise() * gamma.array()).colwise() + beta.array()).cwiseMax(T(0)).matrix();
    }
    c.out.noalias() = block(layout_.out_w) * c.h[layers - 1];
    c.out.colwise() += CMapV(params_.data() + layout_.out_b.offset, shape_.outputs());
  }

  void backward(const std::vector<EncoderCache>& enc, const DecoderCache& c, const Mat& d_out, AlignedVector<T>& grad) const {
    grad.assign(params_.size(), T(0));
    auto gblock = [&](const ParamBlock& b) { return MapM(grad.data() + b.offset, b.rows, b.cols); };
    const int layers = shape_.decoder_layers();
    const int B = static_cast<int>(c.latents.cols());
    const int L = shape_.latent;
    const int w = shape_.decoder_width;
    const auto n = static_cast<T>(c.q.cols());

    gblock(layout_.out_w).noalias() = d_out * c.h[layers - 1].transpose();
    gblock(layout_.out_b) = d_out.rowwise().sum();
    Mat dh = block(layout_.out_w).transpose() * d_out;
    Mat d_latent = Mat::Zero(L, B);

    for (int l = layers - 1; l >= 0; --l) {
      const CMapV gamma(params_.data() + layout_.dec_gamma[l].offset, w);
      const Mat dy = (dh.array() * (c.h[l].array() > T(0)).template cast<T>()).matrix();
      gblock(layout_.dec_gamma[l]) = (dy.array() * c.xhat[l].array()).rowwise().sum().matrix();
      gblock(layout_.dec_beta[l]) = dy.rowwise().sum();
      const Mat dxhat = (dy.array().colwise() * gamma.array()).matrix();
      const Vec mean_dx = dxhat.rowwise().sum() / n;
      const Vec mean_dxx = (dxhat.array() * c.xhat[l].array()).rowwise().sum().matrix() / n;
      const Mat dz = (((dxhat.colwise() - mean_dx).array() - c.xhat[l].array().colwise() * mean_dxx.array()).colwise() *
                      c.inv_std[l].array())
                         .matrix();
      const CMapM W = block(layout_.dec_w[l]);
      MapM dW = gblock(layout_.dec_w[l]);
      if (l == 0 || l == shape_.layers_before_skip) {
        const Eigen::Index h_cols = l == 0 ? 0 : w;
        Mat per_cloud(w, B);
        for (int b = 0; b < B; ++b) per_cloud.col(b) = dz.middleCols(c.start[b], c.start[b + 1] - c.start[b]).rowwise().sum();
        dW.middleCols(h_cols, L).noalias() = per_cloud * c.latents.transpose();
        dW.middleCols(h_cols + L, 3).noalias() = dz * c.q.transpose();
        d_latent.noalias() += W.middleCols(h_cols, L).transpose() * per_cloud;
        if (h_cols > 0) {
          dW.leftCols(h_cols).noalias() = dz * c.h[l - 1].transpose();
          dh.noalias() = W.leftCols(h_cols).transpose() * dz;
        }
      } else {
        dW.noalias() = dz * c.h[l - 1].transpose();
        dh.noalias() = W.transpose() * dz;
      }
    }

    // Encoder: max pooling routes each latent gradient to its argmax point.
    for (int b = 0; b < B; ++b) {
      const EncoderCache& e = enc[static_cast<std::size_t>(b)];
      Mat d = Mat::Zero(L, e.h[2].cols());
      for (int f = 0; f < L; ++f) d(f, e.argmax[static_cast<std::size_t>(f)]) = d_latent(f, b);
      for (int l = 2; l >= 0; --l) {
        const Mat dz = (d.array() * (e.h[l].array() > T(0)).template cast<T>()).matrix();
        const Mat& in = l == 0 ? e.x : e.h[l - 1];
        gblock(layout_.enc_w[l]).noalias() += dz * in.transpose();
        gblock(layout_.enc_b[l]) += dz.rowwise().sum();
        if (l > 0) d.noalias() = block(layout_.enc_w[l]).transpose() * dz;
      }
    }
  }

  NetworkShape shape_;
  ParamLayout layout_;
  AlignedVector<T> params_;
  std::vector<Vec> running_mean_, running_var_;
  mutable std::vector<Vec> batch_mean_, batch_var_;
};

// ---------------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AlignedVector<T> m, v;
  std::uint64_t step = 0;

  void update(AlignedVector<T>& params, const AlignedVector<T>& grad, const AdamConfig& cfg) {
    if (m.size() != params.size()) m.assign(params.size(), T(0)), v.assign(params.size(), T(0));
    ++step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      params[i] -= lr * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
};

// ---------------------------------------------------------------------- training

struct TrainConfig {
  AdamConfig adam;
  double lambda = 100.0;
  int batch_size = 16;     // clouds per step
  int sample_chunks = 16;  // steps per batch of clouds; each sees a disjoint share of the samples
  int epochs = 30;
  std::uint64_t seed = 1;
  bool point_drop = true;
  double max_drop = 0.7;
  bool rotation = true;
  double max_rotation_deg = 30.0;
  int calibration_samples = 64;  // per cloud; 0 keeps the running averages
  NetworkShape shape;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.adam.lr},           {"beta1", c.adam.beta1},         {"beta2", c.adam.beta2},
       {"adam_eps", c.adam.eps},    {"lambda", c.lambda},            {"batch_size", c.batch_size},  {"sample_chunks", c.sample_chunks},
       {"epochs", c.epochs},        {"seed", c.seed},                {"point_drop", c.point_drop},
       {"max_drop", c.max_drop},    {"rotation", c.rotation},        {"max_rotation_deg", c.max_rotation_deg},
       {"calibration_samples", c.calibration_samples}, {"shape", c.shape}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("adam_eps", c.adam.eps);
  c.lambda = j.value("lambda", c.lambda);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.sample_chunks = j.value("sample_chunks", c.sample_chunks);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.point_drop = j.value("point_drop", c.point_drop);
  c.max_drop = j.value("max_drop", c.max_drop);
  c.rotation = j.value("rotation", c.rotation);
  c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
  c.calibration_samples = j.value("calibration_samples", c.calibration_samples);
  if (j.contains("shape")) c.shape = j.at("shape").get<NetworkShape>();
}

/// Rotation (about the cloud's box center), joint normalization, then point drop.
inline TrainExample prepare_example(const SensorPointCloud& cloud, const OccupancySampleSet& samples, Rng& rng,
                                    const TrainConfig& cfg) {
  if (cloud.points.size() < 2) fail_data("training cloud has fewer than two points");
  std::vector<OccupancySample> all = samples.flatten();
  std::vector<Vec3> pts = cloud.points;
  std::vector<Vec3> queries;
  queries.reserve(all.size());
  for (const auto& s : all) queries.push_back(s.position);
  if (cfg.rotation) {
    const Vec3 pivot = AxisAlignedBox::of_points(pts).center();
    const Vec3 angles = sample_rotation_angles(rng, cfg.max_rotation_deg);
    pts = rotate_points(pts, angles, pivot);
    queries = rotate_points(queries, angles, pivot);
  }
  const IsoNormalization norm = fit_normalization(pts);
  TrainExample ex;
  ex.cloud = norm.normalize(pts);
  if (cfg.point_drop) ex.cloud = point_drop(ex.cloud, rng, cfg.max_drop);
  ex.queries = norm.normalize(queries);
  ex.labels.reserve(all.size());
  ex.distances.reserve(all.size());
  for (const auto& s : all) {
    ex.labels.push_back(s.label);
    ex.distances.push_back(norm.normalize_distance(s.signed_distance));
  }
  return ex;
}

/// Replaces the running batch-norm estimates with statistics of one batch holding every training
/// cloud (unaugmented) and `per_cloud` of its samples. Running averages over small batches drift with
/// the batch composition; this pins eval mode to the whole training distribution.
template <typename T>
void calibrate_batchnorm(OccupancyModel<T>& model, const std::vector<TrainingPair>& pairs, std::size_t per_cloud,
                         std::uint64_t seed) {
  if (pairs.empty()) fail_data("empty training dataset");
  TrainConfig plain;
  plain.point_drop = false;
  plain.rotation = false;
  Rng rng(seed ^ 0xBA7C4A11ULL);
  std::vector<TrainExample> examples;
  examples.reserve(pairs.size());
  for (const auto& p : pairs) {
    TrainExample ex = prepare_example(p.cloud, p.samples, rng, plain);
    const std::size_t n = ex.queries.size(), keep = std::min(n, per_cloud);
    for (std::size_t i = 0; i < keep; ++i) {  // partial shuffle: the first `keep` become a uniform subset
      const std::size_t j = i + uniform_index(rng, n - i);
      std::swap(ex.queries[i], ex.queries[j]);
      std::swap(ex.labels[i], ex.labels[j]);
      std::swap(ex.distances[i], ex.distances[j]);
    }
    ex.queries.resize(keep);
    ex.labels.resize(keep);
    ex.distances.resize(keep);
    examples.push_back(std::move(ex));
  }
  std::vector<const TrainExample*> batch;
  for (const auto& ex : examples) batch.push_back(&ex);
  model.loss_and_gradient(batch, plain.lambda, nullptr, true, 1.0);
}

/// Shuffles each example's samples and deals them into `parts` batches that all share the same
/// clouds, so every step normalizes over many clouds at a fraction of the samples.
inline std::vector<std::vector<TrainExample>> split_samples(const std::vector<TrainExample>& examples, int parts, Rng& rng) {
  if (parts == 1) return {examples};
  std::vector<std::vector<TrainExample>> out(static_cast<std::size_t>(parts));
  for (const TrainExample& ex : examples) {
    const std::size_t n = ex.queries.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    for (std::size_t k = 0; k < out.size(); ++k) {
      TrainExample part;
      part.cloud = ex.cloud;
      for (std::size_t i = k * n / out.size(); i < (k + 1) * n / out.size(); ++i) {
        part.queries.push_back(ex.queries[perm[i]]);
        part.labels.push_back(ex.labels[perm[i]]);
        part.distances.push_back(ex.distances[perm[i]]);
      }
      out[k].push_back(std::move(part));
    }
  }
  return out;
}

struct TraceRow {
  std::uint64_t step = 0;
  int epoch = 0;
  LossTerms loss;
};

/// One Adam step on a batch; returns the loss before the update.
template <typename T>
LossTerms train_step(OccupancyModel<T>& model, AdamState<T>& adam, const std::vector<const TrainExample*>& batch,
                     const TrainConfig& cfg) {
  AlignedVector<T> grad;
  const LossTerms loss = model.loss_and_gradient(batch, cfg.lambda, &grad, true);
  adam.update(model.params(), grad, cfg.adam);
  return loss;
}

template <typename T>
struct TrainState {
  OccupancyModel<T> model;
  AdamState<T> adam;
  int epochs_done = 0;
  std::vector<TraceRow> trace;
};

inline Rng epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(epoch), 0x0cc1u};
  return Rng(seq);
}

/// Runs epochs [state.epochs_done, cfg.epochs). Each epoch draws its shuffle and augmentations from
/// a stream derived from (seed, epoch), so a resumed run continues the same trace.
template <typename T>
void train_loop(TrainState<T>& state, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                const std::function<void(const TraceRow&)>& on_step = {}) {
  if (pairs.empty()) fail_data("empty training dataset");
  if (cfg.batch_size < 1) fail_usage("batch_size must be positive");
  if (cfg.sample_chunks < 1) fail_usage("sample_chunks must be positive");
  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    Rng rng = epoch_rng(cfg.seed, epoch);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TrainExample> examples;
      for (std::size_t i = s; i < e; ++i) examples.push_back(prepare_example(pairs[order[i]].cloud, pairs[order[i]].samples, rng, cfg));
      const std::vector<std::vector<TrainExample>> chunks = split_samples(examples, cfg.sample_chunks, rng);
      for (const auto& chunk : chunks) {
        std::vector<const TrainExample*> batch;
        for (const auto& ex : chunk)
          if (!ex.queries.empty()) batch.push_back(&ex);
        if (batch.empty()) continue;
        TraceRow row;
        row.loss = train_step(state.model, state.adam, batch, cfg);
        row.step = state.adam.step;
        row.epoch = epoch;
        state.trace.push_back(row);
        if (on_step) on_step(row);
      }
    }
    state.epochs_done = epoch + 1;
  }
  if (cfg.calibration_samples > 0) calibrate_batchnorm(state.model, pairs, static_cast<std::size_t>(cfg.calibration_samples), cfg.seed);
}

template <typename T>
TrainState<T> start_training(const TrainConfig& cfg) {
  return TrainState<T>{OccupancyModel<T>::initialized(cfg.shape, cfg.seed), {}, 0, {}};
}

/// Fraction of samples whose eval-mode argmax equals the label (no augmentation).
template <typename T>
double training_accuracy(const OccupancyModel<T>& model, const std::vector<TrainingPair>& pairs) {
  TrainConfig plain;
  plain.point_drop = false;
  plain.rotation = false;
  std::size_t hit = 0, total = 0;
  Rng unused(0);
  for (const auto& p : pairs) {
    const TrainExample ex = prepare_example(p.cloud, p.samples, unused, plain);
    const auto cls = model.classify(model.encode(ex.cloud), ex.queries);
    for (std::size_t i = 0; i < cls.size(); ++i) hit += cls[i] == ex.labels[i];
    total += cls.size();
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------- gradient check

struct GradientProbe {
  std::size_t index = 0;
  bool encoder = false;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
  bool floored = false;  // both values below the resolvable floor
};

/// Central differences on randomly chosen parameters (half from the encoder, half from the
/// decoder). Relative error = |a - n| / max(|a|, |n|, floor), where the floor is at least
/// 1e4 times the rounding noise eps * |loss| / h of the difference quotient.
inline std::vector<GradientProbe> check_gradients(OccupancyModel<double>& model, const std::vector<const TrainExample*>& batch,
                                                  double lambda, std::size_t probes, std::uint64_t seed, double h = 1e-5,
                                                  double floor = 1e-6) {
  AlignedVector<double> grad;
  const double loss = model.loss_and_gradient(batch, lambda, &grad).total();
  floor = std::max(floor, 1e4 * std::numeric_limits<double>::epsilon() * std::abs(loss) / h);
  Rng rng(seed);
  const std::size_t enc_end = model.layout().dec_w.front().offset;
  std::vector<GradientProbe> out;
  for (std::size_t k = 0; k < probes; ++k) {
    GradientProbe p;
    p.encoder = k % 2 == 0;
    p.index = p.encoder ? uniform_index(rng, enc_end) : enc_end + uniform_index(rng, model.params().size() - enc_end);
    double& theta = model.params()[p.index];
    const double keep = theta;
    theta = keep + h;
    const double up = model.loss_and_gradient(batch, lambda, nullptr).total();
    theta = keep - h;
    const double down = model.loss_and_gradient(batch, lambda, nullptr).total();
    theta = keep;
    p.analytic = grad[p.index];
    p.numeric = (up - down) / (2.0 * h);
    p.floored = std::max(std::abs(p.analytic), std::abs(p.numeric)) < floor;
    p.relative_error = std::abs(p.analytic - p.numeric) / std::max({std::abs(p.analytic), std::abs(p.numeric), floor});
    out.push_back(p);
  }
  return out;
}

}  // namespace occloc
