#pragma once

// Cross-vocabulary projection.
//
// An autoencoder is trained on embedding pairs of tokens both vocabularies
// share: its encoder maps generator embeddings into the retriever's embedding
// space. Each retriever token embedding is then written as a minimum-norm
// least-squares combination of the encoded generator embeddings, giving a
// V_ret x V_gen matrix that carries retriever-vocabulary gradients onto the
// generator vocabulary.

#include "jointgcg/core.hpp"
#include "jointgcg/model_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace jointgcg {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
};

/// Encoder: affine, ReLU, affine, ReLU, affine (D_gen -> h1 -> h2 -> D_ret).
/// Decoder mirrors it (D_ret -> h2 -> h1 -> D_gen).
struct AutoencoderParams {
  std::array<DenseLayer, 3> encoder;
  std::array<DenseLayer, 3> decoder;

  std::size_t gen_dim() const { return encoder[0].in_dim(); }
  std::size_t ret_dim() const { return encoder[2].out_dim(); }

  void validate() const {
    auto chain = [](const std::array<DenseLayer, 3>& layers) {
      for (std::size_t i = 0; i < 3; ++i) {
        if (static_cast<std::size_t>(layers[i].bias.size()) != layers[i].out_dim()) return false;
        if (!layers[i].weight.allFinite() || !layers[i].bias.allFinite()) return false;
        if (i > 0 && layers[i].in_dim() != layers[i - 1].out_dim()) return false;
      }
      return true;
    };
    if (!chain(encoder) || !chain(decoder) || decoder[0].in_dim() != ret_dim() || decoder[2].out_dim() != gen_dim()) {
      fail(ErrorCode::DimensionMismatch, "autoencoder layers do not chain");
    }
  }

  ParameterFile to_parameters() const {
    ParameterFile f;
    f.kind = "autoencoder";
    for (std::size_t i = 0; i < 3; ++i) {
      f.add_matrix("enc" + std::to_string(i) + "_weight", encoder[i].weight);
      f.add_matrix("enc" + std::to_string(i) + "_bias", encoder[i].bias);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      f.add_matrix("dec" + std::to_string(i) + "_weight", decoder[i].weight);
      f.add_matrix("dec" + std::to_string(i) + "_bias", decoder[i].bias);
    }
    return f;
  }

  static AutoencoderParams from_parameters(const ParameterFile& f) {
    if (f.kind != "autoencoder") fail(ErrorCode::ModelLoadError, "expected autoencoder file, got " + f.kind);
    AutoencoderParams p;
    for (std::size_t i = 0; i < 3; ++i) {
      p.encoder[i].weight = f.matrix("enc" + std::to_string(i) + "_weight");
      p.encoder[i].bias = f.matrix("enc" + std::to_string(i) + "_bias").col(0);
      p.decoder[i].weight = f.matrix("dec" + std::to_string(i) + "_weight");
      p.decoder[i].bias = f.matrix("dec" + std::to_string(i) + "_bias").col(0);
    }
    p.validate();
    return p;
  }
};

struct CvpTrainConfig {
  double rec_weight = 0.25;      // weight of the reconstruction term; alignment gets 1 - rec_weight
  double train_fraction = 0.8;   // remainder is the validation split
  std::size_t max_epochs = 500;
  double learning_rate = 3e-3;   // cosine-annealed to 0 over max_epochs
  double weight_decay = 0.01;    // decoupled
  std::size_t batch_size = 32;
  std::size_t patience = 20;     // epochs without validation improvement
  bool normalize_embeddings = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(rec_weight >= 0.0 && rec_weight <= 1.0)) fail(ErrorCode::InvalidArgument, "rec_weight must be in [0,1]");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail(ErrorCode::InvalidArgument, "train_fraction in (0,1)");
    if (batch_size == 0 || max_epochs == 0) fail(ErrorCode::InvalidArgument, "batch_size and max_epochs must be >= 1");
  }
};

struct CvpEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean composite loss per pair
  double val_loss = 0.0;
  double val_align = 0.0;   // mean ||Enc(e_gen) - e_ret||
};

struct CvpTraining {
  AutoencoderParams params;  // parameters at the best validation loss
  std::vector<CvpEpoch> trace;
  std::size_t best_epoch = 0;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
};

namespace detail {

inline DenseLayer init_layer(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  DenseLayer layer{Matrix(out, in), Vector(out)};
  for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
  }
  for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = rng.uniform(-bound, bound);
  return layer;
}

/// Column-batched forward pass through three layers, keeping activations.
struct StackTrace {
  std::array<Matrix, 4> acts;  // input, relu1, relu2, output (columns = samples)
};

inline Matrix apply_layer(const DenseLayer& layer, const Matrix& x) {
  return (layer.weight * x).colwise() + layer.bias;
}

inline StackTrace forward_stack(const std::array<DenseLayer, 3>& layers, const Matrix& x) {
  StackTrace t;
  t.acts[0] = x;
  t.acts[1] = apply_layer(layers[0], x).cwiseMax(0.0);
  t.acts[2] = apply_layer(layers[1], t.acts[1]).cwiseMax(0.0);
  t.acts[3] = apply_layer(layers[2], t.acts[2]);
  return t;
}

struct LayerGrad {
  Matrix weight;
  Vector bias;
};

/// Backpropagates d(loss)/d(output) through the stack; returns d(loss)/d(input).
inline Matrix backward_stack(const std::array<DenseLayer, 3>& layers, const StackTrace& t, const Matrix& d_out,
                             std::array<LayerGrad, 3>& grads) {
  Matrix d = d_out;
  for (int i = 2; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    grads[ui].weight += d * t.acts[ui].transpose();
    grads[ui].bias += d.rowwise().sum();
    d = layers[ui].weight.transpose() * d;
    if (i > 0) d = d.cwiseProduct((t.acts[ui].array() > 0.0).cast<double>().matrix());
  }
  return d;
}

/// Per-column Euclidean norms and unit residual directions (zero where the residual is zero).
inline Vector column_norms(const Matrix& r, Matrix* unit) {
  Vector n = r.colwise().norm().transpose();
  if (unit) {
    *unit = r;
    for (Eigen::Index c = 0; c < r.cols(); ++c) {
      if (n(c) > 0.0) unit->col(c) /= n(c);
      else unit->col(c).setZero();
    }
  }
  return n;
}

struct AdamSlot {
  Matrix m, v;
};

}  // namespace detail

inline AutoencoderParams init_autoencoder(std::size_t gen_dim, std::size_t ret_dim, Rng& rng) {
  const std::size_t width = std::max(gen_dim, ret_dim);
  const std::size_t h1 = 4 * width;
  const std::size_t h2 = 2 * width;
  AutoencoderParams p;
  p.encoder = {detail::init_layer(gen_dim, h1, rng), detail::init_layer(h1, h2, rng), detail::init_layer(h2, ret_dim, rng)};
  p.decoder = {detail::init_layer(ret_dim, h2, rng), detail::init_layer(h2, h1, rng), detail::init_layer(h1, gen_dim, rng)};
  return p;
}

/// Encodes each row of `rows` (n x D_gen) into the retriever space (n x D_ret).
inline Matrix encode_rows(const AutoencoderParams& params, const Matrix& rows) {
  if (static_cast<std::size_t>(rows.cols()) != params.gen_dim()) {
    fail(ErrorCode::DimensionMismatch, "encoder input width mismatch");
  }
  return detail::forward_stack(params.encoder, rows.transpose()).acts[3].transpose();
}

inline Vector encode(const AutoencoderParams& params, const Vector& embedding) {
  if (static_cast<std::size_t>(embedding.size()) != params.gen_dim()) {
    fail(ErrorCode::DimensionMismatch, "encoder input width mismatch");
  }
  return detail::forward_stack(params.encoder, embedding).acts[3].col(0);
}

inline Matrix decode_rows(const AutoencoderParams& params, const Matrix& rows) {
  if (static_cast<std::size_t>(rows.cols()) != params.ret_dim()) {
    fail(ErrorCode::DimensionMismatch, "decoder input width mismatch");
  }
  return detail::forward_stack(params.decoder, rows.transpose()).acts[3].transpose();
}

/// Mean composite loss per pair and mean alignment distance over the given rows.
inline std::pair<double, double> composite_loss(const AutoencoderParams& params, const Matrix& gen, const Matrix& ret,
                                                double rec_weight) {
  const Matrix enc = encode_rows(params, gen);
  const Matrix rec = decode_rows(params, enc);
  const double n = static_cast<double>(gen.rows());
  const double align = (enc - ret).rowwise().norm().sum() / n;
  const double recon = (rec - gen).rowwise().norm().sum() / n;
  return {rec_weight * recon + (1.0 - rec_weight) * align, align};
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

inline Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

/// Trains the autoencoder on paired shared-token embeddings (row i of each matrix
/// belongs to the same token). Minimizes
///   rec_weight * sum ||Dec(Enc(g)) - g|| + (1 - rec_weight) * sum ||Enc(g) - r||
/// with AdamW and a cosine-annealed step size; keeps the best-validation parameters.
inline CvpTraining train_autoencoder(const Matrix& gen_shared_in, const Matrix& ret_shared_in, const CvpTrainConfig& cfg) {
  cfg.validate();
  if (gen_shared_in.rows() != ret_shared_in.rows()) {
    fail(ErrorCode::DimensionMismatch, "shared embedding matrices must pair row for row");
  }
  if (gen_shared_in.rows() < 2) fail(ErrorCode::TooFewSharedTokens, "need at least two shared tokens");
  const Matrix gen_shared = cfg.normalize_embeddings ? normalize_rows(gen_shared_in) : gen_shared_in;
  const Matrix ret_shared = cfg.normalize_embeddings ? normalize_rows(ret_shared_in) : ret_shared_in;

  Rng rng(cfg.seed);
  const auto n = static_cast<std::size_t>(gen_shared.rows());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  CvpTraining result;
  result.train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  result.val_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  const Matrix train_gen = select_rows(gen_shared, result.train_rows);
  const Matrix train_ret = select_rows(ret_shared, result.train_rows);
  const Matrix val_gen = select_rows(gen_shared, result.val_rows);
  const Matrix val_ret = select_rows(ret_shared, result.val_rows);

  AutoencoderParams params =
      init_autoencoder(static_cast<std::size_t>(gen_shared.cols()), static_cast<std::size_t>(ret_shared.cols()), rng);

  // Flattened views of every trainable tensor for the optimizer.
  auto tensors = [](AutoencoderParams& p) {
    std::vector<Eigen::Ref<Matrix>> out;
    for (auto* stack : {&p.encoder, &p.decoder}) {
      for (auto& layer : *stack) {
        out.emplace_back(layer.weight);
        out.emplace_back(Eigen::Map<Matrix>(layer.bias.data(), layer.bias.size(), 1));
      }
    }
    return out;
  };
  std::vector<detail::AdamSlot> slots;
  for (auto& t : tensors(params)) slots.push_back({Matrix::Zero(t.rows(), t.cols()), Matrix::Zero(t.rows(), t.cols())});

  const std::size_t batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(cfg.max_epochs * batches);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t step = 0;

  double best_val = std::numeric_limits<double>::infinity();
  result.params = params;
  std::size_t since_best = 0;
  std::vector<std::size_t> perm(n_train);
  for (std::size_t i = 0; i < n_train; ++i) perm[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(perm);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n_train, lo + cfg.batch_size);
      const std::span<const std::size_t> idx(perm.data() + lo, hi - lo);
      const Matrix g = select_rows(train_gen, idx).transpose();  // D_gen x batch
      const Matrix r = select_rows(train_ret, idx).transpose();

      const auto enc = detail::forward_stack(params.encoder, g);
      const auto dec = detail::forward_stack(params.decoder, enc.acts[3]);
      Matrix align_dir, rec_dir;
      detail::column_norms(enc.acts[3] - r, &align_dir);
      detail::column_norms(dec.acts[3] - g, &rec_dir);

      std::array<detail::LayerGrad, 3> enc_grads, dec_grads;
      for (std::size_t i = 0; i < 3; ++i) {
        enc_grads[i] = {Matrix::Zero(params.encoder[i].weight.rows(), params.encoder[i].weight.cols()),
                        Vector::Zero(params.encoder[i].bias.size())};
        dec_grads[i] = {Matrix::Zero(params.decoder[i].weight.rows(), params.decoder[i].weight.cols()),
                        Vector::Zero(params.decoder[i].bias.size())};
      }
      const Matrix d_code = detail::backward_stack(params.decoder, dec, cfg.rec_weight * rec_dir, dec_grads);
      detail::backward_stack(params.encoder, enc, d_code + (1.0 - cfg.rec_weight) * align_dir, enc_grads);

      std::vector<Matrix> grads;
      for (auto* stack : {&enc_grads, &dec_grads}) {
        for (auto& lg : *stack) {
          grads.push_back(lg.weight);
          grads.push_back(Eigen::Map<const Matrix>(lg.bias.data(), lg.bias.size(), 1));
        }
      }
      const double lr =
          cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      ++step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      auto views = tensors(params);
      for (std::size_t k = 0; k < views.size(); ++k) {
        auto& theta = views[k];
        auto& slot = slots[k];
        slot.m = beta1 * slot.m + (1.0 - beta1) * grads[k];
        slot.v = beta2 * slot.v + (1.0 - beta2) * grads[k].cwiseAbs2();
        theta *= (1.0 - lr * cfg.weight_decay);
        theta -= (lr * (slot.m / bc1).array() / ((slot.v / bc2).array().sqrt() + adam_eps)).matrix();
      }
    }

    const auto [train_loss, train_align] = composite_loss(params, train_gen, train_ret, cfg.rec_weight);
    const auto [val_loss, val_align] = composite_loss(params, val_gen, val_ret, cfg.rec_weight);
    (void)train_align;
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      fail(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + ": train " + format_double(train_loss) +
                                         ", validation " + format_double(val_loss));
    }
    result.trace.push_back({epoch, train_loss, val_loss, val_align});
    if (val_loss < best_val) {
      best_val = val_loss;
      result.params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

struct ProjectionMatrix {
  Matrix values;  // V_ret x V_gen

  ParameterFile to_parameters() const {
    ParameterFile f;
    f.kind = "projection";
    f.add_matrix("projection", values);
    return f;
  }

  static ProjectionMatrix from_parameters(const ParameterFile& f) {
    if (f.kind != "projection") fail(ErrorCode::ModelLoadError, "expected projection file, got " + f.kind);
    return {f.matrix("projection")};
  }
};

/// Row i is the minimum-norm x minimizing ||x * encoded_gen - ret_embeddings[i]||.
inline ProjectionMatrix solve_projection(const Matrix& encoded_gen, const Matrix& ret_embeddings) {
  if (encoded_gen.cols() != ret_embeddings.cols()) {
    fail(ErrorCode::DimensionMismatch, "encoded generator width != retriever embedding width");
  }
  if (encoded_gen.isZero(0.0)) fail(ErrorCode::DegenerateSystem, "encoded generator embeddings are all zero");
  // x * A = y  <=>  A^T x^T = y^T, solved for every retriever row at once.
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(encoded_gen.transpose());
  const Matrix solution = cod.solve(ret_embeddings.transpose());  // V_gen x V_ret
  return {solution.transpose()};
}

inline ProjectionMatrix build_projection(const AutoencoderParams& params, const Matrix& gen_embedding,
                                         const Matrix& ret_embedding) {
  return solve_projection(encode_rows(params, gen_embedding), ret_embedding);
}

/// grad_ret (N_ret x V_ret) times W (V_ret x V_gen).
inline Matrix project_gradients(const ProjectionMatrix& w, const Matrix& grad_ret) {
  if (grad_ret.cols() != w.values.rows()) fail(ErrorCode::DimensionMismatch, "gradient width != projection rows");
  return grad_ret * w.values;
}

struct CvpReport {
  double err_proj = 0.0;
  std::vector<std::pair<std::size_t, double>> recall;  // (k, recall@k)

  double recall_at(std::size_t k) const {
    for (const auto& [kk, v] : recall) {
      if (kk == k) return v;
    }
    fail(ErrorCode::InvalidArgument, "recall@" + std::to_string(k) + " not computed");
  }
};

/// Projection error and nearest-neighbour token recall on validation pairs. The
/// candidate set for recall is the supplied retriever embeddings; a pair's rank
/// is 1 + the number of candidates strictly closer than its true partner.
inline CvpReport evaluate_cvp(const AutoencoderParams& params, const Matrix& gen_val, const Matrix& ret_val,
                              std::span<const std::size_t> k_list) {
  if (gen_val.rows() == 0 || gen_val.rows() != ret_val.rows()) {
    fail(ErrorCode::InvalidArgument, "validation pairs must be non-empty and paired");
  }
  const Matrix projected = encode_rows(params, gen_val);
  const auto n = static_cast<std::size_t>(gen_val.rows());
  std::vector<std::size_t> ranks(n);
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double own = (projected.row(ii) - ret_val.row(ii)).norm();
    err += own;
    std::size_t closer = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && (projected.row(ii) - ret_val.row(static_cast<Eigen::Index>(j))).norm() < own) ++closer;
    }
    ranks[i] = closer + 1;
  }
  CvpReport report;
  report.err_proj = err / static_cast<double>(n);
  for (std::size_t k : k_list) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
    report.recall.emplace_back(k, static_cast<double>(hits) / static_cast<double>(n));
  }
  return report;
}

}  // namespace jointgcg
