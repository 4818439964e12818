#include "sae/model.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "sae/errors.hpp"

namespace sae {

std::string_view to_string(Architecture arch) {
  return arch == Architecture::SaeTopK ? "sae_topk" : "vsae_topk";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "sae_topk") return Architecture::SaeTopK;
  if (name == "vsae_topk") return Architecture::VsaeTopK;
  throw ConfigError("unknown architecture '" + std::string(name) +
                    "' (expected sae_topk or vsae_topk)");
}

SaeParams SaeParams::zeros(std::size_t input_dim, std::size_t dict_size) {
  SaeParams p;
  p.w_enc() = Matrix(dict_size, input_dim);
  p.b_enc() = Matrix(1, dict_size);
  p.w_dec() = Matrix(input_dim, dict_size);
  p.b_dec() = Matrix(1, input_dim);
  return p;
}

void SaeParams::check_shapes() const {
  const std::size_t d = input_dim();
  const std::size_t m = dict_size();
  if (w_enc().rows() != m || w_enc().cols() != d || b_enc().rows() != 1 ||
      b_enc().cols() != m || b_dec().rows() != 1 || b_dec().cols() != d) {
    throw DimensionError("SaeParams: inconsistent tensor shapes for d=" + std::to_string(d) +
                         ", m=" + std::to_string(m));
  }
}

namespace {

void require_input(const Matrix& x, const SaeParams& params, const char* what) {
  params.check_shapes();
  if (x.cols() != params.input_dim()) {
    throw DimensionError(std::string(what) + ": input has " + std::to_string(x.cols()) +
                         " columns, model expects " + std::to_string(params.input_dim()));
  }
}

Matrix encoder_preactivation(const Matrix& input, const SaeParams& params) {
  Matrix pre = matmul(input, transpose(params.w_enc()));
  add_row_broadcast(pre, params.b_enc());
  return pre;
}

Matrix centered(const Matrix& x, const Matrix& b_dec) {
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t a = 0; a < r.size(); ++a) r[a] -= b_dec(0, a);
  }
  return out;
}

// Reconstruction from the selected entries only; w_dec_t is W_decᵀ (m x d).
Matrix decode_selected(const TopKResult& topk, const Matrix& w_dec_t, const Matrix& b_dec) {
  const std::size_t n = topk.codes.rows();
  const std::size_t d = w_dec_t.cols();
  Matrix xhat(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double* dst = xhat.data() + i * d;
    for (std::size_t j : topk.row_indices(i)) {
      const double c = topk.codes(i, j);
      const double* atom = w_dec_t.data() + j * d;
      for (std::size_t a = 0; a < d; ++a) dst[a] += c * atom[a];
    }
    for (std::size_t a = 0; a < d; ++a) dst[a] += b_dec(0, a);
  }
  return xhat;
}

double mean_squared_error_rows(const Matrix& x, const Matrix& xhat) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = x.values()[i] - xhat.values()[i];
    total += r * r;
  }
  return total / static_cast<double>(x.rows());
}

void check_trace(const ForwardTrace& trace, const SaeParams& params, const ModelConfig& cfg) {
  params.check_shapes();
  const std::size_t n = trace.x.rows();
  const std::size_t m = params.dict_size();
  const bool ok = trace.arch == cfg.arch && trace.x.cols() == params.input_dim() &&
                  trace.preact.rows() == n && trace.preact.cols() == m &&
                  trace.topk.codes.rows() == n && trace.topk.codes.cols() == m &&
                  trace.topk.k == cfg.k && trace.topk.indices.size() == n * cfg.k &&
                  trace.xhat.rows() == n && trace.xhat.cols() == params.input_dim() &&
                  (cfg.arch == Architecture::SaeTopK ||
                   (trace.mu.rows() == n && trace.mu.cols() == m));
  if (!ok) throw DimensionError("backward: trace does not match parameters/config");
}

}  // namespace

Matrix sae_encode(const Matrix& x, const SaeParams& params) {
  require_input(x, params, "sae_encode");
  Matrix f = encoder_preactivation(x, params);
  for (double& v : f.values()) v = v > 0.0 ? v : 0.0;
  return f;
}

Matrix vsae_encode_mean(const Matrix& x, const SaeParams& params) {
  require_input(x, params, "vsae_encode_mean");
  return encoder_preactivation(centered(x, params.b_dec()), params);
}

Matrix reparameterize(const Matrix& mu, const Matrix& eps) {
  require_same_shape(mu, eps, "reparameterize");
  Matrix z = mu;
  for (std::size_t i = 0; i < z.size(); ++i) z.values()[i] += eps.values()[i];
  return z;
}

TopKResult topk_select(const Matrix& v, std::size_t k) {
  const std::size_t m = v.cols();
  if (k < 1 || k > m) {
    throw ConfigError("topk_select: K=" + std::to_string(k) + " outside [1, " +
                      std::to_string(m) + "]");
  }
  TopKResult out{Matrix(v.rows(), m), k, std::vector<std::size_t>(v.rows() * k)};
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const auto row = v.row(i);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto before = [&row](std::size_t a, std::size_t b) {
      return row[a] > row[b] || (row[a] == row[b] && a < b);
    };
    if (k < m) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                                order.end(), before);
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t j = order[s];
      out.indices[i * k + s] = j;
      out.codes(i, j) = row[j];
    }
  }
  return out;
}

Matrix decode(const Matrix& codes, const SaeParams& params) {
  params.check_shapes();
  if (codes.cols() != params.dict_size()) {
    throw DimensionError("decode: codes have " + std::to_string(codes.cols()) +
                         " columns, dictionary has " + std::to_string(params.dict_size()));
  }
  Matrix xhat = matmul(codes, transpose(params.w_dec()));
  add_row_broadcast(xhat, params.b_dec());
  return xhat;
}

double kl_divergence(const Matrix& mu) {
  if (mu.rows() == 0) return 0.0;
  double total = 0.0;
  for (double v : mu.values()) total += v * v;
  return 0.5 * total / static_cast<double>(mu.rows());
}

ForwardResult forward(const Matrix& x, const SaeParams& params, const ModelConfig& cfg,
                      const Matrix* noise) {
  require_input(x, params, "forward");
  ForwardResult result;
  ForwardTrace& t = result.trace;
  t.arch = cfg.arch;
  t.x = x;
  if (cfg.arch == Architecture::SaeTopK) {
    t.preact = sae_encode(x, params);
  } else {
    t.mu = vsae_encode_mean(x, params);
    t.eps = noise != nullptr ? *noise : Matrix(t.mu.rows(), t.mu.cols());
    t.preact = reparameterize(t.mu, t.eps);
  }
  t.topk = topk_select(t.preact, cfg.k);
  t.xhat = decode_selected(t.topk, transpose(params.w_dec()), params.b_dec());

  LossBreakdown& loss = result.loss;
  loss.recon_mse = mean_squared_error_rows(x, t.xhat);
  if (cfg.arch == Architecture::SaeTopK) {
    double l1 = 0.0;
    for (double f : t.preact.values()) l1 += f;  // f >= 0 after ReLU
    loss.sparsity_l1 = l1 / static_cast<double>(x.rows());
    loss.total = loss.recon_mse + cfg.l1_coeff * loss.sparsity_l1;
  } else {
    loss.kl = kl_divergence(t.mu);
    loss.beta_effective = cfg.kl_coeff;
    loss.total = loss.recon_mse + cfg.kl_coeff * loss.kl;
  }
  return result;
}

ForwardResult forward_sampled(const Matrix& x, const SaeParams& params, const ModelConfig& cfg,
                              Rng& rng) {
  if (cfg.arch == Architecture::SaeTopK) return forward(x, params, cfg);
  const Matrix noise = gaussian_sample(rng, x.rows(), params.dict_size());
  return forward(x, params, cfg, &noise);
}

Matrix latent_gradient(const ForwardTrace& trace, const SaeParams& params,
                       const ModelConfig& cfg) {
  check_trace(trace, params, cfg);
  const std::size_t n = trace.x.rows();
  const std::size_t d = params.input_dim();
  const std::size_t m = params.dict_size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const Matrix w_dec_t = transpose(params.w_dec());

  Matrix grad(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = trace.x.row(i);
    const auto xhat = trace.xhat.row(i);
    for (std::size_t j : trace.topk.row_indices(i)) {
      const double* atom = w_dec_t.data() + j * d;
      double g = 0.0;
      for (std::size_t a = 0; a < d; ++a) g += 2.0 * inv_n * (xhat[a] - x[a]) * atom[a];
      grad(i, j) = g;
    }
  }

  if (cfg.arch == Architecture::SaeTopK) {
    // Through the L1 term and the ReLU; the subgradient at 0 is 0.
    for (std::size_t e = 0; e < grad.size(); ++e) {
      const double f = trace.preact.values()[e];
      grad.values()[e] = f > 0.0 ? grad.values()[e] + cfg.l1_coeff * inv_n : 0.0;
    }
  } else {
    // dz/dmu = I, plus the KL term.
    for (std::size_t e = 0; e < grad.size(); ++e)
      grad.values()[e] += cfg.kl_coeff * trace.mu.values()[e] / static_cast<double>(n);
  }
  return grad;
}

SaeGrads backward(const ForwardTrace& trace, const SaeParams& params, const ModelConfig& cfg) {
  const Matrix dlat = latent_gradient(trace, params, cfg);
  const std::size_t n = trace.x.rows();
  const std::size_t d = params.input_dim();
  const std::size_t m = params.dict_size();
  const double inv_n = 1.0 / static_cast<double>(n);

  SaeGrads grads = SaeParams::zeros(d, m);

  // Decoder side.
  Matrix dw_dec_t(m, d);
  Matrix& db_dec = grads.b_dec();
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = trace.x.row(i);
    const auto xhat = trace.xhat.row(i);
    for (std::size_t a = 0; a < d; ++a) {
      dxhat[a] = 2.0 * inv_n * (xhat[a] - x[a]);
      db_dec(0, a) += dxhat[a];
    }
    for (std::size_t j : trace.topk.row_indices(i)) {
      const double c = trace.codes()(i, j);
      if (c == 0.0) continue;
      double* dst = dw_dec_t.data() + j * d;
      for (std::size_t a = 0; a < d; ++a) dst[a] += c * dxhat[a];
    }
  }
  grads.w_dec() = transpose(dw_dec_t);

  // Encoder side. The vSAE encodes (x - b_dec), which couples b_dec in.
  const bool variational = cfg.arch == Architecture::VsaeTopK;
  const Matrix input = variational ? centered(trace.x, params.b_dec()) : trace.x;
  Matrix& dw_enc = grads.w_enc();
  Matrix& db_enc = grads.b_enc();
  for (std::size_t i = 0; i < n; ++i) {
    const auto in = input.row(i);
    const auto g = dlat.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      if (g[j] == 0.0) continue;
      db_enc(0, j) += g[j];
      double* dst = dw_enc.data() + j * d;
      for (std::size_t a = 0; a < d; ++a) dst[a] += g[j] * in[a];
    }
  }
  if (variational) {
    for (std::size_t j = 0; j < m; ++j) {
      const double s = db_enc(0, j);
      if (s == 0.0) continue;
      const auto w = params.w_enc().row(j);
      for (std::size_t a = 0; a < d; ++a) db_dec(0, a) -= s * w[a];
    }
  }
  return grads;
}

Matrix encode_codes(const Matrix& x, const SaeParams& params, const ModelConfig& cfg) {
  const Matrix pre = cfg.arch == Architecture::SaeTopK ? sae_encode(x, params)
                                                       : vsae_encode_mean(x, params);
  return topk_select(pre, cfg.k).codes;
}

}  // namespace sae
