#include "traceflow/flow.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace traceflow {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

using Eigen::MatrixXd;
using Eigen::VectorXd;
using MapMat = Eigen::Map<MatrixXd>;
using ConstMapMat = Eigen::Map<const MatrixXd>;

ConstMapMat view(const FlowParams& params, const TensorRef& ref) {
  return ConstMapMat(params.theta.data() + ref.offset, ref.rows, ref.cols);
}

MapMat view(FlowParams& params, const TensorRef& ref) {
  return MapMat(params.theta.data() + ref.offset, ref.rows, ref.cols);
}

MapMat grad_view(std::vector<double>& grad, const TensorRef& ref) {
  return MapMat(grad.data() + ref.offset, ref.rows, ref.cols);
}

inline double normal_cdf(double x) {
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2_v<double>));
}

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi_v<double>);
}

MatrixXd gelu_batch(const MatrixXd& x) {
  return x.unaryExpr([](double v) { return v * normal_cdf(v); });
}

MatrixXd gelu_grad_batch(const MatrixXd& x) {
  return x.unaryExpr(
      [](double v) { return normal_cdf(v) + v * normal_pdf(v); });
}

struct MlpCache {
  MatrixXd in, h0, a0, h1, a1;
};

MatrixXd mlp_forward(const FlowParams& params, const MlpShape& shape,
                     MatrixXd in, MlpCache* cache) {
  const auto w0 = view(params, shape.w0);
  const auto b0 = view(params, shape.b0);
  const auto w1 = view(params, shape.w1);
  const auto b1 = view(params, shape.b1);
  const auto w2 = view(params, shape.w2);
  const auto b2 = view(params, shape.b2);

  MatrixXd h0 = in * w0.transpose();
  h0.rowwise() += b0.col(0).transpose();
  MatrixXd a0 = gelu_batch(h0);
  MatrixXd h1 = a0 * w1.transpose();
  h1.rowwise() += b1.col(0).transpose();
  MatrixXd a1 = gelu_batch(h1);
  MatrixXd out = a1 * w2.transpose();
  out.rowwise() += b2.col(0).transpose();
  if (cache != nullptr) {
    cache->in = std::move(in);
    cache->h0 = std::move(h0);
    cache->a0 = std::move(a0);
    cache->h1 = std::move(h1);
    cache->a1 = std::move(a1);
  }
  return out;
}

MatrixXd mlp_backward(const FlowParams& params, const MlpShape& shape,
                      const MlpCache& cache, const MatrixXd& dout,
                      std::vector<double>& grad) {
  const auto w0 = view(params, shape.w0);
  const auto w1 = view(params, shape.w1);
  const auto w2 = view(params, shape.w2);

  grad_view(grad, shape.w2) += dout.transpose() * cache.a1;
  grad_view(grad, shape.b2).col(0) += dout.colwise().sum().transpose();
  MatrixXd dh1 = (dout * w2).cwiseProduct(gelu_grad_batch(cache.h1));
  grad_view(grad, shape.w1) += dh1.transpose() * cache.a0;
  grad_view(grad, shape.b1).col(0) += dh1.colwise().sum().transpose();
  MatrixXd dh0 = (dh1 * w1).cwiseProduct(gelu_grad_batch(cache.h0));
  grad_view(grad, shape.w0) += dh0.transpose() * cache.in;
  grad_view(grad, shape.b0).col(0) += dh0.colwise().sum().transpose();
  return dh0 * w0;
}

MatrixXd gather_columns(const MatrixXd& source, const std::vector<int>& cols) {
  MatrixXd out(source.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(i) = source.col(cols[i]);
  return out;
}

MatrixXd net_input(const MatrixXd& x, const std::vector<int>& passthrough,
                   const MatrixXd& condition) {
  MatrixXd in(x.rows(),
              static_cast<Eigen::Index>(passthrough.size()) + condition.cols());
  for (std::size_t i = 0; i < passthrough.size(); ++i) {
    in.col(i) = x.col(passthrough[i]);
  }
  in.rightCols(condition.cols()) = condition;
  return in;
}

struct CouplingCache {
  MatrixXd x_in;      // batch entering this coupling
  MatrixXd tanh_raw;  // tanh of the raw scale output
  MatrixXd s;         // bounded log-scales
  MatrixXd exp_s;
  MlpCache scale;
  MlpCache translate;
};

struct ForwardCache {
  std::vector<CouplingCache> couplings;
  MatrixXd z;
  VectorXd log_det;
};

void require_shapes(const FlowParams& params, const MatrixXd& x,
                    const MatrixXd& condition) {
  if (x.cols() != params.dim) {
    throw ValidationError("flow input has " + std::to_string(x.cols()) +
                          " dimensions, expected " + std::to_string(params.dim));
  }
  if (condition.cols() != params.cond_dim || condition.rows() != x.rows()) {
    throw ValidationError("condition batch has shape " +
                          std::to_string(condition.rows()) + "x" +
                          std::to_string(condition.cols()) + ", expected " +
                          std::to_string(x.rows()) + "x" +
                          std::to_string(params.cond_dim));
  }
  if (!x.allFinite() || !condition.allFinite()) {
    throw NumericError("non-finite values in flow input");
  }
}

ForwardCache run_forward(const FlowParams& params, const MatrixXd& x,
                         const MatrixXd& condition, bool keep_cache) {
  ForwardCache cache;
  cache.log_det = VectorXd::Zero(x.rows());
  if (keep_cache) cache.couplings.resize(params.couplings.size());
  MatrixXd current = x;
  for (std::size_t k = 0; k < params.couplings.size(); ++k) {
    const auto& coupling = params.couplings[k];
    CouplingCache local;
    CouplingCache* slot = keep_cache ? &cache.couplings[k] : &local;

    MatrixXd in = net_input(current, coupling.passthrough, condition);
    MatrixXd raw = mlp_forward(params, coupling.scale, in,
                               keep_cache ? &slot->scale : nullptr);
    MatrixXd translate = mlp_forward(params, coupling.translate, std::move(in),
                                     keep_cache ? &slot->translate : nullptr);
    const auto bound = view(params, coupling.scale_bound);
    MatrixXd tanh_raw = raw.array().tanh().matrix();
    MatrixXd s = tanh_raw.array().rowwise() *
                 bound.col(0).transpose().array();
    MatrixXd exp_s = s.array().exp().matrix();

    if (keep_cache) slot->x_in = current;
    for (std::size_t i = 0; i < coupling.transformed.size(); ++i) {
      const int dim = coupling.transformed[i];
      current.col(dim) =
          current.col(dim).cwiseProduct(exp_s.col(i)) + translate.col(i);
    }
    cache.log_det += s.rowwise().sum();
    if (keep_cache) {
      slot->tanh_raw = std::move(tanh_raw);
      slot->s = std::move(s);
      slot->exp_s = std::move(exp_s);
    }
  }
  cache.z = std::move(current);
  return cache;
}

}  // namespace

const char* to_string(Capacity capacity) {
  return capacity == Capacity::Low ? "low" : "high";
}

Capacity capacity_from_string(const std::string& text) {
  if (text == "low") return Capacity::Low;
  if (text == "high") return Capacity::High;
  throw ParseError("unknown capacity: " + text);
}

FlowParams init_flow(int dim, int cond_dim, Capacity capacity,
                     std::uint64_t seed) {
  if (dim < 1) {
    throw ValidationError("flow requires at least one data dimension");
  }
  FlowParams params;
  params.dim = dim;
  params.cond_dim = cond_dim;
  params.capacity = capacity;
  params.hidden = capacity == Capacity::Low ? 32 : 128;
  params.seed = seed;

  std::size_t offset = 0;
  auto tensor = [&offset](Eigen::Index rows, Eigen::Index cols, bool weight) {
    TensorRef ref{offset, rows, cols, weight};
    offset += ref.size();
    return ref;
  };
  auto mlp = [&](Eigen::Index in, Eigen::Index out, Eigen::Index hidden) {
    MlpShape shape;
    shape.w0 = tensor(hidden, in, true);
    shape.b0 = tensor(hidden, 1, false);
    shape.w1 = tensor(hidden, hidden, true);
    shape.b1 = tensor(hidden, 1, false);
    shape.w2 = tensor(out, hidden, true);
    shape.b2 = tensor(out, 1, false);
    return shape;
  };

  Rng rng = Rng::keyed(seed, 0x666c6f77);  // init stream
  std::vector<int> order(dim);

  for (int pair = 0; pair < kCouplingCount / 2; ++pair) {
    for (int i = 0; i < dim; ++i) order[i] = i;
    rng.shuffle(order);
    const int half = (dim + 1) / 2;
    std::vector<int> first(order.begin(), order.begin() + half);
    std::vector<int> second(order.begin() + half, order.end());
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    // dim == 1 has no usable complement; both couplings transform the
    // single dimension so the stack stays expressive under conditions.
    if (second.empty()) second = first;

    for (int side = 0; side < 2; ++side) {
      CouplingShape coupling;
      coupling.transformed = side == 0 ? first : second;
      for (int i = 0; i < dim; ++i) {
        const auto& t = coupling.transformed;
        if (!std::binary_search(t.begin(), t.end(), i)) {
          coupling.passthrough.push_back(i);
        }
      }
      const auto in = static_cast<Eigen::Index>(coupling.passthrough.size()) +
                      cond_dim;
      const auto out = static_cast<Eigen::Index>(coupling.transformed.size());
      coupling.scale = mlp(in, out, params.hidden);
      coupling.translate = mlp(in, out, params.hidden);
      coupling.scale_bound = tensor(out, 1, false);
      params.couplings.push_back(std::move(coupling));
    }
  }

  params.theta.assign(offset, 0.0);
  auto fill_uniform = [&](const TensorRef& ref, double scale) {
    auto mat = view(params, ref);
    for (Eigen::Index c = 0; c < ref.cols; ++c) {
      for (Eigen::Index r = 0; r < ref.rows; ++r) {
        mat(r, c) = scale * (2.0 * rng.uniform() - 1.0);
      }
    }
  };
  for (auto& coupling : params.couplings) {
    for (const MlpShape* shape : {&coupling.scale, &coupling.translate}) {
      const double a0 =
          shape->w0.cols > 0 ? 1.0 / std::sqrt(double(shape->w0.cols)) : 0.0;
      fill_uniform(shape->w0, a0);
      fill_uniform(shape->w1, 1.0 / std::sqrt(double(shape->w1.cols)));
      // Final layers stay zero: each coupling starts as the identity map.
    }
    view(params, coupling.scale_bound).setConstant(2.0);
  }
  return params;
}

FlowForward forward_f(const FlowParams& params, const MatrixXd& x,
                      const MatrixXd& condition) {
  require_shapes(params, x, condition);
  ForwardCache cache = run_forward(params, x, condition, false);
  return {std::move(cache.z), std::move(cache.log_det)};
}

MatrixXd inverse_g(const FlowParams& params, const MatrixXd& z,
                   const MatrixXd& condition) {
  require_shapes(params, z, condition);
  MatrixXd current = z;
  for (std::size_t k = params.couplings.size(); k > 0; --k) {
    const auto& coupling = params.couplings[k - 1];
    MatrixXd in = net_input(current, coupling.passthrough, condition);
    MatrixXd raw = mlp_forward(params, coupling.scale, in, nullptr);
    MatrixXd translate =
        mlp_forward(params, coupling.translate, std::move(in), nullptr);
    const auto bound = view(params, coupling.scale_bound);
    MatrixXd s = raw.array().tanh().rowwise() *
                 bound.col(0).transpose().array();
    MatrixXd exp_neg_s = (-s).array().exp().matrix();
    for (std::size_t i = 0; i < coupling.transformed.size(); ++i) {
      const int dim = coupling.transformed[i];
      current.col(dim) =
          (current.col(dim) - translate.col(i)).cwiseProduct(exp_neg_s.col(i));
    }
  }
  return current;
}

VectorXd log_prob(const FlowParams& params, const MatrixXd& x,
                  const MatrixXd& condition) {
  FlowForward forward = forward_f(params, x, condition);
  VectorXd result =
      -0.5 * forward.z.array().square().rowwise().sum().matrix();
  result.array() -= 0.5 * kLogTwoPi * params.dim;
  result += forward.log_det;
  return result;
}

double log_prob_row(const FlowParams& params, const VectorXd& x,
                    const VectorXd& condition) {
  return log_prob(params, x.transpose(), condition.transpose())(0);
}

MatrixXd sample(const FlowParams& params, int n, const VectorXd& condition,
                Rng& rng) {
  if (condition.size() != params.cond_dim) {
    throw ValidationError("condition vector has wrong dimension");
  }
  MatrixXd z(n, params.dim);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < params.dim; ++c) z(r, c) = rng.normal();
  }
  MatrixXd cond(n, params.cond_dim);
  for (int r = 0; r < n; ++r) cond.row(r) = condition.transpose();
  if (n == 0) return MatrixXd(0, params.dim);
  return inverse_g(params, z, cond);
}

double nll_value(const FlowParams& params, const MatrixXd& x,
                 const MatrixXd& condition) {
  return -log_prob(params, x, condition).mean();
}

std::pair<double, std::vector<double>> nll_and_gradient(
    const FlowParams& params, const MatrixXd& x, const MatrixXd& condition) {
  require_shapes(params, x, condition);
  const auto n = static_cast<double>(x.rows());
  ForwardCache cache = run_forward(params, x, condition, true);

  const double loss = (0.5 * cache.z.array().square().sum() / n) +
                      0.5 * kLogTwoPi * params.dim - cache.log_det.mean();

  std::vector<double> grad(params.theta.size(), 0.0);
  MatrixXd g = cache.z / n;
  for (std::size_t k = params.couplings.size(); k > 0; --k) {
    const auto& coupling = params.couplings[k - 1];
    const auto& local = cache.couplings[k - 1];
    const auto bound = view(params, coupling.scale_bound);

    MatrixXd g_t = gather_columns(g, coupling.transformed);
    MatrixXd x_t = gather_columns(local.x_in, coupling.transformed);

    // dL/ds has two sources: the transformed output and -log|det J|.
    MatrixXd dl_ds = g_t.cwiseProduct(x_t).cwiseProduct(local.exp_s);
    dl_ds.array() -= 1.0 / n;
    MatrixXd dl_dt = g_t;
    MatrixXd dx_t = g_t.cwiseProduct(local.exp_s);

    MatrixXd draw = (dl_ds.cwiseProduct(
                         (1.0 - local.tanh_raw.array().square()).matrix()))
                        .array()
                        .rowwise() *
                    bound.col(0).transpose().array();
    grad_view(grad, coupling.scale_bound).col(0) +=
        dl_ds.cwiseProduct(local.tanh_raw).colwise().sum().transpose();

    MatrixXd din_scale =
        mlp_backward(params, coupling.scale, local.scale, draw, grad);
    MatrixXd din_translate =
        mlp_backward(params, coupling.translate, local.translate, dl_dt, grad);

    MatrixXd g_prev(g.rows(), g.cols());
    for (std::size_t i = 0; i < coupling.transformed.size(); ++i) {
      g_prev.col(coupling.transformed[i]) = dx_t.col(i);
    }
    for (std::size_t i = 0; i < coupling.passthrough.size(); ++i) {
      g_prev.col(coupling.passthrough[i]) = g.col(coupling.passthrough[i]) +
                                            din_scale.col(i) +
                                            din_translate.col(i);
    }
    g = std::move(g_prev);
  }
  return {loss, std::move(grad)};
}

double grad_check(const FlowParams& params, const MatrixXd& x,
                  const MatrixXd& condition, Rng& rng,
                  std::size_t max_parameters) {
  if (params.theta.empty() || max_parameters == 0) return 0.0;
  auto [value, analytic] = nll_and_gradient(params, x, condition);
  (void)value;

  const auto indices =
      rng.sample_indices(params.theta.size(),
                         std::min(max_parameters, params.theta.size()));
  FlowParams probe = params;
  const double step = 1e-5;
  double worst = 0.0;
  for (std::size_t index : indices) {
    const double saved = probe.theta[index];
    probe.theta[index] = saved + step;
    const double up = nll_value(probe, x, condition);
    probe.theta[index] = saved - step;
    const double down = nll_value(probe, x, condition);
    probe.theta[index] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom =
        std::max({std::abs(numeric), std::abs(analytic[index]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[index]) / denom);
  }
  return worst;
}

std::pair<FlowParams, FitReport> fit(FlowParams params,
                                     const SplitDataset& split,
                                     const TrainConfig& config) {
  const MatrixXd& train = split.train;
  const MatrixXd& train_cond = split.train_condition;
  const bool has_test = split.test.rows() > 0;
  const MatrixXd& eval_x = has_test ? split.test : split.train;
  const MatrixXd& eval_cond = has_test ? split.test_condition : split.train_condition;
  if (train.rows() == 0) throw ValidationError("empty training split");

  const auto start = std::chrono::steady_clock::now();

  std::vector<double> m(params.theta.size(), 0.0);
  std::vector<double> v(params.theta.size(), 0.0);
  std::vector<std::uint8_t> decayed(params.theta.size(), 0);
  for (const auto& coupling : params.couplings) {
    for (const MlpShape* shape : {&coupling.scale, &coupling.translate}) {
      for (const TensorRef* ref : {&shape->w0, &shape->w1, &shape->w2}) {
        for (std::size_t i = 0; i < ref->size(); ++i) {
          decayed[ref->offset + i] = 1;
        }
      }
    }
  }

  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;

  FitReport report;
  report.parameter_count = params.parameter_count();

  std::vector<double> best_theta = params.theta;
  double best_eval = nll_value(params, eval_x, eval_cond);
  double best_train = nll_value(params, train, train_cond);
  report.best_epoch = 0;
  int since_best = 0;

  int epoch = 0;
  for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
    auto [loss, grad] = nll_and_gradient(params, train, train_cond);
    if (!std::isfinite(loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch));
    }
    const double bc1 = 1.0 - std::pow(beta1, epoch);
    const double bc2 = 1.0 - std::pow(beta2, epoch);
    for (std::size_t i = 0; i < params.theta.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double update =
          (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      params.theta[i] -= config.learning_rate * update;
      if (decayed[i] != 0) {
        params.theta[i] -=
            config.learning_rate * config.weight_decay * params.theta[i];
      }
    }

    const double eval = nll_value(params, eval_x, eval_cond);
    if (!std::isfinite(eval)) {
      throw NumericError("evaluation diverged at epoch " + std::to_string(epoch));
    }
    if (eval < best_eval) {
      best_eval = eval;
      best_theta = params.theta;
      best_train = nll_value(params, train, train_cond);
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best > config.patience) {
      break;
    }
  }

  params.theta = std::move(best_theta);
  report.epochs_run = std::min(epoch, config.max_epochs);
  report.train_nll = best_train;
  report.test_nll = best_eval;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return {std::move(params), report};
}

}  // namespace traceflow
