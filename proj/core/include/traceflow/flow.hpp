#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "traceflow/common.hpp"
#include "traceflow/dataset.hpp"
#include "traceflow/rng.hpp"

namespace traceflow {

enum class Capacity { Low, High };

const char* to_string(Capacity capacity);
Capacity capacity_from_string(const std::string& text);

/// Flat-tensor bookkeeping: every trainable tensor is a slice of one
/// contiguous parameter vector, which keeps the optimizer and the
/// finite-difference checks trivial.
struct TensorRef {
  std::size_t offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool weight = false;  // participates in decoupled weight decay
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

struct MlpShape {
  TensorRef w0, b0, w1, b1, w2, b2;
};

struct CouplingShape {
  std::vector<int> transformed;
  std::vector<int> passthrough;
  MlpShape scale;
  MlpShape translate;
  TensorRef scale_bound;  // learnable tanh bound per transformed dimension
};

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 5e-2;
  int max_epochs = 1000;
  int patience = 20;
  Capacity capacity = Capacity::Low;
  std::uint64_t seed = 0;
};

struct FitReport {
  int epochs_run = 0;
  int best_epoch = 0;
  double train_nll = 0.0;
  double test_nll = 0.0;
  std::size_t parameter_count = 0;
  double wall_seconds = 0.0;  // informational; never persisted
};

/// A conditional RealNVP: six coupling layers over a standard-normal latent.
/// Immutable once fitted; all operations are const and thread-safe.
struct FlowParams {
  int dim = 0;
  int cond_dim = 0;
  int hidden = 32;
  Capacity capacity = Capacity::Low;
  std::uint64_t seed = 0;
  std::vector<CouplingShape> couplings;
  std::vector<double> theta;

  std::size_t parameter_count() const { return theta.size(); }
};

inline constexpr int kCouplingCount = 6;

/// Allocates parameter storage for the given coupling masks (one
/// transformed-index list per coupling); theta is zero-filled. Used by
/// init_flow and by model loading, where persisted masks are authoritative.
FlowParams assemble_flow(int dim, int cond_dim, Capacity capacity,
                         std::uint64_t seed,
                         const std::vector<std::vector<int>>& masks);

/// Couplings start as identity maps: final layers zero-initialized, hidden
/// layers small and seeded. Masks alternate over the halves of a seeded
/// permutation, reshuffled per coupling pair, so every dimension is
/// transformed at least once.
FlowParams init_flow(int dim, int cond_dim, Capacity capacity,
                     std::uint64_t seed);

struct FlowForward {
  Eigen::MatrixXd z;
  Eigen::VectorXd log_det;
};

/// x: n x dim, condition: n x cond_dim. Rejects non-finite inputs.
FlowForward forward_f(const FlowParams& params, const Eigen::MatrixXd& x,
                      const Eigen::MatrixXd& condition);

Eigen::MatrixXd inverse_g(const FlowParams& params, const Eigen::MatrixXd& z,
                          const Eigen::MatrixXd& condition);

/// Log density in nats per row: log p_Z(f(x)) + log|det J|.
Eigen::VectorXd log_prob(const FlowParams& params, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& condition);

double log_prob_row(const FlowParams& params, const Eigen::VectorXd& x,
                    const Eigen::VectorXd& condition);

/// n latent draws pushed through g under one fixed condition row.
Eigen::MatrixXd sample(const FlowParams& params, int n,
                       const Eigen::VectorXd& condition, Rng& rng);

/// Mean negative log likelihood of a batch.
double nll_value(const FlowParams& params, const Eigen::MatrixXd& x,
                 const Eigen::MatrixXd& condition);

/// Mean NLL and its exact gradient with respect to every parameter.
std::pair<double, std::vector<double>> nll_and_gradient(
    const FlowParams& params, const Eigen::MatrixXd& x,
    const Eigen::MatrixXd& condition);

/// Analytic-vs-central-difference agreement over a random parameter subset
/// (step 1e-5). Returns the worst relative error; empty subsets pass
/// vacuously with 0.
double grad_check(const FlowParams& params, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& condition, Rng& rng,
                  std::size_t max_parameters = 200);

/// Full-batch Adam with decoupled weight decay and early stopping on the
/// evaluation split; returns the parameters of the best evaluation epoch.
std::pair<FlowParams, FitReport> fit(FlowParams params,
                                     const SplitDataset& split,
                                     const TrainConfig& config);

}  // namespace traceflow
