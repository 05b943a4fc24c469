#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "traceflow/dataset.hpp"
#include "traceflow/flow.hpp"
#include "traceflow/structure.hpp"

namespace traceflow {

enum class NodeState { Empty, Fitted, Ineligible };

const char* to_string(NodeState state);

struct NetworkNode {
  ModelSpec spec;
  NodeState state = NodeState::Empty;
  std::string status_note;  // ineligibility or failure reason
  std::optional<DatasetEncodings> encodings;
  std::optional<FlowParams> flow;
  std::optional<FitReport> fit_report;
  std::size_t data_points = 0;
  /// Sorted log-likelihoods of the training rows under the fitted flow;
  /// anomaly checks read quantiles off this.
  std::vector<double> train_scores;
  /// Observed caller frequencies in the training rows.
  std::vector<std::pair<Symbol, std::size_t>> caller_histogram;

  bool fitted() const { return state == NodeState::Fitted; }
};

/// The fitted model network: one node per universe executable, linked by
/// dataflow edges. Immutable after fitting; concurrent readers share it.
struct ModelNetwork {
  std::map<Symbol, NetworkNode> nodes;
  std::vector<DataflowLink> links;
  std::string topology_digest;

  const NetworkNode& node(Symbol symbol) const;
  const NetworkNode& fitted_node(Symbol symbol) const;
  std::optional<Symbol> node_by_name(const std::string& name) const;
  std::vector<const DataflowLink*> links_between(Symbol from, Symbol to) const;
};

ModelNetwork build_network(const std::vector<ModelSpec>& specs,
                           const std::vector<DataflowLink>& links,
                           std::string topology_digest = "");

struct NetworkFitConfig {
  TrainConfig train;
  EncodeConfig encode;
  int workers = 0;  // 0: one thread per available core
};

/// Fits every node that has an eligible dataset. Per-node failures are
/// recorded on the node and do not stop the run.
void fit_network(ModelNetwork& network,
                 const std::map<Symbol, BehaviorDataset>& datasets,
                 const NetworkFitConfig& config, Diagnostics* diags = nullptr);

struct ColumnConstraint {
  enum class Kind { Equals, Interval, OneOf };
  Kind kind = Kind::Equals;
  Scalar equals = 0.0;
  double low = 0.0;
  double high = 0.0;
  std::set<std::string> one_of;

  static ColumnConstraint eq(Scalar value);
  static ColumnConstraint interval(double low, double high);
  static ColumnConstraint any_of(std::set<std::string> values);
};

struct Condition {
  std::map<std::string, ColumnConstraint> assignments;
  std::optional<Symbol> caller_equals;

  bool empty() const { return assignments.empty() && !caller_equals; }
};

struct RawRow {
  std::map<std::string, Scalar> values;
  std::optional<Symbol> caller;
};

struct NodeSamples {
  Symbol node = 0;
  std::vector<std::map<std::string, Scalar>> rows;
  std::vector<Symbol> callers;
};

/// Draws n raw-valued rows. Static conditioning fixes the encoded caller
/// input; otherwise callers are drawn from the training histogram.
NodeSamples sample_node(const ModelNetwork& network, Symbol node,
                        const std::optional<Condition>& condition, int n,
                        std::uint64_t seed, Diagnostics* diags = nullptr);

/// Log likelihood (nats) per raw row; rows without a caller use the node's
/// modal training caller.
Eigen::VectorXd node_log_likelihood(const ModelNetwork& network, Symbol node,
                                    const std::vector<RawRow>& rows);

struct DynamicConditionConfig {
  int proposal_factor = 20;      // proposals per requested sample
  double min_acceptance = 1e-4;  // below this the condition is too tight
  double equality_band_stddevs = 0.5;
};

/// Restricts the node's joint to the constraint via self-normalized
/// importance resampling over flow proposals.
NodeSamples condition_dynamic(const ModelNetwork& network, Symbol node,
                              const Condition& condition, int n,
                              std::uint64_t seed,
                              const DynamicConditionConfig& config = {},
                              Diagnostics* diags = nullptr);

/// One dataflow hop: conditions `to` on the propagated sample (continuous
/// columns by their [q05, q95] interval, discrete columns by the observed
/// category set) and samples it.
NodeSamples hop_forward(const ModelNetwork& network, const NodeSamples& from,
                        Symbol to, int n, std::uint64_t seed,
                        const DynamicConditionConfig& config = {});

/// Conditioned sampling propagated along a path of linked, fitted nodes.
std::vector<NodeSamples> propagate_forward(const ModelNetwork& network,
                                           const std::vector<Symbol>& path,
                                           const Condition& root_condition,
                                           int n, std::uint64_t seed,
                                           const DynamicConditionConfig& config = {});

/// One hop against the dataflow direction: upstream proposals are weighted
/// by the downstream likelihood of the observation merged with the
/// proposal's linked values, then resampled (best-supported rows first).
NodeSamples hop_backward(const ModelNetwork& network,
                         const NodeSamples& observation, Symbol upstream,
                         int n, std::uint64_t seed,
                         const DynamicConditionConfig& config = {});

/// Most likely upstream causes for an observation at `node`.
NodeSamples reason_backward(const ModelNetwork& network, Symbol node,
                            const std::vector<RawRow>& observation, int n,
                            std::uint64_t seed,
                            const DynamicConditionConfig& config = {});

void save_network(const ModelNetwork& network, const std::string& dir);

/// Loads a persisted network. When expected_topology_digest is given and
/// differs from the stored one the load is refused unless force is set.
ModelNetwork load_network(const std::string& dir,
                          const std::optional<std::string>&
                              expected_topology_digest = std::nullopt,
                          bool force = false);

}  // namespace traceflow
