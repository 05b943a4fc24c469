#include "traceflow/network.hpp"

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "traceflow/stats.hpp"

namespace traceflow {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(NodeState state) {
  switch (state) {
    case NodeState::Empty: return "empty";
    case NodeState::Fitted: return "fitted";
    case NodeState::Ineligible: return "ineligible";
  }
  return "?";
}

const NetworkNode& ModelNetwork::node(Symbol symbol) const {
  auto it = nodes.find(symbol);
  if (it == nodes.end()) {
    throw ValidationError("unknown node symbol " + std::to_string(symbol));
  }
  return it->second;
}

const NetworkNode& ModelNetwork::fitted_node(Symbol symbol) const {
  const NetworkNode& entry = node(symbol);
  if (!entry.fitted()) {
    throw ValidationError("node " + entry.spec.node_name + " is " +
                          to_string(entry.state) +
                          " and cannot answer inference queries");
  }
  return entry;
}

std::optional<Symbol> ModelNetwork::node_by_name(const std::string& name) const {
  for (const auto& [symbol, entry] : nodes) {
    if (entry.spec.node_name == name) return symbol;
  }
  return std::nullopt;
}

std::vector<const DataflowLink*> ModelNetwork::links_between(Symbol from,
                                                             Symbol to) const {
  std::vector<const DataflowLink*> result;
  for (const auto& link : links) {
    if (link.from_node == from && link.to_node == to) result.push_back(&link);
  }
  return result;
}

ModelNetwork build_network(const std::vector<ModelSpec>& specs,
                           const std::vector<DataflowLink>& links,
                           std::string topology_digest) {
  ModelNetwork network;
  network.topology_digest = std::move(topology_digest);
  for (const auto& spec : specs) {
    NetworkNode node;
    node.spec = spec;
    node.state = NodeState::Empty;
    if (!network.nodes.emplace(spec.node, std::move(node)).second) {
      throw ValidationError("duplicate node symbol " +
                            std::to_string(spec.node));
    }
  }
  for (const auto& link : links) {
    auto check = [&](Symbol symbol, const std::string& column) {
      auto it = network.nodes.find(symbol);
      if (it == network.nodes.end()) {
        throw ValidationError("dataflow link references node " +
                              std::to_string(symbol) +
                              " outside the network");
      }
      if (it->second.spec.find_column(column) == nullptr) {
        throw ValidationError("dataflow link names missing column '" + column +
                              "' on node " + it->second.spec.node_name);
      }
    };
    check(link.from_node, link.from_column);
    check(link.to_node, link.to_column);
    network.links.push_back(link);
  }
  return network;
}

void fit_network(ModelNetwork& network,
                 const std::map<Symbol, BehaviorDataset>& datasets,
                 const NetworkFitConfig& config, Diagnostics* diags) {
  std::vector<Symbol> pending;
  for (auto& [symbol, node] : network.nodes) {
    if (node.spec.empty) {
      node.state = NodeState::Empty;
      node.status_note = "no data columns";
      continue;
    }
    auto it = datasets.find(symbol);
    if (it == datasets.end()) {
      node.state = NodeState::Ineligible;
      node.status_note = "no behavior dataset";
      continue;
    }
    if (!it->second.eligible) {
      node.state = NodeState::Ineligible;
      node.status_note = it->second.ineligible_reason;
      continue;
    }
    pending.push_back(symbol);
  }

  std::mutex diag_mutex;
  std::atomic<std::size_t> cursor{0};
  auto fit_one = [&](Symbol symbol) {
    NetworkNode& node = network.nodes.at(symbol);
    const BehaviorDataset& dataset = datasets.at(symbol);
    Diagnostics local;
    try {
      DatasetEncodings encodings = infer_encodings(dataset, config.encode, &local);
      if (encodings.encoded_dim == 0) {
        node.state = NodeState::Ineligible;
        node.status_note = "all columns dropped during encoding";
        return;
      }
      SplitDataset split = encode(dataset, encodings);
      TrainConfig train = config.train;
      train.seed = config.train.seed ^
                   (static_cast<std::uint64_t>(symbol) * 0x9e3779b97f4a7c15ull);
      FlowParams flow = init_flow(encodings.encoded_dim,
                                  encodings.condition_dim, train.capacity,
                                  train.seed);
      auto [fitted, report] = fit(std::move(flow), split, train);

      Eigen::VectorXd scores =
          log_prob(fitted, split.train, split.train_condition);
      node.train_scores.assign(scores.data(), scores.data() + scores.size());
      std::sort(node.train_scores.begin(), node.train_scores.end());

      std::map<Symbol, std::size_t> histogram;
      for (std::size_t index : dataset.train_indices) {
        histogram[dataset.condition_values[index]] += 1;
      }
      node.caller_histogram.assign(histogram.begin(), histogram.end());

      node.encodings = std::move(encodings);
      node.flow = std::move(fitted);
      node.fit_report = report;
      node.data_points = dataset.row_count();
      node.state = NodeState::Fitted;
    } catch (const std::exception& err) {
      node.state = NodeState::Ineligible;
      node.status_note = std::string("fit failed: ") + err.what();
    }
    if (!local.empty() && diags != nullptr) {
      std::lock_guard<std::mutex> hold(diag_mutex);
      for (const auto& message : local.warnings()) diags->warn(message);
    }
  };

  int workers = config.workers > 0
                    ? config.workers
                    : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min<int>(workers, static_cast<int>(pending.size())));
  if (workers <= 1) {
    for (Symbol symbol : pending) fit_one(symbol);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (;;) {
          const std::size_t index = cursor.fetch_add(1);
          if (index >= pending.size()) return;
          fit_one(pending[index]);
        }
      });
    }
    for (auto& thread : threads) thread.join();
  }
}

ColumnConstraint ColumnConstraint::eq(Scalar value) {
  ColumnConstraint constraint;
  constraint.kind = Kind::Equals;
  constraint.equals = std::move(value);
  return constraint;
}

ColumnConstraint ColumnConstraint::interval(double low, double high) {
  if (!(low <= high)) throw ValidationError("empty interval constraint");
  ColumnConstraint constraint;
  constraint.kind = Kind::Interval;
  constraint.low = low;
  constraint.high = high;
  return constraint;
}

ColumnConstraint ColumnConstraint::any_of(std::set<std::string> values) {
  if (values.empty()) throw ValidationError("empty category constraint");
  ColumnConstraint constraint;
  constraint.kind = Kind::OneOf;
  constraint.one_of = std::move(values);
  return constraint;
}

namespace {

void validate_condition(const NetworkNode& node, const Condition& condition) {
  for (const auto& [column, constraint] : condition.assignments) {
    (void)constraint;
    if (node.spec.find_column(column) == nullptr) {
      throw ValidationError("condition references unknown column '" + column +
                            "' on node " + node.spec.node_name);
    }
  }
}

Symbol modal_caller(const NetworkNode& node) {
  Symbol best = 0;
  std::size_t count = 0;
  for (const auto& [symbol, n] : node.caller_histogram) {
    if (n > count) {
      best = symbol;
      count = n;
    }
  }
  return best;
}

struct EncodedBatch {
  Eigen::MatrixXd x;
  Eigen::MatrixXd condition;
  std::vector<Symbol> callers;
};

/// Latent draws pushed through the flow under per-row caller conditions.
EncodedBatch draw_encoded(const NetworkNode& node, int n,
                          const std::optional<Symbol>& caller_equals,
                          Rng& rng, Diagnostics* diags) {
  const FlowParams& flow = *node.flow;
  const DatasetEncodings& encodings = *node.encodings;
  EncodedBatch batch;
  batch.x.resize(n, flow.dim);
  batch.condition.resize(n, flow.cond_dim);
  batch.callers.resize(n);

  std::vector<Symbol> caller_pool;
  std::vector<double> caller_weights;
  for (const auto& [symbol, count] : node.caller_histogram) {
    caller_pool.push_back(symbol);
    caller_weights.push_back(static_cast<double>(count));
  }
  double total_weight = 0.0;
  for (double w : caller_weights) total_weight += w;

  Eigen::VectorXd fixed_condition;
  if (caller_equals) {
    fixed_condition = encode_condition(*caller_equals, encodings, diags);
  }

  Eigen::MatrixXd z(n, flow.dim);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < flow.dim; ++c) z(r, c) = rng.normal();
    if (caller_equals) {
      batch.callers[r] = *caller_equals;
      batch.condition.row(r) = fixed_condition.transpose();
    } else {
      Symbol caller = caller_pool.empty() ? 0 : caller_pool.front();
      if (caller_pool.size() > 1) {
        double pick = rng.uniform() * total_weight;
        for (std::size_t i = 0; i < caller_pool.size(); ++i) {
          pick -= caller_weights[i];
          if (pick <= 0.0) {
            caller = caller_pool[i];
            break;
          }
        }
      }
      batch.callers[r] = caller;
      batch.condition.row(r) = encode_condition(caller, encodings).transpose();
    }
  }
  if (n > 0) batch.x = inverse_g(flow, z, batch.condition);
  return batch;
}

NodeSamples decode_batch(const NetworkNode& node, const EncodedBatch& batch,
                         const std::vector<std::size_t>& picks) {
  NodeSamples samples;
  samples.node = node.spec.node;
  samples.rows.reserve(picks.size());
  samples.callers.reserve(picks.size());
  for (std::size_t index : picks) {
    DecodedRow decoded =
        decode_row(batch.x.row(static_cast<Eigen::Index>(index)).transpose(),
                   *node.encodings);
    samples.rows.push_back(std::move(decoded.values));
    samples.callers.push_back(batch.callers[index]);
  }
  return samples;
}

const ColumnEncoding& encoding_for(const NetworkNode& node,
                                   const std::string& column) {
  for (const auto& encoding : node.encodings->columns) {
    if (encoding.column_id == column) return encoding;
  }
  throw ValidationError("column '" + column + "' has no encoding on node " +
                        node.spec.node_name);
}

bool satisfies(const std::map<std::string, Scalar>& row,
               const Condition& condition, const NetworkNode& node,
               const DynamicConditionConfig& config) {
  for (const auto& [column, constraint] : condition.assignments) {
    auto it = row.find(column);
    if (it == row.end()) return false;
    const Scalar& value = it->second;
    switch (constraint.kind) {
      case ColumnConstraint::Kind::Equals: {
        if (scalar_is_number(constraint.equals)) {
          const ColumnEncoding& encoding = encoding_for(node, column);
          if (encoding.mode == EncodingMode::ContinuousStandardized) {
            const double band = config.equality_band_stddevs * encoding.stddev;
            if (std::abs(scalar_number(value) -
                         scalar_number(constraint.equals)) > band) {
              return false;
            }
          } else if (scalar_to_string(value) !=
                     scalar_to_string(constraint.equals)) {
            return false;
          }
        } else if (scalar_to_string(value) !=
                   scalar_to_string(constraint.equals)) {
          return false;
        }
        break;
      }
      case ColumnConstraint::Kind::Interval: {
        if (!scalar_is_number(value)) return false;
        const double v = scalar_number(value);
        if (v < constraint.low || v > constraint.high) return false;
        break;
      }
      case ColumnConstraint::Kind::OneOf: {
        if (constraint.one_of.count(scalar_to_string(value)) == 0) return false;
        break;
      }
    }
  }
  return true;
}

}  // namespace

NodeSamples sample_node(const ModelNetwork& network, Symbol node_symbol,
                        const std::optional<Condition>& condition, int n,
                        std::uint64_t seed, Diagnostics* diags) {
  const NetworkNode& node = network.fitted_node(node_symbol);
  if (condition && !condition->assignments.empty()) {
    throw ValidationError(
        "sample_node only applies static (caller) conditioning; use dynamic "
        "conditioning for value constraints");
  }
  Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(node_symbol));
  EncodedBatch batch = draw_encoded(
      node, n, condition ? condition->caller_equals : std::nullopt, rng, diags);
  std::vector<std::size_t> all(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return decode_batch(node, batch, all);
}

Eigen::VectorXd node_log_likelihood(const ModelNetwork& network,
                                    Symbol node_symbol,
                                    const std::vector<RawRow>& rows) {
  const NetworkNode& node = network.fitted_node(node_symbol);
  const DatasetEncodings& encodings = *node.encodings;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()),
                    encodings.encoded_dim);
  Eigen::MatrixXd condition(static_cast<Eigen::Index>(rows.size()),
                            encodings.condition_dim);
  const Symbol fallback = modal_caller(node);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x.row(static_cast<Eigen::Index>(r)) =
        encode_row(rows[r].values, encodings).transpose();
    condition.row(static_cast<Eigen::Index>(r)) =
        encode_condition(rows[r].caller.value_or(fallback), encodings)
            .transpose();
  }
  return log_prob(*node.flow, x, condition);
}

NodeSamples condition_dynamic(const ModelNetwork& network, Symbol node_symbol,
                              const Condition& condition, int n,
                              std::uint64_t seed,
                              const DynamicConditionConfig& config,
                              Diagnostics* diags) {
  const NetworkNode& node = network.fitted_node(node_symbol);
  validate_condition(node, condition);
  if (condition.assignments.empty()) {
    return sample_node(network, node_symbol,
                       Condition{{}, condition.caller_equals}, n, seed, diags);
  }

  Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(node_symbol) ^ 0xd1);
  const int proposals = std::max(n * config.proposal_factor, 1000);
  EncodedBatch batch =
      draw_encoded(node, proposals, condition.caller_equals, rng, diags);

  // Equality constraints on continuous columns reweight accepted proposals
  // by the likelihood of the row projected onto the exact value.
  std::vector<std::pair<int, double>> projections;  // encoded dim -> value
  int offset = 0;
  for (const auto& encoding : node.encodings->columns) {
    auto it = condition.assignments.find(encoding.column_id);
    if (it != condition.assignments.end() &&
        it->second.kind == ColumnConstraint::Kind::Equals &&
        encoding.mode == EncodingMode::ContinuousStandardized &&
        scalar_is_number(it->second.equals)) {
      const double encoded =
          (scalar_number(it->second.equals) - encoding.mean) / encoding.stddev;
      projections.emplace_back(offset, encoded);
    }
    offset += encoding.width();
  }

  std::vector<std::size_t> accepted;
  std::vector<std::map<std::string, Scalar>> decoded_rows(proposals);
  for (int r = 0; r < proposals; ++r) {
    DecodedRow decoded = decode_row(batch.x.row(r).transpose(), *node.encodings);
    decoded_rows[r] = std::move(decoded.values);
    if (satisfies(decoded_rows[r], condition, node, config)) {
      accepted.push_back(static_cast<std::size_t>(r));
    }
  }

  const double acceptance =
      static_cast<double>(accepted.size()) / static_cast<double>(proposals);
  if (acceptance < config.min_acceptance) {
    throw NumericError("condition too tight on node " + node.spec.node_name +
                       " (acceptance " + std::to_string(acceptance) +
                       "); widen the intervals");
  }

  std::vector<double> weights(accepted.size(), 1.0);
  if (!projections.empty()) {
    Eigen::MatrixXd original(static_cast<Eigen::Index>(accepted.size()),
                             batch.x.cols());
    Eigen::MatrixXd cond(static_cast<Eigen::Index>(accepted.size()),
                         batch.condition.cols());
    for (std::size_t i = 0; i < accepted.size(); ++i) {
      original.row(static_cast<Eigen::Index>(i)) =
          batch.x.row(static_cast<Eigen::Index>(accepted[i]));
      cond.row(static_cast<Eigen::Index>(i)) =
          batch.condition.row(static_cast<Eigen::Index>(accepted[i]));
    }
    Eigen::MatrixXd projected = original;
    for (const auto& [dim, value] : projections) projected.col(dim).setConstant(value);
    Eigen::VectorXd lp_original = log_prob(*node.flow, original, cond);
    Eigen::VectorXd lp_projected = log_prob(*node.flow, projected, cond);
    for (std::size_t i = 0; i < accepted.size(); ++i) {
      weights[i] = std::exp(
          std::min(50.0, lp_projected(static_cast<Eigen::Index>(i)) -
                             lp_original(static_cast<Eigen::Index>(i))));
    }
  }

  const auto picks = systematic_resample(weights, static_cast<std::size_t>(n), rng);
  NodeSamples samples;
  samples.node = node_symbol;
  samples.rows.reserve(picks.size());
  samples.callers.reserve(picks.size());
  for (std::size_t pick : picks) {
    samples.rows.push_back(decoded_rows[accepted[pick]]);
    samples.callers.push_back(batch.callers[accepted[pick]]);
  }
  return samples;
}

namespace {

Condition hop_condition(const ModelNetwork& network, const NodeSamples& from,
                        Symbol to) {
  const auto links = network.links_between(from.node, to);
  if (links.empty()) {
    throw ValidationError("no dataflow link from node " +
                          std::to_string(from.node) + " to node " +
                          std::to_string(to));
  }
  Condition condition;
  for (const DataflowLink* link : links) {
    std::vector<double> numbers;
    std::set<std::string> categories;
    bool numeric = true;
    for (const auto& row : from.rows) {
      auto it = row.find(link->from_column);
      if (it == row.end()) continue;
      if (scalar_is_number(it->second)) {
        numbers.push_back(scalar_number(it->second));
      } else {
        numeric = false;
      }
      categories.insert(scalar_to_string(it->second));
    }
    if (numeric && !numbers.empty()) {
      const double low = quantile(numbers, 0.05);
      const double high = quantile(numbers, 0.95);
      condition.assignments.emplace(link->to_column,
                                    ColumnConstraint::interval(low, high));
    } else if (!categories.empty()) {
      condition.assignments.emplace(link->to_column,
                                    ColumnConstraint::any_of(categories));
    }
  }
  return condition;
}

}  // namespace

NodeSamples hop_forward(const ModelNetwork& network, const NodeSamples& from,
                        Symbol to, int n, std::uint64_t seed,
                        const DynamicConditionConfig& config) {
  return condition_dynamic(network, to, hop_condition(network, from, to), n,
                           seed, config);
}

std::vector<NodeSamples> propagate_forward(const ModelNetwork& network,
                                           const std::vector<Symbol>& path,
                                           const Condition& root_condition,
                                           int n, std::uint64_t seed,
                                           const DynamicConditionConfig& config) {
  if (path.empty()) throw ValidationError("empty propagation path");
  for (Symbol symbol : path) network.fitted_node(symbol);

  std::vector<NodeSamples> all;
  all.push_back(condition_dynamic(network, path.front(), root_condition, n,
                                  seed, config));
  for (std::size_t hop = 1; hop < path.size(); ++hop) {
    all.push_back(hop_forward(network, all.back(), path[hop], n,
                              seed + 0x10001u * hop, config));
  }
  return all;
}

NodeSamples hop_backward(const ModelNetwork& network,
                         const NodeSamples& observation, Symbol upstream,
                         int n, std::uint64_t seed,
                         const DynamicConditionConfig& config) {
  const NetworkNode& up = network.fitted_node(upstream);
  const NetworkNode& down = network.fitted_node(observation.node);
  const auto links = network.links_between(upstream, observation.node);
  if (links.empty()) {
    throw ValidationError("no dataflow link from node " +
                          std::to_string(upstream) + " into node " +
                          std::to_string(observation.node));
  }
  if (observation.rows.empty()) {
    throw ValidationError("backward reasoning needs at least one observation row");
  }

  Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(upstream) ^ 0xb4c);
  const int proposals = std::max(4 * n, 2000);
  EncodedBatch batch = draw_encoded(up, proposals, std::nullopt, rng, nullptr);

  // Observation rows enter the weight as a fixed subsample; each proposal is
  // scored by the downstream likelihood of (linked values from the proposal,
  // remaining values from the observation).
  const std::size_t obs_count = std::min<std::size_t>(observation.rows.size(), 16);
  const auto obs_picks = rng.sample_indices(observation.rows.size(), obs_count);

  const DatasetEncodings& down_enc = *down.encodings;
  const Symbol down_caller = modal_caller(down);

  std::vector<std::map<std::string, Scalar>> up_rows(proposals);
  for (int r = 0; r < proposals; ++r) {
    up_rows[r] = decode_row(batch.x.row(r).transpose(), *up.encodings).values;
  }

  Eigen::MatrixXd merged(
      static_cast<Eigen::Index>(proposals * obs_picks.size()),
      down_enc.encoded_dim);
  Eigen::MatrixXd merged_cond(
      static_cast<Eigen::Index>(proposals * obs_picks.size()),
      down_enc.condition_dim);
  Eigen::Index cursor = 0;
  for (int r = 0; r < proposals; ++r) {
    for (std::size_t k : obs_picks) {
      std::map<std::string, Scalar> row = observation.rows[k];
      for (const DataflowLink* link : links) {
        auto it = up_rows[r].find(link->from_column);
        if (it != up_rows[r].end()) row[link->to_column] = it->second;
      }
      merged.row(cursor) = encode_row(row, down_enc).transpose();
      const Symbol caller = k < observation.callers.size()
                                ? observation.callers[k]
                                : down_caller;
      merged_cond.row(cursor) =
          encode_condition(caller, down_enc).transpose();
      ++cursor;
    }
  }
  Eigen::VectorXd lp = log_prob(*down.flow, merged, merged_cond);

  std::vector<double> weights(proposals);
  std::vector<double> scratch(obs_picks.size());
  for (int r = 0; r < proposals; ++r) {
    for (std::size_t k = 0; k < obs_picks.size(); ++k) {
      scratch[k] = lp(static_cast<Eigen::Index>(r * obs_picks.size() + k));
    }
    weights[r] = logsumexp(scratch) - std::log(double(obs_picks.size()));
  }
  const double peak = *std::max_element(weights.begin(), weights.end());
  for (double& w : weights) w = std::exp(w - peak);

  auto picks = systematic_resample(weights, static_cast<std::size_t>(n), rng);
  std::stable_sort(picks.begin(), picks.end(), [&](std::size_t a, std::size_t b) {
    return weights[a] > weights[b];
  });

  NodeSamples result;
  result.node = upstream;
  result.rows.reserve(picks.size());
  result.callers.reserve(picks.size());
  for (std::size_t pick : picks) {
    result.rows.push_back(up_rows[pick]);
    result.callers.push_back(batch.callers[pick]);
  }
  return result;
}

NodeSamples reason_backward(const ModelNetwork& network, Symbol node_symbol,
                            const std::vector<RawRow>& observation, int n,
                            std::uint64_t seed,
                            const DynamicConditionConfig& config) {
  std::set<Symbol> parents;
  for (const auto& link : network.links) {
    if (link.to_node == node_symbol) parents.insert(link.from_node);
  }
  if (parents.empty()) {
    throw ValidationError("node " + std::to_string(node_symbol) +
                          " has no upstream dataflow link");
  }
  if (parents.size() > 1) {
    throw ValidationError(
        "node " + std::to_string(node_symbol) +
        " has multiple upstream parents; backward reasoning is single-parent");
  }
  NodeSamples obs;
  obs.node = node_symbol;
  const NetworkNode& node = network.fitted_node(node_symbol);
  const Symbol fallback = modal_caller(node);
  for (const auto& row : observation) {
    obs.rows.push_back(row.values);
    obs.callers.push_back(row.caller.value_or(fallback));
  }
  return hop_backward(network, obs, *parents.begin(), n, seed, config);
}

// --- persistence ---------------------------------------------------------

namespace {

json spec_to_json(const ModelSpec& spec) {
  json columns = json::array();
  for (const auto& column : spec.columns) {
    columns.push_back({{"id", column.id},
                       {"role", to_string(column.role)},
                       {"source", column.source_symbol},
                       {"dataType", to_string(column.data_type)}});
  }
  return {{"node", spec.node},
          {"name", spec.node_name},
          {"columns", columns},
          {"callers", spec.caller_symbols},
          {"empty", spec.empty}};
}

ModelSpec spec_from_json(const json& doc) {
  ModelSpec spec;
  spec.node = doc.at("node").get<Symbol>();
  spec.node_name = doc.at("name").get<std::string>();
  for (const auto& entry : doc.at("columns")) {
    spec.columns.push_back({entry.at("id").get<std::string>(),
                            column_role_from_string(entry.at("role")),
                            entry.at("source").get<Symbol>(),
                            data_type_from_string(entry.at("dataType"))});
  }
  spec.caller_symbols = doc.at("callers").get<std::vector<Symbol>>();
  spec.empty = doc.at("empty").get<bool>();
  return spec;
}

json encoding_to_json(const ColumnEncoding& encoding) {
  return {{"id", encoding.column_id},
          {"mode", encoding.mode == EncodingMode::ContinuousStandardized
                       ? "continuous"
                       : "discrete"},
          {"numeric", encoding.numeric_values},
          {"mean", encoding.mean},
          {"stddev", encoding.stddev},
          {"categories", encoding.categories},
          {"digitWidth", encoding.digit_width},
          {"digitMean", encoding.digit_mean},
          {"digitStd", encoding.digit_std},
          {"dropped", encoding.dropped}};
}

ColumnEncoding encoding_from_json(const json& doc) {
  ColumnEncoding encoding;
  encoding.column_id = doc.at("id").get<std::string>();
  encoding.mode = doc.at("mode").get<std::string>() == "continuous"
                      ? EncodingMode::ContinuousStandardized
                      : EncodingMode::DiscreteBase10;
  encoding.numeric_values = doc.at("numeric").get<bool>();
  encoding.mean = doc.at("mean").get<double>();
  encoding.stddev = doc.at("stddev").get<double>();
  encoding.categories = doc.at("categories").get<std::vector<std::string>>();
  encoding.digit_width = doc.at("digitWidth").get<int>();
  encoding.digit_mean = doc.at("digitMean").get<std::vector<double>>();
  encoding.digit_std = doc.at("digitStd").get<std::vector<double>>();
  encoding.dropped = doc.at("dropped").get<bool>();
  return encoding;
}

json encodings_to_json(const DatasetEncodings& encodings) {
  json columns = json::array();
  for (const auto& encoding : encodings.columns) {
    columns.push_back(encoding_to_json(encoding));
  }
  return {{"columns", columns},
          {"condition", encoding_to_json(encodings.condition)},
          {"encodedDim", encodings.encoded_dim},
          {"conditionDim", encodings.condition_dim}};
}

DatasetEncodings encodings_from_json(const json& doc) {
  DatasetEncodings encodings;
  for (const auto& entry : doc.at("columns")) {
    encodings.columns.push_back(encoding_from_json(entry));
  }
  encodings.condition = encoding_from_json(doc.at("condition"));
  encodings.encoded_dim = doc.at("encodedDim").get<int>();
  encodings.condition_dim = doc.at("conditionDim").get<int>();
  return encodings;
}

json flow_to_json(const FlowParams& flow) {
  json couplings = json::array();
  for (const auto& coupling : flow.couplings) {
    couplings.push_back({{"transformed", coupling.transformed},
                         {"passthrough", coupling.passthrough}});
  }
  return {{"dim", flow.dim},
          {"condDim", flow.cond_dim},
          {"hidden", flow.hidden},
          {"capacity", to_string(flow.capacity)},
          {"seed", flow.seed},
          {"couplings", couplings},
          {"theta", flow.theta}};
}

json fit_report_to_json(const FitReport& report) {
  return {{"epochsRun", report.epochs_run},
          {"bestEpoch", report.best_epoch},
          {"trainNll", report.train_nll},
          {"testNll", report.test_nll},
          {"parameterCount", report.parameter_count}};
}

FitReport fit_report_from_json(const json& doc) {
  FitReport report;
  report.epochs_run = doc.at("epochsRun").get<int>();
  report.best_epoch = doc.at("bestEpoch").get<int>();
  report.train_nll = doc.at("trainNll").get<double>();
  report.test_nll = doc.at("testNll").get<double>();
  report.parameter_count = doc.at("parameterCount").get<std::size_t>();
  return report;
}

std::string theta_checksum(const std::vector<double>& theta) {
  return to_hex(fnv1a(theta.data(), theta.size() * sizeof(double)));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write file: " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& err) {
    throw ParseError(path.string() + ": " + err.what());
  }
  return doc;
}

}  // namespace

void save_network(const ModelNetwork& network, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "nodes");
  json manifest_nodes = json::array();
  for (const auto& [symbol, node] : network.nodes) {
    json doc;
    doc["symbol"] = symbol;
    doc["name"] = node.spec.node_name;
    doc["state"] = to_string(node.state);
    doc["statusNote"] = node.status_note;
    doc["dataPoints"] = node.data_points;
    doc["spec"] = spec_to_json(node.spec);
    if (node.fitted()) {
      doc["encodings"] = encodings_to_json(*node.encodings);
      doc["flow"] = flow_to_json(*node.flow);
      doc["fitReport"] = fit_report_to_json(*node.fit_report);
      doc["trainScores"] = node.train_scores;
      json histogram = json::array();
      for (const auto& [caller, count] : node.caller_histogram) {
        histogram.push_back({caller, count});
      }
      doc["callerHistogram"] = histogram;
      doc["checksum"] = theta_checksum(node.flow->theta);
    }
    const std::string file = "nodes/" + std::to_string(symbol) + ".json";
    write_text(fs::path(dir) / file, doc.dump(1));
    json summary = {{"symbol", symbol},
                    {"name", node.spec.node_name},
                    {"state", to_string(node.state)},
                    {"file", file}};
    if (node.fitted()) {
      summary["dataPoints"] = node.data_points;
      summary["dimensions"] = node.encodings->encoded_dim;
      summary["parameters"] = node.flow->parameter_count();
      summary["trainNll"] = node.fit_report->train_nll;
      summary["testNll"] = node.fit_report->test_nll;
    }
    manifest_nodes.push_back(summary);
  }

  json links = json::array();
  for (const auto& link : network.links) {
    links.push_back({{"fromNode", link.from_node},
                     {"fromColumn", link.from_column},
                     {"toNode", link.to_node},
                     {"toColumn", link.to_column}});
  }
  json manifest = {{"format", 1},
                   {"tool", "traceflow 0.1.0"},
                   {"topologySource", network.topology_digest},
                   {"links", links},
                   {"nodes", manifest_nodes}};
  write_text(fs::path(dir) / "manifest.json", manifest.dump(1));
}

ModelNetwork load_network(const std::string& dir,
                          const std::optional<std::string>& expected_digest,
                          bool force) {
  const json manifest = read_json(fs::path(dir) / "manifest.json");
  ModelNetwork network;
  network.topology_digest = manifest.at("topologySource").get<std::string>();
  if (expected_digest && *expected_digest != network.topology_digest) {
    if (!force) {
      throw ValidationError(
          "structure digest mismatch: network was built from " +
          network.topology_digest + ", current structure is " +
          *expected_digest + " (pass --force to load anyway)");
    }
  }
  for (const auto& link : manifest.at("links")) {
    network.links.push_back({link.at("fromNode").get<Symbol>(),
                             link.at("fromColumn").get<std::string>(),
                             link.at("toNode").get<Symbol>(),
                             link.at("toColumn").get<std::string>()});
  }
  for (const auto& summary : manifest.at("nodes")) {
    const json doc = read_json(fs::path(dir) / summary.at("file").get<std::string>());
    NetworkNode node;
    node.spec = spec_from_json(doc.at("spec"));
    node.status_note = doc.at("statusNote").get<std::string>();
    node.data_points = doc.at("dataPoints").get<std::size_t>();
    const std::string state = doc.at("state").get<std::string>();
    if (state == "fitted") {
      node.encodings = encodings_from_json(doc.at("encodings"));
      const json& flow_doc = doc.at("flow");
      FlowParams flow = init_flow(flow_doc.at("dim").get<int>(),
                                  flow_doc.at("condDim").get<int>(),
                                  capacity_from_string(flow_doc.at("capacity")),
                                  flow_doc.at("seed").get<std::uint64_t>());
      std::vector<double> theta =
          flow_doc.at("theta").get<std::vector<double>>();
      if (theta.size() != flow.theta.size()) {
        throw ValidationError("model document for node " + node.spec.node_name +
                              " has a parameter vector of unexpected size");
      }
      // Persisted masks are authoritative; shapes must agree with them.
      const json& couplings = flow_doc.at("couplings");
      for (std::size_t k = 0; k < flow.couplings.size(); ++k) {
        flow.couplings[k].transformed =
            couplings.at(k).at("transformed").get<std::vector<int>>();
        flow.couplings[k].passthrough =
            couplings.at(k).at("passthrough").get<std::vector<int>>();
      }
      flow.theta = std::move(theta);
      if (theta_checksum(flow.theta) != doc.at("checksum").get<std::string>()) {
        throw ValidationError("checksum mismatch in model document for node " +
                              node.spec.node_name);
      }
      node.flow = std::move(flow);
      node.fit_report = fit_report_from_json(doc.at("fitReport"));
      node.train_scores = doc.at("trainScores").get<std::vector<double>>();
      for (const auto& entry : doc.at("callerHistogram")) {
        node.caller_histogram.emplace_back(entry.at(0).get<Symbol>(),
                                           entry.at(1).get<std::size_t>());
      }
      node.state = NodeState::Fitted;
    } else if (state == "ineligible") {
      node.state = NodeState::Ineligible;
    } else {
      node.state = NodeState::Empty;
    }
    network.nodes.emplace(node.spec.node, std::move(node));
  }
  return network;
}

}  // namespace traceflow
