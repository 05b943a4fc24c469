#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "traceflow/rng.hpp"
#include "traceflow/structure.hpp"
#include "traceflow/trace.hpp"

namespace traceflow {

/// Raw per-node table of invocation rows, with the train/test split already
/// assigned (seeded) so every later statistic can be train-only.
struct BehaviorDataset {
  Symbol node = 0;
  std::string node_name;
  std::vector<FeatureColumnSpec> columns;  // retained columns, spec order
  std::vector<Symbol> caller_symbols;      // value range of the conditional
  std::vector<Symbol> condition_values;    // caller per row
  std::vector<std::vector<Scalar>> rows;   // rectangular
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  bool eligible = false;
  std::string ineligible_reason;

  std::size_t row_count() const { return rows.size(); }
  std::size_t column_count() const { return columns.size(); }
};

struct TallyConfig {
  std::size_t min_rows = 20;
  std::size_t max_rows = 10000;
  double min_column_coverage = 0.9;
  double test_fraction = 0.10;
  std::uint64_t seed = 0;
};

/// Builds the behavior dataset for spec.node from its invocation records.
/// Sparse columns (<90% coverage) are dropped, rows missing a retained cell
/// are dropped, oversized datasets are subsampled with the seed, undersized
/// ones are marked ineligible.
BehaviorDataset tally(const std::vector<InvocationRecord>& records,
                      const ModelSpec& spec, const TallyConfig& config = {},
                      Diagnostics* diags = nullptr);

enum class EncodingMode { ContinuousStandardized, DiscreteBase10 };

/// Reversible numeric encoding of one column. Discrete columns map category
/// index to a fixed-width base-10 digit vector (most significant first);
/// every emitted dimension is standardized with training-partition stats.
struct ColumnEncoding {
  std::string column_id;
  EncodingMode mode = EncodingMode::ContinuousStandardized;
  bool numeric_values = true;

  double mean = 0.0;    // continuous only
  double stddev = 1.0;  // continuous only; population convention

  std::vector<std::string> categories;  // index -> canonical value
  int digit_width = 1;
  std::vector<double> digit_mean;
  std::vector<double> digit_std;

  bool dropped = false;  // constant continuous columns carry no density

  int width() const {
    if (dropped) return 0;
    return mode == EncodingMode::ContinuousStandardized ? 1 : digit_width;
  }
  /// Reserved index for values outside the category table.
  std::size_t unseen_index() const { return categories.size(); }
  /// Index for a raw value; unseen_index() when not in the table.
  std::size_t category_index(const Scalar& value) const;
};

struct DatasetEncodings {
  std::vector<ColumnEncoding> columns;   // dataset column order
  ColumnEncoding condition;
  int encoded_dim = 0;   // data dims only
  int condition_dim = 0;
};

struct EncodeConfig {
  int discretization_threshold = 16;
};

/// Derives column encodings. Category tables and the discrete/continuous
/// decision come from the whole dataset; standardization statistics come
/// from the training partition only.
DatasetEncodings infer_encodings(const BehaviorDataset& dataset,
                                 const EncodeConfig& config = {},
                                 Diagnostics* diags = nullptr);

struct SplitDataset {
  Eigen::MatrixXd train;
  Eigen::MatrixXd test;
  Eigen::MatrixXd train_condition;
  Eigen::MatrixXd test_condition;
  DatasetEncodings encodings;
  int encoded_dim = 0;
};

SplitDataset encode(const BehaviorDataset& dataset,
                    const DatasetEncodings& encodings);

/// Encode one raw row (missing column -> ValidationError; unknown category
/// -> unseen index).
Eigen::VectorXd encode_row(const std::map<std::string, Scalar>& row,
                           const DatasetEncodings& encodings);
Eigen::VectorXd encode_condition(Symbol caller,
                                 const DatasetEncodings& encodings,
                                 Diagnostics* diags = nullptr);

struct DecodedRow {
  std::map<std::string, Scalar> values;
  bool clamped = false;  // a digit pattern fell outside the category table
};

DecodedRow decode_row(const Eigen::VectorXd& encoded,
                      const DatasetEncodings& encodings);

}  // namespace traceflow
