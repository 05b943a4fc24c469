#include "traceflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

namespace traceflow {

BehaviorDataset tally(const std::vector<InvocationRecord>& records,
                      const ModelSpec& spec, const TallyConfig& config,
                      Diagnostics* diags) {
  BehaviorDataset dataset;
  dataset.node = spec.node;
  dataset.node_name = spec.node_name;
  dataset.caller_symbols = spec.caller_symbols;

  std::vector<const InvocationRecord*> mine;
  for (const auto& record : records) {
    if (record.node == spec.node) mine.push_back(&record);
  }

  // Column coverage over the node's records decides which columns survive.
  std::vector<std::size_t> present(spec.columns.size(), 0);
  for (const InvocationRecord* record : mine) {
    for (std::size_t i = 0; i < spec.columns.size(); ++i) {
      if (record->row.count(spec.columns[i].id) > 0) present[i] += 1;
    }
  }
  for (std::size_t i = 0; i < spec.columns.size(); ++i) {
    const double coverage =
        mine.empty() ? 0.0
                     : static_cast<double>(present[i]) /
                           static_cast<double>(mine.size());
    if (!mine.empty() && coverage < config.min_column_coverage) {
      warn(diags, "node " + spec.node_name + ": column '" +
                      spec.columns[i].id + "' present in " +
                      std::to_string(present[i]) + "/" +
                      std::to_string(mine.size()) + " rows, dropped");
      continue;
    }
    dataset.columns.push_back(spec.columns[i]);
  }

  std::size_t dropped_rows = 0;
  for (const InvocationRecord* record : mine) {
    std::vector<Scalar> row;
    row.reserve(dataset.columns.size());
    bool complete = true;
    for (const auto& column : dataset.columns) {
      auto it = record->row.find(column.id);
      if (it == record->row.end()) {
        complete = false;
        break;
      }
      row.push_back(it->second);
    }
    if (!complete) {
      ++dropped_rows;
      continue;
    }
    dataset.rows.push_back(std::move(row));
    dataset.condition_values.push_back(record->caller);
  }
  if (dropped_rows > 0) {
    warn(diags, "node " + spec.node_name + ": dropped " +
                    std::to_string(dropped_rows) + " rows with missing cells");
  }

  if (dataset.rows.size() > config.max_rows) {
    Rng rng = Rng::keyed(config.seed, static_cast<std::uint64_t>(spec.node) * 2);
    const auto keep = rng.sample_indices(dataset.rows.size(), config.max_rows);
    std::vector<std::vector<Scalar>> rows;
    std::vector<Symbol> conditions;
    rows.reserve(keep.size());
    for (std::size_t index : keep) {
      rows.push_back(std::move(dataset.rows[index]));
      conditions.push_back(dataset.condition_values[index]);
    }
    dataset.rows = std::move(rows);
    dataset.condition_values = std::move(conditions);
  }

  if (dataset.columns.empty()) {
    dataset.eligible = false;
    dataset.ineligible_reason = "no data columns";
    return dataset;
  }
  if (dataset.rows.size() < config.min_rows) {
    dataset.eligible = false;
    dataset.ineligible_reason =
        "only " + std::to_string(dataset.rows.size()) + " rows (minimum " +
        std::to_string(config.min_rows) + ")";
    return dataset;
  }

  const auto test_count = static_cast<std::size_t>(
      std::llround(config.test_fraction * static_cast<double>(dataset.rows.size())));
  Rng rng = Rng::keyed(config.seed, static_cast<std::uint64_t>(spec.node) * 2 + 1);
  dataset.test_indices = rng.sample_indices(dataset.rows.size(), test_count);
  std::set<std::size_t> test_set(dataset.test_indices.begin(),
                                 dataset.test_indices.end());
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    if (test_set.count(i) == 0) dataset.train_indices.push_back(i);
  }
  dataset.eligible = true;
  return dataset;
}

std::size_t ColumnEncoding::category_index(const Scalar& value) const {
  const std::string key = scalar_to_string(value);
  auto it = std::lower_bound(categories.begin(), categories.end(), key);
  if (it != categories.end() && *it == key) {
    return static_cast<std::size_t>(it - categories.begin());
  }
  return unseen_index();
}

namespace {

int decimal_digits(std::size_t value) {
  int digits = 1;
  while (value >= 10) {
    value /= 10;
    ++digits;
  }
  return digits;
}

std::vector<int> index_digits(std::size_t index, int width) {
  std::vector<int> digits(width, 0);
  for (int i = width - 1; i >= 0; --i) {
    digits[i] = static_cast<int>(index % 10);
    index /= 10;
  }
  return digits;
}

// Population standard deviation; the exact-unit-variance convention.
std::pair<double, double> mean_stddev(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 1.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double variance = 0.0;
  for (double v : values) variance += (v - mean) * (v - mean);
  variance /= static_cast<double>(values.size());
  return {mean, std::sqrt(variance)};
}

ColumnEncoding make_discrete(std::string id, bool numeric,
                             std::set<std::string> values) {
  ColumnEncoding encoding;
  encoding.column_id = std::move(id);
  encoding.mode = EncodingMode::DiscreteBase10;
  encoding.numeric_values = numeric;
  encoding.categories.assign(values.begin(), values.end());
  encoding.digit_width = decimal_digits(encoding.unseen_index());
  return encoding;
}

void fill_digit_stats(ColumnEncoding& encoding,
                      const std::vector<std::size_t>& train_indices,
                      auto&& index_of) {
  encoding.digit_mean.assign(encoding.digit_width, 0.0);
  encoding.digit_std.assign(encoding.digit_width, 1.0);
  std::vector<std::vector<double>> per_digit(encoding.digit_width);
  for (std::size_t row : train_indices) {
    const auto digits = index_digits(index_of(row), encoding.digit_width);
    for (int d = 0; d < encoding.digit_width; ++d) {
      per_digit[d].push_back(digits[d]);
    }
  }
  for (int d = 0; d < encoding.digit_width; ++d) {
    auto [mean, stddev] = mean_stddev(per_digit[d]);
    encoding.digit_mean[d] = mean;
    // Constant digit dimensions (single caller, few categories) pass through
    // unscaled.
    encoding.digit_std[d] = stddev > 0.0 ? stddev : 1.0;
  }
}

}  // namespace

DatasetEncodings infer_encodings(const BehaviorDataset& dataset,
                                 const EncodeConfig& config,
                                 Diagnostics* diags) {
  if (!dataset.eligible) {
    throw ValidationError("dataset for node " + dataset.node_name +
                          " is ineligible: " + dataset.ineligible_reason);
  }
  DatasetEncodings encodings;

  for (std::size_t c = 0; c < dataset.columns.size(); ++c) {
    const auto& column = dataset.columns[c];
    const bool numeric = column.data_type == DataType::Number;

    std::set<std::string> distinct;
    for (const auto& row : dataset.rows) distinct.insert(scalar_to_string(row[c]));

    if (!numeric ||
        distinct.size() <= static_cast<std::size_t>(config.discretization_threshold)) {
      ColumnEncoding encoding = make_discrete(column.id, numeric, std::move(distinct));
      fill_digit_stats(encoding, dataset.train_indices, [&](std::size_t row) {
        return encoding.category_index(dataset.rows[row][c]);
      });
      encodings.columns.push_back(std::move(encoding));
      continue;
    }

    ColumnEncoding encoding;
    encoding.column_id = column.id;
    encoding.mode = EncodingMode::ContinuousStandardized;
    encoding.numeric_values = true;
    std::vector<double> train_values;
    train_values.reserve(dataset.train_indices.size());
    for (std::size_t row : dataset.train_indices) {
      train_values.push_back(scalar_number(dataset.rows[row][c]));
    }
    auto [mean, stddev] = mean_stddev(train_values);
    if (stddev <= 0.0) {
      warn(diags, "node " + dataset.node_name + ": constant continuous column '" +
                      column.id + "' dropped");
      encoding.dropped = true;
      encodings.columns.push_back(std::move(encoding));
      continue;
    }
    encoding.mean = mean;
    encoding.stddev = stddev;
    encodings.columns.push_back(std::move(encoding));
  }

  {
    std::set<std::string> callers;
    for (Symbol symbol : dataset.caller_symbols) {
      callers.insert(std::to_string(symbol));
    }
    ColumnEncoding condition = make_discrete("caller", true, std::move(callers));
    fill_digit_stats(condition, dataset.train_indices, [&](std::size_t row) {
      return condition.category_index(
          Scalar(std::to_string(dataset.condition_values[row])));
    });
    encodings.condition = std::move(condition);
  }

  encodings.encoded_dim = 0;
  for (const auto& encoding : encodings.columns) {
    encodings.encoded_dim += encoding.width();
  }
  encodings.condition_dim = encodings.condition.width();
  return encodings;
}

namespace {

void encode_value(const ColumnEncoding& encoding, const Scalar& value,
                  double* out) {
  if (encoding.dropped) return;
  if (encoding.mode == EncodingMode::ContinuousStandardized) {
    out[0] = (scalar_number(value) - encoding.mean) / encoding.stddev;
    return;
  }
  const auto digits =
      index_digits(encoding.category_index(value), encoding.digit_width);
  for (int d = 0; d < encoding.digit_width; ++d) {
    out[d] = (digits[d] - encoding.digit_mean[d]) / encoding.digit_std[d];
  }
}

}  // namespace

SplitDataset encode(const BehaviorDataset& dataset,
                    const DatasetEncodings& encodings) {
  if (encodings.columns.size() != dataset.columns.size()) {
    throw ValidationError("encodings do not match dataset columns for node " +
                          dataset.node_name);
  }
  SplitDataset split;
  split.encodings = encodings;
  split.encoded_dim = encodings.encoded_dim;

  auto fill = [&](const std::vector<std::size_t>& indices,
                  Eigen::MatrixXd& data, Eigen::MatrixXd& condition) {
    data.resize(static_cast<Eigen::Index>(indices.size()),
                encodings.encoded_dim);
    condition.resize(static_cast<Eigen::Index>(indices.size()),
                     encodings.condition_dim);
    std::vector<double> buffer(std::max(encodings.encoded_dim, 1), 0.0);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const auto& row = dataset.rows[indices[r]];
      int offset = 0;
      for (std::size_t c = 0; c < encodings.columns.size(); ++c) {
        const auto& encoding = encodings.columns[c];
        encode_value(encoding, row[c], buffer.data());
        for (int d = 0; d < encoding.width(); ++d) {
          data(static_cast<Eigen::Index>(r), offset + d) = buffer[d];
        }
        offset += encoding.width();
      }
      encode_value(encodings.condition,
                   Scalar(std::to_string(dataset.condition_values[indices[r]])),
                   buffer.data());
      for (int d = 0; d < encodings.condition_dim; ++d) {
        condition(static_cast<Eigen::Index>(r), d) = buffer[d];
      }
    }
  };
  fill(dataset.train_indices, split.train, split.train_condition);
  fill(dataset.test_indices, split.test, split.test_condition);
  return split;
}

Eigen::VectorXd encode_row(const std::map<std::string, Scalar>& row,
                           const DatasetEncodings& encodings) {
  Eigen::VectorXd encoded(encodings.encoded_dim);
  int offset = 0;
  std::vector<double> buffer(std::max(encodings.encoded_dim, 1), 0.0);
  for (const auto& encoding : encodings.columns) {
    if (encoding.dropped) continue;
    auto it = row.find(encoding.column_id);
    if (it == row.end()) {
      throw ValidationError("row is missing column '" + encoding.column_id + "'");
    }
    encode_value(encoding, it->second, buffer.data());
    for (int d = 0; d < encoding.width(); ++d) encoded(offset + d) = buffer[d];
    offset += encoding.width();
  }
  return encoded;
}

Eigen::VectorXd encode_condition(Symbol caller,
                                 const DatasetEncodings& encodings,
                                 Diagnostics* diags) {
  const Scalar value = std::to_string(caller);
  if (encodings.condition.category_index(value) ==
      encodings.condition.unseen_index()) {
    warn(diags, "caller symbol " + std::to_string(caller) +
                    " not in the project table; using the reserved unseen "
                    "category");
  }
  Eigen::VectorXd encoded(encodings.condition_dim);
  std::vector<double> buffer(std::max(encodings.condition_dim, 1), 0.0);
  encode_value(encodings.condition, value, buffer.data());
  for (int d = 0; d < encodings.condition_dim; ++d) encoded(d) = buffer[d];
  return encoded;
}

DecodedRow decode_row(const Eigen::VectorXd& encoded,
                      const DatasetEncodings& encodings) {
  if (encoded.size() != encodings.encoded_dim) {
    throw ValidationError("encoded row has dimension " +
                          std::to_string(encoded.size()) + ", expected " +
                          std::to_string(encodings.encoded_dim));
  }
  DecodedRow decoded;
  int offset = 0;
  for (const auto& encoding : encodings.columns) {
    if (encoding.dropped) continue;
    if (encoding.mode == EncodingMode::ContinuousStandardized) {
      decoded.values[encoding.column_id] =
          encoded(offset) * encoding.stddev + encoding.mean;
      offset += 1;
      continue;
    }
    std::size_t index = 0;
    for (int d = 0; d < encoding.digit_width; ++d) {
      const double raw =
          encoded(offset + d) * encoding.digit_std[d] + encoding.digit_mean[d];
      const double digit = std::clamp(std::round(raw), 0.0, 9.0);
      index = index * 10 + static_cast<std::size_t>(digit);
    }
    if (index >= encoding.categories.size()) {
      // Outside the table (or on the reserved unseen slot): snap to the
      // nearest real category and flag it.
      index = encoding.categories.empty() ? 0 : encoding.categories.size() - 1;
      decoded.clamped = true;
    }
    const std::string& category = encoding.categories[index];
    if (encoding.numeric_values) {
      decoded.values[encoding.column_id] = std::stod(category);
    } else {
      decoded.values[encoding.column_id] = category;
    }
    offset += encoding.digit_width;
  }
  return decoded;
}

}  // namespace traceflow
