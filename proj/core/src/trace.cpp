#include "traceflow/trace.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace traceflow {

using nlohmann::json;

bool scalar_is_number(const Scalar& value) {
  return std::holds_alternative<double>(value);
}

double scalar_number(const Scalar& value) { return std::get<double>(value); }

const std::string& scalar_text(const Scalar& value) {
  return std::get<std::string>(value);
}

std::string scalar_to_string(const Scalar& value) {
  if (scalar_is_number(value)) return format_double(scalar_number(value));
  return scalar_text(value);
}

namespace {

EventKind event_kind_from_string(const std::string& text, std::size_t line) {
  if (text == "enter") return EventKind::Enter;
  if (text == "exit") return EventKind::Exit;
  if (text == "read") return EventKind::Read;
  if (text == "write") return EventKind::Write;
  throw ParseError("line " + std::to_string(line) + ": unknown event kind '" +
                   text + "'");
}

Scalar scalar_from_json(const json& value, std::size_t line) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) return value.get<std::string>();
  throw ParseError("line " + std::to_string(line) +
                   ": event values must be numbers or strings");
}

TraceEvent parse_event_line(const std::string& text, std::size_t line) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& err) {
    throw ParseError("line " + std::to_string(line) + ": " + err.what());
  }
  TraceEvent event;
  try {
    event.seq = doc.at("seq").get<std::uint64_t>();
    event.kind = event_kind_from_string(doc.at("kind").get<std::string>(), line);
    event.elem = doc.at("elem").get<Symbol>();
    event.caller = doc.at("caller").get<Symbol>();
    event.inv = doc.at("inv").get<std::uint64_t>();
    for (const auto& item : doc.value("values", json::object()).items()) {
      std::vector<Scalar> cell;
      if (item.value().is_array()) {
        for (const auto& element : item.value()) {
          cell.push_back(scalar_from_json(element, line));
        }
      } else {
        cell.push_back(scalar_from_json(item.value(), line));
      }
      event.values.emplace_back(item.key(), std::move(cell));
    }
  } catch (const json::exception& err) {
    throw ParseError("line " + std::to_string(line) + ": " + err.what());
  }
  if ((event.kind == EventKind::Read || event.kind == EventKind::Write) &&
      event.values.size() != 1) {
    throw ParseError("line " + std::to_string(line) +
                     ": read/write events carry exactly one value");
  }
  return event;
}

}  // namespace

struct TraceReader::Impl {
  std::ifstream in;
  std::size_t line = 0;
  bool first = true;
  std::uint64_t last_seq = 0;
};

TraceReader::TraceReader(const std::string& path) : impl_(new Impl) {
  impl_->in.open(path, std::ios::binary);
  if (!impl_->in) throw ParseError("cannot open trace file: " + path);
}

TraceReader::~TraceReader() = default;
TraceReader::TraceReader(TraceReader&&) noexcept = default;
TraceReader& TraceReader::operator=(TraceReader&&) noexcept = default;

std::optional<TraceEvent> TraceReader::next() {
  std::string text;
  while (std::getline(impl_->in, text)) {
    ++impl_->line;
    if (text.empty()) continue;
    TraceEvent event = parse_event_line(text, impl_->line);
    if (!impl_->first && event.seq <= impl_->last_seq) {
      throw ParseError("line " + std::to_string(impl_->line) +
                       ": seq " + std::to_string(event.seq) +
                       " does not increase past " +
                       std::to_string(impl_->last_seq));
    }
    impl_->first = false;
    impl_->last_seq = event.seq;
    return event;
  }
  return std::nullopt;
}

std::vector<TraceEvent> read_trace(const std::string& path) {
  TraceReader reader(path);
  std::vector<TraceEvent> events;
  while (auto event = reader.next()) events.push_back(std::move(*event));
  return events;
}

std::vector<TraceEvent> merge_traces(
    std::vector<std::vector<TraceEvent>> streams) {
  std::vector<TraceEvent> merged;
  std::vector<std::size_t> heads(streams.size(), 0);
  for (;;) {
    std::size_t best = streams.size();
    for (std::size_t i = 0; i < streams.size(); ++i) {
      if (heads[i] >= streams[i].size()) continue;
      if (best == streams.size() ||
          streams[i][heads[i]].seq < streams[best][heads[best]].seq) {
        best = i;
      }
    }
    if (best == streams.size()) break;
    merged.push_back(std::move(streams[best][heads[best]]));
    ++heads[best];
  }
  return merged;
}

namespace {

struct OpenInvocation {
  Symbol node = 0;
  std::uint64_t inv = 0;
  Symbol caller = 0;
  const ModelSpec* spec = nullptr;
  // Cells gathered so far; a column may collect several values (a list).
  std::map<std::string, std::vector<Scalar>> cells;
};

void explode_and_emit(const OpenInvocation& frame,
                      std::vector<InvocationRecord>& out) {
  // Cartesian product over list-valued columns, in spec column order.
  std::vector<std::pair<std::string, const std::vector<Scalar>*>> ordered;
  for (const auto& column : frame.spec->columns) {
    auto it = frame.cells.find(column.id);
    if (it != frame.cells.end() && !it->second.empty()) {
      ordered.emplace_back(column.id, &it->second);
    }
  }
  std::vector<std::size_t> pick(ordered.size(), 0);
  for (;;) {
    InvocationRecord record;
    record.node = frame.node;
    record.inv = frame.inv;
    record.caller = frame.caller;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      record.row[ordered[i].first] = (*ordered[i].second)[pick[i]];
    }
    out.push_back(std::move(record));
    std::size_t level = ordered.size();
    while (level > 0) {
      --level;
      if (++pick[level] < ordered[level].second->size()) break;
      pick[level] = 0;
      if (level == 0) return;
    }
    if (ordered.empty()) return;
  }
}

}  // namespace

std::vector<InvocationRecord> correlate_invocations(
    const std::vector<TraceEvent>& events, const ProgramGraph& graph,
    const std::vector<ModelSpec>& specs, const CorrelateOptions& options,
    Diagnostics* diags) {
  std::unordered_map<Symbol, const ModelSpec*> spec_by_node;
  for (const auto& spec : specs) spec_by_node[spec.node] = &spec;

  // Access edges keyed for the innermost-frame attribution walk.
  std::set<std::tuple<Symbol, Symbol, int>> access;
  for (const auto& edge : graph.access_edges) {
    access.insert({edge.executable, edge.property,
                   edge.mode == AccessMode::Read ? 0 : 1});
  }

  std::vector<OpenInvocation> stack;
  std::vector<InvocationRecord> records;

  auto append_cell = [&](OpenInvocation& frame, const std::string& column_id,
                         const std::vector<Scalar>& values,
                         std::uint64_t seq) {
    const FeatureColumnSpec* column = frame.spec->find_column(column_id);
    if (column == nullptr) {
      warn(diags, "seq " + std::to_string(seq) + ": value for undeclared column '" +
                      column_id + "' on node " + frame.spec->node_name +
                      " dropped");
      return;
    }
    auto& cell = frame.cells[column_id];
    cell.insert(cell.end(), values.begin(), values.end());
  };

  for (const auto& event : events) {
    switch (event.kind) {
      case EventKind::Enter: {
        auto it = spec_by_node.find(event.elem);
        if (it == spec_by_node.end()) {
          warn(diags, "seq " + std::to_string(event.seq) +
                          ": enter for executable outside the universe, symbol " +
                          std::to_string(event.elem));
          break;
        }
        if (options.inv_columns && !stack.empty() &&
            stack.back().spec->find_column("inv") != nullptr) {
          stack.back().cells["inv"].push_back(
              Scalar(std::to_string(event.elem)));
        }
        OpenInvocation frame;
        frame.node = event.elem;
        frame.inv = event.inv;
        frame.caller = event.caller;
        frame.spec = it->second;
        stack.push_back(std::move(frame));
        for (const auto& [key, values] : event.values) {
          append_cell(stack.back(), key, values, event.seq);
        }
        break;
      }
      case EventKind::Exit: {
        // Find the matching open frame; anything opened after it dangles.
        std::size_t index = stack.size();
        while (index > 0 && stack[index - 1].inv != event.inv) --index;
        if (index == 0) {
          warn(diags, "seq " + std::to_string(event.seq) +
                          ": exit without matching enter, invocation " +
                          std::to_string(event.inv));
          break;
        }
        while (stack.size() > index) {
          warn(diags, "dangling invocation " +
                          std::to_string(stack.back().inv) + " on node " +
                          stack.back().spec->node_name + " dropped");
          stack.pop_back();
        }
        OpenInvocation frame = std::move(stack.back());
        stack.pop_back();
        for (const auto& [key, values] : event.values) {
          append_cell(frame, key, values, event.seq);
        }
        explode_and_emit(frame, records);
        break;
      }
      case EventKind::Read:
      case EventKind::Write: {
        const bool is_read = event.kind == EventKind::Read;
        OpenInvocation* target = nullptr;
        for (std::size_t i = stack.size(); i > 0; --i) {
          if (access.count({stack[i - 1].node, event.elem, is_read ? 0 : 1})) {
            target = &stack[i - 1];
            break;
          }
        }
        if (target == nullptr) {
          warn(diags, "seq " + std::to_string(event.seq) +
                          ": unmatched property access on symbol " +
                          std::to_string(event.elem));
          break;
        }
        const CodeElement& property = graph.at(event.elem);
        const std::string column_id =
            is_read ? property.simple_name() : property.simple_name() + ".w";
        append_cell(*target, column_id, event.values.front().second, event.seq);
        break;
      }
    }
  }
  for (const auto& frame : stack) {
    warn(diags, "dangling invocation " + std::to_string(frame.inv) +
                    " on node " + frame.spec->node_name + " dropped");
  }
  return records;
}

ActivityMetrics compute_activity_metrics(const std::vector<TraceEvent>& events,
                                         const ModelingUniverse& universe,
                                         const ProgramGraph& graph) {
  std::map<Symbol, std::set<std::string>> distinct;
  ActivityMetrics metrics;

  auto credit_value = [&](Symbol symbol, const Scalar& value) {
    if (!universe.contains(symbol)) return;
    distinct[symbol].insert(scalar_to_string(value));
    metrics.per_element[symbol];  // ensure presence even before any event
  };
  auto credit_event = [&](Symbol symbol, bool data) {
    if (!universe.contains(symbol)) return;
    metrics.per_element[symbol].event_count += 1;
    metrics.total_events += 1;
    if (data) metrics.total_data_events += 1;
  };

  // Parameter name -> symbol per executable, for crediting Enter payloads.
  std::unordered_map<Symbol, std::unordered_map<std::string, Symbol>> params;
  for (const auto& [executable, list] : graph.param_lists) {
    for (Symbol param : list) {
      params[executable][graph.at(param).simple_name()] = param;
    }
  }

  for (const auto& event : events) {
    const CodeElement* element = graph.find(event.elem);
    const bool data = element != nullptr && element->is_data();
    switch (event.kind) {
      case EventKind::Enter: {
        credit_event(event.elem, data);
        auto it = params.find(event.elem);
        for (const auto& [key, values] : event.values) {
          if (it == params.end()) break;
          auto param = it->second.find(key);
          if (param == it->second.end()) continue;
          for (const Scalar& value : values) credit_value(param->second, value);
        }
        break;
      }
      case EventKind::Exit: {
        for (const auto& [key, values] : event.values) {
          (void)key;
          for (const Scalar& value : values) credit_value(event.elem, value);
        }
        break;
      }
      case EventKind::Read:
      case EventKind::Write: {
        credit_event(event.elem, data);
        for (const Scalar& value : event.values.front().second) {
          credit_value(event.elem, value);
        }
        break;
      }
    }
  }

  for (auto& [symbol, activity] : metrics.per_element) {
    auto it = distinct.find(symbol);
    activity.distinct_value_count = it == distinct.end() ? 0 : it->second.size();
    if (activity.event_count >= 1) metrics.ece1 += 1;
    if (activity.event_count >= 10) metrics.ece10 += 1;
    if (activity.distinct_value_count >= 1) metrics.dce1 += 1;
    if (activity.distinct_value_count >= 10) metrics.dce10 += 1;
  }
  return metrics;
}

}  // namespace traceflow
