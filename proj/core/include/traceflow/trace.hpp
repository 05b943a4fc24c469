#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "traceflow/structure.hpp"

namespace traceflow {

/// A runtime scalar: IEEE-754 double or UTF-8 text.
using Scalar = std::variant<double, std::string>;

bool scalar_is_number(const Scalar& value);
double scalar_number(const Scalar& value);
const std::string& scalar_text(const Scalar& value);
std::string scalar_to_string(const Scalar& value);

enum class EventKind { Enter, Exit, Read, Write };

struct TraceEvent {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::Enter;
  Symbol elem = 0;
  Symbol caller = 0;
  std::uint64_t inv = 0;
  /// Column name to one-or-more values; repeated entries model list values.
  std::vector<std::pair<std::string, std::vector<Scalar>>> values;
};

/// Line-by-line reader over a JSON Lines trace file. Rejects seq regressions
/// and malformed lines with the offending line number.
class TraceReader {
 public:
  explicit TraceReader(const std::string& path);
  ~TraceReader();
  TraceReader(TraceReader&&) noexcept;
  TraceReader& operator=(TraceReader&&) noexcept;

  std::optional<TraceEvent> next();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::vector<TraceEvent> read_trace(const std::string& path);

/// Merge already-ordered per-thread streams into one stream ordered by seq.
std::vector<TraceEvent> merge_traces(std::vector<std::vector<TraceEvent>> streams);

/// One completed invocation with its correlated cells. Lists have already
/// been exploded, so every cell is a single scalar.
struct InvocationRecord {
  Symbol node = 0;
  std::uint64_t inv = 0;
  Symbol caller = 0;
  std::map<std::string, Scalar> row;
};

struct CorrelateOptions {
  bool inv_columns = false;
};

/// Replays the event stream against the derived model specs. Property
/// accesses attach to the innermost open invocation whose executable has a
/// matching access edge; values for undeclared columns are dropped with a
/// warning; unfinished invocations are dropped.
std::vector<InvocationRecord> correlate_invocations(
    const std::vector<TraceEvent>& events, const ProgramGraph& graph,
    const std::vector<ModelSpec>& specs, const CorrelateOptions& options = {},
    Diagnostics* diags = nullptr);

struct ElementActivity {
  std::uint64_t event_count = 0;
  std::uint64_t distinct_value_count = 0;
};

/// Activity tallies per code element. An "event" is an emission: an
/// invocation (counted at Enter; the Exit completes it) or a property
/// access. Parameter elements receive their values from Enter payloads but
/// no events of their own; executables emit their return values.
struct ActivityMetrics {
  std::map<Symbol, ElementActivity> per_element;
  std::uint64_t ece1 = 0;
  std::uint64_t ece10 = 0;
  std::uint64_t dce1 = 0;
  std::uint64_t dce10 = 0;
  std::uint64_t total_events = 0;       // emissions attributed to elements
  std::uint64_t total_data_events = 0;  // emissions on Number/Text elements
};

ActivityMetrics compute_activity_metrics(const std::vector<TraceEvent>& events,
                                         const ModelingUniverse& universe,
                                         const ProgramGraph& graph);

}  // namespace traceflow
