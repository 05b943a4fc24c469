#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace traceflow {

using Symbol = std::int64_t;

/// Malformed input files (bad JSON, bad field types, bad line syntax).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Structurally invalid data: dangling edges, duplicate symbols, shape
/// mismatches between related artifacts.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Optimization divergence, non-finite values, degenerate acceptance rates.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad command-line usage.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Collects non-fatal findings (dropped values, ignored keys, soft limits).
/// Callers that demand clean inputs assert on empty().
class Diagnostics {
 public:
  void warn(std::string message) { warnings_.push_back(std::move(message)); }
  const std::vector<std::string>& warnings() const { return warnings_; }
  bool empty() const { return warnings_.empty(); }

 private:
  std::vector<std::string> warnings_;
};

inline void warn(Diagnostics* diags, std::string message) {
  if (diags != nullptr) diags->warn(std::move(message));
}

/// FNV-1a over a byte range; used for content digests and tamper checks.
std::uint64_t fnv1a(const void* data, std::size_t size,
                    std::uint64_t seed = 0xcbf29ce484222325ull);

std::string to_hex(std::uint64_t value);

/// Digest of a file's raw bytes, hex-encoded. Throws ParseError if unreadable.
std::string file_digest(const std::string& path);

/// Exact decimal rendering of a double that round-trips to the same bits.
std::string format_double(double value);

}  // namespace traceflow
