#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "traceflow/common.hpp"

namespace traceflow {

enum class ElementKind { Type, Property, Executable, Parameter };
enum class DataType { Number, Text, Reference, Unknown, Void };

const char* to_string(ElementKind kind);
const char* to_string(DataType type);
ElementKind element_kind_from_string(const std::string& text);
DataType data_type_from_string(const std::string& text);

struct CodeElement {
  Symbol symbol = 0;
  std::string name;
  ElementKind kind = ElementKind::Type;
  DataType data_type = DataType::Unknown;
  std::optional<Symbol> owner;
  /// Executables only: name used for the return column ("ret" if empty).
  std::string ret_name;

  bool is_data() const {
    return data_type == DataType::Number || data_type == DataType::Text;
  }
  /// Last dot-separated segment of the qualified name.
  std::string simple_name() const;
};

struct CallEdge {
  Symbol caller = 0;
  Symbol callee = 0;
};

enum class AccessMode { Read, Write };

struct AccessEdge {
  Symbol executable = 0;
  Symbol property = 0;
  AccessMode mode = AccessMode::Read;
};

struct DataflowLink {
  Symbol from_node = 0;
  std::string from_column;
  Symbol to_node = 0;
  std::string to_column;
};

/// Static program structure as loaded from a structure file. Immutable after
/// load; safe to share across threads.
struct ProgramGraph {
  std::vector<CodeElement> elements;
  std::vector<CallEdge> call_edges;
  std::vector<AccessEdge> access_edges;
  std::map<Symbol, std::vector<Symbol>> param_lists;
  std::vector<DataflowLink> dataflow_links;

  const CodeElement* find(Symbol symbol) const;
  const CodeElement& at(Symbol symbol) const;
  bool contains(Symbol symbol) const { return find(symbol) != nullptr; }

  std::vector<Symbol> executables() const;
  /// All executable symbols, sorted; the value range of the conditional.
  std::vector<Symbol> project_caller_symbols() const;
};

struct ModelingUniverse {
  std::set<Symbol> included;
  std::string selector;

  bool contains(Symbol symbol) const { return included.count(symbol) > 0; }
};

enum class ColumnRole { Pa, Ret, R, W, Inv };

const char* to_string(ColumnRole role);
ColumnRole column_role_from_string(const std::string& text);

struct FeatureColumnSpec {
  std::string id;
  ColumnRole role = ColumnRole::Pa;
  Symbol source_symbol = 0;
  DataType data_type = DataType::Number;
};

/// Model layout for one executable node: its data columns plus the
/// caller-symbol conditional.
struct ModelSpec {
  Symbol node = 0;
  std::string node_name;
  std::vector<FeatureColumnSpec> columns;
  /// Value range of the conditional: every executable symbol in the project
  /// (callers outside the universe included), sorted.
  std::vector<Symbol> caller_symbols;
  bool empty = false;

  const FeatureColumnSpec* find_column(const std::string& id) const;
};

struct DeriveOptions {
  /// When set, each spec gains an "inv" Text column holding callee symbols,
  /// one row contribution per call.
  bool inv_columns = false;
};

/// Parses and validates a structure file. Symbols are taken verbatim.
/// Unknown JSON keys are reported through diags and ignored.
ProgramGraph load_structure(const std::string& path,
                            Diagnostics* diags = nullptr);

ProgramGraph parse_structure_text(const std::string& text,
                                  Diagnostics* diags = nullptr);

void validate_graph(const ProgramGraph& graph);

/// Selector grammar: empty string selects everything; otherwise
/// semicolon-separated clauses ANDed together, each "field=v1|v2" with
/// field in {kind, dataType, name} (name matches a prefix).
ModelingUniverse select_universe(const ProgramGraph& graph,
                                 const std::string& selector = "");

/// One spec per executable in the universe. Property reads/writes fold into
/// the accessing executable's columns; Reference/Unknown sources never
/// produce a column. Deterministic: column order is Pa (declared order),
/// R, W (property symbol order), Inv, Ret.
std::vector<ModelSpec> derive_model_specs(const ModelingUniverse& universe,
                                          const ProgramGraph& graph,
                                          const DeriveOptions& options = {});

}  // namespace traceflow
