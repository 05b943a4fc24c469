#include "traceflow/structure.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace traceflow {

using nlohmann::json;

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = seed;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

std::string to_hex(std::uint64_t value) {
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016" PRIx64, value);
  return buffer;
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path);
  std::ostringstream contents;
  contents << in.rdbuf();
  const std::string text = contents.str();
  return to_hex(fnv1a(text.data(), text.size()));
}

std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

const char* to_string(ElementKind kind) {
  switch (kind) {
    case ElementKind::Type: return "Type";
    case ElementKind::Property: return "Property";
    case ElementKind::Executable: return "Executable";
    case ElementKind::Parameter: return "Parameter";
  }
  return "?";
}

const char* to_string(DataType type) {
  switch (type) {
    case DataType::Number: return "Number";
    case DataType::Text: return "Text";
    case DataType::Reference: return "Reference";
    case DataType::Unknown: return "Unknown";
    case DataType::Void: return "Void";
  }
  return "?";
}

ElementKind element_kind_from_string(const std::string& text) {
  if (text == "Type") return ElementKind::Type;
  if (text == "Property") return ElementKind::Property;
  if (text == "Executable") return ElementKind::Executable;
  if (text == "Parameter") return ElementKind::Parameter;
  throw ParseError("unknown element kind: " + text);
}

DataType data_type_from_string(const std::string& text) {
  if (text == "Number") return DataType::Number;
  if (text == "Text") return DataType::Text;
  if (text == "Reference") return DataType::Reference;
  if (text == "Unknown") return DataType::Unknown;
  if (text == "Void") return DataType::Void;
  throw ParseError("unknown data type: " + text);
}

const char* to_string(ColumnRole role) {
  switch (role) {
    case ColumnRole::Pa: return "Pa";
    case ColumnRole::Ret: return "Ret";
    case ColumnRole::R: return "R";
    case ColumnRole::W: return "W";
    case ColumnRole::Inv: return "Inv";
  }
  return "?";
}

ColumnRole column_role_from_string(const std::string& text) {
  if (text == "Pa") return ColumnRole::Pa;
  if (text == "Ret") return ColumnRole::Ret;
  if (text == "R") return ColumnRole::R;
  if (text == "W") return ColumnRole::W;
  if (text == "Inv") return ColumnRole::Inv;
  throw ParseError("unknown column role: " + text);
}

std::string CodeElement::simple_name() const {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(dot + 1);
}

const CodeElement* ProgramGraph::find(Symbol symbol) const {
  for (const auto& element : elements) {
    if (element.symbol == symbol) return &element;
  }
  return nullptr;
}

const CodeElement& ProgramGraph::at(Symbol symbol) const {
  const CodeElement* element = find(symbol);
  if (element == nullptr) {
    throw ValidationError("unknown symbol " + std::to_string(symbol));
  }
  return *element;
}

std::vector<Symbol> ProgramGraph::executables() const {
  std::vector<Symbol> result;
  for (const auto& element : elements) {
    if (element.kind == ElementKind::Executable) result.push_back(element.symbol);
  }
  std::sort(result.begin(), result.end());
  return result;
}

std::vector<Symbol> ProgramGraph::project_caller_symbols() const {
  return executables();
}

namespace {

void check_known_keys(const json& object,
                      std::initializer_list<const char*> known,
                      const std::string& where, Diagnostics* diags) {
  for (const auto& item : object.items()) {
    bool found = false;
    for (const char* key : known) {
      if (item.key() == key) {
        found = true;
        break;
      }
    }
    if (!found) {
      warn(diags, "ignoring unknown key '" + item.key() + "' in " + where);
    }
  }
}

Symbol require_symbol(const json& value, const std::string& where) {
  if (!value.is_number_integer()) {
    throw ParseError("expected integer symbol in " + where);
  }
  return value.get<Symbol>();
}

}  // namespace

ProgramGraph parse_structure_text(const std::string& text,
                                  Diagnostics* diags) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& err) {
    throw ParseError(std::string("structure file is not valid JSON: ") +
                     err.what());
  }
  if (!doc.is_object()) throw ParseError("structure file root must be an object");
  check_known_keys(doc,
                   {"elements", "callEdges", "accessEdges", "paramLists",
                    "dataflowLinks"},
                   "structure root", diags);

  ProgramGraph graph;
  for (const auto& entry : doc.value("elements", json::array())) {
    check_known_keys(entry,
                     {"symbol", "name", "kind", "dataType", "owner", "retName"},
                     "element", diags);
    CodeElement element;
    element.symbol = require_symbol(entry.at("symbol"), "element");
    if (element.symbol < 0) {
      throw ValidationError("negative symbol " + std::to_string(element.symbol));
    }
    element.name = entry.at("name").get<std::string>();
    element.kind = element_kind_from_string(entry.at("kind").get<std::string>());
    element.data_type =
        data_type_from_string(entry.at("dataType").get<std::string>());
    if (entry.contains("owner")) {
      element.owner = require_symbol(entry.at("owner"), "element owner");
    }
    element.ret_name = entry.value("retName", "");
    graph.elements.push_back(std::move(element));
  }

  for (const auto& entry : doc.value("callEdges", json::array())) {
    check_known_keys(entry, {"caller", "callee"}, "callEdge", diags);
    graph.call_edges.push_back(
        {require_symbol(entry.at("caller"), "callEdge"),
         require_symbol(entry.at("callee"), "callEdge")});
  }

  for (const auto& entry : doc.value("accessEdges", json::array())) {
    check_known_keys(entry, {"executable", "property", "mode"}, "accessEdge",
                     diags);
    const std::string mode = entry.at("mode").get<std::string>();
    if (mode != "R" && mode != "W") {
      throw ParseError("accessEdge mode must be R or W, got " + mode);
    }
    graph.access_edges.push_back(
        {require_symbol(entry.at("executable"), "accessEdge"),
         require_symbol(entry.at("property"), "accessEdge"),
         mode == "R" ? AccessMode::Read : AccessMode::Write});
  }

  for (const auto& entry : doc.value("paramLists", json::object()).items()) {
    Symbol executable = 0;
    try {
      executable = std::stoll(entry.key());
    } catch (const std::exception&) {
      throw ParseError("paramLists key is not a symbol: " + entry.key());
    }
    std::vector<Symbol> params;
    for (const auto& param : entry.value()) {
      params.push_back(require_symbol(param, "paramLists"));
    }
    graph.param_lists[executable] = std::move(params);
  }

  for (const auto& entry : doc.value("dataflowLinks", json::array())) {
    check_known_keys(entry, {"fromNode", "fromColumn", "toNode", "toColumn"},
                     "dataflowLink", diags);
    DataflowLink link;
    link.from_node = require_symbol(entry.at("fromNode"), "dataflowLink");
    link.from_column = entry.at("fromColumn").get<std::string>();
    link.to_node = require_symbol(entry.at("toNode"), "dataflowLink");
    link.to_column = entry.at("toColumn").get<std::string>();
    graph.dataflow_links.push_back(std::move(link));
  }

  validate_graph(graph);
  return graph;
}

ProgramGraph load_structure(const std::string& path, Diagnostics* diags) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open structure file: " + path);
  std::ostringstream contents;
  contents << in.rdbuf();
  return parse_structure_text(contents.str(), diags);
}

void validate_graph(const ProgramGraph& graph) {
  std::unordered_map<Symbol, const CodeElement*> by_symbol;
  for (const auto& element : graph.elements) {
    if (!by_symbol.emplace(element.symbol, &element).second) {
      throw ValidationError("duplicate symbol " +
                            std::to_string(element.symbol) + " (" +
                            element.name + ")");
    }
  }
  auto resolve = [&](Symbol symbol, const char* where) -> const CodeElement& {
    auto it = by_symbol.find(symbol);
    if (it == by_symbol.end()) {
      throw ValidationError(std::string(where) + " references unknown symbol " +
                            std::to_string(symbol));
    }
    return *it->second;
  };

  for (const auto& element : graph.elements) {
    if ((element.kind == ElementKind::Property ||
         element.kind == ElementKind::Parameter) &&
        !element.owner.has_value()) {
      throw ValidationError(to_string(element.kind) + std::string(" ") +
                            element.name + " has no owner");
    }
    if (element.owner.has_value()) {
      resolve(*element.owner, "owner");
    }
    if (element.data_type == DataType::Void &&
        element.kind != ElementKind::Executable) {
      throw ValidationError("dataType Void on non-executable " + element.name);
    }
  }

  for (const auto& edge : graph.call_edges) {
    if (resolve(edge.caller, "callEdge").kind != ElementKind::Executable ||
        resolve(edge.callee, "callEdge").kind != ElementKind::Executable) {
      throw ValidationError("callEdge endpoints must be executables (" +
                            std::to_string(edge.caller) + " -> " +
                            std::to_string(edge.callee) + ")");
    }
  }
  for (const auto& edge : graph.access_edges) {
    if (resolve(edge.executable, "accessEdge").kind !=
        ElementKind::Executable) {
      throw ValidationError("accessEdge executable side is not an executable: " +
                            std::to_string(edge.executable));
    }
    if (resolve(edge.property, "accessEdge").kind != ElementKind::Property) {
      throw ValidationError("accessEdge property side is not a property: " +
                            std::to_string(edge.property));
    }
  }
  for (const auto& [executable, params] : graph.param_lists) {
    if (resolve(executable, "paramLists").kind != ElementKind::Executable) {
      throw ValidationError("paramLists key is not an executable: " +
                            std::to_string(executable));
    }
    std::unordered_set<Symbol> seen;
    for (Symbol param : params) {
      if (resolve(param, "paramLists").kind != ElementKind::Parameter) {
        throw ValidationError("paramLists entry is not a parameter: " +
                              std::to_string(param));
      }
      if (!seen.insert(param).second) {
        throw ValidationError("duplicate parameter " + std::to_string(param) +
                              " in paramLists of " +
                              std::to_string(executable));
      }
    }
  }
  for (const auto& link : graph.dataflow_links) {
    resolve(link.from_node, "dataflowLink");
    resolve(link.to_node, "dataflowLink");
  }
}

namespace {

struct SelectorClause {
  std::string field;
  std::vector<std::string> values;
};

std::vector<SelectorClause> parse_selector(const std::string& selector) {
  std::vector<SelectorClause> clauses;
  std::stringstream stream(selector);
  std::string part;
  while (std::getline(stream, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      throw ParseError("selector clause missing '=': " + part);
    }
    SelectorClause clause;
    clause.field = part.substr(0, eq);
    std::stringstream values(part.substr(eq + 1));
    std::string value;
    while (std::getline(values, value, '|')) clause.values.push_back(value);
    if (clause.field != "kind" && clause.field != "dataType" &&
        clause.field != "name") {
      throw ParseError("unknown selector field: " + clause.field);
    }
    clauses.push_back(std::move(clause));
  }
  return clauses;
}

bool matches(const CodeElement& element,
             const std::vector<SelectorClause>& clauses) {
  for (const auto& clause : clauses) {
    bool any = false;
    for (const auto& value : clause.values) {
      if (clause.field == "kind") {
        any = any || value == to_string(element.kind);
      } else if (clause.field == "dataType") {
        any = any || value == to_string(element.data_type);
      } else {
        any = any || element.name.rfind(value, 0) == 0;
      }
    }
    if (!any) return false;
  }
  return true;
}

}  // namespace

ModelingUniverse select_universe(const ProgramGraph& graph,
                                 const std::string& selector) {
  const auto clauses = parse_selector(selector);
  ModelingUniverse universe;
  universe.selector = selector;
  for (const auto& element : graph.elements) {
    if (matches(element, clauses)) universe.included.insert(element.symbol);
  }
  // Close over owners so a selected property always has a known type.
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& element : graph.elements) {
      if (universe.contains(element.symbol) && element.owner.has_value() &&
          !universe.contains(*element.owner)) {
        universe.included.insert(*element.owner);
        changed = true;
      }
    }
  }
  return universe;
}

const FeatureColumnSpec* ModelSpec::find_column(const std::string& id) const {
  for (const auto& column : columns) {
    if (column.id == id) return &column;
  }
  return nullptr;
}

std::vector<ModelSpec> derive_model_specs(const ModelingUniverse& universe,
                                          const ProgramGraph& graph,
                                          const DeriveOptions& options) {
  if (universe.included.empty()) {
    throw ValidationError("modeling universe is empty");
  }
  const std::vector<Symbol> callers = graph.project_caller_symbols();

  std::vector<ModelSpec> specs;
  for (Symbol symbol : graph.executables()) {
    if (!universe.contains(symbol)) continue;
    const CodeElement& executable = graph.at(symbol);
    ModelSpec spec;
    spec.node = symbol;
    spec.node_name = executable.name;
    spec.caller_symbols = callers;

    auto add_column = [&](std::string id, ColumnRole role, Symbol source,
                          DataType type) {
      if (type != DataType::Number && type != DataType::Text) return;
      if (spec.find_column(id) != nullptr) {
        throw ValidationError("duplicate column id '" + id + "' on node " +
                              spec.node_name);
      }
      spec.columns.push_back({std::move(id), role, source, type});
    };

    auto params = graph.param_lists.find(symbol);
    if (params != graph.param_lists.end()) {
      for (Symbol param : params->second) {
        const CodeElement& element = graph.at(param);
        add_column(element.simple_name(), ColumnRole::Pa, param,
                   element.data_type);
      }
    }

    std::vector<const AccessEdge*> reads;
    std::vector<const AccessEdge*> writes;
    for (const auto& edge : graph.access_edges) {
      if (edge.executable != symbol) continue;
      if (!universe.contains(edge.property)) continue;
      (edge.mode == AccessMode::Read ? reads : writes).push_back(&edge);
    }
    auto by_property = [&](const AccessEdge* a, const AccessEdge* b) {
      return a->property < b->property;
    };
    std::sort(reads.begin(), reads.end(), by_property);
    std::sort(writes.begin(), writes.end(), by_property);
    for (const AccessEdge* edge : reads) {
      const CodeElement& property = graph.at(edge->property);
      add_column(property.simple_name(), ColumnRole::R, edge->property,
                 property.data_type);
    }
    for (const AccessEdge* edge : writes) {
      const CodeElement& property = graph.at(edge->property);
      add_column(property.simple_name() + ".w", ColumnRole::W, edge->property,
                 property.data_type);
    }

    if (options.inv_columns) {
      bool calls_anyone = false;
      for (const auto& edge : graph.call_edges) {
        calls_anyone = calls_anyone || edge.caller == symbol;
      }
      if (calls_anyone) {
        add_column("inv", ColumnRole::Inv, symbol, DataType::Text);
      }
    }

    add_column(executable.ret_name.empty() ? "ret" : executable.ret_name,
               ColumnRole::Ret, symbol, executable.data_type);

    spec.empty = spec.columns.empty();
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace traceflow
