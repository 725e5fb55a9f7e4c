#include "cqa/chart_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include <json.hpp>

namespace cqa {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 3> kChartTypeNames = {"bar", "line", "pie"};
constexpr std::array<const char*, 4> kMarkKindNames = {
    "bar", "line_point", "pie_boundary_point", "legend_preview"};
constexpr std::array<const char*, 15> kTextRoleNames = {
    "Legend",      "yAxisTitle", "ChartTitle", "xAxisTitle", "LegendPreview",
    "PlotArea",    "yAxisLabel", "xAxisLabel", "LegendLabel", "PieLabel",
    "bar",         "pie",        "pieSlice",   "line",        "dotLine"};

template <typename E, size_t N>
std::optional<E> from_name(const std::array<const char*, N>& names, std::string_view s) {
  for (size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  return std::nullopt;
}

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

}  // namespace

const char* to_string(ChartType t) { return kChartTypeNames[static_cast<int>(t)]; }
const char* to_string(MarkKind k) { return kMarkKindNames[static_cast<int>(k)]; }
const char* to_string(TextRole r) { return kTextRoleNames[static_cast<int>(r)]; }

std::optional<ChartType> chart_type_from_string(std::string_view s) {
  return from_name<ChartType>(kChartTypeNames, s);
}
std::optional<MarkKind> mark_kind_from_string(std::string_view s) {
  return from_name<MarkKind>(kMarkKindNames, s);
}
std::optional<TextRole> text_role_from_string(std::string_view s) {
  return from_name<TextRole>(kTextRoleNames, s);
}

double color_distance(const Rgb& a, const Rgb& b) {
  double dr = a.r - b.r, dg = a.g - b.g, db = a.b - b.b;
  return std::sqrt(dr * dr + dg * dg + db * db);
}

Point Mark::anchor() const {
  if (std::holds_alternative<Rect>(geometry)) return rect().center();
  return point();
}

std::vector<const TextElement*> ChartSpec::texts_with_role(TextRole role) const {
  std::vector<const TextElement*> out;
  for (const auto& t : texts)
    if (t.role == role) out.push_back(&t);
  return out;
}

std::vector<double> DataTable::numeric_values() const {
  std::vector<double> out;
  for (const auto& row : cells)
    for (const auto& cell : row)
      if (cell) out.push_back(*cell);
  return out;
}

bool label_before(const TextElement& a, const TextElement& b) {
  Point ca = a.bbox.center(), cb = b.bbox.center();
  if (ca.x != cb.x) return ca.x < cb.x;
  if (ca.y != cb.y) return ca.y < cb.y;
  return a.text < b.text;
}

// ---------------------------------------------------------------------------
// Spec JSON

namespace {

double require_number(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw SchemaError(path + "." + key, "missing field");
  const json& v = j.at(key);
  if (!v.is_number()) throw SchemaError(path + "." + key, "expected a number");
  return v.get<double>();
}

std::string require_string(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw SchemaError(path + "." + key, "missing field");
  const json& v = j.at(key);
  if (!v.is_string()) throw SchemaError(path + "." + key, "expected a string");
  return v.get<std::string>();
}

Rect parse_rect(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  return Rect{require_number(j, path, "x"), require_number(j, path, "y"),
              require_number(j, path, "w"), require_number(j, path, "h")};
}

Point parse_point(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  return Point{require_number(j, path, "x"), require_number(j, path, "y")};
}

json rect_to_json(const Rect& r) {
  return json{{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}};
}

Mark parse_mark(const json& j, const std::string& path) {
  Mark m;
  auto kind = mark_kind_from_string(require_string(j, path, "kind"));
  if (!kind) throw SchemaError(path + ".kind", "unknown mark kind");
  m.kind = *kind;

  if (!j.contains("geometry")) throw SchemaError(path + ".geometry", "missing field");
  const json& g = j.at("geometry");
  bool wants_rect = m.kind == MarkKind::bar || m.kind == MarkKind::legend_preview;
  if (wants_rect) {
    if (!g.contains("w") || !g.contains("h"))
      throw InvariantError(path + ".geometry", "kind requires a rectangle");
    m.geometry = parse_rect(g, path + ".geometry");
  } else {
    if (g.contains("w") || g.contains("h"))
      throw InvariantError(path + ".geometry", "kind requires a point");
    m.geometry = parse_point(g, path + ".geometry");
  }

  if (!j.contains("color")) throw SchemaError(path + ".color", "missing field");
  const json& c = j.at("color");
  if (!c.is_array() || c.size() != 3)
    throw SchemaError(path + ".color", "expected [r, g, b]");
  for (int i = 0; i < 3; ++i)
    if (!c[i].is_number_integer())
      throw SchemaError(path + ".color", "channels must be integers");
  m.color = Rgb{c[0].get<int>(), c[1].get<int>(), c[2].get<int>()};

  if (j.contains("series_hint")) {
    if (!j.at("series_hint").is_string())
      throw SchemaError(path + ".series_hint", "expected a string");
    m.series_hint = j.at("series_hint").get<std::string>();
  }
  return m;
}

}  // namespace

void validate(const ChartSpec& spec) {
  for (size_t i = 0; i < spec.marks.size(); ++i) {
    const Mark& m = spec.marks[i];
    std::string path = "marks[" + std::to_string(i) + "]";
    if (m.color.r < 0 || m.color.r > 255 || m.color.g < 0 || m.color.g > 255 ||
        m.color.b < 0 || m.color.b > 255)
      throw InvariantError(path + ".color", "channels must lie in [0, 255]");
    if (std::holds_alternative<Rect>(m.geometry)) {
      const Rect& r = m.rect();
      if (!finite_nonneg(r.x) || !finite_nonneg(r.y))
        throw InvariantError(path + ".geometry", "lies outside the image bounds");
      if (!finite_nonneg(r.w) || !finite_nonneg(r.h))
        throw InvariantError(path + ".geometry", "negative width or height");
    } else {
      const Point& p = m.point();
      if (!finite_nonneg(p.x) || !finite_nonneg(p.y))
        throw InvariantError(path + ".geometry", "lies outside the image bounds");
    }
  }

  if (spec.chart_type == ChartType::pie) {
    if (!spec.pie_center)
      throw InvariantError("pie_center", "pie charts require a pie_center");
    int boundary = 0;
    for (const auto& m : spec.marks)
      if (m.kind == MarkKind::pie_boundary_point) ++boundary;
    if (boundary < 2)
      throw InvariantError("marks", "pie charts require at least 2 perimeter points");
  } else {
    int numeric_y = 0;
    for (const auto& t : spec.texts)
      if (t.role == TextRole::yAxisLabel && parse_number(t.text)) ++numeric_y;
    if (numeric_y < 2)
      throw InvariantError(
          "texts", "bar/line charts require at least 2 numeric y-axis labels");
  }
}

ChartSpec parse_chart_spec(const std::string& raw_json) {
  json j;
  try {
    j = json::parse(raw_json);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("$", "expected an object");

  static const std::array<const char*, 5> known = {"chart_type", "plot_area",
                                                   "pie_center", "marks", "texts"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw SchemaError(it.key(), "unknown field");

  ChartSpec spec;
  auto type = chart_type_from_string(require_string(j, "$", "chart_type"));
  if (!type) throw SchemaError("chart_type", "unknown chart type");
  spec.chart_type = *type;
  if (!j.contains("plot_area")) throw SchemaError("plot_area", "missing field");
  spec.plot_area = parse_rect(j.at("plot_area"), "plot_area");
  if (j.contains("pie_center"))
    spec.pie_center = parse_point(j.at("pie_center"), "pie_center");

  if (!j.contains("marks") || !j.at("marks").is_array())
    throw SchemaError("marks", "expected an array");
  for (size_t i = 0; i < j.at("marks").size(); ++i)
    spec.marks.push_back(parse_mark(j.at("marks")[i], "marks[" + std::to_string(i) + "]"));

  if (!j.contains("texts") || !j.at("texts").is_array())
    throw SchemaError("texts", "expected an array");
  for (size_t i = 0; i < j.at("texts").size(); ++i) {
    const json& t = j.at("texts")[i];
    std::string path = "texts[" + std::to_string(i) + "]";
    TextElement el;
    auto role = text_role_from_string(require_string(t, path, "role"));
    if (!role) throw SchemaError(path + ".role", "unknown role");
    el.role = *role;
    el.text = require_string(t, path, "text");
    if (!t.contains("bbox")) throw SchemaError(path + ".bbox", "missing field");
    el.bbox = parse_rect(t.at("bbox"), path + ".bbox");
    spec.texts.push_back(std::move(el));
  }

  validate(spec);
  return spec;
}

std::string serialize_chart_spec(const ChartSpec& spec, int indent) {
  json j;
  j["chart_type"] = to_string(spec.chart_type);
  j["plot_area"] = rect_to_json(spec.plot_area);
  if (spec.pie_center)
    j["pie_center"] = json{{"x", spec.pie_center->x}, {"y", spec.pie_center->y}};
  j["marks"] = json::array();
  for (const auto& m : spec.marks) {
    json mj;
    mj["kind"] = to_string(m.kind);
    if (std::holds_alternative<Rect>(m.geometry))
      mj["geometry"] = rect_to_json(m.rect());
    else
      mj["geometry"] = json{{"x", m.point().x}, {"y", m.point().y}};
    mj["color"] = json::array({m.color.r, m.color.g, m.color.b});
    if (m.series_hint) mj["series_hint"] = *m.series_hint;
    j["marks"].push_back(std::move(mj));
  }
  j["texts"] = json::array();
  for (const auto& t : spec.texts)
    j["texts"].push_back(json{
        {"role", to_string(t.role)}, {"text", t.text}, {"bbox", rect_to_json(t.bbox)}});
  return j.dump(indent);
}

// ---------------------------------------------------------------------------
// Numeric token lexing

std::optional<double> parse_number(std::string_view token) {
  size_t i = 0, n = token.size();
  auto skip_ws = [&] {
    while (i < n && (token[i] == ' ' || token[i] == '\t')) ++i;
  };
  skip_ws();

  // Currency prefixes, including the common multi-byte ones.
  static const std::array<std::string_view, 4> currency = {"$", "£", "€", "¥"};
  bool stripped = true;
  while (stripped) {
    stripped = false;
    for (auto c : currency) {
      if (token.substr(i).starts_with(c)) {
        i += c.size();
        stripped = true;
      }
    }
    if (stripped) skip_ws();
  }

  double sign = 1.0;
  if (i < n && (token[i] == '-' || token[i] == '+')) {
    if (token[i] == '-') sign = -1.0;
    ++i;
    skip_ws();
  } else if (token.substr(i).starts_with("−")) {  // typographic minus
    sign = -1.0;
    i += std::string_view("−").size();
    skip_ws();
  }

  // Numeric core: digits with ',' group separators, optional decimal point,
  // optional exponent.
  std::string core;
  bool seen_digit = false, seen_dot = false;
  while (i < n) {
    char ch = token[i];
    if (ch >= '0' && ch <= '9') {
      core.push_back(ch);
      seen_digit = true;
      ++i;
    } else if (ch == ',' && seen_digit && i + 1 < n && token[i + 1] >= '0' &&
               token[i + 1] <= '9') {
      ++i;  // thousands separator
    } else if (ch == '.' && !seen_dot) {
      core.push_back('.');
      seen_dot = true;
      ++i;
    } else {
      break;
    }
  }
  if (!seen_digit) return std::nullopt;

  if (i < n && (token[i] == 'e' || token[i] == 'E')) {
    size_t j = i + 1;
    if (j < n && (token[j] == '+' || token[j] == '-')) ++j;
    size_t exp_start = j;
    while (j < n && token[j] >= '0' && token[j] <= '9') ++j;
    if (j > exp_start) {  // a real exponent, not a stray letter
      core.push_back('e');
      core.append(token.substr(i + 1, j - i - 1));
      i = j;
    }
  }

  double value = 0.0;
  auto [ptr, ec] = std::from_chars(core.data(), core.data() + core.size(), value);
  if (ec != std::errc() || ptr != core.data() + core.size()) return std::nullopt;

  // Magnitude suffix, only when it ends the word.
  if (i < n) {
    char s = token[i];
    bool word_end = i + 1 >= n || !std::isalnum(static_cast<unsigned char>(token[i + 1]));
    if (word_end) {
      if (s == 'K' || s == 'k') value *= 1e3, ++i;
      else if (s == 'M' || s == 'm') value *= 1e6, ++i;
      else if (s == 'B' || s == 'b') value *= 1e9, ++i;
    }
  }
  // Trailing unit text ("%", "percent", "dollars", ...) is ignored.
  return sign * value;
}

std::string format_number(double v) {
  std::array<char, 64> buf;
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

// ---------------------------------------------------------------------------
// Flattening

std::vector<FlattenedToken> flatten_table(const DataTable& t) {
  std::vector<FlattenedToken> out;
  for (int c = 0; c < t.cols(); ++c)
    out.push_back({t.col_headers[c], 0, c + 1, std::nullopt});
  for (int r = 0; r < t.rows(); ++r) {
    out.push_back({t.row_labels[r], r + 1, 0, std::nullopt});
    for (int c = 0; c < t.cols(); ++c)
      if (t.cells[r][c])
        out.push_back({format_number(*t.cells[r][c]), r + 1, c + 1, t.cells[r][c]});
  }
  return out;
}

std::vector<std::vector<std::optional<double>>> regroup_cells(
    const std::vector<FlattenedToken>& tokens, int rows, int cols) {
  std::vector<std::vector<std::optional<double>>> grid(
      rows, std::vector<std::optional<double>>(cols));
  for (const auto& tok : tokens)
    if (tok.is_cell()) grid[tok.row - 1][tok.col - 1] = tok.value;
  return grid;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

std::string table_to_csv(const DataTable& t) {
  std::string out;
  for (int c = 0; c < t.cols(); ++c) {
    out += ",";
    out += csv_escape(t.col_headers[c]);
  }
  out += "\n";
  for (int r = 0; r < t.rows(); ++r) {
    out += csv_escape(t.row_labels[r]);
    for (int c = 0; c < t.cols(); ++c) {
      out += ",";
      if (t.cells[r][c]) out += format_number(*t.cells[r][c]);
    }
    out += "\n";
  }
  return out;
}

DataTable table_from_csv(const std::string& csv) {
  DataTable t;
  std::istringstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.eof()) break;
    auto fields = split_csv_line(line);
    if (header) {
      for (size_t i = 1; i < fields.size(); ++i) t.col_headers.push_back(fields[i]);
      header = false;
      continue;
    }
    if (fields.empty()) continue;
    t.row_labels.push_back(fields[0]);
    std::vector<std::optional<double>> row;
    for (size_t i = 1; i < fields.size() || row.size() < t.col_headers.size(); ++i) {
      if (i < fields.size() && !fields[i].empty()) {
        double v = 0.0;
        auto [ptr, ec] =
            std::from_chars(fields[i].data(), fields[i].data() + fields[i].size(), v);
        if (ec != std::errc() || ptr != fields[i].data() + fields[i].size())
          throw SchemaError("csv", "unparseable cell '" + fields[i] + "'");
        row.emplace_back(v);
      } else {
        row.emplace_back(std::nullopt);
      }
    }
    row.resize(t.col_headers.size());
    t.cells.push_back(std::move(row));
  }
  return t;
}

}  // namespace cqa
