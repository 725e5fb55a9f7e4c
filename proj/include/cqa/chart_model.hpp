#pragma once
#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cqa/geometry.hpp"

namespace cqa {

enum class ChartType { bar, line, pie };

enum class MarkKind { bar, line_point, pie_boundary_point, legend_preview };

// The 15 text/mark object classes a chart element detector distinguishes.
enum class TextRole {
  Legend,
  yAxisTitle,
  ChartTitle,
  xAxisTitle,
  LegendPreview,
  PlotArea,
  yAxisLabel,
  xAxisLabel,
  LegendLabel,
  PieLabel,
  bar,
  pie,
  pieSlice,
  line,
  dotLine,
};

const char* to_string(ChartType t);
const char* to_string(MarkKind k);
const char* to_string(TextRole r);
std::optional<ChartType> chart_type_from_string(std::string_view s);
std::optional<MarkKind> mark_kind_from_string(std::string_view s);
std::optional<TextRole> text_role_from_string(std::string_view s);

struct Rgb {
  int r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

double color_distance(const Rgb& a, const Rgb& b);

// A visual element carrying data or legend information. Bars and legend
// previews are rectangles; line vertices and pie perimeter points are points.
struct Mark {
  MarkKind kind = MarkKind::bar;
  std::variant<Rect, Point> geometry;
  Rgb color;
  std::optional<std::string> series_hint;  // generator ground truth only

  const Rect& rect() const { return std::get<Rect>(geometry); }
  const Point& point() const { return std::get<Point>(geometry); }
  Point anchor() const;  // rect center or the point itself
  bool operator==(const Mark&) const = default;
};

struct TextElement {
  TextRole role = TextRole::xAxisLabel;
  std::string text;
  Rect bbox;
  bool operator==(const TextElement&) const = default;
};

// Structured description of one chart: everything a keypoint/text detector
// would emit, with raster decoding already done.
struct ChartSpec {
  ChartType chart_type = ChartType::bar;
  Rect plot_area;
  std::vector<Mark> marks;
  std::vector<TextElement> texts;
  std::optional<Point> pie_center;

  std::vector<const TextElement*> texts_with_role(TextRole role) const;
  bool operator==(const ChartSpec&) const = default;
};

// Fully-structured table: numeric cells plus their row/column text labels.
// Cells may be null where a series has no mark for a category.
struct DataTable {
  std::vector<std::string> col_headers;
  std::vector<std::string> row_labels;
  std::vector<std::vector<std::optional<double>>> cells;  // rows x cols

  int rows() const { return static_cast<int>(row_labels.size()); }
  int cols() const { return static_cast<int>(col_headers.size()); }
  // A table is "simple" when it has exactly one data column.
  bool is_simple() const { return cols() == 1; }
  const std::optional<double>& at(int r, int c) const { return cells[r][c]; }
  std::vector<double> numeric_values() const;  // non-null cells, row-major
  bool operator==(const DataTable&) const = default;
};

struct SchemaError : std::runtime_error {
  SchemaError(std::string path_in, const std::string& what_in)
      : std::runtime_error(path_in + ": " + what_in), path(std::move(path_in)) {}
  std::string path;
};

struct InvariantError : std::runtime_error {
  InvariantError(std::string path_in, const std::string& what_in)
      : std::runtime_error(path_in + ": " + what_in), path(std::move(path_in)) {}
  std::string path;
};

// Parses and validates a chart spec from its JSON form. Throws SchemaError on
// malformed structure and InvariantError on well-formed but invalid specs;
// both name the offending path.
ChartSpec parse_chart_spec(const std::string& raw_json);
std::string serialize_chart_spec(const ChartSpec& spec, int indent = -1);
void validate(const ChartSpec& spec);  // InvariantError on violation

// Lexes a numeric token as it appears in chart text: currency prefixes,
// thousands separators, decimal point, E notation, K/M/B suffixes, and
// trailing unit words ("%", "percent") are handled. Returns nullopt when the
// token has no numeric core.
std::optional<double> parse_number(std::string_view token);

// Shortest decimal form that round-trips through a double.
std::string format_number(double v);

struct FlattenedToken {
  std::string text;
  int row = 0;  // 0 = header row
  int col = 0;  // 0 = row-label column
  std::optional<double> value;  // set for cell tokens only

  bool is_cell() const { return value.has_value(); }
  bool operator==(const FlattenedToken&) const = default;
};

// Row-major serialization of a table. Headers carry row 0, row labels carry
// column 0, and cell (i, j) of the grid maps to coordinate (i+1, j+1). Null
// cells emit no token. The coordinates invert the mapping for cell tokens.
std::vector<FlattenedToken> flatten_table(const DataTable& t);

// Rebuilds the cell grid of a (rows x cols) table from flattened cell tokens.
std::vector<std::vector<std::optional<double>>> regroup_cells(
    const std::vector<FlattenedToken>& tokens, int rows, int cols);

// DataTable CSV: first row = column headers with an empty first field, first
// column = row labels, '.' decimal separator, empty field = null cell.
std::string table_to_csv(const DataTable& t);
DataTable table_from_csv(const std::string& csv);

// Left-to-right reading order used wherever labels become table rows:
// by center x, then center y, then text.
bool label_before(const TextElement& a, const TextElement& b);

}  // namespace cqa
