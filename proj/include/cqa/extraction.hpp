#pragma once
#include <stdexcept>
#include <string>
#include <vector>

#include "cqa/chart_model.hpp"

namespace cqa {

enum class ScaleOrientation { increasing_up, increasing_down };

// Pixel-y -> data-value mapping fitted from axis labels. Screen y grows
// downward, so increasing_up means negative slope.
struct LinearScale {
  double slope = 0.0;      // value per pixel
  double intercept = 0.0;  // value at pixel y = 0
  ScaleOrientation orientation = ScaleOrientation::increasing_up;

  double value_at(double pixel_y) const { return slope * pixel_y + intercept; }
};

struct ScaleFit {
  LinearScale scale;
  bool monotone = true;  // label values ordered consistently with positions
  double max_rel_residual = 0.0;
};

enum class AssociationMethod { color_match, alignment, proximity };
const char* to_string(AssociationMethod m);

struct SeriesAssignment {
  struct Entry {
    int mark_index = -1;
    int row = -1;
    int col = -1;
    AssociationMethod method = AssociationMethod::color_match;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> assigned;
  std::vector<int> unassigned;  // mark indices with no (row, col)
};

struct Diagnostic {
  std::string event;
  std::string detail;
};

struct ExtractionError : std::runtime_error {
  enum class Kind {
    InsufficientLabels,
    DegenerateGeometry,
    DegenerateSlice,
    NoLabels,
    DualAxis,
  };
  ExtractionError(Kind k, const std::string& what_in)
      : std::runtime_error(what_in), kind(k) {}
  Kind kind;
};

// Least-squares fit of label value against bbox-center pixel y. Labels whose
// text does not lex numerically are skipped; fewer than 2 usable labels is an
// error, as are coincident centers or a zero slope. A non-monotone label
// sequence is flagged but still fitted.
ScaleFit estimate_axis_scale(const std::vector<const TextElement*>& labels);

// Value of a bar relative to the baseline pixel row, read at the bar edge
// farther from the baseline so bars hanging below it come out negative.
double bar_value(const Mark& bar, double baseline_y, const LinearScale& scale);

// One value per vertex, ordered by pixel x.
std::vector<double> line_values(std::vector<const Mark*> points,
                                const LinearScale& scale);

struct PieSlice {
  double start_deg = 0.0;  // clockwise from 12 o'clock
  double sweep_deg = 0.0;
  double percentage = 0.0;
  Point mid_point;          // perimeter point at the slice's mid angle
  int start_mark_index = 0; // index into the boundary list passed in
};

// Slices between consecutive boundary points, sorted clockwise from
// 12 o'clock. Throws DegenerateSlice when two boundary points sit within
// 0.1 degrees of each other.
std::vector<PieSlice> pie_slices(const std::vector<const Mark*>& boundary,
                                 Point center);

// Percentages of the slices in clockwise order; they sum to exactly 100.
std::vector<double> pie_values(const std::vector<const Mark*>& boundary,
                               Point center);

// Closest-label association: one label index per anchor. Bar/line charts
// measure horizontal center distance; pie labels need the full Euclidean
// distance (mirrored slices share an x coordinate). Ties go to the label
// earlier in reading order.
std::vector<int> associate_categories(const std::vector<Point>& anchors,
                                      const std::vector<const TextElement*>& labels,
                                      bool euclidean);

struct SeriesMatch {
  int col = -1;  // legend-order column, -1 = unassigned
  AssociationMethod method = AssociationMethod::color_match;
};

// Assigns each data mark to a legend-order column. Rules in order: nearest
// preview color within threshold 30; bbox alignment within 5 px; nearest
// line for line charts without previews. No legend labels at all collapses
// to a single implicit column.
std::vector<SeriesMatch> associate_series(
    const std::vector<const Mark*>& data_marks,
    const std::vector<const Mark*>& previews,
    const std::vector<const TextElement*>& legend_labels, ChartType chart_type,
    std::vector<Diagnostic>& diags);

struct ExtractionResult {
  DataTable table;
  SeriesAssignment assignment;
  std::vector<Diagnostic> diagnostics;
};

// Full pipeline: scale estimation, mark valuation, category and series
// association. Rows are categories in reading order; columns are series in
// legend order. Marks that defeat every rule leave null cells behind and are
// reported in the diagnostics.
ExtractionResult extract_table(const ChartSpec& spec);

}  // namespace cqa
