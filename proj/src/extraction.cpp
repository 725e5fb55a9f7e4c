#include "cqa/extraction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cqa {

namespace {

constexpr double kColorMatchThreshold = 30.0;
constexpr double kAlignEps = 5.0;        // px, bbox-center alignment
constexpr double kMinSliceDeg = 0.1;
constexpr double kTieEps = 1e-9;

std::string mark_ref(int index) { return "mark " + std::to_string(index); }

// Clockwise angle from 12 o'clock in degrees, [0, 360). Screen y grows down.
double clock_angle(Point center, Point p) {
  double deg = std::atan2(p.x - center.x, -(p.y - center.y)) * 180.0 / M_PI;
  if (deg < 0.0) deg += 360.0;
  return deg;
}

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

const char* to_string(AssociationMethod m) {
  switch (m) {
    case AssociationMethod::color_match: return "color_match";
    case AssociationMethod::alignment: return "alignment";
    case AssociationMethod::proximity: return "proximity";
  }
  return "?";
}

ScaleFit estimate_axis_scale(const std::vector<const TextElement*>& labels) {
  std::vector<std::pair<double, double>> pts;  // (pixel y, value)
  for (const TextElement* t : labels)
    if (auto v = parse_number(t->text)) pts.push_back({t->bbox.center().y, *v});
  if (pts.size() < 2)
    throw ExtractionError(ExtractionError::Kind::InsufficientLabels,
                          "need at least 2 numeric axis labels, have " +
                              std::to_string(pts.size()));

  double my = 0.0, mv = 0.0;
  for (auto [y, v] : pts) {
    my += y;
    mv += v;
  }
  my /= pts.size();
  mv /= pts.size();
  double syy = 0.0, syv = 0.0;
  for (auto [y, v] : pts) {
    syy += (y - my) * (y - my);
    syv += (y - my) * (v - mv);
  }
  if (syy == 0.0)
    throw ExtractionError(ExtractionError::Kind::DegenerateGeometry,
                          "axis label centers coincide in pixel y");
  ScaleFit fit;
  fit.scale.slope = syv / syy;
  fit.scale.intercept = mv - fit.scale.slope * my;
  if (fit.scale.slope == 0.0 || !std::isfinite(fit.scale.slope))
    throw ExtractionError(ExtractionError::Kind::DegenerateGeometry,
                          "axis labels admit no usable scale");
  fit.scale.orientation = fit.scale.slope < 0.0 ? ScaleOrientation::increasing_up
                                                : ScaleOrientation::increasing_down;

  for (auto [y, v] : pts) {
    double rel = std::abs(fit.scale.value_at(y) - v) / std::max(std::abs(v), 1.0);
    fit.max_rel_residual = std::max(fit.max_rel_residual, rel);
  }

  std::sort(pts.begin(), pts.end());
  for (size_t i = 1; i < pts.size(); ++i) {
    double dv = pts[i].second - pts[i - 1].second;
    if (dv == 0.0 || (dv > 0) != (fit.scale.slope > 0)) {
      fit.monotone = false;
      break;
    }
  }
  return fit;
}

double bar_value(const Mark& bar, double baseline_y, const LinearScale& scale) {
  const Rect& r = bar.rect();
  double far_edge = std::abs(r.top() - baseline_y) >= std::abs(r.bottom() - baseline_y)
                        ? r.top()
                        : r.bottom();
  return scale.value_at(far_edge) - scale.value_at(baseline_y);
}

std::vector<double> line_values(std::vector<const Mark*> points,
                                const LinearScale& scale) {
  std::sort(points.begin(), points.end(), [](const Mark* a, const Mark* b) {
    return a->point().x < b->point().x;
  });
  std::vector<double> out;
  out.reserve(points.size());
  for (const Mark* p : points) out.push_back(scale.value_at(p->point().y));
  return out;
}

std::vector<PieSlice> pie_slices(const std::vector<const Mark*>& boundary,
                                 Point center) {
  struct Bound {
    double deg;
    double radius;
    int index;
  };
  std::vector<Bound> bounds;
  for (size_t i = 0; i < boundary.size(); ++i) {
    Point p = boundary[i]->point();
    double dx = p.x - center.x, dy = p.y - center.y;
    bounds.push_back({clock_angle(center, p), std::sqrt(dx * dx + dy * dy),
                      static_cast<int>(i)});
  }
  std::sort(bounds.begin(), bounds.end(),
            [](const Bound& a, const Bound& b) { return a.deg < b.deg; });

  int n = static_cast<int>(bounds.size());
  std::vector<PieSlice> slices;
  for (int i = 0; i < n; ++i) {
    const Bound& a = bounds[i];
    const Bound& b = bounds[(i + 1) % n];
    double sweep = b.deg - a.deg;
    if (i == n - 1) sweep += 360.0;
    if (sweep < kMinSliceDeg)
      throw ExtractionError(
          ExtractionError::Kind::DegenerateSlice,
          "boundary points " + std::to_string(a.index) + " and " +
              std::to_string(b.index) + " coincide in angle");
    PieSlice s;
    s.start_deg = a.deg;
    s.sweep_deg = sweep;
    s.percentage = sweep / 360.0 * 100.0;
    s.start_mark_index = a.index;
    double mid = a.deg + sweep / 2.0;
    double rad = mid * M_PI / 180.0;
    double r = (a.radius + b.radius) / 2.0;
    s.mid_point = Point{center.x + r * std::sin(rad), center.y - r * std::cos(rad)};
    slices.push_back(s);
  }
  return slices;
}

std::vector<double> pie_values(const std::vector<const Mark*>& boundary,
                               Point center) {
  std::vector<double> out;
  for (const PieSlice& s : pie_slices(boundary, center)) out.push_back(s.percentage);
  return out;
}

std::vector<int> associate_categories(const std::vector<Point>& anchors,
                                      const std::vector<const TextElement*>& labels,
                                      bool euclidean) {
  if (labels.empty())
    throw ExtractionError(ExtractionError::Kind::NoLabels,
                          "no category labels to associate with");
  std::vector<int> out;
  out.reserve(anchors.size());
  for (const Point& a : anchors) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < labels.size(); ++i) {
      Point c = labels[i]->bbox.center();
      double d = euclidean ? std::hypot(a.x - c.x, a.y - c.y) : std::abs(a.x - c.x);
      bool better = d < best_d - kTieEps;
      bool tied = std::abs(d - best_d) <= kTieEps && best >= 0 &&
                  label_before(*labels[i], *labels[best]);
      if (better || tied) {
        best = static_cast<int>(i);
        best_d = std::min(d, best_d);
      }
    }
    out.push_back(best);
  }
  return out;
}

namespace {

// Best-aligned legend label for a mark, or -1. Vertical alignment (shared
// center x) outranks horizontal; exact ties inside the epsilon go to the
// label earlier in reading order, reported as ambiguous.
int alignment_candidate(const Mark& mark,
                        const std::vector<const TextElement*>& labels,
                        bool* ambiguous) {
  Point a = mark.anchor();
  *ambiguous = false;
  for (int axis = 0; axis < 2; ++axis) {
    int best = -1;
    double best_d = kAlignEps;
    bool tie = false;
    for (size_t i = 0; i < labels.size(); ++i) {
      Point c = labels[i]->bbox.center();
      double d = axis == 0 ? std::abs(a.x - c.x) : std::abs(a.y - c.y);
      if (d > kAlignEps) continue;
      if (d < best_d - kTieEps) {
        best = static_cast<int>(i);
        best_d = d;
        tie = false;
      } else if (best >= 0 && std::abs(d - best_d) <= kTieEps) {
        tie = true;
        if (label_before(*labels[i], *labels[best])) best = static_cast<int>(i);
      } else if (best < 0 && d <= kAlignEps) {
        best = static_cast<int>(i);
        best_d = d;
      }
    }
    if (best >= 0) {
      *ambiguous = tie;
      return best;
    }
  }
  return -1;
}

}  // namespace

std::vector<SeriesMatch> associate_series(
    const std::vector<const Mark*>& data_marks,
    const std::vector<const Mark*>& previews,
    const std::vector<const TextElement*>& legend_labels, ChartType chart_type,
    std::vector<Diagnostic>& diags) {
  int n = static_cast<int>(data_marks.size());
  std::vector<SeriesMatch> out(n);

  if (legend_labels.empty()) {
    // Single implicit series.
    for (auto& m : out) {
      m.col = 0;
      m.method = AssociationMethod::proximity;
    }
    return out;
  }

  // Columns follow legend reading order.
  std::vector<const TextElement*> ordered = legend_labels;
  std::sort(ordered.begin(), ordered.end(),
            [](const TextElement* a, const TextElement* b) {
              return label_before(*a, *b);
            });
  auto col_of = [&](const TextElement* t) {
    return static_cast<int>(std::find(ordered.begin(), ordered.end(), t) -
                            ordered.begin());
  };

  // Pair previews with legend labels greedily, nearest pair first, one to
  // one. Previews sit beside their labels, so nearest-first is reliable and
  // the one-to-one constraint keeps the mapping injective.
  std::vector<int> preview_col(previews.size(), -1);
  {
    struct Cand {
      double d;
      int preview;
      int col;
    };
    std::vector<Cand> cands;
    for (size_t p = 0; p < previews.size(); ++p) {
      Point a = previews[p]->anchor();
      for (const TextElement* t : ordered) {
        Point c = t->bbox.center();
        cands.push_back({std::hypot(a.x - c.x, a.y - c.y),
                         static_cast<int>(p), col_of(t)});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.col != b.col) return a.col < b.col;
      return a.preview < b.preview;
    });
    std::vector<char> col_used(ordered.size(), 0);
    for (const Cand& c : cands) {
      if (preview_col[c.preview] >= 0 || col_used[c.col]) continue;
      preview_col[c.preview] = c.col;
      col_used[c.col] = 1;
    }
  }

  // Per-column color distance: the closest preview belonging to that column.
  auto column_color_distance = [&](const Rgb& color, std::vector<double>& per_col) {
    per_col.assign(ordered.size(), std::numeric_limits<double>::infinity());
    for (size_t p = 0; p < previews.size(); ++p) {
      if (preview_col[p] < 0) continue;
      double d = color_distance(color, previews[p]->color);
      per_col[preview_col[p]] = std::min(per_col[preview_col[p]], d);
    }
  };

  std::vector<int> proximity_pool;
  std::vector<double> per_col;
  for (int i = 0; i < n; ++i) {
    const Mark& mark = *data_marks[i];
    // Rule 1: nearest column by preview color, within the threshold and
    // clear of the runner-up column.
    int best_col = -1;
    double best_d = std::numeric_limits<double>::infinity();
    double runner_d = std::numeric_limits<double>::infinity();
    if (!previews.empty()) {
      column_color_distance(mark.color, per_col);
      for (size_t c = 0; c < per_col.size(); ++c) {
        if (per_col[c] < best_d) {
          runner_d = best_d;
          best_d = per_col[c];
          best_col = static_cast<int>(c);
        } else {
          runner_d = std::min(runner_d, per_col[c]);
        }
      }
    }
    bool color_ok = best_col >= 0 && best_d <= kColorMatchThreshold;
    bool color_tie = color_ok && runner_d - best_d <= kTieEps;

    bool ambiguous = false;
    int aligned = chart_type == ChartType::line
                      ? -1
                      : alignment_candidate(mark, ordered, &ambiguous);

    if (color_ok && !color_tie) {
      if (aligned >= 0 && !ambiguous && aligned != best_col)
        diags.push_back({"color_alignment_conflict",
                         mark_ref(i) + ": color says column " +
                             std::to_string(best_col) + ", alignment says " +
                             std::to_string(aligned) + "; color kept"});
      out[i] = {best_col, AssociationMethod::color_match};
      continue;
    }
    if (color_ok && color_tie) {
      // Legend entries indistinguishable by color: alignment arbitrates,
      // then reading order.
      if (aligned >= 0 && !ambiguous) {
        out[i] = {aligned, AssociationMethod::alignment};
        diags.push_back({"fallback_alignment",
                         mark_ref(i) + ": color tie resolved by alignment"});
        continue;
      }
      if (chart_type != ChartType::line) {
        diags.push_back({"ambiguous_series",
                         mark_ref(i) + ": legend entries tie, leftmost kept"});
        out[i] = {best_col, AssociationMethod::color_match};
        continue;
      }
      // Line charts resolve leftover ties by line proximity below.
    }
    // Rule 2: bbox alignment (bar-style charts).
    if (aligned >= 0) {
      if (ambiguous)
        diags.push_back({"ambiguous_series",
                         mark_ref(i) + ": aligned labels tie, leftmost kept"});
      out[i] = {aligned, AssociationMethod::alignment};
      diags.push_back({"fallback_alignment", mark_ref(i)});
      continue;
    }
    // Rule 3: proximity grouping for line charts.
    if (chart_type == ChartType::line &&
        data_marks[i]->kind == MarkKind::line_point) {
      proximity_pool.push_back(i);
    } else {
      out[i].col = -1;
    }
  }

  if (!proximity_pool.empty()) {
    // Cluster the pooled points into lines by color, then greedily pair
    // whole lines with the nearest legend label.
    int m = static_cast<int>(proximity_pool.size());
    DisjointSet ds(m);
    for (int a = 0; a < m; ++a)
      for (int b = a + 1; b < m; ++b)
        if (color_distance(data_marks[proximity_pool[a]]->color,
                           data_marks[proximity_pool[b]]->color) <=
            kColorMatchThreshold)
          ds.unite(a, b);
    std::vector<int> roots;
    for (int a = 0; a < m; ++a)
      if (ds.find(a) == a) roots.push_back(a);

    struct Pair {
      double d;
      int cluster;
      int col;
    };
    std::vector<Pair> pairs;
    for (size_t ci = 0; ci < roots.size(); ++ci) {
      for (size_t li = 0; li < ordered.size(); ++li) {
        Point c = ordered[li]->bbox.center();
        double d = std::numeric_limits<double>::infinity();
        for (int a = 0; a < m; ++a) {
          if (ds.find(a) != roots[ci]) continue;
          Point p = data_marks[proximity_pool[a]]->anchor();
          d = std::min(d, std::hypot(p.x - c.x, p.y - c.y));
        }
        pairs.push_back({d, static_cast<int>(ci), static_cast<int>(li)});
      }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.col != b.col) return a.col < b.col;
      return a.cluster < b.cluster;
    });
    std::vector<int> cluster_col(roots.size(), -1);
    std::vector<char> col_used(ordered.size(), 0);
    for (const Pair& p : pairs) {
      if (cluster_col[p.cluster] >= 0 || col_used[p.col]) continue;
      cluster_col[p.cluster] = p.col;
      col_used[p.col] = 1;
    }
    for (size_t ci = 0; ci < roots.size(); ++ci) {
      if (cluster_col[ci] >= 0)
        diags.push_back({"fallback_proximity",
                         "line cluster -> column " +
                             std::to_string(cluster_col[ci])});
    }
    for (int a = 0; a < m; ++a) {
      int ci = static_cast<int>(std::find(roots.begin(), roots.end(), ds.find(a)) -
                                roots.begin());
      int mark = proximity_pool[a];
      if (cluster_col[ci] >= 0) {
        out[mark] = {cluster_col[ci], AssociationMethod::proximity};
      } else {
        out[mark].col = -1;
      }
    }
  }
  return out;
}

namespace {

ExtractionResult extract_pie(const ChartSpec& spec) {
  ExtractionResult res;
  std::vector<const Mark*> boundary;
  for (const Mark& m : spec.marks)
    if (m.kind == MarkKind::pie_boundary_point) boundary.push_back(&m);
  auto slices = pie_slices(boundary, *spec.pie_center);

  auto labels = spec.texts_with_role(TextRole::PieLabel);
  std::vector<Point> anchors;
  for (const PieSlice& s : slices) anchors.push_back(s.mid_point);
  auto assoc = associate_categories(anchors, labels, /*euclidean=*/true);

  std::vector<const TextElement*> ordered = labels;
  std::sort(ordered.begin(), ordered.end(),
            [](const TextElement* a, const TextElement* b) {
              return label_before(*a, *b);
            });
  res.table.col_headers = {"value"};
  for (const TextElement* t : ordered) res.table.row_labels.push_back(t->text);
  res.table.cells.assign(ordered.size(),
                         std::vector<std::optional<double>>(1));

  // Boundary-list index -> index among this chart's marks.
  std::vector<int> mark_index;
  for (size_t i = 0; i < spec.marks.size(); ++i)
    if (spec.marks[i].kind == MarkKind::pie_boundary_point)
      mark_index.push_back(static_cast<int>(i));

  for (size_t s = 0; s < slices.size(); ++s) {
    int row = static_cast<int>(
        std::find(ordered.begin(), ordered.end(), labels[assoc[s]]) -
        ordered.begin());
    int mark = mark_index[slices[s].start_mark_index];
    if (res.table.cells[row][0]) {
      res.diagnostics.push_back(
          {"duplicate_cell", "slice " + std::to_string(s) + " maps to row " +
                                 std::to_string(row) + " twice"});
      res.assignment.unassigned.push_back(mark);
      continue;
    }
    res.table.cells[row][0] = slices[s].percentage;
    res.assignment.assigned.push_back(
        {mark, row, 0, AssociationMethod::proximity});
  }
  return res;
}

}  // namespace

ExtractionResult extract_table(const ChartSpec& spec) {
  if (spec.chart_type == ChartType::pie) return extract_pie(spec);

  ExtractionResult res;

  // Split numeric y labels by plot side; two numeric groups means dual axes.
  double plot_cx = spec.plot_area.center().x;
  std::vector<const TextElement*> left, right;
  for (const TextElement& t : spec.texts) {
    if (t.role != TextRole::yAxisLabel || !parse_number(t.text)) continue;
    (t.bbox.center().x < plot_cx ? left : right).push_back(&t);
  }
  if (left.size() >= 2 && right.size() >= 2)
    throw ExtractionError(ExtractionError::Kind::DualAxis,
                          "dual-axis charts are unsupported");
  const auto& axis_labels = left.size() >= right.size() ? left : right;
  ScaleFit fit = estimate_axis_scale(axis_labels);
  if (!fit.monotone)
    res.diagnostics.push_back({"non_monotone_axis", "label order disagrees with fit"});

  double baseline = spec.plot_area.bottom();
  for (const TextElement* t : axis_labels) {
    if (auto v = parse_number(t->text); v && *v == 0.0) {
      baseline = t->bbox.center().y;
      break;
    }
  }

  std::vector<const Mark*> data_marks, previews;
  std::vector<int> data_index;
  for (size_t i = 0; i < spec.marks.size(); ++i) {
    const Mark& m = spec.marks[i];
    if (m.kind == MarkKind::bar || m.kind == MarkKind::line_point) {
      data_marks.push_back(&m);
      data_index.push_back(static_cast<int>(i));
    } else if (m.kind == MarkKind::legend_preview) {
      previews.push_back(&m);
    }
  }

  std::vector<double> values;
  std::vector<Point> anchors;
  for (const Mark* m : data_marks) {
    if (m->kind == MarkKind::bar)
      values.push_back(bar_value(*m, baseline, fit.scale));
    else
      values.push_back(fit.scale.value_at(m->point().y));
    anchors.push_back(m->anchor());
  }

  auto x_labels = spec.texts_with_role(TextRole::xAxisLabel);
  auto assoc = associate_categories(anchors, x_labels, /*euclidean=*/false);

  std::vector<const TextElement*> rows_ordered = x_labels;
  std::sort(rows_ordered.begin(), rows_ordered.end(),
            [](const TextElement* a, const TextElement* b) {
              return label_before(*a, *b);
            });
  auto row_of = [&](const TextElement* t) {
    return static_cast<int>(std::find(rows_ordered.begin(), rows_ordered.end(), t) -
                            rows_ordered.begin());
  };

  auto legend_labels = spec.texts_with_role(TextRole::LegendLabel);
  auto series =
      associate_series(data_marks, previews, legend_labels, spec.chart_type,
                       res.diagnostics);

  if (legend_labels.empty()) {
    auto titles = spec.texts_with_role(TextRole::yAxisTitle);
    res.table.col_headers = {titles.empty() ? "value" : titles[0]->text};
  } else {
    std::vector<const TextElement*> cols_ordered = legend_labels;
    std::sort(cols_ordered.begin(), cols_ordered.end(),
              [](const TextElement* a, const TextElement* b) {
                return label_before(*a, *b);
              });
    for (const TextElement* t : cols_ordered)
      res.table.col_headers.push_back(t->text);
  }
  for (const TextElement* t : rows_ordered) res.table.row_labels.push_back(t->text);
  res.table.cells.assign(res.table.rows(),
                         std::vector<std::optional<double>>(res.table.cols()));

  for (size_t i = 0; i < data_marks.size(); ++i) {
    int row = row_of(x_labels[assoc[i]]);
    int col = series[i].col;
    if (col < 0) {
      res.diagnostics.push_back({"unassigned_mark", mark_ref(data_index[i])});
      res.assignment.unassigned.push_back(data_index[i]);
      continue;
    }
    if (res.table.cells[row][col]) {
      res.diagnostics.push_back(
          {"duplicate_cell", mark_ref(data_index[i]) + " collides at (" +
                                 std::to_string(row) + ", " +
                                 std::to_string(col) + ")"});
      res.assignment.unassigned.push_back(data_index[i]);
      continue;
    }
    res.table.cells[row][col] = values[i];
    res.assignment.assigned.push_back({data_index[i], row, col, series[i].method});
  }
  return res;
}

}  // namespace cqa
