#include "cqa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cqa/rng.hpp"

namespace cqa {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Layout constants. 800 x 600 canvas, 10% margins around the plot area.
// ---------------------------------------------------------------------------
constexpr double kCanvasW = 800.0, kCanvasH = 600.0;
constexpr double kPlotX = 80.0, kPlotY = 60.0, kPlotW = 640.0, kPlotH = 480.0;
constexpr double kBaselineY = kPlotY + kPlotH;  // pixel row of value 0
constexpr double kPieCx = 400.0, kPieCy = 300.0, kPieR = 192.0;
constexpr double kPieLabelR = 1.15 * kPieR;
constexpr double kBarGroupFill = 0.8;  // fraction of a category slot bars cover
constexpr double kValueLo = 5.0, kValueHi = 95.0;
constexpr double kTextH = 12.0, kTextCharW = 7.0;
constexpr double kPi = 3.14159265358979323846;

struct NamedColor {
  const char* name;
  Rgb rgb;
};

// Pairwise RGB distance exceeds 100 for every pair, so color-matching series
// association has generous margin even under channel jitter.
constexpr int kPaletteSize = 6;
const NamedColor kPalette[kPaletteSize] = {
    {"red", {220, 50, 40}},    {"blue", {40, 90, 210}},
    {"green", {40, 160, 60}},  {"orange", {240, 160, 30}},
    {"purple", {130, 60, 170}}, {"teal", {90, 190, 200}},
};

const std::vector<std::string> kCategoryPool = {
    "apples",  "bananas", "cherries", "grapes", "kiwis",  "lemons",
    "mangoes", "olives",  "peaches",  "pears",  "plums",  "quinces"};

// Vocabulary for planted unanswerables; deliberately disjoint from every
// category, series and header word the generator can emit.
const std::vector<std::string> kFakePool = {"zorblat", "quindle", "vexium",
                                            "brontal", "skarn",   "plimsol"};

double round2(double v) { return std::round(v * 100.0) / 100.0; }

Rect centered_box(double cx, double cy, const std::string& text) {
  double w = kTextCharW * static_cast<double>(text.size());
  return Rect{cx - w / 2.0, cy - kTextH / 2.0, w, kTextH};
}

// Fisher-Yates prefix shuffle: first n entries of a shuffled [0, pool) range.
std::vector<int> sample_indices(Rng& rng, int pool, int n) {
  std::vector<int> idx(pool);
  for (int i = 0; i < pool; ++i) idx[i] = i;
  for (int i = 0; i < n && i < pool; ++i) {
    int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(pool - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(std::min(n, pool));
  return idx;
}

double nice_axis_max(double max_value) {
  for (double cand : {25.0, 50.0, 100.0})
    if (max_value <= cand) return cand;
  return 100.0;
}

double y_of(double value, double axis_max) {
  return kBaselineY - value / axis_max * kPlotH;
}

// Internal working form of one chart before noise is applied.
struct Draft {
  ChartType type = ChartType::bar;
  std::string chart_id;
  std::vector<std::string> cats;     // row order of the gold table
  std::vector<std::string> series;   // column order (color words); empty for pie
  std::vector<Rgb> series_colors;
  std::vector<std::vector<double>> values;  // cats x max(1, series)
  ChartSpec spec;
  std::vector<MarkCell> mark_cells;
};

void add_axis_furniture(Draft& d, double axis_max) {
  d.spec.texts.push_back(
      {TextRole::ChartTitle, d.chart_id, centered_box(400.0, 30.0, d.chart_id)});
  d.spec.texts.push_back(
      {TextRole::yAxisTitle, "value", centered_box(30.0, 300.0, "value")});
  d.spec.texts.push_back(
      {TextRole::xAxisTitle, "category", centered_box(400.0, 585.0, "category")});
  double q = axis_max / 4.0;
  for (int k = 0; k <= 4; ++k) {
    std::string txt = format_number(q * k);
    d.spec.texts.push_back(
        {TextRole::yAxisLabel, txt, centered_box(60.0, kBaselineY - k * 120.0, txt)});
  }
  int n = static_cast<int>(d.cats.size());
  for (int i = 0; i < n; ++i) {
    double cx = kPlotX + (i + 0.5) * kPlotW / n;
    d.spec.texts.push_back(
        {TextRole::xAxisLabel, d.cats[i], centered_box(cx, 560.0, d.cats[i])});
  }
}

void add_legend(Draft& d) {
  if (d.series.size() < 2) return;
  for (size_t s = 0; s < d.series.size(); ++s) {
    double top = 90.0 + 30.0 * static_cast<double>(s);
    d.spec.marks.push_back({MarkKind::legend_preview,
                            Rect{660.0, top, 12.0, 12.0}, d.series_colors[s], {}});
    d.spec.texts.push_back({TextRole::LegendLabel, d.series[s],
                            centered_box(700.0, top + 6.0, d.series[s])});
  }
}

Draft make_bar_or_line(ChartType type, const std::string& id, Rng rng,
                       bool single_series_only) {
  Draft d;
  d.type = type;
  d.chart_id = id;
  d.spec.chart_type = type;
  d.spec.plot_area = Rect{kPlotX, kPlotY, kPlotW, kPlotH};

  int n_cat = 4 + static_cast<int>(rng.next_below(5));  // 4..8
  int n_series =
      single_series_only ? 1 : 1 + static_cast<int>(rng.next_below(3));  // 1..3
  for (int i : sample_indices(rng, static_cast<int>(kCategoryPool.size()), n_cat))
    d.cats.push_back(kCategoryPool[i]);
  std::vector<int> color_idx = sample_indices(rng, kPaletteSize, n_series);
  for (int c : color_idx) {
    d.series_colors.push_back(kPalette[c].rgb);
    if (n_series > 1) d.series.push_back(kPalette[c].name);
  }

  d.values.assign(n_cat, std::vector<double>(n_series));
  double max_v = 0.0;
  for (auto& row : d.values)
    for (double& v : row) {
      v = round2(rng.uniform(kValueLo, kValueHi));
      max_v = std::max(max_v, v);
    }
  double axis_max = nice_axis_max(max_v);

  double group_w = kPlotW / n_cat;
  for (int s = 0; s < n_series; ++s) {
    for (int i = 0; i < n_cat; ++i) {
      int mark_index = static_cast<int>(d.spec.marks.size());
      if (type == ChartType::bar) {
        double bar_w = kBarGroupFill * group_w / n_series;
        double x = kPlotX + i * group_w + (1.0 - kBarGroupFill) / 2.0 * group_w +
                   s * bar_w;
        double top = y_of(d.values[i][s], axis_max);
        d.spec.marks.push_back({MarkKind::bar,
                                Rect{x, top, bar_w, kBaselineY - top},
                                d.series_colors[s], {}});
      } else {
        Point p{kPlotX + (i + 0.5) * group_w, y_of(d.values[i][s], axis_max)};
        d.spec.marks.push_back({MarkKind::line_point, p, d.series_colors[s], {}});
      }
      d.mark_cells.push_back({mark_index, i, s});
    }
  }
  add_axis_furniture(d, axis_max);
  add_legend(d);
  return d;
}

// Percentages with two decimals that sum to exactly 100 (largest residual
// takes the leftover hundredths).
std::vector<double> percentages_of(const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<long long> cents(weights.size());
  std::vector<double> residual(weights.size());
  long long assigned = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    double exact = weights[i] / total * 10000.0;
    cents[i] = static_cast<long long>(std::floor(exact));
    residual[i] = exact - static_cast<double>(cents[i]);
    assigned += cents[i];
  }
  long long leftover = 10000 - assigned;
  std::vector<size_t> order(weights.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return residual[a] > residual[b];
  });
  for (long long k = 0; k < leftover; ++k) ++cents[order[k % order.size()]];
  std::vector<double> out(weights.size());
  for (size_t i = 0; i < weights.size(); ++i)
    out[i] = static_cast<double>(cents[i]) / 100.0;
  return out;
}

Draft make_pie(const std::string& id, Rng rng) {
  Draft d;
  d.type = ChartType::pie;
  d.chart_id = id;
  d.spec.chart_type = ChartType::pie;
  d.spec.plot_area = Rect{kPlotX, kPlotY, kPlotW, kPlotH};
  d.spec.pie_center = Point{kPieCx, kPieCy};

  int n = 3 + static_cast<int>(rng.next_below(4));  // 3..6 slices
  std::vector<std::string> slice_cats;
  for (int i : sample_indices(rng, static_cast<int>(kCategoryPool.size()), n))
    slice_cats.push_back(kCategoryPool[i]);
  std::vector<int> color_idx = sample_indices(rng, kPaletteSize, n);

  std::vector<double> pct;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<double> weights(n);
    for (double& w : weights) w = rng.uniform(kValueLo, kValueHi);
    pct = percentages_of(weights);
    if (*std::min_element(pct.begin(), pct.end()) >= 3.0) break;
  }
  // The retry cap cannot realistically be hit; clamp defensively anyway.
  if (*std::min_element(pct.begin(), pct.end()) < 3.0)
    pct = percentages_of(std::vector<double>(n, 1.0));

  // Boundary marks clockwise from 12 o'clock; mark k starts slice k.
  std::vector<TextElement> labels(n);
  double cum = 0.0;
  for (int k = 0; k < n; ++k) {
    double start_rad = cum / 100.0 * 2.0 * kPi;
    double mid_rad = (cum + pct[k] / 2.0) / 100.0 * 2.0 * kPi;
    Point b{kPieCx + kPieR * std::sin(start_rad), kPieCy - kPieR * std::cos(start_rad)};
    d.spec.marks.push_back(
        {MarkKind::pie_boundary_point, b, kPalette[color_idx[k]].rgb, {}});
    labels[k] = {TextRole::PieLabel, slice_cats[k],
                 centered_box(kPieCx + kPieLabelR * std::sin(mid_rad),
                              kPieCy - kPieLabelR * std::cos(mid_rad),
                              slice_cats[k])};
    cum += pct[k];
  }
  for (const TextElement& t : labels) d.spec.texts.push_back(t);

  // Gold rows follow reading order of the labels, like extraction's table.
  std::vector<int> order(n);
  for (int k = 0; k < n; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return label_before(labels[a], labels[b]);
  });
  std::vector<int> row_of_slice(n);
  for (int r = 0; r < n; ++r) row_of_slice[order[r]] = r;

  d.cats.resize(n);
  d.values.assign(n, std::vector<double>(1));
  for (int k = 0; k < n; ++k) {
    d.cats[row_of_slice[k]] = slice_cats[k];
    d.values[row_of_slice[k]][0] = pct[k];
    d.mark_cells.push_back({k, row_of_slice[k], 0});
  }
  return d;
}

DataTable gold_table_of(const Draft& d) {
  DataTable t;
  if (d.series.empty())
    t.col_headers = {"value"};
  else
    t.col_headers = d.series;
  t.row_labels = d.cats;
  t.cells.resize(d.cats.size());
  for (size_t r = 0; r < d.values.size(); ++r)
    for (double v : d.values[r]) t.cells[r].emplace_back(v);
  return t;
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

double jitter_pos(Rng& rng, double v, double sigma) {
  return std::max(0.0, v + rng.normal(0.0, sigma));
}

void apply_noise(Draft& d, const NoiseModel& noise, Rng rng) {
  Rng geo = rng.split(0), col = rng.split(1), drop = rng.split(2);
  if (noise.keypoint_sigma > 0.0) {
    for (Mark& m : d.spec.marks) {
      if (std::holds_alternative<Rect>(m.geometry)) {
        Rect r = std::get<Rect>(m.geometry);
        r.x = jitter_pos(geo, r.x, noise.keypoint_sigma);
        r.y = jitter_pos(geo, r.y, noise.keypoint_sigma);
        r.w = std::max(0.1, r.w + geo.normal(0.0, noise.keypoint_sigma));
        r.h = std::max(0.1, r.h + geo.normal(0.0, noise.keypoint_sigma));
        m.geometry = r;
      } else {
        Point p = std::get<Point>(m.geometry);
        p.x = jitter_pos(geo, p.x, noise.keypoint_sigma);
        p.y = jitter_pos(geo, p.y, noise.keypoint_sigma);
        m.geometry = p;
      }
    }
    for (TextElement& t : d.spec.texts) {
      t.bbox.x = jitter_pos(geo, t.bbox.x, noise.keypoint_sigma);
      t.bbox.y = jitter_pos(geo, t.bbox.y, noise.keypoint_sigma);
      t.bbox.w = std::max(0.1, t.bbox.w + geo.normal(0.0, noise.keypoint_sigma));
      t.bbox.h = std::max(0.1, t.bbox.h + geo.normal(0.0, noise.keypoint_sigma));
    }
  }
  if (noise.color_sigma > 0.0) {
    for (Mark& m : d.spec.marks) {
      if (m.kind == MarkKind::legend_preview) continue;
      for (int* ch : {&m.color.r, &m.color.g, &m.color.b}) {
        double v = *ch + col.normal(0.0, noise.color_sigma);
        *ch = static_cast<int>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  if (noise.label_dropout > 0.0) {
    std::vector<TextElement> kept;
    for (const TextElement& t : d.spec.texts) {
      bool droppable = t.role == TextRole::xAxisLabel ||
                       t.role == TextRole::LegendLabel ||
                       t.role == TextRole::PieLabel;
      if (droppable && drop.next_double() < noise.label_dropout) continue;
      kept.push_back(t);
    }
    d.spec.texts = std::move(kept);
  }
}

void round_geometry(ChartSpec& spec) {
  for (Mark& m : spec.marks) {
    if (std::holds_alternative<Rect>(m.geometry)) {
      Rect r = std::get<Rect>(m.geometry);
      m.geometry = Rect{round2(r.x), round2(r.y), round2(r.w), round2(r.h)};
    } else {
      Point p = std::get<Point>(m.geometry);
      m.geometry = Point{round2(p.x), round2(p.y)};
    }
  }
  for (TextElement& t : spec.texts)
    t.bbox = Rect{round2(t.bbox.x), round2(t.bbox.y), round2(t.bbox.w),
                  round2(t.bbox.h)};
}

// ---------------------------------------------------------------------------
// Question synthesis
// ---------------------------------------------------------------------------

struct QaContext {
  const Draft& d;
  const DataTable& table;
  const GenConfig& cfg;
  Rng& rng;
};

CellRef value_cell(int row, int col) { return CellRef{row + 1, col + 1}; }
CellRef label_cell(int row) { return CellRef{row + 1, 0}; }

double cell_value(const QaContext& q, int row, int col) {
  return *q.table.cells[row][col];
}

int pick_row(const QaContext& q) {
  return static_cast<int>(q.rng.next_below(q.table.rows()));
}

int pick_col(const QaContext& q) {
  return static_cast<int>(q.rng.next_below(q.table.cols()));
}

std::string series_suffix(const QaContext& q, int col) {
  if (q.d.series.empty()) return "";
  return " for the " + q.d.series[col] + " series";
}

QAExample finish(QaContext& q, QuestionKind kind, std::string question,
                 AggregationOp op, CellSelection cells) {
  QAExample ex;
  ex.chart_id = q.d.chart_id;
  ex.kind = kind;
  ex.question = std::move(question);
  Answer ans = execute(op, cells, q.table);
  if (op == AggregationOp::NONE && cells.size() == 1 && cells[0].col > 0)
    ans = Answer::number_of(cell_value(q, cells[0].row - 1, cells[0].col - 1));
  SupervisionTarget target{op, std::move(cells), {}};
  if (ans.kind == Answer::Kind::Number) target.scalar_answer = ans.number;
  ex.gold_answer = std::move(ans);
  ex.supervision = std::move(target);
  return ex;
}

// (row, col) of the maximal / minimal cell over the whole grid.
std::pair<int, int> arg_extreme(const QaContext& q, bool want_max, int only_col) {
  int br = 0, bc = only_col < 0 ? 0 : only_col;
  for (int r = 0; r < q.table.rows(); ++r)
    for (int c = 0; c < q.table.cols(); ++c) {
      if (only_col >= 0 && c != only_col) continue;
      double v = cell_value(q, r, c), best = cell_value(q, br, bc);
      if (want_max ? v > best : v < best) br = r, bc = c;
    }
  return {br, bc};
}

bool extreme_is_unique(const QaContext& q, bool want_max, int only_col) {
  auto [br, bc] = arg_extreme(q, want_max, only_col);
  int hits = 0;
  for (int r = 0; r < q.table.rows(); ++r)
    for (int c = 0; c < q.table.cols(); ++c) {
      if (only_col >= 0 && c != only_col) continue;
      if (cell_value(q, r, c) == cell_value(q, br, bc)) ++hits;
    }
  return hits == 1;
}

// First partner row (scanning from a random offset) whose pairing with
// `row` passes the guard; -1 when none does.
template <class Guard>
int find_partner(const QaContext& q, int row, int col, Guard&& ok) {
  int n = q.table.rows();
  int start = static_cast<int>(q.rng.next_below(n));
  for (int k = 0; k < n; ++k) {
    int cand = (start + k) % n;
    if (cand == row) continue;
    if (ok(cell_value(q, row, col), cell_value(q, cand, col))) return cand;
  }
  return -1;
}

bool diff_guard(double a, double b) { return std::fabs(a - b) >= 1.0; }
bool ratio_guard(double a, double b) {
  double r = a / b;
  return r < 0.98 || r > 1.02;
}

std::string noun(const QaContext& q) {
  switch (q.d.type) {
    case ChartType::bar: return "bar";
    case ChartType::line: return "point";
    case ChartType::pie: return "slice";
  }
  return "bar";
}

QAExample sum_all(QaContext& q, QuestionKind kind) {
  int col = pick_col(q);
  CellSelection cells;
  for (int r = 0; r < q.table.rows(); ++r) cells.push_back(value_cell(r, col));
  std::string question = q.d.series.empty()
                             ? "What is the sum of all the values?"
                             : "What is the total of the " + q.d.series[col] +
                                   " series?";
  if (q.d.type == ChartType::pie)
    question = "What do all the slice percentages add up to?";
  return finish(q, kind, question, AggregationOp::SUM, cells);
}

QAExample q_data_retrieval(QaContext& q) {
  auto kind = QuestionKind::data_retrieval;
  if (q.rng.next_double() < 0.7) {
    int r = pick_row(q), c = pick_col(q);
    std::string question;
    if (q.d.type == ChartType::pie)
      question = "What percentage does " + q.d.cats[r] + " account for?";
    else if (q.d.series.empty())
      question = "What is the value of " + q.d.cats[r] + "?";
    else
      question = "What is the value of the " + q.d.series[c] + " series for " +
                 q.d.cats[r] + "?";
    return finish(q, kind, question, AggregationOp::NONE, {value_cell(r, c)});
  }
  std::string question = q.d.type == ChartType::pie
                             ? "Which category labels the first row of the table?"
                             : "Which category appears first on the x axis?";
  return finish(q, kind, question, AggregationOp::NONE, {label_cell(0)});
}

QAExample q_visual(QaContext& q) {
  auto kind = QuestionKind::visual;
  bool positional =
      q.d.type != ChartType::pie && q.rng.next_double() < q.cfg.positional_bias;
  if (positional) {
    int c = pick_col(q);
    bool first = q.rng.next_double() < 0.5;
    int r = first ? 0 : 1;
    std::string which = first ? "first" : "second";
    std::string question = "What is the value of the " + which + " " +
                           (q.d.series.empty() ? "" : q.d.series[c] + " ") +
                           noun(q) + "?";
    return finish(q, kind, question, AggregationOp::NONE, {value_cell(r, c)});
  }
  bool want_max = q.rng.next_double() < 0.5;
  bool label_variant =
      q.rng.next_double() < 0.25 && extreme_is_unique(q, want_max, -1);
  if (q.d.type == ChartType::pie) {
    auto [r, c] = arg_extreme(q, want_max, 0);
    std::string size = want_max ? "largest" : "smallest";
    if (label_variant)
      return finish(q, kind, "Which category has the " + size + " slice?",
                    AggregationOp::NONE, {label_cell(r)});
    return finish(q, kind,
                  "What percentage does the " + size + " slice take?",
                  AggregationOp::NONE, {value_cell(r, c)});
  }
  if (q.d.type == ChartType::line && !q.d.series.empty()) {
    int c = pick_col(q);
    auto [r, cc] = arg_extreme(q, want_max, c);
    std::string what = want_max ? "peak" : "lowest";
    return finish(q, kind,
                  "What is the " + what + " value of the " + q.d.series[c] +
                      " line?",
                  AggregationOp::NONE, {value_cell(r, cc)});
  }
  auto [r, c] = arg_extreme(q, want_max, -1);
  std::string size = want_max ? (q.d.type == ChartType::bar ? "tallest" : "highest")
                              : (q.d.type == ChartType::bar ? "shortest" : "lowest");
  if (label_variant)
    return finish(q, kind,
                  "Which category has the " + size + " " + noun(q) + "?",
                  AggregationOp::NONE, {label_cell(r)});
  return finish(q, kind, "What is the value of the " + size + " " + noun(q) + "?",
                AggregationOp::NONE, {value_cell(r, c)});
}

QAExample q_compositional(QaContext& q) {
  auto kind = QuestionKind::compositional;
  if (q.rng.next_double() < q.cfg.yesno_weight && q.table.rows() >= 2) {
    int c = pick_col(q);
    int r1 = pick_row(q);
    int r2 = (r1 + 1 + static_cast<int>(q.rng.next_below(q.table.rows() - 1))) %
             q.table.rows();
    bool truth = cell_value(q, r1, c) > cell_value(q, r2, c);
    std::string question = "Is the value of " + q.d.cats[r1] +
                           " greater than the value of " + q.d.cats[r2] +
                           series_suffix(q, c) + "?";
    return finish(q, kind, question,
                  truth ? AggregationOp::YES : AggregationOp::NO, {});
  }
  switch (q.rng.next_below(5)) {
    case 0:
      return sum_all(q, kind);
    case 1: {
      int col = pick_col(q);
      CellSelection cells;
      for (int r = 0; r < q.table.rows(); ++r) cells.push_back(value_cell(r, col));
      std::string question =
          q.d.series.empty()
              ? "What is the average of all the values?"
              : "What is the average of the " + q.d.series[col] + " series?";
      if (q.d.type == ChartType::pie)
        question = "What is the average slice percentage?";
      return finish(q, kind, question, AggregationOp::AVERAGE, cells);
    }
    case 2: {
      int c = pick_col(q), r1 = pick_row(q);
      int r2 = find_partner(q, r1, c, diff_guard);
      if (r2 < 0) return sum_all(q, kind);
      std::string question = "What is the difference between " + q.d.cats[r1] +
                             " and " + q.d.cats[r2] + series_suffix(q, c) + "?";
      return finish(q, kind, question, AggregationOp::DIFFERENCE,
                    {value_cell(r1, c), value_cell(r2, c)});
    }
    case 3: {
      int c = pick_col(q), r1 = pick_row(q);
      int r2 = find_partner(q, r1, c, ratio_guard);
      if (r2 < 0) return sum_all(q, kind);
      std::string question = "What is the ratio of " + q.d.cats[r1] + " to " +
                             q.d.cats[r2] + series_suffix(q, c) + "?";
      return finish(q, kind, question, AggregationOp::RATIO,
                    {value_cell(r1, c), value_cell(r2, c)});
    }
    default: {
      CellSelection cells;
      for (int r = 0; r < q.table.rows(); ++r) cells.push_back(value_cell(r, 0));
      std::string question = q.d.type == ChartType::pie
                                 ? "How many slices does the pie have?"
                                 : "How many categories are shown?";
      return finish(q, kind, question, AggregationOp::COUNT, cells);
    }
  }
}

QAExample q_visual_compositional(QaContext& q) {
  auto kind = QuestionKind::visual_compositional;
  bool positional =
      q.d.type != ChartType::pie && q.rng.next_double() < q.cfg.positional_bias;
  if (positional) {
    int c = pick_col(q);
    std::string pair = "the first and second " +
                       (q.d.series.empty() ? "" : q.d.series[c] + " ") + noun(q) +
                       "s";
    switch (q.rng.next_below(3)) {
      case 0:
        return finish(q, kind, "What is the sum of the values of " + pair + "?",
                      AggregationOp::SUM, {value_cell(0, c), value_cell(1, c)});
      case 1: {
        if (!diff_guard(cell_value(q, 0, c), cell_value(q, 1, c)))
          return finish(q, kind,
                        "What is the sum of the values of " + pair + "?",
                        AggregationOp::SUM, {value_cell(0, c), value_cell(1, c)});
        return finish(q, kind,
                      "What is the difference between the values of " + pair + "?",
                      AggregationOp::DIFFERENCE,
                      {value_cell(0, c), value_cell(1, c)});
      }
      default:
        return finish(q, kind, "What is the average of the values of " + pair + "?",
                      AggregationOp::AVERAGE, {value_cell(0, c), value_cell(1, c)});
    }
  }
  auto [hr, hc] = arg_extreme(q, true, -1);
  auto [lr, lc] = arg_extreme(q, false, -1);
  std::string hi = q.d.type == ChartType::pie ? "largest" : "tallest";
  std::string lo = q.d.type == ChartType::pie ? "smallest" : "shortest";
  if (q.d.type == ChartType::line) hi = "highest", lo = "lowest";
  double a = cell_value(q, hr, hc), b = cell_value(q, lr, lc);
  switch (q.rng.next_below(3)) {
    case 0: {
      if (!diff_guard(a, b)) return sum_all(q, kind);
      return finish(q, kind,
                    "What is the difference between the " + hi + " and " + lo +
                        " " + noun(q) + "s?",
                    AggregationOp::DIFFERENCE,
                    {value_cell(hr, hc), value_cell(lr, lc)});
    }
    case 1: {
      if (!ratio_guard(a, b)) return sum_all(q, kind);
      return finish(q, kind,
                    "What is the ratio of the " + hi + " " + noun(q) +
                        " to the " + lo + " one?",
                    AggregationOp::RATIO, {value_cell(hr, hc), value_cell(lr, lc)});
    }
    default:
      return finish(q, kind,
                    "What is the average of the " + hi + " and " + lo + " " +
                        noun(q) + " values?",
                    AggregationOp::AVERAGE,
                    {value_cell(hr, hc), value_cell(lr, lc)});
  }
}

QAExample q_unanswerable(QaContext& q, QuestionKind kind) {
  QAExample ex;
  ex.chart_id = q.d.chart_id;
  ex.kind = kind;
  ex.unanswerable = true;
  int fake = static_cast<int>(q.rng.next_below(kFakePool.size()));
  if (q.rng.next_double() < 0.5) {
    ex.question = "What is the value of " + kFakePool[fake] + "?";
    ex.gold_answer = Answer::number_of(round2(q.rng.uniform(500.0, 1000.0)));
  } else {
    int fake2 = static_cast<int>(q.rng.next_below(kFakePool.size()));
    ex.question = "Which category replaced " + kFakePool[fake] + " this year?";
    ex.gold_answer = Answer::text_of(kFakePool[fake2]);
  }
  return ex;
}

QuestionKind sample_kind(const QuestionMix& mix, Rng& rng) {
  double w[4] = {mix.data_retrieval, mix.visual, mix.compositional,
                 mix.visual_compositional};
  double total = w[0] + w[1] + w[2] + w[3];
  if (total <= 0.0) return QuestionKind::data_retrieval;
  double u = rng.next_double() * total, cum = 0.0;
  for (int i = 0; i < 4; ++i) {
    cum += w[i];
    if (u < cum) return static_cast<QuestionKind>(i);
  }
  return QuestionKind::visual_compositional;
}

std::vector<QAExample> make_questions(const Draft& d, const DataTable& table,
                                      const GenConfig& cfg, Rng rng) {
  std::vector<QAExample> out;
  for (int i = 0; i < cfg.questions_per_chart; ++i) {
    QaContext q{d, table, cfg, rng};
    QuestionKind kind = sample_kind(cfg.mix, rng);
    if (rng.next_double() < cfg.unanswerable_fraction) {
      out.push_back(q_unanswerable(q, kind));
      continue;
    }
    switch (kind) {
      case QuestionKind::data_retrieval: out.push_back(q_data_retrieval(q)); break;
      case QuestionKind::visual: out.push_back(q_visual(q)); break;
      case QuestionKind::compositional: out.push_back(q_compositional(q)); break;
      case QuestionKind::visual_compositional:
        out.push_back(q_visual_compositional(q));
        break;
    }
  }
  return out;
}

std::string pad4(int n) {
  std::string s = std::to_string(n);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace

const char* to_string(QuestionKind k) {
  switch (k) {
    case QuestionKind::data_retrieval: return "data_retrieval";
    case QuestionKind::visual: return "visual";
    case QuestionKind::compositional: return "compositional";
    case QuestionKind::visual_compositional: return "visual_compositional";
  }
  return "data_retrieval";
}

std::optional<QuestionKind> question_kind_from_string(std::string_view s) {
  for (auto k : {QuestionKind::data_retrieval, QuestionKind::visual,
                 QuestionKind::compositional, QuestionKind::visual_compositional})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

void GenConfig::validate() const {
  if (bars < 0 || lines < 0 || pies < 0)
    throw ConfigError("chart counts must be non-negative");
  if (bars + lines + pies == 0)
    throw ConfigError("at least one chart must be requested");
  if (questions_per_chart < 0)
    throw ConfigError("questions_per_chart must be non-negative");
  if (split != "train" && split != "validation" && split != "test")
    throw ConfigError("split must be train, validation or test");
  if (noise.keypoint_sigma < 0.0 || noise.color_sigma < 0.0 ||
      noise.label_dropout < 0.0)
    throw ConfigError("noise parameters must be non-negative");
  if (noise.label_dropout > 1.0)
    throw ConfigError("label_dropout must not exceed 1");
  if (unanswerable_fraction < 0.0 || unanswerable_fraction > 1.0)
    throw ConfigError("unanswerable_fraction must lie in [0, 1]");
  if (positional_bias < 0.0 || positional_bias > 1.0)
    throw ConfigError("positional_bias must lie in [0, 1]");
  if (yesno_weight < 0.0 || yesno_weight > 1.0)
    throw ConfigError("yesno_weight must lie in [0, 1]");
  if (mix.data_retrieval < 0.0 || mix.visual < 0.0 || mix.compositional < 0.0 ||
      mix.visual_compositional < 0.0)
    throw ConfigError("question mix weights must be non-negative");
  if (raster_size != 0 && (raster_size <= 0 || raster_size % 16 != 0))
    throw ConfigError("raster_size must be a positive multiple of 16");
}

std::vector<GeneratedChart> generate_charts(const GenConfig& cfg) {
  cfg.validate();
  Rng master(cfg.seed);
  std::vector<GeneratedChart> out;
  int total = cfg.bars + cfg.lines + cfg.pies;
  for (int i = 0; i < total; ++i) {
    Rng chart_rng = master.split(static_cast<std::uint64_t>(i));
    ChartType type;
    std::string id;
    if (i < cfg.bars) {
      type = ChartType::bar;
      id = "bar-" + pad4(i);
    } else if (i < cfg.bars + cfg.lines) {
      type = ChartType::line;
      id = "line-" + pad4(i - cfg.bars);
    } else {
      type = ChartType::pie;
      id = "pie-" + pad4(i - cfg.bars - cfg.lines);
    }
    Draft d = type == ChartType::pie
                  ? make_pie(id, chart_rng.split(0))
                  : make_bar_or_line(type, id, chart_rng.split(0),
                                     cfg.single_series_only);
    DataTable gold = gold_table_of(d);
    std::vector<QAExample> qa = make_questions(d, gold, cfg, chart_rng.split(1));
    apply_noise(d, cfg.noise, chart_rng.split(2));
    round_geometry(d.spec);

    GeneratedChart g;
    g.chart_id = id;
    g.chart_type = type;
    g.spec = std::move(d.spec);
    g.gold_table = std::move(gold);
    g.mark_cells = std::move(d.mark_cells);
    g.qa = std::move(qa);
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest serialization
// ---------------------------------------------------------------------------

namespace {

json answer_to_json(const Answer& a) {
  switch (a.kind) {
    case Answer::Kind::Number: return {{"kind", "number"}, {"number", a.number}};
    case Answer::Kind::Text: return {{"kind", "text"}, {"text", a.text}};
    case Answer::Kind::Class: return {{"kind", "class"}, {"yes", a.yes}};
  }
  return {};
}

Answer answer_from_json(const json& j) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "number") return Answer::number_of(j.at("number").get<double>());
  if (kind == "text") return Answer::text_of(j.at("text").get<std::string>());
  if (kind == "class") return Answer::class_of(j.at("yes").get<bool>());
  throw std::runtime_error("manifest: unknown answer kind '" + kind + "'");
}

json qa_to_json(const QAExample& ex) {
  json j;
  j["question"] = ex.question;
  j["kind"] = to_string(ex.kind);
  j["gold"] = answer_to_json(ex.gold_answer);
  j["unanswerable"] = ex.unanswerable;
  if (ex.supervision)
    j["supervision"] = json::parse(supervision_to_json(*ex.supervision));
  else
    j["supervision"] = nullptr;
  return j;
}

QAExample qa_from_json(const json& j, const std::string& chart_id) {
  QAExample ex;
  ex.chart_id = chart_id;
  ex.question = j.at("question").get<std::string>();
  auto kind = question_kind_from_string(j.at("kind").get<std::string>());
  if (!kind)
    throw std::runtime_error("manifest: unknown question kind '" +
                             j.at("kind").get<std::string>() + "'");
  ex.kind = *kind;
  ex.gold_answer = answer_from_json(j.at("gold"));
  ex.unanswerable = j.value("unanswerable", false);
  if (j.contains("supervision") && !j.at("supervision").is_null())
    ex.supervision = supervision_from_json(j.at("supervision").dump());
  return ex;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

}  // namespace

int DatasetManifest::total_questions() const {
  int n = 0;
  for (const ChartEntry& c : charts) n += static_cast<int>(c.qa.size());
  return n;
}

std::string manifest_to_json(const DatasetManifest& m, int indent) {
  json j;
  j["split"] = m.split;
  j["seed"] = m.seed;
  j["noise"] = {{"keypoint_sigma", m.noise.keypoint_sigma},
                {"color_sigma", m.noise.color_sigma},
                {"label_dropout", m.noise.label_dropout}};
  j["charts"] = json::array();
  for (const ChartEntry& c : m.charts) {
    json e;
    e["chart_id"] = c.chart_id;
    e["chart_type"] = to_string(c.chart_type);
    e["spec_path"] = c.spec_path;
    e["table_path"] = c.table_path;
    if (c.raster_path) e["raster_path"] = *c.raster_path;
    e["mark_cells"] = json::array();
    for (const MarkCell& mc : c.mark_cells)
      e["mark_cells"].push_back(
          {{"mark_index", mc.mark_index}, {"row", mc.row}, {"col", mc.col}});
    e["qa"] = json::array();
    for (const QAExample& ex : c.qa) e["qa"].push_back(qa_to_json(ex));
    j["charts"].push_back(std::move(e));
  }
  return j.dump(indent);
}

DatasetManifest manifest_from_json(const std::string& raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("manifest: invalid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  const json& n = j.at("noise");
  m.noise.keypoint_sigma = n.at("keypoint_sigma").get<double>();
  m.noise.color_sigma = n.at("color_sigma").get<double>();
  m.noise.label_dropout = n.at("label_dropout").get<double>();
  for (const json& e : j.at("charts")) {
    ChartEntry c;
    c.chart_id = e.at("chart_id").get<std::string>();
    auto type = chart_type_from_string(e.at("chart_type").get<std::string>());
    if (!type)
      throw std::runtime_error("manifest: unknown chart type '" +
                               e.at("chart_type").get<std::string>() + "'");
    c.chart_type = *type;
    c.spec_path = e.at("spec_path").get<std::string>();
    c.table_path = e.at("table_path").get<std::string>();
    if (e.contains("raster_path") && !e.at("raster_path").is_null())
      c.raster_path = e.at("raster_path").get<std::string>();
    for (const json& mc : e.at("mark_cells"))
      c.mark_cells.push_back({mc.at("mark_index").get<int>(),
                              mc.at("row").get<int>(), mc.at("col").get<int>()});
    for (const json& q : e.at("qa")) c.qa.push_back(qa_from_json(q, c.chart_id));
    m.charts.push_back(std::move(c));
  }
  return m;
}

DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<GeneratedChart> charts = generate_charts(cfg);
  fs::create_directories(fs::path(out_dir) / "charts");
  fs::create_directories(fs::path(out_dir) / "tables");
  if (cfg.raster_size > 0) fs::create_directories(fs::path(out_dir) / "rasters");

  DatasetManifest m;
  m.split = cfg.split;
  m.seed = cfg.seed;
  m.noise = cfg.noise;
  for (const GeneratedChart& g : charts) {
    ChartEntry e;
    e.chart_id = g.chart_id;
    e.chart_type = g.chart_type;
    e.spec_path = "charts/" + g.chart_id + ".json";
    e.table_path = "tables/" + g.chart_id + ".csv";
    e.mark_cells = g.mark_cells;
    e.qa = g.qa;
    write_file((fs::path(out_dir) / e.spec_path).string(),
               serialize_chart_spec(g.spec, 2) + "\n");
    write_file((fs::path(out_dir) / e.table_path).string(),
               table_to_csv(g.gold_table));
    if (cfg.raster_size > 0) {
      e.raster_path = "rasters/" + g.chart_id + ".ppm";
      write_ppm((fs::path(out_dir) / *e.raster_path).string(),
                render_chart(g.spec, cfg.raster_size));
    }
    m.charts.push_back(std::move(e));
  }
  write_file((fs::path(out_dir) / "manifest.json").string(),
             manifest_to_json(m, 2) + "\n");
  return m;
}

LoadedDataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path);
  std::ostringstream buf;
  buf << in.rdbuf();
  LoadedDataset d;
  d.manifest = manifest_from_json(buf.str());
  std::filesystem::path parent = std::filesystem::path(manifest_path).parent_path();
  d.base_dir = parent.empty() ? std::string(".") : parent.string();
  return d;
}

Image render_chart(const ChartSpec& spec, int size) {
  if (size <= 0) throw std::invalid_argument("render size must be positive");
  Image img(size, size);
  double sx = size / kCanvasW, sy = size / kCanvasH;
  for (const Mark& mark : spec.marks) {
    if (std::holds_alternative<Rect>(mark.geometry)) {
      const Rect& r = mark.rect();
      int x0 = static_cast<int>(std::lround(r.x * sx));
      int y0 = static_cast<int>(std::lround(r.y * sy));
      int x1 = std::max(x0 + 1, static_cast<int>(std::lround((r.x + r.w) * sx)));
      int y1 = std::max(y0 + 1, static_cast<int>(std::lround((r.y + r.h) * sy)));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) img.set_pixel(x, y, mark.color);
    } else {
      const Point& p = mark.point();
      int cx = static_cast<int>(std::lround(p.x * sx));
      int cy = static_cast<int>(std::lround(p.y * sy));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          img.set_pixel(cx + dx, cy + dy, mark.color);
    }
  }
  return img;
}

}  // namespace cqa
