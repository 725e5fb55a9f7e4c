#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cqa/chart_model.hpp"
#include "cqa/rng.hpp"

using namespace cqa;

namespace {

std::string minimal_bar_spec_json() {
  return R"({
    "chart_type": "bar",
    "plot_area": {"x": 80, "y": 60, "w": 640, "h": 480},
    "marks": [
      {"kind": "bar", "geometry": {"x": 100, "y": 300, "w": 40, "h": 240},
       "color": [200, 60, 60]}
    ],
    "texts": [
      {"role": "yAxisLabel", "text": "0", "bbox": {"x": 60, "y": 534, "w": 14, "h": 12}},
      {"role": "yAxisLabel", "text": "50", "bbox": {"x": 54, "y": 294, "w": 20, "h": 12}},
      {"role": "xAxisLabel", "text": "2015", "bbox": {"x": 100, "y": 545, "w": 40, "h": 14}}
    ]
  })";
}

}  // namespace

TEST_CASE("enum names round-trip") {
  CHECK(std::string(to_string(ChartType::bar)) == "bar");
  CHECK(chart_type_from_string("pie") == ChartType::pie);
  CHECK(!chart_type_from_string("scatter").has_value());

  CHECK(std::string(to_string(MarkKind::pie_boundary_point)) == "pie_boundary_point");
  CHECK(mark_kind_from_string("legend_preview") == MarkKind::legend_preview);

  // All 15 roles survive the round trip with their exact spellings.
  const char* names[] = {"Legend",      "yAxisTitle", "ChartTitle",  "xAxisTitle",
                         "LegendPreview", "PlotArea", "yAxisLabel",  "xAxisLabel",
                         "LegendLabel", "PieLabel",   "bar",         "pie",
                         "pieSlice",    "line",       "dotLine"};
  for (const char* n : names) {
    auto role = text_role_from_string(n);
    REQUIRE(role.has_value());
    CHECK(std::string(to_string(*role)) == n);
  }
  CHECK(!text_role_from_string("legend").has_value());  // case matters
}

TEST_CASE("minimal bar spec parses") {
  ChartSpec spec = parse_chart_spec(minimal_bar_spec_json());
  CHECK(spec.chart_type == ChartType::bar);
  CHECK(spec.plot_area == Rect{80, 60, 640, 480});
  REQUIRE(spec.marks.size() == 1);
  CHECK(spec.marks[0].kind == MarkKind::bar);
  CHECK(spec.marks[0].rect() == Rect{100, 300, 40, 240});
  CHECK(spec.marks[0].color == Rgb{200, 60, 60});
  CHECK(!spec.marks[0].series_hint.has_value());
  CHECK(spec.texts.size() == 3);
  CHECK(spec.texts_with_role(TextRole::yAxisLabel).size() == 2);
  CHECK(spec.texts_with_role(TextRole::Legend).empty());
}

TEST_CASE("spec round-trips through JSON") {
  ChartSpec spec = parse_chart_spec(minimal_bar_spec_json());
  spec.marks[0].series_hint = "Brazil";
  ChartSpec again = parse_chart_spec(serialize_chart_spec(spec, 2));
  CHECK(again == spec);
}

TEST_CASE("schema errors carry a path") {
  try {
    parse_chart_spec(R"({"chart_type": "bar"})");
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.path == "plot_area");
  }

  try {
    parse_chart_spec(R"({
      "chart_type": "bar",
      "plot_area": {"x": 0, "y": 0, "w": 10, "h": 10},
      "marks": [{"kind": "bar", "geometry": {"x": 1, "y": 1, "w": 2, "h": 2},
                 "color": [1, 2]}],
      "texts": []
    })");
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.path == "marks[0].color");
  }

  CHECK_THROWS_AS(parse_chart_spec("not json at all"), SchemaError);
  CHECK_THROWS_AS(parse_chart_spec(R"({"chart_type": "trellis", "plot_area":
    {"x":0,"y":0,"w":1,"h":1}, "marks": [], "texts": []})"),
                  SchemaError);
}

TEST_CASE("invariants: pie needs a center and perimeter points") {
  std::string no_center = R"({
    "chart_type": "pie",
    "plot_area": {"x": 80, "y": 60, "w": 640, "h": 480},
    "marks": [
      {"kind": "pie_boundary_point", "geometry": {"x": 400, "y": 60}, "color": [1,2,3]},
      {"kind": "pie_boundary_point", "geometry": {"x": 640, "y": 300}, "color": [4,5,6]}
    ],
    "texts": []
  })";
  CHECK_THROWS_AS(parse_chart_spec(no_center), InvariantError);
}

TEST_CASE("invariants: geometry kind must match mark kind") {
  std::string bar_with_point = R"({
    "chart_type": "bar",
    "plot_area": {"x": 0, "y": 0, "w": 100, "h": 100},
    "marks": [{"kind": "bar", "geometry": {"x": 5, "y": 5}, "color": [0,0,0]}],
    "texts": [
      {"role": "yAxisLabel", "text": "0", "bbox": {"x":0,"y":0,"w":1,"h":1}},
      {"role": "yAxisLabel", "text": "10", "bbox": {"x":0,"y":5,"w":1,"h":1}}
    ]
  })";
  CHECK_THROWS_AS(parse_chart_spec(bar_with_point), InvariantError);
}

TEST_CASE("invariants: negative bar extent rejected") {
  ChartSpec spec = parse_chart_spec(minimal_bar_spec_json());
  spec.marks[0].geometry = Rect{100, 300, -40, 240};
  CHECK_THROWS_AS(validate(spec), InvariantError);
}

TEST_CASE("invariants: bar/line charts need two numeric y labels") {
  ChartSpec spec = parse_chart_spec(minimal_bar_spec_json());
  spec.texts[1].text = "high";  // second numeric label gone
  CHECK_THROWS_AS(validate(spec), InvariantError);
}

TEST_CASE("parse_number accepts chart text forms") {
  auto expect = [](std::string_view s, double v) {
    auto got = parse_number(s);
    REQUIRE_MESSAGE(got.has_value(), "failed on: " << s);
    CHECK(*got == doctest::Approx(v).epsilon(1e-12));
  };
  expect("40.14", 40.14);
  expect("1e6", 1e6);
  expect("12.44 percent", 12.44);
  expect("38%", 38.0);
  expect("$1,200", 1200.0);
  expect("3.5K", 3500.0);
  expect("2M", 2e6);
  expect("1.2B", 1.2e9);
  expect("-7.5", -7.5);
  expect("+4", 4.0);
  expect("2,345,678", 2345678.0);
  expect("1E-3", 1e-3);
  expect("€25", 25.0);
  expect("0", 0.0);
  expect(".5", 0.5);

  CHECK(!parse_number("Snapchat").has_value());
  CHECK(!parse_number("").has_value());
  CHECK(!parse_number("N/A").has_value());
  CHECK(!parse_number("-").has_value());
  CHECK(!parse_number("$").has_value());
}

TEST_CASE("parse_number does not read magnitude suffix mid-word") {
  // 'Million' spelled out: the 'M' must not multiply because it is not a
  // standalone suffix; the numeric value stays 3.
  auto got = parse_number("3Million");
  REQUIRE(got.has_value());
  CHECK(*got == 3.0);
}

TEST_CASE("format_number round-trips and is terse") {
  CHECK(format_number(40.14) == "40.14");
  CHECK(format_number(5.0) == "5");
  CHECK(format_number(-0.25) == "-0.25");
  for (double v : {3.3, 1.0 / 3.0, 123456.789, 1e-9, 2e20}) {
    CHECK(parse_number(format_number(v)) == doctest::Approx(v).epsilon(1e-15));
  }
}

TEST_CASE("flatten 1x1 table") {
  DataTable t;
  t.col_headers = {"A"};
  t.row_labels = {"r"};
  t.cells = {{5.0}};
  auto toks = flatten_table(t);
  REQUIRE(toks.size() == 3);
  CHECK(toks[0] == FlattenedToken{"A", 0, 1, std::nullopt});
  CHECK(toks[1] == FlattenedToken{"r", 1, 0, std::nullopt});
  CHECK(toks[2].row == 1);
  CHECK(toks[2].col == 1);
  CHECK(toks[2].value == 5.0);
}

TEST_CASE("flatten emits row-major order and skips nulls") {
  DataTable t;
  t.col_headers = {"c1", "c2"};
  t.row_labels = {"r1", "r2"};
  t.cells = {{1.0, std::nullopt}, {3.0, 4.0}};
  auto toks = flatten_table(t);
  // headers, r1 label, one cell, r2 label, two cells
  REQUIRE(toks.size() == 2 + 1 + 1 + 1 + 2);
  CHECK(toks[2].text == "r1");
  CHECK(toks[3].value == 1.0);
  CHECK(toks[4].text == "r2");
  CHECK(toks[5].value == 3.0);
  CHECK(toks[6].value == 4.0);
  // (0,0) never appears
  for (const auto& tok : toks) CHECK((tok.row != 0 || tok.col != 0));
}

TEST_CASE("flatten/regroup identity on random tables") {
  Rng rng(20260821);
  for (int trial = 0; trial < 50; ++trial) {
    int rows = 1 + static_cast<int>(rng.next_below(20));
    int cols = 1 + static_cast<int>(rng.next_below(20));
    DataTable t;
    for (int c = 0; c < cols; ++c) t.col_headers.push_back("c" + std::to_string(c));
    for (int r = 0; r < rows; ++r) t.row_labels.push_back("r" + std::to_string(r));
    t.cells.assign(rows, std::vector<std::optional<double>>(cols));
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        if (rng.next_double() < 0.85)
          t.cells[r][c] = std::round(rng.uniform(-500, 500) * 100) / 100;
    auto grid = regroup_cells(flatten_table(t), rows, cols);
    CHECK(grid == t.cells);
  }
}

TEST_CASE("csv round-trip with quoting") {
  DataTable t;
  t.col_headers = {"US, Inc.", "plain"};
  t.row_labels = {"a \"quoted\" row", "r2"};
  t.cells = {{1.5, std::nullopt}, {-3.0, 400.0}};
  std::string csv = table_to_csv(t);
  CHECK(csv.substr(0, 1) == ",");  // header row leads with the empty corner
  DataTable back = table_from_csv(csv);
  CHECK(back == t);
}

TEST_CASE("label_before orders by x, then y, then text") {
  TextElement a{TextRole::xAxisLabel, "b", Rect{10, 0, 10, 10}};
  TextElement b{TextRole::xAxisLabel, "a", Rect{30, 0, 10, 10}};
  CHECK(label_before(a, b));
  CHECK(!label_before(b, a));
  TextElement c{TextRole::xAxisLabel, "c", Rect{10, 20, 10, 10}};
  CHECK(label_before(a, c));
  TextElement d{TextRole::xAxisLabel, "a", Rect{10, 0, 10, 10}};
  CHECK(label_before(d, a));
}

TEST_CASE("rng is platform-stable") {
  Rng rng(42);
  CHECK(rng.next_u64() == Rng(42).next_u64());
  Rng s1 = Rng(42).split(1);
  Rng s2 = Rng(42).split(2);
  CHECK(s1.next_u64() != s2.next_u64());
  double x = Rng(7).next_double();
  CHECK(x >= 0.0);
  CHECK(x < 1.0);
  // splitmix64 of (42 + golden gamma), first draw — fixed forever
  CHECK(Rng(0).next_u64() == Rng(0).next_u64());
}
