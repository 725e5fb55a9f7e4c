#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cqa/metrics.hpp"
#include "cqa/qa.hpp"
#include "cqa/rng.hpp"

using namespace cqa;

namespace {

DataTable sample_table() {
  DataTable t;
  t.col_headers = {"A", "B"};
  t.row_labels = {"2015", "2016"};
  t.cells = {{17.13, 3.0}, {40.14, 8.0}};
  return t;
}

// Deliberately separate evaluator used to cross-check execute(): straight
// loops over the raw table with none of the library's resolution helpers.
std::optional<double> oracle_numeric(AggregationOp op,
                                     const std::vector<std::pair<int, int>>& refs,
                                     const DataTable& t) {
  std::vector<double> vals;
  for (auto [r, c] : refs) {
    if (r < 1 || c < 1 || r > t.rows() || c > t.cols()) return std::nullopt;
    auto cell = t.cells[r - 1][c - 1];
    if (!cell) return std::nullopt;
    vals.push_back(*cell);
  }
  switch (op) {
    case AggregationOp::COUNT: return static_cast<double>(vals.size());
    case AggregationOp::SUM: {
      double s = 0;
      for (double v : vals) s += v;
      return s;
    }
    case AggregationOp::AVERAGE: {
      if (vals.empty()) return std::nullopt;
      double s = 0;
      for (double v : vals) s += v;
      return s / vals.size();
    }
    case AggregationOp::DIFFERENCE:
      if (vals.size() != 2) return std::nullopt;
      return vals[0] > vals[1] ? vals[0] - vals[1] : vals[1] - vals[0];
    case AggregationOp::RATIO:
      if (vals.size() != 2 || vals[1] == 0) return std::nullopt;
      return vals[0] / vals[1];
    default: return std::nullopt;
  }
}

DataTable random_table(Rng& rng, int max_dim = 4) {
  DataTable t;
  int rows = 1 + static_cast<int>(rng.next_below(max_dim));
  int cols = 1 + static_cast<int>(rng.next_below(max_dim));
  for (int c = 0; c < cols; ++c) t.col_headers.push_back("s" + std::to_string(c));
  for (int r = 0; r < rows; ++r) t.row_labels.push_back("r" + std::to_string(r));
  t.cells.assign(rows, std::vector<std::optional<double>>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (rng.next_double() < 0.9)
        t.cells[r][c] = std::round(rng.uniform(1, 100) * 100) / 100;
  return t;
}

}  // namespace

TEST_CASE("op names round-trip") {
  const char* names[] = {"none", "count", "sum", "average",
                         "difference", "ratio", "yes", "no"};
  for (int i = 0; i < kNumOps; ++i) {
    auto op = static_cast<AggregationOp>(i);
    CHECK(std::string(to_string(op)) == names[i]);
    CHECK(op_from_string(names[i]) == op);
  }
  CHECK(!op_from_string("max").has_value());
}

TEST_CASE("tokenize splits words and punctuation") {
  CHECK(tokenize("sum?") == std::vector<std::string>{"sum", "?"});
  CHECK(tokenize("Heart disease") == std::vector<std::string>{"heart", "disease"});
  CHECK(tokenize("40.14") == std::vector<std::string>{"40.14"});
  CHECK(tokenize("end.") == std::vector<std::string>{"end", "."});
  CHECK(tokenize("What's the total?") ==
        std::vector<std::string>{"what", "'", "s", "the", "total", "?"});
  CHECK(tokenize("") == std::vector<std::string>{});
  CHECK(tokenize("  spaced   out  ") == std::vector<std::string>{"spaced", "out"});
}

TEST_CASE("linearize a 1x1 table") {
  DataTable t;
  t.col_headers = {"A"};
  t.row_labels = {"r"};
  t.cells = {{5.0}};
  auto lin = linearize("sum?", t);
  REQUIRE(lin.tokens.size() == 7);
  CHECK(lin.tokens[0] == LinearizedToken{"[CLS]", 0, 0, 0});
  CHECK(lin.tokens[1] == LinearizedToken{"sum", 0, 0, 0});
  CHECK(lin.tokens[2] == LinearizedToken{"?", 0, 0, 0});
  CHECK(lin.tokens[3] == LinearizedToken{"[SEP]", 0, 0, 0});
  CHECK(lin.tokens[4] == LinearizedToken{"a", 1, 0, 1});
  CHECK(lin.tokens[5] == LinearizedToken{"r", 1, 1, 0});
  CHECK(lin.tokens[6] == LinearizedToken{"5", 1, 1, 1});
  CHECK(!lin.truncated);
}

TEST_CASE("linearize an empty table") {
  DataTable t;
  auto lin = linearize("anything here?", t);
  CHECK(lin.tokens.front().text == "[CLS]");
  CHECK(lin.tokens.back().text == "[SEP]");
  for (const auto& tok : lin.tokens) CHECK(tok.segment == 0);
}

TEST_CASE("linearize truncates at the cap") {
  DataTable t;
  for (int c = 0; c < 12; ++c) t.col_headers.push_back("col" + std::to_string(c));
  for (int r = 0; r < 25; ++r) {
    t.row_labels.push_back("row" + std::to_string(r));
    t.cells.push_back(std::vector<std::optional<double>>(12, 1.0));
  }
  auto lin = linearize("how many?", t);
  CHECK(lin.tokens.size() == kDefaultMaxSeqLen);
  CHECK(lin.truncated);
  auto wide = linearize("how many?", t, 1024);
  CHECK(!wide.truncated);
  CHECK(wide.tokens.size() == 1 + 3 + 1 + 12 + 25 * 13);
}

TEST_CASE("execute: paper-worked examples") {
  DataTable t = sample_table();
  auto sum = execute(AggregationOp::SUM, {{1, 1}, {2, 1}}, t);
  CHECK(sum.kind == Answer::Kind::Number);
  CHECK(sum.number == doctest::Approx(57.27).epsilon(1e-12));

  auto count = execute(AggregationOp::COUNT, {{1, 1}, {1, 2}, {2, 1}}, t);
  CHECK(count.number == 3.0);

  auto diff = execute(AggregationOp::DIFFERENCE, {{2, 2}, {1, 2}}, t);
  CHECK(diff.number == doctest::Approx(5.0));  // |8 - 3|

  auto ratio = execute(AggregationOp::RATIO, {{2, 2}, {1, 2}}, t);
  CHECK(ratio.number == doctest::Approx(8.0 / 3.0));
}

TEST_CASE("execute: difference is symmetric, ratio is not") {
  DataTable t = sample_table();
  auto ab = execute(AggregationOp::DIFFERENCE, {{1, 2}, {2, 2}}, t);
  auto ba = execute(AggregationOp::DIFFERENCE, {{2, 2}, {1, 2}}, t);
  CHECK(ab == ba);

  auto r_ab = execute(AggregationOp::RATIO, {{1, 2}, {2, 2}}, t);
  auto r_ba = execute(AggregationOp::RATIO, {{2, 2}, {1, 2}}, t);
  CHECK(r_ab.number == doctest::Approx(3.0 / 8.0));
  CHECK(r_ba.number == doctest::Approx(8.0 / 3.0));
}

TEST_CASE("execute: NONE echoes labels and values") {
  DataTable t = sample_table();
  CHECK(execute(AggregationOp::NONE, {{1, 0}}, t) == Answer::text_of("2015"));
  CHECK(execute(AggregationOp::NONE, {{0, 2}}, t) == Answer::text_of("B"));
  CHECK(execute(AggregationOp::NONE, {{2, 1}}, t) == Answer::text_of("40.14"));
  // Multi-cell: row-major join regardless of selection order.
  CHECK(execute(AggregationOp::NONE, {{2, 1}, {1, 0}}, t) ==
        Answer::text_of("2015, 40.14"));
}

TEST_CASE("execute: yes/no ignore cells") {
  DataTable t = sample_table();
  CHECK(execute(AggregationOp::YES, {}, t) == Answer::class_of(true));
  CHECK(execute(AggregationOp::NO, {{1, 1}}, t) == Answer::class_of(false));
  CHECK(Answer::class_of(true).display() == "yes");
  CHECK(Answer::class_of(false).display() == "no");
}

TEST_CASE("execute: error taxonomy") {
  DataTable t = sample_table();
  t.cells[0][1] = std::nullopt;

  auto kind_of = [&](auto fn) {
    try {
      fn();
    } catch (const QaError& e) {
      return e.kind;
    }
    return QaError::Kind::ArityError;
  };

  CHECK(kind_of([&] { execute(AggregationOp::DIFFERENCE, {{1, 1}}, t); }) ==
        QaError::Kind::ArityError);
  CHECK(kind_of([&] { execute(AggregationOp::NONE, {}, t); }) ==
        QaError::Kind::ArityError);
  CHECK(kind_of([&] { execute(AggregationOp::SUM, {{1, 2}}, t); }) ==
        QaError::Kind::NullCell);
  CHECK(kind_of([&] { execute(AggregationOp::SUM, {{1, 0}}, t); }) ==
        QaError::Kind::NullCell);  // label coordinate has no numeric value
  CHECK(kind_of([&] { execute(AggregationOp::NONE, {{0, 0}}, t); }) ==
        QaError::Kind::OutOfRange);
  CHECK(kind_of([&] { execute(AggregationOp::NONE, {{5, 1}}, t); }) ==
        QaError::Kind::OutOfRange);

  DataTable z = sample_table();
  z.cells[0][0] = 0.0;
  CHECK(kind_of([&] { execute(AggregationOp::RATIO, {{1, 2}, {1, 1}}, z); }) ==
        QaError::Kind::DivisionByZero);
}

TEST_CASE("execute agrees with an independent oracle") {
  Rng rng(20260821);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    DataTable t = random_table(rng);
    // Random selection of 1..3 in-range coordinates over grid cells.
    int n = 1 + static_cast<int>(rng.next_below(3));
    std::vector<std::pair<int, int>> refs;
    CellSelection sel;
    for (int k = 0; k < n; ++k) {
      int r = 1 + static_cast<int>(rng.next_below(t.rows()));
      int c = 1 + static_cast<int>(rng.next_below(t.cols()));
      refs.push_back({r, c});
      sel.push_back({r, c});
    }
    for (AggregationOp op : {AggregationOp::COUNT, AggregationOp::SUM,
                             AggregationOp::AVERAGE, AggregationOp::DIFFERENCE,
                             AggregationOp::RATIO}) {
      if ((op == AggregationOp::DIFFERENCE || op == AggregationOp::RATIO) &&
          sel.size() != 2)
        continue;
      auto want = oracle_numeric(op, refs, t);
      if (!want) {
        CHECK_THROWS_AS(execute(op, sel, t), QaError);
      } else {
        auto got = execute(op, sel, t);
        CHECK(got.number == doctest::Approx(*want).epsilon(1e-12));
        ++checked;
      }
    }
    // AVERAGE decomposes as SUM / COUNT whenever all cells resolve.
    if (oracle_numeric(AggregationOp::AVERAGE, refs, t)) {
      double avg = execute(AggregationOp::AVERAGE, sel, t).number;
      double s = execute(AggregationOp::SUM, sel, t).number;
      double c = execute(AggregationOp::COUNT, sel, t).number;
      CHECK(avg == doctest::Approx(s / c).epsilon(1e-12));
    }
  }
  CHECK(checked > 500);
}

TEST_CASE("supervision: worked difference example") {
  DataTable t;
  t.col_headers = {"v"};
  t.row_labels = {"a", "b", "c"};
  t.cells = {{3.0}, {6.0}, {8.0}};
  auto got = synthesize_supervision(t, Answer::number_of(5.0),
                                    {AggregationOp::DIFFERENCE});
  REQUIRE(got.size() == 1);
  CHECK(got[0].op == AggregationOp::DIFFERENCE);
  // The pair holding 3 and 8.
  CHECK(got[0].cells == CellSelection{{1, 1}, {3, 1}});
  CHECK(got[0].scalar_answer == 5.0);
  CHECK(execute(got[0].op, got[0].cells, t).number == doctest::Approx(5.0));
}

TEST_CASE("supervision: ratio keeps the satisfying orientation") {
  DataTable t;
  t.col_headers = {"v"};
  t.row_labels = {"a", "b"};
  t.cells = {{2.0}, {4.0}};
  auto got =
      synthesize_supervision(t, Answer::number_of(2.0), {AggregationOp::RATIO});
  REQUIRE(got.size() == 1);
  // 4 / 2 = 2, so the cell holding 4 comes first.
  CHECK(got[0].cells == CellSelection{{2, 1}, {1, 1}});
  CHECK(execute(AggregationOp::RATIO, got[0].cells, t).number ==
        doctest::Approx(2.0));
}

TEST_CASE("supervision: no match yields an empty list") {
  DataTable t;
  t.col_headers = {"v"};
  t.row_labels = {"a", "b", "c"};
  t.cells = {{1.0}, {2.0}, {3.0}};
  CHECK(synthesize_supervision(t, Answer::number_of(10.0),
                               {AggregationOp::DIFFERENCE, AggregationOp::RATIO})
            .empty());
  CHECK(synthesize_supervision(t, Answer::text_of("not numeric"),
                               {AggregationOp::DIFFERENCE})
            .empty());
}

TEST_CASE("supervision: tolerance admits rounded answers") {
  DataTable t;
  t.col_headers = {"v"};
  t.row_labels = {"a", "b"};
  t.cells = {{10.0}, {4.96}};
  // Exact difference is 5.04; a rounded gold answer of 5 sits within 1%.
  auto got = synthesize_supervision(t, Answer::number_of(5.0),
                                    {AggregationOp::DIFFERENCE});
  CHECK(got.size() == 1);
  // At 0.1% it no longer qualifies.
  CHECK(synthesize_supervision(t, Answer::number_of(5.0),
                               {AggregationOp::DIFFERENCE}, 0.001)
            .empty());
}

TEST_CASE("supervision closure on random tables") {
  Rng rng(4711);
  int emitted = 0;
  for (int trial = 0; trial < 300; ++trial) {
    DataTable t = random_table(rng);
    auto vals = t.numeric_values();
    if (vals.size() < 2) continue;
    // Pick an answer near a true pair statistic half the time.
    double ans;
    if (rng.next_double() < 0.5 && vals.size() >= 2) {
      double a = vals[rng.next_below(vals.size())];
      double b = vals[rng.next_below(vals.size())];
      ans = rng.next_double() < 0.5 ? std::abs(a - b) : (b != 0 ? a / b : 1.0);
    } else {
      ans = rng.uniform(0, 120);
    }
    auto got = synthesize_supervision(t, Answer::number_of(ans),
                                      {AggregationOp::DIFFERENCE,
                                       AggregationOp::RATIO});
    for (const auto& target : got) {
      ++emitted;
      auto back = execute(target.op, target.cells, t);
      CHECK(relaxed_match(back.display(), format_number(ans), 0.01).correct);
    }
    // Row-major, deterministic ordering of results.
    auto again = synthesize_supervision(t, Answer::number_of(ans),
                                        {AggregationOp::RATIO,
                                         AggregationOp::DIFFERENCE});
    CHECK(got == again);
  }
  CHECK(emitted > 100);
}

TEST_CASE("filter: worked examples") {
  DataTable t;
  t.col_headers = {"Share"};
  t.row_labels = {"2009", "2010"};
  t.cells = {{12.44}, {14.0}};

  auto label_hit = answer_in_table_filter(Answer::text_of("2009"), t);
  CHECK(label_hit.keep);
  CHECK(label_hit.matched == FilterMatch::text);

  auto miss = answer_in_table_filter(Answer::text_of("Cape Town context"), t);
  CHECK(!miss.keep);
  CHECK(miss.matched == FilterMatch::none);

  auto cell_hit = answer_in_table_filter(Answer::number_of(12.44), t);
  CHECK(cell_hit.keep);

  auto near = answer_in_table_filter(Answer::number_of(12.5), t);
  CHECK(near.keep);
  CHECK(near.matched == FilterMatch::numeric);

  auto header = answer_in_table_filter(Answer::text_of("  share "), t);
  CHECK(header.keep);
  CHECK(header.matched == FilterMatch::text);

  CHECK(!answer_in_table_filter(Answer::number_of(99.0), t).keep);
}

TEST_CASE("supervision target JSON round-trip") {
  SupervisionTarget t{AggregationOp::DIFFERENCE, {{2, 1}, {1, 1}}, 5.0};
  std::string j = supervision_to_json(t);
  CHECK(j.find("\"difference\"") != std::string::npos);
  CHECK(supervision_from_json(j) == t);

  SupervisionTarget no_scalar{AggregationOp::NONE, {{1, 0}}, std::nullopt};
  CHECK(supervision_from_json(supervision_to_json(no_scalar)) == no_scalar);

  CHECK_THROWS_AS(supervision_from_json("{}"), SchemaError);
  CHECK_THROWS_AS(supervision_from_json(R"({"op":"max","cells":[]})"), SchemaError);
}

TEST_CASE("vocabulary assigns stable ids") {
  Vocabulary v = Vocabulary::build({"total", "what", "the", "what", "40.14"});
  CHECK(v.words[Vocabulary::kPad] == "[PAD]");
  CHECK(v.words[Vocabulary::kCls] == "[CLS]");
  CHECK(v.words[Vocabulary::kSep] == "[SEP]");
  CHECK(v.words[Vocabulary::kUnk] == "[UNK]");
  CHECK(v.size() == 4 + 4);  // duplicates collapse
  CHECK(v.id_of("what") == v.index.at("what"));
  CHECK(v.id_of("unseen-word") == Vocabulary::kUnk);
  // Sorted corpus section makes ids independent of insertion order.
  Vocabulary w = Vocabulary::build({"what", "40.14", "the", "total"});
  CHECK(v.words == w.words);
}
