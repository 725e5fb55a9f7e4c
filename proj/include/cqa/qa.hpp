#pragma once
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cqa/chart_model.hpp"

namespace cqa {

// Order is load-bearing: the model's operation head indexes classes by the
// values below.
enum class AggregationOp {
  NONE = 0,
  COUNT,
  SUM,
  AVERAGE,
  DIFFERENCE,
  RATIO,
  YES,
  NO,
};
inline constexpr int kNumOps = 8;

const char* to_string(AggregationOp op);
std::optional<AggregationOp> op_from_string(std::string_view s);

// Coordinate into the flattened table space: row 0 holds column headers,
// column 0 holds row labels, grid cell (i, j) sits at (i+1, j+1). (0, 0) is
// unused.
struct CellRef {
  int row = 0;
  int col = 0;
  bool operator==(const CellRef&) const = default;
  auto operator<=>(const CellRef&) const = default;  // row-major order
};

// Ordered list of coordinates. Order matters to RATIO (first / second);
// supervision synthesis stores the orientation that reproduces the answer,
// while predicted selections are assembled in row-major order.
using CellSelection = std::vector<CellRef>;

struct Answer {
  enum class Kind { Number, Text, Class };
  Kind kind = Kind::Text;
  double number = 0.0;
  std::string text;
  bool yes = false;

  static Answer number_of(double v) { return {Kind::Number, v, {}, false}; }
  static Answer text_of(std::string s) { return {Kind::Text, 0.0, std::move(s), false}; }
  static Answer class_of(bool y) { return {Kind::Class, 0.0, {}, y}; }

  // Canonical surface form: numbers via format_number, classes as yes/no.
  std::string display() const;
  bool operator==(const Answer&) const = default;
};

struct SupervisionTarget {
  AggregationOp op = AggregationOp::NONE;
  CellSelection cells;
  std::optional<double> scalar_answer;
  bool operator==(const SupervisionTarget&) const = default;
};

std::string supervision_to_json(const SupervisionTarget& t);
SupervisionTarget supervision_from_json(const std::string& raw);

struct QaError : std::runtime_error {
  enum class Kind { ArityError, NullCell, DivisionByZero, OutOfRange };
  QaError(Kind k, const std::string& what_in) : std::runtime_error(what_in), kind(k) {}
  Kind kind;
};

// Word-level tokenization: lowercased runs of letters and digits, with '.'
// kept inside a run only between two digits so numeric strings survive
// whole; every other non-space character is its own token.
std::vector<std::string> tokenize(std::string_view text);

struct LinearizedToken {
  std::string text;
  int segment = 0;  // 0 = question side, 1 = table side
  int row = 0;
  int col = 0;
  bool operator==(const LinearizedToken&) const = default;
};

struct LinearizedInput {
  std::vector<LinearizedToken> tokens;
  bool truncated = false;
};

inline constexpr int kDefaultMaxSeqLen = 256;

// [CLS] question [SEP] flattened-table, hard-capped at max_len tokens.
// Question-side tokens sit at coordinate (0, 0); table tokens carry their
// flatten_table coordinates.
LinearizedInput linearize(const std::string& question, const DataTable& table,
                          int max_len = kDefaultMaxSeqLen);

// Applies an aggregation over the selected coordinates. NONE echoes the
// selected labels/values as text; COUNT/SUM/AVERAGE fold numeric cells;
// DIFFERENCE is |a-b|; RATIO divides first by second in stored order;
// YES/NO ignore the selection.
Answer execute(AggregationOp op, const CellSelection& cells, const DataTable& table);

// Scans all unordered pairs of non-null cells for ones whose difference or
// ratio reproduces the answer within tol. Ratio pairs are stored in the
// orientation that matched, so re-executing any emitted target reproduces
// the answer. Non-numeric answers yield an empty list.
std::vector<SupervisionTarget> synthesize_supervision(
    const DataTable& table, const Answer& answer,
    const std::vector<AggregationOp>& ops, double tol = 0.01);

enum class FilterMatch { none, text, numeric };

struct FilterDecision {
  bool keep = false;
  FilterMatch matched = FilterMatch::none;
};

// Keep iff the answer's surface form equals some header/row label/cell after
// trim+case-fold, or a numeric answer relaxed-matches some numeric cell.
FilterDecision answer_in_table_filter(const Answer& answer, const DataTable& table,
                                      double tol = 0.05);

// Fixed special token ids; corpus words follow in sorted order.
struct Vocabulary {
  static constexpr int kPad = 0, kCls = 1, kSep = 2, kUnk = 3;
  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  static Vocabulary build(const std::vector<std::string>& corpus_tokens);
  int id_of(const std::string& w) const;
  int size() const { return static_cast<int>(words.size()); }
  bool operator==(const Vocabulary& o) const { return words == o.words; }
};

}  // namespace cqa
