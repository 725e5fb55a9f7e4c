#include "cqa/qa.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <json.hpp>

namespace cqa {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 8> kOpNames = {
    "none", "count", "sum", "average", "difference", "ratio", "yes", "no"};

std::string fold(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// What a flattened coordinate refers to.
struct CellContent {
  std::string text;
  std::optional<double> value;  // set only for grid cells
};

CellContent resolve(const CellRef& ref, const DataTable& t) {
  if (ref.row == 0 && ref.col == 0)
    throw QaError(QaError::Kind::OutOfRange, "(0, 0) addresses no token");
  if (ref.row < 0 || ref.col < 0 || ref.row > t.rows() || ref.col > t.cols())
    throw QaError(QaError::Kind::OutOfRange,
                  "(" + std::to_string(ref.row) + ", " + std::to_string(ref.col) +
                      ") outside a " + std::to_string(t.rows()) + "x" +
                      std::to_string(t.cols()) + " table");
  if (ref.row == 0) return {t.col_headers[ref.col - 1], std::nullopt};
  if (ref.col == 0) return {t.row_labels[ref.row - 1], std::nullopt};
  const auto& cell = t.at(ref.row - 1, ref.col - 1);
  if (!cell)
    throw QaError(QaError::Kind::NullCell,
                  "cell (" + std::to_string(ref.row) + ", " +
                      std::to_string(ref.col) + ") is null");
  return {format_number(*cell), cell};
}

double numeric_at(const CellRef& ref, const DataTable& t) {
  CellContent c = resolve(ref, t);
  if (!c.value)
    throw QaError(QaError::Kind::NullCell,
                  "(" + std::to_string(ref.row) + ", " + std::to_string(ref.col) +
                      ") is a label, not a numeric cell");
  return *c.value;
}

void require_arity(AggregationOp op, size_t n) {
  size_t lo = 1, hi = SIZE_MAX;
  switch (op) {
    case AggregationOp::DIFFERENCE:
    case AggregationOp::RATIO:
      lo = hi = 2;
      break;
    case AggregationOp::YES:
    case AggregationOp::NO:
      lo = 0;
      break;
    default:
      break;
  }
  if (n < lo || n > hi)
    throw QaError(QaError::Kind::ArityError,
                  std::string(to_string(op)) + " got " + std::to_string(n) +
                      " cells");
}

}  // namespace

const char* to_string(AggregationOp op) {
  return kOpNames[static_cast<int>(op)];
}

std::optional<AggregationOp> op_from_string(std::string_view s) {
  for (size_t i = 0; i < kOpNames.size(); ++i)
    if (s == kOpNames[i]) return static_cast<AggregationOp>(i);
  return std::nullopt;
}

std::string Answer::display() const {
  switch (kind) {
    case Kind::Number: return format_number(number);
    case Kind::Text: return text;
    case Kind::Class: return yes ? "yes" : "no";
  }
  return {};
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (size_t i = 0; i < text.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '.' && i > 0 && i + 1 < text.size() &&
               std::isdigit(static_cast<unsigned char>(text[i - 1])) &&
               std::isdigit(static_cast<unsigned char>(text[i + 1])) &&
               !cur.empty()) {
      cur.push_back('.');
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return out;
}

LinearizedInput linearize(const std::string& question, const DataTable& table,
                          int max_len) {
  LinearizedInput out;
  auto push = [&](LinearizedToken tok) {
    if (static_cast<int>(out.tokens.size()) < max_len)
      out.tokens.push_back(std::move(tok));
    else
      out.truncated = true;
  };
  push({"[CLS]", 0, 0, 0});
  for (auto& w : tokenize(question)) push({std::move(w), 0, 0, 0});
  push({"[SEP]", 0, 0, 0});
  for (const FlattenedToken& ft : flatten_table(table))
    for (auto& w : tokenize(ft.text)) push({std::move(w), 1, ft.row, ft.col});
  return out;
}

Answer execute(AggregationOp op, const CellSelection& cells, const DataTable& table) {
  require_arity(op, cells.size());
  switch (op) {
    case AggregationOp::NONE: {
      CellSelection ordered = cells;
      std::sort(ordered.begin(), ordered.end());
      std::string joined;
      for (const CellRef& ref : ordered) {
        if (!joined.empty()) joined += ", ";
        joined += resolve(ref, table).text;
      }
      return Answer::text_of(joined);
    }
    case AggregationOp::COUNT:
      for (const CellRef& ref : cells) resolve(ref, table);  // range/null checks
      return Answer::number_of(static_cast<double>(cells.size()));
    case AggregationOp::SUM:
    case AggregationOp::AVERAGE: {
      double sum = 0.0;
      for (const CellRef& ref : cells) sum += numeric_at(ref, table);
      if (op == AggregationOp::AVERAGE) sum /= static_cast<double>(cells.size());
      return Answer::number_of(sum);
    }
    case AggregationOp::DIFFERENCE: {
      double a = numeric_at(cells[0], table), b = numeric_at(cells[1], table);
      return Answer::number_of(std::abs(a - b));
    }
    case AggregationOp::RATIO: {
      double a = numeric_at(cells[0], table), b = numeric_at(cells[1], table);
      if (b == 0.0)
        throw QaError(QaError::Kind::DivisionByZero, "ratio denominator is zero");
      return Answer::number_of(a / b);
    }
    case AggregationOp::YES:
      return Answer::class_of(true);
    case AggregationOp::NO:
      return Answer::class_of(false);
  }
  throw QaError(QaError::Kind::ArityError, "unknown op");
}

std::vector<SupervisionTarget> synthesize_supervision(
    const DataTable& table, const Answer& answer,
    const std::vector<AggregationOp>& ops, double tol) {
  std::optional<double> target;
  if (answer.kind == Answer::Kind::Number)
    target = answer.number;
  else if (answer.kind == Answer::Kind::Text)
    target = parse_number(answer.text);
  std::vector<SupervisionTarget> out;
  if (!target) return out;
  double want = *target;
  double band = tol * std::abs(want);

  bool do_diff = std::find(ops.begin(), ops.end(), AggregationOp::DIFFERENCE) !=
                 ops.end();
  bool do_ratio =
      std::find(ops.begin(), ops.end(), AggregationOp::RATIO) != ops.end();

  struct Flat {
    CellRef ref;
    double value;
  };
  std::vector<Flat> cells;
  for (int r = 0; r < table.rows(); ++r)
    for (int c = 0; c < table.cols(); ++c)
      if (table.at(r, c)) cells.push_back({{r + 1, c + 1}, *table.at(r, c)});

  for (size_t i = 0; i < cells.size(); ++i) {
    for (size_t j = i + 1; j < cells.size(); ++j) {
      double a = cells[i].value, b = cells[j].value;
      if (do_diff && std::abs(std::abs(a - b) - want) <= band)
        out.push_back({AggregationOp::DIFFERENCE,
                       {cells[i].ref, cells[j].ref},
                       want});
      if (do_ratio) {
        // Prefer the row-major orientation when both divide out right.
        if (b != 0.0 && std::abs(a / b - want) <= band)
          out.push_back({AggregationOp::RATIO, {cells[i].ref, cells[j].ref}, want});
        else if (a != 0.0 && std::abs(b / a - want) <= band)
          out.push_back({AggregationOp::RATIO, {cells[j].ref, cells[i].ref}, want});
      }
    }
  }
  return out;
}

FilterDecision answer_in_table_filter(const Answer& answer, const DataTable& table,
                                      double tol) {
  std::string want = fold(answer.display());
  for (const std::string& h : table.col_headers)
    if (fold(h) == want) return {true, FilterMatch::text};
  for (const std::string& l : table.row_labels)
    if (fold(l) == want) return {true, FilterMatch::text};
  for (int r = 0; r < table.rows(); ++r)
    for (int c = 0; c < table.cols(); ++c)
      if (table.at(r, c) && fold(format_number(*table.at(r, c))) == want)
        return {true, FilterMatch::text};

  std::optional<double> numeric;
  if (answer.kind == Answer::Kind::Number)
    numeric = answer.number;
  else if (answer.kind == Answer::Kind::Text)
    numeric = parse_number(answer.text);
  if (numeric) {
    for (int r = 0; r < table.rows(); ++r) {
      for (int c = 0; c < table.cols(); ++c) {
        if (!table.at(r, c)) continue;
        double cell = *table.at(r, c);
        bool ok = cell == 0.0 ? *numeric == 0.0
                              : std::abs(*numeric - cell) <= tol * std::abs(cell);
        if (ok) return {true, FilterMatch::numeric};
      }
    }
  }
  return {false, FilterMatch::none};
}

std::string supervision_to_json(const SupervisionTarget& t) {
  json j;
  j["op"] = to_string(t.op);
  j["cells"] = json::array();
  for (const CellRef& c : t.cells) j["cells"].push_back(json::array({c.row, c.col}));
  if (t.scalar_answer) j["scalar_answer"] = *t.scalar_answer;
  return j.dump();
}

SupervisionTarget supervision_from_json(const std::string& raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  SupervisionTarget t;
  if (!j.contains("op") || !j.at("op").is_string())
    throw SchemaError("op", "missing or not a string");
  auto op = op_from_string(j.at("op").get<std::string>());
  if (!op) throw SchemaError("op", "unknown operation");
  t.op = *op;
  if (!j.contains("cells") || !j.at("cells").is_array())
    throw SchemaError("cells", "missing or not an array");
  for (size_t i = 0; i < j.at("cells").size(); ++i) {
    const json& c = j.at("cells")[i];
    if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() ||
        !c[1].is_number_integer())
      throw SchemaError("cells[" + std::to_string(i) + "]", "expected [row, col]");
    t.cells.push_back({c[0].get<int>(), c[1].get<int>()});
  }
  if (j.contains("scalar_answer")) {
    if (!j.at("scalar_answer").is_number())
      throw SchemaError("scalar_answer", "expected a number");
    t.scalar_answer = j.at("scalar_answer").get<double>();
  }
  return t;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus_tokens) {
  Vocabulary v;
  v.words = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
  std::vector<std::string> uniq = corpus_tokens;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  for (std::string& w : uniq)
    if (std::find(v.words.begin(), v.words.end(), w) == v.words.end())
      v.words.push_back(std::move(w));
  for (size_t i = 0; i < v.words.size(); ++i)
    v.index[v.words[i]] = static_cast<int>(i);
  return v;
}

int Vocabulary::id_of(const std::string& w) const {
  auto it = index.find(w);
  return it == index.end() ? kUnk : it->second;
}

}  // namespace cqa
