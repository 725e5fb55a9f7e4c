#pragma once
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cqa {

enum class MatchReason {
  numeric_within_tol,
  exact_text,
  numeric_out_of_tol,
  text_mismatch,
  type_mismatch,
};

const char* to_string(MatchReason r);

struct MatchVerdict {
  bool correct = false;
  MatchReason reason = MatchReason::text_mismatch;
  bool operator==(const MatchVerdict&) const = default;
};

// Numeric branch applies only when BOTH sides lex as numbers: correct iff
// |pred-gold| <= tol*|gold| (gold 0 demands pred exactly 0). Otherwise exact
// string match after trim + ASCII case-fold. One-sided numbers never match.
MatchVerdict relaxed_match(std::string_view pred, std::string_view gold,
                           double tol = 0.05);

// D(gt, pr) = min(1, |gt-pr| / |gt|); D(0, pr) is 0 when pr is 0, else 1.
double value_distance(double gt, double pr);

struct MetricsError : std::runtime_error {
  enum class Kind { NonFiniteCost, EmptyChart, LengthMismatch };
  MetricsError(Kind k, const std::string& what_in)
      : std::runtime_error(what_in), kind(k) {}
  Kind kind;
};

struct Assignment {
  std::vector<int> row_to_col;
  double total_cost = 0.0;
};

// Exact minimum-cost perfect matching on a square matrix (O(K^3) shortest
// augmenting paths). Among all optimal assignments, returns the one whose
// row->col permutation is lexicographically smallest.
Assignment solve_assignment(const std::vector<std::vector<double>>& cost);

struct ChartScore {
  std::string chart_id;
  double cost = 0.0;
  int k = 0;
  double score = 0.0;  // 1 - cost/k
};

struct ExtractionScore {
  std::vector<ChartScore> per_chart;
  double overall = 0.0;  // arithmetic mean of per-chart scores
};

struct ChartValuePair {
  std::string chart_id;
  std::vector<double> gold;
  std::vector<double> predicted;
};

// Per chart: K = max(N, M); K x K matrix of value_distance entries with
// padding rows/columns at cost 1.0 for unmatched values.
ExtractionScore extraction_score(const std::vector<ChartValuePair>& charts);

// Mean of relaxed_match verdicts over aligned lists. Empty lists score 0.
double relaxed_accuracy(const std::vector<std::string>& predictions,
                        const std::vector<std::string>& golds, double tol = 0.05);

}  // namespace cqa
