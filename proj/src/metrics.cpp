#include "cqa/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "cqa/chart_model.hpp"

namespace cqa {

namespace {

constexpr double kTieEps = 1e-12;

std::string trim_casefold(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Jonker-Volgenant shortest augmenting path; returns row->col and total cost.
Assignment solve_raw(const std::vector<std::vector<double>>& a) {
  int n = static_cast<int>(a.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  Assignment out;
  out.row_to_col.assign(n, -1);
  for (int j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) out.total_cost += a[i][out.row_to_col[i]];
  return out;
}

}  // namespace

const char* to_string(MatchReason r) {
  switch (r) {
    case MatchReason::numeric_within_tol: return "numeric_within_tol";
    case MatchReason::exact_text: return "exact_text";
    case MatchReason::numeric_out_of_tol: return "numeric_out_of_tol";
    case MatchReason::text_mismatch: return "text_mismatch";
    case MatchReason::type_mismatch: return "type_mismatch";
  }
  return "?";
}

MatchVerdict relaxed_match(std::string_view pred, std::string_view gold, double tol) {
  auto pn = parse_number(pred);
  auto gn = parse_number(gold);
  if (pn && gn) {
    bool ok = std::abs(*pn - *gn) <= tol * std::abs(*gn);
    return {ok, ok ? MatchReason::numeric_within_tol : MatchReason::numeric_out_of_tol};
  }
  if (!pn && !gn) {
    bool ok = trim_casefold(pred) == trim_casefold(gold);
    return {ok, ok ? MatchReason::exact_text : MatchReason::text_mismatch};
  }
  return {false, MatchReason::type_mismatch};
}

double value_distance(double gt, double pr) {
  if (gt == 0.0) return pr == 0.0 ? 0.0 : 1.0;
  return std::min(1.0, std::abs(gt - pr) / std::abs(gt));
}

Assignment solve_assignment(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != n)
      throw MetricsError(MetricsError::Kind::NonFiniteCost, "cost matrix not square");
    for (double c : row)
      if (!std::isfinite(c))
        throw MetricsError(MetricsError::Kind::NonFiniteCost, "non-finite cost entry");
  }
  if (n == 0) return {};

  Assignment base = solve_raw(cost);

  // Lexicographic refinement: fix rows top-down to the smallest column whose
  // completion still attains the optimal total.
  std::vector<int> fixed(n, -1);
  std::vector<char> col_taken(n, 0);
  double fixed_cost = 0.0;
  for (int i = 0; i < n; ++i) {
    int chosen = -1;
    for (int j = 0; j < n; ++j) {
      if (col_taken[j]) continue;
      if (j >= base.row_to_col[i] && chosen == -1) {
        // The base solution already provides an optimal completion through
        // column base.row_to_col[i]; only columns before it can improve lex
        // order, so stop probing here.
        chosen = base.row_to_col[i];
        break;
      }
      // Candidate sub-problem: rows i+1.. over the free columns minus j.
      std::vector<int> free_cols;
      for (int c = 0; c < n; ++c)
        if (!col_taken[c] && c != j) free_cols.push_back(c);
      std::vector<std::vector<double>> sub(n - i - 1,
                                           std::vector<double>(n - i - 1));
      for (int r = i + 1; r < n; ++r)
        for (size_t k = 0; k < free_cols.size(); ++k)
          sub[r - i - 1][k] = cost[r][free_cols[k]];
      double rest = sub.empty() ? 0.0 : solve_raw(sub).total_cost;
      if (fixed_cost + cost[i][j] + rest <= base.total_cost + kTieEps) {
        chosen = j;
        // Re-anchor the base solution to pass through (i, j) so later rows
        // can reuse its columns as optimal completions.
        std::vector<int> rebuilt(base.row_to_col.begin(), base.row_to_col.begin() + i);
        rebuilt.push_back(j);
        if (!sub.empty()) {
          Assignment s = solve_raw(sub);
          for (int r = i + 1; r < n; ++r)
            rebuilt.push_back(free_cols[s.row_to_col[r - i - 1]]);
        }
        base.row_to_col = rebuilt;
        break;
      }
    }
    fixed[i] = chosen;
    col_taken[chosen] = 1;
    fixed_cost += cost[i][chosen];
  }

  Assignment out;
  out.row_to_col = fixed;
  out.total_cost = fixed_cost;
  return out;
}

ExtractionScore extraction_score(const std::vector<ChartValuePair>& charts) {
  ExtractionScore out;
  double sum = 0.0;
  for (const auto& chart : charts) {
    int gold_n = static_cast<int>(chart.gold.size());
    int pred_n = static_cast<int>(chart.predicted.size());
    if (gold_n == 0 && pred_n == 0)
      throw MetricsError(MetricsError::Kind::EmptyChart,
                         "chart '" + chart.chart_id + "' has no values on either side");
    int k = std::max(gold_n, pred_n);
    std::vector<std::vector<double>> cost(k, std::vector<double>(k, 1.0));
    for (int i = 0; i < gold_n; ++i)
      for (int j = 0; j < pred_n; ++j)
        cost[i][j] = value_distance(chart.gold[i], chart.predicted[j]);
    Assignment a = solve_assignment(cost);
    ChartScore cs{chart.chart_id, a.total_cost, k, 1.0 - a.total_cost / k};
    sum += cs.score;
    out.per_chart.push_back(std::move(cs));
  }
  out.overall = charts.empty() ? 0.0 : sum / static_cast<double>(charts.size());
  return out;
}

double relaxed_accuracy(const std::vector<std::string>& predictions,
                        const std::vector<std::string>& golds, double tol) {
  if (predictions.size() != golds.size())
    throw MetricsError(MetricsError::Kind::LengthMismatch,
                       "prediction/gold lists differ in length");
  if (predictions.empty()) return 0.0;
  int correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i)
    if (relaxed_match(predictions[i], golds[i], tol).correct) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

}  // namespace cqa
