#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace kcalnet {

/// Paired predictions, index i of each list describing the same dish.
struct PredictionSet {
  std::vector<std::string> dish_ids;
  std::vector<double> y_true;
  std::vector<double> y_pred;

  std::size_t size() const { return dish_ids.size(); }
  /// |y_pred - y_true| per dish.
  std::vector<double> abs_errors() const;
  /// Throws ArgumentError on unequal lengths.
  void validate() const;

  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

struct EvalReport {
  double mae = 0.0;
  /// Sample (n - 1) standard deviation of the absolute errors.
  double abs_err_std = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

/// Throws ArgumentError for n < 2 and DegenerateVarianceError when y_true is constant.
EvalReport report(const PredictionSet& ps);

struct TTestResult {
  double t_stat = 0.0;
  double p_value = 0.0;
  std::size_t df = 0;
  double mean_diff = 0.0;
  double sd_diff = 0.0;
  double alpha = 0.1;
  bool reject_null = false;
};

/// P(T > t) for Student's t with `df` degrees of freedom, from the regularized
/// incomplete beta I_x(df/2, 1/2) at x = df / (df + t^2).
double student_t_upper_tail(double t, double df);

/// One-tailed paired test of H1: mean(errors_a - errors_b) > 0. Identical
/// error lists give t = 0, p = 0.5. Throws ArgumentError for unequal lengths or
/// n < 2 and DegenerateVarianceError when every difference is the same nonzero value.
TTestResult paired_t_test(const std::vector<double>& errors_a, const std::vector<double>& errors_b, double alpha = 0.1);

/// Test result for a published statistic; the verdict uses the given p.
TTestResult ttest_from_summary(double t_stat, double p_value, std::size_t n, double alpha);

/// Differences are oriented so that positive means B improves on A:
/// delta_mae = mae_a - mae_b, delta_std = std_a - std_b, delta_r2 = r2_b - r2_a.
struct Comparison {
  EvalReport a;
  EvalReport b;
  TTestResult ttest;
  double delta_mae = 0.0;
  double delta_std = 0.0;
  double delta_r2 = 0.0;

  std::string verdict() const { return ttest.reject_null ? "reject" : "fail to reject"; }
  /// Human-readable summary.
  std::string to_text(const std::string& name_a = "A", const std::string& name_b = "B") const;
  /// Stable keys: mae_uni, mae_multi, std_uni, std_multi, r2_uni, r2_multi,
  /// delta_mae, delta_std, delta_r2, n, df, mean_diff, sd_diff, t_stat, p_value,
  /// alpha, reject_null. A is reported as "uni" and B as "multi".
  std::string to_key_values() const;
};

/// Throws ArgumentError when the reports disagree on n.
Comparison compare(const EvalReport& a, const EvalReport& b, const TTestResult& ttest);

}  // namespace kcalnet
