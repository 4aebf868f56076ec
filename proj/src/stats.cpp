#include "kcalnet/stats.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

std::vector<double> PredictionSet::abs_errors() const {
  validate();
  std::vector<double> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = std::abs(y_pred[i] - y_true[i]);
  return out;
}

void PredictionSet::validate() const {
  if (y_true.size() != dish_ids.size() || y_pred.size() != dish_ids.size())
    throw ArgumentError("prediction set lists have unequal lengths");
}

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_sd(const std::vector<double>& xs, double mean) {
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace

EvalReport report(const PredictionSet& ps) {
  ps.validate();
  if (ps.size() < 2) throw ArgumentError("report needs at least 2 predictions");
  const auto errors = ps.abs_errors();
  EvalReport r;
  r.n = ps.size();
  r.mae = mean_of(errors);
  r.abs_err_std = sample_sd(errors, r.mae);
  const double y_mean = mean_of(ps.y_true);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ss_res += (ps.y_true[i] - ps.y_pred[i]) * (ps.y_true[i] - ps.y_pred[i]);
    ss_tot += (ps.y_true[i] - y_mean) * (ps.y_true[i] - y_mean);
  }
  if (ss_tot == 0.0) throw DegenerateVarianceError("R^2 is undefined: every true value is equal");
  r.r2 = 1.0 - ss_res / ss_tot;
  return r;
}

double student_t_upper_tail(double t, double df) {
  if (!(df > 0.0)) throw ArgumentError("degrees of freedom must be positive");
  if (std::isnan(t)) throw ArgumentError("t is NaN");
  if (t == 0.0) return 0.5;
  const double x = df / (df + t * t);
  const double half_tail = 0.5 * boost::math::ibeta(df / 2.0, 0.5, x);
  return t > 0.0 ? half_tail : 1.0 - half_tail;
}

TTestResult paired_t_test(const std::vector<double>& errors_a, const std::vector<double>& errors_b, double alpha) {
  if (errors_a.size() != errors_b.size()) throw ArgumentError("paired t-test needs equally long error lists");
  if (errors_a.size() < 2) throw ArgumentError("paired t-test needs at least 2 pairs");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must lie in (0, 1)");
  std::vector<double> d(errors_a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = errors_a[i] - errors_b[i];
  TTestResult r;
  const double n = static_cast<double>(d.size());
  r.df = d.size() - 1;
  r.mean_diff = mean_of(d);
  r.sd_diff = sample_sd(d, r.mean_diff);
  r.alpha = alpha;
  if (r.sd_diff == 0.0) {
    // Identical error lists carry no evidence either way.
    if (r.mean_diff != 0.0) throw DegenerateVarianceError("paired differences are all equal and nonzero");
    r.p_value = 0.5;
    return r;
  }
  r.t_stat = r.mean_diff * std::sqrt(n) / r.sd_diff;
  r.p_value = student_t_upper_tail(r.t_stat, static_cast<double>(r.df));
  r.reject_null = r.p_value < alpha;
  return r;
}

TTestResult ttest_from_summary(double t_stat, double p_value, std::size_t n, double alpha) {
  if (n < 2) throw ArgumentError("a t-test needs n >= 2");
  TTestResult r;
  r.t_stat = t_stat;
  r.p_value = p_value;
  r.df = n - 1;
  r.alpha = alpha;
  r.reject_null = p_value < alpha;
  return r;
}

Comparison compare(const EvalReport& a, const EvalReport& b, const TTestResult& ttest) {
  if (a.n != b.n) {
    throw ArgumentError("reports cover different sample sizes (" + std::to_string(a.n) + " vs " + std::to_string(b.n) + ")");
  }
  Comparison c;
  c.a = a;
  c.b = b;
  c.ttest = ttest;
  c.delta_mae = a.mae - b.mae;
  c.delta_std = a.abs_err_std - b.abs_err_std;
  c.delta_r2 = b.r2 - a.r2;
  return c;
}

std::string Comparison::to_text(const std::string& name_a, const std::string& name_b) const {
  char line[256];
  std::ostringstream os;
  std::snprintf(line, sizeof line, "%-12s %12s %12s %10s\n", "model", "MAE (kcal)", "std (kcal)", "R^2");
  os << line;
  std::snprintf(line, sizeof line, "%-12s %12.2f %12.2f %10.4f\n", name_a.c_str(), a.mae, a.abs_err_std, a.r2);
  os << line;
  std::snprintf(line, sizeof line, "%-12s %12.2f %12.2f %10.4f\n", name_b.c_str(), b.mae, b.abs_err_std, b.r2);
  os << line;
  std::snprintf(line, sizeof line, "\nMAE reduction %.2f kcal, std reduction %.2f kcal, R^2 gain %.4f\n", delta_mae,
                delta_std, delta_r2);
  os << line;
  std::snprintf(line, sizeof line,
                "paired one-tailed t-test on %s minus %s absolute errors: n = %zu, t = %.4f, df = %zu, p = %.4f\n",
                name_a.c_str(), name_b.c_str(), a.n, ttest.t_stat, ttest.df, ttest.p_value);
  os << line;
  std::snprintf(line, sizeof line, "verdict at alpha = %g: %s the null hypothesis\n", ttest.alpha, verdict().c_str());
  os << line;
  return os.str();
}

std::string Comparison::to_key_values() const {
  std::ostringstream os;
  auto kv = [&](const char* key, const std::string& value) { os << key << " = " << value << "\n"; };
  kv("mae_uni", format_double(a.mae));
  kv("mae_multi", format_double(b.mae));
  kv("std_uni", format_double(a.abs_err_std));
  kv("std_multi", format_double(b.abs_err_std));
  kv("r2_uni", format_double(a.r2));
  kv("r2_multi", format_double(b.r2));
  kv("delta_mae", format_double(delta_mae));
  kv("delta_std", format_double(delta_std));
  kv("delta_r2", format_double(delta_r2));
  kv("n", std::to_string(a.n));
  kv("df", std::to_string(ttest.df));
  kv("mean_diff", format_double(ttest.mean_diff));
  kv("sd_diff", format_double(ttest.sd_diff));
  kv("t_stat", format_double(ttest.t_stat));
  kv("p_value", format_double(ttest.p_value));
  kv("alpha", format_double(ttest.alpha));
  kv("reject_null", ttest.reject_null ? "true" : "false");
  return os.str();
}

}  // namespace kcalnet
