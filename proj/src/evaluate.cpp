#include "kcalnet/evaluate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

PredictionSet evaluate(const CalorieModel& model, const std::vector<DishRecord>& records, const Vectorizer* vectorizer,
                       ImageCache& cache, std::size_t batch_size) {
  if (records.empty()) throw ArgumentError("cannot evaluate an empty test set");
  const bool text = model.kind() == ModelKind::kMultimodal;
  if (text && !vectorizer) throw ArgumentError("a multimodal model needs a vectorizer");
  BatchOptions opts;
  opts.batch_size = batch_size;
  BatchStream stream(records, text ? vectorizer : nullptr, cache, opts);
  PredictionSet ps;
  Batch batch;
  while (stream.next(batch)) {
    const Tensor y = model.predict(batch.images, batch.token_ids);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ps.dish_ids.push_back(batch.dish_ids[i]);
      ps.y_true.push_back(batch.targets[i]);
      ps.y_pred.push_back(y[i]);
    }
  }
  return ps;
}

std::string predictions_csv(const PredictionSet& ps) {
  ps.validate();
  std::ostringstream os;
  os << "dish_id,true_kcal,pred_kcal\n";
  for (std::size_t i = 0; i < ps.size(); ++i)
    os << csv_field(ps.dish_ids[i]) << ',' << format_double(ps.y_true[i]) << ',' << format_double(ps.y_pred[i]) << '\n';
  return os.str();
}

PredictionSet parse_predictions_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  if (rows.empty() || rows[0] != std::vector<std::string>{"dish_id", "true_kcal", "pred_kcal"})
    throw DatasetError("predictions file must start with the header dish_id,true_kcal,pred_kcal");
  PredictionSet ps;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 3) throw DatasetError("predictions row " + std::to_string(i) + " needs three fields");
    double vals[2];
    for (int k = 0; k < 2; ++k) {
      const std::string& f = rows[i][1 + k];
      const auto [end, ec] = std::from_chars(f.data(), f.data() + f.size(), vals[k]);
      if (f.empty() || ec != std::errc() || end != f.data() + f.size())
        throw DatasetError("predictions row " + std::to_string(i) + " has a non-numeric value");
    }
    ps.dish_ids.push_back(rows[i][0]);
    ps.y_true.push_back(vals[0]);
    ps.y_pred.push_back(vals[1]);
  }
  return ps;
}

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// 1, 2 or 5 times a power of ten, giving about five intervals over `span`.
double tick_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0})
    if (m * mag >= raw) return m * mag;
  return 10.0 * mag;
}

}  // namespace

std::string scatter_svg(const PredictionSet& ps, const std::string& title) {
  ps.validate();
  if (ps.size() == 0) throw ArgumentError("scatter needs at least one point");
  double lo = std::min(*std::min_element(ps.y_true.begin(), ps.y_true.end()),
                       *std::min_element(ps.y_pred.begin(), ps.y_pred.end()));
  double hi = std::max(*std::max_element(ps.y_true.begin(), ps.y_true.end()),
                       *std::max_element(ps.y_pred.begin(), ps.y_pred.end()));
  const double pad = hi > lo ? 0.05 * (hi - lo) : std::max(1.0, 0.05 * std::abs(hi));
  lo -= pad;
  hi += pad;

  constexpr double kLeft = 70, kTop = 40, kSide = 400;
  const auto px = [&](double kcal) { return kLeft + (kcal - lo) / (hi - lo) * kSide; };
  const auto py = [&](double kcal) { return kTop + kSide - (kcal - lo) / (hi - lo) * kSide; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kLeft + kSide + 30 << "\" height=\""
     << kTop + kSide + 60 << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<title>" << title << "</title>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kSide << "\" height=\"" << kSide
     << "\" fill=\"white\" stroke=\"black\"/>\n";
  const double step = tick_step(hi - lo);
  for (double v = std::ceil(lo / step) * step; v <= hi; v += step) {
    os << "<text x=\"" << fixed(px(v)) << "\" y=\"" << fixed(kTop + kSide + 16) << "\" text-anchor=\"middle\">"
       << fixed(v, 0) << "</text>\n";
    os << "<text x=\"" << fixed(kLeft - 6) << "\" y=\"" << fixed(py(v) + 4) << "\" text-anchor=\"end\">" << fixed(v, 0)
       << "</text>\n";
  }
  os << "<line class=\"identity\" x1=\"" << fixed(px(lo)) << "\" y1=\"" << fixed(py(lo)) << "\" x2=\"" << fixed(px(hi))
     << "\" y2=\"" << fixed(py(hi)) << "\" stroke=\"red\" stroke-dasharray=\"6 4\"/>\n";
  for (std::size_t i = 0; i < ps.size(); ++i) {
    os << "<circle cx=\"" << fixed(px(ps.y_true[i])) << "\" cy=\"" << fixed(py(ps.y_pred[i]))
       << "\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.6\"/>\n";
  }
  os << "<text x=\"" << fixed(kLeft + kSide / 2) << "\" y=\"" << fixed(kTop + kSide + 40)
     << "\" text-anchor=\"middle\">true calories (kcal)</text>\n";
  os << "<text transform=\"translate(18 " << fixed(kTop + kSide / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << "predicted calories (kcal)</text>\n";
  os << "<text x=\"" << fixed(kLeft + kSide / 2) << "\" y=\"24\" text-anchor=\"middle\">" << title << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

void scatter_emit(const PredictionSet& ps, const std::filesystem::path& prefix, const std::string& title) {
  write_text_file(prefix.string() + ".csv", predictions_csv(ps));
  write_text_file(prefix.string() + ".svg", scatter_svg(ps, title));
}

std::string report_key_values(const EvalReport& r) {
  std::ostringstream os;
  os << "n = " << r.n << "\n";
  os << "mae = " << format_double(r.mae) << "\n";
  os << "abs_err_std = " << format_double(r.abs_err_std) << "\n";
  os << "r2 = " << format_double(r.r2) << "\n";
  return os.str();
}

}  // namespace kcalnet
