#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "kcalnet/data.hpp"
#include "kcalnet/model.hpp"
#include "kcalnet/stats.hpp"

namespace kcalnet {

/// Eval-mode predictions for `records` in their given order, without
/// augmentation. Throws ArgumentError for an empty record list.
PredictionSet evaluate(const CalorieModel& model, const std::vector<DishRecord>& records, const Vectorizer* vectorizer,
                       ImageCache& cache, std::size_t batch_size = 16);

/// Header `dish_id,true_kcal,pred_kcal`.
std::string predictions_csv(const PredictionSet& ps);
/// Inverse of predictions_csv. Throws DatasetError on a malformed file.
PredictionSet parse_predictions_csv(const std::string& text);

/// Predicted-vs-true scatter with the identity line. Both axes share one kcal
/// range, so y = x is the diagonal of the plot square.
std::string scatter_svg(const PredictionSet& ps, const std::string& title = "predicted vs true");

/// Writes <prefix>.csv and <prefix>.svg. Throws IoError.
void scatter_emit(const PredictionSet& ps, const std::filesystem::path& prefix, const std::string& title = "predicted vs true");

/// n, mae, abs_err_std and r2 as key = value lines.
std::string report_key_values(const EvalReport& r);

}  // namespace kcalnet
