#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "kcalnet/autodiff.hpp"

namespace kcalnet {

inline constexpr int kMaxShrinks = 6;

struct GradcheckResult {
  /// max over coordinates of |analytic - cd| / max(|analytic|, |cd|, 1e-8)
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  /// Flat coordinate (across all inputs, in order) where the maximum occurred.
  std::size_t worst_coordinate = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Coordinates whose step had to shrink to stay on one linear piece.
  std::size_t shrunk_steps = 0;
};

/// Scalar-valued function of tape variables.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `fn` at `inputs` against central differences
/// with step `eps`. Runs on double-precision tapes unless told otherwise.
///
/// When a step would move some relu/relu6 input onto another piece (the tape's
/// branch signature changes), the step for that coordinate is divided by 4, at
/// most kMaxShrinks times, so that the difference never straddles a kink.
GradcheckResult gradcheck(const TapeFunction& fn, const std::vector<Tensor>& inputs, double eps,
                          Precision precision = Precision::kDouble);

/// Same check with respect to parameters that `fn` watches on the tape it is given.
/// Parameter values are perturbed in place and restored before returning.
/// `fn` must be deterministic (fixed dropout seeds etc.).
GradcheckResult gradcheck_parameters(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                                     double eps);

}  // namespace kcalnet
