#include "kcalnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kcalnet/errors.hpp"

namespace kcalnet {

namespace {

constexpr double kFloor = 1e-8;

void update(GradcheckResult& r, double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kFloor});
  const double rel = std::abs(analytic - numeric) / denom;
  if (rel > r.max_rel_error || r.coordinates == 0) {
    r.max_rel_error = rel;
    r.worst_coordinate = r.coordinates;
    r.worst_analytic = analytic;
    r.worst_numeric = numeric;
  }
  ++r.coordinates;
}

double scalar_of(Var out) {
  if (out.value().size() != 1) throw ArgumentError("gradcheck requires a scalar-valued function");
  return out.value()[0];
}

struct Evaluation {
  double value;
  std::uint64_t signature;
};

/// Central difference of `at(x)` around `x = saved`, shrinking the step until
/// both sides take the same pieces as the unperturbed point.
template <typename At>
double central_difference(At&& at, double saved, double eps, std::uint64_t base, GradcheckResult& r) {
  double h = eps;
  for (int shrink = 0;; ++shrink) {
    const Evaluation up = at(saved + h);
    const Evaluation down = at(saved - h);
    const bool same_piece = up.signature == base && down.signature == base;
    if (same_piece || shrink == kMaxShrinks) {
      if (shrink > 0) ++r.shrunk_steps;
      return (up.value - down.value) / (2.0 * h);
    }
    h *= 0.25;
  }
}

}  // namespace

GradcheckResult gradcheck(const TapeFunction& fn, const std::vector<Tensor>& inputs, double eps,
                          Precision precision) {
  std::vector<Tensor> analytic;
  std::uint64_t base = 0;
  {
    Tape tape(precision);
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    Var out = fn(tape, vars);
    scalar_of(out);
    base = tape.branch_signature();
    Gradients grads = tape.backward(out);
    for (const Var& v : vars) analytic.push_back(grads.of(v));
  }

  std::vector<Tensor> point = inputs;
  const auto evaluate = [&] {
    Tape tape(precision);
    std::vector<Var> vars;
    for (const auto& t : point) vars.push_back(tape.constant(t));
    const double value = scalar_of(fn(tape, vars));
    return Evaluation{value, tape.branch_signature()};
  };

  GradcheckResult result;
  for (std::size_t k = 0; k < point.size(); ++k) {
    for (std::size_t i = 0; i < point[k].size(); ++i) {
      const double saved = point[k][i];
      const auto at = [&](double x) {
        point[k][i] = x;
        return evaluate();
      };
      const double numeric = central_difference(at, saved, eps, base, result);
      point[k][i] = saved;
      update(result, analytic[k][i], numeric);
    }
  }
  return result;
}

GradcheckResult gradcheck_parameters(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                                     double eps) {
  std::vector<Tensor> analytic;
  std::uint64_t base = 0;
  {
    Tape tape(Precision::kDouble);
    for (Parameter* p : params) tape.watch(*p);
    Var out = fn(tape);
    scalar_of(out);
    base = tape.branch_signature();
    Gradients grads = tape.backward(out);
    for (Parameter* p : params) analytic.push_back(grads.of(*p));
  }

  const auto evaluate = [&] {
    Tape tape(Precision::kDouble);
    const double value = scalar_of(fn(tape));
    return Evaluation{value, tape.branch_signature()};
  };

  GradcheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k]->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      const auto at = [&](double x) {
        value[i] = x;
        return evaluate();
      };
      const double numeric = central_difference(at, saved, eps, base, result);
      value[i] = saved;
      update(result, analytic[k][i], numeric);
    }
  }
  return result;
}

}  // namespace kcalnet
