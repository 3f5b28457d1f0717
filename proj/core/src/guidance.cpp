#include "vfm/guidance.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "vfm/error.hpp"

namespace vfm {

using ad::Tape;
using ad::Tensor;
using ad::Var;

PropertyFunction::PropertyFunction(PropertySpec spec, SpaceSpec space) : spec_(std::move(spec)), space_(std::move(space)) {
  space_.validate();
  const std::size_t dc = space_.n_continuous;
  if (dc == 0) throw ConfigError("property functions need a continuous block");
  switch (spec_.kind) {
    case PropertyKind::circumradius:
    case PropertyKind::mean_pairwise_distance: {
      if (!space_.points || space_.points->n_points < 2) {
        throw ConfigError(fmt::format("{} needs a point cloud with at least two points", to_string(spec_.kind)));
      }
      std::vector<std::size_t> pi, pj;
      for (std::size_t i = 0; i < space_.points->n_points; ++i) {
        for (std::size_t j = i + 1; j < space_.points->n_points; ++j) {
          pi.push_back(i);
          pj.push_back(j);
        }
      }
      pair_i_ = ad::make_index(std::move(pi));
      pair_j_ = ad::make_index(std::move(pj));
      break;
    }
    case PropertyKind::component_index:
      if (spec_.centers.empty() || spec_.centers.size() % dc != 0) {
        throw ConfigError(fmt::format("component_index needs centres with {} coordinates each", dc));
      }
      if (!(spec_.temperature > 0.0)) throw ConfigError("component_index temperature must be positive");
      break;
    case PropertyKind::coordinate_sum:
      if (!std::isfinite(spec_.scale)) throw ConfigError("coordinate_sum scale must be finite");
      break;
  }
}

Var PropertyFunction::record(Tape& tape, Var x) const {
  const std::size_t batch = tape.value(x).rows;
  const std::size_t dc = space_.n_continuous;
  Var xc = tape.slice_cols(x, 0, dc);
  switch (spec_.kind) {
    case PropertyKind::circumradius: {
      const std::size_t n = space_.points->n_points;
      const std::size_t d = space_.points->spatial_dim;
      Var pts = tape.center_groups(tape.reshape(xc, batch * n, d), n);
      Var radii = tape.reshape(tape.row_norm(pts), batch, n);
      return tape.scale(tape.row_sum(radii), 1.0 / static_cast<double>(n));
    }
    case PropertyKind::mean_pairwise_distance: {
      const std::size_t n = space_.points->n_points;
      const std::size_t d = space_.points->spatial_dim;
      const std::size_t pairs = pair_i_->size();
      std::vector<std::size_t> gi, gj;
      gi.reserve(batch * pairs);
      gj.reserve(batch * pairs);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t e = 0; e < pairs; ++e) {
          gi.push_back(b * n + (*pair_i_)[e]);
          gj.push_back(b * n + (*pair_j_)[e]);
        }
      }
      Var pts = tape.reshape(xc, batch * n, d);
      Var diff = tape.sub(tape.gather_rows(pts, ad::make_index(std::move(gi))),
                          tape.gather_rows(pts, ad::make_index(std::move(gj))));
      Var dist = tape.reshape(tape.row_norm(diff), batch, pairs);
      return tape.scale(tape.row_sum(dist), 1.0 / static_cast<double>(pairs));
    }
    case PropertyKind::component_index: {
      const std::size_t m = spec_.centers.size() / dc;
      Tensor ct(dc, m);
      Tensor c2(1, m);
      Tensor idx(m, 1);
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t j = 0; j < dc; ++j) {
          const double c = spec_.centers[k * dc + j];
          ct(j, k) = c;
          c2.data[k] += c * c;
        }
        idx.data[k] = static_cast<double>(k);
      }
      Var cross = tape.matmul(xc, tape.constant(std::move(ct)));
      Var d2 = tape.add_col(tape.add_row(tape.scale(cross, -2.0), tape.constant(std::move(c2))),
                            tape.row_sum(tape.square(xc)));
      Var w = tape.softmax(tape.scale(d2, -1.0 / spec_.temperature));
      return tape.matmul(w, tape.constant(std::move(idx)));
    }
    case PropertyKind::coordinate_sum:
      return tape.scale(tape.row_sum(xc), spec_.scale);
  }
  throw UsageError("unknown property kind");
}

double PropertyFunction::value(std::span<const double> x1) const {
  return values(Tensor::row_vector(x1)).front();
}

std::vector<double> PropertyFunction::values(const Tensor& batch) const {
  if (batch.cols != space_.total_dim()) {
    throw StructuralError(fmt::format("property expects {} dims, got {}", space_.total_dim(), batch.cols));
  }
  Tape tape;
  Var out = record(tape, tape.constant(batch));
  return tape.value(out).data;
}

std::vector<double> PropertyFunction::gradient(std::span<const double> x1) const {
  if (x1.size() != space_.total_dim()) {
    throw StructuralError(fmt::format("property expects {} dims, got {}", space_.total_dim(), x1.size()));
  }
  Tape tape;
  Var x = tape.leaf(Tensor::row_vector(x1));
  tape.backward(record(tape, x));
  return tape.grad(x).data;
}

bool PropertyFunction::is_group_invariant() const {
  return spec_.kind == PropertyKind::circumradius || spec_.kind == PropertyKind::mean_pairwise_distance;
}

PropertyLikelihood::PropertyLikelihood(PropertyFunction fn, double sy, double y)
    : f(std::move(fn)), sigma_y(sy), target(y) {
  if (!(sigma_y > 0.0) || !std::isfinite(sigma_y)) throw ConfigError("sigma_y must be positive and finite");
  if (!std::isfinite(target)) throw ConfigError("likelihood target must be finite");
}

double PropertyLikelihood::log_likelihood(std::span<const double> x1) const {
  const double r = target - f.value(x1);
  const double s2 = sigma_y * sigma_y;
  return -r * r / (2.0 * s2) - 0.5 * std::log(2.0 * std::numbers::pi * s2);
}

std::vector<double> PropertyLikelihood::grad_log_likelihood(std::span<const double> x1) const {
  return grad_log_likelihood_batch(Tensor::row_vector(x1)).data;
}

Tensor PropertyLikelihood::grad_log_likelihood_batch(const Tensor& batch) const {
  if (batch.cols != f.space().total_dim()) {
    throw StructuralError(fmt::format("likelihood expects {} dims, got {}", f.space().total_dim(), batch.cols));
  }
  Tape tape;
  Var x = tape.leaf(batch);
  Var fx = f.record(tape, x);
  const Tensor& fv = tape.value(fx);
  Tensor adjoint(batch.rows, 1);
  const double s2 = sigma_y * sigma_y;
  for (std::size_t r = 0; r < batch.rows; ++r) adjoint.data[r] = (target - fv.data[r]) / s2;
  tape.backward(fx, adjoint);
  Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (!std::isfinite(g.data[i])) {
      throw NumericError(fmt::format("non-finite likelihood gradient at row {}, coordinate {}", i / g.cols, i % g.cols));
    }
  }
  return g;
}

std::string to_string(PropertyKind k) {
  switch (k) {
    case PropertyKind::circumradius: return "circumradius";
    case PropertyKind::mean_pairwise_distance: return "mean_pairwise_distance";
    case PropertyKind::component_index: return "component_index";
    case PropertyKind::coordinate_sum: return "coordinate_sum";
  }
  return "?";
}

PropertyKind property_kind_from_string(const std::string& s) {
  if (s == "circumradius") return PropertyKind::circumradius;
  if (s == "mean_pairwise_distance") return PropertyKind::mean_pairwise_distance;
  if (s == "component_index") return PropertyKind::component_index;
  if (s == "coordinate_sum") return PropertyKind::coordinate_sum;
  throw ConfigError(fmt::format("unknown property '{}'", s));
}

}  // namespace vfm
