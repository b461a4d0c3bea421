#include "w2bench/potentials.hpp"

namespace w2bench {

Vector QuadraticPotential::value(const Matrix& x) const {
  return 0.5 * (x * a).cwiseProduct(x).rowwise().sum() + x * b;
}

Matrix QuadraticPotential::gradient(const Matrix& x) const {
  Matrix g = x * a.transpose();
  g.rowwise() += b.transpose();
  return g;
}

Index part_dim(const ConvexPart& part) {
  return std::visit([](const auto& p) { return p.dim(); }, part);
}

Vector part_value(const ConvexPart& part, const Matrix& x) {
  return std::visit([&](const auto& p) { return p.value(x); }, part);
}

Matrix part_gradient(const ConvexPart& part, const Matrix& x) {
  return std::visit([&](const auto& p) { return p.gradient(x); }, part);
}

std::string to_string(CompositionMode mode) { return mode == CompositionMode::kSum ? "sum" : "max"; }

CompositionMode parse_composition_mode(const std::string& text) {
  if (text == "sum") return CompositionMode::kSum;
  if (text == "max") return CompositionMode::kMax;
  throw CompositionError("unknown composition mode: " + text);
}

PotentialComposition::PotentialComposition(std::vector<WeightedPart> parts, CompositionMode mode)
    : parts_(std::move(parts)), mode_(mode) {
  if (parts_.empty()) throw CompositionError("composition needs at least one part");
  const Index d = part_dim(parts_.front().part);
  for (const WeightedPart& p : parts_) {
    if (!(p.weight >= 0.0)) throw CompositionError("composition weight must be nonnegative");
    if (part_dim(p.part) != d) throw CompositionError("composition parts differ in dimension");
  }
}

Vector PotentialComposition::value(const Matrix& x) const {
  Vector total;
  for (std::size_t k = 0; k < parts_.size(); ++k) {
    const Vector v = parts_[k].weight * part_value(parts_[k].part, x);
    if (k == 0) {
      total = v;
    } else if (mode_ == CompositionMode::kSum) {
      total += v;
    } else {
      total = total.cwiseMax(v);
    }
  }
  return total;
}

Matrix PotentialComposition::gradient(const Matrix& x) const {
  if (mode_ == CompositionMode::kSum) {
    Matrix total = Matrix::Zero(x.rows(), x.cols());
    for (const WeightedPart& p : parts_) {
      if (p.weight == 0.0) continue;
      total += p.weight * part_gradient(p.part, x);
    }
    return total;
  }
  Vector best = parts_[0].weight * part_value(parts_[0].part, x);
  std::vector<std::size_t> arg(static_cast<std::size_t>(x.rows()), 0);
  for (std::size_t k = 1; k < parts_.size(); ++k) {
    const Vector v = parts_[k].weight * part_value(parts_[k].part, x);
    for (Index i = 0; i < x.rows(); ++i) {
      if (v(i) > best(i)) {
        best(i) = v(i);
        arg[static_cast<std::size_t>(i)] = k;
      }
    }
  }
  Matrix grad(x.rows(), x.cols());
  for (std::size_t k = 0; k < parts_.size(); ++k) {
    std::vector<Index> rows;
    for (Index i = 0; i < x.rows(); ++i)
      if (arg[static_cast<std::size_t>(i)] == k) rows.push_back(i);
    if (rows.empty()) continue;
    grad(rows, Eigen::all) = parts_[k].weight * part_gradient(parts_[k].part, x(rows, Eigen::all));
  }
  return grad;
}

PotentialComposition compose_potentials(std::vector<WeightedPart> parts, CompositionMode mode) {
  return PotentialComposition(std::move(parts), mode);
}

}  // namespace w2bench
