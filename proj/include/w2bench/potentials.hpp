#pragma once

// Convex potentials built from parts: ICNNs and explicit quadratics, combined
// by a nonnegative weighted sum or by a pointwise weighted max.

#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "w2bench/icnn.hpp"
#include "w2bench/maps.hpp"

namespace w2bench {

/// psi(x) = 1/2 x^T A x + b^T x with A symmetric PSD.
struct QuadraticPotential {
  Matrix a;
  Vector b;

  Index dim() const { return b.size(); }
  Vector value(const Matrix& x) const;
  Matrix gradient(const Matrix& x) const;
};

using ConvexPart = std::variant<IcnnPotential, QuadraticPotential>;

Index part_dim(const ConvexPart& part);
Vector part_value(const ConvexPart& part, const Matrix& x);
Matrix part_gradient(const ConvexPart& part, const Matrix& x);

enum class CompositionMode { kSum, kMax };

std::string to_string(CompositionMode mode);
CompositionMode parse_composition_mode(const std::string& text);

class CompositionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct WeightedPart {
  ConvexPart part;
  double weight = 1.0;
};

/// Sum mode: sum_k w_k psi_k. Max mode: max_k w_k psi_k, with the gradient
/// taken from the lowest-index maximizer.
class PotentialComposition {
 public:
  PotentialComposition() = default;
  /// Throws CompositionError on a negative weight, no parts, or mixed dimensions.
  PotentialComposition(std::vector<WeightedPart> parts, CompositionMode mode);

  Index dim() const { return part_dim(parts_.front().part); }
  CompositionMode mode() const { return mode_; }
  const std::vector<WeightedPart>& parts() const { return parts_; }

  Vector value(const Matrix& x) const;
  Matrix gradient(const Matrix& x) const;

 private:
  std::vector<WeightedPart> parts_;
  CompositionMode mode_ = CompositionMode::kSum;
};

PotentialComposition compose_potentials(std::vector<WeightedPart> parts, CompositionMode mode);

class CompositionGradientMap final : public TransportMap {
 public:
  explicit CompositionGradientMap(PotentialComposition potential) : potential_(std::move(potential)) {}
  Index dim() const override { return potential_.dim(); }
  Matrix apply(const Matrix& x) const override { return potential_.gradient(x); }

 private:
  PotentialComposition potential_;
};

}  // namespace w2bench
