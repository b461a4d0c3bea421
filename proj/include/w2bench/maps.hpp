#pragma once

// Evaluable maps R^D -> R^D acting row-wise on n x D batches.

#include <memory>
#include <string>

#include <Eigen/Core>

#include "w2bench/icnn.hpp"

namespace w2bench {

class TransportMap {
 public:
  virtual ~TransportMap() = default;
  virtual Index dim() const = 0;
  virtual Matrix apply(const Matrix& x) const = 0;
};

class IdentityMap final : public TransportMap {
 public:
  explicit IdentityMap(Index dim) : dim_(dim) {}
  Index dim() const override { return dim_; }
  Matrix apply(const Matrix& x) const override { return x; }

 private:
  Index dim_;
};

class ConstantMap final : public TransportMap {
 public:
  explicit ConstantMap(Vector value) : value_(std::move(value)) {}
  Index dim() const override { return value_.size(); }
  Matrix apply(const Matrix& x) const override { return value_.transpose().replicate(x.rows(), 1); }
  const Vector& value() const { return value_; }

 private:
  Vector value_;
};

/// T(x) = A x + shift.
class AffineMap final : public TransportMap {
 public:
  AffineMap(Matrix matrix, Vector shift) : matrix_(std::move(matrix)), shift_(std::move(shift)) {}
  Index dim() const override { return shift_.size(); }
  Matrix apply(const Matrix& x) const override {
    Matrix y = x * matrix_.transpose();
    y.rowwise() += shift_.transpose();
    return y;
  }
  const Matrix& matrix() const { return matrix_; }
  const Vector& shift() const { return shift_; }

 private:
  Matrix matrix_;
  Vector shift_;
};

class IcnnGradientMap final : public TransportMap {
 public:
  explicit IcnnGradientMap(IcnnPotential psi) : psi_(std::move(psi)) {}
  Index dim() const override { return psi_.dim(); }
  Matrix apply(const Matrix& x) const override { return psi_.gradient(x); }
  const IcnnPotential& potential() const { return psi_; }

 private:
  IcnnPotential psi_;
};

}  // namespace w2bench
