#pragma once

#include "dpals/common.hpp"

namespace dpals {

/// User factors U (n x r) and item factors V (m x r). Predictions are U_i . V_j.
struct FactorPair {
  FactorMatrix U;
  FactorMatrix V;

  Eigen::Index rank() const { return V.cols(); }
  double predict(std::size_t user, std::size_t item) const {
    return U.row(static_cast<Eigen::Index>(user)).dot(V.row(static_cast<Eigen::Index>(item)));
  }
};

}  // namespace dpals
