#pragma once

#include <vector>

#include <Eigen/Dense>

namespace learn {

/// Minimum-cost assignment of every row to a distinct column of a
/// rows <= cols cost matrix (Kuhn-Munkres with potentials, O(n^2 m)).
/// Returns the column chosen for each row.
std::vector<int> hungarian_assignment(const Eigen::MatrixXd& cost);

}  // namespace learn
