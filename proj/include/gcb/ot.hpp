#pragma once

// Optimal transport between small discrete distributions.

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace gcb {

struct DiscreteDistribution {
  std::vector<int> support;
  std::vector<double> weights;

  /// Throws ValidationError unless weights are nonnegative, sum to 1 within
  /// 1e-10, and support indices are distinct.
  void validate() const;
  static DiscreteDistribution dirac(int atom) { return {{atom}, {1.0}}; }
};

/// Row-major dense matrix of nonnegative costs.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  CostMatrix() = default;
  CostMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(std::size_t(r) * c, fill) {}
  double& operator()(int i, int j) { return data[std::size_t(i) * cols + j]; }
  double operator()(int i, int j) const { return data[std::size_t(i) * cols + j]; }
};

struct TransportPlan {
  int rows = 0;
  int cols = 0;
  std::vector<double> coupling;  ///< row-major
  double cost = 0.0;

  double operator()(int i, int j) const { return coupling[std::size_t(i) * cols + j]; }
};

struct ExactTransport {
  double value;
  TransportPlan plan;
  std::vector<double> f;  ///< row potentials
  std::vector<double> g;  ///< column potentials
  int pivots;
};

/// Exact transportation LP by the transportation (network) simplex method:
/// northwest-corner start, u-v potentials, Bland's rule on entering and
/// leaving cells. Weights must each sum to 1 within 1e-10.
ExactTransport wasserstein1_exact(std::span<const double> mu, std::span<const double> nu,
                                  const CostMatrix& cost);
ExactTransport wasserstein1_exact(const DiscreteDistribution& mu, const DiscreteDistribution& nu,
                                  const CostMatrix& cost);

/// Square root of the exact LP value under squared costs.
double wasserstein2_exact(std::span<const double> mu, std::span<const double> nu,
                          const CostMatrix& cost);

/// Reusable solver for hot loops. Returns only the optimal value and skips
/// input validation.
class TransportSimplex {
 public:
  double solve(std::span<const double> mu, std::span<const double> nu,
               std::span<const double> cost_row_major);

  /// State after the last solve.
  const std::vector<double>& flow() const { return x_; }
  const std::vector<double>& u() const { return u_; }
  const std::vector<double>& v() const { return v_; }
  int pivots() const { return pivots_; }

 private:
  void compute_potentials(std::span<const double> c);
  bool find_path(int from_row, int to_col);

  int m_ = 0, n_ = 0, pivots_ = 0;
  std::vector<double> x_;
  std::vector<char> basic_;
  std::vector<double> u_, v_;
  std::vector<int> parent_, parent_cell_, queue_;
  std::vector<char> seen_;
  std::vector<int> path_;
};

struct SinkhornResult {
  double value;  ///< <P, C> for the regularized plan P
  TransportPlan plan;
  int iterations;
  double residual;  ///< L1 row-marginal violation at exit
};

/// Log-domain Sinkhorn with a geometric schedule on the regularization.
/// Throws ConvergenceError carrying the last residual if max_iter is hit.
SinkhornResult sinkhorn(std::span<const double> mu, std::span<const double> nu,
                        const CostMatrix& cost, double regularization, int max_iter = 200000,
                        double tol = 1e-9);

struct PlanReport {
  double max_row_residual = 0.0;
  double max_col_residual = 0.0;
  double min_entry = 0.0;
  int negative_entries = 0;
  double cost_residual = 0.0;  ///< |reported cost - sum plan*cost|, if a cost was supplied
  bool feasible(double tol = 1e-9) const {
    return max_row_residual <= tol && max_col_residual <= tol && negative_entries == 0;
  }
};

PlanReport check_plan(const TransportPlan& plan, std::span<const double> mu,
                      std::span<const double> nu, const CostMatrix* cost = nullptr);

TransportPlan product_coupling(std::span<const double> mu, std::span<const double> nu);

nlohmann::json plan_to_json(const TransportPlan& plan);

}  // namespace gcb
