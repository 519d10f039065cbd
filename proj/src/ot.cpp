#include "gcb/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "gcb/common.hpp"

namespace gcb {

namespace {

void check_weights(std::span<const double> w, const char* name, std::vector<std::string>& errors) {
  double sum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      errors.push_back(std::string(name) + " has a negative or non-finite weight");
      return;
    }
    sum += x;
  }
  if (w.empty()) errors.push_back(std::string(name) + " is empty");
  else if (std::abs(sum - 1.0) > 1e-10)
    errors.push_back(std::string(name) + " weights sum to " + std::to_string(sum) + ", not 1");
}

void check_inputs(std::span<const double> mu, std::span<const double> nu, const CostMatrix& cost) {
  std::vector<std::string> errors;
  check_weights(mu, "mu", errors);
  check_weights(nu, "nu", errors);
  if (cost.rows != static_cast<int>(mu.size()) || cost.cols != static_cast<int>(nu.size()))
    errors.push_back("cost matrix is " + std::to_string(cost.rows) + "x" +
                     std::to_string(cost.cols) + ", supports are " + std::to_string(mu.size()) +
                     "x" + std::to_string(nu.size()));
  for (double c : cost.data)
    if (!(c >= 0.0) || !std::isfinite(c)) {
      errors.push_back("cost entries must be finite and nonnegative");
      break;
    }
  if (!errors.empty()) throw ValidationError(errors);
}

}  // namespace

void DiscreteDistribution::validate() const {
  std::vector<std::string> errors;
  if (support.size() != weights.size()) errors.push_back("support and weights differ in length");
  check_weights(weights, "distribution", errors);
  std::set<int> seen(support.begin(), support.end());
  if (seen.size() != support.size()) errors.push_back("support indices are not distinct");
  if (!errors.empty()) throw ValidationError(errors);
}

void TransportSimplex::compute_potentials(std::span<const double> c) {
  // Spanning tree over rows [0,m) and columns [m,m+n); u[0] = 0.
  std::fill(seen_.begin(), seen_.end(), 0);
  queue_.clear();
  u_[0] = 0.0;
  seen_[0] = 1;
  queue_.push_back(0);
  for (std::size_t h = 0; h < queue_.size(); ++h) {
    const int node = queue_[h];
    if (node < m_) {
      for (int j = 0; j < n_; ++j)
        if (basic_[node * n_ + j] && !seen_[m_ + j]) {
          v_[j] = c[node * n_ + j] - u_[node];
          seen_[m_ + j] = 1;
          queue_.push_back(m_ + j);
        }
    } else {
      const int j = node - m_;
      for (int i = 0; i < m_; ++i)
        if (basic_[i * n_ + j] && !seen_[i]) {
          u_[i] = c[i * n_ + j] - v_[j];
          seen_[i] = 1;
          queue_.push_back(i);
        }
    }
  }
}

bool TransportSimplex::find_path(int from_row, int to_col) {
  // Breadth-first search in the basis tree; path_ holds cells from the
  // column end back to the row end.
  std::fill(seen_.begin(), seen_.end(), 0);
  queue_.clear();
  seen_[from_row] = 1;
  parent_[from_row] = -1;
  queue_.push_back(from_row);
  const int target = m_ + to_col;
  for (std::size_t h = 0; h < queue_.size() && !seen_[target]; ++h) {
    const int node = queue_[h];
    if (node < m_) {
      for (int j = 0; j < n_; ++j)
        if (basic_[node * n_ + j] && !seen_[m_ + j]) {
          seen_[m_ + j] = 1;
          parent_[m_ + j] = node;
          parent_cell_[m_ + j] = node * n_ + j;
          queue_.push_back(m_ + j);
        }
    } else {
      const int j = node - m_;
      for (int i = 0; i < m_; ++i)
        if (basic_[i * n_ + j] && !seen_[i]) {
          seen_[i] = 1;
          parent_[i] = node;
          parent_cell_[i] = i * n_ + j;
          queue_.push_back(i);
        }
    }
  }
  if (!seen_[target]) return false;
  path_.clear();
  for (int node = target; node != from_row; node = parent_[node]) path_.push_back(parent_cell_[node]);
  return true;
}

double TransportSimplex::solve(std::span<const double> mu, std::span<const double> nu,
                               std::span<const double> c) {
  m_ = static_cast<int>(mu.size());
  n_ = static_cast<int>(nu.size());
  const int cells = m_ * n_;
  x_.assign(cells, 0.0);
  basic_.assign(cells, 0);
  u_.assign(m_, 0.0);
  v_.assign(n_, 0.0);
  parent_.assign(m_ + n_, -1);
  parent_cell_.assign(m_ + n_, -1);
  seen_.assign(m_ + n_, 0);
  pivots_ = 0;

  // northwest corner
  std::vector<double> ra(mu.begin(), mu.end()), rb(nu.begin(), nu.end());
  int i = 0, j = 0;
  for (;;) {
    const double q = std::min(ra[i], rb[j]);
    x_[i * n_ + j] = q;
    basic_[i * n_ + j] = 1;
    ra[i] -= q;
    rb[j] -= q;
    if (i == m_ - 1 && j == n_ - 1) break;
    if (i == m_ - 1) ++j;
    else if (j == n_ - 1) ++i;
    else if (ra[i] <= rb[j]) ++i;
    else ++j;
  }

  double cmax = 0.0;
  for (double v : c) cmax = std::max(cmax, v);
  const double eps = 1e-12 * (1.0 + cmax);
  const int max_pivots = 1000 + 50 * cells;

  for (;;) {
    compute_potentials(c);
    int enter = -1;
    for (int k = 0; k < cells; ++k) {
      if (basic_[k]) continue;
      if (c[k] - u_[k / n_] - v_[k % n_] < -eps) {
        enter = k;
        break;
      }
    }
    if (enter < 0) break;
    if (++pivots_ > max_pivots)
      throw ConvergenceError("transport simplex exceeded its pivot budget", 0.0, pivots_);

    const int ei = enter / n_, ej = enter % n_;
    if (!find_path(ei, ej)) throw std::logic_error("transport basis is not a spanning tree");
    // path_[0] shares the entering column: signs alternate -, +, -, ...
    double theta = std::numeric_limits<double>::infinity();
    int leave = -1;
    for (std::size_t k = 0; k < path_.size(); k += 2) theta = std::min(theta, x_[path_[k]]);
    for (std::size_t k = 0; k < path_.size(); k += 2) {
      const int cell = path_[k];
      if (x_[cell] <= theta + 1e-15 && (leave < 0 || cell < leave)) leave = cell;
    }
    theta = std::max(theta, 0.0);
    x_[enter] = theta;
    for (std::size_t k = 0; k < path_.size(); ++k) {
      double& xv = x_[path_[k]];
      xv += (k % 2 == 0) ? -theta : theta;
      if (xv < 0.0) xv = 0.0;
    }
    x_[leave] = 0.0;
    basic_[leave] = 0;
    basic_[enter] = 1;
  }

  double value = 0.0;
  for (int k = 0; k < cells; ++k) value += x_[k] * c[k];
  return value;
}

ExactTransport wasserstein1_exact(std::span<const double> mu, std::span<const double> nu,
                                  const CostMatrix& cost) {
  check_inputs(mu, nu, cost);
  TransportSimplex solver;
  ExactTransport out;
  out.value = solver.solve(mu, nu, cost.data);
  out.plan.rows = cost.rows;
  out.plan.cols = cost.cols;
  out.plan.coupling = solver.flow();
  out.plan.cost = out.value;
  out.f = solver.u();
  out.g = solver.v();
  out.pivots = solver.pivots();
  return out;
}

ExactTransport wasserstein1_exact(const DiscreteDistribution& mu, const DiscreteDistribution& nu,
                                  const CostMatrix& cost) {
  mu.validate();
  nu.validate();
  return wasserstein1_exact(mu.weights, nu.weights, cost);
}

double wasserstein2_exact(std::span<const double> mu, std::span<const double> nu,
                          const CostMatrix& cost) {
  CostMatrix sq = cost;
  for (double& v : sq.data) v *= v;
  return std::sqrt(std::max(0.0, wasserstein1_exact(mu, nu, sq).value));
}

namespace {

double log_sum_exp(const std::vector<double>& a) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : a) mx = std::max(mx, v);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : a) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace

SinkhornResult sinkhorn(std::span<const double> mu, std::span<const double> nu,
                        const CostMatrix& cost, double regularization, int max_iter, double tol) {
  if (!(regularization > 0.0)) throw ValidationError({"sinkhorn regularization must be positive"});
  check_inputs(mu, nu, cost);

  std::vector<int> I, J;
  for (int i = 0; i < cost.rows; ++i)
    if (mu[i] > 0.0) I.push_back(i);
  for (int j = 0; j < cost.cols; ++j)
    if (nu[j] > 0.0) J.push_back(j);
  const int m = static_cast<int>(I.size()), n = static_cast<int>(J.size());

  double cmax = 0.0;
  for (double v : cost.data) cmax = std::max(cmax, v);

  std::vector<double> f(m, 0.0), g(n, 0.0), buf;
  double residual = std::numeric_limits<double>::infinity();
  int iters = 0;
  double lam = std::max(regularization, cmax);
  for (;;) {
    const bool last_stage = lam <= regularization;
    const double stage_tol = last_stage ? tol : std::max(tol, 1e-6);
    residual = std::numeric_limits<double>::infinity();
    while (residual >= stage_tol) {
      if (iters >= max_iter) throw ConvergenceError("sinkhorn did not converge", residual, iters);
      ++iters;
      buf.resize(n);
      for (int a = 0; a < m; ++a) {
        for (int b = 0; b < n; ++b) buf[b] = (g[b] - cost(I[a], J[b])) / lam;
        f[a] = lam * std::log(mu[I[a]]) - lam * log_sum_exp(buf);
      }
      buf.resize(m);
      for (int b = 0; b < n; ++b) {
        for (int a = 0; a < m; ++a) buf[a] = (f[a] - cost(I[a], J[b])) / lam;
        g[b] = lam * std::log(nu[J[b]]) - lam * log_sum_exp(buf);
      }
      residual = 0.0;
      for (int a = 0; a < m; ++a) {
        double row = 0.0;
        for (int b = 0; b < n; ++b) row += std::exp((f[a] + g[b] - cost(I[a], J[b])) / lam);
        residual += std::abs(row - mu[I[a]]);
      }
    }
    if (last_stage) break;
    lam = std::max(regularization, 0.5 * lam);
  }

  SinkhornResult out;
  out.plan.rows = cost.rows;
  out.plan.cols = cost.cols;
  out.plan.coupling.assign(std::size_t(cost.rows) * cost.cols, 0.0);
  double value = 0.0;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < n; ++b) {
      const double p = std::exp((f[a] + g[b] - cost(I[a], J[b])) / lam);
      out.plan.coupling[std::size_t(I[a]) * cost.cols + J[b]] = p;
      value += p * cost(I[a], J[b]);
    }
  out.plan.cost = value;
  out.value = value;
  out.iterations = iters;
  out.residual = residual;
  return out;
}

PlanReport check_plan(const TransportPlan& plan, std::span<const double> mu,
                      std::span<const double> nu, const CostMatrix* cost) {
  PlanReport r;
  if (plan.rows != static_cast<int>(mu.size()) || plan.cols != static_cast<int>(nu.size()) ||
      plan.coupling.size() != std::size_t(plan.rows) * plan.cols) {
    r.max_row_residual = r.max_col_residual = std::numeric_limits<double>::infinity();
    return r;
  }
  r.min_entry = plan.coupling.empty() ? 0.0 : plan.coupling[0];
  std::vector<double> col(plan.cols, 0.0);
  double total = 0.0;
  for (int i = 0; i < plan.rows; ++i) {
    double row = 0.0;
    for (int j = 0; j < plan.cols; ++j) {
      const double p = plan(i, j);
      row += p;
      col[j] += p;
      r.min_entry = std::min(r.min_entry, p);
      if (p < 0.0) ++r.negative_entries;
      if (cost) total += p * (*cost)(i, j);
    }
    r.max_row_residual = std::max(r.max_row_residual, std::abs(row - mu[i]));
  }
  for (int j = 0; j < plan.cols; ++j)
    r.max_col_residual = std::max(r.max_col_residual, std::abs(col[j] - nu[j]));
  if (cost) r.cost_residual = std::abs(total - plan.cost);
  return r;
}

TransportPlan product_coupling(std::span<const double> mu, std::span<const double> nu) {
  TransportPlan p;
  p.rows = static_cast<int>(mu.size());
  p.cols = static_cast<int>(nu.size());
  p.coupling.resize(std::size_t(p.rows) * p.cols);
  for (int i = 0; i < p.rows; ++i)
    for (int j = 0; j < p.cols; ++j) p.coupling[std::size_t(i) * p.cols + j] = mu[i] * nu[j];
  return p;
}

nlohmann::json plan_to_json(const TransportPlan& plan) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < plan.rows; ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (int j = 0; j < plan.cols; ++j) r.push_back(plan(i, j));
    rows.push_back(std::move(r));
  }
  return {{"rows", plan.rows}, {"cols", plan.cols}, {"cost", plan.cost}, {"coupling", rows}};
}

}  // namespace gcb
