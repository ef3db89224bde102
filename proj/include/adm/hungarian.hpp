#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace adm {

/// Minimum-cost bijection rows -> columns. `mapping[r]` is the column
/// assigned to row r; `total_cost` sums the chosen entries in row order.
struct AssignmentResult {
    std::vector<std::size_t> mapping;
    double total_cost = 0.0;
};

namespace detail {

/// O(n^3) shortest-augmenting-path assignment over a dense cost matrix.
/// Returns some optimal row -> column mapping (not tie-break-normalized).
inline std::vector<std::size_t> assign_min_cost(const std::vector<std::vector<double>>& a) {
    const std::size_t n = a.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);  // p[j]: row matched to column j (1-based)
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> mapping(n);
    for (std::size_t j = 1; j <= n; ++j) mapping[p[j] - 1] = j - 1;
    return mapping;
}

inline double row_order_total(const std::vector<std::vector<double>>& a,
                              const std::vector<std::size_t>& mapping) {
    double total = 0.0;
    for (std::size_t i = 0; i < mapping.size(); ++i) total += a[i][mapping[i]];
    return total;
}

}  // namespace detail

/// Optimal assignment with a fixed tie-break: among all minimum-cost
/// bijections, return the lexicographically smallest mapping (row 0 gets the
/// lowest workable column, then row 1, and so on). Costs must be finite;
/// the matrix must be square and non-empty.
inline AssignmentResult hungarian_assign(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    if (n == 0) throw std::invalid_argument("hungarian_assign: empty cost matrix");
    for (std::size_t i = 0; i < n; ++i) {
        if (cost[i].size() != n) {
            throw std::invalid_argument("hungarian_assign: row " + std::to_string(i) + " has " +
                                        std::to_string(cost[i].size()) + " entries, expected " +
                                        std::to_string(n));
        }
        for (double v : cost[i]) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("hungarian_assign: non-finite cost in row " + std::to_string(i));
            }
        }
    }

    // Fix rows one at a time: give each row the lowest column whose best
    // completion (an optimal sub-assignment over the remaining rows and
    // columns) reaches the minimum total. This walks straight to the
    // lexicographically smallest optimal mapping, exactly what a brute-force
    // scan over permutations in lexicographic order with a strict '<' keeps.
    std::vector<std::size_t> chosen(n);
    std::vector<bool> col_used(n, false);

    for (std::size_t row = 0; row < n; ++row) {
        double best_total = std::numeric_limits<double>::infinity();
        std::size_t best_col = n;
        for (std::size_t col = 0; col < n; ++col) {
            if (col_used[col]) continue;
            std::vector<std::size_t> rem_rows, rem_cols;
            for (std::size_t r = row + 1; r < n; ++r) rem_rows.push_back(r);
            for (std::size_t c = 0; c < n; ++c)
                if (!col_used[c] && c != col) rem_cols.push_back(c);
            std::vector<std::size_t> candidate = chosen;
            candidate[row] = col;
            if (!rem_rows.empty()) {
                std::vector<std::vector<double>> sub(rem_rows.size(),
                                                     std::vector<double>(rem_cols.size()));
                for (std::size_t r = 0; r < rem_rows.size(); ++r)
                    for (std::size_t c = 0; c < rem_cols.size(); ++c)
                        sub[r][c] = cost[rem_rows[r]][rem_cols[c]];
                const auto sub_map = detail::assign_min_cost(sub);
                for (std::size_t r = 0; r < rem_rows.size(); ++r)
                    candidate[rem_rows[r]] = rem_cols[sub_map[r]];
            }
            const double total = detail::row_order_total(cost, candidate);
            if (total < best_total) {
                best_total = total;
                best_col = col;
            }
        }
        chosen[row] = best_col;
        col_used[best_col] = true;
    }
    return AssignmentResult{chosen, detail::row_order_total(cost, chosen)};
}

}  // namespace adm
