#pragma once

#include <algorithm>
#include <complex>
#include <cstddef>
#include <cstdio>
#include <ostream>
#include <span>
#include <tuple>
#include <vector>

#include "cml/error.hpp"
#include "cml/parallel.hpp"

namespace cml {

struct Triplet {
  std::size_t row;
  std::size_t col;
  double value;
};

// Real square matrix in compressed-column storage, with a row-compressed
// mirror for row-parallel products. Entry (i, j) is the mass sent from cell j
// to cell i.
class SparseMatrix {
 public:
  SparseMatrix() = default;

  // Duplicates are summed; explicit zeros dropped.
  SparseMatrix(std::size_t n, std::vector<Triplet> entries) : n_(n) {
    for (const auto& t : entries)
      if (t.row >= n || t.col >= n) throw ConfigError("SparseMatrix: index out of range");
    std::sort(entries.begin(), entries.end(),
              [](const Triplet& a, const Triplet& b) { return std::tie(a.col, a.row) < std::tie(b.col, b.row); });
    col_ptr_.assign(n + 1, 0);
    for (std::size_t k = 0; k < entries.size();) {
      std::size_t m = k;
      double v = 0.0;
      while (m < entries.size() && entries[m].col == entries[k].col && entries[m].row == entries[k].row)
        v += entries[m++].value;
      if (v != 0.0) {
        row_idx_.push_back(entries[k].row);
        values_.push_back(v);
        ++col_ptr_[entries[k].col + 1];
      }
      k = m;
    }
    for (std::size_t j = 0; j < n; ++j) col_ptr_[j + 1] += col_ptr_[j];
    build_rows();
  }

  std::size_t size() const { return n_; }
  std::size_t nonzeros() const { return values_.size(); }
  const std::vector<std::size_t>& col_ptr() const { return col_ptr_; }
  const std::vector<std::size_t>& row_idx() const { return row_idx_; }
  const std::vector<double>& values() const { return values_; }

  double at(std::size_t i, std::size_t j) const {
    for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k)
      if (row_idx_[k] == i) return values_[k];
    return 0.0;
  }

  std::vector<double> column_sums() const {
    std::vector<double> s(n_, 0.0);
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) s[j] += values_[k];
    return s;
  }

  double min_value() const { return values_.empty() ? 0.0 : *std::min_element(values_.begin(), values_.end()); }

  // y = A x, row-parallel; each row sums in a fixed order.
  template <class T>
  void multiply(std::span<const T> x, std::span<T> y, unsigned workers = 1) const {
    auto rows = [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        T acc{};
        for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) acc += row_val_[k] * x[row_col_[k]];
        y[i] = acc;
      }
    };
    if (workers <= 1 || n_ < 4096)
      rows(0, n_);
    else
      parallel_for(n_, workers, rows);
  }

  // y = A^T x.
  template <class T>
  void multiply_transpose(std::span<const T> x, std::span<T> y) const {
    for (std::size_t j = 0; j < n_; ++j) {
      T acc{};
      for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) acc += values_[k] * x[row_idx_[k]];
      y[j] = acc;
    }
  }

  std::vector<std::vector<double>> dense() const {
    std::vector<std::vector<double>> d(n_, std::vector<double>(n_, 0.0));
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) d[row_idx_[k]][j] = values_[k];
    return d;
  }

  // Kronecker product A (x) B with B's index running fastest.
  friend SparseMatrix kron(const SparseMatrix& A, const SparseMatrix& B) {
    std::vector<Triplet> t;
    t.reserve(A.nonzeros() * B.nonzeros());
    for (std::size_t ja = 0; ja < A.n_; ++ja)
      for (std::size_t ka = A.col_ptr_[ja]; ka < A.col_ptr_[ja + 1]; ++ka)
        for (std::size_t jb = 0; jb < B.n_; ++jb)
          for (std::size_t kb = B.col_ptr_[jb]; kb < B.col_ptr_[jb + 1]; ++kb)
            t.push_back({A.row_idx_[ka] * B.n_ + B.row_idx_[kb], ja * B.n_ + jb, A.values_[ka] * B.values_[kb]});
    return SparseMatrix(A.n_ * B.n_, std::move(t));
  }

  // Matrix Market coordinate format, 1-based indices, 17 significant digits.
  void write_matrix_market(std::ostream& os) const {
    os << "%%MatrixMarket matrix coordinate real general\n";
    os << n_ << ' ' << n_ << ' ' << values_.size() << '\n';
    char buf[64];
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", values_[k]);
        os << row_idx_[k] + 1 << ' ' << j + 1 << ' ' << buf << '\n';
      }
  }

 private:
  void build_rows() {
    row_ptr_.assign(n_ + 1, 0);
    for (std::size_t i : row_idx_) ++row_ptr_[i + 1];
    for (std::size_t i = 0; i < n_; ++i) row_ptr_[i + 1] += row_ptr_[i];
    row_col_.resize(values_.size());
    row_val_.resize(values_.size());
    auto fill = row_ptr_;
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) {
        const std::size_t pos = fill[row_idx_[k]]++;
        row_col_[pos] = j;
        row_val_[pos] = values_[k];
      }
  }

  std::size_t n_ = 0;
  std::vector<std::size_t> col_ptr_, row_idx_;
  std::vector<double> values_;
  std::vector<std::size_t> row_ptr_, row_col_;
  std::vector<double> row_val_;
};

}  // namespace cml
