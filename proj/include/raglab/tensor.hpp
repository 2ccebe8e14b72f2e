#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace raglab {

/// Dense row-major matrix of doubles. Everything here is desk-scale
/// (dims of a few dozen), so there is no BLAS and no views.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  size_t size() const { return data.size(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  /// this += w * other (shapes must match).
  void add_scaled(const Matrix& other, double w);

  double l2_norm_squared() const;
  bool all_finite() const;

  bool operator==(const Matrix& o) const { return rows == o.rows && cols == o.cols && data == o.data; }
};

using Vec = std::vector<double>;

double dot(std::span<const double> a, std::span<const double> b);

/// log(sum_i exp(x_i)), stabilized.
double log_sum_exp(std::span<const double> x);

/// x_i - log_sum_exp(x). Returns a fresh vector.
Vec log_softmax(std::span<const double> x);

/// exp of log-probs; sums to 1 up to rounding.
Vec softmax_from_logits(std::span<const double> logits);

// ---- text tensor dumps ----
//
// Line-oriented format with a shape header per tensor and hexfloat
// payload, so a save/load round trip is bit-exact:
//
//   raglab-tensors 1
//   tensor <name> <rows> <cols>
//   <hexfloat> ... <hexfloat>        (one line per row)

struct NamedTensor {
  std::string name;
  Matrix value;
};

std::string tensors_to_string(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> tensors_from_string(const std::string& text);

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

/// Find tensor by name; throws if absent.
const Matrix& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace raglab
