#include "raglab/tensor.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "raglab/io.hpp"

namespace raglab {

void Matrix::add_scaled(const Matrix& other, double w) {
  if (!same_shape(other)) throw std::invalid_argument("Matrix::add_scaled: shape mismatch");
  for (size_t i = 0; i < data.size(); ++i) data[i] += w * other.data[i];
}

double Matrix::l2_norm_squared() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return s;
}

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

Vec log_softmax(std::span<const double> x) {
  const double lse = log_sum_exp(x);
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

Vec softmax_from_logits(std::span<const double> logits) {
  Vec lp = log_softmax(logits);
  for (double& v : lp) v = std::exp(v);
  return lp;
}

// hexfloat keeps the text round trip bit-exact
static void append_double(std::string& out, double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  out += buf;
}

std::string tensors_to_string(const std::vector<NamedTensor>& tensors) {
  std::string out = "raglab-tensors 1\n";
  for (const auto& t : tensors) {
    out += "tensor " + t.name + " " + std::to_string(t.value.rows) + " " + std::to_string(t.value.cols) + "\n";
    for (int r = 0; r < t.value.rows; ++r) {
      for (int c = 0; c < t.value.cols; ++c) {
        if (c > 0) out += ' ';
        append_double(out, t.value(r, c));
      }
      out += '\n';
    }
  }
  return out;
}

std::vector<NamedTensor> tensors_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("raglab-tensors", 0) != 0)
    throw std::runtime_error("tensor dump: missing format header");

  std::vector<NamedTensor> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream hdr(line);
    std::string tag, name;
    int rows = 0, cols = 0;
    hdr >> tag >> name >> rows >> cols;
    if (tag != "tensor" || name.empty() || rows < 0 || cols < 0 || hdr.fail())
      throw std::runtime_error("tensor dump: bad tensor header: " + line);
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      if (!std::getline(in, line)) throw std::runtime_error("tensor dump: truncated tensor " + name);
      const char* p = line.c_str();
      char* end = nullptr;
      for (int c = 0; c < cols; ++c) {
        m(r, c) = std::strtod(p, &end);
        if (end == p) throw std::runtime_error("tensor dump: bad value in tensor " + name);
        p = end;
      }
    }
    out.push_back({name, std::move(m)});
  }
  return out;
}

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, tensors_to_string(tensors));
}

std::vector<NamedTensor> load_tensors(const std::string& path) { return tensors_from_string(read_file(path)); }

const Matrix& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw std::runtime_error("tensor dump: missing tensor " + name);
}

}  // namespace raglab
