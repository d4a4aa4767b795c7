#ifndef ICFG_TENSOR_HPP_
#define ICFG_TENSOR_HPP_

#include <cstddef>
#include <vector>

namespace icfg {

// Dense row-major matrix; vectors are n x 1. Sized for a model whose largest
// tensor has a few thousand entries, so everything is plain loops.
template <typename T>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), T(0)) {}

  T& operator()(int r, int c) { return v[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
  const T& operator()(int r, int c) const {
    return v[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)];
  }
  int size() const { return rows * cols; }
  void zero() { std::fill(v.begin(), v.end(), T(0)); }

  bool operator==(const Tensor&) const = default;
};

// y = W x
template <typename T>
void mat_vec(const Tensor<T>& w, const T* x, T* y) {
  for (int r = 0; r < w.rows; ++r) {
    T s = 0;
    const T* row = w.v.data() + static_cast<size_t>(r) * static_cast<size_t>(w.cols);
    for (int c = 0; c < w.cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

// gw += gy x^T
template <typename T>
void outer_acc(Tensor<T>& gw, const T* gy, const T* x) {
  for (int r = 0; r < gw.rows; ++r) {
    T* row = gw.v.data() + static_cast<size_t>(r) * static_cast<size_t>(gw.cols);
    const T g = gy[r];
    for (int c = 0; c < gw.cols; ++c) row[c] += g * x[c];
  }
}

// gx += W^T gy
template <typename T>
void mat_tvec_acc(const Tensor<T>& w, const T* gy, T* gx) {
  for (int r = 0; r < w.rows; ++r) {
    const T* row = w.v.data() + static_cast<size_t>(r) * static_cast<size_t>(w.cols);
    const T g = gy[r];
    for (int c = 0; c < w.cols; ++c) gx[c] += row[c] * g;
  }
}

template <typename T>
void add_acc(std::vector<T>& dst, const std::vector<T>& src, T scale = T(1)) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace icfg

#endif  // ICFG_TENSOR_HPP_
