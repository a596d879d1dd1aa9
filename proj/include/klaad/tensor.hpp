#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace klaad {

// Dense row-major matrix. Scalar is float for training, double for
// gradient checks; both instantiations share all the math below.
template <typename S>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<S> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, S(0)) {}

    S& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    const S& operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    S* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const S* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

    size_t size() const { return data.size(); }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    template <typename T>
    Mat<T> cast() const {
        Mat<T> out(rows, cols);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

// out = a * b, [m x k] * [k x n]
template <typename S>
void matmul(const Mat<S>& a, const Mat<S>& b, Mat<S>& out) {
    out = Mat<S>(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const S* ar = a.row(i);
        S* or_ = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const S av = ar[k];
            if (av == S(0)) continue;
            const S* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) or_[j] += av * br[j];
        }
    }
}

// out = a * b^T, [m x k] * [n x k]^T
template <typename S>
void matmul_nt(const Mat<S>& a, const Mat<S>& b, Mat<S>& out) {
    out = Mat<S>(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const S* ar = a.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const S* br = b.row(j);
            S acc = 0;
            for (int k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
}

// out = a^T * b, [m x k]^T * [m x n]
template <typename S>
void matmul_tn(const Mat<S>& a, const Mat<S>& b, Mat<S>& out) {
    out = Mat<S>(a.cols, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const S* ar = a.row(i);
        const S* br = b.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const S av = ar[k];
            if (av == S(0)) continue;
            S* or_ = out.row(k);
            for (int j = 0; j < b.cols; ++j) or_[j] += av * br[j];
        }
    }
}

template <typename S>
void add_inplace(Mat<S>& a, const Mat<S>& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename S>
void axpy_inplace(Mat<S>& a, S alpha, const Mat<S>& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += alpha * b.data[i];
}

// Deterministic normal sampler. Box-Muller over the raw engine output so
// results do not depend on the standard library's distribution internals.
class NormalSampler {
  public:
    explicit NormalSampler(uint64_t seed) : engine_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    uint64_t next_u64() { return engine_(); }

  private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace klaad
