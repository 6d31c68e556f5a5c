#pragma once

#include <array>
#include <cmath>
#include <cstddef>

#include "physmv/common.hpp"

namespace physmv {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    Vec3& operator-=(const Vec3& o) {
        x -= o.x;
        y -= o.y;
        z -= o.z;
        return *this;
    }
    Vec3 operator-() const { return {-x, -y, -z}; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

/// Row-major 3x3 matrix, double precision throughout.
struct Mat3 {
    std::array<double, 9> m = {0, 0, 0, 0, 0, 0, 0, 0, 0};

    Mat3() = default;
    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    static Mat3 zero() { return Mat3(); }
    static Mat3 from_rows(const Vec3& a, const Vec3& b, const Vec3& c) {
        Mat3 r;
        r.m = {a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z};
        return r;
    }
    static Mat3 outer(const Vec3& a, const Vec3& b) {
        Mat3 r;
        r.m = {a.x * b.x, a.x * b.y, a.x * b.z, a.y * b.x, a.y * b.y,
               a.y * b.z, a.z * b.x, a.z * b.y, a.z * b.z};
        return r;
    }

    double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
    double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
        return r;
    }
    Mat3 operator-(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
        return r;
    }
    Mat3 operator*(double s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
        return r;
    }
    Mat3& operator+=(const Mat3& o) {
        for (int i = 0; i < 9; ++i) m[i] += o.m[i];
        return *this;
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    double trace() const { return m[0] + m[4] + m[8]; }

    Mat3 inverse() const {
        const double d = det();
        if (d == 0.0) throw DomainError("Mat3::inverse of singular matrix");
        const double inv = 1.0 / d;
        Mat3 r;
        r(0, 0) = (m[4] * m[8] - m[5] * m[7]) * inv;
        r(0, 1) = (m[2] * m[7] - m[1] * m[8]) * inv;
        r(0, 2) = (m[1] * m[5] - m[2] * m[4]) * inv;
        r(1, 0) = (m[5] * m[6] - m[3] * m[8]) * inv;
        r(1, 1) = (m[0] * m[8] - m[2] * m[6]) * inv;
        r(1, 2) = (m[2] * m[3] - m[0] * m[5]) * inv;
        r(2, 0) = (m[3] * m[7] - m[4] * m[6]) * inv;
        r(2, 1) = (m[1] * m[6] - m[0] * m[7]) * inv;
        r(2, 2) = (m[0] * m[4] - m[1] * m[3]) * inv;
        return r;
    }

    double frobenius() const {
        double s = 0;
        for (double v : m) s += v * v;
        return std::sqrt(s);
    }
};

/// Rotation factor of the polar decomposition F = R S via Higham iteration.
/// Requires det(F) > 0.
inline Mat3 polar_rotation(const Mat3& f) {
    if (!(f.det() > 0.0)) throw DomainError("polar_rotation requires det(F) > 0");
    Mat3 r = f;
    for (int iter = 0; iter < 64; ++iter) {
        Mat3 next = (r + r.inverse().transposed()) * 0.5;
        const double delta = (next - r).frobenius();
        r = next;
        if (delta < 1e-13) break;
    }
    return r;
}

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations,
/// descending order. Used by the elastic energy estimate.
inline std::array<double, 3> sym_eigenvalues(Mat3 a) {
    for (int sweep = 0; sweep < 32; ++sweep) {
        double off = 0;
        for (int p = 0; p < 3; ++p)
            for (int q = p + 1; q < 3; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26) break;
        for (int p = 0; p < 3; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                Mat3 j = Mat3::identity();
                j(p, p) = c;
                j(q, q) = c;
                j(p, q) = s;
                j(q, p) = -s;
                a = j.transposed() * a * j;
            }
    }
    std::array<double, 3> ev = {a(0, 0), a(1, 1), a(2, 2)};
    if (ev[0] < ev[1]) std::swap(ev[0], ev[1]);
    if (ev[1] < ev[2]) std::swap(ev[1], ev[2]);
    if (ev[0] < ev[1]) std::swap(ev[0], ev[1]);
    return ev;
}

}  // namespace physmv
