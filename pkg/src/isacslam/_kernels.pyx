# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled particle-filter kernels; see ``_kernels_py`` for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport atan2, fmod, log, M_PI

cnp.import_array()


cdef inline double _wrap(double a) nogil:
    a = fmod(a + M_PI, 2.0 * M_PI)
    if a < 0:
        a += 2.0 * M_PI
    return a - M_PI


def bearing_loglik(double[:, ::1] particles, double[:, ::1] anchors, double[::1] pa,
                   double[:, ::1] z, double[:, ::1] var, is_los):
    cdef Py_ssize_t n = particles.shape[0]
    cdef Py_ssize_t K = anchors.shape[0]
    cdef Py_ssize_t i, k
    cdef double dx, dy, aoa, aod, nx, ny, nn, c, ra, rd, ax, ay
    cdef cnp.uint8_t[::1] los = np.ascontiguousarray(is_los, dtype=np.uint8)
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for k in range(K):
            ax = anchors[k, 0]
            ay = anchors[k, 1]
            nx = ax - pa[0]
            ny = ay - pa[1]
            nn = nx * nx + ny * ny
            for i in range(n):
                dx = particles[i, 0] - ax
                dy = particles[i, 1] - ay
                aoa = atan2(dy, dx)
                if los[k]:
                    aod = aoa
                else:
                    # UE mirror image across the PA/VA bisector
                    c = 2.0 * (dx * nx + dy * ny + 0.5 * nn) / nn
                    aod = atan2(particles[i, 1] - c * ny - pa[1], particles[i, 0] - c * nx - pa[0])
                ra = _wrap(z[k, 0] - aoa)
                rd = _wrap(z[k, 1] - aod)
                o[i] -= 0.5 * (ra * ra / var[k, 0] + rd * rd / var[k, 1])
    return out


def systematic_resample(double[::1] weights, double u0):
    cdef Py_ssize_t n = weights.shape[0]
    cdef Py_ssize_t i = 0, j = 0
    cdef double c, pos
    idx = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = idx
    with nogil:
        c = weights[0]
        for i in range(n):
            pos = (u0 + i) / n
            while c <= pos and j < n - 1:
                j += 1
                c += weights[j]
            out[i] = j
    return idx


def feature_update(double[:, ::1] particles, double[:, ::1] means, double[:, :, ::1] covs,
                   double[::1] pa, double[::1] z, double meas_var):
    cdef Py_ssize_t n = particles.shape[0]
    cdef Py_ssize_t i
    cdef double d0, d1, r2, ga0, ga1, n0, n1, nn, cc, c, e0, e1, q2, gd0, gd1, gn
    cdef double h00, h01, h10, h11, p00, p01, p10, p11, s00, s01, s10, s11, det
    cdef double i00, i01, i10, i11, ra, rd, k00, k01, k10, k11
    cdef double hp00, hp01, hp10, hp11, a00, a01, a10, a11, t00, t01, t10, t11
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            d0 = particles[i, 0] - means[i, 0]
            d1 = particles[i, 1] - means[i, 1]
            r2 = d0 * d0 + d1 * d1
            if r2 < 1e-18:
                r2 = 1e-18
            ga0 = -d1 / r2
            ga1 = d0 / r2
            n0 = means[i, 0] - pa[0]
            n1 = means[i, 1] - pa[1]
            nn = n0 * n0 + n1 * n1
            if nn < 1e-18:
                nn = 1e-18
            cc = d0 * n0 + d1 * n1 + 0.5 * nn
            c = 2.0 * cc / nn
            e0 = particles[i, 0] - c * n0 - pa[0]
            e1 = particles[i, 1] - c * n1 - pa[1]
            q2 = e0 * e0 + e1 * e1
            if q2 < 1e-18:
                q2 = 1e-18
            gd0 = -e1 / q2
            gd1 = e0 / q2
            gn = gd0 * n0 + gd1 * n1
            h00 = -ga0
            h01 = -ga1
            h10 = -2.0 * (gn * d0 / nn + cc * (gd0 / nn - 2.0 * gn * n0 / (nn * nn)))
            h11 = -2.0 * (gn * d1 / nn + cc * (gd1 / nn - 2.0 * gn * n1 / (nn * nn)))
            ra = _wrap(z[0] - atan2(d1, d0))
            rd = _wrap(z[1] - atan2(e1, e0))
            p00 = covs[i, 0, 0]
            p01 = covs[i, 0, 1]
            p10 = covs[i, 1, 0]
            p11 = covs[i, 1, 1]
            hp00 = h00 * p00 + h01 * p10
            hp01 = h00 * p01 + h01 * p11
            hp10 = h10 * p00 + h11 * p10
            hp11 = h10 * p01 + h11 * p11
            s00 = hp00 * h00 + hp01 * h01 + meas_var
            s01 = hp00 * h10 + hp01 * h11
            s10 = hp10 * h00 + hp11 * h01
            s11 = hp10 * h10 + hp11 * h11 + meas_var
            det = s00 * s11 - s01 * s10
            i00 = s11 / det
            i11 = s00 / det
            i01 = -s01 / det
            i10 = -s10 / det
            o[i] = -0.5 * (ra * (i00 * ra + i01 * rd) + rd * (i10 * ra + i11 * rd)) - 0.5 * log(det)
            # K = (HP)^T S^-1
            k00 = hp00 * i00 + hp10 * i10
            k01 = hp00 * i01 + hp10 * i11
            k10 = hp01 * i00 + hp11 * i10
            k11 = hp01 * i01 + hp11 * i11
            means[i, 0] += k00 * ra + k01 * rd
            means[i, 1] += k10 * ra + k11 * rd
            a00 = 1.0 - (k00 * h00 + k01 * h10)
            a01 = -(k00 * h01 + k01 * h11)
            a10 = -(k10 * h00 + k11 * h10)
            a11 = 1.0 - (k10 * h01 + k11 * h11)
            t00 = a00 * p00 + a01 * p10
            t01 = a00 * p01 + a01 * p11
            t10 = a10 * p00 + a11 * p10
            t11 = a10 * p01 + a11 * p11
            covs[i, 0, 0] = t00 * a00 + t01 * a01 + meas_var * (k00 * k00 + k01 * k01)
            covs[i, 0, 1] = t00 * a10 + t01 * a11 + meas_var * (k00 * k10 + k01 * k11)
            covs[i, 1, 0] = t10 * a00 + t11 * a01 + meas_var * (k10 * k00 + k11 * k01)
            covs[i, 1, 1] = t10 * a10 + t11 * a11 + meas_var * (k10 * k10 + k11 * k11)
    return out
