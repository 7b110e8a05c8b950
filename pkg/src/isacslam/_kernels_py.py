"""Pure numpy implementations of the particle-filter hot loops.

Used when the compiled ``_kernels`` extension is unavailable; both must
return identical results up to floating-point rounding.
"""
import numpy as np

_TWO_PI = 2.0 * np.pi


def _wrap(a):
    return np.mod(a + np.pi, _TWO_PI) - np.pi


def path_angles(particles, anchor, pa, is_los):
    """AoA and AoD seen from each particle position for one anchor."""
    dx = particles[:, 0] - anchor[0]
    dy = particles[:, 1] - anchor[1]
    aoa = np.arctan2(dy, dx)
    if is_los:
        return aoa, aoa.copy()
    # AoD points from the PA at the UE's mirror image across the wall, the
    # perpendicular bisector of PA and VA
    nx = anchor[0] - pa[0]
    ny = anchor[1] - pa[1]
    nn = nx * nx + ny * ny
    c = 2.0 * (dx * nx + dy * ny + 0.5 * nn) / nn
    return aoa, np.arctan2(particles[:, 1] - c * ny - pa[1], particles[:, 0] - c * nx - pa[0])


def bearing_loglik(particles, anchors, pa, z, var, is_los):
    """Gaussian log-likelihood (up to a constant) of matched angle pairs.

    particles (N, 2); anchors, z, var (K, 2); is_los (K,) bool.
    """
    out = np.zeros(particles.shape[0])
    for k in range(anchors.shape[0]):
        aoa, aod = path_angles(particles, anchors[k], pa, bool(is_los[k]))
        ra = _wrap(z[k, 0] - aoa)
        rd = _wrap(z[k, 1] - aod)
        out -= 0.5 * (ra * ra / var[k, 0] + rd * rd / var[k, 1])
    return out


def systematic_resample(weights, u0):
    """Indices drawn by systematic resampling with offset ``u0`` in [0, 1)."""
    n = weights.shape[0]
    positions = (u0 + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").astype(np.int64)


def feature_update(particles, means, covs, pa, z, meas_var):
    """Per-particle EKF update of one virtual anchor from one (AoA, AoD) pair.

    ``means`` (N, 2) and ``covs`` (N, 2, 2) are updated in place. Returns the
    per-particle log-likelihood of ``z`` under the pre-update feature.
    """
    x0, x1 = particles[:, 0], particles[:, 1]
    v0, v1 = means[:, 0], means[:, 1]
    d0, d1 = x0 - v0, x1 - v1
    r2 = np.maximum(d0 * d0 + d1 * d1, 1e-18)
    ga0, ga1 = -d1 / r2, d0 / r2
    n0, n1 = v0 - pa[0], v1 - pa[1]
    nn = np.maximum(n0 * n0 + n1 * n1, 1e-18)
    cc = d0 * n0 + d1 * n1 + 0.5 * nn
    c = 2.0 * cc / nn
    e0 = x0 - c * n0 - pa[0]
    e1 = x1 - c * n1 - pa[1]
    q2 = np.maximum(e0 * e0 + e1 * e1, 1e-18)
    gd0, gd1 = -e1 / q2, e0 / q2
    # row 2 of the Jacobian w.r.t. the anchor: g_aod @ d(image)/d(anchor)
    gn = gd0 * n0 + gd1 * n1
    h10 = -2.0 * (gn * d0 / nn + cc * (gd0 / nn - 2.0 * gn * n0 / (nn * nn)))
    h11 = -2.0 * (gn * d1 / nn + cc * (gd1 / nn - 2.0 * gn * n1 / (nn * nn)))
    H = np.empty((particles.shape[0], 2, 2))
    H[:, 0, 0], H[:, 0, 1] = -ga0, -ga1
    H[:, 1, 0], H[:, 1, 1] = h10, h11
    r = np.empty((particles.shape[0], 2))
    r[:, 0] = _wrap(z[0] - np.arctan2(d1, d0))
    r[:, 1] = _wrap(z[1] - np.arctan2(e1, e0))
    HP = H @ covs
    S = HP @ H.transpose(0, 2, 1)
    S[:, 0, 0] += meas_var
    S[:, 1, 1] += meas_var
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    Si = np.empty_like(S)
    Si[:, 0, 0], Si[:, 1, 1] = S[:, 1, 1] / det, S[:, 0, 0] / det
    Si[:, 0, 1], Si[:, 1, 0] = -S[:, 0, 1] / det, -S[:, 1, 0] / det
    Sr = np.einsum("nij,nj->ni", Si, r)
    ll = -0.5 * np.einsum("ni,ni->n", r, Sr) - 0.5 * np.log(det)
    K = HP.transpose(0, 2, 1) @ Si
    means += np.einsum("nij,nj->ni", K, r)
    A = np.eye(2) - K @ H
    covs[:] = A @ covs @ A.transpose(0, 2, 1) + meas_var * (K @ K.transpose(0, 2, 1))
    return ll
