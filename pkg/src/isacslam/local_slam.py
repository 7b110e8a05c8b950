"""Per-UE local SLAM: a Rao-Blackwellised particle filter.

Particles carry the UE position. Every particle also carries its own
Gaussian for each map feature (a virtual-anchor estimate), so the map stays
consistent with the pose hypothesis that produced it. Both AoA and AoD are
used: for a virtual anchor the wall is the perpendicular bisector of PA and
VA, so the AoD follows from the UE's mirror image across that bisector.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import invert_image_source, wrap_angle
from .kernels import bearing_loglik, feature_update, systematic_resample
from .sensors import AngleMeasurementSet, imu_noise_var

MATCH_NEW = -1
MATCH_CLUTTER = -2
MATCH_PA = -3

_BIG = 1e12


@dataclass
class LocalFeature:
    """Gaussian summary of one feature, as exchanged with the BS.

    For a downloaded (legacy) feature, ``payload`` carries the UE's own
    estimate (mean, per-axis variances) built from its measurements alone,
    or None when it has none; the BS fuses that instead of the summary,
    which already contains the global estimate. Association uses ``mean``.
    """

    mean: np.ndarray
    cov: np.ndarray  # full 2x2; uploads use the diagonal
    confidence: float
    legacy: bool = False
    global_index: int | None = None
    payload: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass
class FeatureTrack:
    """One feature held as a Gaussian per particle."""

    means: np.ndarray  # (N, 2)
    covs: np.ndarray  # (N, 2, 2)
    confidence: float
    legacy: bool = False
    global_index: int | None = None

    @classmethod
    def from_feature(cls, f: LocalFeature, n: int) -> "FeatureTrack":
        return cls(np.tile(np.asarray(f.mean, dtype=float), (n, 1)),
                   np.tile(np.asarray(f.cov, dtype=float), (n, 1, 1)),
                   f.confidence, f.legacy, f.global_index)

    def copy(self) -> "FeatureTrack":
        return FeatureTrack(self.means.copy(), self.covs.copy(), self.confidence,
                            self.legacy, self.global_index)

    def resample(self, idx: np.ndarray):
        self.means = self.means[idx]
        self.covs = self.covs[idx]

    def summary(self, weights: np.ndarray) -> LocalFeature:
        """Moment-matched mixture over particles."""
        mean = weights @ self.means
        d = self.means - mean
        cov = np.einsum("n,nij->ij", weights, self.covs) + (d * weights[:, None]).T @ d
        return LocalFeature(mean, 0.5 * (cov + cov.T), self.confidence, self.legacy, self.global_index)


@dataclass
class UePosterior:
    particles: np.ndarray
    weights: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    @property
    def cov(self) -> np.ndarray:
        d = self.particles - self.mean
        return (d * self.weights[:, None]).T @ d


@dataclass
class SlamParams:
    n_particles: int = 1000
    sigma_angle: float = 0.04
    sigma_imu: float = 0.02
    dt: float = 1.0
    gate_chi2: float = 11.8  # 2-dof equivalent of a 3-sigma gate
    angle_var_floor: float = 1e-6
    process_var_floor: float = 0.0
    r_inc: float = 0.1
    r_max: float = 0.99
    r_decay: float = 0.8
    r_birth: float = 0.4
    r_drop: float = 0.05
    birth_hits: int = 2
    birth_window: int = 3
    birth_cov_max: float = 25.0
    birth_min_sep: float = 0.05  # rad; smaller AoA/AoD separations are LoS-like
    resample_ratio: float = 0.5
    regularize: bool = True
    # Downloaded features are partly built from this UE's own data, so they
    # enter as deliberately weak priors.
    download_var_scale: float = 10.0
    link_gate: float = 13.8  # squared Mahalanobis gate for relinking private estimates

    @property
    def meas_var(self) -> float:
        return self.sigma_angle ** 2 + self.angle_var_floor

    @property
    def process_var(self) -> float:
        return max(imu_noise_var(self.sigma_imu, self.dt), self.process_var_floor)


@dataclass
class AssociationVector:
    """Per measurement: a feature index (>= 0), MATCH_PA, MATCH_NEW or MATCH_CLUTTER."""

    matches: np.ndarray

    def matched_features(self) -> list[int]:
        return [int(m) for m in self.matches if m >= 0]


def init_local(x0, sigma_ini: float, n_p: int, rng: np.random.Generator,
               initial_error: np.ndarray | None = None) -> UePosterior:
    """Particle cloud around an initial estimate x0 + error, error ~ N(0, sigma_ini^2 I)."""
    if n_p < 1:
        raise ValueError("particle count must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    if initial_error is None:
        initial_error = rng.normal(0.0, sigma_ini, size=2) if sigma_ini > 0 else np.zeros(2)
    centre = x0 + initial_error
    if sigma_ini > 0:
        parts = centre + rng.normal(0.0, sigma_ini, size=(n_p, 2))
    else:
        parts = np.tile(centre, (n_p, 1))
    return UePosterior(parts, np.full(n_p, 1.0 / n_p))


def predict(post: UePosterior, displacement, process_var: float,
            rng: np.random.Generator) -> UePosterior:
    parts = post.particles + np.asarray(displacement, dtype=float)
    if process_var > 0:
        parts = parts + rng.normal(0.0, math.sqrt(process_var), size=parts.shape)
    return UePosterior(parts, post.weights.copy())


def import_global(q, j: int, r_cut: float) -> list[LocalFeature]:
    """Legacy features downloaded from the global map, in global index order."""
    out = []
    for i, g in enumerate(q.features):
        conf = g.confidence if g.visibility[j] > r_cut else r_cut
        out.append(LocalFeature(g.mean.copy(), np.diag(g.var), conf, legacy=True, global_index=i))
    return out


def extract(post: UePosterior, features):
    """UE Gaussian (mean, diagonal variances) and per-feature Gaussians.

    ``features`` may hold LocalFeature summaries or FeatureTrack objects.
    """
    cov = post.cov
    out = []
    for f in features:
        if isinstance(f, FeatureTrack):
            f = f.summary(post.weights)
        out.append((f.mean, f.var))
    return (post.mean, np.clip(np.diag(cov), 0.0, None)), out


# -- measurement model -----------------------------------------------------

def _grad_atan(e):
    r2 = e[0] * e[0] + e[1] * e[1]
    return np.array([-e[1], e[0]]) / max(r2, 1e-18)


def angles_and_jacobians(x, v, pa, los: bool):
    """Predicted (AoA, AoD) for a UE at x and anchor v, with Jacobians w.r.t. x and v."""
    d = x - v
    g_aoa = _grad_atan(d)
    aoa = math.atan2(d[1], d[0])
    if los:
        Hx = np.vstack([g_aoa, g_aoa])
        return np.array([aoa, aoa]), Hx, np.zeros((2, 2))
    n = v - pa
    nn = max(n @ n, 1e-18)
    cc = d @ n + 0.5 * nn
    img = x - (2.0 * cc / nn) * n
    e = img - pa
    g_aod = _grad_atan(e)
    refl = np.eye(2) - 2.0 * np.outer(n, n) / nn
    dimg_dv = -2.0 * (np.outer(n, d) / nn + cc * (np.eye(2) / nn - 2.0 * np.outer(n, n) / nn ** 2))
    Hx = np.vstack([g_aoa, g_aod @ refl])
    Hv = np.vstack([-g_aoa, g_aod @ dimg_dv])
    return np.array([aoa, math.atan2(e[1], e[0])]), Hx, Hv


def invert_image_source_many(X, aoa: float, aod: float, pa):
    """Vectorised :func:`invert_image_source` over UE positions X (N, 2).

    Returns (anchors (N, 2), valid mask)."""
    X = np.asarray(X, dtype=float)
    pa = np.asarray(pa, dtype=float)
    u_in = np.array([math.cos(aod), math.sin(aod)])
    u_out = np.array([math.cos(aoa), math.sin(aoa)])
    denom = u_in[0] * u_out[1] - u_in[1] * u_out[0]
    if abs(denom) < 1e-6:
        return np.zeros_like(X), np.zeros(len(X), dtype=bool)
    q = X - pa
    s = (q[:, 0] * u_out[1] - q[:, 1] * u_out[0]) / denom
    xp = pa + s[:, None] * u_in
    ok = (s > 0) & (((X - xp) @ u_out) > 0)
    return xp - s[:, None] * u_out, ok


# -- association and update ------------------------------------------------

@dataclass
class _Candidate:
    feature: LocalFeature
    born: int
    hits: int = 1


def _ekf_update(f: LocalFeature, z, pred, Hv, R):
    S = Hv @ f.cov @ Hv.T + R
    K = f.cov @ Hv.T @ np.linalg.inv(S)
    r = wrap_angle(np.asarray(z) - pred)
    mean = f.mean + K @ r
    IKH = np.eye(2) - K @ Hv
    cov = IKH @ f.cov @ IKH.T + K @ R @ K.T
    return mean, 0.5 * (cov + cov.T)


def _clip_cov(cov, lo, hi):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return (V * np.clip(w, lo, hi)) @ V.T


def _inversion_jacobian(ue, z, pa):
    """d(anchor)/d(x, y, aoa, aod) by central differences, or None near degeneracy."""
    J = np.zeros((2, 4))
    base = np.array([ue[0], ue[1], z[0], z[1]], dtype=float)
    h = 1e-6
    for k in range(4):
        p, m = base.copy(), base.copy()
        p[k] += h
        m[k] -= h
        vp = invert_image_source(p[:2], p[2], p[3], pa)
        vm = invert_image_source(m[:2], m[2], m[3], pa)
        if vp is None or vm is None:
            return None
        J[:, k] = (vp - vm) / (2 * h)
    return J


def _separable(z, params: SlamParams) -> bool:
    sep = abs(math.sin(wrap_angle(float(z[0]) - float(z[1]))))
    return sep >= math.sin(max(4.0 * params.sigma_angle, params.birth_min_sep))


def birth_feature(ue_mean, ue_cov, z, pa, params: SlamParams) -> LocalFeature | None:
    """Initialise a virtual anchor from one (AoA, AoD) pair by image-source inversion."""
    if not _separable(z, params):
        return None
    va = invert_image_source(ue_mean, float(z[0]), float(z[1]), pa)
    if va is None:
        return None
    J = _inversion_jacobian(ue_mean, z, pa)
    if J is None:
        return None
    cov = J[:, :2] @ ue_cov @ J[:, :2].T + params.meas_var * (J[:, 2:] @ J[:, 2:].T)
    cov = _clip_cov(2.0 * cov, 1e-6, params.birth_cov_max)
    return LocalFeature(va, cov, params.r_birth)


def birth_track(post: UePosterior, z, pa, params: SlamParams, fallback: LocalFeature) -> FeatureTrack:
    """Per-particle initialisation: each particle inverts ``z`` from its own position."""
    n = len(post.weights)
    means, ok = invert_image_source_many(post.particles, float(z[0]), float(z[1]), pa)
    means[~ok] = fallback.mean
    J = _inversion_jacobian(post.mean, z, pa)
    if J is None:
        cov = fallback.cov
    else:
        cov = _clip_cov(2.0 * params.meas_var * (J[:, 2:] @ J[:, 2:].T), 1e-6, params.birth_cov_max)
    covs = np.tile(cov, (n, 1, 1))
    covs[~ok] = fallback.cov
    return FeatureTrack(means, covs, params.r_birth)


def associate(x, Px, summaries: list[LocalFeature], Z, pa, params: SlamParams) -> np.ndarray:
    """Gated optimal assignment of measurements to the PA and features.

    Cost is the squared Mahalanobis distance plus log det S; pairs outside the
    chi-square gate are forbidden.
    """
    n_meas = len(Z)
    R = params.meas_var * np.eye(2)
    matches = np.full(n_meas, MATCH_NEW, dtype=int)
    anchors = [(pa, np.zeros((2, 2)), True)] + [(f.mean, f.cov, False) for f in summaries]
    if not n_meas:
        return matches
    cost = np.full((n_meas, len(anchors)), _BIG)
    for a, (pos, cov, los) in enumerate(anchors):
        pred, Hx, Hv = angles_and_jacobians(x, pos, pa, los)
        S = Hv @ cov @ Hv.T + Hx @ Px @ Hx.T + R
        Sinv = np.linalg.inv(S)
        logdet = math.log(max(np.linalg.det(S), 1e-300))
        r = wrap_angle(Z - pred)
        d2 = np.einsum("ij,jk,ik->i", r, Sinv, r)
        ok = d2 <= params.gate_chi2
        cost[ok, a] = d2[ok] + logdet
    rows, cols = linear_sum_assignment(cost)
    for m, a in zip(rows, cols):
        if cost[m, a] < _BIG:
            matches[m] = MATCH_PA if a == 0 else a - 1
    return matches


def associate_and_update(post: UePosterior, tracks: list[FeatureTrack], z: AngleMeasurementSet,
                         pa, params: SlamParams, rng: np.random.Generator,
                         candidates: list[_Candidate] | None = None, step: int = 0):
    """One measurement update.

    Returns (association, updated tracks, updated posterior). ``candidates``
    (birth candidates awaiting confirmation) is updated in place when given.
    """
    pa = np.asarray(pa, dtype=float)
    tracks = [t.copy() for t in tracks]
    Z = np.asarray(z.z, dtype=float).reshape(-1, 2)
    x, Px = post.mean, post.cov
    summaries = [t.summary(post.weights) for t in tracks]
    matches = associate(x, Px, summaries, Z, pa, params)

    # weight particles and update their feature Gaussians
    particles = np.ascontiguousarray(post.particles)
    ll = np.zeros(len(particles))
    pa_rows = [m for m in range(len(Z)) if matches[m] == MATCH_PA]
    if pa_rows:
        k = len(pa_rows)
        ll += bearing_loglik(particles, np.tile(pa, (k, 1)), pa, np.ascontiguousarray(Z[pa_rows]),
                             np.full((k, 2), params.meas_var), np.ones(k, dtype=bool))
    matched = set()
    for m in range(len(Z)):
        a = matches[m]
        if a < 0:
            continue
        t = tracks[a]
        ll += feature_update(particles, t.means, t.covs, pa, np.ascontiguousarray(Z[m]), params.meas_var)
        t.confidence = min(params.r_max, t.confidence + params.r_inc)
        matched.add(a)
    for a, t in enumerate(tracks):
        if a not in matched:
            t.confidence *= params.r_decay
    if len(pa_rows) or matched:
        logw = np.log(np.maximum(post.weights, 1e-300)) + ll
        logw -= logw.max()
        w = np.exp(logw)
        post = UePosterior(particles, w / w.sum())

    # births: an unmatched measurement must be seen in birth_hits of birth_window steps
    if candidates is not None:
        x, Px = post.mean, post.cov
        R = params.meas_var * np.eye(2)
        candidates[:] = [c for c in candidates if step - c.born < params.birth_window]
        used, born = set(), []
        for m in np.flatnonzero(matches == MATCH_NEW):
            hit, best = None, params.gate_chi2
            for ci, c in enumerate(candidates):
                if ci in used:
                    continue
                pred, Hx, Hv = angles_and_jacobians(x, c.feature.mean, pa, False)
                S = Hv @ c.feature.cov @ Hv.T + Hx @ Px @ Hx.T + R
                r = wrap_angle(Z[m] - pred)
                d2 = r @ np.linalg.solve(S, r)
                if d2 <= best:
                    best, hit = d2, ci
            if hit is not None:
                used.add(hit)
                c = candidates[hit]
                pred, Hx, Hv = angles_and_jacobians(x, c.feature.mean, pa, False)
                c.feature.mean, c.feature.cov = _ekf_update(c.feature, Z[m], pred, Hv, R + Hx @ Px @ Hx.T)
                c.hits += 1
                if c.hits >= params.birth_hits:
                    born.append((hit, m))
                continue
            f = birth_feature(x, Px, Z[m], pa, params)
            if f is None:
                matches[m] = MATCH_CLUTTER
            elif params.birth_hits <= 1:
                tracks.append(birth_track(post, Z[m], pa, params, f))
            else:
                candidates.append(_Candidate(f, step))
                used.add(len(candidates) - 1)
        for ci, m in sorted(born, reverse=True):
            c = candidates.pop(ci)
            tracks.append(birth_track(post, Z[m], pa, params, c.feature))

    tracks = [t for t in tracks if t.legacy or t.confidence >= params.r_drop]
    post, tracks = _maybe_resample(post, tracks, params, rng)
    return AssociationVector(matches), tracks, post


def _maybe_resample(post: UePosterior, tracks: list[FeatureTrack], params: SlamParams,
                    rng: np.random.Generator):
    n = len(post.weights)
    ess = 1.0 / float(post.weights @ post.weights)
    if ess >= params.resample_ratio * n:
        return post, tracks
    idx = systematic_resample(np.ascontiguousarray(post.weights), float(rng.random()))
    parts = post.particles[idx]
    if params.regularize and n > 1:
        h2 = (4.0 / (n * 4.0)) ** (2.0 / 6.0)  # Silverman factor, d = 2
        try:
            L = np.linalg.cholesky(h2 * post.cov + 1e-18 * np.eye(2))
            parts = parts + rng.normal(size=parts.shape) @ L.T
        except np.linalg.LinAlgError:
            pass
    for t in tracks:
        t.resample(idx)
    return UePosterior(parts, np.full(n, 1.0 / n)), tracks


@dataclass
class _Filter:
    post: UePosterior
    tracks: list[FeatureTrack] = field(default_factory=list)
    candidates: list[_Candidate] = field(default_factory=list)

    def copy(self) -> "_Filter":
        return copy.deepcopy(self)


class LocalSlam:
    """Stateful local SLAM for one UE.

    Once a global map has been downloaded the UE runs two filters on the same
    measurements. The navigation filter uses the downloaded features and
    provides the pose estimate. The private filter never sees the download,
    so the map it reports stays independent of what the BS already holds.
    Before the first download both would be identical, so only one runs.
    """

    def __init__(self, pa, params: SlamParams, post: UePosterior, rng: np.random.Generator):
        self.pa = np.asarray(pa, dtype=float)
        self.params = params
        self.rng = rng
        self.nav = _Filter(post)
        self.private: _Filter | None = None
        self.step_index = 0
        self._legacy: list[LocalFeature] = []
        self._d_dup = 0.0

    @property
    def post(self) -> UePosterior:
        return self.nav.post

    @property
    def tracks(self) -> list[FeatureTrack]:
        return self.nav.tracks

    @property
    def features(self) -> list[LocalFeature]:
        return [t.summary(self.nav.post.weights) for t in self.nav.tracks]

    def _filters(self) -> list[_Filter]:
        return [self.nav] if self.private is None else [self.nav, self.private]

    def predict(self, displacement):
        for f in self._filters():
            f.post = predict(f.post, displacement, self.params.process_var, self.rng)

    def import_global(self, legacy: list[LocalFeature], d_dup: float):
        """Replace the navigation filter's legacy features by the downloaded
        map, dropping its own features that the download already covers."""
        if self.private is None:
            self.private = self.nav.copy()
        self._legacy = [LocalFeature(g.mean.copy(), np.asarray(g.cov, dtype=float).copy(), g.confidence,
                                     True, g.global_index) for g in legacy]
        self._d_dup = d_dup
        w = self.nav.post.weights
        k = self.params.download_var_scale
        keep = [t for t in self.nav.tracks if not t.legacy
                and self._link(t.summary(w), legacy, d_dup) is None]
        fresh = [FeatureTrack.from_feature(LocalFeature(g.mean, k * np.asarray(g.cov), g.confidence,
                                                        True, g.global_index), len(w))
                 for g in legacy]
        self.nav.tracks = fresh + keep

    def _link(self, f: LocalFeature, legacy: list[LocalFeature], d_dup: float) -> int | None:
        """Index of the downloaded feature ``f`` duplicates: within ``d_dup``,
        or inside ``params.link_gate`` in squared Mahalanobis terms."""
        if not legacy:
            return None
        centres = np.array([g.mean for g in legacy], dtype=float)
        d = np.linalg.norm(centres - f.mean, axis=1)
        i = int(np.argmin(d))
        if d[i] <= d_dup:
            return i
        cvars = np.array([np.diag(g.cov) for g in legacy], dtype=float)
        m2 = np.sum((centres - f.mean) ** 2 / (cvars + f.var), axis=1)
        i = int(np.argmin(m2))
        return i if m2[i] <= self.params.link_gate else None

    def update(self, z: AngleMeasurementSet) -> AssociationVector:
        self.step_index += 1
        out = None
        for f in self._filters():
            assoc, f.tracks, f.post = associate_and_update(
                f.post, f.tracks, z, self.pa, self.params, self.rng,
                candidates=f.candidates, step=self.step_index)
            out = assoc if out is None else out
        return out

    def upload(self) -> list[LocalFeature]:
        """Features for the BS.

        Before any download these are the plain summaries. Afterwards each
        downloaded feature comes back as a legacy entry whose confidence is the
        navigation filter's and whose payload is the linked private estimate
        (None when the UE has not built one); unlinked private features follow
        as new features. Of two private features linked to one downloaded
        feature, the tighter one is kept.
        """
        if self.private is None:
            return self.features
        w_nav = self.nav.post.weights
        conf = {t.global_index: t.confidence for t in self.nav.tracks if t.legacy}
        w = self.private.post.weights
        linked: dict[int, LocalFeature] = {}
        new = []
        for t in self.private.tracks:
            f = t.summary(w)
            i = self._link(f, self._legacy, self._d_dup)
            if i is None:
                new.append(f)
            elif i not in linked or np.trace(f.cov) < np.trace(linked[i].cov):
                linked[i] = f
        out = []
        for i, g in enumerate(self._legacy):
            nav = next((t for t in self.nav.tracks if t.legacy and t.global_index == g.global_index), None)
            f = nav.summary(w_nav) if nav is not None else LocalFeature(g.mean, g.cov, 0.0, True, g.global_index)
            f.confidence = conf.get(g.global_index, 0.0)
            p = linked.get(i)
            if p is not None:
                f.payload = (p.mean, np.maximum(p.var, 1e-12))
            out.append(f)
        return out + new

    def extract(self):
        return extract(self.nav.post, self.nav.tracks)
