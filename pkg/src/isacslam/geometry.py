"""Ground-truth 2D propagation geometry.

Single-bounce specular paths are modelled with the image-source method: a
wall mirrors the physical anchor (the BS) into a virtual anchor, and the
reflected path is the straight line from the virtual anchor to the UE.
Walls are finite segments when deciding whether a path exists, but infinite
lines when mirroring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import GeometryError

_EPS = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Wall:
    p0: tuple[float, float]
    p1: tuple[float, float]
    eps: float = 4.0

    def __post_init__(self):
        if math.dist(self.p0, self.p1) < _EPS:
            raise GeometryError(f"wall endpoints coincide: {self.p0}")
        if not self.eps > 1.0:
            raise GeometryError(f"dielectric constant must exceed 1, got {self.eps}")

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.p1, self.p0)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class AnchorSet:
    pa: np.ndarray
    vas: tuple[np.ndarray, ...]
    walls: tuple[Wall, ...]

    @classmethod
    def from_walls(cls, pa: Sequence[float], walls: Sequence[Wall]) -> "AnchorSet":
        pa = np.asarray(pa, dtype=float)
        return cls(pa, tuple(mirror_anchor(pa, w) for w in walls), tuple(walls))

    @property
    def va_array(self) -> np.ndarray:
        return np.array(self.vas, dtype=float).reshape(-1, 2)

    def __len__(self):
        return 1 + len(self.vas)


@dataclass(frozen=True)
class PathGeometry:
    aoa: float
    aod: float
    gain: float
    is_los: bool
    reflection_point: np.ndarray | None = None
    reflection_angle: float | None = None


@dataclass
class FovSchedule:
    """Visibility of each anchor (0 = PA, l = VA_l) for one UE.

    Intervals are half-open ``(start, end]`` in seconds; ``end=None`` means
    the anchor stays visible to the end of the run.
    """

    intervals: Mapping[int, Sequence[tuple[float, float | None]]] = field(default_factory=dict)

    @classmethod
    def always(cls, anchors: Sequence[int]) -> "FovSchedule":
        return cls({a: [(-math.inf, None)] for a in anchors})

    def visible(self, anchor: int, t: float) -> bool:
        for start, end in self.intervals.get(anchor, ()):
            if t > start and (end is None or t <= end):
                return True
        return False

    def visible_set(self, t: float) -> list[int]:
        return sorted(a for a in self.intervals if self.visible(a, t))


def mirror_anchor(pa, wall: Wall) -> np.ndarray:
    """Reflect ``pa`` across the infinite line through ``wall``."""
    p = np.asarray(pa, dtype=float)
    a = np.asarray(wall.p0, dtype=float)
    d = wall.direction
    rel = p - a
    foot = a + d * (rel @ d)
    return 2.0 * foot - p


def los_geometry(ue, pa, kappa: float = 1.0) -> PathGeometry:
    ue = np.asarray(ue, dtype=float)
    pa = np.asarray(pa, dtype=float)
    d = ue - pa
    dist = math.hypot(d[0], d[1])
    if dist < _EPS:
        raise GeometryError("UE coincides with the physical anchor")
    ang = math.atan2(d[1], d[0])
    return PathGeometry(aoa=ang, aod=ang, gain=kappa / dist, is_los=True)


def reflection_coefficient(gamma: float, eps: float) -> float:
    """Magnitude of the Fresnel coefficient at grazing angle ``gamma``."""
    s = math.sin(gamma)
    root = math.sqrt(eps - math.cos(gamma) ** 2)
    return abs((s - root) / (s + root))


def segment_line_intersection(a, b, p0, p1, within_wall: bool = True):
    """Intersection of segment a->b with the line (or segment) p0-p1.

    Returns None if the segment does not cross; with ``within_wall`` the hit
    must also lie on the wall segment.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    r = b - a
    s = p1 - p0
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < _EPS:
        return None
    q = p0 - a
    u = (q[0] * s[1] - q[1] * s[0]) / denom
    v = (q[0] * r[1] - q[1] * r[0]) / denom
    tol = 1e-9
    if u < -tol or u > 1.0 + tol:
        return None
    if within_wall and (v < -tol or v > 1.0 + tol):
        return None
    return a + u * r


def nlos_geometry(ue, va, pa, wall: Wall, kappa: float = 1.0) -> PathGeometry | None:
    """Single-bounce path geometry, or None when the wall does not carry the path."""
    ue = np.asarray(ue, dtype=float)
    va = np.asarray(va, dtype=float)
    pa = np.asarray(pa, dtype=float)
    d = ue - va
    dist = math.hypot(d[0], d[1])
    if dist < _EPS:
        raise GeometryError("UE coincides with the virtual anchor")
    xp = segment_line_intersection(va, ue, wall.p0, wall.p1)
    if xp is None:
        return None
    aoa = math.atan2(d[1], d[0])
    dp = xp - pa
    if math.hypot(dp[0], dp[1]) < _EPS:
        return None
    aod = math.atan2(dp[1], dp[0])
    gamma = (math.pi - abs(wrap_angle(aoa - aod))) / 2.0
    gain = kappa * reflection_coefficient(gamma, wall.eps) / dist
    return PathGeometry(aoa=aoa, aod=aod, gain=gain, is_los=False,
                        reflection_point=xp, reflection_angle=gamma)


def visible_paths(ue, anchors: AnchorSet, fov: FovSchedule, t: float,
                  kappa_los: float = 1.0, kappa_nlos: float = 1.0) -> list[tuple[int, PathGeometry]]:
    out = []
    for idx in fov.visible_set(t):
        if idx == 0:
            out.append((0, los_geometry(ue, anchors.pa, kappa_los)))
        elif 1 <= idx <= len(anchors.vas):
            g = nlos_geometry(ue, anchors.vas[idx - 1], anchors.pa, anchors.walls[idx - 1], kappa_nlos)
            if g is not None:
                out.append((idx, g))
    return out


# Estimator-side geometry: the wall is not known, but it is the perpendicular
# bisector of PA and VA, which is all the image-source model needs.

def bisector_reflection_point(ue, va, pa) -> np.ndarray | None:
    ue = np.asarray(ue, dtype=float)
    va = np.asarray(va, dtype=float)
    pa = np.asarray(pa, dtype=float)
    n = va - pa
    nn = n @ n
    if nn < _EPS:
        return None
    mid = 0.5 * (va + pa)
    r = ue - va
    denom = r @ n
    if abs(denom) < _EPS:
        return None
    s = ((mid - va) @ n) / denom
    return va + s * r


def ue_image(ue, va, pa) -> np.ndarray:
    """Mirror image of the UE across the wall implied by (PA, VA)."""
    ue = np.asarray(ue, dtype=float)
    n = np.asarray(va, dtype=float) - np.asarray(pa, dtype=float)
    nn = n @ n
    if nn < _EPS:
        raise GeometryError("virtual anchor coincides with the physical anchor")
    c = 2.0 * ((ue - va) @ n + 0.5 * nn) / nn
    return ue - c * n


def coincident(a, b, tol: float = 1e-9) -> bool:
    """True when two points lie within ``tol`` of each other."""
    return math.hypot(a[0] - b[0], a[1] - b[1]) <= tol


def predicted_angles(ue, anchor, pa) -> tuple[float, float]:
    """(AoA, AoD) a UE at ``ue`` would see from ``anchor`` (PA when equal to ``pa``)."""
    ue = np.asarray(ue, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    pa = np.asarray(pa, dtype=float)
    d = ue - anchor
    aoa = math.atan2(d[1], d[0])
    if coincident(anchor, pa):
        return aoa, aoa
    img = ue_image(ue, anchor, pa) - pa
    return aoa, math.atan2(img[1], img[0])


def predicted_gain(ue, anchor, pa, eps: float, kappa_los: float = 1.0, kappa_nlos: float = 1.0) -> float:
    ue = np.asarray(ue, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    dist = max(float(np.linalg.norm(ue - anchor)), 1e-9)
    if coincident(anchor, pa):
        return kappa_los / dist
    aoa, aod = predicted_angles(ue, anchor, pa)
    gamma = (math.pi - abs(wrap_angle(aoa - aod))) / 2.0
    gamma = min(max(gamma, 1e-9), math.pi / 2)
    return kappa_nlos * reflection_coefficient(gamma, eps) / dist


def invert_image_source(ue, aoa: float, aod: float, pa) -> np.ndarray | None:
    """Virtual anchor implied by a UE position and one (AoA, AoD) pair.

    The reflection point is where the ray leaving the PA along ``aod`` meets
    the line through the UE along ``aoa``; the VA sits behind it at the same
    distance as the PA. Returns None for LoS-like (parallel) pairs.
    """
    ue = np.asarray(ue, dtype=float)
    pa = np.asarray(pa, dtype=float)
    u_in = np.array([math.cos(aod), math.sin(aod)])
    u_out = np.array([math.cos(aoa), math.sin(aoa)])
    denom = u_in[0] * u_out[1] - u_in[1] * u_out[0]
    if abs(denom) < 1e-6:
        return None
    q = ue - pa
    s = (q[0] * u_out[1] - q[1] * u_out[0]) / denom
    if s <= 0:
        return None
    xp = pa + s * u_in
    # the UE must be downstream of the reflection point
    if (ue - xp) @ u_out <= 0:
        return None
    return xp - s * u_out
