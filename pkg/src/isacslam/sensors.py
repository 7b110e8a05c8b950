"""Measurement synthesis: noisy path angles, IMU dead reckoning and a
pinhole-camera multi-object detector."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import PathGeometry, wrap_angle


@dataclass
class AngleMeasurementSet:
    """Shuffled (AoA, AoD) pairs, shape (K, 2).

    ``sources`` records which anchor produced each row (-1 for clutter). It is
    ground truth for diagnostics only and is never read by the estimators.
    """

    z: np.ndarray
    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.z)


def measure_angles(paths: Sequence[tuple[int, PathGeometry]] | Sequence[PathGeometry],
                   sigma_angle: float, rng: np.random.Generator,
                   clutter_rate: float = 0.0) -> AngleMeasurementSet:
    if sigma_angle < 0:
        raise ValueError("sigma_angle must be non-negative")
    rows, src = [], []
    for item in paths:
        idx, p = item if isinstance(item, tuple) else (-1, item)
        rows.append((p.aoa, p.aod))
        src.append(idx)
    z = np.array(rows, dtype=float).reshape(-1, 2)
    if len(z):
        z = wrap_angle(z + rng.normal(0.0, sigma_angle, size=z.shape)) if sigma_angle > 0 else z
    if clutter_rate > 0:
        n_c = rng.poisson(clutter_rate)
        if n_c:
            z = np.vstack([z, rng.uniform(-math.pi, math.pi, size=(n_c, 2))])
            src.extend([-1] * n_c)
    src = np.array(src, dtype=int)
    perm = rng.permutation(len(z))
    return AngleMeasurementSet(z[perm], src[perm])


@dataclass
class ImuState:
    position: np.ndarray
    cov: np.ndarray


def imu_noise_var(sigma_imu: float, dt: float) -> float:
    """Per-axis position variance added per step: acceleration noise double-integrated over dt."""
    return (0.5 * sigma_imu * dt * dt) ** 2


def imu_step(prev: ImuState, displacement, dt: float, sigma_imu: float,
             rng: np.random.Generator) -> tuple[ImuState, np.ndarray]:
    """Dead-reckoning update. Returns the new state and the reported (noisy) displacement."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    q = imu_noise_var(sigma_imu, dt)
    noise = rng.normal(0.0, math.sqrt(q), size=2) if q > 0 else np.zeros(2)
    reported = np.asarray(displacement, dtype=float) + noise
    return ImuState(prev.position + reported, prev.cov + q * np.eye(2)), reported


@dataclass(frozen=True)
class CameraModel:
    position: tuple[float, float]
    height: float
    yaw: float
    pitch: float  # positive tilts the optical axis down
    focal: float = 500.0
    width: int = 800
    height_px: int = 600
    u0: float | None = None
    v0: float | None = None
    p_detect: float = 1.0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        u0, v0 = self.principal_point
        if not (0 <= u0 <= self.width and 0 <= v0 <= self.height_px):
            raise ValueError("principal point must lie inside the image")
        if not 0 < self.p_detect <= 1:
            raise ValueError("detection probability must be in (0, 1]")

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width / 2 if self.u0 is None else self.u0,
                self.height_px / 2 if self.v0 is None else self.v0)

    def axes(self):
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cy * cp, sy * cp, -sp])
        right = np.array([sy, -cy, 0.0])
        down = -np.cross(right, forward)
        return right, down, forward


def project_to_pixels(world, cam: CameraModel, target_height: float = 0.0):
    """Pinhole projection of a ground target; None when behind the camera or off-image."""
    p = np.array([world[0] - cam.position[0], world[1] - cam.position[1],
                  target_height - cam.height])
    right, down, forward = cam.axes()
    zc = p @ forward
    if zc <= 1e-9:
        return None
    u0, v0 = cam.principal_point
    u = u0 + cam.focal * (p @ right) / zc
    v = v0 + cam.focal * (p @ down) / zc
    tol = 1e-9
    if u < -tol or u > cam.width + tol or v < -tol or v > cam.height_px + tol:
        return None
    return float(u), float(v)


class RadialErrorSurface:
    """Per-axis vision error std growing from ``smin`` at the image centre to
    ``smax`` on the image border (Chebyshev-normalised radius)."""

    def __init__(self, cam: CameraModel, smin: float = 0.005, smax: float = 2.0,
                 power: float = 2.0, x_scale: float = 1.0, y_scale: float = 1.0):
        self.cam = cam
        self.smin, self.smax, self.power = smin, smax, power
        self.x_scale, self.y_scale = x_scale, y_scale

    def __call__(self, u: float, v: float) -> tuple[float, float]:
        u0, v0 = self.cam.principal_point
        r = max(abs(u - u0) / (self.cam.width / 2), abs(v - v0) / (self.cam.height_px / 2))
        s = self.smin + (self.smax - self.smin) * min(r, 1.0) ** self.power
        return s * self.x_scale, s * self.y_scale


@dataclass(frozen=True)
class Detection:
    pixel: tuple[float, float]
    world: np.ndarray


ErrorSurface = Callable[[float, float], tuple[float, float]]


def camera_detections(targets, cam: CameraModel, error_surface: ErrorSurface,
                      rng: np.random.Generator, target_height: float = 0.0,
                      return_sources: bool = False):
    """Detect in-view targets with probability ``cam.p_detect`` and perturb
    their world position by pixel-dependent Gaussian noise. Output is shuffled."""
    dets, src = [], []
    for k, tgt in enumerate(targets):
        px = project_to_pixels(tgt, cam, target_height)
        if px is None:
            continue
        if rng.random() >= cam.p_detect:
            continue
        sx, sy = error_surface(*px)
        noise = rng.normal(0.0, 1.0, size=2) * (sx, sy)
        dets.append(Detection(px, np.asarray(tgt, dtype=float)[:2] + noise))
        src.append(k)
    perm = rng.permutation(len(dets))
    dets = [dets[i] for i in perm]
    src = [src[i] for i in perm]
    return (dets, src) if return_sources else dets
