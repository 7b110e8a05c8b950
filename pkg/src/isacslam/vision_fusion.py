"""Camera-aided localization: a pixel-indexed vision error table and the
per-step fusion of SLAM and camera position estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import ContractError
from .sensors import Detection

TABLE_FORMAT = "isacslam-error-table"
TABLE_VERSION = 1


class TrainingError(ValueError):
    """Raised when an error table cannot be trained."""


@dataclass(frozen=True)
class ErrorTable:
    """Per-block vision error std (metres) on a ``u_cell`` x ``v_cell`` pixel grid.

    ``ex``/``ey`` and ``counts`` have shape (n_u, n_v); block (a, b) in
    1-based ceiling indexing lives at ``[a - 1, b - 1]``. ``counts`` keeps the
    raw sample counts, so zero marks a block whose value was filled in from
    its nearest trained neighbour.
    """

    width: int
    height: int
    u_cell: int
    v_cell: int
    ex: np.ndarray
    ey: np.ndarray
    counts: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return grid_shape(self.width, self.height, self.u_cell, self.v_cell)

    @property
    def empty_blocks(self) -> np.ndarray:
        return self.counts == 0

    def block_of(self, u: float, v: float) -> tuple[int, int]:
        """1-based (a, b) block containing pixel (u, v)."""
        if not (0 <= u <= self.width and 0 <= v <= self.height):
            raise ValueError(f"pixel ({u}, {v}) outside {self.width}x{self.height} image")
        n_u, n_v = self.shape
        a = min(max(math.ceil(u / self.u_cell), 1), n_u)
        b = min(max(math.ceil(v / self.v_cell), 1), n_v)
        return a, b

    def lookup_std(self, u: float, v: float) -> tuple[float, float]:
        a, b = self.block_of(u, v)
        return float(self.ex[a - 1, b - 1]), float(self.ey[a - 1, b - 1])

    def lookup_variance(self, u: float, v: float) -> tuple[float, float]:
        sx, sy = self.lookup_std(u, v)
        return sx * sx, sy * sy

    def to_text(self) -> str:
        lines = [f"{TABLE_FORMAT} {TABLE_VERSION}",
                 f"{self.width} {self.height} {self.u_cell} {self.v_cell}"]
        n_u, n_v = self.shape
        for a in range(n_u):
            for b in range(n_v):
                lines.append(f"{float(self.ex[a, b])!r} {float(self.ey[a, b])!r} {int(self.counts[a, b])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ErrorTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ContractError("empty error-table file")
        head = lines[0].split()
        if len(head) != 2 or head[0] != TABLE_FORMAT:
            raise ContractError(f"not an error-table file (header {lines[0]!r})")
        if int(head[1]) != TABLE_VERSION:
            raise ContractError(f"unsupported error-table version {head[1]}")
        width, height, u_cell, v_cell = (int(x) for x in lines[1].split())
        n_u, n_v = grid_shape(width, height, u_cell, v_cell)
        rows = lines[2:]
        if len(rows) != n_u * n_v:
            raise ContractError(f"error table has {len(rows)} blocks, expected {n_u * n_v}")
        data = np.array([[float(x) for x in r.split()] for r in rows])
        if data.shape[1] != 3:
            raise ContractError("each block line needs e_x, e_y and a count")
        return cls(width, height, u_cell, v_cell, data[:, 0].reshape(n_u, n_v),
                   data[:, 1].reshape(n_u, n_v), data[:, 2].astype(int).reshape(n_u, n_v))

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ErrorTable":
        with open(path, encoding="ascii") as fh:
            return cls.from_text(fh.read())


def grid_shape(width: int, height: int, u_cell: int, v_cell: int) -> tuple[int, int]:
    if u_cell <= 0 or v_cell <= 0:
        raise ValueError("block sizes must be positive")
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    return math.ceil(width / u_cell), math.ceil(height / v_cell)


def _fill_nearest(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    _, (ia, ib) = distance_transform_edt(~known, return_indices=True)
    return values[ia, ib]


def train_error_table(samples: Sequence[tuple[tuple[float, float], Sequence[float], Sequence[float]]],
                      u_cell: int = 40, v_cell: int = 40, width: int = 800,
                      height: int = 600) -> ErrorTable:
    """Per-block RMS of per-axis vision error.

    ``samples`` holds (pixel, estimated position, true position) triples.
    Blocks without samples take the value of the nearest trained block.
    """
    n_u, n_v = grid_shape(width, height, u_cell, v_cell)
    if not len(samples):
        raise TrainingError("no training samples")
    sx = np.zeros((n_u, n_v))
    sy = np.zeros((n_u, n_v))
    cnt = np.zeros((n_u, n_v), dtype=int)
    proto = ErrorTable(width, height, u_cell, v_cell, sx, sy, cnt)
    for (u, v), est, true in samples:
        a, b = proto.block_of(u, v)
        dx, dy = est[0] - true[0], est[1] - true[1]
        sx[a - 1, b - 1] += dx * dx
        sy[a - 1, b - 1] += dy * dy
        cnt[a - 1, b - 1] += 1
    known = cnt > 0
    ex = np.zeros((n_u, n_v))
    ey = np.zeros((n_u, n_v))
    ex[known] = np.sqrt(sx[known] / cnt[known])
    ey[known] = np.sqrt(sy[known] / cnt[known])
    if not known.all():
        ex, ey = _fill_nearest(ex, known), _fill_nearest(ey, known)
    return ErrorTable(width, height, u_cell, v_cell, ex, ey, cnt)


def lookup_variance(table: ErrorTable, u: float, v: float) -> tuple[float, float]:
    return table.lookup_variance(u, v)


@dataclass(frozen=True)
class FusedLocation:
    position: np.ndarray
    fused: bool

    @property
    def source(self) -> str:
        return "fused" if self.fused else "slam-only"


def associate_ue_object(slam_mean, imu_prediction, detections: Sequence[Detection],
                        d_th_assoc: float = 1.5) -> int | None:
    """Index of the detection nearest the SLAM estimate, if both the SLAM
    and the IMU-predicted positions are within ``d_th_assoc`` of it."""
    if not detections:
        return None
    pos = np.array([d.world for d in detections], dtype=float).reshape(-1, 2)
    d_slam = np.linalg.norm(pos - np.asarray(slam_mean, dtype=float), axis=1)
    i = int(np.argmin(d_slam))
    d_imu = float(np.linalg.norm(pos[i] - np.asarray(imu_prediction, dtype=float)))
    return i if max(d_slam[i], d_imu) < d_th_assoc else None


def fuse_location(slam_mean, slam_var, vis_mean, vis_var) -> FusedLocation:
    """Per-axis inverse-variance weighting of a SLAM and a camera estimate."""
    x_s, v_s = np.asarray(slam_mean, dtype=float), np.asarray(slam_var, dtype=float)
    x_v, v_v = np.asarray(vis_mean, dtype=float), np.asarray(vis_var, dtype=float)
    if np.any(v_s <= 0) or np.any(v_v <= 0):
        raise ValueError("variances must be positive")
    pos = (v_s * x_v + v_v * x_s) / (v_s + v_v)
    return FusedLocation(pos, True)


def multimodal_step(slam_estimates: Sequence[tuple[np.ndarray, np.ndarray]],
                    imu_predictions: Sequence[np.ndarray], detections: Sequence[Detection],
                    table: ErrorTable, d_th_assoc: float = 1.5,
                    exclusive: bool = False) -> list[FusedLocation]:
    """Fuse each UE's SLAM estimate with its associated detection, UEs in index order.

    ``slam_estimates`` holds (mean, per-axis variance) pairs. With
    ``exclusive`` a detection claimed by one UE is unavailable to later ones.
    """
    out = []
    taken: set[int] = set()
    for (mean, var), imu in zip(slam_estimates, imu_predictions):
        pool = [k for k in range(len(detections)) if not (exclusive and k in taken)]
        i = associate_ue_object(mean, imu, [detections[k] for k in pool], d_th_assoc)
        if i is None:
            out.append(FusedLocation(np.asarray(mean, dtype=float).copy(), False))
            continue
        k = pool[i]
        taken.add(k)
        det = detections[k]
        vvar = np.maximum(table.lookup_variance(*det.pixel), 1e-12)
        out.append(fuse_location(mean, np.maximum(var, 1e-12), det.world, vvar))
    return out


@dataclass(frozen=True)
class TableValidation:
    mean_deviation: float
    blocks: int
    per_block: np.ndarray


def _block_rms(table: ErrorTable, samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_u, n_v = table.shape
    sx = np.zeros((n_u, n_v))
    sy = np.zeros((n_u, n_v))
    cnt = np.zeros((n_u, n_v), dtype=int)
    for (u, v), est, true in samples:
        a, b = table.block_of(u, v)
        sx[a - 1, b - 1] += (est[0] - true[0]) ** 2
        sy[a - 1, b - 1] += (est[1] - true[1]) ** 2
        cnt[a - 1, b - 1] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(sx / cnt), np.sqrt(sy / cnt), cnt


def validate_error_table(table: ErrorTable, held_out, min_count: int = 5) -> TableValidation:
    """Compare table std against the empirical RMS error of held-out samples.

    Only blocks holding at least ``min_count`` held-out samples are scored;
    a block's deviation is the mean absolute per-axis difference.
    """
    rx, ry, cnt = _block_rms(table, held_out)
    scored = cnt >= min_count
    if not scored.any():
        raise TrainingError(f"no block has {min_count} held-out samples")
    dev = 0.5 * (np.abs(table.ex - rx) + np.abs(table.ey - ry))
    return TableValidation(float(dev[scored].mean()), int(scored.sum()), np.where(scored, dev, np.nan))
