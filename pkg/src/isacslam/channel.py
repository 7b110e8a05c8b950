"""Narrowband mmWave channel, ULA steering vectors, codebooks and SE."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def steering_vector(angle: float, n: int) -> np.ndarray:
    """Unit-norm half-wavelength ULA response; entry k is exp(-i pi k cos(angle)) / sqrt(n)."""
    if n < 1:
        raise ValueError(f"antenna count must be >= 1, got {n}")
    k = np.arange(n)
    return np.exp(-1j * np.pi * k * math.cos(angle)) / math.sqrt(n)


def steering_matrix(angles, n: int) -> np.ndarray:
    """Columns are steering vectors for ``angles``; shape (n, len(angles))."""
    if n < 1:
        raise ValueError(f"antenna count must be >= 1, got {n}")
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    k = np.arange(n)[:, None]
    return np.exp(-1j * np.pi * k * np.cos(angles)[None, :]) / math.sqrt(n)


def synth_channel(paths, n_ue: int, n_bs: int) -> np.ndarray:
    """H = sum_l g_l a_UE(aoa_l) a_BS(aod_l)^H.

    ``paths`` holds objects with ``aoa``, ``aod`` and ``gain`` attributes, or
    (aoa, aod, gain) tuples.
    """
    H = np.zeros((n_ue, n_bs), dtype=complex)
    for p in paths:
        if isinstance(p, tuple):
            aoa, aod, g = p
        else:
            aoa, aod, g = p.aoa, p.aod, p.gain
        if not np.isfinite(g):
            raise ValueError("path gain must be finite")
        H += g * np.outer(steering_vector(aoa, n_ue), steering_vector(aod, n_bs).conj())
    return H


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray  # (n, M), one beam per column
    angles: np.ndarray
    resolution: float
    offset: float = 0.0

    def __len__(self):
        return self.vectors.shape[1]


def angle_codebook(angles, n: int, resolution: float, offset: float = 0.0) -> Codebook:
    angles = np.asarray(angles, dtype=float)
    return Codebook(steering_matrix(angles, n), angles, resolution, offset)


def sweep_codebook(m: int, n: int) -> Codebook:
    """M beams at (k/M) pi, k = 1..M."""
    if m < 1:
        raise ValueError(f"beam count must be >= 1, got {m}")
    res = math.pi / m
    return angle_codebook(np.arange(1, m + 1) * res, n, res)


class EvalCounter:
    """Counts beam-gain evaluations (one per beam pair measured)."""

    def __init__(self):
        self.count = 0

    def add(self, k: int):
        self.count += int(k)


def beam_gain(w, H, f) -> float:
    w = np.asarray(w)
    f = np.asarray(f)
    H = np.asarray(H)
    if H.ndim != 2 or w.shape != (H.shape[0],) or f.shape != (H.shape[1],):
        raise ValueError(f"dimension mismatch: w{w.shape}, H{H.shape}, f{f.shape}")
    return float(abs(w.conj() @ H @ f) ** 2)


def gain_table(W, H, F, counter: EvalCounter | None = None) -> np.ndarray:
    """|w_a^H H f_b|^2 for every combiner column a of W and beam column b of F."""
    if W.shape[0] != H.shape[0] or F.shape[0] != H.shape[1]:
        raise ValueError(f"dimension mismatch: W{W.shape}, H{H.shape}, F{F.shape}")
    if counter is not None:
        counter.add(W.shape[1] * F.shape[1])
    return np.abs(W.conj().T @ H @ F) ** 2


def sum_se(channels: Sequence[np.ndarray], pairs: Sequence[tuple[np.ndarray, np.ndarray] | None],
           sigma2: float) -> float:
    """Sum over UEs of log2(1 + SINR).

    ``pairs[j]`` is UE j's (beamformer f, combiner w); None leaves the UE out
    (it neither receives nor transmits).
    """
    return float(np.sum(per_ue_se(channels, pairs, sigma2)))


def per_ue_se(channels, pairs, sigma2: float) -> np.ndarray:
    if not sigma2 > 0:
        raise ValueError(f"noise power must be positive, got {sigma2}")
    active = [j for j, p in enumerate(pairs) if p is not None]
    out = np.zeros(len(channels))
    if not active:
        return out
    F = np.stack([pairs[j][0] for j in active], axis=1)
    for j in active:
        w = pairs[j][1]
        row = np.abs(w.conj() @ channels[j] @ F) ** 2
        k = active.index(j)
        sig = row[k]
        interf = row.sum() - sig
        out[j] = math.log2(1.0 + sig / (interf + sigma2))
    return out
