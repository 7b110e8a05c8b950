"""Map-aided beam management.

Each UE gets a list of candidate paths (angle priors, a search range and a
predicted gain) from the global map. One path per UE is selected, steering
conflicts at the BS are resolved greedily, and narrow tracking codebooks
are centred on the chosen priors. All strategies spend the same M x M
beam-pair measurements per UE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .channel import (EvalCounter, gain_table, per_ue_se, steering_matrix, steering_vector,
                      sweep_codebook, synth_channel)
from .geometry import coincident, predicted_angles, predicted_gain, ue_image

S_MIN = math.pi / 64


def fold_angle(a: float) -> float:
    """Map an azimuth to [0, pi]; a ULA cannot tell a from -a."""
    return abs(math.remainder(a, 2.0 * math.pi))


@dataclass(frozen=True)
class PathPrior:
    aoa: float
    aod: float
    search_range: float
    gain: float
    anchor: int = 0  # 0 = PA, i + 1 = global feature i

    def __post_init__(self):
        if not 0 < self.search_range <= math.pi:
            raise ValueError(f"search range must be in (0, pi], got {self.search_range}")


@dataclass
class BeamSelection:
    """Chosen prior per UE (None when the UE has no priors), the steering
    pairs (beamformer, combiner) and the predicted sum SE."""

    choice: list[int | None]
    pairs: list[tuple[np.ndarray, np.ndarray] | None]
    predicted_se: float
    skipped: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class TrackingCodebook:
    bs_angles: np.ndarray
    ue_angles: np.ndarray
    bs_beams: np.ndarray  # (n_bs, M)
    ue_beams: np.ndarray  # (n_ue, M)
    m_tra: int
    refinement: int


@dataclass(frozen=True)
class BeamConfig:
    n_beams: int = 8
    n_bs: int = 16
    n_ue: int = 16
    sigma2: float = 1.0
    theta_th: float | None = None  # defaults to one sweeping beamwidth

    @property
    def conflict_threshold(self) -> float:
        return math.pi / self.n_beams if self.theta_th is None else self.theta_th


# -- priors ------------------------------------------------------------------

def search_range(ue, ue_cov, anchor, anchor_cov, pa, sigma_angle: float) -> float:
    """Twice the larger of 3 sigma_angle and the angular half-width of the
    combined 3-sigma position uncertainty seen along the path, clamped."""
    ue = np.asarray(ue, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    P = np.asarray(ue_cov, dtype=float) + np.asarray(anchor_cov, dtype=float)
    d = ue - anchor
    dist = float(np.linalg.norm(d))
    half = 3.0 * sigma_angle
    if dist > 1e-9:
        perps = [np.array([-d[1], d[0]]) / dist]
        if not coincident(anchor, pa, 1e-8):
            img = ue_image(ue, anchor, pa) - np.asarray(pa, dtype=float)
            n = np.linalg.norm(img)
            if n > 1e-9:
                perps.append(np.array([-img[1], img[0]]) / n)
        sd = max(math.sqrt(max(float(p @ P @ p), 0.0)) for p in perps)
        half = max(half, math.atan2(3.0 * sd, dist))
    return min(max(2.0 * half, S_MIN), math.pi)


def gen_priors(features, ue_mean, ue_cov, j: int, pa, r_cut: float, sigma_angle: float,
               eps: float = 4.0, kappa_los: float = 1.0, kappa_nlos: float = 1.0,
               los_visible: bool = True) -> list[PathPrior]:
    """Candidate paths for UE ``j`` from a global map's features.

    ``features`` are global features (mean, var, visibility); those seen by
    UE j above ``r_cut`` qualify. Sorted by predicted gain, ties by anchor.
    """
    ue_mean = np.asarray(ue_mean, dtype=float)
    if not np.all(np.isfinite(ue_mean)):
        raise ValueError("UE estimate must be finite")
    pa = np.asarray(pa, dtype=float)
    out = []
    if los_visible:
        aoa, aod = predicted_angles(ue_mean, pa, pa)
        s = search_range(ue_mean, ue_cov, pa, np.zeros((2, 2)), pa, sigma_angle)
        out.append(PathPrior(aoa, aod, s, predicted_gain(ue_mean, pa, pa, eps, kappa_los, kappa_nlos), 0))
    for i, f in enumerate(features):
        if not f.visibility[j] > r_cut:
            continue
        va = np.asarray(f.mean, dtype=float)
        if coincident(va, pa, 1e-8) or coincident(va, ue_mean, 1e-8):
            continue
        aoa, aod = predicted_angles(ue_mean, va, pa)
        s = search_range(ue_mean, ue_cov, va, np.diag(f.var), pa, sigma_angle)
        g = predicted_gain(ue_mean, va, pa, eps, kappa_los, kappa_nlos)
        out.append(PathPrior(aoa, aod, s, g, i + 1))
    out.sort(key=lambda p: (-p.gain, p.anchor))
    return out


def estimate_channel(priors: Sequence[PathPrior], n_ue: int, n_bs: int) -> np.ndarray:
    return synth_channel([(p.aoa, p.aod, p.gain) for p in priors], n_ue, n_bs)


# -- selection ---------------------------------------------------------------

def resolution_beams(n_beams: int, s: float) -> int:
    """Beam count M_j = ceil(M pi / S) giving resolution matched to S."""
    return math.ceil(n_beams * math.pi / s - 1e-9)


def quantize(angle: float, n_grid: int) -> float:
    """Fold ``angle`` and snap it up to the grid k pi / n_grid."""
    step = math.pi / n_grid
    k = max(math.ceil(fold_angle(angle) / step - 1e-9), 0)
    return k * step


def steer_pair(prior: PathPrior, n_beams: int, n_bs: int, n_ue: int):
    mj = resolution_beams(n_beams, prior.search_range)
    f = steering_vector(quantize(prior.aod, mj), n_bs)
    w = steering_vector(quantize(prior.aoa, mj), n_ue)
    return f, w


def _predicted(est_channels, pairs, sigma2) -> float:
    return float(np.sum(per_ue_se(est_channels, pairs, sigma2)))


def select_initial(priors: Sequence[Sequence[PathPrior]], cfg: BeamConfig) -> BeamSelection:
    """Strongest prior per UE; UEs without priors are skipped."""
    choice = [0 if p else None for p in priors]
    return _selection(priors, choice, cfg)


def _selection(priors, choice, cfg: BeamConfig) -> BeamSelection:
    est = [estimate_channel(p, cfg.n_ue, cfg.n_bs) for p in priors]
    pairs = [None if c is None else steer_pair(priors[j][c], cfg.n_beams, cfg.n_bs, cfg.n_ue)
             for j, c in enumerate(choice)]
    skipped = [j for j, c in enumerate(choice) if c is None]
    return BeamSelection(list(choice), pairs, _predicted(est, pairs, cfg.sigma2), skipped)


def conflict_angle(choice, priors, j: int) -> float:
    """Smallest folded-AoD gap between UE j's chosen prior and any other UE's."""
    if choice[j] is None:
        return math.inf
    a = fold_angle(priors[j][choice[j]].aod)
    gaps = [abs(a - fold_angle(priors[i][c].aod)) for i, c in enumerate(choice)
            if i != j and c is not None]
    return min(gaps, default=math.inf)


def iui_refine(selection: BeamSelection, priors: Sequence[Sequence[PathPrior]],
               cfg: BeamConfig) -> BeamSelection:
    """One pass over UEs in index order: a UE whose departure direction is
    within the conflict threshold of another's tries its next prior, which
    is kept only if the predicted sum SE rises."""
    best = replace(selection, choice=list(selection.choice))
    th = cfg.conflict_threshold
    for j in range(len(priors)):
        c = best.choice[j]
        if c is None or c + 1 >= len(priors[j]):
            continue
        if conflict_angle(best.choice, priors, j) >= th:
            continue
        trial_choice = list(best.choice)
        trial_choice[j] = c + 1
        trial = _selection(priors, trial_choice, cfg)
        if trial.predicted_se > best.predicted_se:
            best = trial
    return best


# -- tracking ----------------------------------------------------------------

def refinement_level(s: float, max_level: int = 16) -> int:
    """m minimising |S - pi / 2^m| over m >= 0 (smallest m on ties)."""
    return min(range(max_level + 1), key=lambda m: (abs(s - math.pi / 2 ** m), m))


def tracking_angles(center_angle: float, n_beams: int, m_tra: int) -> np.ndarray:
    c = math.ceil(m_tra * fold_angle(center_angle) / math.pi - 1e-9)
    lo = -(n_beams // 2) + 1
    idx = np.arange(lo, lo + n_beams) + c
    return idx * math.pi / m_tra


def build_tracking_codebook(prior: PathPrior, cfg: BeamConfig) -> TrackingCodebook:
    m = refinement_level(prior.search_range)
    m_tra = 2 ** m * cfg.n_beams
    bs = tracking_angles(prior.aod, cfg.n_beams, m_tra)
    ue = tracking_angles(prior.aoa, cfg.n_beams, m_tra)
    return TrackingCodebook(bs, ue, steering_matrix(bs, cfg.n_bs), steering_matrix(ue, cfg.n_ue), m_tra, m)


def build_tracking_codebooks(selection: BeamSelection, priors, cfg: BeamConfig) -> list[TrackingCodebook | None]:
    return [None if c is None else build_tracking_codebook(priors[j][c], cfg)
            for j, c in enumerate(selection.choice)]


def _best_pair(W, H, F, counter: EvalCounter | None):
    g = gain_table(W, H, F, counter)
    a, b = np.unravel_index(int(np.argmax(g)), g.shape)
    return (F[:, b], W[:, a]), float(g[a, b])


def track_and_choose(H, book: TrackingCodebook, counter: EvalCounter | None = None):
    """Measure every tracking beam pair against the true channel; return
    ((beamformer, combiner), gain) of the best."""
    return _best_pair(book.ue_beams, H, book.bs_beams, counter)


def baseline_sweep(H, cfg: BeamConfig, counter: EvalCounter | None = None):
    """Best pair of the full M x M sweep codebooks."""
    F = sweep_codebook(cfg.n_beams, cfg.n_bs).vectors
    W = sweep_codebook(cfg.n_beams, cfg.n_ue).vectors
    return _best_pair(W, H, F, counter)


# -- strategies --------------------------------------------------------------

STRATEGIES = ("management", "tracking", "sweeping")


@dataclass
class StrategyResult:
    pairs: list[tuple[np.ndarray, np.ndarray] | None]
    se: float
    evaluations: list[int]


def _track_all(selection, priors, channels, cfg: BeamConfig) -> tuple[list, list[int]]:
    books = build_tracking_codebooks(selection, priors, cfg)
    pairs, evals = [], []
    for H, book in zip(channels, books):
        counter = EvalCounter()
        if book is None:
            pair = baseline_sweep(H, cfg, counter)[0]
        else:
            pair = track_and_choose(H, book, counter)[0]
        pairs.append(pair)
        evals.append(counter.count)
    return pairs, evals


def baseline_tracking(priors, channels, cfg: BeamConfig) -> StrategyResult:
    """Strongest prior per UE and tracking codebooks, no conflict handling."""
    pairs, evals = _track_all(select_initial(priors, cfg), priors, channels, cfg)
    return StrategyResult(pairs, float(np.sum(per_ue_se(channels, pairs, cfg.sigma2))), evals)


def beam_management(priors, channels, cfg: BeamConfig) -> StrategyResult:
    sel = iui_refine(select_initial(priors, cfg), priors, cfg)
    pairs, evals = _track_all(sel, priors, channels, cfg)
    return StrategyResult(pairs, float(np.sum(per_ue_se(channels, pairs, cfg.sigma2))), evals)


def sweeping(channels, cfg: BeamConfig) -> StrategyResult:
    pairs, evals = [], []
    for H in channels:
        counter = EvalCounter()
        pairs.append(baseline_sweep(H, cfg, counter)[0])
        evals.append(counter.count)
    return StrategyResult(pairs, float(np.sum(per_ue_se(channels, pairs, cfg.sigma2))), evals)


def run_strategy(name: str, priors, channels, cfg: BeamConfig) -> StrategyResult:
    if name == "management":
        return beam_management(priors, channels, cfg)
    if name == "tracking":
        return baseline_tracking(priors, channels, cfg)
    if name == "sweeping":
        return sweeping(channels, cfg)
    raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
