"""BS-side global radio map: pooling, inverse-variance fusion, the two-stage
construction (initialisation and refinement) and confidence/age pruning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ContractError
from .local_slam import LocalFeature


Contribution = tuple[np.ndarray, np.ndarray]  # (mean, per-axis variances)
PRIOR = -1  # contribution key for information of unknown origin


@dataclass
class GlobalFeature:
    """A fused anchor estimate.

    ``contributions`` keeps the latest independent estimate from each UE;
    ``mean``/``var`` are their Gaussian product. A fresh upload from UE j
    replaces its slot instead of being multiplied in again.
    """

    mean: np.ndarray
    var: np.ndarray  # per-axis variances
    visibility: np.ndarray
    confidence: float
    timestamp: int
    contributions: dict[int, Contribution] = field(default_factory=dict)

    def copy(self) -> "GlobalFeature":
        return GlobalFeature(self.mean.copy(), self.var.copy(), self.visibility.copy(),
                             self.confidence, self.timestamp, dict(self.contributions))

    def sources(self) -> dict[int, Contribution]:
        return self.contributions or {PRIOR: (self.mean, self.var)}


@dataclass
class GlobalRadioMap:
    n_ues: int
    features: list[GlobalFeature] = field(default_factory=list)
    time: int = 0

    def positions(self) -> np.ndarray:
        return np.array([f.mean for f in self.features], dtype=float).reshape(-1, 2)

    def copy(self) -> "GlobalRadioMap":
        return GlobalRadioMap(self.n_ues, [f.copy() for f in self.features], self.time)

    def __len__(self):
        return len(self.features)


def fuse_gaussians(m1, v1, m2, v2):
    """Per-axis inverse-variance fusion of N(m1, v1) and N(m2, v2)."""
    m1, v1, m2, v2 = (np.asarray(a, dtype=float) for a in (m1, v1, m2, v2))
    mean = (v2 * m1 + v1 * m2) / (v1 + v2)
    var = 1.0 / (1.0 / v1 + 1.0 / v2)
    return mean, var


def build_pool(uploads: Sequence[Sequence[LocalFeature]], r_cut: float) -> list[tuple[int, LocalFeature]]:
    return [(j, p) for j, feats in enumerate(uploads) for p in feats if p.confidence >= r_cut]


def fuse_all(contribs: Iterable[Contribution]) -> Contribution:
    """Gaussian product of several per-axis Gaussians."""
    it = iter(contribs)
    mean, var = next(it)
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    for m, v in it:
        mean, var = fuse_gaussians(mean, var, m, v)
    return mean, var


def local_estimate(p: LocalFeature) -> Contribution | None:
    """The UE's own estimate carried by an upload. Legacy entries without a
    payload carry none (the UE has not observed the feature itself)."""
    if p.payload is not None:
        return np.asarray(p.payload[0], dtype=float), np.asarray(p.payload[1], dtype=float)
    if p.legacy:
        return None
    return np.asarray(p.mean, dtype=float), np.asarray(p.var, dtype=float)


def fuse_feature(cand: GlobalFeature, p: LocalFeature, j: int, t: int) -> GlobalFeature:
    """Fold UE j's upload into a global feature, replacing its previous contribution."""
    est = local_estimate(p)
    vis = cand.visibility.copy()
    vis[j] = p.confidence
    contribs = dict(cand.sources())
    if est is not None:
        if np.any(cand.var <= 0) or np.any(est[1] <= 0):
            raise ValueError("variances must be positive")
        contribs[j] = (est[0].copy(), est[1].copy())
    mean, var = fuse_all(contribs.values())
    return GlobalFeature(mean, var, vis, float(vis.max()), t, contribs)


def feature_from_local(p: LocalFeature, j: int, n_ues: int, t: int) -> GlobalFeature:
    est = local_estimate(p)
    mean, var = est if est is not None else (np.asarray(p.mean, dtype=float), np.asarray(p.var, dtype=float))
    vis = np.zeros(n_ues)
    vis[j] = p.confidence
    return GlobalFeature(mean.copy(), var.copy(), vis, float(vis.max()), t, {j: (mean.copy(), var.copy())})


def prune(q: GlobalRadioMap, t: int, r_cut: float) -> GlobalRadioMap:
    """Keep features with 2^(t_i - t) * r_i > r_cut."""
    kept = [f for f in q.features if 2.0 ** (f.timestamp - t) * f.confidence > r_cut]
    return GlobalRadioMap(q.n_ues, kept, t)


def merge_close(q: GlobalRadioMap, d_th: float, gate: float | None = None) -> GlobalRadioMap:
    """Fuse any feature lying within ``d_th`` of an earlier one, or whose
    squared Mahalanobis distance to it (summed variances) is at most ``gate``.
    Visibility and timestamps take the element-wise maximum; earlier features
    keep their slot."""
    kept: list[GlobalFeature] = []
    for f in q.features:
        i, d = _nearest(kept, f.mean)
        if d > d_th and gate is not None and kept:
            m2 = [float(np.sum((g.mean - f.mean) ** 2 / (g.var + f.var))) for g in kept]
            i = int(np.argmin(m2))
            d = 0.0 if m2[i] <= gate else d
        if d <= d_th:
            kept[i] = _merge_pair(kept[i], f)
        else:
            kept.append(f.copy())
    return GlobalRadioMap(q.n_ues, kept, q.time)


def _merge_pair(g: GlobalFeature, f: GlobalFeature) -> GlobalFeature:
    """Union of contributions; a UE present in both keeps its tighter estimate."""
    contribs = dict(g.sources())
    for j, (m, v) in f.sources().items():
        if j not in contribs or (j != PRIOR and np.sum(v) < np.sum(contribs[j][1])):
            contribs[j] = (m, v)
        elif j == PRIOR:
            contribs[j] = fuse_gaussians(*contribs[j], m, v)
    mean, var = fuse_all(contribs.values())
    vis = np.maximum(g.visibility, f.visibility)
    return GlobalFeature(mean, var, vis, float(vis.max()), max(g.timestamp, f.timestamp), contribs)


def _nearest(feats: Sequence[GlobalFeature], x) -> tuple[int, float]:
    if not feats:
        return -1, np.inf
    d = np.linalg.norm(np.array([f.mean for f in feats]) - x, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def _associate_into(feats: list[GlobalFeature], pool: Iterable[tuple[int, LocalFeature]],
                    d_th: float, n_ues: int, t: int):
    """Nearest-neighbour association; unmatched pool entries become new features."""
    for j, p in pool:
        i, d = _nearest(feats, p.mean)
        if d <= d_th:
            feats[i] = fuse_feature(feats[i], p, j, t)
        else:
            feats.append(feature_from_local(p, j, n_ues, t))


def init_stage_update(q: GlobalRadioMap, pool: Sequence[tuple[int, LocalFeature]], d_th: float,
                      r_cut: float, t: int) -> GlobalRadioMap:
    """Initialisation stage. Pool features are matched against the previous
    map and against features created earlier in the same pass."""
    feats = [f.copy() for f in q.features]
    _associate_into(feats, pool, d_th, q.n_ues, t)
    return prune(GlobalRadioMap(q.n_ues, feats, t), t, r_cut)


def split_pools(uploads: Sequence[Sequence[LocalFeature]], n_global: int, r_cut: float,
                r_new_cut: float):
    """Legacy pool (index-aligned with the downloaded map, confidences at or
    below ``r_cut`` zeroed) and new pool (confidence >= ``r_new_cut``)."""
    legacy, new = [], []
    for j, feats in enumerate(uploads):
        row: list[LocalFeature | None] = [None] * n_global
        for p in feats:
            if p.legacy:
                if p.global_index is None or not 0 <= p.global_index < n_global:
                    raise ContractError(f"UE {j}: legacy feature index {p.global_index} outside map of {n_global}")
                r = p.confidence if p.confidence > r_cut else 0.0
                row[p.global_index] = LocalFeature(p.mean, p.cov, r, True, p.global_index, p.payload)
            elif p.confidence >= r_new_cut:
                new.append((j, p))
        if any(r is None for r in row):
            raise ContractError(f"UE {j}: legacy upload does not cover all {n_global} global features")
        legacy.append(row)
    return legacy, new


def refine_stage_update(q: GlobalRadioMap, legacy_pool: Sequence[Sequence[LocalFeature]],
                        new_pool: Sequence[tuple[int, LocalFeature]], d_th: float, r_cut: float,
                        t: int) -> GlobalRadioMap:
    """Refinement stage: update legacy features UE by UE, then fold new features in."""
    for j, row in enumerate(legacy_pool):
        if len(row) != len(q.features):
            raise ContractError(f"UE {j}: legacy pool has {len(row)} entries, map has {len(q.features)}")
    legacy = []
    for i, g in enumerate(q.features):
        g = g.copy()
        touched = False
        for j, row in enumerate(legacy_pool):
            p = row[i]
            g.visibility[j] = p.confidence
            if p.confidence > 0:
                g = fuse_feature(g, p, j, t)
                touched = True
        g.confidence = float(g.visibility.max())
        if touched:
            g.timestamp = t
        legacy.append(g)
    fresh: list[GlobalFeature] = []
    for j, p in new_pool:
        i, d = _nearest(legacy + fresh, p.mean)
        if d <= d_th:
            if i < len(legacy):
                legacy[i] = fuse_feature(legacy[i], p, j, t)
            else:
                fresh[i - len(legacy)] = fuse_feature(fresh[i - len(legacy)], p, j, t)
        else:
            fresh.append(feature_from_local(p, j, q.n_ues, t))
    return prune(GlobalRadioMap(q.n_ues, legacy + fresh, t), t, r_cut)


# -- upload records ----------------------------------------------------------

def upload_records(features: Sequence[LocalFeature]) -> list[dict]:
    return [{"position": [float(x) for x in f.mean], "variance": [float(x) for x in f.var],
             "confidence": float(f.confidence), "legacy": bool(f.legacy),
             "global_index": f.global_index,
             "payload": None if f.payload is None else
             [[float(x) for x in f.payload[0]], [float(x) for x in f.payload[1]]]}
            for f in features]


def features_from_records(records: Sequence[dict]) -> list[LocalFeature]:
    return [LocalFeature(np.array(r["position"], dtype=float), np.diag(r["variance"]),
                         float(r["confidence"]), bool(r["legacy"]), r.get("global_index"),
                         None if r.get("payload") is None else
                         (np.array(r["payload"][0], dtype=float), np.array(r["payload"][1], dtype=float)))
            for r in records]


def dump_uploads(uploads: Sequence[Sequence[LocalFeature]]) -> str:
    return json.dumps([upload_records(u) for u in uploads])


def load_uploads(text: str) -> list[list[LocalFeature]]:
    return [features_from_records(u) for u in json.loads(text)]
