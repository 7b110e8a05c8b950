"""Simulation loop, Monte Carlo batching and result files.

Random streams: every run seed feeds ``numpy.random.SeedSequence(seed,
spawn_key=(stream, ue))`` with one fixed ``stream`` id per subsystem (see
``STREAM_*``), so adding a consumer never shifts anyone else's draws.

Result CSV columns, in order: ``t, ospa, e_ue_mean, e_ue_1..e_ue_J``, one
``se_<strategy>`` per evaluated strategy, then the diagnostics
``ospa_shared`` (when shared anchors are configured), ``va_err_1..va_err_L``,
``e_ue_slam_mean``, ``e_ue_imu_mean``, ``e_ue_vision_mean`` (camera
scenarios) and ``n_runs``. Aggregate rows hold per-step means over the runs
that reached that step; vision errors ignore steps without a detection.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import global_map as gm
from .beam_mgmt import BeamConfig, gen_priors, run_strategy
from .channel import synth_channel
from .config import CameraConfig, ScenarioConfig, canonical_strategy
from .geometry import visible_paths
from .local_slam import LocalSlam, SlamParams, import_global, init_local
from .metrics import ospa
from .sensors import CameraModel, RadialErrorSurface, camera_detections, imu_noise_var, measure_angles
from .vision_fusion import ErrorTable, multimodal_step, train_error_table

STREAM_MOTION = 0
STREAM_INIT = 1
STREAM_ANGLES = 2
STREAM_IMU = 3
STREAM_SLAM = 4
STREAM_CAMERA = 5
STREAM_TRAINING = 6


def stream(seed: int, kind: int, ue: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(kind, ue)))


# -- motion ------------------------------------------------------------------

class RandomWalk:
    """Uniform heading, uniform step length per step; mirror reflection at the area edges."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        m = cfg.ues.motion
        self.lo = np.array([m.area[0][0], m.area[1][0]])
        self.hi = np.array([m.area[0][1], m.area[1][1]])
        self.step = m.step_range
        self.rng = rng
        self.start = rng.uniform(self.lo, self.hi, size=(cfg.ues.count, 2))

    def n_steps(self, cfg: ScenarioConfig) -> int:
        return cfg.n_steps

    def move(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        ang = self.rng.uniform(0.0, 2.0 * math.pi, size=n)
        length = self.rng.uniform(self.step[0], self.step[1], size=n)
        d = length[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        nx = x + d
        over = (nx < self.lo) | (nx > self.hi)
        d[over] = -d[over]
        return d


class LaneTraffic:
    """Vehicles at constant speed along fixed lanes parallel to y.

    UE j uses lane ``j mod n_lanes``; the first half of the lanes drive
    towards +y, the rest towards -y. The run ends when the first vehicle
    reaches the end of the road.
    """

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        m = cfg.ues.motion
        n = cfg.ues.count
        self.dt = cfg.ues.dt
        lanes = np.array(m.lanes)
        idx = np.arange(n) % len(lanes)
        self.heading = np.where(idx < (len(lanes) + 1) // 2, 1.0, -1.0)
        speed = rng.uniform(m.speed_kmh[0], m.speed_kmh[1], size=n) / 3.6
        jitter = rng.uniform(0.0, m.start_jitter, size=n)
        y0 = np.where(self.heading > 0, m.road[0] + jitter, m.road[1] - jitter)
        self.start = np.column_stack([lanes[idx], y0])
        self.velocity = np.column_stack([np.zeros(n), self.heading * speed])
        remaining = (m.road[1] - m.road[0]) - jitter
        self.crossing = float(np.min(remaining / speed))

    def n_steps(self, cfg: ScenarioConfig) -> int:
        return max(1, min(cfg.n_steps, int(math.floor(self.crossing / self.dt + 1e-9))))

    def move(self, x: np.ndarray) -> np.ndarray:
        return self.velocity * self.dt


def make_motion(cfg: ScenarioConfig, rng):
    return RandomWalk(cfg, rng) if cfg.ues.motion.model == "random_walk" else LaneTraffic(cfg, rng)


# -- camera ------------------------------------------------------------------

def camera_model(c: CameraConfig) -> CameraModel:
    return CameraModel(tuple(c.position), c.height, c.yaw, c.pitch, c.focal, c.width, c.height_px,
                       p_detect=c.p_detect)


def error_surface(c: CameraConfig, cam: CameraModel) -> RadialErrorSurface:
    return RadialErrorSurface(cam, c.error_min, c.error_max, c.error_power)


def training_samples(cfg: ScenarioConfig, n_trajectories: int, seed: int):
    """(pixel, estimate, truth) triples from simulated single-vehicle passes."""
    c = cfg.camera
    cam = dataclasses.replace(camera_model(c), p_detect=1.0)
    surf = error_surface(c, cam)
    rng = stream(seed, STREAM_TRAINING)
    one = dataclasses.replace(cfg, ues=dataclasses.replace(cfg.ues, count=1))
    samples = []
    for _ in range(n_trajectories):
        lane_cfg = dataclasses.replace(one.ues.motion, lanes=(float(rng.choice(cfg.ues.motion.lanes)),))
        run_cfg = dataclasses.replace(one, ues=dataclasses.replace(one.ues, motion=lane_cfg))
        motion = LaneTraffic(run_cfg, rng)
        x = motion.start.copy()
        if rng.random() < 0.5:  # either direction on every lane
            m = lane_cfg
            x[0, 1] = m.road[0] + m.road[1] - x[0, 1]
            motion.velocity = -motion.velocity
        for _ in range(motion.n_steps(run_cfg)):
            x = x + motion.move(x)
            dets, src = camera_detections([x[0]], cam, surf, rng, return_sources=True)
            for d in dets:
                samples.append((d.pixel, d.world, x[0].copy()))
    return samples


@functools.lru_cache(maxsize=8)
def _trained_table(camera: CameraConfig, ues) -> ErrorTable:
    cfg = _TRAINING_CFG[(camera, ues)]
    samples = training_samples(cfg, camera.train_trajectories, camera.train_seed)
    return train_error_table(samples, camera.u_cell, camera.v_cell, camera.width, camera.height_px)


_TRAINING_CFG: dict = {}


def vision_table(cfg: ScenarioConfig) -> ErrorTable:
    c = cfg.camera
    if c.table is not None:
        p = Path(c.table)
        if not p.is_absolute() and cfg.base_dir is not None:
            p = Path(cfg.base_dir) / p
        return ErrorTable.load(p)
    _TRAINING_CFG[(c, cfg.ues)] = cfg
    return _trained_table(c, cfg.ues)


# -- single run --------------------------------------------------------------

@dataclass
class RunResult:
    scenario: str
    seed: int
    mode: str
    t: np.ndarray
    ospa: np.ndarray
    e_ue: np.ndarray  # (K, J)
    se: dict[str, np.ndarray] = field(default_factory=dict)
    ospa_shared: np.ndarray | None = None
    va_err: np.ndarray | None = None  # (K, L)
    e_ue_slam: np.ndarray | None = None
    e_ue_imu: np.ndarray | None = None
    e_ue_vision: np.ndarray | None = None  # NaN where the UE was not detected
    beam_evaluations: dict[str, list[int]] = field(default_factory=dict)
    wall_clock: float = 0.0

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"t": self.t, "ospa": self.ospa, "e_ue_mean": self.e_ue.mean(axis=1)}
        for j in range(self.e_ue.shape[1]):
            cols[f"e_ue_{j + 1}"] = self.e_ue[:, j]
        for name, s in self.se.items():
            cols[f"se_{name}"] = s
        if self.ospa_shared is not None:
            cols["ospa_shared"] = self.ospa_shared
        if self.va_err is not None:
            for l in range(self.va_err.shape[1]):
                cols[f"va_err_{l + 1}"] = self.va_err[:, l]
        if self.e_ue_slam is not None:
            cols["e_ue_slam_mean"] = self.e_ue_slam.mean(axis=1)
        if self.e_ue_imu is not None:
            cols["e_ue_imu_mean"] = self.e_ue_imu.mean(axis=1)
        if self.e_ue_vision is not None:
            v = self.e_ue_vision
            with np.errstate(invalid="ignore"):
                cnt = np.sum(~np.isnan(v), axis=1)
                cols["e_ue_vision_mean"] = np.where(cnt > 0, np.nansum(v, axis=1) / np.maximum(cnt, 1), np.nan)
        return cols


def slam_params(cfg: ScenarioConfig) -> SlamParams:
    a = cfg.algorithm
    return SlamParams(n_particles=a.n_particles, sigma_angle=cfg.sensors.sigma_angle,
                      sigma_imu=cfg.sensors.sigma_imu, dt=cfg.ues.dt, gate_chi2=a.gate_chi2,
                      r_inc=a.r_inc, r_decay=a.r_decay, r_birth=a.r_birth, r_drop=a.r_drop,
                      birth_hits=a.birth_hits, birth_window=a.birth_window,
                      download_var_scale=a.download_var_scale, link_gate=a.link_gate)


def _map_errors(est: np.ndarray, truth_all: np.ndarray, visible: Sequence[int], cutoff: float,
                shared: Sequence[int]):
    """OSPA against visible VAs, optional OSPA restricted to shared VAs, per-VA error."""
    full = ospa(est, truth_all[list(visible)], cutoff)
    shared_val = None
    if shared:
        keep = [l - 1 for l in shared]
        sel = est
        if len(est):
            near = np.argmin(np.linalg.norm(est[:, None, :] - truth_all[None, :, :], axis=2), axis=1)
            sel = est[np.isin(near, keep)]
        shared_val = ospa(sel, truth_all[keep], cutoff)
    if len(est):
        d = np.linalg.norm(est[:, None, :] - truth_all[None, :, :], axis=2).min(axis=0)
        va = np.minimum(d, cutoff)
    else:
        va = np.full(len(truth_all), cutoff)
    return full, shared_val, va


def run_once(cfg: ScenarioConfig, seed: int) -> RunResult:
    """One simulated run; fully determined by (cfg, seed)."""
    t0 = time.perf_counter()
    J = cfg.ues.count
    dt = cfg.ues.dt
    mode = cfg.run.mode
    anchors = cfg.anchors()
    truth_vas = anchors.va_array
    fovs = cfg.fov_schedules()
    params = slam_params(cfg)
    a = cfg.algorithm
    cutoff = cfg.metrics.ospa_cutoff
    strategies = [s for s in dict.fromkeys(canonical_strategy(s) for s in cfg.beam.strategies) if s != "none"]
    if mode == "single":
        strategies = []
    beam_cfg = BeamConfig(cfg.beam.n_beams, cfg.beam.n_bs, cfg.beam.n_ue, cfg.beam.sigma2, cfg.beam.theta_th)

    motion = make_motion(cfg, stream(seed, STREAM_MOTION))
    K = motion.n_steps(cfg)
    x = motion.start.copy()
    init_rng = stream(seed, STREAM_INIT)
    sig_ini = cfg.ues.initial_error / math.sqrt(math.pi / 2.0)
    x0_est = x + init_rng.normal(0.0, sig_ini, size=x.shape) if sig_ini > 0 else x.copy()
    slams = []
    for j in range(J):
        rng_j = stream(seed, STREAM_SLAM, j)
        post = init_local(x0_est[j], max(sig_ini, 1e-6), a.n_particles, rng_j, initial_error=np.zeros(2))
        slams.append(LocalSlam(anchors.pa, params, post, rng_j))
    angle_rngs = [stream(seed, STREAM_ANGLES, j) for j in range(J)]
    imu_rngs = [stream(seed, STREAM_IMU, j) for j in range(J)]
    q_imu = imu_noise_var(cfg.sensors.sigma_imu, dt)

    camera = cfg.camera
    if camera is not None:
        cam = camera_model(camera)
        surf = error_surface(camera, cam)
        table = vision_table(cfg)
        cam_rng = stream(seed, STREAM_CAMERA)
    imu_only = x0_est.copy()
    reported = x0_est.copy()

    q = gm.GlobalRadioMap(J)
    L = len(truth_vas)
    out_t = np.arange(1, K + 1) * dt
    out_ospa = np.zeros(K)
    out_shared = np.zeros(K) if cfg.metrics.shared_anchors else None
    out_va = np.zeros((K, L))
    e_rep = np.zeros((K, J))
    e_slam = np.zeros((K, J))
    e_imu = np.zeros((K, J))
    e_vis = np.full((K, J), np.nan) if camera is not None else None
    se = {s: np.zeros(K) for s in strategies}
    evals: dict[str, set[int]] = {s: set() for s in strategies}

    for k in range(K):
        t = (k + 1) * dt
        d = motion.move(x)
        x = x + d
        cooperative_refine = mode == "cooperative" and t > a.t_config + 1e-9
        disp = np.empty_like(d)
        for j in range(J):
            noise = imu_rngs[j].normal(0.0, math.sqrt(q_imu), size=2) if q_imu > 0 else np.zeros(2)
            disp[j] = d[j] + noise
            s = slams[j]
            s.predict(disp[j])
            if cooperative_refine:
                s.import_global(import_global(q, j, a.r_cut), a.d_dup)
            z = measure_angles(visible_paths(x[j], anchors, fovs[j], t), cfg.sensors.sigma_angle,
                               angle_rngs[j], cfg.sensors.clutter_rate)
            s.update(z)
        imu_only = imu_only + disp

        if mode != "single":
            ups = [s.upload() for s in slams]
            if cooperative_refine:
                legacy, new = gm.split_pools(ups, len(q), a.r_cut, a.r_new_cut)
                q = gm.refine_stage_update(q, legacy, new, a.d_th, a.r_cut, k + 1)
            else:
                q = gm.init_stage_update(q, gm.build_pool(ups, a.r_cut), a.d_th, a.r_cut, k + 1)
            q = gm.merge_close(q, a.d_merge, a.merge_gate)
            est_map = q.positions()
        else:
            s = slams[cfg.metrics.map_ue - 1]
            est_map = np.array([f.mean for f in s.features if f.confidence >= a.r_cut]).reshape(-1, 2)

        slam_est = [(s.post.mean, np.clip(np.diag(s.post.cov), 1e-12, None)) for s in slams]
        if camera is not None:
            dets, src = camera_detections(list(x), cam, surf, cam_rng, return_sources=True)
            for det, j in zip(dets, src):
                e_vis[k, j] = float(np.linalg.norm(det.world - x[j]))
            fused = multimodal_step(slam_est, list(reported + disp), dets, table, a.d_th_assoc,
                                    a.exclusive_vision)
            reported = np.array([f.position for f in fused])
        else:
            reported = np.array([m for m, _ in slam_est])

        visible = sorted({l - 1 for j in range(J) for l in fovs[j].visible_set(t) if l >= 1})
        if mode == "single":
            ue_vis = fovs[cfg.metrics.map_ue - 1].visible_set(t)
            visible = [l - 1 for l in ue_vis if l >= 1]
        full, shared_val, va = _map_errors(est_map, truth_vas, visible, cutoff, cfg.metrics.shared_anchors)
        if mode == "single":
            va = _single_mode_va_errors(slams, fovs, t, truth_vas, cutoff, cfg.metrics.map_ue - 1, a.r_cut, va)
        out_ospa[k] = full
        if out_shared is not None:
            out_shared[k] = shared_val
        out_va[k] = va
        e_rep[k] = np.linalg.norm(reported - x, axis=1)
        e_slam[k] = np.linalg.norm(np.array([m for m, _ in slam_est]) - x, axis=1)
        e_imu[k] = np.linalg.norm(imu_only - x, axis=1)

        if strategies:
            channels = [synth_channel([p for _, p in visible_paths(x[j], anchors, fovs[j], t,
                                                                   cfg.site.kappa_los, cfg.site.kappa_nlos)],
                                      cfg.beam.n_ue, cfg.beam.n_bs) for j in range(J)]
            priors = [gen_priors(q.features, reported[j], slams[j].post.cov, j, anchors.pa, a.r_cut,
                                 cfg.sensors.sigma_angle, cfg.site.eps, cfg.site.kappa_los,
                                 cfg.site.kappa_nlos, los_visible=fovs[j].visible(0, t))
                      for j in range(J)]
            for name in strategies:
                res = run_strategy(name, priors, channels, beam_cfg)
                se[name][k] = res.se
                evals[name].update(res.evaluations)

    return RunResult(cfg.name, seed, mode, out_t, out_ospa, e_rep, se, out_shared, out_va,
                     e_slam, e_imu, e_vis, {s: sorted(v) for s, v in evals.items()},
                     time.perf_counter() - t0)


def _single_mode_va_errors(slams, fovs, t, truth_vas, cutoff, map_j, r_cut, default):
    """Each VA scored on the map of ``map_j`` when that UE sees it, else on
    the first UE that does (a VA nobody sees keeps the default score)."""
    out = default.copy()
    for l in range(len(truth_vas)):
        owners = [map_j] + [j for j in range(len(slams)) if j != map_j]
        for j in owners:
            if fovs[j].visible(l + 1, t):
                est = np.array([f.mean for f in slams[j].features if f.confidence >= r_cut]).reshape(-1, 2)
                out[l] = min(float(np.linalg.norm(est - truth_vas[l], axis=1).min()), cutoff) if len(est) else cutoff
                break
    return out


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class MonteCarloResult:
    runs: list[RunResult]
    mean: dict[str, np.ndarray]


def _run_task(args):
    cfg, seed = args
    return run_once(cfg, seed)


def aggregate(runs: Sequence[RunResult]) -> dict[str, np.ndarray]:
    """Per-step means over the runs reaching that step (NaN-aware)."""
    cols = [r.columns() for r in runs]
    K = max(len(c["t"]) for c in cols)
    names = list(cols[0].keys())
    longest = max(cols, key=lambda c: len(c["t"]))
    out = {"t": longest["t"].copy()}
    for name in names[1:]:
        stack = np.full((len(cols), K), np.nan)
        for i, c in enumerate(cols):
            stack[i, :len(c[name])] = c[name]
        with np.errstate(invalid="ignore"):
            cnt = np.sum(~np.isnan(stack), axis=0)
            out[name] = np.where(cnt > 0, np.nansum(stack, axis=0) / np.maximum(cnt, 1), np.nan)
    out["n_runs"] = np.array([sum(len(c["t"]) > k for c in cols) for k in range(K)], dtype=float)
    return out


def run_monte_carlo(cfg: ScenarioConfig, n_runs: int | None = None, base_seed: int | None = None,
                    parallel: int = 1) -> MonteCarloResult:
    n = cfg.run.runs if n_runs is None else n_runs
    base = cfg.run.seed if base_seed is None else base_seed
    if n < 1:
        raise ValueError("n_runs must be at least 1")
    tasks = [(cfg, base + k) for k in range(n)]
    if parallel > 1:
        if cfg.camera is not None:
            vision_table(cfg)  # train once before forking workers
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            runs = list(ex.map(_run_task, tasks))
    else:
        runs = [_run_task(t) for t in tasks]
    runs.sort(key=lambda r: r.seed)
    return MonteCarloResult(runs, aggregate(runs))


# -- output ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def columns_to_csv(cols: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(cols)
    w.writerow(names)
    for k in range(len(cols["t"])):
        w.writerow([_fmt(cols[n][k]) for n in names])
    return buf.getvalue()


def columns_to_jsonl(cols: dict[str, np.ndarray]) -> str:
    names = list(cols)
    lines = []
    for k in range(len(cols["t"])):
        lines.append(json.dumps({n: (None if math.isnan(float(cols[n][k])) else float(cols[n][k]))
                                 for n in names}))
    return "\n".join(lines) + "\n"


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty result file")
    names = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return {n: data[:, i] for i, n in enumerate(names)}


def write_results(result: MonteCarloResult, out_path, fmt: str = "csv", per_run: bool = False) -> list[Path]:
    """Write the aggregate file (and optionally one file per run); returns the paths written."""
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}; expected csv or jsonl")
    render = columns_to_csv if fmt == "csv" else columns_to_jsonl
    out_path = Path(out_path)
    written = []
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(render(result.mean), encoding="utf-8")
        written.append(out_path)
        if per_run:
            for r in result.runs:
                p = out_path.with_name(f"{out_path.stem}_seed{r.seed}{out_path.suffix}")
                p.write_text(render(r.columns()), encoding="utf-8")
                written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write results to {out_path}: {exc}") from exc
    return written
