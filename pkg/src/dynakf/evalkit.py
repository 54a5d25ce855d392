"""Pose integration, segment drift, open-loop prediction and the gain probe."""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.stats import spearmanr

from .diffmath import RngStream, no_tape

DEFAULT_SEGMENTS = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)
POSE_COLUMNS = ("x", "y", "z", "roll", "pitch", "yaw")
DRIFT_COLUMNS = ("episode", "t_rel", "r_rel", "segments")


# --- SE(3) with XYZ-intrinsic Euler angles ----------------------------------


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """R = Rx(roll) @ Ry(pitch) @ Rz(yaw) for angles (..., 3)."""
    a = np.asarray(angles, dtype=float)
    cr, sr = np.cos(a[..., 0]), np.sin(a[..., 0])
    cp, sp = np.cos(a[..., 1]), np.sin(a[..., 1])
    cy, sy = np.cos(a[..., 2]), np.sin(a[..., 2])
    R = np.empty(a.shape[:-1] + (3, 3))
    R[..., 0, 0] = cp * cy
    R[..., 0, 1] = -cp * sy
    R[..., 0, 2] = sp
    R[..., 1, 0] = cr * sy + sr * sp * cy
    R[..., 1, 1] = cr * cy - sr * sp * sy
    R[..., 1, 2] = -sr * cp
    R[..., 2, 0] = sr * sy - cr * sp * cy
    R[..., 2, 1] = sr * cy + cr * sp * sy
    R[..., 2, 2] = cr * cp
    return R


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(R[..., 0, 2], -1.0, 1.0))
    roll = np.arctan2(-R[..., 1, 2], R[..., 2, 2])
    yaw = np.arctan2(-R[..., 0, 1], R[..., 0, 0])
    return np.stack([roll, pitch, yaw], axis=-1)


def pose_to_matrix(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    T = np.zeros(pose.shape[:-1] + (4, 4))
    T[..., :3, :3] = euler_to_matrix(pose[..., 3:6])
    T[..., :3, 3] = pose[..., :3]
    T[..., 3, 3] = 1.0
    return T


def matrix_to_pose(T: np.ndarray) -> np.ndarray:
    return np.concatenate([T[..., :3, 3], matrix_to_euler(T[..., :3, :3])], axis=-1)


def integrate_poses(relative) -> np.ndarray:
    """Left-compose per-step relative poses (T, 6) into an absolute trajectory (T + 1, 6).

    Pose 0 is the origin.  Euler angles are unwrapped along time so a
    heading that keeps turning accumulates instead of jumping at +-pi.
    """
    rel = np.asarray(relative, dtype=float)
    if rel.ndim != 2 or rel.shape[1] != 6:
        raise ValueError(f"relative poses must be (T, 6), got {rel.shape}")
    if not np.isfinite(rel).all():
        bad = int(np.flatnonzero(~np.isfinite(rel).all(axis=1))[0])
        raise ValueError(f"relative pose {bad} is not finite")
    steps = pose_to_matrix(rel)
    mats = np.empty((len(rel) + 1, 4, 4))
    mats[0] = np.eye(4)
    for k in range(len(rel)):
        mats[k + 1] = mats[k] @ steps[k]
    out = matrix_to_pose(mats)
    out[:, 3:] = np.unwrap(out[:, 3:], axis=0)
    return out


def relative_poses(trajectory) -> np.ndarray:
    """Inverse of :func:`integrate_poses`: per-step transforms between consecutive poses."""
    mats = pose_to_matrix(np.asarray(trajectory, dtype=float))
    rel = np.linalg.inv(mats[:-1]) @ mats[1:]
    return matrix_to_pose(rel)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of rotation matrices; exactly 0 for an exact identity."""
    v = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    return np.arctan2(np.linalg.norm(v, axis=-1), tr - 1.0)


# --- drift metric -----------------------------------------------------------


@dataclass
class DriftMetrics:
    t_rel: float
    r_rel: float
    per_length: dict[float, tuple[float, float, int]] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.per_length

    def to_dict(self) -> dict:
        return {
            "t_rel": None if self.empty else self.t_rel,
            "r_rel": None if self.empty else self.r_rel,
            "empty": self.empty,
            "per_length": [{"length": L, "t_rel": t, "r_rel": r, "segments": n} for L, (t, r, n) in self.per_length.items()],
        }


def drift_metrics(gt, est, lengths: Sequence[float] = DEFAULT_SEGMENTS, tol: float = 1e-9) -> DriftMetrics:
    """Segment drift over every start frame.

    The segment of length L from frame i ends at the first frame whose
    ground-truth arc length from i reaches L.  Translation error is the
    endpoint displacement / L in percent; rotation error is the geodesic
    angle of the relative-rotation mismatch in degrees per 100 m.  Each
    length reports the RMSE over its segments; the headline numbers
    average over lengths that had segments.
    """
    gt, est = np.asarray(gt, dtype=float), np.asarray(est, dtype=float)
    if gt.shape != est.shape:
        raise ValueError(f"trajectory shapes differ: {gt.shape} vs {est.shape}")
    steps = np.linalg.norm(np.diff(gt[:, :3], axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    Mg, Me = pose_to_matrix(gt), pose_to_matrix(est)
    per = {}
    for L in lengths:
        starts, ends = [], []
        for i in range(len(gt)):
            # first j > i with dist[j] - dist[i] >= L
            j = i + 1
            while j < len(gt) and dist[j] - dist[i] < L - tol:
                j += 1
            if j < len(gt):
                starts.append(i)
                ends.append(j)
        if not starts:
            continue
        s, e = np.array(starts), np.array(ends)
        dg = np.linalg.inv(Mg[s]) @ Mg[e]
        de = np.linalg.inv(Me[s]) @ Me[e]
        t_err = np.linalg.norm(dg[:, :3, 3] - de[:, :3, 3], axis=1) / L * 100.0
        rot = np.swapaxes(de[:, :3, :3], -1, -2) @ dg[:, :3, :3]
        r_err = np.degrees(rotation_angle(rot)) / L * 100.0
        per[L] = (float(np.sqrt(np.mean(t_err**2))), float(np.sqrt(np.mean(r_err**2))), len(s))
    if not per:
        return DriftMetrics(float("nan"), float("nan"), {})
    return DriftMetrics(float(np.mean([v[0] for v in per.values()])), float(np.mean([v[1] for v in per.values()])), per)


def localisation_error(gt, est, distances: Sequence[float]) -> dict[float, float]:
    """Endpoint position error at the first frame whose travelled distance reaches each value."""
    gt, est = np.asarray(gt, dtype=float), np.asarray(est, dtype=float)
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt[:, :3], axis=0), axis=1))])
    out = {}
    for d in distances:
        idx = np.flatnonzero(dist >= d - 1e-9)
        if len(idx):
            j = int(idx[0])
            out[d] = float(np.linalg.norm(gt[j, :3] - est[j, :3]))
    return out


# --- open-loop prediction -----------------------------------------------------


class Forecaster(Protocol):
    def forecast(self, episode, init: int, horizon: int) -> np.ndarray:
        """Relative poses (horizon, 6) predicted after filtering ``init`` steps."""


def episode_seed(base: int, episode) -> int:
    """Content-derived stream key, so results do not depend on episode order."""
    return zlib.crc32(np.ascontiguousarray(episode.observations).tobytes(), base & 0xFFFFFFFF)


@dataclass
class FilterForecaster:
    """Open-loop forecasts from any model exposing ``run`` plus the filter protocol."""

    model: object
    seed: int = 0

    def forecast(self, episode, init: int, horizon: int) -> np.ndarray:
        from .kalman import open_loop

        rng = RngStream(self.seed, (episode_seed(self.seed, episode),))
        ctrl = None if episode.controls is None else episode.controls[None, :init]
        with no_tape():
            res = self.model.run(episode.observations[None, :init], rng, controls=ctrl)
            fut = None
            if episode.controls is not None:
                fut = [episode.controls[None, init - 1 + k] for k in range(horizon)]
            priors, _, _ = open_loop(self.model, res.final, horizon, res.state, rng, fut, start=init)
            return np.concatenate([self.model.predict_pose(p.z).value for p in priors], axis=0)


@dataclass
class PredictionReport:
    rmse: dict[int, float]
    per_episode: dict[int, list[float]]
    best: int
    worst: int
    forecasts: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse": {str(h): v for h, v in self.rmse.items()},
            "per_episode": {str(h): v for h, v in self.per_episode.items()},
            "best": self.best,
            "worst": self.worst,
        }


def prediction_protocol(forecaster: Forecaster, episodes: Sequence, init: int = 5,
                        horizons: Iterable[int] = (5, 10)) -> PredictionReport:
    """Translation RMSE of open-loop relative-pose forecasts per horizon.

    The headline RMSE per horizon is sqrt of the mean per-episode MSE;
    sums use exact rounding so reordering episodes changes nothing.
    """
    horizons = sorted(set(int(h) for h in horizons))
    H = horizons[-1]
    if not episodes:
        raise ValueError("prediction_protocol needs at least one episode")
    for i, ep in enumerate(episodes):
        if len(ep) < init + H:
            raise ValueError(f"episode {i} has {len(ep)} steps, need init + horizon = {init + H}")
    mse = {h: [] for h in horizons}
    forecasts = {}
    for i, ep in enumerate(episodes):
        pred = np.asarray(forecaster.forecast(ep, init, H), dtype=float)
        forecasts[i] = pred
        truth = ep.poses[init : init + H]
        sq = np.sum((pred[:, :3] - truth[:, :3]) ** 2, axis=1)
        for h in horizons:
            mse[h].append(math.fsum(sq[:h]) / h)
    rmse = {h: math.sqrt(math.fsum(v) / len(v)) for h, v in mse.items()}
    per = {h: [math.sqrt(x) for x in v] for h, v in mse.items()}
    errs = per[H]
    return PredictionReport(rmse, per, int(np.argmin(errs)), int(np.argmax(errs)), forecasts)


# --- Kalman-gain probe --------------------------------------------------------


@dataclass
class GainProbeReport:
    levels: list[float]
    mean_K_frob: list[float]
    mean_R: list[float]
    mean_Q: list[float]
    mean_abs_r: list[float]
    counts: list[int]
    correlations: dict[str, float | None]

    def rows(self) -> list[tuple]:
        return list(zip(self.levels, self.mean_K_frob, self.mean_R, self.mean_Q, self.mean_abs_r))

    def to_dict(self) -> dict:
        return {"rows": [dict(zip(PROBE_COLUMNS, r)) for r in self.rows()], "counts": self.counts,
                "correlations": self.correlations}


PROBE_COLUMNS = ("level", "mean_K_frob", "mean_R", "mean_Q", "mean_abs_r")


def _spearman(x, y) -> float | None:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(spearmanr(x, y).statistic)


def observation_noise(innovation, prior) -> np.ndarray:
    """diag(R) (B, m) recovered as diag(S) - diag(H P H^T) for either layout."""
    S = innovation.S.value
    S_diag = S if S.ndim == 2 else np.diagonal(S, axis1=1, axis2=2)
    return S_diag - prior.diag_P()[:, list(innovation.emission.rows)]


def gain_probe(model, episodes: Sequence, seed: int = 0) -> GainProbeReport:
    """Per-corruption-level means of ||K||_F, diag R, diag Q and |r|.

    Every episode must carry ``corruption`` levels.  The first step is
    skipped: its update runs against the lifted first observation, so its
    gain reflects initialisation rather than the learned noise.
    """
    buckets: dict[float, list[list[float]]] = {}
    for ep in episodes:
        if ep.corruption is None:
            raise ValueError("gain_probe needs corrupted episodes")
        rng = RngStream(seed, (episode_seed(seed, ep),))
        ctrl = None if ep.controls is None else ep.controls[None]
        with no_tape():
            res = model.run(ep.observations[None], rng, controls=ctrl)
        for s in res.steps[1:]:
            inn = s.innovation
            if inn is None:
                continue
            lv = float(ep.corruption[s.t])
            b = buckets.setdefault(lv, [[], [], [], []])
            b[0].append(float(inn.k_frobenius[0]))
            b[1].append(float(np.mean(observation_noise(inn, s.prior)[0])))
            b[2].append(float(np.mean(s.transition.Q.value[0])))
            b[3].append(float(np.mean(np.abs(inn.r.value[0]))))
    levels = sorted(buckets)
    cols = [[math.fsum(buckets[lv][k]) / len(buckets[lv][k]) for lv in levels] for k in range(4)]
    corr = {name: _spearman(levels, col) for name, col in zip(PROBE_COLUMNS[1:], cols)}
    return GainProbeReport(levels, cols[0], cols[1], cols[2], cols[3], [len(buckets[lv][0]) for lv in levels], corr)


# --- writers ----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_trajectory(path, traj) -> None:
    traj = np.asarray(traj, dtype=float)
    write_csv(path, ("t", *POSE_COLUMNS), ([t, *map(float, row)] for t, row in enumerate(traj)))
