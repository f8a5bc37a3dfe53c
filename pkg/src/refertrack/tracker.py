"""Kalman-filter tracking-by-detection in the world frame.

State vector: ``[x, y, z, theta, w, l, h, vx, vy, vz]`` with constant
velocity dynamics, one frame per step. Measurements observe the first
seven components.
"""

from __future__ import annotations

import enum
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, RigidPose, bev_distance, box_ego_to_world, wrap_angle
from .ingest import Detection3D, ParseError, _read_text

log = logging.getLogger(__name__)

STATE_DIM = 10
MEAS_DIM = 7
_GATED = 1e6
_SINGULAR_RCOND = 1e-12
_MIN_DIM = 1e-3


class TrackError(RuntimeError):
    pass


class Status(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass
class NoiseConfig:
    sigma_pos: float = 1.0
    sigma_vel: float = 1.0
    sigma_yaw: float = 0.1
    sigma_dim: float = 0.05
    sigma_meas: float = 0.5
    sigma_meas_yaw: float = 0.1
    sigma_meas_dim: float = 0.1
    sigma_vel_init: float = 10.0


@dataclass
class TrackerConfig:
    gates: dict[str, float] = field(default_factory=lambda: {"car": 2.0, "pedestrian": 1.0})
    default_gate: float = 2.0
    conf_high: float = 0.5
    n_hit: int = 2
    n_miss: int = 3
    assignment: str = "hungarian"  # or "greedy"
    # Offline fixed-interval (RTS) smoothing of finished trajectories.
    smooth: bool = False
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    class_noise: dict[str, NoiseConfig] = field(default_factory=dict)

    def gate_for(self, label: str) -> float:
        return self.gates.get(label.lower(), self.default_gate)

    def noise_for(self, label: str) -> NoiseConfig:
        return self.class_noise.get(label.lower(), self.noise)

    def validate(self) -> None:
        if self.assignment not in ("hungarian", "greedy"):
            raise ValueError(f"unknown assignment method {self.assignment!r}")
        if self.n_hit < 1 or self.n_miss < 0:
            raise ValueError("n_hit must be >= 1 and n_miss >= 0")


class KalmanModel:
    """Constant-velocity transition and measurement matrices for one noise setting."""

    def __init__(self, noise: NoiseConfig):
        self.F = np.eye(STATE_DIM)
        self.F[0, 7] = self.F[1, 8] = self.F[2, 9] = 1.0
        self.Q = np.diag(
            [noise.sigma_pos**2] * 3
            + [noise.sigma_yaw**2]
            + [noise.sigma_dim**2] * 3
            + [noise.sigma_vel**2] * 3
        )
        self.H = np.zeros((MEAS_DIM, STATE_DIM))
        self.H[:, :MEAS_DIM] = np.eye(MEAS_DIM)
        self.R = np.diag(
            [noise.sigma_meas**2] * 3 + [noise.sigma_meas_yaw**2] + [noise.sigma_meas_dim**2] * 3
        )
        self.P0 = np.zeros((STATE_DIM, STATE_DIM))
        self.P0[:MEAS_DIM, :MEAS_DIM] = self.R
        self.P0[7:, 7:] = np.eye(3) * noise.sigma_vel_init**2


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def box(self) -> Box3D:
        m = self.mean
        dims = tuple(max(float(v), _MIN_DIM) for v in m[4:7])
        return Box3D(tuple(m[0:3]), dims, float(m[3]))


@dataclass
class TrackEntry:
    frame: int
    box: Box3D
    confidence: float
    observed: bool
    attributes: Mapping[str, str] = field(default_factory=dict)


@dataclass
class Track:
    id: int
    class_label: str
    state: KalmanState
    hits: int = 1
    time_since_update: int = 0
    status: Status = Status.TENTATIVE
    confidence: float = 0.0
    history: list[TrackEntry] = field(default_factory=list)
    ever_confirmed: bool = False
    # Per history entry: filtered state and the one-step prior it was updated from.
    filtered: list[KalmanState] = field(default_factory=list, repr=False)
    priors: list[KalmanState | None] = field(default_factory=list, repr=False)

    @property
    def t_init(self) -> int:
        return self.history[0].frame

    def trajectory(self) -> list[TrackEntry]:
        """History without the trailing coasted states after the last observation."""
        last = max((i for i, e in enumerate(self.history) if e.observed), default=-1)
        return self.history[: last + 1]


def measurement(box: Box3D) -> np.ndarray:
    return np.array([*box.center, box.heading, *box.dims], dtype=float)


def predict(track: Track, model: KalmanModel) -> Track:
    if track.status is Status.DEAD:
        raise TrackError(f"cannot predict dead track {track.id}")
    s = track.state
    mean = model.F @ s.mean
    mean[3] = wrap_angle(mean[3])
    cov = model.F @ s.covariance @ model.F.T + model.Q
    track.state = KalmanState(mean, 0.5 * (cov + cov.T))
    track.time_since_update += 1
    return track


def kalman_update(state: KalmanState, z: np.ndarray, model: KalmanModel) -> KalmanState:
    x, P, H = state.mean, state.covariance, model.H
    y = z - H @ x
    y[3] = wrap_angle(y[3])
    S = H @ P @ H.T + model.R
    if np.linalg.cond(S) * _SINGULAR_RCOND > 1.0:
        raise TrackError("innovation covariance is numerically singular; check noise config")
    K = np.linalg.solve(S, H @ P).T
    mean = x + K @ y
    mean[3] = wrap_angle(mean[3])
    I_KH = np.eye(STATE_DIM) - K @ H
    cov = I_KH @ P @ I_KH.T + K @ model.R @ K.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def update(track: Track, detection: Detection3D, model: KalmanModel) -> Track:
    track.state = kalman_update(track.state, measurement(detection.box), model)
    track.confidence = (track.confidence * track.hits + detection.confidence) / (track.hits + 1)
    track.hits += 1
    track.time_since_update = 0
    return track


def _solve(cost: np.ndarray, method: str) -> list[tuple[int, int]]:
    if cost.size == 0:
        return []
    if method == "greedy":
        pairs = []
        used_r, used_c = set(), set()
        order = np.argsort(cost, axis=None, kind="stable")
        for flat in order:
            r, c = np.unravel_index(flat, cost.shape)
            if r in used_r or c in used_c:
                continue
            pairs.append((int(r), int(c)))
            used_r.add(r)
            used_c.add(c)
        return pairs
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def _match_stage(tracks, detections, config, det_idx, trk_idx):
    cost = np.full((len(trk_idx), len(det_idx)), _GATED)
    gates = np.zeros(len(trk_idx))
    for a, ti in enumerate(trk_idx):
        trk = tracks[ti]
        gates[a] = config.gate_for(trk.class_label)
        tbox = trk.state.box()
        for b, di in enumerate(det_idx):
            det = detections[di]
            if det.class_label.lower() != trk.class_label.lower():
                continue
            d = bev_distance(tbox, det.box)
            if d <= gates[a]:
                cost[a, b] = d
    pairs = []
    for a, b in _solve(cost, config.assignment):
        if cost[a, b] <= gates[a]:
            pairs.append((trk_idx[a], det_idx[b]))
    return pairs


def associate(
    tracks: Sequence[Track], detections: Sequence[Detection3D], config: TrackerConfig
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Two-stage gated minimum-cost association.

    Stage 1 pairs confident detections with confirmed tracks; stage 2 pairs
    everything left over. Returns ``(pairs, unmatched_tracks,
    unmatched_detections)`` as index lists into the inputs.
    """
    high = [i for i, d in enumerate(detections) if d.confidence >= config.conf_high]
    confirmed = [i for i, t in enumerate(tracks) if t.status is Status.CONFIRMED]
    pairs = _match_stage(tracks, detections, config, high, confirmed)

    used_t = {t for t, _ in pairs}
    used_d = {d for _, d in pairs}
    rest_d = [i for i in range(len(detections)) if i not in used_d]
    rest_t = [i for i in range(len(tracks)) if i not in used_t]
    pairs += _match_stage(tracks, detections, config, rest_d, rest_t)

    used_t = {t for t, _ in pairs}
    used_d = {d for _, d in pairs}
    return (
        sorted(pairs),
        [i for i in range(len(tracks)) if i not in used_t],
        [i for i in range(len(detections)) if i not in used_d],
    )


class Tracker:
    """Stateful per-sequence tracker; feed frames in increasing order."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.config.validate()
        self.active: list[Track] = []
        self.finished: list[Track] = []
        self._models: dict[str, KalmanModel] = {}
        self._next_id = 1
        self._last_frame: int | None = None

    def _model(self, label: str) -> KalmanModel:
        key = label.lower()
        if key not in self._models:
            self._models[key] = KalmanModel(self.config.noise_for(key))
        return self._models[key]

    def step(
        self, frame: int, detections: Iterable[Detection3D], pose: RigidPose | None = None
    ) -> list[tuple[int, Box3D, float]]:
        """Advance one frame with ego-frame detections; returns confirmed tracks."""
        if self._last_frame is not None and frame <= self._last_frame:
            raise TrackError(f"frame {frame} is not after frame {self._last_frame}")
        gap = 1 if self._last_frame is None else frame - self._last_frame
        self._last_frame = frame

        pose = pose or RigidPose.identity()
        dets = [
            Detection3D(d.frame, box_ego_to_world(d.box, pose), d.confidence, d.class_label, d.attributes)
            for d in detections
        ]

        priors = {}
        for trk in self.active:
            for _ in range(gap):
                predict(trk, self._model(trk.class_label))
            priors[trk.id] = trk.state

        pairs, lost, fresh = associate(self.active, dets, self.config)
        for ti, di in pairs:
            trk = self.active[ti]
            update(trk, dets[di], self._model(trk.class_label))
            if trk.status is Status.TENTATIVE and trk.hits >= self.config.n_hit:
                trk.status = Status.CONFIRMED
                trk.ever_confirmed = True
            trk.history.append(
                TrackEntry(frame, trk.state.box(), dets[di].confidence, True, dets[di].attributes)
            )
            trk.filtered.append(trk.state)
            trk.priors.append(priors[trk.id])
        for ti in lost:
            trk = self.active[ti]
            if trk.status is Status.TENTATIVE or trk.time_since_update > self.config.n_miss:
                trk.status = Status.DEAD
            else:
                trk.history.append(TrackEntry(frame, trk.state.box(), trk.confidence, False))
                trk.filtered.append(trk.state)
                trk.priors.append(trk.state)

        for di in fresh:
            det = dets[di]
            model = self._model(det.class_label)
            mean = np.zeros(STATE_DIM)
            mean[:MEAS_DIM] = measurement(det.box)
            trk = Track(
                id=self._next_id,
                class_label=det.class_label,
                state=KalmanState(mean, model.P0.copy()),
                confidence=det.confidence,
                history=[TrackEntry(frame, det.box, det.confidence, True, det.attributes)],
                filtered=[KalmanState(mean.copy(), model.P0.copy())],
                priors=[None],
            )
            if self.config.n_hit <= 1:
                trk.status = Status.CONFIRMED
                trk.ever_confirmed = True
            self._next_id += 1
            self.active.append(trk)

        self.finished += [t for t in self.active if t.status is Status.DEAD]
        self.active = [t for t in self.active if t.status is not Status.DEAD]
        return [
            (t.id, t.state.box(), t.confidence)
            for t in self.active
            if t.status is Status.CONFIRMED
        ]

    def all_tracks(self) -> list[Track]:
        return sorted(self.finished + self.active, key=lambda t: t.id)

    def trajectories(self) -> list[Track]:
        """Tracks that were ever confirmed, for offline consumers."""
        tracks = [t for t in self.all_tracks() if t.ever_confirmed]
        if self.config.smooth:
            tracks = [smooth_track(t, self._model(t.class_label)) for t in tracks]
        return tracks


def rts_smooth(
    frames: Sequence[int], filtered: Sequence[KalmanState], priors: Sequence[KalmanState | None], F: np.ndarray
) -> list[KalmanState]:
    """Rauch-Tung-Striebel backward pass.

    ``priors[k]`` is the prediction for ``frames[k]`` made from entry k-1
    (``None`` for the first entry); frame gaps use powers of ``F``.
    """
    out = [filtered[-1]]
    for k in range(len(filtered) - 2, -1, -1):
        nxt, prior = out[0], priors[k + 1]
        Fk = np.linalg.matrix_power(F, frames[k + 1] - frames[k])
        P = filtered[k].covariance
        G = np.linalg.solve(prior.covariance.T, (P @ Fk.T).T).T
        dx = nxt.mean - prior.mean
        dx[3] = wrap_angle(dx[3])
        mean = filtered[k].mean + G @ dx
        mean[3] = wrap_angle(mean[3])
        cov = P + G @ (nxt.covariance - prior.covariance) @ G.T
        out.insert(0, KalmanState(mean, 0.5 * (cov + cov.T)))
    return out


def smooth_track(track: Track, model: KalmanModel) -> Track:
    """Copy of ``track`` whose trajectory boxes come from the smoothed states."""
    n = len(track.trajectory())
    if n < 2:
        return track
    frames = [e.frame for e in track.history[:n]]
    states = rts_smooth(frames, track.filtered[:n], track.priors[:n], model.F)
    history = [replace(e, box=s.box()) for e, s in zip(track.history[:n], states)]
    return replace(track, history=history + track.history[n:])


# -- track file --------------------------------------------------------------

TRACK_COLUMNS = ["frame", "track_id", "class", "x", "y", "z", "w", "l", "h", "theta", "score"]


@dataclass
class TrackRow:
    frame: int
    track_id: int
    class_label: str
    box: Box3D
    score: float
    attributes: Mapping[str, str] = field(default_factory=dict)


def track_rows(tracks: Iterable[Track]) -> list[TrackRow]:
    rows = [
        TrackRow(e.frame, t.id, t.class_label, e.box, e.confidence, e.attributes)
        for t in tracks
        for e in t.trajectory()
    ]
    rows.sort(key=lambda r: (r.frame, r.track_id))
    return rows


def format_track_rows(rows: Iterable[TrackRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRACK_COLUMNS) + "\n")
    for r in rows:
        vals = [*r.box.center, *r.box.dims, r.box.heading, r.score]
        buf.write(f"{r.frame},{r.track_id},{r.class_label}," + ",".join(f"{v:.6f}" for v in vals) + "\n")
    return buf.getvalue()


def parse_track_rows(path) -> list[TrackRow]:
    rows = []
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        f = raw.strip().split(",")
        if not raw.strip() or (lineno == 1 and f[0] == "frame"):
            continue
        if len(f) != len(TRACK_COLUMNS):
            raise ParseError(f"expected {len(TRACK_COLUMNS)} fields, got {len(f)}", path, lineno)
        try:
            v = [float(x) for x in f[3:]]
            rows.append(TrackRow(int(f[0]), int(f[1]), f[2], Box3D(v[0:3], v[3:6], v[6]), v[7]))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return rows


def write_track_rows(path, rows: Iterable[TrackRow]) -> None:
    Path(path).write_text(format_track_rows(rows), encoding="utf-8", newline="\n")


def run_tracker(bundle, config: TrackerConfig | None = None) -> Tracker:
    tracker = Tracker(config)
    for frame in bundle.frames:
        tracker.step(frame, bundle.detections.get(frame, []), bundle.pose(frame))
    return tracker
