"""Ego-centric spatial and motion summary of a track over a trailing window."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import Box3D, RigidPose, angle_diff, box_world_to_ego, wrap_angle

DEFAULT_WINDOW = 5


@dataclass(frozen=True)
class MotionDescriptor:
    p: tuple[float, float, float]
    theta_bar: float
    d_euclid: float
    delta_p: tuple[float, float, float]
    delta_theta_bar: float
    window_used: int

    def as_vector(self) -> np.ndarray:
        return np.array([*self.p, self.theta_bar, self.d_euclid, *self.delta_p, self.delta_theta_bar])


def circular_mean(angles: Sequence[float]) -> float:
    s = sum(math.sin(a) for a in angles)
    c = sum(math.cos(a) for a in angles)
    return wrap_angle(math.atan2(s, c))


def compute_descriptor(
    history: Sequence[tuple[int, Box3D]],
    poses: Mapping[int, RigidPose] | Callable[[int], RigidPose] | None,
    t0: int,
    T: int = DEFAULT_WINDOW,
) -> MotionDescriptor:
    """Summarize ``history`` (``(frame, world box)`` pairs) at frame ``t0``.

    Every sample in the window ``[t0 - T, t0]`` is expressed in the ego frame
    at ``t0``. Histories shorter than ``T`` shrink the window; a single
    sample reports ``window_used = 1`` with zero motion.
    """
    if T < 1:
        raise ValueError("window must be at least one frame")
    window = sorted((f, b) for f, b in history if t0 - T <= f <= t0)
    if not window:
        raise ValueError(f"no track state in window ending at frame {t0}")
    if callable(poses):
        pose = poses(t0)
    else:
        pose = (poses or {}).get(t0) or RigidPose.identity()

    ego = [box_world_to_ego(b, pose) for _, b in window]
    pts = np.array([b.center for b in ego])
    headings = [b.heading for b in ego]

    delta = pts[-1] - pts[0]
    steps = window[-1][0] - window[0][0]
    turn = sum(angle_diff(b, a) for a, b in zip(headings, headings[1:]))
    return MotionDescriptor(
        p=tuple(float(v) for v in pts[-1]),
        theta_bar=circular_mean(headings),
        d_euclid=float(np.linalg.norm(delta)),
        delta_p=tuple(float(v) for v in delta),
        delta_theta_bar=turn / steps if steps else 0.0,
        window_used=max(steps, 1),
    )


def _fmt(v: float) -> str:
    # Rounding first keeps -0.004 from printing as "-0.00".
    r = round(v, 2) + 0.0
    return f"{r:.2f}"


def serialize_descriptor(d: MotionDescriptor, T: int = DEFAULT_WINDOW) -> str:
    vec = lambda xs: "[" + ",".join(_fmt(x) for x in xs) + "]"  # noqa: E731
    return (
        f"pos_m={vec(d.p)} heading_rad={_fmt(d.theta_bar)} dist_{T}f_m={_fmt(d.d_euclid)} "
        f"dpos_m={vec(d.delta_p)} dheading_rad={_fmt(d.delta_theta_bar)} window={d.window_used}"
    )


_NUM = r"(-?\d+\.\d+)"
_VEC = rf"\[{_NUM},{_NUM},{_NUM}\]"
_PATTERN = re.compile(
    rf"pos_m={_VEC} heading_rad={_NUM} dist_\d+f_m={_NUM} "
    rf"dpos_m={_VEC} dheading_rad={_NUM} window=(\d+)$"
)


def parse_descriptor(text: str) -> MotionDescriptor:
    m = _PATTERN.match(text.strip())
    if not m:
        raise ValueError(f"not a serialized descriptor: {text!r}")
    g = [float(v) for v in m.groups()[:-1]]
    return MotionDescriptor(
        p=tuple(g[0:3]),
        theta_bar=g[3],
        d_euclid=g[4],
        delta_p=tuple(g[5:8]),
        delta_theta_bar=g[8],
        window_used=int(m.group(m.lastindex)),
    )
