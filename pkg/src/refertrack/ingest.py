"""Parsers and writers for per-sequence inputs.

Sequence directory layout::

    detections.csv   frame,class,x,y,z,w,l,h,theta,score (ego frame of that frame)
    poses.txt        12 numbers per line, row-major [R|t], line i = frame i
    calib.txt        "P: <12 numbers>" and "image_size: <w> <h>"
    queries.json     [{"id": ..., "text": ..., "gt": {"<frame>": [ids]}}]
    hints.csv        optional frame,det_index,attribute,value appearance hints
    gt.csv           optional query_id,frame,track_id,x1,y1,x2,y2 ground truth
    images/          optional zero-padded frame-numbered images
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import Box3D, CameraProjection, RigidPose

DETECTION_COLUMNS = ["frame", "class", "x", "y", "z", "w", "l", "h", "theta", "score"]
RESULT_COLUMNS = ["query_id", "frame", "track_id", "x1", "y1", "x2", "y2"]
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ORTHO_DRIFT_MAX = 1e-3


class ParseError(ValueError):
    """Malformed input, with file and line location when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path:
            where = self.path
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class Detection3D:
    frame: int
    box: Box3D
    confidence: float
    class_label: str
    attributes: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class QuerySpec:
    query_id: str
    text: str
    gt: dict[int, frozenset[int]] = field(default_factory=dict)


@dataclass
class SequenceBundle:
    sequence_id: str
    frames: list[int]
    detections: dict[int, list[Detection3D]]
    poses: dict[int, RigidPose]
    cam: CameraProjection | None = None
    image_paths: dict[int, Path] = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("frame indices must be strictly increasing")
        known = set(self.frames)
        for frame in self.detections:
            if frame not in known:
                raise ValueError(f"detections reference unknown frame {frame}")

    def pose(self, frame: int) -> RigidPose:
        # A missing pose degrades to sensor-frame tracking.
        return self.poses.get(frame) or RigidPose.identity()


def _read_text(path) -> str:
    try:
        return Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8 ({exc.reason})", path) from None


def _finite(token: str, what: str, path, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{what}: cannot parse {token!r} as a number", path, line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what}: non-finite value {token!r}", path, line)
    return value


def _frame_index(token: str, path, line: int) -> int:
    try:
        frame = int(token)
    except ValueError:
        raise ParseError(f"frame: cannot parse {token!r} as an integer", path, line) from None
    if frame < 0:
        raise ParseError(f"frame: negative index {frame}", path, line)
    return frame


def parse_detections_text(text: str, path=None) -> dict[int, list[Detection3D]]:
    out: dict[int, list[Detection3D]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 1 and fields[0].lower() == "frame":
            if fields != DETECTION_COLUMNS:
                raise ParseError(f"unexpected header {fields}", path, lineno)
            continue
        if len(fields) != len(DETECTION_COLUMNS):
            raise ParseError(
                f"expected {len(DETECTION_COLUMNS)} fields, got {len(fields)}", path, lineno
            )
        frame = _frame_index(fields[0], path, lineno)
        label = fields[1]
        if not label:
            raise ParseError("empty class label", path, lineno)
        names = DETECTION_COLUMNS[2:]
        x, y, z, w, l, h, theta, score = (
            _finite(tok, name, path, lineno) for tok, name in zip(fields[2:], names)
        )
        if not (0.0 <= score <= 1.0):
            raise ParseError(f"confidence {score} outside [0, 1]", path, lineno)
        if min(w, l, h) <= 0.0:
            raise ParseError(f"nonpositive box dims ({w}, {l}, {h})", path, lineno)
        det = Detection3D(frame, Box3D((x, y, z), (w, l, h), theta), score, label)
        out.setdefault(frame, []).append(det)
    return dict(sorted(out.items()))


def parse_detections(path) -> dict[int, list[Detection3D]]:
    return parse_detections_text(_read_text(path), path)


def format_detections(detections: Mapping[int, list[Detection3D]]) -> str:
    buf = io.StringIO()
    buf.write(",".join(DETECTION_COLUMNS) + "\n")
    for frame in sorted(detections):
        for d in detections[frame]:
            x, y, z = d.box.center
            w, l, h = d.box.dims
            values = [x, y, z, w, l, h, d.box.heading, d.confidence]
            buf.write(f"{frame},{d.class_label}," + ",".join(repr(float(v)) for v in values) + "\n")
    return buf.getvalue()


def write_detections(path, detections: Mapping[int, list[Detection3D]]) -> None:
    Path(path).write_text(format_detections(detections), encoding="utf-8", newline="\n")


def _orthonormalize(R: np.ndarray, path, lineno: int) -> np.ndarray:
    drift = np.abs(R.T @ R - np.eye(3)).max()
    if drift > ORTHO_DRIFT_MAX:
        raise ParseError(f"rotation not orthonormal (drift {drift:.2e})", path, lineno)
    if np.linalg.det(R) <= 0.0:
        raise ParseError("rotation has negative determinant (reflection)", path, lineno)
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def parse_poses_text(text: str, path=None) -> dict[int, RigidPose]:
    poses: dict[int, RigidPose] = {}
    frame = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise ParseError(f"expected 12 numbers, got {len(tokens)}", path, lineno)
        values = np.array([_finite(t, "pose", path, lineno) for t in tokens]).reshape(3, 4)
        R = _orthonormalize(values[:, :3], path, lineno)
        poses[frame] = RigidPose(R, values[:, 3])
        frame += 1
    return poses


def parse_poses(path) -> dict[int, RigidPose]:
    return parse_poses_text(_read_text(path), path)


def format_poses(poses: Mapping[int, RigidPose]) -> str:
    frames = sorted(poses)
    if frames and frames != list(range(len(frames))):
        raise ValueError("pose file needs contiguous frames starting at 0")
    lines = []
    for f in frames:
        lines.append(" ".join(repr(float(v)) for v in poses[f].as_matrix().ravel()))
    return "".join(line + "\n" for line in lines)


def write_poses(path, poses: Mapping[int, RigidPose]) -> None:
    Path(path).write_text(format_poses(poses), encoding="utf-8", newline="\n")


def parse_calibration(path) -> CameraProjection:
    matrix = None
    size = None
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        key, sep, rest = raw.partition(":")
        if not sep:
            raise ParseError("expected 'key: values'", path, lineno)
        tokens = rest.split()
        key = key.strip()
        if key == "P":
            if len(tokens) != 12:
                raise ParseError(f"P needs 12 numbers, got {len(tokens)}", path, lineno)
            matrix = np.array([_finite(t, "P", path, lineno) for t in tokens]).reshape(3, 4)
        elif key == "image_size":
            if len(tokens) != 2:
                raise ParseError("image_size needs width and height", path, lineno)
            size = tuple(int(_finite(t, "image_size", path, lineno)) for t in tokens)
            if min(size) <= 0:
                raise ParseError("image_size must be positive", path, lineno)
    if matrix is None or size is None:
        raise ParseError("calibration needs both P and image_size", path)
    return CameraProjection(matrix, size)


def write_calibration(path, cam: CameraProjection) -> None:
    values = " ".join(repr(float(v)) for v in cam.matrix.ravel())
    w, h = cam.image_size
    Path(path).write_text(f"P: {values}\nimage_size: {w} {h}\n", encoding="utf-8", newline="\n")


def parse_queries_obj(doc, path=None) -> list[QuerySpec]:
    if not isinstance(doc, list):
        raise ParseError("query document must be a JSON list", path)
    seen: set[str] = set()
    out = []
    for i, rec in enumerate(doc):
        where = f"record {i}"
        if not isinstance(rec, dict):
            raise ParseError(f"{where}: expected an object", path)
        qid = rec.get("id")
        text = rec.get("text")
        if not isinstance(qid, str) or not qid:
            raise ParseError(f"{where}: missing string 'id'", path)
        if qid in seen:
            raise ParseError(f"{where}: duplicate query id {qid!r}", path)
        if not isinstance(text, str) or not re.search(r"[^\W_]", text):
            raise ParseError(f"{where}: empty query text", path)
        gt_raw = rec.get("gt") or {}
        if not isinstance(gt_raw, dict):
            raise ParseError(f"{where}: 'gt' must be an object", path)
        gt = {}
        for key, ids in gt_raw.items():
            try:
                frame = int(key)
                gt[frame] = frozenset(int(v) for v in ids)
            except (TypeError, ValueError):
                raise ParseError(f"{where}: bad gt entry {key!r}", path) from None
        seen.add(qid)
        out.append(QuerySpec(qid, text, dict(sorted(gt.items()))))
    return out


def parse_queries(path) -> list[QuerySpec]:
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    return parse_queries_obj(doc, path)


def format_queries(queries: list[QuerySpec]) -> str:
    doc = [
        {
            "id": q.query_id,
            "text": q.text,
            "gt": {str(f): sorted(ids) for f, ids in sorted(q.gt.items())},
        }
        for q in queries
    ]
    return json.dumps(doc, indent=1) + "\n"


def write_queries(path, queries: list[QuerySpec]) -> None:
    Path(path).write_text(format_queries(queries), encoding="utf-8", newline="\n")


def parse_hints(path) -> dict[tuple[int, int], dict[str, str]]:
    """Appearance hints keyed by (frame, index of the detection within its frame)."""
    hints: dict[tuple[int, int], dict[str, str]] = {}
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    for lineno, row in enumerate(rows, start=1):
        if not row or (lineno == 1 and row[0] == "frame"):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", path, lineno)
        frame = _frame_index(row[0], path, lineno)
        try:
            index = int(row[1])
        except ValueError:
            raise ParseError(f"bad detection index {row[1]!r}", path, lineno) from None
        hints.setdefault((frame, index), {})[row[2]] = row[3]
    return hints


def write_hints(path, hints: Mapping[tuple[int, int], Mapping[str, str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "det_index", "attribute", "value"])
    for (frame, index) in sorted(hints):
        for key, value in sorted(hints[(frame, index)].items()):
            writer.writerow([frame, index, key, value])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def image_manifest(directory) -> dict[int, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return {}
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit():
            out[int(p.stem)] = p
    return out


def read_result_rows(path) -> list[dict]:
    """Rows of a result/GT CSV (``RESULT_COLUMNS``) with numeric fields converted."""
    rows = []
    text = _read_text(path)
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row:
            continue
        if lineno == 1 and row[0] == "query_id":
            continue
        if len(row) != len(RESULT_COLUMNS):
            raise ParseError(f"expected {len(RESULT_COLUMNS)} fields, got {len(row)}", path, lineno)
        try:
            rows.append(
                {
                    "query_id": row[0],
                    "frame": int(row[1]),
                    "track_id": int(row[2]),
                    "rect": tuple(float(v) for v in row[3:]),
                }
            )
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return rows


def write_result_rows(path, rows) -> None:
    """Write ``(query_id, frame, track_id, (x1, y1, x2, y2))`` tuples."""
    buf = io.StringIO()
    buf.write(",".join(RESULT_COLUMNS) + "\n")
    for qid, frame, tid, rect in rows:
        buf.write(f"{qid},{frame},{tid}," + ",".join(f"{v:.2f}" for v in rect) + "\n")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def load_sequence(directory, sequence_id: str | None = None) -> SequenceBundle:
    directory = Path(directory)
    det_path = directory / "detections.csv"
    if not det_path.exists():
        raise ParseError("missing detections.csv", directory)
    detections = parse_detections(det_path)
    hints_path = directory / "hints.csv"
    if hints_path.exists():
        hints = parse_hints(hints_path)
        for frame, dets in detections.items():
            detections[frame] = [
                Detection3D(d.frame, d.box, d.confidence, d.class_label, hints.get((frame, i), {}))
                for i, d in enumerate(dets)
            ]
    pose_path = directory / "poses.txt"
    poses = parse_poses(pose_path) if pose_path.exists() else {}
    calib_path = directory / "calib.txt"
    cam = parse_calibration(calib_path) if calib_path.exists() else None
    images = image_manifest(directory / "images")
    n_frames = max(
        [len(poses), max(detections, default=-1) + 1, max(images, default=-1) + 1]
    )
    return SequenceBundle(
        sequence_id=sequence_id or directory.name,
        frames=list(range(n_frames)),
        detections=detections,
        poses=poses,
        cam=cam,
        image_paths=images,
    )
