"""Seeded synthetic driving scenes with known answers to referring queries.

A scene scripts a handful of cars and pedestrians around an ego vehicle,
renders noisy detections from them (dropout, position jitter, spurious
distractors, wrong appearance hints) and writes every canonical input file
plus per-query ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .captioner import FRONT_HALF_ANGLE
from .geometry import Box3D, CameraProjection, RigidPose, box_world_to_ego, project_box
from .ingest import (
    Detection3D,
    QuerySpec,
    write_calibration,
    write_detections,
    write_hints,
    write_poses,
    write_queries,
    write_result_rows,
)

COLORS = ("black", "white", "red", "blue", "silver")
PEDESTRIAN_KINDS = ("man", "woman")
CAR_DIMS = (1.8, 4.2, 1.5)
PED_DIMS = (0.6, 0.6, 1.75)
CAMERA_HEIGHT = 1.65


@dataclass
class SceneSpec:
    n_frames: int = 40
    n_cars: int = 6
    n_pedestrians: int = 2
    ego_speed: float = 0.5  # m/frame along the ego heading
    ego_yaw_rate: float = 0.0  # rad/frame
    dropout: float = 0.0
    jitter: float = 0.0  # BEV position noise, m
    distractor_rate: float = 0.0  # probability of one spurious detection per frame
    hint_error_rate: float = 0.0  # probability that a detection's color/kind hint is wrong
    min_separation: float = 5.0
    n_queries: int = 5
    location_queries: bool = False
    image_size: tuple[int, int] = (1242, 375)
    focal: float = 721.5
    render_images: bool = False


@dataclass
class ScriptedObject:
    gt_id: int
    class_label: str
    motion: str  # parked | stationary | moving | moving away | approaching | turning left | turning right
    start: tuple[float, float]  # world x, y at frame 0
    heading: float
    speed: float  # m/frame
    yaw_rate: float  # rad/frame
    dims: tuple[float, float, float]
    appearance: dict[str, str] = field(default_factory=dict)

    def box(self, frame: int) -> Box3D:
        x, y = self.start
        th = self.heading
        for _ in range(frame):
            x += self.speed * math.cos(th)
            y += self.speed * math.sin(th)
            th += self.yaw_rate
        return Box3D((x, y, self.dims[2] / 2.0), self.dims, th)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    objects: list[ScriptedObject]
    poses: dict[int, RigidPose]
    cam: CameraProjection
    detections: dict[int, list[Detection3D]]
    queries: list[QuerySpec]
    gt_boxes: dict[str, dict[int, list[tuple[int, tuple]]]]
    gt_captions: dict[int, str]
    n_distractors: int = 0


def default_camera(spec: SceneSpec) -> CameraProjection:
    """Forward-looking pinhole camera at the ego origin, ``CAMERA_HEIGHT`` above ground."""
    w, h = spec.image_size
    K = np.array([[spec.focal, 0.0, w / 2.0], [0.0, spec.focal, h / 2.0], [0.0, 0.0, 1.0]])
    # ego (x fwd, y left, z up) -> camera (x right, y down, z fwd)
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    t = -R @ np.array([0.0, 0.0, CAMERA_HEIGHT])
    return CameraProjection(K @ np.hstack([R, t[:, None]]), (w, h))


def ego_poses(spec: SceneSpec) -> dict[int, RigidPose]:
    poses = {}
    x = y = yaw = 0.0
    for f in range(spec.n_frames):
        poses[f] = RigidPose.from_yaw(yaw, (x, y, 0.0))
        x += spec.ego_speed * math.cos(yaw)
        y += spec.ego_speed * math.sin(yaw)
        yaw += spec.ego_yaw_rate
    return poses


def sector(p_ego) -> str:
    x, y = p_ego[0], p_ego[1]
    if x > 0 and abs(y) <= x * math.tan(FRONT_HALF_ANGLE):
        return "front"
    return "left" if y > 0 else "right"


def _script(kind: str, rng: np.random.Generator, spec: SceneSpec, gt_id: int) -> ScriptedObject:
    """Place one object relative to the ego start; all positions in world frame."""
    ahead = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    side = 1.0 if rng.random() < 0.5 else -1.0
    v_ego = spec.ego_speed
    if kind == "pedestrian":
        walking = rng.random() < 0.5
        start = (ahead(12.0, 24.0) + v_ego * spec.n_frames / 2, side * ahead(8.0, 10.0))
        motion = "moving" if walking else "stationary"
        heading = 0.0 if rng.random() < 0.5 else math.pi
        return ScriptedObject(
            gt_id, "Pedestrian", motion, start, heading, 0.3 if walking else 0.0, 0.0, PED_DIMS,
            {"color": str(rng.choice(COLORS)), "kind": str(rng.choice(PEDESTRIAN_KINDS))},
        )
    color = {"color": str(rng.choice(COLORS))}
    if kind == "parked":
        start = (ahead(14.0, 24.0) + v_ego * spec.n_frames * 0.6, side * ahead(6.5, 9.0))
        return ScriptedObject(gt_id, "Car", "parked", start, 0.0, 0.0, 0.0, CAR_DIMS, color)
    if kind == "lead":
        speed = v_ego + ahead(0.3, 0.6)
        return ScriptedObject(gt_id, "Car", "moving away", (ahead(10.0, 16.0), 0.0), 0.0, speed, 0.0, CAR_DIMS, color)
    if kind == "oncoming":
        start = (ahead(70.0, 80.0), 3.5)
        return ScriptedObject(gt_id, "Car", "approaching", start, math.pi, ahead(0.4, 0.6), 0.0, CAR_DIMS, color)
    if kind == "crossing":
        start = (ahead(26.0, 34.0) + v_ego * spec.n_frames * 0.5, -side * ahead(14.0, 18.0))
        heading = math.pi / 2 if side > 0 else -math.pi / 2
        return ScriptedObject(gt_id, "Car", "moving", start, heading, ahead(0.7, 0.9), 0.0, CAR_DIMS, color)
    if kind == "turn":
        rate = 0.04 * side
        start = (ahead(30.0, 36.0) + v_ego * spec.n_frames * 0.5, -side * ahead(4.0, 8.0))
        heading = side * ahead(0.2, 0.5)
        motion = "turning left" if side > 0 else "turning right"
        return ScriptedObject(gt_id, "Car", motion, start, heading, ahead(0.6, 0.8), rate, CAR_DIMS, color)
    raise ValueError(f"unknown object kind {kind!r}")


CAR_KINDS = ("parked", "parked", "lead", "oncoming", "crossing", "turn")


def _min_gap(a: ScriptedObject, b: ScriptedObject, n_frames: int) -> float:
    return min(
        math.hypot(a.box(f).center[0] - b.box(f).center[0], a.box(f).center[1] - b.box(f).center[1])
        for f in range(n_frames)
    )


def script_objects(spec: SceneSpec, rng: np.random.Generator) -> list[ScriptedObject]:
    kinds = [CAR_KINDS[i % len(CAR_KINDS)] if i < len(CAR_KINDS) else str(rng.choice(CAR_KINDS))
             for i in range(spec.n_cars)]
    kinds += ["pedestrian"] * spec.n_pedestrians
    objects: list[ScriptedObject] = []
    for kind in kinds:
        for _ in range(200):
            obj = _script(kind, rng, spec, len(objects) + 1)
            if all(_min_gap(obj, o, spec.n_frames) > spec.min_separation for o in objects):
                objects.append(obj)
                break
    return objects


# -- queries -------------------------------------------------------------------


@dataclass(frozen=True)
class QueryTemplate:
    text: str
    cls: str | None = None
    color: str | None = None
    kind: str | None = None
    motion: tuple[str, ...] | None = None
    where: str | None = None

    def holds(self, obj: ScriptedObject, where_now: str) -> bool:
        if self.cls and obj.class_label.lower() != self.cls:
            return False
        if self.color and obj.appearance.get("color") != self.color:
            return False
        if self.kind and obj.appearance.get("kind") != self.kind:
            return False
        if self.motion and obj.motion not in self.motion:
            return False
        if self.where and where_now != self.where:
            return False
        return True


def query_templates(location: bool = False) -> list[QueryTemplate]:
    """Query pool. Answers depend on scripted object attributes only, unless
    ``location`` adds queries whose answer changes frame by frame with the
    object's ego-relative sector."""
    out = [QueryTemplate(f"{c} cars", cls="car", color=c) for c in COLORS]
    out += [
        QueryTemplate("parked cars", cls="car", motion=("parked",)),
        QueryTemplate("cars moving away from us", cls="car", motion=("moving away",)),
        QueryTemplate("cars approaching us", cls="car", motion=("approaching",)),
        QueryTemplate("cars turning left", cls="car", motion=("turning left",)),
        QueryTemplate("cars turning right", cls="car", motion=("turning right",)),
        QueryTemplate("pedestrians", cls="pedestrian"),
        QueryTemplate("women", cls="pedestrian", kind="woman"),
        QueryTemplate("men", cls="pedestrian", kind="man"),
    ]
    if location:
        out += [
            QueryTemplate("cars in front of us", cls="car", where="front"),
            QueryTemplate("parked cars to the left of us", cls="car", motion=("parked",), where="left"),
            QueryTemplate("parked cars to the right of us", cls="car", motion=("parked",), where="right"),
        ]
    return out


# -- generation ----------------------------------------------------------------


def _visible_rect(box_ego: Box3D, cam: CameraProjection):
    if box_ego.center[0] <= 1.0:
        return None
    return project_box(box_ego, cam)


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    cam = default_camera(spec)
    poses = ego_poses(spec)
    objects = script_objects(spec, rng)

    # Ground truth per frame: ego-frame boxes and image rects of visible objects.
    truth: dict[int, list[tuple[ScriptedObject, Box3D, object]]] = {}
    for f in range(spec.n_frames):
        truth[f] = []
        for obj in objects:
            ego_box = box_world_to_ego(obj.box(f), poses[f])
            truth[f].append((obj, ego_box, _visible_rect(ego_box, cam)))

    detections: dict[int, list[Detection3D]] = {}
    n_distractors = 0
    for f in range(spec.n_frames):
        dets = []
        for obj, ego_box, rect in truth[f]:
            if rect is None or rng.random() < spec.dropout:
                continue
            cx, cy, cz = ego_box.center
            if spec.jitter > 0:
                cx += rng.normal(0.0, spec.jitter)
                cy += rng.normal(0.0, spec.jitter)
            conf = float(rng.uniform(0.6, 1.0)) if rng.random() < 0.85 else float(rng.uniform(0.3, 0.5))
            hints = dict(obj.appearance)
            if spec.hint_error_rate > 0 and rng.random() < spec.hint_error_rate:
                hints["color"] = str(rng.choice([c for c in COLORS if c != hints.get("color")]))
                if "kind" in hints:
                    hints["kind"] = str(rng.choice(PEDESTRIAN_KINDS))
            box = Box3D((cx, cy, cz), ego_box.dims, ego_box.heading)
            dets.append(Detection3D(f, box, round(conf, 4), obj.class_label, hints))
        if spec.distractor_rate > 0 and rng.random() < spec.distractor_rate:
            is_car = rng.random() < 0.7
            x = float(rng.uniform(8.0, 50.0))
            y = float(rng.uniform(-0.5, 0.5) * x)
            dims = CAR_DIMS if is_car else PED_DIMS
            box = Box3D((x, y, dims[2] / 2.0), dims, float(rng.uniform(-math.pi, math.pi)))
            hints = {"color": str(rng.choice(COLORS))}
            if not is_car:
                hints["kind"] = str(rng.choice(PEDESTRIAN_KINDS))
            dets.append(
                Detection3D(f, box, round(float(rng.uniform(0.05, 0.45)), 4), "Car" if is_car else "Pedestrian", hints)
            )
            n_distractors += 1
        order = rng.permutation(len(dets))
        detections[f] = [dets[i] for i in order]

    queries, gt_boxes = _make_queries(spec, rng, objects, truth)
    gt_captions = {o.gt_id: _truth_caption(o) for o in objects}
    return SyntheticScene(spec, seed, objects, poses, cam, detections, queries, gt_boxes, gt_captions, n_distractors)


def _truth_caption(obj: ScriptedObject) -> str:
    adj = [obj.appearance.get("color", "")] + [v for k, v in sorted(obj.appearance.items()) if k != "color"]
    noun = " ".join([a for a in adj if a] + [obj.class_label.lower()])
    return f"a {noun} that is {obj.motion}"


def _make_queries(spec, rng, objects, truth):
    candidates = []
    for tmpl in query_templates(spec.location_queries):
        gt: dict[int, frozenset[int]] = {}
        boxes: dict[int, list[tuple[int, tuple]]] = {}
        for f, items in truth.items():
            ids = []
            for obj, ego_box, rect in items:
                if rect is not None and tmpl.holds(obj, sector(ego_box.center)):
                    ids.append(obj.gt_id)
                    boxes.setdefault(f, []).append((obj.gt_id, rect.as_tuple()))
            if ids:
                gt[f] = frozenset(ids)
        answer = {i for ids in gt.values() for i in ids}
        visible = {obj.gt_id for items in truth.values() for obj, _, r in items if r is not None}
        # Useful queries select some, but not all, of the visible objects.
        if answer and answer != visible:
            candidates.append((tmpl, gt, boxes))
    picks = sorted(rng.choice(len(candidates), size=min(spec.n_queries, len(candidates)), replace=False))
    queries, gt_boxes = [], {}
    for n, i in enumerate(picks):
        tmpl, gt, boxes = candidates[i]
        qid = f"q{n}"
        queries.append(QuerySpec(qid, tmpl.text, gt))
        gt_boxes[qid] = boxes
    return queries, gt_boxes


def write_scene(scene: SyntheticScene, directory) -> Path:
    """Write all canonical files for ``scene`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_detections(d / "detections.csv", scene.detections)
    write_poses(d / "poses.txt", scene.poses)
    write_calibration(d / "calib.txt", scene.cam)
    write_queries(d / "queries.json", scene.queries)
    hints = {
        (f, i): det.attributes
        for f, dets in scene.detections.items()
        for i, det in enumerate(dets)
        if det.attributes
    }
    write_hints(d / "hints.csv", hints)
    rows = [
        (qid, f, gid, rect)
        for qid in sorted(scene.gt_boxes)
        for f in sorted(scene.gt_boxes[qid])
        for gid, rect in sorted(scene.gt_boxes[qid][f])
    ]
    write_result_rows(d / "gt.csv", rows)
    meta = {
        "seed": scene.seed,
        "spec": asdict(scene.spec),
        "n_distractors": scene.n_distractors,
        "objects": [asdict(o) for o in scene.objects],
        "gt_captions": {str(k): v for k, v in sorted(scene.gt_captions.items())},
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if scene.spec.render_images:
        render_scene_images(scene, d / "images")
    return d


def render_scene_images(scene: SyntheticScene, directory) -> None:
    """Flat-shaded frames: each visible object drawn as its projected rectangle, far to near."""
    from PIL import Image, ImageDraw

    palette = {
        "black": (25, 25, 25), "white": (235, 235, 235), "red": (200, 30, 30),
        "blue": (30, 60, 200), "silver": (170, 170, 180),
    }
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    w, h = scene.cam.image_size
    for f in range(scene.spec.n_frames):
        im = Image.new("RGB", (w, h), (110, 120, 110))
        draw = ImageDraw.Draw(im)
        draw.rectangle([0, h // 2, w, h], fill=(80, 80, 85))
        items = []
        for obj in scene.objects:
            ego_box = box_world_to_ego(obj.box(f), scene.poses[f])
            rect = _visible_rect(ego_box, scene.cam)
            if rect is not None:
                items.append((ego_box.center[0], obj, rect))
        for _, obj, rect in sorted(items, key=lambda t: -t[0]):
            fill = palette.get(obj.appearance.get("color", ""), (128, 128, 128))
            draw.rectangle(list(rect.as_tuple()), fill=fill, outline=(0, 0, 0))
        im.save(out / f"{f:06d}.png")
