"""End-to-end stage wiring: track, describe, caption, match, select, eval.

Every stage reads its inputs from the output directory written by the
previous stage, so any stage can be re-run on its own.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .captioner import (
    TEMPLATE_MODEL_ID,
    CaptionRecord,
    PromptTemplate,
    RemoteCaptioner,
    build_prompt,
    caption_template,
    crop_png,
)
from .config import PipelineConfig, to_toml
from .descriptor import MotionDescriptor, compute_descriptor, serialize_descriptor
from .geometry import Box3D, box_world_to_ego, project_box
from .hota import EvalResult, boxes_from_rows, evaluate_suite, format_table_csv, format_table_text
from .ingest import SequenceBundle, load_sequence, parse_queries, read_result_rows, write_result_rows
from .matcher import OfflineEncoder, QueryScorer, RemoteEncoder
from .selection import MATCHED, ScoredDetection, select
from .tracker import parse_track_rows, run_tracker, track_rows, write_track_rows

log = logging.getLogger(__name__)

STAGES = ("track", "describe", "caption", "match", "select", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    per_query: dict[str, EvalResult] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    remote_calls: int = 0


def safe_id(query_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", query_id)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


class Pipeline:
    def __init__(self, config: PipelineConfig, bundle: SequenceBundle | None = None):
        self.cfg = config
        self.out = config.out
        self._bundle = bundle
        self.remote_calls = 0

    @property
    def bundle(self) -> SequenceBundle:
        if self._bundle is None:
            self._bundle = load_sequence(self.cfg.paths.sequence_dir)
        return self._bundle

    # -- track
    def track(self) -> None:
        tracker = run_tracker(self.bundle, self.cfg.tracker)
        rows = track_rows(tracker.trajectories())
        self.out.mkdir(parents=True, exist_ok=True)
        write_track_rows(self.out / "tracks.csv", rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "track_id", "attribute", "value"])
        for r in rows:
            for key, value in sorted(r.attributes.items()):
                w.writerow([r.frame, r.track_id, key, value])
        _write(self.out / "track_hints.csv", buf.getvalue())

    def _tracks(self) -> dict[int, list]:
        by_track: dict[int, list] = {}
        for r in parse_track_rows(self.out / "tracks.csv"):
            by_track.setdefault(r.track_id, []).append(r)
        for rows in by_track.values():
            rows.sort(key=lambda r: r.frame)
        return dict(sorted(by_track.items()))

    def _track_hints(self) -> dict[tuple[int, int], dict[str, str]]:
        hints: dict[tuple[int, int], dict[str, str]] = {}
        path = self.out / "track_hints.csv"
        if path.exists():
            with path.open(encoding="utf-8", newline="") as fh:
                for row in csv.DictReader(fh):
                    hints.setdefault((int(row["track_id"]), int(row["frame"])), {})[row["attribute"]] = row["value"]
        return hints

    # -- describe
    def describe(self) -> None:
        window = self.cfg.captioner.window
        records = []
        for tid, rows in self._tracks().items():
            history = [(r.frame, r.box) for r in rows]
            for r in rows:
                d = compute_descriptor(history, self.bundle.pose, r.frame, window)
                records.append(
                    {
                        "track_id": tid,
                        "frame": r.frame,
                        "class": r.class_label,
                        "text": serialize_descriptor(d, window),
                        "values": [float(v) for v in d.as_vector()],
                        "window_used": d.window_used,
                    }
                )
        _write(self.out / "descriptors.jsonl", _jsonl(records))

    # -- caption
    def caption(self) -> None:
        cfg = self.cfg.captioner
        descs = _read_jsonl(self.out / "descriptors.jsonl")
        hints = self._track_hints()
        by_track: dict[int, list[dict]] = {}
        for rec in descs:
            by_track.setdefault(rec["track_id"], []).append(rec)

        # Captions are recomputed every `throttle` frames of a track and reused in
        # between; while the descriptor window is still filling they are recomputed
        # every frame, since a one-sample descriptor carries no motion.
        keyframes = []
        for tid, recs in sorted(by_track.items()):
            recs.sort(key=lambda r: r["frame"])
            t_init = recs[0]["frame"]
            for rec in recs:
                if (rec["frame"] - t_init) % cfg.throttle == 0 or rec["window_used"] < cfg.window:
                    keyframes.append(rec)

        seq = self.bundle.sequence_id
        if cfg.mode == "template":
            template = PromptTemplate()
            made = []
            for rec in keyframes:
                h = self._hints_at(hints, rec)
                text = caption_template(_descriptor(rec), rec["class"], h, cfg.thresholds())
                # Hints play the role of the image in the hash: they are the appearance input.
                digest = build_prompt(rec["text"], rec["class"], template).digest(
                    json.dumps(h, sort_keys=True).encode("utf-8"), TEMPLATE_MODEL_ID
                )
                made.append(CaptionRecord(seq, rec["track_id"], rec["frame"], text, "template",
                                          TEMPLATE_MODEL_ID, digest))
        else:
            template = PromptTemplate.from_file(cfg.prompt_file) if cfg.prompt_file else PromptTemplate()
            captioner = RemoteCaptioner(cfg.endpoint, self.cfg.caption_cache_path())
            boxes = {(r.track_id, r.frame): r.box for rows in self._tracks().values() for r in rows}
            jobs = []
            for rec in keyframes:
                prompt = build_prompt(rec["text"], rec["class"], template)
                jobs.append((self._crop(boxes.get((rec["track_id"], rec["frame"])), rec["frame"]), prompt))
            texts = captioner.caption_many(jobs)
            self.remote_calls += captioner.network_calls
            made = [
                CaptionRecord(seq, rec["track_id"], rec["frame"], text, "remote", cfg.endpoint.model,
                              prompt.digest(image, cfg.endpoint.model))
                for rec, text, (image, prompt) in zip(keyframes, texts, jobs)
            ]

        current = {}
        for rec in made:
            current.setdefault(rec.track_id, {})[rec.frame] = rec
        out = []
        for tid, recs in sorted(by_track.items()):
            last = None
            for rec in recs:
                last = current.get(tid, {}).get(rec["frame"], last)
                row = last.to_json()
                row["frame"] = rec["frame"]
                out.append(row)
        _write(self.out / "captions.jsonl", _jsonl(out))

    @staticmethod
    def _hints_at(hints, rec) -> dict[str, str]:
        tid, frame = rec["track_id"], rec["frame"]
        best = {}
        for (t, f), h in hints.items():
            if t == tid and f <= frame and (not best or f > best[0]):
                best = (f, h)
        return dict(best[1]) if best else {}

    def _crop(self, box_world: Box3D | None, frame: int) -> bytes | None:
        image = self.bundle.image_paths.get(frame)
        cam = self.bundle.cam
        if box_world is None or image is None or cam is None:
            return None
        rect = project_box(box_world_to_ego(box_world, self.bundle.pose(frame)), cam)
        if rect is None or rect.area < 1.0:
            return None
        return crop_png(image, rect)

    # -- match
    def _encoder(self):
        m = self.cfg.matcher
        if m.encoder == "remote":
            return RemoteEncoder(m.endpoint, self.cfg.embedding_cache_path())
        return OfflineEncoder()

    def queries(self):
        return parse_queries(self.cfg.query_path())

    def match(self) -> None:
        captions = _read_jsonl(self.out / "captions.jsonl")
        encoder = self._encoder()
        for q in self.queries():
            scorer = QueryScorer(q.text, encoder, self.cfg.matcher.weights())
            scores = scorer.score_many([c["text"] for c in captions])
            buf = io.StringIO()
            buf.write("track_id,frame,s_fuzzy,s_embed,s_total\n")
            for c, s in zip(captions, scores):
                buf.write(f"{c['track_id']},{c['frame']},{s.s_fuzzy:.6f},{s.s_embed:.6f},{s.s_total:.6f}\n")
            _write(self.out / "scores" / f"{safe_id(q.query_id)}.csv", buf.getvalue())
        self.remote_calls += getattr(encoder, "network_calls", 0)

    # -- select
    def select(self) -> None:
        tracks = self._tracks()
        boxes = {(r.track_id, r.frame): r.box for rows in tracks.values() for r in rows}
        cam = self.bundle.cam
        if cam is None:
            raise ValueError("selection output needs camera calibration (calib.txt)")
        for q in self.queries():
            sid = safe_id(q.query_id)
            with (self.out / "scores" / f"{sid}.csv").open(encoding="utf-8", newline="") as fh:
                scored = [
                    ScoredDetection(int(r["track_id"]), int(r["frame"]), float(r["s_total"]))
                    for r in csv.DictReader(fh)
                ]
            result = select(scored, tracks.keys(), self.cfg.selection)
            rows = []
            for s in result.labeled:
                if s.label != MATCHED:
                    continue
                box = box_world_to_ego(boxes[(s.track_id, s.frame)], self.bundle.pose(s.frame))
                rect = project_box(box, cam)
                if rect is not None:
                    rows.append((q.query_id, s.frame, s.track_id, rect.as_tuple()))
            rows.sort(key=lambda r: (r[1], r[2]))
            write_result_rows(self.out / "results" / f"{sid}.csv", rows)
            report = {"query_id": q.query_id, "text": q.text, **result.report}
            _write(self.out / "selections" / f"{sid}.json", json.dumps(report, indent=1, sort_keys=True) + "\n")

    # -- eval
    def eval(self) -> tuple[dict[str, EvalResult], dict[str, float]]:
        ids = [q.query_id for q in self.queries()]
        gt_rows = read_result_rows(self.cfg.gt_path())
        gt = {q: boxes_from_rows(gt_rows, q) for q in ids}
        results = {}
        for q in ids:
            path = self.out / "results" / f"{safe_id(q)}.csv"
            results[q] = boxes_from_rows(read_result_rows(path)) if path.exists() else None
        per_query, mean = evaluate_suite(ids, results, gt)
        _write(self.out / "eval.csv", format_table_csv(per_query, mean))
        _write(self.out / "eval.txt", format_table_text(per_query, mean))
        return per_query, mean

    def run(self, stages=STAGES) -> PipelineResult:
        self.out.mkdir(parents=True, exist_ok=True)
        _write(self.out / "config.toml", to_toml(self.cfg))
        result = PipelineResult()
        for stage in STAGES:
            if stage not in stages:
                continue
            if stage == "eval" and not self.cfg.eval.enabled:
                continue
            log.info("running stage %s", stage)
            try:
                value = getattr(self, stage)()
            except Exception as exc:  # noqa: BLE001 - re-raised with stage context
                raise StageError(stage, exc) from exc
            if stage == "eval":
                result.per_query, result.mean = value
        result.remote_calls = self.remote_calls
        return result


def _descriptor(rec: dict) -> MotionDescriptor:
    v = rec["values"]
    return MotionDescriptor(tuple(v[0:3]), v[3], v[4], tuple(v[5:8]), v[8], rec["window_used"])


def run_pipeline(config: PipelineConfig, stages=STAGES, bundle: SequenceBundle | None = None) -> PipelineResult:
    config.validate(check_paths=bundle is None)
    return Pipeline(config, bundle).run(stages)


@dataclass
class SuiteResult:
    per_query: dict[tuple[int, str], EvalResult]
    mean_hota: float
    remote_calls: int = 0


def run_suite(scene_spec, seeds, config: PipelineConfig, workdir) -> SuiteResult:
    """Generate one scene per seed, run the pipeline on each, average HOTA over all queries."""
    import copy

    from .scene import generate_scene, write_scene

    workdir = Path(workdir)
    per_query: dict[tuple[int, str], EvalResult] = {}
    calls = 0
    for seed in seeds:
        seq = workdir / f"scene_{seed:03d}"
        if not (seq / "detections.csv").exists():
            write_scene(generate_scene(scene_spec, seed), seq)
        cfg = copy.deepcopy(config)
        cfg.paths.sequence_dir = str(seq)
        cfg.paths.output_dir = str(workdir / f"out_{seed:03d}")
        cfg.paths.query_file = cfg.paths.gt_file = ""
        result = run_pipeline(cfg)
        calls += result.remote_calls
        for qid, res in result.per_query.items():
            per_query[(seed, qid)] = res
    if not per_query:
        raise ValueError("suite produced no queries")
    mean = sum(r.hota for r in per_query.values()) / len(per_query)
    return SuiteResult(per_query, mean, calls)
