"""Natural-language descriptions of tracked objects.

Two caption sources share one record format: a remote multimodal chat
endpoint that sees the object crop plus the serialized motion descriptor,
and a rule-based template used for hermetic runs.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import httpx

from .descriptor import MotionDescriptor, parse_descriptor
from .geometry import Rect2D
from .remote import EndpointConfig, JsonlCache, RemoteError, post_json

log = logging.getLogger(__name__)

TEMPLATE_MODEL_ID = "template-v1"
VEHICLE_CLASSES = frozenset({"car", "van", "truck", "bus", "tram", "vehicle"})
MOVEMENT_PHRASES = (
    "moving away",
    "turning left",
    "turning right",
    "approaching",
    "stationary",
    "parked",
    "moving",
)
FRONT_HALF_ANGLE = math.radians(15.0)
RADIAL_COS = math.cos(math.radians(30.0))

DEFAULT_SYSTEM = (
    "You describe one traffic participant for a driving assistant. "
    "Answer with a single plain sentence and nothing else."
)
DEFAULT_USER = (
    "The image is a crop showing one {class_label}. "
    "Its motion summary over the last {window} frames, in our vehicle frame "
    "(x forward, y left, z up, meters and radians), is: {descriptor}. "
    "Write one sentence that states the object's color, the object type, its location "
    "relative to us (left, right or in front), whether it is moving, parked or stationary, "
    "and its direction (turning left, turning right, moving away or approaching)."
)

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class CaptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str = DEFAULT_SYSTEM
    user_text_template: str = DEFAULT_USER

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        """Plain text: system text, a line containing only ``---``, then the user template."""
        text = Path(path).read_text(encoding="utf-8")
        system, sep, user = text.partition("\n---\n")
        if not sep:
            raise CaptionError(f"{path}: expected a '---' line separating system and user text")
        return cls(system.strip(), user.strip())


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str

    def digest(self, image: bytes | None = None, model_id: str = "") -> str:
        h = hashlib.sha256()
        for part in (model_id, self.system, self.user):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        h.update(hashlib.sha256(image or b"").digest())
        return h.hexdigest()


def build_prompt(
    descriptor_text: str,
    class_label: str,
    template: PromptTemplate = PromptTemplate(),
    window: int | None = None,
) -> Prompt:
    if not descriptor_text.strip():
        raise CaptionError("empty descriptor text")
    if not class_label.strip():
        raise CaptionError("empty class label")
    if window is None:
        try:
            window = parse_descriptor(descriptor_text).window_used
        except ValueError:
            raise CaptionError("window length not given and descriptor text is not parseable") from None
    values = {"descriptor": descriptor_text, "class_label": class_label.lower(), "window": str(window)}

    def fill(match):
        key = match.group(1)
        if key not in values:
            raise CaptionError(f"unresolved placeholder {{{key}}} in prompt template")
        return values[key]

    return Prompt(
        _PLACEHOLDER.sub(fill, template.system_text),
        _PLACEHOLDER.sub(fill, template.user_text_template),
    )


@dataclass(frozen=True)
class TemplateThresholds:
    move_per_frame: float = 0.2  # m/frame
    turn_per_frame: float = 0.02  # rad/frame


def movement_phrase(d: MotionDescriptor, class_label: str, th: TemplateThresholds) -> str:
    if d.d_euclid < th.move_per_frame * d.window_used:
        return "parked" if class_label.lower() in VEHICLE_CLASSES else "stationary"
    if abs(d.delta_theta_bar) >= th.turn_per_frame:
        return "turning left" if d.delta_theta_bar > 0 else "turning right"
    px, py = d.p[0], d.p[1]
    dx, dy = d.delta_p[0], d.delta_p[1]
    rng = math.hypot(px, py)
    step = math.hypot(dx, dy)
    if rng > 0 and step > 0:
        c = (px * dx + py * dy) / (rng * step)
        if c >= RADIAL_COS:
            return "moving away"
        if c <= -RADIAL_COS:
            return "approaching"
    return "moving"


def position_phrase(d: MotionDescriptor) -> str:
    x, y = d.p[0], d.p[1]
    if x > 0 and abs(y) <= x * math.tan(FRONT_HALF_ANGLE):
        return "in front of us"
    return "to the left of us" if y > 0 else "to the right of us"


_MOVEMENT_TAIL = {
    "moving away": "moving away from us",
    "approaching": "approaching us",
}


def caption_template(
    d: MotionDescriptor,
    class_label: str,
    appearance_hints: Mapping[str, str] | None = None,
    thresholds: TemplateThresholds = TemplateThresholds(),
) -> str:
    hints = dict(appearance_hints or {})
    adjectives = []
    if hints.get("color"):
        adjectives.append(hints.pop("color"))
    adjectives += [hints[k] for k in sorted(hints) if hints[k]]
    noun = " ".join(adjectives + [class_label.lower()])
    move = movement_phrase(d, class_label, thresholds)
    return f"a {noun} {position_phrase(d)} that is {_MOVEMENT_TAIL.get(move, move)}"


@dataclass(frozen=True)
class CaptionRecord:
    sequence_id: str
    track_id: int
    frame: int
    text: str
    source: str  # "remote" | "template"
    model_id: str
    prompt_hash: str

    def __post_init__(self):
        if not self.text.strip():
            raise CaptionError("caption text is empty")

    def to_json(self) -> dict:
        return asdict(self)


def crop_png(image_path, rect: Rect2D) -> bytes:
    from PIL import Image

    with Image.open(image_path) as im:
        box = tuple(int(round(v)) for v in rect.as_tuple())
        crop = im.convert("RGB").crop(box)
        buf = io.BytesIO()
        crop.save(buf, format="PNG")
        return buf.getvalue()


def chat_payload(prompt: Prompt, image: bytes | None, model: str) -> dict:
    content: list[dict] = [{"type": "text", "text": prompt.user}]
    if image:
        url = "data:image/png;base64," + base64.b64encode(image).decode("ascii")
        content.append({"type": "image_url", "image_url": {"url": url}})
    return {
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": content},
        ],
    }


def _message_text(doc: dict) -> str:
    try:
        text = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise RemoteError("malformed chat completion response") from None
    if isinstance(text, list):
        text = " ".join(part.get("text", "") for part in text if isinstance(part, dict))
    text = (text or "").strip()
    if not text:
        raise RemoteError("model returned an empty caption")
    return text


@dataclass
class RemoteCaptioner:
    """Chat-completions caption source with a prompt-hash keyed cache."""

    endpoint: EndpointConfig
    cache_path: Path | None = None
    client: httpx.Client | None = None
    network_calls: int = 0
    _cache: JsonlCache = field(init=False, repr=False)

    def __post_init__(self):
        self._cache = JsonlCache(self.cache_path, "prompt_hash")

    def caption(self, image: bytes | None, prompt: Prompt, sequence_id="", track_id=0, frame=0) -> CaptionRecord:
        key = prompt.digest(image, self.endpoint.model)
        cached = self._cache.get(key)
        if cached is None:
            cached = self._fetch(image, prompt, key)
            self._cache.put(cached)
        return CaptionRecord(sequence_id, track_id, frame, cached["text"], "remote", cached["model_id"], key)

    def _fetch(self, image, prompt, key) -> dict:
        client = self.client or httpx.Client()
        try:
            self.network_calls += 1
            doc = post_json(client, self.endpoint, "chat/completions", chat_payload(prompt, image, self.endpoint.model))
        finally:
            if self.client is None:
                client.close()
        return {"prompt_hash": key, "text": _message_text(doc), "model_id": self.endpoint.model}

    def caption_many(self, jobs: list[tuple[bytes | None, Prompt]]) -> list[str]:
        """Caption a batch with bounded concurrency; cache lines are written in key order."""
        keys = [p.digest(img, self.endpoint.model) for img, p in jobs]
        todo = {}
        for key, job in zip(keys, jobs):
            if key not in self._cache and key not in todo:
                todo[key] = job
        if todo:
            workers = max(1, self.endpoint.concurrency)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {k: pool.submit(self._fetch, img, p, k) for k, (img, p) in sorted(todo.items())}
                records = [futures[k].result() for k in sorted(futures)]
            self._cache.put_many(records)
        return [self._cache.get(k)["text"] for k in keys]


def caption_remote(image_crop: bytes | None, prompt: Prompt, config: EndpointConfig, cache_path=None,
                   client: httpx.Client | None = None) -> CaptionRecord:
    return RemoteCaptioner(config, cache_path, client).caption(image_crop, prompt)
