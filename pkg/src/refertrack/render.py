"""Overlay rendering: selected boxes, track ids and the query on each frame."""

from __future__ import annotations

import colorsys
import hashlib
import logging
from pathlib import Path
from typing import Iterable, Mapping

from .geometry import Rect2D

log = logging.getLogger(__name__)

BANNER_HEIGHT = 18


def track_color(track_id: int) -> tuple[int, int, int]:
    """Stable, well-spread color for a track id."""
    h = hashlib.blake2b(str(track_id).encode("ascii"), digest_size=2).digest()
    hue = int.from_bytes(h, "little") / 65536.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def render_overlays(
    rows: Iterable[dict],
    images: Mapping[int, Path],
    output_dir,
    query_text: str,
    frames: Iterable[int] | None = None,
) -> list[Path]:
    """Draw result ``rows`` (as read by ``read_result_rows``) onto the frame images.

    Every frame in ``frames`` (default: all frames with an image or a row) gets
    an output image with the query banner. Frames whose image is missing are
    skipped with a warning. Boxes entirely outside the image are dropped.
    """
    from PIL import Image, ImageDraw

    by_frame: dict[int, list[tuple[int, Rect2D]]] = {}
    for r in rows:
        by_frame.setdefault(r["frame"], []).append((r["track_id"], Rect2D(*r["rect"])))
    wanted = sorted(set(frames) if frames is not None else set(images) | set(by_frame))

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in wanted:
        src = images.get(f)
        if src is None or not Path(src).is_file():
            log.warning("frame %d: image not found, skipping", f)
            continue
        with Image.open(src) as im:
            canvas = im.convert("RGB")
        w, h = canvas.size
        draw = ImageDraw.Draw(canvas)
        for tid, rect in sorted(by_frame.get(f, ()), key=lambda t: t[0]):
            x1, y1, x2, y2 = rect.as_tuple()
            if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
                continue
            color = track_color(tid)
            draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
            draw.text((x1 + 2, max(BANNER_HEIGHT, y1 - 12)), str(tid), fill=color)
        draw.rectangle([0, 0, w, BANNER_HEIGHT], fill=(0, 0, 0))
        draw.text((4, 3), query_text, fill=(255, 255, 255))
        path = out / f"{f:06d}.png"
        canvas.save(path)
        written.append(path)
    return written
