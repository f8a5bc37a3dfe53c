import io
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from refertrack.captioner import (
    MOVEMENT_PHRASES,
    CaptionError,
    CaptionRecord,
    Prompt,
    PromptTemplate,
    RemoteCaptioner,
    TemplateThresholds,
    build_prompt,
    caption_remote,
    caption_template,
    chat_payload,
    crop_png,
    movement_phrase,
)
from refertrack.descriptor import MotionDescriptor, serialize_descriptor
from refertrack.geometry import Rect2D
from refertrack.remote import JsonlCache, RemoteError

STATIONARY = MotionDescriptor((10, 2, 0), 0.0, 0.0, (0, 0, 0), 0.0, 5)


def moving(p=(10, 0, 0), dp=(0, 3, 0), turn=0.0, window=5):
    return MotionDescriptor(p, 0.0, math.hypot(*dp), dp, turn, window)


def movement_words(text):
    # longest phrases first so "moving away" is not also counted as "moving"
    found, rest = [], text
    for phrase in sorted(MOVEMENT_PHRASES, key=len, reverse=True):
        if phrase in rest:
            found.append(phrase)
            rest = rest.replace(phrase, "")
    return found


class TestPrompt:
    def test_contains_inputs(self):
        text = serialize_descriptor(STATIONARY)
        p = build_prompt(text, "Car")
        assert text in p.user and "car" in p.user
        for attr in ("color", "left", "right", "front", "moving", "parked", "direction"):
            assert attr in p.user

    def test_empty_class(self):
        with pytest.raises(CaptionError):
            build_prompt(serialize_descriptor(STATIONARY), " ")

    def test_deterministic(self):
        text = serialize_descriptor(STATIONARY)
        assert build_prompt(text, "Car") == build_prompt(text, "Car")
        assert build_prompt(text, "Car").digest(b"img", "m") == build_prompt(text, "Car").digest(b"img", "m")

    def test_digest_depends_on_image_and_model(self):
        p = build_prompt(serialize_descriptor(STATIONARY), "Car")
        assert len({p.digest(b"a", "m"), p.digest(b"b", "m"), p.digest(b"a", "n")}) == 3

    def test_unresolved_placeholder(self):
        tmpl = PromptTemplate("sys", "describe {class_label} with {speed}")
        with pytest.raises(CaptionError):
            build_prompt(serialize_descriptor(STATIONARY), "Car", tmpl)

    def test_template_file(self, tmp_path):
        f = tmp_path / "p.txt"
        f.write_text("system words\n---\nA {class_label}: {descriptor} over {window}\n")
        p = build_prompt(serialize_descriptor(STATIONARY), "Car", PromptTemplate.from_file(f))
        assert p.system == "system words" and p.user.startswith("A car: pos_m=") and p.user.endswith("over 5")

    def test_template_file_needs_separator(self, tmp_path):
        f = tmp_path / "p.txt"
        f.write_text("no separator")
        with pytest.raises(CaptionError):
            PromptTemplate.from_file(f)


class TestTemplate:
    def test_parked_in_front(self):
        s = caption_template(STATIONARY, "Car")
        assert "car" in s and "parked" in s and "front" in s

    def test_pedestrian_stationary(self):
        assert "stationary" in caption_template(STATIONARY, "Pedestrian")

    def test_turning_left(self):
        assert "turning left" in caption_template(moving(turn=0.05), "Car")

    def test_turning_right(self):
        assert "turning right" in caption_template(moving(turn=-0.05), "Car")

    def test_hint_color(self):
        assert "black" in caption_template(STATIONARY, "Car", {"color": "black"})

    def test_radial_motion(self):
        assert "moving away" in caption_template(moving(p=(20, 0, 0), dp=(3, 0, 0)), "Car")
        assert "approaching" in caption_template(moving(p=(20, 0, 0), dp=(-3, 0, 0)), "Car")
        assert movement_phrase(moving(p=(20, 0, 0), dp=(0, 3, 0)), "Car", TemplateThresholds()) == "moving"

    def test_position_words(self):
        assert "to the left" in caption_template(MotionDescriptor((5, 5, 0), 0, 0, (0, 0, 0), 0, 5), "Car")
        assert "to the right" in caption_template(MotionDescriptor((5, -5, 0), 0, 0, (0, 0, 0), 0, 5), "Car")
        assert "to the left" in caption_template(MotionDescriptor((-5, 0.1, 0), 0, 0, (0, 0, 0), 0, 5), "Car")

    def test_move_threshold_scales_with_window(self):
        th = TemplateThresholds()
        assert movement_phrase(moving(dp=(0, 0.5, 0), window=5), "Car", th) == "parked"
        assert movement_phrase(moving(dp=(0, 0.5, 0), window=2), "Car", th) == "moving"

    @given(
        st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
        st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
        st.floats(-0.2, 0.2),
        st.integers(1, 5),
        st.sampled_from(["Car", "Pedestrian", "Van"]),
    )
    def test_one_movement_word_and_class(self, p, dp, turn, window, cls):
        d = MotionDescriptor((*p, 0.0), 0.0, math.hypot(*dp), (*dp, 0.0), turn, window)
        s = caption_template(d, cls)
        assert cls.lower() in s
        assert len(movement_words(s)) == 1


class TestRecord:
    def test_empty_text(self):
        with pytest.raises(CaptionError):
            CaptionRecord("s", 1, 0, "  ", "template", "t", "h")

    def test_payload_has_inline_image(self):
        doc = chat_payload(Prompt("sys", "user"), b"\x89PNG", "m")
        parts = doc["messages"][1]["content"]
        assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")
        assert doc["temperature"] == 0

    def test_crop_png(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (40, 30), (200, 10, 10)).save(tmp_path / "f.png")
        png = crop_png(tmp_path / "f.png", Rect2D(5, 5, 15, 25))
        with Image.open(io.BytesIO(png)) as im:
            assert im.size == (10, 20)


class TestRemote:
    prompt = Prompt("sys", "describe the car")

    def test_retry_then_success(self, mock_endpoint, fast_endpoint, tmp_path):
        mock_endpoint.script["completions"] = [429, 429]
        rec = caption_remote(b"img", self.prompt, fast_endpoint(), tmp_path / "c.jsonl")
        assert rec.text == "a black car" and rec.source == "remote"
        assert mock_endpoint.calls("completions") == 3

    def test_unauthorized_not_retried(self, mock_endpoint, fast_endpoint):
        mock_endpoint.script["completions"] = [401]
        with pytest.raises(RemoteError) as exc:
            caption_remote(b"img", self.prompt, fast_endpoint())
        assert exc.value.status == 401 and "scripted 401" in exc.value.body
        assert mock_endpoint.calls("completions") == 1

    def test_retries_exhausted(self, mock_endpoint, fast_endpoint):
        mock_endpoint.script["completions"] = [503] * 10
        with pytest.raises(RemoteError):
            caption_remote(b"img", self.prompt, fast_endpoint(max_retries=2))
        assert mock_endpoint.calls("completions") == 3

    def test_empty_response(self, mock_endpoint, fast_endpoint):
        mock_endpoint.caption = "   "
        with pytest.raises(RemoteError):
            caption_remote(b"img", self.prompt, fast_endpoint())

    def test_preseeded_cache_skips_network(self, mock_endpoint, fast_endpoint, tmp_path):
        cfg = fast_endpoint()
        key = self.prompt.digest(b"img", cfg.model)
        cache = tmp_path / "c.jsonl"
        JsonlCache(cache, "prompt_hash").put({"prompt_hash": key, "text": "a red van", "model_id": cfg.model})
        rec = caption_remote(b"img", self.prompt, cfg, cache)
        assert rec.text == "a red van" and rec.prompt_hash == key
        assert mock_endpoint.requests == []

    def test_api_key_sent(self, mock_endpoint, fast_endpoint):
        caption_remote(None, self.prompt, fast_endpoint())
        path, payload = mock_endpoint.requests[0]
        assert payload["model"] == "mock-model"
        assert mock_endpoint.auth == ["Bearer sk-test"]

    def test_batch_cache_idempotent(self, mock_endpoint, fast_endpoint, tmp_path):
        mock_endpoint.caption = lambda payload: "caption for " + payload["messages"][1]["content"][0]["text"]
        jobs = [(bytes([i]), Prompt("s", f"u{i % 5}")) for i in range(12)]
        cache = tmp_path / "c.jsonl"
        first = RemoteCaptioner(fast_endpoint(concurrency=4), cache).caption_many(jobs)
        snapshot = cache.read_bytes()
        again = RemoteCaptioner(fast_endpoint(concurrency=4), cache)
        assert again.caption_many(jobs) == first
        assert again.network_calls == 0
        assert cache.read_bytes() == snapshot
        lines = [json.loads(x) for x in snapshot.decode().splitlines()]
        assert [r["prompt_hash"] for r in lines] == sorted(r["prompt_hash"] for r in lines)

    def test_batch_bytes_independent_of_concurrency(self, mock_endpoint, fast_endpoint, tmp_path):
        jobs = [(bytes([i]), Prompt("s", f"u{i}")) for i in range(10)]
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        RemoteCaptioner(fast_endpoint(concurrency=1), a).caption_many(jobs)
        RemoteCaptioner(fast_endpoint(concurrency=8), b).caption_many(jobs)
        assert a.read_bytes() == b.read_bytes()
