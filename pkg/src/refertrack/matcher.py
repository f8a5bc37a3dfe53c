"""Caption-to-query scoring: gestalt fuzzy score, embedding cosine, and their sum."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .remote import EndpointConfig, JsonlCache, RemoteError, post_json

OFFLINE_DIM = 512
OFFLINE_SEED = b"refertrack-offline-v1"

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _longest_block(a: str, b: str, alo: int, ahi: int, blo: int, bhi: int) -> tuple[int, int, int]:
    """Longest common substring of a[alo:ahi] and b[blo:bhi].

    Among equally long blocks the one starting earliest in ``a`` wins, then
    earliest in ``b``.
    """
    positions: dict[str, list[int]] = {}
    for j in range(blo, bhi):
        positions.setdefault(b[j], []).append(j)
    best_i, best_j, best = alo, blo, 0
    run: dict[int, int] = {}
    for i in range(alo, ahi):
        nxt = {}
        for j in positions.get(a[i], ()):
            k = run.get(j - 1, 0) + 1
            nxt[j] = k
            if k > best:
                best_i, best_j, best = i - k + 1, j - k + 1, k
        run = nxt
    return best_i, best_j, best


def matching_characters(a: str, b: str) -> int:
    """Total length of the recursive longest-common-block decomposition."""
    total = 0
    stack = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        if alo >= ahi or blo >= bhi:
            continue
        i, j, k = _longest_block(a, b, alo, ahi, blo, bhi)
        if k == 0:
            continue
        total += k
        stack.append((alo, i, blo, j))
        stack.append((i + k, ahi, j + k, bhi))
    return total


def ratcliff_obershelp(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    return 2.0 * matching_characters(a, b) / (len(a) + len(b))


def fuzzy_score(query_words: Sequence[str], caption_words: Sequence[str]) -> float:
    """Sum over query words of the best gestalt similarity against any caption word."""
    if not query_words:
        raise ValueError("query has no words")
    if not caption_words:
        return 0.0
    vocab = set(caption_words)
    return float(sum(max(ratcliff_obershelp(q, d) for d in vocab) for q in query_words))


# -- encoders -----------------------------------------------------------------


class TextEncoder(Protocol):
    name: str

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Unit-norm embeddings, one row per text."""
        ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


class OfflineEncoder:
    """Hashed bag-of-tokens encoder for hermetic runs.

    Each token lands in one of ``dim`` buckets chosen by a keyed BLAKE2 hash
    and contributes its count. Only token overlap matters: no synonyms.
    """

    name = "offline-hashed-bow"

    def __init__(self, dim: int = OFFLINE_DIM, seed: bytes = OFFLINE_SEED):
        self.dim = dim
        self.seed = seed

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), key=self.seed, digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def encode_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot embed empty text")
        v = np.zeros(self.dim)
        for tok, count in Counter(tokens).items():
            v[self.bucket(tok)] += count
        return _unit(v)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode_one(t) for t in texts]) if texts else np.zeros((0, self.dim))


class RemoteEncoder:
    """OpenAI-compatible ``/embeddings`` client with a JSON-lines cache keyed by text hash."""

    def __init__(self, cfg: EndpointConfig, cache_path=None, client: httpx.Client | None = None):
        self.cfg = cfg
        self.name = f"remote:{cfg.model}"
        self.cache = JsonlCache(cache_path, "key")
        self._client = client
        self.network_calls = 0

    def _key(self, text: str) -> str:
        return hashlib.sha256(f"{self.cfg.model}\n{text}".encode("utf-8")).hexdigest()

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if not tokenize(t):
                raise ValueError("cannot embed empty text")
        keys = [self._key(t) for t in texts]
        missing = sorted({(k, t) for k, t in zip(keys, texts) if k not in self.cache})
        if missing:
            client = self._client or httpx.Client()
            try:
                payload = {"model": self.cfg.model, "input": [t for _, t in missing]}
                self.network_calls += 1
                doc = post_json(client, self.cfg, "embeddings", payload)
            finally:
                if self._client is None:
                    client.close()
            data = sorted(doc.get("data", []), key=lambda d: d.get("index", 0))
            if len(data) != len(missing):
                raise RemoteError(f"expected {len(missing)} embeddings, got {len(data)}")
            self.cache.put_many(
                [{"key": k, "embedding": d["embedding"]} for (k, _), d in zip(missing, data)]
            )
        return np.stack([_unit(np.asarray(self.cache.get(k)["embedding"], dtype=float)) for k in keys])


def embed(text: str, encoder: TextEncoder) -> np.ndarray:
    return encoder.encode([text])[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- fused score --------------------------------------------------------------


@dataclass(frozen=True)
class MatchWeights:
    w_embed: float = 1.0
    w_fuzzy: float = 1.0
    normalize_fuzzy: bool = False


@dataclass(frozen=True)
class MatchScore:
    s_fuzzy: float
    s_embed: float
    s_total: float
    query_word_count: int


def combine(s_fuzzy: float, s_embed: float, m: int, weights: MatchWeights) -> MatchScore:
    fuzzy_term = s_fuzzy / m if weights.normalize_fuzzy else s_fuzzy
    total = weights.w_embed * s_embed + weights.w_fuzzy * fuzzy_term
    return MatchScore(s_fuzzy, s_embed, total, m)


def total_score(
    query: str, caption: str, encoder: TextEncoder, weights: MatchWeights = MatchWeights()
) -> MatchScore:
    q_words = tokenize(query)
    s_f = fuzzy_score(q_words, tokenize(caption))
    e = encoder.encode([caption, query])
    return combine(s_f, cosine(e[0], e[1]), len(q_words), weights)


class QueryScorer:
    """Scores many captions against one query, memoizing by caption text."""

    def __init__(self, query: str, encoder: TextEncoder, weights: MatchWeights = MatchWeights()):
        self.query = query
        self.words = tokenize(query)
        if not self.words:
            raise ValueError("query has no words")
        self.encoder = encoder
        self.weights = weights
        self._query_vec = encoder.encode([query])[0]
        self._memo: dict[str, MatchScore] = {}

    def score_many(self, captions: Sequence[str]) -> list[MatchScore]:
        todo = sorted({c for c in captions if c not in self._memo})
        if todo:
            vecs = self.encoder.encode(todo)
            for text, vec in zip(todo, vecs):
                s_f = fuzzy_score(self.words, tokenize(text))
                self._memo[text] = combine(s_f, cosine(vec, self._query_vec), len(self.words), self.weights)
        return [self._memo[c] for c in captions]

    def score(self, caption: str) -> MatchScore:
        return self.score_many([caption])[0]
