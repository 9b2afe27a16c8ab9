"""Offline MinHash-LSH index over text database values, with online retrieval.

Index file format (JSON lines, UTF-8):

* line 1 -- header ``{"format": "avsql-value-index", "version": 1, "num_perm": ...,
  "bands": ..., "rows": ..., "seed": ..., "ngram_sizes": [...]}``
* every further line -- one entry ``{"db_id", "table", "column", "value",
  "normalized", "signature": [num_perm ints]}``

LSH buckets are rebuilt from the stored signatures on load.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import sqlite3
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .catalog import SchemaCatalog, connect_readonly

logger = logging.getLogger(__name__)

INDEX_FORMAT = "avsql-value-index"
INDEX_VERSION = 1
MERSENNE_61 = np.uint64((1 << 61) - 1)

MAX_VALUE_LENGTH = 64
MIN_ALPHA_FRACTION = 0.5
MAX_VALUES_PER_COLUMN = 50_000

_WS = re.compile(r"\s+")


class ValueIndexError(RuntimeError):
    pass


def normalize_value(value: str) -> str:
    return _WS.sub(" ", value).strip().lower()


def is_indexable(value) -> bool:
    """Short, mostly alphabetic strings only; excludes ids, dates, phone numbers."""
    if not isinstance(value, str):
        return False
    v = value.strip()
    if not v or len(v) > MAX_VALUE_LENGTH:
        return False
    return sum(ch.isalpha() for ch in v) / len(v) >= MIN_ALPHA_FRACTION


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    """1 - levenshtein / max length, on normalized forms."""
    a, b = normalize_value(a), normalize_value(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


# -- semantic similarity ------------------------------------------------------

class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return one unit-norm row vector per text."""


def _stable_hash(s: str, digest_size: int = 8) -> int:
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=digest_size).digest(),
                          "little")


class CharNgramEmbedder:
    """Hashed term-frequency vectors over character 1..3-grams of ``" text "``."""

    def __init__(self, dim: int = 4096, sizes: Sequence[int] = (1, 2, 3)):
        self.dim = dim
        self.sizes = tuple(sizes)

    def features(self, text: str) -> Counter:
        s = f" {normalize_value(text)} "
        feats: Counter = Counter()
        for n in self.sizes:
            for i in range(len(s) - n + 1):
                gram = s[i:i + n]
                if gram.strip():
                    feats[gram] += 1
        return feats

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for gram, count in self.features(text).items():
                out[row, _stable_hash(gram) % self.dim] += count
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return out / norms


class HttpEmbeddingProvider:
    """Calls an OpenAI-compatible ``/embeddings`` endpoint (e.g. a served MiniLM)."""

    def __init__(self, base_url: str, model: str = "all-MiniLM-L6-v2",
                 api_key: str | None = None, timeout: float = 30.0, client=None):
        import httpx

        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)})
        resp.raise_for_status()
        data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
        vecs = np.array([d["embedding"] for d in data], dtype=float)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vecs / norms


def cosine_similarity(provider: EmbeddingProvider, a: str, b: str) -> float:
    if normalize_value(a) == normalize_value(b):
        return 1.0
    va, vb = provider.embed([a, b])
    return float(min(1.0, max(0.0, np.dot(va, vb))))


# -- MinHash / LSH ------------------------------------------------------------

def shingles(normalized: str, sizes: Sequence[int] = (1, 2, 3)) -> set[str]:
    out = set()
    for n in sizes:
        for i in range(len(normalized) - n + 1):
            out.add(normalized[i:i + n])
    return out or {normalized}


@dataclass(frozen=True)
class MinHasher:
    num_perm: int = 128
    seed: int = 1
    ngram_sizes: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        rng = np.random.RandomState(self.seed)
        a = rng.randint(1, 2**32 - 1, size=self.num_perm, dtype=np.uint64)
        b = rng.randint(0, 2**32 - 1, size=self.num_perm, dtype=np.uint64)
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)

    def signature(self, normalized: str) -> np.ndarray:
        hv = np.array([_stable_hash(s, 4) for s in sorted(shingles(normalized, self.ngram_sizes))],
                      dtype=np.uint64)
        # a, hv < 2**32 so a*hv + b stays below 2**64
        return ((np.outer(hv, self._a) + self._b) % MERSENNE_61).min(axis=0)


@dataclass(frozen=True)
class ValueEntry:
    db_id: str
    table: str
    column: str
    value: str
    normalized: str

    def to_json(self) -> dict:
        return {"db_id": self.db_id, "table": self.table, "column": self.column,
                "value": self.value}


@dataclass(frozen=True)
class RetrievalCandidate:
    entry: ValueEntry
    edit_similarity: float
    semantic_similarity: float

    def to_json(self) -> dict:
        return {**self.entry.to_json(),
                "edit_similarity": round(self.edit_similarity, 6),
                "semantic_similarity": round(self.semantic_similarity, 6)}


@dataclass
class ValueIndex:
    num_perm: int = 128
    bands: int = 32
    rows: int = 4
    seed: int = 1
    ngram_sizes: tuple[int, ...] = (1, 2, 3)
    embedder: EmbeddingProvider = field(default_factory=CharNgramEmbedder)
    entries: list[ValueEntry] = field(default_factory=list)
    signatures: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.bands * self.rows > self.num_perm:
            raise ValueError("bands * rows must not exceed num_perm")
        self.ngram_sizes = tuple(self.ngram_sizes)
        self._hasher = MinHasher(self.num_perm, self.seed, self.ngram_sizes)
        self._buckets: list[dict[bytes, list[int]]] = [dict() for _ in range(self.bands)]
        self._exact: dict[str, list[int]] = {}
        self._keys: set = set()
        old_entries, old_sigs = self.entries, self.signatures
        self.entries, self.signatures = [], []
        for e, s in zip(old_entries, old_sigs):
            self._insert(e, np.asarray(s, dtype=np.uint64))

    def _band_keys(self, sig: np.ndarray):
        r = self.rows
        for b in range(self.bands):
            yield b, sig[b * r:(b + 1) * r].tobytes()

    def _insert(self, entry: ValueEntry, sig: np.ndarray) -> None:
        key = (entry.db_id, entry.table, entry.column, entry.value)
        if key in self._keys:
            return
        self._keys.add(key)
        idx = len(self.entries)
        self.entries.append(entry)
        self.signatures.append(sig)
        for b, k in self._band_keys(sig):
            self._buckets[b].setdefault(k, []).append(idx)
        self._exact.setdefault(entry.normalized, []).append(idx)

    def add(self, value: str, table: str = "", column: str = "", db_id: str = "") -> bool:
        """Index one value if it passes the indexability filter."""
        if not is_indexable(value):
            return False
        norm = normalize_value(value)
        self._insert(ValueEntry(db_id, table, column, value, norm), self._hasher.signature(norm))
        return True

    def __len__(self) -> int:
        return len(self.entries)

    def lsh_candidates(self, literal: str) -> set[int]:
        sig = self._hasher.signature(normalize_value(literal))
        found: set[int] = set()
        for b, k in self._band_keys(sig):
            found.update(self._buckets[b].get(k, ()))
        return found

    def retrieve(self, literal: str, tau_edit: float = 0.5, tau_semantic: float = 0.5,
                 limit: int = 5) -> list[RetrievalCandidate]:
        """Stored values similar to ``literal``; exact stored matches come first."""
        if not (0.0 <= tau_edit <= 1.0 and 0.0 <= tau_semantic <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if limit < 1:
            raise ValueError("limit must be >= 1")
        norm = normalize_value(literal)
        exact_ids = self._exact.get(norm, [])
        exact = sorted((RetrievalCandidate(self.entries[i], 1.0, 1.0) for i in exact_ids),
                       key=lambda c: (c.entry.value, c.entry.table, c.entry.column))
        scored = []
        for i in self.lsh_candidates(literal) - set(exact_ids):
            entry = self.entries[i]
            es = edit_similarity(norm, entry.normalized)
            if es < tau_edit:
                continue
            ss = cosine_similarity(self.embedder, norm, entry.normalized)
            if ss < tau_semantic:
                continue
            scored.append(RetrievalCandidate(entry, es, ss))
        scored.sort(key=lambda c: (-c.semantic_similarity, -c.edit_similarity,
                                   c.entry.value, c.entry.table, c.entry.column))
        return (exact + scored)[:limit]

    # -- persistence -------------------------------------------------------
    def header(self) -> dict:
        return {"format": INDEX_FORMAT, "version": INDEX_VERSION, "num_perm": self.num_perm,
                "bands": self.bands, "rows": self.rows, "seed": self.seed,
                "ngram_sizes": list(self.ngram_sizes)}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for e, s in zip(self.entries, self.signatures):
                rec = {"db_id": e.db_id, "table": e.table, "column": e.column, "value": e.value,
                       "normalized": e.normalized, "signature": [int(x) for x in s]}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path, embedder: EmbeddingProvider | None = None) -> "ValueIndex":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
                raise ValueIndexError(f"{path}: unsupported index header {header}")
            entries, sigs = [], []
            for line in fh:
                rec = json.loads(line)
                entries.append(ValueEntry(rec["db_id"], rec["table"], rec["column"],
                                          rec["value"], rec["normalized"]))
                sigs.append(np.array(rec["signature"], dtype=np.uint64))
        kwargs = {k: header[k] for k in ("num_perm", "bands", "rows", "seed")}
        return cls(ngram_sizes=tuple(header["ngram_sizes"]),
                   embedder=embedder or CharNgramEmbedder(),
                   entries=entries, signatures=sigs, **kwargs)


def build_index(db_path: str | Path, catalog: SchemaCatalog, **index_kwargs) -> ValueIndex:
    """Index distinct values of every text-typed column of an SQLite database."""
    index = ValueIndex(**index_kwargs)
    try:
        conn = connect_readonly(db_path)
    except Exception as exc:
        raise ValueIndexError(f"unreadable database {db_path}: {exc}") from exc
    try:
        for table in catalog.tables:
            for col in table.columns:
                if col.data_type != "text":
                    continue
                q = (f'SELECT DISTINCT "{col.name.replace(chr(34), chr(34) * 2)}" FROM '
                     f'"{table.name.replace(chr(34), chr(34) * 2)}"')
                accepted = 0
                for (value,) in conn.execute(q):
                    if accepted >= MAX_VALUES_PER_COLUMN:
                        break
                    if index.add(value, table.name, col.name, catalog.db_id):
                        accepted += 1
    except sqlite3.DatabaseError as exc:
        raise ValueIndexError(f"unreadable database {db_path}: {exc}") from exc
    finally:
        conn.close()
    logger.info("indexed %d values from %s", len(index), db_path)
    return index


def index_values(values: Iterable[str], **index_kwargs) -> ValueIndex:
    """Convenience: an index over bare strings (no table/column provenance)."""
    index = ValueIndex(**index_kwargs)
    for v in values:
        index.add(v)
    return index
