"""Unit-norm embedding access: binary on-disk store and remote service client.

Store layout (little-endian throughout): magic b"CHBR", one version byte (1),
uint32 header length, UTF-8 JSON header {"dim", "kind", "ids"}, then a
row-major float32 matrix with one row per id in header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from .errors import (
    BadMagicError,
    DegenerateInputError,
    DuplicateIdError,
    MissingEmbeddingError,
    PreconditionError,
    ProviderError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"CHBR"
VERSION = 1

NORM_TOL = 1e-5

API_KEY_ENV = "CHBR_EMBED_API_KEY"


def normalize(values) -> np.ndarray:
    """Scale to unit Euclidean norm; raises on (near-)zero input."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / n


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, accumulated at 64-bit precision.

    The accumulation order is canonical (index order), so the result is
    exactly symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def prompt_key(text: str) -> str:
    """64-bit content hash of a prompt string, as 16 hex chars.

    Used as the store id for precomputed prompt embeddings; callers keep the
    full string alongside to detect collisions.
    """
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


@dataclass
class EmbeddingStore:
    """Immutable-after-construction map of id -> unit-norm float32 vector."""

    dim: int
    kind: str  # "text" | "image"
    _ids: list[str] = field(default_factory=list)
    _matrix: np.ndarray | None = None

    @classmethod
    def from_vectors(cls, kind: str, vectors: dict[str, np.ndarray]) -> "EmbeddingStore":
        if not vectors:
            raise PreconditionError("store needs at least one vector")
        ids = list(vectors.keys())
        dim = len(np.asarray(vectors[ids[0]]).ravel())
        rows = np.zeros((len(ids), dim), dtype=np.float32)
        for i, id_ in enumerate(ids):
            v = np.asarray(vectors[id_], dtype=np.float64).ravel()
            if v.size != dim:
                raise ShapeError(f"id {id_!r} has dim {v.size}, store dim is {dim}")
            rows[i] = normalize(v).astype(np.float32)
        store = cls(dim=dim, kind=kind)
        store._ids = ids
        store._matrix = rows
        return store

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._index

    @property
    def _index(self) -> dict[str, int]:
        idx = getattr(self, "_index_cache", None)
        if idx is None:
            idx = {id_: i for i, id_ in enumerate(self._ids)}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    def get(self, id_: str) -> np.ndarray:
        """Vector for `id_`, as float64 (row bits are float32 on disk)."""
        try:
            row = self._matrix[self._index[id_]]
        except KeyError:
            raise MissingEmbeddingError(
                f"no embedding with id {id_!r} in {self.kind} store"
            ) from None
        return row.astype(np.float64)

    def save(self, path) -> None:
        header = json.dumps(
            {"dim": self.dim, "kind": self.kind, "ids": self._ids},
            sort_keys=True,
            ensure_ascii=False,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(bytes([VERSION]))
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self._matrix.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
        if len(blob) < 9:
            raise TruncatedPayloadError(f"{path}: file shorter than fixed header")
        version = blob[4]
        if version != VERSION:
            raise VersionMismatchError(
                f"{path}: unsupported version {version}, expected {VERSION}"
            )
        (header_len,) = struct.unpack_from("<I", blob, 5)
        header_end = 9 + header_len
        if len(blob) < header_end:
            raise TruncatedPayloadError(f"{path}: truncated JSON header")
        header = json.loads(blob[9:header_end].decode("utf-8"))
        dim = int(header["dim"])
        ids = list(header["ids"])
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateIdError(f"{path}: duplicate id {dupes[0]!r}")
        payload = blob[header_end:]
        expected = len(ids) * dim * 4
        if len(payload) != expected:
            raise TruncatedPayloadError(
                f"{path}: payload is {len(payload)} bytes, expected {expected} "
                f"({len(ids)} rows x dim {dim})"
            )
        matrix = np.frombuffer(payload, dtype="<f4").reshape(len(ids), dim).copy()
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise PreconditionError(
                f"{path}: vector {ids[bad[0]]!r} has norm {norms[bad[0]]:.6f}"
            )
        store = cls(dim=dim, kind=header["kind"])
        store._ids = ids
        store._matrix = matrix
        return store

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.kind == other.kind
            and self._ids == other._ids
            and np.array_equal(
                self._matrix.view(np.uint32), other._matrix.view(np.uint32)
            )
        )


RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class RemoteEmbedClient:
    """Client for the POST {base_url}/embed service.

    Retries transient failures with capped exponential backoff; responses for
    concurrent batches are reordered to request order.
    """

    def __init__(
        self,
        base_url: str,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        batch_size: int = 64,
        session=None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.timeout = timeout
        self.max_in_flight = max(1, max_in_flight)
        self.batch_size = max(1, batch_size)
        self.session = session or requests.Session()
        self.sleep = sleep
        self.last_retry_count = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_batch(self, kind: str, payloads: list) -> tuple[int, list, int]:
        attempt = 0
        retries = 0
        while True:
            try:
                resp = self.session.post(
                    f"{self.base_url}/embed",
                    json={"kind": kind, "payloads": payloads},
                    headers=self._headers(),
                    timeout=self.timeout,
                )
                status = resp.status_code
                body = resp.text
            except requests.RequestException as exc:
                status, body = None, str(exc)
            if status == 200:
                doc = resp.json()
                return int(doc["dim"]), doc["vectors"], retries
            if (status is None or status in RETRYABLE_STATUSES) and attempt < self.max_retries:
                self.sleep(min(self.backoff_cap, self.backoff_base * 2**attempt))
                attempt += 1
                retries += 1
                continue
            raise ProviderError(
                f"embed request failed with status {status}",
                status=status,
                body=(body or "")[:500],
                retries=retries,
            )

    def embed(self, kind: str, payloads: list) -> list[np.ndarray]:
        """One normalized vector per payload, in request order."""
        if kind not in ("text", "image"):
            raise PreconditionError(f"kind must be 'text' or 'image', got {kind!r}")
        if not payloads:
            raise PreconditionError("payloads must be non-empty")
        batches = [
            payloads[i : i + self.batch_size]
            for i in range(0, len(payloads), self.batch_size)
        ]
        results: list[tuple[int, list]] = [None] * len(batches)
        total_retries = 0
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            futures = {
                pool.submit(self._post_batch, kind, batch): i
                for i, batch in enumerate(batches)
            }
            for fut, i in futures.items():
                dim, vectors, retries = fut.result()
                total_retries += retries
                results[i] = (dim, vectors)
        self.last_retry_count = total_retries
        dims = {d for d, _ in results}
        if len(dims) != 1:
            raise ShapeError(f"service returned inconsistent dims {sorted(dims)}")
        out = []
        for _, vectors in results:
            for v in vectors:
                out.append(normalize(v))
        return out
