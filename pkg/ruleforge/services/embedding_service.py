"""
Code vectorization.

The default embedder hashes tokens into a fixed number of buckets, which
keeps every run offline and reproducible. A remote HTTP embedder can stand
in for a pre-trained code model.
"""
import hashlib
import os
import threading
from typing import List, Optional, Protocol, Sequence

import backoff
import httpx
import numpy as np
from loguru import logger

from ruleforge.services.errors import BackendUnavailable, DimensionMismatch, EmptyInput
from ruleforge.services.models import BasicUnit, CodeSegment, CodeVector, MemberRef

DEFAULT_DIM = 256


class EmbedderBackend(Protocol):
    backend_id: str
    dim: int

    def embed_tokens(self, texts: Sequence[str]) -> np.ndarray:
        ...


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def l2_normalize(values: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        return values
    return values / norm


class LocalHashEmbedder:
    """Hashed bag-of-tokens: token counts per bucket, L2-normalized."""

    backend_id = "local-hash"

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def embed_tokens(self, texts: Sequence[str]) -> np.ndarray:
        values = np.zeros(self.dim, dtype=np.float64)
        for text in texts:
            values[_bucket(text, self.dim)] += 1.0
        return l2_normalize(values)


class RemoteEmbedder:
    """
    HTTP embedding service.

    POSTs ``{"input": text}`` and expects ``{"embedding": [...]}`` back.
    In-flight requests are bounded; transport errors retry with backoff.
    """

    def __init__(
        self,
        endpoint: str,
        dim: int = DEFAULT_DIM,
        api_key: Optional[str] = None,
        max_in_flight: int = 4,
        timeout: float = 30.0,
        max_tries: int = 3,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.dim = dim
        self.backend_id = f"remote:{endpoint}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.http_client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.max_tries = max_tries
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, text: str) -> List[float]:
        response = self.http_client.post(self.endpoint, json={"input": text})
        response.raise_for_status()
        return response.json()["embedding"]

    def embed_tokens(self, texts: Sequence[str]) -> np.ndarray:
        text = " ".join(texts)
        post = backoff.on_exception(
            backoff.expo,
            (httpx.HTTPError, KeyError, ValueError),
            max_tries=self.max_tries,
        )(self._post)
        with self._slots:
            try:
                values = post(text)
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise BackendUnavailable(f"embedding service {self.endpoint} failed: {exc}") from exc
        vector = np.asarray(values, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimensionMismatch(f"embedding service returned {vector.shape[0]} values, expected {self.dim}")
        if not np.all(np.isfinite(vector)):
            raise BackendUnavailable("embedding service returned non-finite values")
        return vector


def embed_segment(segment: CodeSegment, embedder: EmbedderBackend, source: Optional[MemberRef] = None) -> CodeVector:
    if not segment.tokens:
        raise EmptyInput("cannot embed an empty segment")
    return CodeVector(embedder.embed_tokens([t.text for t in segment.tokens]), source)


def aggregate_vectors(vectors: Sequence[CodeVector], mode: str = "mean", source: Optional[MemberRef] = None) -> CodeVector:
    """
    Combine segment vectors into one snippet vector.

    ``mean`` averages element-wise and re-normalizes (a zero mean stays
    zero). ``concat`` joins the vectors in order; pad with
    :func:`pad_vectors` before clustering.
    """
    if not vectors:
        raise EmptyInput("aggregate_vectors needs at least one vector")
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"vectors have mixed dimensions {sorted(dims)}")

    stacked = np.vstack([v.values for v in vectors])
    if mode == "mean":
        values = l2_normalize(stacked.mean(axis=0))
    elif mode == "concat":
        values = stacked.reshape(-1)
    else:
        raise ValueError(f"unknown aggregation mode '{mode}'")
    return CodeVector(values, source if source is not None else vectors[0].source)


def pad_vectors(vectors: Sequence[CodeVector]) -> List[CodeVector]:
    """Zero-pad vectors to the longest one."""
    if not vectors:
        return []
    width = max(v.dim for v in vectors)
    padded = []
    for v in vectors:
        values = np.zeros(width, dtype=np.float64)
        values[: v.dim] = v.values
        padded.append(CodeVector(values, v.source))
    return padded


class EmbeddingService:
    """Embeds basic units through their token segments."""

    def __init__(
        self,
        embedder: Optional[EmbedderBackend] = None,
        aggregation: str = "mean",
        fallback: Optional[EmbedderBackend] = None,
    ):
        self.embedder = embedder or LocalHashEmbedder()
        self.aggregation = aggregation
        self.fallback = fallback
        logger.info(f"✅ Embedder ready ({self.embedder.backend_id}, dim {self.embedder.dim}, {aggregation})")

    @classmethod
    def from_settings(cls, settings) -> "EmbeddingService":
        local = LocalHashEmbedder(settings.dim)
        if settings.backend == "local":
            return cls(local, settings.aggregation)
        if not settings.endpoint:
            raise BackendUnavailable("remote embedding backend needs embedding.endpoint")
        remote = RemoteEmbedder(
            settings.endpoint,
            settings.dim,
            api_key=os.getenv(settings.api_key_env),
            max_in_flight=settings.max_in_flight,
            timeout=settings.timeout,
            max_tries=settings.max_tries,
        )
        return cls(remote, settings.aggregation, local if settings.fallback_to_local else None)

    def _embed_all(self, embedder: EmbedderBackend, unit_segments) -> List[CodeVector]:
        vectors = []
        for unit, segments in unit_segments:
            parts = [embed_segment(s, embedder, unit.ref) for s in segments]
            vectors.append(aggregate_vectors(parts, self.aggregation, unit.ref))
        if self.aggregation == "concat":
            vectors = pad_vectors(vectors)
        return vectors

    def embed_units(self, unit_segments: Sequence) -> List[CodeVector]:
        """
        Args:
            unit_segments: (BasicUnit, [CodeSegment, ...]) pairs; units with
                no tokens must be filtered out beforehand

        Returns:
            One vector per unit, in input order
        """
        try:
            return self._embed_all(self.embedder, unit_segments)
        except BackendUnavailable as exc:
            if self.fallback is None:
                raise
            logger.warning(f"⚠️  {exc}; falling back to {self.fallback.backend_id} for the whole run")
            self.embedder = self.fallback
            self.fallback = None
            return self._embed_all(self.embedder, unit_segments)

    @property
    def backend_id(self) -> str:
        return self.embedder.backend_id
