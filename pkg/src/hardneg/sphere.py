"""Geometry on the hypersphere of radius 1/t.

Embeddings are stored as plain numpy arrays wrapped in a small dataclass so the
temperature travels with the coordinates. A single embedding has ``coords`` of
shape ``(d,)``; a batch uses ``(n, d)`` and is treated row by row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateInputError, InvalidConfigError, ShapeError

NORM_RTOL = 1e-9
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class Embedding:
    coords: np.ndarray
    t: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim not in (1, 2) or coords.shape[-1] < 1:
            raise ShapeError(f"embedding coords must be (d,) or (n, d), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise InvalidConfigError("embedding coords must be finite")
        _check_t(self.t)
        object.__setattr__(self, "coords", coords)
        if self.normalized:
            norms = np.linalg.norm(coords, axis=-1)
            if not np.allclose(norms, 1.0 / self.t, rtol=NORM_RTOL, atol=0.0):
                raise InvalidConfigError("coords marked normalized but norm != 1/t")

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]

    def __len__(self):
        return 1 if self.coords.ndim == 1 else self.coords.shape[0]


@dataclass(frozen=True)
class ScoreMatrix:
    """Inner products between anchors (rows) and candidates (columns)."""

    values: np.ndarray
    lo: float
    hi: float

    @property
    def bound(self) -> tuple[float, float]:
        return (self.lo, self.hi)


EmbeddingLike = Union[Embedding, Sequence[Embedding]]


def _check_t(t):
    if not t > 0:
        raise InvalidConfigError(f"temperature must be positive, got {t}")


def normalize(v, t: float = 1.0) -> Embedding:
    """Project ``v`` (a vector or a batch of row vectors) onto the sphere of radius 1/t."""
    _check_t(t)
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= DEGENERATE_NORM):
        raise DegenerateInputError("cannot normalize a vector with norm <= 1e-12")
    return Embedding(v / (t * norms), t=t, normalized=True)


def normalize_rows(v: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Array-in, array-out variant of :func:`normalize`."""
    return normalize(v, t).coords


def _as_batch(embs: EmbeddingLike) -> tuple[np.ndarray, float]:
    if isinstance(embs, Embedding):
        return np.atleast_2d(embs.coords), embs.t
    embs = list(embs)
    if not embs:
        raise ShapeError("empty embedding list")
    ts = {e.t for e in embs}
    dims = {e.dim for e in embs}
    if len(ts) != 1 or len(dims) != 1:
        raise ShapeError("embeddings must share dimension and temperature")
    return np.vstack([np.atleast_2d(e.coords) for e in embs]), ts.pop()


def score_matrix(anchors: EmbeddingLike, candidates: EmbeddingLike) -> ScoreMatrix:
    a, ta = _as_batch(anchors)
    c, tc = _as_batch(candidates)
    if ta != tc or a.shape[1] != c.shape[1]:
        raise ShapeError("anchors and candidates must share dimension and temperature")
    r = 1.0 / ta**2
    return ScoreMatrix(a @ c.T, -r, r)


def inner_to_sqdist(s, t: float):
    """Squared distance between two points of the 1/t sphere whose inner product is ``s``."""
    return 2.0 / t**2 - 2.0 * s


def clip_scores(S: ScoreMatrix, lo: float, hi: float) -> ScoreMatrix:
    if not lo < hi:
        raise InvalidConfigError(f"clip range must satisfy lo < hi, got [{lo}, {hi}]")
    return ScoreMatrix(np.clip(S.values, lo, hi), lo, hi)
