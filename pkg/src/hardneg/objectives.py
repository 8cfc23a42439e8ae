"""Contrastive objectives: NCE, debiased, hardness-biased, and the softplus variant.

All losses take raw inner-product scores. The batched paths vectorize over
anchors with the per-anchor formulas unchanged, so a batch of one reproduces
the scalar functions exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InvalidBatchError, InvalidConfigError, InvalidDistributionError, ShapeError
from .sphere import Embedding


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the hardness-biased objective.

    ``N`` and ``Q`` default to the number of negatives actually supplied.
    ``estimator_floor`` defaults to ``exp(-1/t**2)``, the smallest value the
    negative-term expectation can take on the sphere.
    """

    beta: float = 0.0
    tau_plus: float = 0.0
    N: Optional[int] = None
    M: int = 1
    Q: Optional[float] = None
    t: float = 1.0
    clip: Optional[tuple[float, float]] = None
    estimator_floor: Optional[float] = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise InvalidConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0 <= self.tau_plus < 1:
            raise InvalidConfigError(f"tau_plus must lie in [0, 1), got {self.tau_plus}")
        if self.N is not None and (int(self.N) != self.N or self.N < 1):
            raise InvalidConfigError(f"N must be a positive integer, got {self.N}")
        if int(self.M) != self.M or self.M < 1:
            raise InvalidConfigError(f"M must be a positive integer, got {self.M}")
        if self.Q is not None and not self.Q > 0:
            raise InvalidConfigError(f"Q must be positive, got {self.Q}")
        if not self.t > 0:
            raise InvalidConfigError(f"t must be positive, got {self.t}")
        if self.clip is not None:
            lo, hi = self.clip
            if not lo < hi:
                raise InvalidConfigError(f"clip range must satisfy lo < hi, got {self.clip}")
            object.__setattr__(self, "clip", (float(lo), float(hi)))
        if self.estimator_floor is not None and not self.estimator_floor > 0:
            raise InvalidConfigError("estimator_floor must be positive")

    @property
    def tau_minus(self) -> float:
        return 1.0 - self.tau_plus

    @property
    def floor(self) -> float:
        if self.estimator_floor is not None:
            return self.estimator_floor
        return math.exp(-1.0 / self.t**2)

    def resolve_Q(self, n_negs: int) -> float:
        if self.N is not None and self.N != n_negs:
            raise InvalidBatchError(f"config.N={self.N} but {n_negs} negatives supplied")
        return float(self.Q) if self.Q is not None else float(n_negs)


def _vector(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        x = x.reshape(-1)
    if x.size == 0:
        raise InvalidBatchError(f"{name} must be non-empty")
    return x


def _tilted_mean_exp(s: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise sum(exp((beta+1) s)) / sum(exp(beta s)) with a max shift."""
    w = np.exp(beta * (s - s.max(axis=-1, keepdims=True)))
    return (w * np.exp(s)).sum(axis=-1) / w.sum(axis=-1)


def importance_weighted_expectation(scores, beta: float) -> float:
    """Self-normalized estimate of E_{q_beta}[e^s] from samples of the base law."""
    s = _vector(scores, "scores")
    return float(_tilted_mean_exp(s, beta))


def nce_loss(s_pos: float, s_negs, config: LossConfig) -> float:
    s = _vector(s_negs, "s_negs")
    Q = config.resolve_Q(s.size)
    log_neg = math.log(Q / s.size) + logsumexp(s)
    return float(np.logaddexp(0.0, log_neg - s_pos))


# -- hardness-biased objective -------------------------------------------------

@dataclass
class _HardTerms:
    loss: np.ndarray
    est: np.ndarray
    clamped: np.ndarray
    negs: np.ndarray
    clip_mask: Optional[np.ndarray]
    Q: float


def _hard_terms(s_pos, s_pos_samples, s_negs, config: LossConfig) -> _HardTerms:
    """Per-anchor hardness-biased loss; inputs are (B,), (B, M), (B, N)."""
    if s_pos_samples.shape[1] != config.M:
        raise InvalidBatchError(f"expected M={config.M} positive samples, got {s_pos_samples.shape[1]}")
    if s_negs.shape[1] == 0:
        raise InvalidBatchError("s_negs must be non-empty")
    Q = config.resolve_Q(s_negs.shape[1])
    clip_mask = None
    if config.clip is not None:
        lo, hi = config.clip
        clip_mask = (s_negs >= lo) & (s_negs <= hi)
        s_negs = np.clip(s_negs, lo, hi)
    g_neg = _tilted_mean_exp(s_negs, config.beta)
    g_pos = _tilted_mean_exp(s_pos_samples, config.beta)
    raw = (g_neg - config.tau_plus * g_pos) / config.tau_minus
    clamped = raw < config.floor
    est = np.where(clamped, config.floor, raw)
    # softplus(log(Q est) - a) rather than logaddexp(a, .) - a: no cancellation for small losses
    loss = np.logaddexp(0.0, np.log(Q * est) - s_pos)
    return _HardTerms(loss, est, clamped, s_negs, clip_mask, Q)


def hard_loss(s_pos: float, s_pos_samples, s_negs, config: LossConfig) -> float:
    ps = _vector(s_pos_samples, "s_pos_samples")[None, :]
    ns = _vector(s_negs, "s_negs")[None, :]
    return float(_hard_terms(np.array([float(s_pos)]), ps, ns, config).loss[0])


def debiased_loss(s_pos: float, s_pos_samples, s_negs, config: LossConfig) -> float:
    return hard_loss(s_pos, s_pos_samples, s_negs, replace(config, beta=0.0))


def _hard_grads(s_pos, s_pos_samples, s_negs, config: LossConfig):
    """Per-anchor losses and their partial derivatives with respect to every score."""
    terms = _hard_terms(s_pos, s_pos_samples, s_negs, config)
    beta, Q = config.beta, terms.Q
    # sigma = Q*est / (e^a + Q*est)
    sigma = expit(np.log(Q * terms.est) - s_pos)
    d_pos = -sigma
    d_est = np.where(terms.clamped, 0.0, sigma / terms.est)

    def tilted_grad(s):
        w = np.exp(beta * (s - s.max(axis=1, keepdims=True)))
        w /= w.sum(axis=1, keepdims=True)
        g = (w * np.exp(s)).sum(axis=1, keepdims=True)
        return w * ((beta + 1.0) * np.exp(s) - beta * g)

    d_negs = (d_est / config.tau_minus)[:, None] * tilted_grad(terms.negs)
    if terms.clip_mask is not None:
        d_negs = d_negs * terms.clip_mask
    d_ps = (-d_est * config.tau_plus / config.tau_minus)[:, None] * tilted_grad(s_pos_samples)
    return terms, d_pos, d_ps, d_negs


def _nce_grads(s_pos, s_negs, config: LossConfig):
    Q = config.resolve_Q(s_negs.shape[1])
    log_neg = np.log(Q / s_negs.shape[1]) + logsumexp(s_negs, axis=1)
    loss = np.logaddexp(0.0, log_neg - s_pos)
    d_pos = -expit(log_neg - s_pos)
    # d/ds_i = (Q/N) e^{s_i} / (e^a + R)
    d_negs = np.exp(np.log(Q / s_negs.shape[1]) + s_negs - np.logaddexp(s_pos, log_neg)[:, None])
    return loss, d_pos, d_negs


# -- alignment / uniformity ----------------------------------------------------

def alignment_loss(pairs) -> float:
    """Mean half squared distance between positive pairs.

    ``pairs`` is a sequence of ``(Embedding, Embedding)`` or a pair of
    ``(n, d)`` arrays.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        a, b = (np.atleast_2d(np.asarray(p, dtype=float)) for p in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise InvalidBatchError("alignment_loss needs at least one pair")
        if len({e.t for pair in pairs for e in pair}) != 1:
            raise ShapeError("all embeddings must share t")
        a = np.vstack([np.atleast_2d(p[0].coords) for p in pairs])
        b = np.vstack([np.atleast_2d(p[1].coords) for p in pairs])
    if a.size == 0:
        raise InvalidBatchError("alignment_loss needs at least one pair")
    if a.shape != b.shape:
        raise ShapeError("pair members must have matching shapes")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)) / 2.0)


def _rows(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return list(x)
    return [np.asarray(r, dtype=float).reshape(-1) for r in x]


def uniformity_loss(anchor_scores, weights) -> float:
    """Mean over anchors of log sum_j w_j e^{s_j}."""
    scores, ws = _rows(anchor_scores), _rows(weights)
    if not scores or len(scores) != len(ws):
        raise InvalidBatchError("need one weight vector per anchor")
    vals = []
    for s, w in zip(scores, ws):
        if s.shape != w.shape or s.size == 0:
            raise ShapeError("scores and weights must align and be non-empty")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidDistributionError("weights must be a probability vector")
        vals.append(logsumexp(s, b=w))
    return float(np.mean(vals))


def asymptotic_loss(s_pos, anchor_scores, weights) -> float:
    """Mean over anchors of -log(e^{s+} / sum_j w_j e^{s_j}): the N -> inf objective without the positive term."""
    s_pos = np.asarray(s_pos, dtype=float).reshape(-1)
    scores, ws = _rows(anchor_scores), _rows(weights)
    if len(scores) != s_pos.size:
        raise ShapeError("one positive score per anchor required")
    return float(np.mean([logsumexp(s, b=w) - a for a, s, w in zip(s_pos, scores, ws)]))


def softplus(z):
    return np.logaddexp(0.0, z)


def js_hard_loss(t_pos, t_neg, beta: float) -> float:
    """Jensen-Shannon style objective with tilted weighting of negative discriminator scores."""
    tp = _vector(t_pos, "t_pos")
    tn = _vector(t_neg, "t_neg")
    w = np.exp(beta * (tn - tn.max()))
    w /= w.sum()
    return float(np.mean(softplus(-tp)) + np.sum(w * softplus(tn)))


def tilted_weights(scores, beta: float) -> np.ndarray:
    s = _vector(scores, "scores")
    w = np.exp(beta * (s - s.max()))
    return w / w.sum()


# -- batched layout --------------------------------------------------------------

def _floating(x) -> np.ndarray:
    """At least float64; extended precision passes through untouched."""
    x = np.asarray(x)
    return x.astype(np.result_type(x.dtype, np.float64), copy=False)


@dataclass(frozen=True)
class BatchScores:
    """Per-anchor score layout: ``pos`` (B,), ``pos_samples`` (B, M), ``negs`` (B, N)."""

    pos: np.ndarray
    pos_samples: np.ndarray
    negs: np.ndarray

    def __post_init__(self):
        pos = _floating(self.pos).reshape(-1)
        ps = _floating(self.pos_samples)
        ng = _floating(self.negs)
        if ps.ndim == 1:
            ps = ps[:, None]
        if ng.ndim != 2 or ps.shape[0] != pos.size or ng.shape[0] != pos.size:
            raise ShapeError("inconsistent per-anchor layout")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "pos_samples", ps)
        object.__setattr__(self, "negs", ng)

    def __len__(self):
        return self.pos.size


@dataclass(frozen=True)
class InBatchLayout:
    """Index map from a (2B, 2B) Gram matrix to per-anchor scores.

    Row k of the stacked views [anchors; positives] has its positive at
    ``(k + B) mod 2B`` and every other row except itself as a negative, so
    N = 2(B - 1).
    """

    pos_idx: np.ndarray
    neg_idx: np.ndarray

    @classmethod
    def for_batch(cls, batch_size: int) -> "InBatchLayout":
        if batch_size < 2:
            raise ShapeError("in-batch negatives need batch_size >= 2")
        n = 2 * batch_size
        k = np.arange(n)
        pos = (k + batch_size) % n
        neg = np.array([[j for j in range(n) if j != i and j != pos[i]] for i in range(n)])
        return cls(pos, neg)

    def gather(self, gram: np.ndarray) -> BatchScores:
        rows = np.arange(gram.shape[0])
        pos = gram[rows, self.pos_idx]
        return BatchScores(pos, pos[:, None], gram[rows[:, None], self.neg_idx])

    def scatter(self, d_pos, d_pos_samples, d_negs) -> np.ndarray:
        """Accumulate per-anchor score gradients back onto the Gram matrix (M = 1)."""
        n = self.pos_idx.size
        rows = np.arange(n)
        dS = np.zeros((n, n))
        dS[rows, self.pos_idx] += d_pos + d_pos_samples.sum(axis=1)
        np.add.at(dS, (np.repeat(rows, self.neg_idx.shape[1]), self.neg_idx.ravel()), d_negs.ravel())
        return dS


def batch_losses(scores: BatchScores, config: LossConfig, objective: str = "hard") -> np.ndarray:
    """Per-anchor losses in the dtype of the scores."""
    if objective == "hard":
        return _hard_terms(scores.pos, scores.pos_samples, scores.negs, config).loss
    if objective == "nce":
        return _nce_grads(scores.pos, scores.negs, config)[0]
    raise InvalidConfigError(f"unknown objective {objective!r}")


def batch_hard_loss(scores: BatchScores, config: LossConfig) -> float:
    """Mean hardness-biased loss over anchors; clips negatives first when ``config.clip`` is set."""
    return float(np.mean(batch_losses(scores, config)))


def batch_loss_and_score_grads(scores: BatchScores, config: LossConfig, objective: str = "hard"):
    """Mean loss and its gradient with respect to each score in the layout.

    ``objective="nce"`` uses the plain NCE formula; the positive-sample
    gradient is then identically zero.
    """
    B = len(scores)
    if objective == "hard":
        terms, d_pos, d_ps, d_negs = _hard_grads(scores.pos, scores.pos_samples, scores.negs, config)
        losses = terms.loss
    elif objective == "nce":
        losses, d_pos, d_negs = _nce_grads(scores.pos, scores.negs, config)
        d_ps = np.zeros_like(scores.pos_samples)
    else:
        raise InvalidConfigError(f"unknown objective {objective!r}")
    return float(np.mean(losses)), BatchScores(d_pos / B, d_ps / B, d_negs / B)


def kink_pattern(scores: BatchScores, config: LossConfig) -> tuple:
    """Which clamp/clip branches are active; used to keep finite differences off kinks."""
    terms = _hard_terms(scores.pos, scores.pos_samples, scores.negs, config)
    clip = () if terms.clip_mask is None else tuple(terms.clip_mask.ravel())
    return tuple(terms.clamped), clip

