"""Exact ground truth on finite labeled populations.

Every distribution here (the tilted law, its same-class and different-class
conditionals, the worst-case negative) is computed by full enumeration over
the population. For an anchor ``i`` the candidate negatives are all the
*other* points; the anchor never serves as its own companion.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import EmptySupportError, InvalidConfigError, InvalidDistributionError, ShapeError, UsageError
from .sphere import NORM_RTOL, normalize_rows

GAP_NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class FinitePopulation:
    points: np.ndarray
    labels: np.ndarray
    base_weights: np.ndarray
    t: float = 1.0

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        labels = np.asarray(self.labels).astype(int).reshape(-1)
        w = np.asarray(self.base_weights, dtype=float).reshape(-1)
        if not self.t > 0:
            raise InvalidConfigError("t must be positive")
        if pts.shape[0] != labels.size or labels.size != w.size:
            raise ShapeError("points, labels and base_weights must align")
        if not np.all(np.isfinite(pts)):
            raise InvalidConfigError("points must be finite")
        if not np.allclose(np.linalg.norm(pts, axis=1), 1.0 / self.t, rtol=NORM_RTOL, atol=0.0):
            raise InvalidConfigError("population points must lie on the 1/t sphere")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidDistributionError("base_weights must be a probability vector")
        if np.unique(labels).size < 2:
            raise InvalidConfigError("a population needs at least two classes")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "base_weights", w)

    @classmethod
    def from_vectors(cls, vectors, labels, t: float = 1.0, base_weights=None) -> "FinitePopulation":
        """Normalize raw vectors onto the sphere; uniform base mass unless given."""
        pts = normalize_rows(np.atleast_2d(np.asarray(vectors, dtype=float)), t)
        if base_weights is None:
            base_weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
        return cls(pts, labels, base_weights, t)

    def __len__(self):
        return self.labels.size

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def scores(self, anchor_index: int) -> np.ndarray:
        return self.points @ self.points[anchor_index]

    def class_mass(self, c: int) -> float:
        return float(self.base_weights[self.labels == c].sum())


def random_population(rng: np.random.Generator, size: int, num_classes: int, d: int,
                      t: float = 1.0, uniform: bool = True) -> FinitePopulation:
    """Gaussian directions with random labels, every class present; used by tests and verify suites."""
    if size < num_classes or num_classes < 2:
        raise UsageError("need size >= num_classes >= 2")
    labels = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, size - num_classes)])
    rng.shuffle(labels)
    vecs = rng.standard_normal((size, d))
    w = None if uniform else rng.dirichlet(np.ones(size))
    return FinitePopulation.from_vectors(vecs, labels, t, w)


def within_class_positives(pop: FinitePopulation) -> list[tuple[int, int]]:
    """Pair each point with the next point of its class (cyclically); singletons pair with themselves."""
    pairs = []
    for c in pop.classes:
        idx = np.flatnonzero(pop.labels == c)
        for k, i in enumerate(idx):
            pairs.append((int(i), int(idx[(k + 1) % idx.size])))
    pairs.sort()
    return pairs


def _support_mask(pop: FinitePopulation, restrict: str, cls: Optional[int], exclude: Optional[int]) -> np.ndarray:
    if restrict == "all":
        mask = np.ones(len(pop), dtype=bool)
    elif restrict in ("same_class", "diff_class"):
        if cls is None:
            raise UsageError(f"restrict={restrict!r} needs a class")
        mask = pop.labels == cls if restrict == "same_class" else pop.labels != cls
    else:
        raise UsageError(f"unknown restriction {restrict!r}")
    if exclude is not None:
        mask = mask.copy()
        mask[exclude] = False
    mask &= pop.base_weights > 0
    if not mask.any():
        raise EmptySupportError(f"restricted support {restrict!r} is empty")
    return mask


def tilted_distribution(pop: FinitePopulation, anchor_scores, beta: float, restrict: str = "all",
                        cls: Optional[int] = None, exclude: Optional[int] = None) -> np.ndarray:
    """Probability vector proportional to exp(beta * s) * p on the restricted support."""
    s = np.asarray(anchor_scores, dtype=float).reshape(-1)
    if s.size != len(pop):
        raise ShapeError("anchor_scores must align with population points")
    mask = _support_mask(pop, restrict, cls, exclude)
    logw = np.full(s.size, -np.inf)
    logw[mask] = np.log(pop.base_weights[mask]) + beta * s[mask]
    q = np.zeros(s.size)
    q[mask] = np.exp(logw[mask] - logsumexp(logw[mask]))
    return q


def _conditional(pop: FinitePopulation, i: int, beta: float, which: str) -> tuple[np.ndarray, np.ndarray]:
    restrict = {"neg": "diff_class", "pos": "same_class"}.get(which)
    if restrict is None:
        raise UsageError(f"which must be 'neg' or 'pos', got {which!r}")
    s = pop.scores(i)
    return tilted_distribution(pop, s, beta, restrict, cls=pop.labels[i], exclude=i), s


def exact_conditional_expectation(pop: FinitePopulation, anchor_index: int, beta: float, which: str = "neg") -> float:
    """E[e^s] under the tilted same-class (``pos``) or different-class (``neg``) law of the anchor."""
    q, s = _conditional(pop, anchor_index, beta, which)
    m = s[q > 0].max()
    return float(np.exp(m) * np.sum(q * np.exp(s - m)))


def pu_mixture_residual(pop: FinitePopulation, anchor_index: int, beta: float) -> float:
    """Max-norm gap between the tilted law and the fixed-weight mixture tau- q- + tau+ q+.

    tau+ is the base mass of the anchor's class among its companions.
    """
    i = anchor_index
    s = pop.scores(i)
    c = pop.labels[i]
    q_all = tilted_distribution(pop, s, beta, "all", exclude=i)
    q_neg = tilted_distribution(pop, s, beta, "diff_class", cls=c, exclude=i)
    w = pop.base_weights.copy()
    w[i] = 0.0
    tau_plus = w[pop.labels == c].sum() / w.sum()
    if tau_plus > 0:
        q_pos = tilted_distribution(pop, s, beta, "same_class", cls=c, exclude=i)
    else:  # anchor alone in its class: the positive component carries no mass
        q_pos = np.zeros_like(q_all)
    return float(np.max(np.abs(q_all - ((1.0 - tau_plus) * q_neg + tau_plus * q_pos))))


def worst_case_sup(pop: FinitePopulation, anchor_index: int) -> float:
    """Largest score between the anchor and any different-class point."""
    mask = _support_mask(pop, "diff_class", pop.labels[anchor_index], None)
    return float(pop.scores(anchor_index)[mask].max())


def _pairs(positives) -> np.ndarray:
    pairs = np.asarray(list(positives), dtype=int).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise UsageError("need at least one (anchor, positive) pair")
    return pairs


def _limit_loss(s_pos: np.ndarray, neg_term: np.ndarray, Q: float) -> float:
    return float(np.mean(np.logaddexp(0.0, np.log(Q) + neg_term - s_pos)))


def _pos_scores(pop, pairs):
    return np.einsum("ij,ij->i", pop.points[pairs[:, 0]], pop.points[pairs[:, 1]])


def worst_case_loss(pop: FinitePopulation, positives, Q: float) -> float:
    """Mean of -log(e^{s+} / (e^{s+} + Q e^{M(x)})) with M(x) the worst-case different-class score."""
    pairs = _pairs(positives)
    m = np.array([worst_case_sup(pop, a) for a in pairs[:, 0]])
    return _limit_loss(_pos_scores(pop, pairs), m, Q)


def hard_limit_loss(pop: FinitePopulation, positives, beta: float, Q: float) -> float:
    """Infinite-negative objective with negatives drawn from the tilted different-class law."""
    pairs = _pairs(positives)
    log_e = np.array([np.log(exact_conditional_expectation(pop, a, beta, "neg")) for a in pairs[:, 0]])
    return _limit_loss(_pos_scores(pop, pairs), log_e, Q)


def prop1_report(pop: FinitePopulation, positives, Q: float, beta_grid: Sequence[float]) -> list[tuple[float, float]]:
    """Rows of (beta, L* - L(beta)); values under 1e-12 in magnitude are reported as 0."""
    grid = [float(b) for b in beta_grid]
    if len(grid) < 2 or any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
        raise UsageError("beta_grid must be strictly increasing with at least two entries")
    star = worst_case_loss(pop, positives, Q)
    rows = []
    for b in grid:
        gap = star - hard_limit_loss(pop, positives, b, Q)
        rows.append((b, 0.0 if abs(gap) < GAP_NOISE_FLOOR else gap))
    return rows


def write_csv(header: Sequence[str], rows: Iterable[Sequence], fh) -> None:
    """Write rows with floats at full round-trip precision."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def beta_gap_csv(rows) -> str:
    buf = io.StringIO()
    write_csv(("beta", "gap"), rows, buf)
    return buf.getvalue()


def rejection_sample_tilted(pop: FinitePopulation, anchor_scores, beta: float, restrict: str,
                            rng: np.random.Generator, n: int, cls: Optional[int] = None,
                            exclude: Optional[int] = None) -> np.ndarray:
    """Draw ``n`` indices from the tilted law by proposing from the base weights.

    A proposal with score s is accepted with probability exp(beta * (s - s_max)).
    """
    if n < 1:
        raise UsageError("n must be >= 1")
    s = np.asarray(anchor_scores, dtype=float).reshape(-1)
    if s.size != len(pop):
        raise ShapeError("anchor_scores must align with population points")
    mask = _support_mask(pop, restrict, cls, exclude)
    support = np.flatnonzero(mask)
    p = pop.base_weights[support] / pop.base_weights[support].sum()
    accept = np.exp(beta * (s[support] - s[support].max()))
    rate = float(np.dot(p, accept))
    out = []
    remaining = n
    while remaining > 0:
        k = max(64, int(1.2 * remaining / rate) + 1)
        prop = rng.choice(support.size, size=k, p=p)
        keep = prop[rng.random(k) < accept[prop]]
        out.append(support[keep[:remaining]])
        remaining -= min(remaining, keep.size)
    return np.concatenate(out)


def empirical_law(samples: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(samples, minlength=size) / samples.size


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
