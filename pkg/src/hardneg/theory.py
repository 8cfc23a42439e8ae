"""Worst-case-negative geometry: Tammes packing, prototype 1-NN, risk bound, variance lemma."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .errors import (BoundInvalidError, HypothesisViolationError, InvalidConfigError,
                     ShapeError, UsageError)
from .oracle import FinitePopulation, tilted_distribution
from .sphere import NORM_RTOL, Embedding

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


@dataclass(frozen=True)
class SpherePacking:
    prototypes: np.ndarray
    t: float = 1.0
    rho: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.prototypes, dtype=float))
        if not self.t > 0:
            raise InvalidConfigError("t must be positive")
        if not np.allclose(np.linalg.norm(v, axis=1), 1.0 / self.t, rtol=NORM_RTOL, atol=0.0):
            raise InvalidConfigError("prototypes must lie on the 1/t sphere")
        rho = np.full(v.shape[0], 1.0 / v.shape[0]) if self.rho is None else np.asarray(self.rho, dtype=float)
        if rho.shape != (v.shape[0],) or np.any(rho <= 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise InvalidConfigError("rho must be a positive probability vector, one entry per prototype")
        object.__setattr__(self, "prototypes", v)
        object.__setattr__(self, "rho", rho)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def min_separation(self) -> float:
        d2 = _sqdists(self.prototypes)
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(max(d2.min(), 0.0)))


def _sqdists(v: np.ndarray) -> np.ndarray:
    diff = v[..., :, None, :] - v[..., None, :, :]
    return np.sum(diff**2, axis=-1)


def _nearest_sq(v: np.ndarray) -> np.ndarray:
    d2 = _sqdists(v)
    k = v.shape[-2]
    d2[..., np.arange(k), np.arange(k)] = np.inf
    return d2.min(axis=-1)


def tammes_objective(packing: SpherePacking) -> float:
    """Prior-weighted squared distance from each prototype to its nearest other prototype."""
    if packing.num_classes < 2:
        raise InvalidConfigError("need at least two prototypes")
    return float(np.dot(packing.rho, _nearest_sq(packing.prototypes)))


def _child_seeds(rng: SeedLike, restarts: int) -> tuple[int, list[np.random.SeedSequence]]:
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    elif isinstance(rng, np.random.SeedSequence):
        seed = int(rng.entropy)
    else:
        seed = int(rng)
    return seed, np.random.SeedSequence(seed).spawn(restarts)


def tammes_solve(num_classes: int, d: int, t: float = 1.0, rho=None, restarts: int = 20,
                 iters: int = 2000, rng: SeedLike = 0) -> tuple[SpherePacking, int]:
    """Approximately maximize the packing objective by annealed soft-min gradient ascent.

    All restarts run in lockstep as one batched array. The soft-min width
    shrinks geometrically over the first 90% of iterations; the remainder
    ascends the exact objective along its subgradient. Returns the best packing
    seen (by exact objective) and the integer seed it was derived from.
    """
    if num_classes < 2 or d < 2 or restarts < 1 or iters < 10:
        raise InvalidConfigError("need num_classes >= 2, d >= 2, restarts >= 1, iters >= 10")
    if not t > 0:
        raise InvalidConfigError("t must be positive")
    k = num_classes
    rho = np.full(k, 1.0 / k) if rho is None else np.asarray(rho, dtype=float)
    if rho.shape != (k,) or np.any(rho <= 0) or abs(rho.sum() - 1.0) > 1e-9:
        raise InvalidConfigError("rho must be a positive probability vector of length num_classes")
    seed, children = _child_seeds(rng, restarts)
    v = np.stack([np.random.default_rng(ss).standard_normal((k, d)) for ss in children])
    v /= np.linalg.norm(v, axis=-1, keepdims=True)

    smooth_iters = int(0.9 * iters)
    taus = np.geomspace(0.5, 1e-3, smooth_iters)
    lrs = np.geomspace(0.1, 1e-5, iters)
    best_val = np.full(restarts, -np.inf)
    best_v = v.copy()
    eye = np.eye(k, dtype=bool)
    for it in range(iters):
        diff = v[:, :, None, :] - v[:, None, :, :]
        d2 = np.sum(diff**2, axis=-1)
        d2[:, eye] = np.inf
        if it < smooth_iters:
            z = -d2 / taus[it]
            z -= z.max(axis=-1, keepdims=True)
            w = np.exp(z)
            w /= w.sum(axis=-1, keepdims=True)
        else:
            w = np.zeros_like(d2)
            nn = np.argmin(d2, axis=-1)
            np.put_along_axis(w, nn[..., None], 1.0, axis=-1)
        w *= rho[None, :, None]
        # d/dv_c of sum_c rho_c sum_c' w_cc' |v_c - v_c'|^2
        coef = w + np.swapaxes(w, 1, 2)
        grad = 2.0 * np.sum(coef[..., None] * diff, axis=2)
        grad -= np.sum(grad * v, axis=-1, keepdims=True) * v
        v = v + lrs[it] * grad
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        val = np.einsum("c,rc->r", rho, _nearest_sq(v))
        better = val > best_val
        best_val[better] = val[better]
        best_v[better] = v[better]
    r = int(np.argmax(best_val))
    return SpherePacking(best_v[r] / t, t, rho), seed


def packing_to_json(packing: SpherePacking, seed: int) -> dict:
    return {"objective": tammes_objective(packing), "prototypes": packing.prototypes.tolist(), "seed": seed}


def prototype_classifier(packing: SpherePacking, x) -> Union[int, np.ndarray]:
    """Index of the nearest prototype; near-exact ties go to the smallest class index."""
    coords = x.coords if isinstance(x, Embedding) else np.asarray(x, dtype=float)
    if coords.shape[-1] != packing.prototypes.shape[1]:
        raise ShapeError("embedding dimension does not match prototypes")
    if isinstance(x, Embedding) and x.t != packing.t:
        raise ShapeError("embedding temperature does not match packing")
    single = coords.ndim == 1
    c = np.atleast_2d(coords)
    d2 = np.sum((c[:, None, :] - packing.prototypes[None, :, :]) ** 2, axis=-1)
    m = d2.min(axis=1, keepdims=True)
    pred = np.argmax(d2 <= m + 1e-12 * (1.0 + m), axis=1)
    return int(pred[0]) if single else pred


@dataclass(frozen=True)
class BoundInputs:
    epsilon: float
    xi: float
    num_classes: int
    t: float = 1.0

    @property
    def denominator(self) -> float:
        return self.xi**2 - 2 * self.num_classes * (1 + 1 / self.t) * math.sqrt(self.epsilon)

    @property
    def valid(self) -> bool:
        return self.denominator > 0


def generalization_bound(b: BoundInputs) -> float:
    """Misclassification bound 8 eps / (xi^2 - 2|C|(1 + 1/t) sqrt(eps))^2 for the prototype classifier."""
    if b.epsilon < 0 or not b.xi > 0 or b.num_classes < 2 or not b.t > 0:
        raise InvalidConfigError("need epsilon >= 0, xi > 0, num_classes >= 2, t > 0")
    if not b.valid:
        raise BoundInvalidError(f"bound denominator {b.denominator} is not positive")
    return 8.0 * b.epsilon / b.denominator**2


@dataclass
class BoundReport:
    epsilon: float
    xi: float
    bound: Optional[float]
    empirical_risk: float
    holds: Optional[bool]
    valid: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _class_conditionals(pop: FinitePopulation):
    for c in pop.classes:
        idx = np.flatnonzero(pop.labels == c)
        w = pop.base_weights[idx]
        yield c, idx, w / w.sum()


def class_prototypes(pop: FinitePopulation) -> np.ndarray:
    """Per class, the member minimizing expected squared distance to the rest of its class."""
    protos = []
    for _, idx, w in _class_conditionals(pop):
        pts = pop.points[idx]
        cost = _sqdists(pts) @ w
        protos.append(pts[int(np.argmin(cost))])
    return np.array(protos)


def worst_case_limit_loss(pop: FinitePopulation, positives=None) -> float:
    """Alignment plus worst-case uniformity minus 1/t^2, with expectations under the base weights.

    With ``positives=None`` alignment is enumerated exactly over independent
    same-class pairs; otherwise it is the mean over the given index pairs.
    """
    t = pop.t
    if positives is None:
        align = 0.0
        for c, idx, w in _class_conditionals(pop):
            align += pop.class_mass(c) * float(w @ _sqdists(pop.points[idx]) @ w) / 2.0
    else:
        pairs = np.asarray(list(positives), dtype=int).reshape(-1, 2)
        diff = pop.points[pairs[:, 0]] - pop.points[pairs[:, 1]]
        align = float(np.mean(np.sum(diff**2, axis=1))) / 2.0
    gram = pop.points @ pop.points.T
    diff_mask = pop.labels[:, None] != pop.labels[None, :]
    sup = np.where(diff_mask, gram, -np.inf).max(axis=1)
    return align + float(pop.base_weights @ sup) - 1.0 / t**2


def bound_check_experiment(pop: FinitePopulation, positives, packing_star: SpherePacking) -> BoundReport:
    """Compare the prototype 1-NN risk of ``pop``'s embedding against the closed-form risk bound."""
    k = packing_star.num_classes
    if not np.array_equal(pop.classes, np.arange(k)):
        raise UsageError("population labels must be 0..k-1 matching the packing's prototypes")
    masses = np.array([pop.class_mass(c) for c in range(k)])
    if np.max(np.abs(masses - 1.0 / k)) > 1e-9 or np.max(np.abs(packing_star.rho - 1.0 / k)) > 1e-9:
        raise HypothesisViolationError("the bound assumes a uniform class prior")
    if packing_star.t != pop.t:
        raise ShapeError("packing and population temperatures differ")

    eps = worst_case_limit_loss(pop, positives) + tammes_objective(packing_star) / 2.0
    eps = 0.0 if eps < 1e-12 else eps
    xi = packing_star.min_separation()
    protos = SpherePacking(class_prototypes(pop), pop.t)
    pred = prototype_classifier(protos, pop.points)
    risk = float(pop.base_weights @ (pred != pop.labels))
    b = BoundInputs(eps, xi, k, pop.t)
    if eps > 1.0 or not b.valid:
        return BoundReport(eps, xi, None, risk, None, False)
    bound = generalization_bound(b)
    return BoundReport(eps, xi, bound, risk, bool(risk <= bound), True)


@dataclass(frozen=True)
class VarianceCheck:
    variance: float
    bound: float
    holds: bool


def variance_lemma_check(pop: FinitePopulation, anchor_index: int, beta: float,
                         t: Optional[float] = None) -> VarianceCheck:
    """Exact Var(e^s) under the tilted same-class law versus e^{2/t^2}/(2 t^2) * E||f(v) - f(v')||^2."""
    t = pop.t if t is None else t
    if t != pop.t:
        raise ShapeError(f"t={t} does not match population temperature {pop.t}")
    s = pop.scores(anchor_index)
    q = tilted_distribution(pop, s, beta, "same_class", cls=pop.labels[anchor_index], exclude=anchor_index)
    sup = q > 0
    qs, x = q[sup], np.exp(s[sup])
    mean = float(qs @ x)
    variance = max(float(qs @ (x - mean) ** 2), 0.0)
    spread = float(qs @ _sqdists(pop.points[sup]) @ qs)
    bound = math.exp(2.0 / t**2) / (2.0 * t**2) * spread
    return VarianceCheck(variance, bound, bool(variance <= bound + 1e-12))
