"""Self-checking numerical suites; each returns evidence rows plus a pass/fail verdict."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .objectives import (LossConfig, alignment_loss, asymptotic_loss, debiased_loss, hard_loss,
                         importance_weighted_expectation, nce_loss, uniformity_loss,
                         kink_pattern)
from .oracle import (FinitePopulation, empirical_law, exact_conditional_expectation, prop1_report,
                     pu_mixture_residual, random_population, rejection_sample_tilted, tilted_distribution,
                     total_variation, within_class_positives)
from .synthdata import LatentClassSpec, sample_batch
from .theory import variance_lemma_check
from .trainer import TrainConfig, _batch_scores, _mlp_forward, finite_diff_check, init_params

DEFAULT_BETA_GRID = (0.0, 1.0, 10.0, 100.0)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    header: tuple
    rows: list
    summary: dict = field(default_factory=dict)


def suite_equivalence(seed: int = 0, n_batches: int = 1000, tol: float = 1e-12, **_) -> SuiteResult:
    """beta = 0 collapses the hard loss to NCE (tau+ = 0) and to the debiased loss (any tau+)."""
    rng = np.random.default_rng(seed)
    rows, worst_nce, worst_deb = [], 0.0, 0.0
    for b in range(n_batches):
        t = float(rng.uniform(0.3, 2.0))
        bound = 1.0 / t**2
        n, m = int(rng.integers(1, 33)), int(rng.integers(1, 5))
        s_pos = float(rng.uniform(-bound, bound))
        negs = rng.uniform(-bound, bound, n)
        ps = rng.uniform(-bound, bound, m)
        tau = float(rng.uniform(0.0, 0.5))
        plain = LossConfig(t=t, M=m)
        d_nce = abs(hard_loss(s_pos, ps, negs, plain) - nce_loss(s_pos, negs, plain))
        cfg = LossConfig(t=t, M=m, tau_plus=tau)
        d_deb = abs(hard_loss(s_pos, ps, negs, cfg) - debiased_loss(s_pos, ps, negs, LossConfig(t=t, M=m, tau_plus=tau, beta=3.0)))
        worst_nce, worst_deb = max(worst_nce, d_nce), max(worst_deb, d_deb)
        rows.append((b, d_nce, d_deb))
    ok = worst_nce < tol and worst_deb < tol
    return SuiteResult("equivalence", ok, ("batch", "nce_abs_diff", "debiased_abs_diff"), rows,
                       {"max_nce_diff": worst_nce, "max_debiased_diff": worst_deb, "tolerance": tol})


def suite_estimator(seed: int = 0, n_pops: int = 100, tol: float = 1e-10, **_) -> SuiteResult:
    """Tilted expectation by importance weights over the full support equals the enumerated oracle."""
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for p in range(n_pops):
        size = int(rng.integers(4, 101))
        pop = random_population(rng, size, int(rng.integers(2, 5)), int(rng.integers(2, 9)),
                                t=float(rng.uniform(0.5, 2.0)))
        i = int(rng.integers(size))
        beta = float(rng.uniform(0.0, 10.0))
        s = pop.scores(i)
        neg = (pop.labels != pop.labels[i])
        est = importance_weighted_expectation(s[neg], beta)
        exact = exact_conditional_expectation(pop, i, beta, "neg")
        err = abs(est - exact) / max(1.0, abs(exact))
        worst = max(worst, err)
        rows.append((p, size, beta, err))
    return SuiteResult("estimator", worst < tol, ("population", "size", "beta", "rel_err"), rows,
                       {"max_rel_err": worst, "tolerance": tol})


def suite_decomposition(seed: int = 0, n_pops: int = 100, tol: float = 1e-9, **_) -> SuiteResult:
    """Limit loss equals alignment + uniformity - 1/t^2 for arbitrary negative weightings."""
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for p in range(n_pops):
        t = float(rng.uniform(0.5, 2.0))
        pop = random_population(rng, int(rng.integers(4, 41)), int(rng.integers(2, 5)),
                                int(rng.integers(2, 9)), t=t)
        pairs = np.array(within_class_positives(pop))
        s_pos = np.einsum("ij,ij->i", pop.points[pairs[:, 0]], pop.points[pairs[:, 1]])
        beta = float(rng.uniform(0.0, 5.0))
        scores, weights = [], []
        for a in pairs[:, 0]:
            s = pop.scores(a)
            w = tilted_distribution(pop, s, beta, "all", exclude=int(a))
            keep = w > 0
            scores.append(s[keep])
            weights.append(w[keep])
        direct = asymptotic_loss(s_pos, scores, weights)
        split = (alignment_loss((pop.points[pairs[:, 0]], pop.points[pairs[:, 1]]))
                 + uniformity_loss(scores, weights) - 1.0 / t**2)
        err = abs(direct - split)
        worst = max(worst, err)
        rows.append((p, direct, split, err))
    return SuiteResult("decomposition", worst < tol, ("population", "direct", "decomposed", "abs_diff"), rows,
                       {"max_abs_diff": worst, "tolerance": tol})


def prop1_population(seed: int, pop_size: int = 200, classes: int = 4, d: int = 8) -> FinitePopulation:
    return random_population(np.random.default_rng(seed), pop_size, classes, d)


def gaps_decrease(gaps: Sequence[float]) -> bool:
    """Strictly decreasing until the gap reaches 0, then flat at 0."""
    for g1, g2 in zip(gaps, gaps[1:]):
        if not (g2 < g1 or g1 == g2 == 0.0):
            return False
    return True


def suite_prop1(seed: int = 0, beta_grid: Sequence[float] = DEFAULT_BETA_GRID, pop_size: int = 200,
                classes: int = 4, **_) -> SuiteResult:
    """Gap between the worst-case loss and the tilted limit loss shrinks as beta grows."""
    pop = prop1_population(seed, pop_size, classes)
    rows = prop1_report(pop, within_class_positives(pop), len(pop) - 1, beta_grid)
    gaps = [g for _, g in rows]
    ratio = gaps[-1] / gaps[0] if gaps[0] > 0 else None
    return SuiteResult("prop1", gaps_decrease(gaps), ("beta", "gap"), rows, {"last_over_first": ratio})


def suite_pu_mixture(seed: int = 0, beta_grid: Sequence[float] = DEFAULT_BETA_GRID, pop_size: int = 60,
                     classes: int = 3, tol: float = 1e-12, **_) -> SuiteResult:
    """Fixed-weight PU mixture residual: exact at beta = 0, reported (not asserted) for beta > 0."""
    pop = random_population(np.random.default_rng(seed), pop_size, classes, 6)
    rows = []
    for beta in beta_grid:
        rows.append((float(beta), max(pu_mixture_residual(pop, i, beta) for i in range(len(pop)))))
    at_zero = [r for b, r in rows if b == 0.0]
    ok = all(r < tol for r in at_zero)
    return SuiteResult("pu-mixture", ok, ("beta", "max_residual"), rows,
                       {"checked_beta0": bool(at_zero), "tolerance": tol})


def suite_variance(seed: int = 0, n_pops: int = 100, betas=(0.0, 1.0, 5.0), temps=(0.5, 1.0), **_) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for p in range(n_pops):
        size = int(rng.integers(6, 41))
        base = random_population(rng, size, int(rng.integers(2, 5)), int(rng.integers(2, 9)))
        i = int(rng.integers(size))
        if np.sum(base.labels == base.labels[i]) < 2:
            i = int(np.flatnonzero(np.bincount(base.labels)[base.labels] >= 2)[0])
        for t in temps:
            pop = FinitePopulation(base.points / t, base.labels, base.base_weights, t)
            for beta in betas:
                chk = variance_lemma_check(pop, i, beta)
                ok &= chk.holds
                rows.append((p, t, beta, chk.variance, chk.bound, int(chk.holds)))
    return SuiteResult("variance", bool(ok), ("population", "t", "beta", "variance", "bound", "holds"), rows)


MIN_OUTPUT_NORM = 0.1


def _conditioned(params, batch, cfg, kind) -> bool:
    """Encoder outputs away from the origin, and the clip / floor branch actually in play.

    Central differences carry truncation error ~ (h / |v|)^2 through the sphere
    projection, so near-zero outputs make any h = 1e-5 check meaningless.
    """
    v, _, _ = _mlp_forward(params, batch.stacked())
    if np.linalg.norm(v, axis=1).min() < MIN_OUTPUT_NORM:
        return False
    if kind not in ("clip", "floor"):
        return True
    _, scores, _ = _batch_scores(params, batch, cfg.loss.t)
    clamped, clip = kink_pattern(scores, cfg.loss)
    return any(clamped) if kind == "floor" else not all(clip)


def gradcheck_cases(seed: int, n: int = 20, max_tries: int = 1000):
    """Mixed (model, batch, config) triples covering clip-active, floor-active, NCE and linear models.

    Draws failing ``_conditioned`` are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    kinds = ["hard", "clip", "floor", "nce", "linear"]
    for c in range(n):
        kind = kinds[c % len(kinds)]
        for _ in range(max_tries):
            D, B = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            spec = LatentClassSpec.simplex(3, D, 3.0, aug_std=0.25 if kind == "floor" else 0.5)
            beta = float(rng.uniform(0.0, 5.0))
            tau = float(rng.uniform(0.0, 0.5))
            n_hidden = int(rng.integers(1, 3))
            hidden = () if kind == "linear" else tuple(int(h) for h in rng.integers(4, 17, size=n_hidden))
            if kind == "clip":
                # small tau+ so the clipped negatives are not all swamped by the floor
                loss = LossConfig(beta=beta, tau_plus=0.2 * tau, t=0.5, clip=(-2.0, 2.0))
            elif kind == "floor":
                loss = LossConfig(beta=beta, tau_plus=0.9)
            else:
                loss = LossConfig(beta=beta, tau_plus=tau, t=float(rng.uniform(0.5, 1.5)))
            cfg = TrainConfig(loss=loss, hidden_dims=hidden, embed_dim=int(rng.integers(2, 6)), batch_size=B,
                              objective="nce" if kind == "nce" else "hard")
            params = init_params(cfg.layer_dims(D), rng)
            # nudge biases so ReLUs start off exact zero crossings
            params = params.map(lambda a: a + 0.01 * rng.standard_normal(a.shape))
            batch = sample_batch(spec, B, rng)
            if _conditioned(params, batch, cfg, kind):
                break
        else:
            raise UsageError(f"could not draw a well-conditioned {kind} case")
        yield kind, params, batch, cfg, rng


def suite_gradcheck(seed: int = 0, n_cases: int = 20, h: float = 1e-5, tol: float = 1e-5,
                    linear_tol: float = 1e-6, precision: str = "extended", **_) -> SuiteResult:
    rows, ok = [], True
    for c, (kind, params, batch, cfg, rng) in enumerate(gradcheck_cases(seed, n_cases)):
        err = finite_diff_check(params, batch, cfg, h=h, rng=rng, precision=precision)
        limit = linear_tol if kind == "linear" else tol
        passed = err < limit
        ok &= passed
        rows.append((c, kind, float(err), limit, int(passed)))
    return SuiteResult("gradcheck", bool(ok), ("case", "kind", "max_rel_err", "tolerance", "pass"),
                       rows)


def suite_sampler(seed: int = 0, n_pops: int = 10, n_samples: int = 100_000, tol: float = 0.02, **_) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for p in range(n_pops):
        size = int(rng.integers(5, 51))
        pop = random_population(rng, size, int(rng.integers(2, 5)), int(rng.integers(2, 6)), uniform=bool(p % 2))
        i = int(rng.integers(size))
        beta = float(rng.uniform(0.0, 5.0))
        restrict = ("all", "diff_class", "same_class")[p % 3]
        cls = None if restrict == "all" else int(pop.labels[i])
        same_ok = restrict != "same_class" or np.sum(pop.labels == cls) >= 2
        if not same_ok:
            restrict, cls = "diff_class", int(pop.labels[i])
        s = pop.scores(i)
        q = tilted_distribution(pop, s, beta, restrict, cls=cls, exclude=i)
        draws = rejection_sample_tilted(pop, s, beta, restrict, rng, n_samples, cls=cls, exclude=i)
        tv = total_variation(empirical_law(draws, size), q)
        worst = max(worst, tv)
        rows.append((p, size, beta, restrict, tv))
    return SuiteResult("sampler", worst < tol, ("population", "size", "beta", "restrict", "tv"), rows,
                       {"max_tv": worst, "tolerance": tol})


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "equivalence": suite_equivalence,
    "estimator": suite_estimator,
    "decomposition": suite_decomposition,
    "prop1": suite_prop1,
    "pu-mixture": suite_pu_mixture,
    "variance": suite_variance,
    "gradcheck": suite_gradcheck,
    "sampler": suite_sampler,
}


def run_suite(name: str, **kw) -> SuiteResult:
    if name not in SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name](**{k: v for k, v in kw.items() if v is not None})
