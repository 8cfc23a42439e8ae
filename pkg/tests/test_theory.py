import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hardneg.errors import BoundInvalidError, HypothesisViolationError, InvalidConfigError, ShapeError
from hardneg.oracle import FinitePopulation, random_population, within_class_positives
from hardneg.sphere import Embedding
from hardneg.theory import (BoundInputs, SpherePacking, bound_check_experiment, generalization_bound,
                            packing_to_json, prototype_classifier, tammes_objective, tammes_solve,
                            variance_lemma_check, worst_case_limit_loss)

VAR_EXAMPLE = 0.10520982176469723541574647393108383861242372306992
VAR_BOUND = 3.6945280494653251136152137302875039065901577852759


def triangle(t=1.0):
    ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    return np.c_[np.cos(ang), np.sin(ang)] / t


def test_tammes_objective_examples():
    assert tammes_objective(SpherePacking(np.array([[1.0, 0], [-1.0, 0]]))) == pytest.approx(4.0)
    assert tammes_objective(SpherePacking(np.array([[1.0, 0], [1.0, 0]]))) == 0.0
    assert tammes_objective(SpherePacking(triangle())) == pytest.approx(3.0)
    assert tammes_objective(SpherePacking(triangle(2.0), t=2.0)) == pytest.approx(0.75)


def test_packing_validation():
    with pytest.raises(InvalidConfigError):
        SpherePacking(np.array([[2.0, 0], [-1.0, 0]]))
    with pytest.raises(InvalidConfigError):
        SpherePacking(triangle(), rho=[0.5, 0.5, 0.5])


@pytest.mark.parametrize("k,d,t,target,tol", [
    (2, 2, 1.0, 4.0, 1e-4), (2, 3, 1.0, 4.0, 1e-4), (2, 8, 1.0, 4.0, 1e-4),
    (3, 2, 1.0, 3.0, 1e-3), (4, 3, 1.0, 8 / 3, 1e-3), (2, 3, 2.0, 1.0, 1e-4), (3, 2, 0.5, 12.0, 4e-3),
])
def test_tammes_golden(k, d, t, target, tol):
    packing, _ = tammes_solve(k, d, t, restarts=20, rng=0)
    assert tammes_objective(packing) == pytest.approx(target, abs=tol)
    assert np.allclose(np.linalg.norm(packing.prototypes, axis=1), 1 / t)


def test_tammes_deterministic_and_monotone_in_restarts():
    a, seed = tammes_solve(5, 3, restarts=4, iters=300, rng=9)
    b, _ = tammes_solve(5, 3, restarts=4, iters=300, rng=9)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    more, _ = tammes_solve(5, 3, restarts=8, iters=300, rng=9)
    assert tammes_objective(more) >= tammes_objective(a)
    doc = json.loads(json.dumps(packing_to_json(a, seed)))
    assert doc["seed"] == 9 and len(doc["prototypes"]) == 5


def test_tammes_rejects_bad_input():
    with pytest.raises(InvalidConfigError):
        tammes_solve(1, 3)
    with pytest.raises(InvalidConfigError):
        tammes_solve(3, 1)


def test_prototype_classifier_examples():
    packing = SpherePacking(triangle())
    assert prototype_classifier(packing, packing.prototypes[1]) == 1
    mid = packing.prototypes[0] + packing.prototypes[1]
    assert prototype_classifier(packing, mid / np.linalg.norm(mid)) == 0
    near = packing.prototypes[2] + 0.1 * packing.prototypes[0]
    assert prototype_classifier(packing, near / np.linalg.norm(near)) == 2
    np.testing.assert_array_equal(prototype_classifier(packing, packing.prototypes), [0, 1, 2])
    with pytest.raises(ShapeError):
        prototype_classifier(packing, Embedding(np.array([0.5, 0.0]), 2.0, normalized=True))


def test_generalization_bound_examples():
    assert generalization_bound(BoundInputs(0.0, 2.0, 2, 1.0)) == 0.0
    assert generalization_bound(BoundInputs(0.01, 2.0, 2, 1.0)) == pytest.approx(0.0078125)
    with pytest.raises(BoundInvalidError):
        generalization_bound(BoundInputs(0.5, 1.0, 3, 1.0))


@given(st.floats(0, 0.05), st.floats(1.0, 2.0), st.integers(2, 5), st.floats(0.5, 2))
def test_bound_monotone_in_epsilon(eps, xi, k, t):
    lo, hi = BoundInputs(eps, xi, k, t), BoundInputs(eps * 1.5 + 1e-6, xi, k, t)
    if hi.valid:
        assert generalization_bound(lo) <= generalization_bound(hi)


def optimum_population(packing, per_class=3):
    labels = np.repeat(np.arange(packing.num_classes), per_class)
    return FinitePopulation(packing.prototypes[labels], labels, np.full(labels.size, 1 / labels.size),
                            packing.t)


def test_bound_at_optimum():
    packing = SpherePacking(triangle())
    pop = optimum_population(packing)
    rep = bound_check_experiment(pop, within_class_positives(pop), packing)
    assert rep.epsilon == 0.0 and rep.empirical_risk == 0.0 and rep.bound == 0.0 and rep.holds
    json.dumps(rep.to_dict())


def test_bound_small_perturbation_holds(rng):
    packing = SpherePacking(triangle())
    labels = np.repeat(np.arange(3), 6)
    pop = FinitePopulation.from_vectors(packing.prototypes[labels] + 0.01 * rng.standard_normal((18, 2)), labels)
    rep = bound_check_experiment(pop, within_class_positives(pop), packing)
    assert rep.valid and rep.holds


def test_bound_rejects_non_uniform_prior():
    packing = SpherePacking(triangle())
    labels = np.array([0, 0, 1, 2])
    pop = FinitePopulation(packing.prototypes[labels], labels, np.full(4, 0.25))
    with pytest.raises(HypothesisViolationError):
        bound_check_experiment(pop, within_class_positives(pop), packing)


def test_worst_case_limit_loss_at_optimum():
    packing = SpherePacking(np.array([[1.0, 0], [-1.0, 0]]))
    pop = optimum_population(packing)
    # alignment 0, worst-case uniformity -1, minus 1/t^2
    assert worst_case_limit_loss(pop) == pytest.approx(-2.0)


def test_variance_examples():
    # anchor e_0; same-class companions at scores 0 and 0.5, orthogonal to each other
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.5, 0, math.sqrt(0.75)], [-1.0, 0, 0]])
    pop = FinitePopulation(pts, [0, 0, 0, 1], np.full(4, 0.25))
    chk = variance_lemma_check(pop, 0, 0.0)
    assert chk.variance == pytest.approx(VAR_EXAMPLE, abs=1e-14)
    assert chk.bound == pytest.approx(VAR_BOUND, abs=1e-13)
    assert chk.holds
    same = FinitePopulation(np.array([[1.0, 0], [0.0, 1], [0.0, 1], [-1.0, 0]]), [0, 0, 0, 1], np.full(4, 0.25))
    flat = variance_lemma_check(same, 0, 2.0)
    assert flat.variance == 0.0 and flat.bound == 0.0 and flat.holds
    with pytest.raises(ShapeError):
        variance_lemma_check(pop, 0, 0.0, t=2.0)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 5.0]), st.sampled_from([0.5, 1.0]))
def test_variance_lemma_property(seed, beta, t):
    base = random_population(np.random.default_rng(seed), 12, 2, 3)
    pop = FinitePopulation(base.points / t, base.labels, base.base_weights, t)
    i = int(np.flatnonzero(np.bincount(pop.labels)[pop.labels] >= 2)[0])
    assert variance_lemma_check(pop, i, beta).holds
