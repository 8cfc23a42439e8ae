import numpy as np
import pytest

from hardneg.errors import InvalidConfigError, UsageError
from hardneg.synthdata import (LatentClassSpec, augment_positive, default_spec, make_finite_population,
                               read_population_csv, sample_batch, simplex_means, write_population_csv)


def test_simplex_means_equidistant():
    m = simplex_means(4, 10, 6.0)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    np.testing.assert_allclose(d[~np.eye(4, dtype=bool)], 6.0)
    with pytest.raises(InvalidConfigError):
        simplex_means(4, 3, 1.0)


def test_spec_validation():
    with pytest.raises(InvalidConfigError):
        LatentClassSpec(np.zeros((1, 3)))
    with pytest.raises(InvalidConfigError):
        LatentClassSpec.simplex(rho=[0.5, 0.5, 0.0, 0.0])
    with pytest.raises(InvalidConfigError):
        LatentClassSpec(np.zeros((2, 3)), within_std=0.0)


def test_zero_within_std_gives_means(rng):
    spec = LatentClassSpec.simplex(3, 5, 2.0, within_std=0.0)
    b = sample_batch(spec, 20, rng)
    np.testing.assert_array_equal(b.anchors, spec.class_means[b.labels])


def test_batch_deterministic():
    spec = default_spec()
    a = sample_batch(spec, 16, np.random.default_rng(3))
    b = sample_batch(spec, 16, np.random.default_rng(3))
    np.testing.assert_array_equal(a.stacked(), b.stacked())
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.stacked().shape == (32, spec.input_dim)


def test_class_frequencies(rng):
    spec = default_spec()
    n = 10_000
    freq = np.bincount(sample_batch(spec, n, rng).labels, minlength=4) / n
    se = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(freq - 0.25) < 3 * se)


def test_augment_examples(rng):
    spec = LatentClassSpec.simplex(aug_std=0.0)
    x = rng.standard_normal((5, spec.input_dim))
    np.testing.assert_array_equal(augment_positive(x, spec, rng), x)
    spec = LatentClassSpec.simplex(aug_std=0.1)
    x = np.zeros((10_000, spec.input_dim))
    d1 = augment_positive(x, spec, np.random.default_rng(1))
    np.testing.assert_array_equal(d1, augment_positive(x, spec, np.random.default_rng(1)))
    mean_norm = np.linalg.norm(d1, axis=1).mean()
    assert abs(mean_norm - 0.1 * np.sqrt(spec.input_dim)) < 0.05 * 0.1 * np.sqrt(spec.input_dim)


def test_true_positives_share_class_not_anchor(rng):
    spec = LatentClassSpec.simplex(true_positives=True)
    b = sample_batch(spec, 8, rng)
    assert not np.allclose(b.anchors, b.positives)


def test_finite_population_examples(rng):
    spec = LatentClassSpec.simplex(4, 6, 3.0, within_std=0.0)
    data = make_finite_population(spec, 4, rng)
    np.testing.assert_array_equal(np.sort(data.labels), np.arange(4))
    np.testing.assert_array_equal(data.inputs, spec.class_means[data.labels])
    assert data.base_weights.sum() == 1.0
    with pytest.raises(UsageError):
        make_finite_population(spec, 3, rng)


def test_population_csv_round_trip(tmp_path, rng):
    data = make_finite_population(default_spec(), 30, rng)
    path = tmp_path / "pop.csv"
    write_population_csv(data, path)
    back = read_population_csv(path)
    np.testing.assert_array_equal(back.inputs, data.inputs)
    np.testing.assert_array_equal(back.labels, data.labels)
    pop = back.to_population(t=0.5)
    assert np.allclose(np.linalg.norm(pop.points, axis=1), 2.0)


def test_read_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1,2\n")
    with pytest.raises(UsageError):
        read_population_csv(p)
