"""Synthetic latent-class data: Gaussian classes, augmented positive pairs, finite populations."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfigError, ShapeError, UsageError
from .oracle import FinitePopulation


def simplex_means(num_classes: int, input_dim: int, separation: float) -> np.ndarray:
    """Regular simplex vertices in the first ``num_classes`` coordinates, pairwise distance ``separation``."""
    if input_dim < num_classes:
        raise InvalidConfigError("simplex means need input_dim >= num_classes")
    means = np.zeros((num_classes, input_dim))
    means[:, :num_classes] = np.eye(num_classes) - 1.0 / num_classes
    return means * (separation / np.sqrt(2.0))


@dataclass(frozen=True)
class LatentClassSpec:
    class_means: np.ndarray
    within_std: float = 1.0
    # aug_std above within_std keeps augmented positives about as spread as the
    # class itself, so a positive view behaves like a draw from the class.
    aug_std: float = 2.0
    rho: Optional[np.ndarray] = None
    t: float = 1.0
    true_positives: bool = False

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.class_means, dtype=float))
        k = means.shape[0]
        if k < 2:
            raise InvalidConfigError("need at least two classes")
        rho = np.full(k, 1.0 / k) if self.rho is None else np.asarray(self.rho, dtype=float)
        if rho.shape != (k,) or np.any(rho <= 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise InvalidConfigError("rho must be a positive probability vector, one entry per class")
        if self.within_std < 0 or self.aug_std < 0 or not self.t > 0:
            raise InvalidConfigError("std parameters must be >= 0 and t > 0")
        if self.within_std == 0 and np.unique(means, axis=0).shape[0] < k:
            raise InvalidConfigError("class means must be distinct when within_std = 0")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def simplex(cls, num_classes: int = 4, input_dim: int = 16, separation: float = 6.0, **kw) -> "LatentClassSpec":
        return cls(simplex_means(num_classes, input_dim, separation), **kw)

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.class_means.shape[1]


@dataclass(frozen=True)
class Batch:
    """Anchors and their positives; negatives are the other 2(B - 1) rows of the stacked views."""

    anchors: np.ndarray
    positives: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape or self.anchors.shape[0] != self.labels.size:
            raise ShapeError("anchors, positives and labels must align")
        if self.anchors.shape[0] < 2:
            raise ShapeError("a batch needs at least two items")

    def __len__(self):
        return self.labels.size

    def stacked(self) -> np.ndarray:
        return np.vstack([self.anchors, self.positives])


def default_spec(**kw) -> LatentClassSpec:
    """Four well-separated classes in 16 dimensions."""
    return LatentClassSpec.simplex(**kw)


def _draw(spec: LatentClassSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((labels.size, spec.input_dim))
    return spec.class_means[labels] + spec.within_std * noise


def augment_positive(x, spec: LatentClassSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive isotropic Gaussian perturbation; the latent class is untouched."""
    x = np.asarray(x, dtype=float)
    if spec.aug_std == 0:
        return x.copy()
    return x + spec.aug_std * rng.standard_normal(x.shape)


def sample_batch(spec: LatentClassSpec, batch_size: int, rng: np.random.Generator) -> Batch:
    if batch_size < 2:
        raise UsageError("batch_size must be >= 2")
    labels = rng.choice(spec.num_classes, size=batch_size, p=spec.rho)
    anchors = _draw(spec, labels, rng)
    if spec.true_positives:
        positives = _draw(spec, labels, rng)
    else:
        positives = augment_positive(anchors, spec, rng)
    return Batch(anchors, positives, labels)


@dataclass(frozen=True)
class LabeledInputs:
    """Raw input vectors with labels and base weights, ready to be embedded."""

    inputs: np.ndarray
    labels: np.ndarray
    base_weights: np.ndarray

    def __len__(self):
        return self.labels.size

    def to_population(self, t: float = 1.0, embed: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> FinitePopulation:
        """Embed with ``embed`` (inputs -> points on the 1/t sphere) or by direct normalization."""
        if embed is None:
            return FinitePopulation.from_vectors(self.inputs, self.labels, t, self.base_weights)
        return FinitePopulation(embed(self.inputs), self.labels, self.base_weights, t)


def make_finite_population(spec: LatentClassSpec, size: int, rng: np.random.Generator,
                           max_tries: int = 10_000) -> LabeledInputs:
    """Draw ``size`` labeled inputs with uniform base mass, resampling labels until every class appears."""
    k = spec.num_classes
    if size < k:
        raise UsageError(f"size {size} < num_classes {k}")
    for _ in range(max_tries):
        labels = rng.choice(k, size=size, p=spec.rho)
        if np.unique(labels).size == k:
            break
    else:
        raise UsageError("could not draw every class; increase size")
    return LabeledInputs(_draw(spec, labels, rng), labels, np.full(size, 1.0 / size))


def write_population_csv(data: LabeledInputs, path) -> None:
    d = data.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x_{j}" for j in range(d)])
        for lab, row in zip(data.labels, data.inputs):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_population_csv(path) -> LabeledInputs:
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[0] != "label":
            raise UsageError(f"{path}: expected a 'label,x_0,...' header")
        rows = [row for row in r if row]
    if not rows:
        raise UsageError(f"{path}: no data rows")
    labels = np.array([int(row[0]) for row in rows])
    inputs = np.array([[float(v) for v in row[1:]] for row in rows])
    return LabeledInputs(inputs, labels, np.full(labels.size, 1.0 / labels.size))
