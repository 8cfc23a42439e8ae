"""Toy encoder training: ReLU MLP onto the 1/t sphere, manual backprop, Adam, beta annealing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, InvalidConfigError, ShapeError, UsageError
from .objectives import InBatchLayout, LossConfig, batch_loss_and_score_grads, batch_losses, kink_pattern
from .sphere import DEGENERATE_NORM, Embedding
from .synthdata import Batch, LatentClassSpec, sample_batch


@dataclass
class MlpParams:
    """Weights are stored (fan_in, fan_out) so a layer is ``h @ W + b``."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i}: incompatible input dimension")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InvalidConfigError("parameters must be finite")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], activation: str = "relu") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, layer_dims: Sequence[int], values) -> "MlpParams":
        values = np.asarray(values)
        values = values.astype(np.result_type(values.dtype, np.float64), copy=False)
        dims = list(layer_dims)
        shapes = [s for a, b in zip(dims[:-1], dims[1:]) for s in ((a, b), (b,))]
        expected = sum(int(np.prod(s)) for s in shapes)
        if values.ndim != 1 or values.size != expected:
            raise ShapeError(f"expected {expected} values for layer_dims {dims}, got {values.size}")
        arrays, pos = [], 0
        for shape in shapes:
            n = int(np.prod(shape))
            arrays.append(values[pos:pos + n].reshape(shape))
            pos += n
        return cls.from_arrays(arrays)

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        return MlpParams.from_arrays(
            [fn(a, *rest) for a, *rest in zip(self.arrays(), *(o.arrays() for o in others))], self.activation)


def init_params(layer_dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """He-normal weights, zero biases."""
    if len(layer_dims) < 2:
        raise InvalidConfigError("layer_dims needs an input and an output size")
    weights = [rng.standard_normal((a, b)) * math.sqrt(2.0 / a) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(b) for b in layer_dims[1:]]
    return MlpParams(weights, biases)


def params_to_json(params: MlpParams, t: float) -> dict:
    return {"layer_dims": params.layer_dims, "t": t, "values": params.flat().tolist()}


def params_from_json(doc: dict) -> tuple[MlpParams, float]:
    return MlpParams.from_flat(doc["layer_dims"], doc["values"]), float(doc["t"])


def load_params(path) -> tuple[MlpParams, float]:
    with open(path) as fh:
        return params_from_json(json.load(fh))


# -- forward / backward ----------------------------------------------------------

def _mlp_forward(params: MlpParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"inputs must be (n, {params.layer_dims[0]}), got {x.shape}")
    acts, pre = [x], []
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts, pre


def _project(v: np.ndarray, t: float):
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms <= DEGENERATE_NORM):
        raise DegenerateInputError("encoder output is (numerically) zero")
    return v / (t * norms), norms


def forward_embed(params: MlpParams, inputs, t: float) -> Embedding:
    """Batch of encoder outputs projected onto the 1/t sphere (rows of ``coords``)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    v, _, _ = _mlp_forward(params, x)
    z, _ = _project(v, t)
    return Embedding(z, t, normalized=True)


@lru_cache(maxsize=32)
def _layout(batch_size: int) -> InBatchLayout:
    return InBatchLayout.for_batch(batch_size)


def _batch_scores(params, batch: Batch, t):
    x = batch.stacked()
    v, acts, pre = _mlp_forward(params, x)
    z, norms = _project(v, t)
    layout = _layout(len(batch))
    return layout, layout.gather(z @ z.T), (v, z, norms, acts, pre)


def _check_loss_cfg(loss: LossConfig, batch_size: int):
    if loss.M != 1:
        raise InvalidConfigError("in-batch training uses the positive view as its single p+ sample (M = 1)")
    if loss.N is not None and loss.N != 2 * (batch_size - 1):
        raise InvalidConfigError(f"in-batch negatives give N = {2 * (batch_size - 1)}, config says {loss.N}")


def loss_and_grad(params: MlpParams, batch: Batch, config: "TrainConfig", beta: Optional[float] = None):
    """Batch loss and its gradient with respect to every parameter.

    ``beta`` overrides ``config.loss.beta`` (used by the annealing schedule).
    """
    loss_cfg = config.loss if beta is None else replace(config.loss, beta=beta)
    _check_loss_cfg(loss_cfg, len(batch))
    t = loss_cfg.t
    layout, scores, (v, z, norms, acts, pre) = _batch_scores(params, batch, t)
    loss, ds = batch_loss_and_score_grads(scores, loss_cfg, config.objective)
    dS = layout.scatter(ds.pos, ds.pos_samples, ds.negs)
    dz = (dS + dS.T) @ z
    # v -> v / (t |v|): tangent projection scaled by 1 / (t |v|)
    u = v / norms
    dv = (dz - u * np.sum(u * dz, axis=1, keepdims=True)) / (t * norms)

    grads_w, grads_b = [], []
    delta = dv
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
    return loss, MlpParams(grads_w[::-1], grads_b[::-1], params.activation)


def batch_loss(params: MlpParams, batch: Batch, config: "TrainConfig", beta: Optional[float] = None) -> float:
    return loss_and_grad(params, batch, config, beta)[0]


def _kinks(params, batch, config):
    layout, scores, (_, _, _, _, pre) = _batch_scores(params, batch, config.loss.t)
    relu = tuple(tuple((z > 0).ravel()) for z in pre)
    return relu, kink_pattern(scores, config.loss) if config.objective == "hard" else ()


def _oracle_loss(params, batch, config):
    # no float() cast: the mean keeps the dtype of the parameters
    _, scores, _ = _batch_scores(params, batch, config.loss.t)
    return np.mean(batch_losses(scores, config.loss, config.objective))


_ORACLE_DTYPES = {"double": np.float64, "extended": np.longdouble}


def finite_diff_check(params: MlpParams, batch: Batch, config: "TrainConfig", h: float = 1e-5,
                      n_coords: int = 200, rng: Optional[np.random.Generator] = None,
                      precision: str = "extended") -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient is always computed in float64. The difference
    quotients are evaluated in ``precision``: with plain doubles the
    cancellation noise (about eps * |L| / h, ~1e-11 at h = 1e-5) swamps
    coordinates whose true gradient is below ~1e-6, so the oracle defaults to
    extended precision. Coordinates whose +/- h perturbation flips a ReLU,
    clip or floor branch are skipped. All coordinates are used when the model
    has fewer than ``n_coords``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise UsageError("h must lie in [1e-7, 1e-3]")
    if precision not in _ORACLE_DTYPES:
        raise UsageError(f"precision must be one of {sorted(_ORACLE_DTYPES)}")
    dtype = _ORACLE_DTYPES[precision]
    rng = np.random.default_rng(0) if rng is None else rng
    dims = params.layer_dims
    _, g = loss_and_grad(params, batch, config)
    analytic = g.flat()
    base = params.flat().astype(dtype)
    xb = Batch(batch.anchors.astype(dtype), batch.positives.astype(dtype), batch.labels)
    ref = _kinks(MlpParams.from_flat(dims, base), xb, config)
    worst, checked = 0.0, 0
    for i in rng.permutation(base.size):
        vals = []
        for sign in (1, -1):
            p = base.copy()
            p[i] += sign * dtype(h)
            pp = MlpParams.from_flat(dims, p)
            if _kinks(pp, xb, config) != ref:
                break
            vals.append(_oracle_loss(pp, xb, config))
        if len(vals) < 2:
            continue
        numeric = float((vals[0] - vals[1]) / (2 * dtype(h)))
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
        checked += 1
        if checked >= n_coords:
            break
    if checked == 0:
        raise UsageError("every coordinate straddles a kink; cannot check gradients")
    return float(worst)


# -- optimizer and schedule ------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    steps_per_epoch: int = 8
    lr: float = 0.001
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    anneal_ell: Optional[int] = None
    eval_every: int = 1
    seed: int = 0
    hidden_dims: tuple = (64,)
    embed_dim: int = 8
    objective: str = "hard"
    eval_size: int = 200
    knn_k: int = 1
    knn_weighted: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.steps_per_epoch < 1 or self.eval_every < 1:
            raise InvalidConfigError("epochs, steps_per_epoch, eval_every >= 1 and batch_size >= 2 required")
        if self.anneal_ell is not None and not 1 <= self.anneal_ell <= self.epochs:
            raise InvalidConfigError("anneal_ell must satisfy 1 <= ell <= epochs")
        if self.objective not in ("hard", "nce"):
            raise InvalidConfigError(f"unknown objective {self.objective!r}")
        if not (self.lr > 0 and self.weight_decay >= 0 and self.adam_eps > 0):
            raise InvalidConfigError("lr > 0, weight_decay >= 0, adam_eps > 0 required")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def layer_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden_dims, self.embed_dim]


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        zero = params.map(np.zeros_like)
        return cls(zero, params.map(np.zeros_like), 0)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam with weight decay applied multiplicatively before the update."""
    if params.layer_dims != grads.layer_dims or params.layer_dims != state.m.layer_dims:
        raise ShapeError("params, grads and optimizer state must be congruent")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    step = state.step + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1, c2 = 1 - b1**step, 1 - b2**step
    decay = 1.0 - cfg.lr * cfg.weight_decay
    new = params.map(lambda p, m_, v_: p * decay - cfg.lr * (m_ / c1) / (np.sqrt(v_ / c2) + cfg.adam_eps), m, v)
    return new, AdamState(m, v, step)


def anneal_beta(beta0: float, ell: int, epochs: int, epoch: int) -> float:
    """Piecewise-constant schedule dropping by beta0/ell once every epochs/ell epochs."""
    if not 0 <= epoch < epochs or not 1 <= ell <= epochs:
        raise UsageError("need 0 <= epoch < epochs and 1 <= ell <= epochs")
    k = (epoch * ell) // epochs
    return max(beta0 - k * beta0 / ell, 0.0)


# -- evaluation ------------------------------------------------------------------

def _coords(e) -> np.ndarray:
    return np.atleast_2d(e.coords if isinstance(e, Embedding) else np.asarray(e, dtype=float))


def knn_eval(reference_embs, reference_labels, query_embs, query_labels, k: int = 200,
             weighted: bool = True) -> float:
    """Accuracy of a k-nearest-neighbour vote by cosine similarity.

    With ``weighted`` each neighbour votes with its raw cosine similarity;
    otherwise every vote counts 1. Equal vote totals go to the smallest class.
    """
    ref, qry = _coords(reference_embs), _coords(query_embs)
    ref_lab = np.asarray(reference_labels).reshape(-1)
    qry_lab = np.asarray(query_labels).reshape(-1)
    if ref.shape[0] != ref_lab.size or qry.shape[0] != qry_lab.size:
        raise ShapeError("labels must align with embeddings")
    if not 1 <= k <= ref.shape[0]:
        raise UsageError(f"k={k} must lie in [1, {ref.shape[0]}]")
    classes, ref_idx = np.unique(ref_lab, return_inverse=True)
    ref_u = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    qry_u = qry / np.linalg.norm(qry, axis=1, keepdims=True)
    sims = qry_u @ ref_u.T
    nbrs = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    w = np.take_along_axis(sims, nbrs, axis=1) if weighted else np.ones(nbrs.shape)
    votes = np.zeros((qry.shape[0], classes.size))
    np.add.at(votes, (np.repeat(np.arange(qry.shape[0]), k), ref_idx[nbrs].ravel()), w.ravel())
    pred = classes[np.argmax(votes, axis=1)]
    return float(np.mean(pred == qry_lab))


# -- training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    loss: float
    accuracy: float


def _eval_split(spec: LatentClassSpec, n: int, rng: np.random.Generator):
    labels = rng.choice(spec.num_classes, size=n, p=spec.rho)
    x = spec.class_means[labels] + spec.within_std * rng.standard_normal((n, spec.input_dim))
    return x, labels


def train_run(cfg: TrainConfig, data_spec: LatentClassSpec,
              rng: Union[np.random.Generator, int, None] = None) -> tuple[MlpParams, list[HistoryRow]]:
    """Train on freshly sampled batches; evaluate kNN accuracy every ``eval_every`` epochs.

    The rng stream is consumed in a fixed order (init, eval sets, batches), so
    identical seeds give bitwise-identical histories.
    """
    if rng is None:
        rng = cfg.seed
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    t = cfg.loss.t
    params = init_params(cfg.layer_dims(data_spec.input_dim), rng)
    ref_x, ref_y = _eval_split(data_spec, cfg.eval_size, rng)
    qry_x, qry_y = _eval_split(data_spec, cfg.eval_size, rng)
    state = AdamState.zeros_like(params)
    history = []
    for epoch in range(cfg.epochs):
        beta = cfg.loss.beta
        if cfg.anneal_ell is not None:
            beta = anneal_beta(cfg.loss.beta, cfg.anneal_ell, cfg.epochs, epoch)
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(data_spec, cfg.batch_size, rng)
            loss, grads = loss_and_grad(params, batch, cfg, beta)
            params, state = adam_step(params, grads, state, cfg)
            losses.append(loss)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            acc = knn_eval(forward_embed(params, ref_x, t), ref_y, forward_embed(params, qry_x, t), qry_y,
                           k=cfg.knn_k, weighted=cfg.knn_weighted)
            history.append(HistoryRow(epoch + 1, float(np.mean(losses)), acc))
    return params, history


def epochs_to_accuracy(history: Sequence[HistoryRow], threshold: float) -> Optional[int]:
    for row in history:
        if row.accuracy >= threshold:
            return row.epoch
    return None
