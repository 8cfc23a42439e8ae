"""``hardneg`` command line: train, verify, tammes, bound, histogram, sweep-beta, sample.

Exit codes: 0 pass, 1 check failure, 2 usage or config error. Data goes to
files under ``--out``; only diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict, fields
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import HardNegError, HypothesisViolationError, UsageError
from .objectives import LossConfig
from .oracle import FinitePopulation, within_class_positives, write_csv
from .synthdata import (LatentClassSpec, make_finite_population, read_population_csv, simplex_means,
                        write_population_csv)
from .theory import SpherePacking, bound_check_experiment, packing_to_json, tammes_objective, tammes_solve
from .trainer import (TrainConfig, epochs_to_accuracy, forward_embed, load_params, params_to_json,
                      train_run)
from .verify import SUITES, run_suite

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIG = {
    "loss": {"beta": 1.0, "tau_plus": 0.25, "t": 1.0},
    "train": {"epochs": 60},
    "data": {"num_classes": 4, "input_dim": 16, "separation": 6.0, "within_std": 1.0, "aug_std": 2.0,
             "rho": None, "true_positives": False},
}
_DATA_KEYS = set(DEFAULT_CONFIG["data"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# -- config ----------------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) - {"loss", "train", "data"}:
        raise UsageError("config must be an object with sections loss, train, data")
    return _merge(DEFAULT_CONFIG, doc)


def set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise UsageError(f"{dotted}: {key} is not a section")
    node[leaf] = value


def _parse_assignment(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects path=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _build(cls, section: dict, name: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {name} keys: {', '.join(sorted(unknown))}")
    return cls(**section, **extra)


def resolve(cfg: dict) -> tuple[LossConfig, TrainConfig, LatentClassSpec]:
    loss_sec = dict(cfg.get("loss", {}))
    if loss_sec.get("clip") is not None:
        loss_sec["clip"] = tuple(loss_sec["clip"])
    loss = _build(LossConfig, loss_sec, "loss")
    train_sec = dict(cfg.get("train", {}))
    if "hidden_dims" in train_sec:
        train_sec["hidden_dims"] = tuple(train_sec["hidden_dims"])
    train = _build(TrainConfig, train_sec, "train", loss=loss)
    data = dict(cfg.get("data", {}))
    unknown = set(data) - _DATA_KEYS
    if unknown:
        raise UsageError(f"unknown data keys: {', '.join(sorted(unknown))}")
    means = simplex_means(int(data["num_classes"]), int(data["input_dim"]), float(data["separation"]))
    spec = LatentClassSpec(means, within_std=float(data["within_std"]), aug_std=float(data["aug_std"]),
                           rho=data.get("rho"), t=loss.t, true_positives=bool(data["true_positives"]))
    return loss, train, spec


def _plain(obj):
    """JSON-safe copy of a config structure."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def resolved_dict(loss: LossConfig, train: TrainConfig, data: dict) -> dict:
    t = asdict(train)
    t.pop("loss")
    return _plain({"loss": asdict(loss), "train": t, "data": data})


# -- output ----------------------------------------------------------------------

def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_plain(doc), indent=2, allow_nan=False) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        write_csv(header, rows, fh)


def write_manifest(out: Path, command: str, config, seed, outputs: Sequence[Path], outcome: str,
                   **extra) -> Path:
    doc = {"command": command, "config": config, "seed": seed,
           "outputs": [str(p) for p in outputs], "outcome": outcome}
    doc.update(extra)
    path = out / "manifest.json"
    _write_json(path, doc)
    return path


def _grid(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}; expected comma-separated numbers") from None
    if not vals:
        raise UsageError("grid is empty")
    return vals


# -- commands --------------------------------------------------------------------

def _train_cfg(args) -> dict:
    cfg = load_config(args.config)
    for flag, path in (("beta", "loss.beta"), ("tau_plus", "loss.tau_plus"), ("epochs", "train.epochs"),
                       ("seed", "train.seed"), ("anneal_ell", "train.anneal_ell")):
        value = getattr(args, flag, None)
        if value is not None:
            set_dotted(cfg, path, value)
    for assignment in getattr(args, "set", None) or []:
        set_dotted(cfg, *_parse_assignment(assignment))
    return cfg


def cmd_train(args) -> int:
    cfg = _train_cfg(args)
    loss, train, spec = resolve(cfg)
    out = _out_dir(args.out)
    params, history = train_run(train, spec, train.seed)
    hist_path, params_path = out / "history.csv", out / "params.json"
    _write_rows(hist_path, ("epoch", "loss", "accuracy"), [(h.epoch, h.loss, h.accuracy) for h in history])
    _write_json(params_path, params_to_json(params, loss.t))
    write_manifest(out, "train", resolved_dict(loss, train, cfg["data"]), train.seed,
                   [hist_path, params_path], "pass",
                   final_accuracy=history[-1].accuracy, epochs_to_90=epochs_to_accuracy(history, 0.9))
    return EXIT_PASS


def cmd_sample(args) -> int:
    cfg = _train_cfg(args)
    loss, _, spec = resolve(cfg)
    out = _out_dir(args.out)
    data = make_finite_population(spec, args.size, np.random.default_rng(args.seed))
    path = out / "population.csv"
    write_population_csv(data, path)
    write_manifest(out, "sample", _plain(cfg["data"]), args.seed, [path], "pass")
    return EXIT_PASS


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    kw = {"seed": args.seed, "pop_size": args.pop_size, "classes": args.classes}
    if args.beta_grid is not None:
        kw["beta_grid"] = _grid(args.beta_grid)
    res = run_suite(args.suite, **kw)
    out = _out_dir(args.out)
    csv_path = out / f"{args.suite}.csv"
    _write_rows(csv_path, res.header, res.rows)
    outcome = "pass" if res.passed else "fail"
    write_manifest(out, "verify", {k: v for k, v in kw.items() if v is not None} | {"suite": args.suite},
                   args.seed, [csv_path], outcome, summary=res.summary)
    if not res.passed:
        print(f"verify {args.suite}: FAIL", file=sys.stderr)
    return EXIT_PASS if res.passed else EXIT_FAIL


def cmd_tammes(args) -> int:
    packing, seed = tammes_solve(args.classes, args.dim, args.t, restarts=args.restarts, iters=args.iters,
                                 rng=args.seed)
    out = _out_dir(args.out)
    path = out / "tammes.json"
    _write_json(path, packing_to_json(packing, seed))
    cfg = {"classes": args.classes, "dim": args.dim, "t": args.t, "restarts": args.restarts, "iters": args.iters}
    write_manifest(out, "tammes", cfg, seed, [path], "pass")
    return EXIT_PASS


@lru_cache(maxsize=None)
def _packing(k: int, d: int, t: float, restarts: int, iters: int) -> SpherePacking:
    return tammes_solve(k, d, t, restarts=restarts, iters=iters, rng=0)[0]


def random_bound_config(rng: np.random.Generator) -> dict:
    """A small balanced population scattered around a rotated optimal packing."""
    k = int(rng.integers(2, 5))
    return {
        "num_classes": k,
        "dim": int(rng.integers(max(2, k - 1), 6)),
        "t": float(rng.choice([0.5, 1.0, 2.0])),
        "per_class": int(rng.integers(3, 11)),
        "noise": float(rng.uniform(0.0, 0.08)),
        "seed": int(rng.integers(0, 2**31 - 1)),
    }


def bound_population(cfg: dict, packing: SpherePacking) -> FinitePopulation:
    rng = np.random.default_rng(cfg["seed"])
    k, d, t, m = cfg["num_classes"], cfg["dim"], cfg["t"], cfg["per_class"]
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    centers = (packing.prototypes * t) @ rot
    labels = np.repeat(np.arange(k), m)
    vecs = centers[labels] + cfg["noise"] * rng.standard_normal((k * m, d))
    rho = cfg.get("rho")
    w = None if rho is None else np.asarray(rho, dtype=float)[labels] / m
    return FinitePopulation.from_vectors(vecs, labels, t, w)


def run_bound_config(cfg: dict, restarts: int, iters: int) -> dict:
    rho = cfg.get("rho")
    if rho is not None and np.ptp(np.asarray(rho, dtype=float)) > 1e-12:
        raise HypothesisViolationError("non-uniform class prior")
    packing = _packing(cfg["num_classes"], cfg["dim"], float(cfg["t"]), restarts, iters)
    pop = bound_population(cfg, packing)
    report = bound_check_experiment(pop, within_class_positives(pop), packing)
    return {"config": cfg, "tammes_objective": tammes_objective(packing), **report.to_dict()}


def cmd_bound(args) -> int:
    """Explicit configurations from ``--config-file``, or random draws until ``--configs`` are valid."""
    reports, skipped, configs = [], [], []
    if args.config_file is not None:
        try:
            configs = json.loads(Path(args.config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read {args.config_file}: {exc}") from None
        if not isinstance(configs, list):
            raise UsageError("bound config file must hold a JSON array")
        for i, cfg in enumerate(configs):
            try:
                reports.append(run_bound_config(cfg, args.restarts, args.iters))
            except HypothesisViolationError as exc:
                warn(f"configuration {i} skipped: {exc}")
                skipped.append({"index": i, "reason": str(exc)})
            except (KeyError, TypeError) as exc:
                raise UsageError(f"configuration {i} is malformed: {exc}") from None
    else:
        if args.configs < 1:
            raise UsageError("--configs must be >= 1")
        rng = np.random.default_rng(args.seed)
        for _ in range(50 * args.configs):
            cfg = random_bound_config(rng)
            configs.append(cfg)
            reports.append(run_bound_config(cfg, args.restarts, args.iters))
            if sum(r["valid"] for r in reports) == args.configs:
                break
        else:
            warn(f"only {sum(r['valid'] for r in reports)} valid configurations found")
    ok = all(r["holds"] for r in reports if r["valid"])
    out = _out_dir(args.out)
    path = out / "bound.json"
    _write_json(path, reports)
    n_valid = sum(r["valid"] for r in reports)
    write_manifest(out, "bound", {"configs": configs, "restarts": args.restarts, "iters": args.iters},
                   args.seed, [path], "pass" if ok else "fail", valid=n_valid, skipped=skipped)
    return EXIT_PASS if ok else EXIT_FAIL


def pair_histogram(points: np.ndarray, labels: np.ndarray, t: float, bins: int):
    """Counts of same-label and different-label pair scores over uniform bins on [-1/t^2, 1/t^2]."""
    bound = 1.0 / t**2
    iu, ju = np.triu_indices(labels.size, k=1)
    s = np.clip(np.einsum("ij,ij->i", points[iu], points[ju]), -bound, bound)
    same = labels[iu] == labels[ju]
    edges = np.linspace(-bound, bound, bins + 1)
    same_c = np.histogram(s[same], edges)[0]
    diff_c = np.histogram(s[~same], edges)[0]
    return edges, same_c, diff_c


def histogram_intersection(same_c: np.ndarray, diff_c: np.ndarray) -> Optional[float]:
    if same_c.sum() == 0 or diff_c.sum() == 0:
        return None
    return float(np.minimum(same_c / same_c.sum(), diff_c / diff_c.sum()).sum())


def cmd_histogram(args) -> int:
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    try:
        params, t = load_params(args.params)
        data = read_population_csv(args.data)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read inputs: {exc}") from None
    emb = forward_embed(params, data.inputs, t)
    edges, same_c, diff_c = pair_histogram(emb.coords, data.labels, t, args.bins)
    out = _out_dir(args.out)
    path = out / "histogram.csv"
    _write_rows(path, ("bin_lo", "bin_hi", "same_count", "diff_count"),
                [(float(lo), float(hi), int(a), int(b)) for lo, hi, a, b in zip(edges[:-1], edges[1:], same_c, diff_c)])
    write_manifest(out, "histogram", {"params": args.params, "data": args.data, "bins": args.bins, "t": t},
                   None, [path], "pass", histogram_intersection=histogram_intersection(same_c, diff_c))
    return EXIT_PASS


def cmd_sweep_beta(args) -> int:
    grid = _grid(args.beta_grid)
    unique = list(dict.fromkeys(grid))
    if len(unique) < len(grid):
        warn("duplicate beta values removed from grid")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = _train_cfg(args)
    if args.true_positives:
        set_dotted(cfg, "data.true_positives", True)
    mode = "true_positives" if args.true_positives else "standard"
    if args.anneal is not None:
        set_dotted(cfg, "train.anneal_ell", args.anneal)
        mode += "+anneal"
    rows = []
    base_seed = int(cfg["train"].get("seed", 0))
    for beta in unique:
        cell = copy.deepcopy(cfg)
        set_dotted(cell, "loss.beta", beta)
        for j in range(args.seeds):
            seed = base_seed + j
            set_dotted(cell, "train.seed", seed)
            _, train, spec = resolve(cell)
            _, history = train_run(train, spec, seed)
            rows.append((beta, mode, seed, history[-1].accuracy))
    out = _out_dir(args.out)
    path = out / "sweep.csv"
    _write_rows(path, ("beta", "mode", "seed", "final_accuracy"), rows)
    loss, train, _ = resolve(cfg)
    write_manifest(out, "sweep-beta", resolved_dict(loss, train, cfg["data"]) | {"beta_grid": unique},
                   base_seed, [path], "pass")
    return EXIT_PASS


# -- parser ----------------------------------------------------------------------

def _add_train_flags(p, epochs=True):
    p.add_argument("--config", help="JSON config with loss / train / data sections")
    p.add_argument("--tau-plus", dest="tau_plus", type=float)
    if epochs:
        p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config field by dotted path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hardneg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the toy encoder")
    _add_train_flags(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--anneal-ell", dest="anneal_ell", type=int)
    p.add_argument("--out", default="out/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write a labeled synthetic population CSV")
    _add_train_flags(p, epochs=False)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--out", default="out/sample")
    p.set_defaults(func=cmd_sample, seed=0)

    p = sub.add_parser("verify", help="run a numerical verification suite")
    p.add_argument("--suite", required=True, help=" | ".join(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta-grid", dest="beta_grid")
    p.add_argument("--pop-size", dest="pop_size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--out", default="out/verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tammes", help="solve the prototype packing problem")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/tammes")
    p.set_defaults(func=cmd_tammes)

    p = sub.add_parser("bound", help="check the prototype 1-NN risk bound on random configurations")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config-file", dest="config_file", help="JSON array of explicit configurations")
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--out", default="out/bound")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("histogram", help="same/different-label pair score histogram")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--out", default="out/histogram")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("sweep-beta", help="final accuracy across a beta grid")
    _add_train_flags(p)
    p.add_argument("--beta-grid", dest="beta_grid", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--true-positives", dest="true_positives", action="store_true")
    p.add_argument("--anneal", type=int, metavar="ELL", help="anneal beta to zero in ELL steps")
    p.add_argument("--out", default="out/sweep")
    p.set_defaults(func=cmd_sweep_beta)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return EXIT_PASS if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HardNegError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
