"""Labeled-fraction x alpha sweeps producing a results table and a curve file.

For each labeled fraction the training set is split once; a supervised
baseline is trained on the labeled rows and the joint model once per alpha
candidate.  The alpha with the best validation accuracy (ties: smallest
alpha) is then scored on the test set; test data plays no part in selection.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import CollapseMap, StackedDataset, split_labels
from .errors import ConfigError
from .evaluation import evaluate, predict
from .model import ModelParams, ModelShape, init_params
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.01, 0.03, 0.05, 0.10, 0.20, 0.30)
TABLE_COLUMNS = ("pct", "count", "nn_valid_acc", "nn_test_acc", "sssae_valid_acc", "sssae_test_acc", "alpha")
CURVE_COLUMNS = ("fraction", "nn_valid_acc", "nn_test_acc", "sssae_valid_acc", "sssae_test_acc")
RUN_COLUMNS = ("fraction", "method", "alpha", "seed", "epochs", "best_epoch", "valid_acc", "status")


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed for a sub-run identified by ``parts``."""
    key = repr((int(master),) + tuple(float(p) if isinstance(p, (int, float)) else str(p) for p in parts))
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


@dataclass
class ExperimentSpec:
    train: StackedDataset
    valid: StackedDataset
    test: StackedDataset
    cmap: CollapseMap
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    alphas: dict[float, tuple[float, ...]] | tuple[float, ...] = (1.0,)
    config: TrainConfig = field(default_factory=TrainConfig)
    baseline_config: TrainConfig = field(default_factory=lambda: TrainConfig(corruption_rate=0.0))
    baseline_epochs: int | None = None  # None: match the joint model's update count
    hidden_dim: int = 10000
    baseline_hidden_dim: int = 2000
    num_classes: int = 48
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.fractions:
            raise ConfigError("no labeled fractions given")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"labeled fraction {f} outside (0, 1]")
            if not self.alphas_for(f):
                raise ConfigError(f"no alpha candidates for fraction {f}")

    def alphas_for(self, fraction: float) -> tuple[float, ...]:
        if isinstance(self.alphas, dict):
            return tuple(self.alphas.get(fraction, ()))
        return tuple(self.alphas)


@dataclass
class FractionResult:
    fraction: float
    labeled_count: int
    alpha_valid: dict[float, float]
    best_alpha: float
    nn_valid: float
    nn_test: float
    sssae_valid: float
    sssae_test: float
    failures: list[str] = field(default_factory=list)


@dataclass
class SweepResult:
    rows: list[FractionResult]
    runs: list[dict]

    @property
    def failed(self) -> bool:
        return any(r["status"] != "ok" for r in self.runs)


def collapsed_accuracy(cmap: CollapseMap):
    def score(params: ModelParams, ds: StackedDataset) -> float:
        return evaluate(predict(params, ds), ds.eval_labels(), cmap).frame_accuracy_collapsed
    return score


def matched_epochs(joint_epochs: int, n_total: int, joint_batch: int, n_labeled: int, batch: int) -> int:
    """Epochs over the labeled subset giving as many SGD updates as the joint run."""
    steps = joint_epochs * math.ceil(n_total / joint_batch)
    return max(1, math.ceil(steps / math.ceil(n_labeled / batch)))


def _run_job(job: dict) -> dict:
    """One training run; module-level so it can cross a process boundary."""
    spec: ExperimentSpec = job["spec"]
    ds: StackedDataset = job["train"]
    score = collapsed_accuracy(spec.cmap)
    out = {k: job[k] for k in ("fraction", "method", "alpha", "seed")}
    try:
        if job["method"] == "nn":
            shape = ModelShape(ds.input_dim, spec.baseline_hidden_dim, spec.num_classes)
            cfg = job["config"]
            params, tlog = train(init_params(shape, cfg.seed), ds.labeled_subset(), spec.valid, cfg,
                                 mode="classifier", score=score)
        else:
            shape = ModelShape(ds.input_dim, spec.hidden_dim, spec.num_classes)
            cfg = job["config"]
            params, tlog = train(init_params(shape, cfg.seed), ds, spec.valid, cfg, score=score)
        out.update(epochs=cfg.epochs, best_epoch=tlog.best_epoch, valid_acc=tlog.best_valid_acc,
                   params=params, status="ok")
    except Exception as exc:  # recorded, sweep continues
        log.error("%s run failed (fraction=%s alpha=%s): %s", job["method"], job["fraction"], job["alpha"], exc)
        out.update(epochs=job["config"].epochs, best_epoch=-1, valid_acc=float("nan"), params=None,
                   status=f"failed: {type(exc).__name__}: {exc}")
    return out


def run_sweep(spec: ExperimentSpec) -> SweepResult:
    jobs = []
    splits = {}
    for f in sorted(spec.fractions):
        ds = split_labels(spec.train, f, derive_seed(spec.seed, "split", f))
        splits[f] = ds
        n_lab = ds.num_labeled
        nn_epochs = spec.baseline_epochs
        if nn_epochs is None:
            nn_epochs = matched_epochs(spec.config.epochs, len(ds), spec.config.batch_size,
                                       n_lab, spec.baseline_config.batch_size)
        nn_seed = derive_seed(spec.seed, "nn", f)
        decay = round(nn_epochs * spec.baseline_config.lr_decay_start_epoch / max(spec.baseline_config.epochs, 1))
        nn_cfg = replace(spec.baseline_config, epochs=nn_epochs, seed=nn_seed,
                         lr_decay_start_epoch=min(decay, nn_epochs))
        jobs.append(dict(spec=spec, train=ds, fraction=f, method="nn", alpha=float("nan"),
                         seed=nn_seed, config=nn_cfg))
        for a in sorted(spec.alphas_for(f)):
            run_seed = derive_seed(spec.seed, "sssae", f, a)
            cfg = replace(spec.config, alpha=a, seed=run_seed)
            jobs.append(dict(spec=spec, train=ds, fraction=f, method="sssae", alpha=a,
                             seed=run_seed, config=cfg))

    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    score = collapsed_accuracy(spec.cmap)
    rows = []
    for f in sorted(spec.fractions):
        mine = [r for r in results if r["fraction"] == f]
        nn = next(r for r in mine if r["method"] == "nn")
        joint = [r for r in mine if r["method"] == "sssae"]
        alpha_valid = {r["alpha"]: r["valid_acc"] for r in joint}
        ok = [r for r in joint if r["status"] == "ok"]
        # max() keeps the first maximum and ``joint`` is alpha-sorted: ties go to the smallest alpha
        best = max(ok, key=lambda r: r["valid_acc"], default=None)
        nn_test = score(nn["params"], spec.test) if nn["params"] is not None else float("nan")
        rows.append(FractionResult(
            fraction=f,
            labeled_count=splits[f].num_labeled,
            alpha_valid=alpha_valid,
            best_alpha=best["alpha"] if best else float("nan"),
            nn_valid=nn["valid_acc"],
            nn_test=nn_test,
            sssae_valid=best["valid_acc"] if best else float("nan"),
            sssae_test=score(best["params"], spec.test) if best else float("nan"),
            failures=[r["status"] for r in mine if r["status"] != "ok"],
        ))
    runs = [{k: r[k] for k in RUN_COLUMNS} for r in results]
    return SweepResult(rows=rows, runs=runs)


def _pct(x: float) -> str:
    return "nan" if x != x else f"{100.0 * x:.2f}"


def _fmt_alpha(a: float) -> str:
    if a != a:
        return "nan"
    return repr(int(a)) if float(a).is_integer() else repr(a)


def header_lines(spec: ExperimentSpec) -> list[str]:
    items = {
        "seed": spec.seed,
        "fractions": ",".join(repr(f) for f in sorted(spec.fractions)),
        "alphas": ";".join(f"{f}:{','.join(_fmt_alpha(a) for a in spec.alphas_for(f))}"
                           for f in sorted(spec.fractions)),
        "hidden_dim": spec.hidden_dim,
        "baseline_hidden_dim": spec.baseline_hidden_dim,
        "baseline_epochs": "matched" if spec.baseline_epochs is None else spec.baseline_epochs,
        "train_frames": len(spec.train),
        "valid_frames": len(spec.valid),
        "test_frames": len(spec.test),
    }
    items.update({f"train.{k}": v for k, v in asdict(spec.config).items() if k not in ("alpha", "seed")})
    items.update({f"baseline.{k}": v for k, v in asdict(spec.baseline_config).items()
                  if k not in ("alpha", "seed", "epochs")})
    return [f"# {k} = {v}" for k, v in items.items()]


def write_table(result: SweepResult, path: str | Path, header: list[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in result.rows:
            w.writerow([f"{100.0 * r.fraction:g}", r.labeled_count, _pct(r.nn_valid), _pct(r.nn_test),
                        _pct(r.sssae_valid), _pct(r.sssae_test), _fmt_alpha(r.best_alpha)])


def write_curve(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in result.rows:
            w.writerow([repr(r.fraction), repr(r.nn_valid), repr(r.nn_test), repr(r.sssae_valid), repr(r.sssae_test)])


def write_runs(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in result.runs:
            w.writerow([repr(r["fraction"]), r["method"], _fmt_alpha(r["alpha"]), r["seed"], r["epochs"],
                        r["best_epoch"], repr(r["valid_acc"]), r["status"]])
