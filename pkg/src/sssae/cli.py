"""Command-line driver: ``sssae {prepare,synth,train,eval,gradcheck,sweep}``.

Exit codes: 0 success, 1 user or configuration error, 2 numerical failure.
Settings come from an optional ``key = value`` file (``--config``) overridden
by ``--set key=value`` and the dedicated flags of each command.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, DataError, NumericalError
from .evaluation import evaluate, predict, write_report
from .model import ModelShape, init_params, load_checkpoint, save_checkpoint
from .objective import Batch, finite_difference_gradient, loss_and_gradients, max_relative_error
from .sweep import (ExperimentSpec, derive_seed, header_lines, run_sweep, write_curve, write_runs,
                    write_table)
from .tensor import STREAM_CORRUPT, STREAM_SYNTH, ShapeError, make_rng
from .trainer import CsvLogWriter, TrainConfig, TrainLog, train, train_supervised_baseline

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOL = 1e-6

log = logging.getLogger("sssae")


def read_config(path: str | Path | None) -> dict[str, str]:
    values: dict[str, str] = {}
    if path is None:
        return values
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def settings(args) -> dict[str, str]:
    values = read_config(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _atomic_write(path: Path, writer) -> None:
    """Write via a temporary file in the same directory, then rename."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    cfg = settings(args)
    left = int(cfg.get("left", args.left))
    right = int(cfg.get("right", args.right))
    sources = {"train": args.train, "valid": args.valid, "test": args.test}
    sources = {k: Path(v) for k, v in sources.items() if v}
    if not sources:
        raise ConfigError("give at least one of --train/--valid/--test")
    for path in sources.values():
        if not path.is_file():
            raise ConfigError(f"input not found: {path}")
    phones = D.load_collapse_map(cfg.get("collapse_map", args.collapse_map)).sources
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepared = {}
    for split, path in sources.items():
        table = D.load_frame_table(path, phones)
        prepared[split] = D.prepare(table, left, right, digest=D.file_digest(path))
    for split, ds in prepared.items():
        _atomic_write(out / f"{split}.ds", lambda p, ds=ds: D.save_dataset(ds, p))
        matched = D.check_published_counts(split, len(ds))
        note = f" (matches published {split} count {matched})" if matched else ""
        print(f"{split}: {len(ds)} frames, input_dim {ds.input_dim}{note}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = settings(args)
    seed = int(cfg.get("seed", 0))
    base = D.SyntheticCorpus(
        num_classes=int(cfg.get("classes", args.classes)),
        frame_dim=int(cfg.get("frame_dim", args.frame_dim)),
        num_frames=int(cfg.get("frames", args.frames)),
        num_speakers=int(cfg.get("speakers", args.speakers)),
        noise=float(cfg.get("noise", args.noise)),
        seed=seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": base.num_frames,
             "valid": int(cfg.get("valid_frames", args.valid_frames)),
             "test": int(cfg.get("test_frames", args.test_frames))}
    for k, (split, n) in enumerate(sizes.items()):
        corpus = replace(base, num_frames=n, seed=seed if k == 0 else derive_seed(seed, "synth", split))
        table = D.generate_synthetic_frames(corpus, means_seed=seed, prefix="" if k == 0 else split[0])
        D.write_frame_table(table, out / f"{split}.csv")
        print(f"{split}: {len(table)} frames -> {out / f'{split}.csv'}")
    return EXIT_OK


def _train_config(cfg: dict[str, str]) -> TrainConfig:
    values = dict(cfg)
    values.setdefault("alpha", "1.0")
    return TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    cfg = settings(args)
    if args.alpha is not None:
        cfg["alpha"] = str(args.alpha)
    tcfg = _train_config(cfg)
    train_ds = D.load_dataset(args.train)
    valid_ds = D.load_dataset(args.valid)
    fraction = float(cfg.get("fraction", args.fraction))
    if fraction < 1.0:
        train_ds = D.split_labels(train_ds, fraction, tcfg.seed)
    num_classes = int(cfg.get("num_classes", 48))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "classifier" if args.baseline else "sssae"
    hidden = int(cfg.get("hidden_dim", args.hidden))
    shape = ModelShape(train_ds.input_dim, hidden, num_classes)
    writer = CsvLogWriter(out / "train_log.csv", TrainLog(config=tcfg, mode=mode))
    try:
        if args.baseline:
            params, tlog = train_supervised_baseline(shape, train_ds, valid_ds, tcfg, on_epoch=writer)
        else:
            params, tlog = train(init_params(shape, tcfg.seed), train_ds, valid_ds, tcfg, on_epoch=writer)
    finally:
        writer.close()
    save_checkpoint(params, out / "model.ckpt")
    print(f"best epoch {tlog.best_epoch}: validation accuracy {tlog.best_valid_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = settings(args)
    params = load_checkpoint(args.checkpoint)
    ds = D.load_dataset(args.data)
    cmap = D.load_collapse_map(cfg.get("collapse_map", args.collapse_map))
    report = evaluate(predict(params, ds), ds.eval_labels(), cmap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out, extra={"checkpoint": Path(args.checkpoint).name, "data": Path(args.data).name})
    print(f"collapsed frame accuracy {report.frame_accuracy_collapsed:.4f} "
          f"(raw {report.frame_accuracy_raw:.4f}, {report.num_frames} frames)")
    return EXIT_OK


def gradcheck(alpha: float, seed: int = 0, input_dim: int = 8, hidden: int = 16, classes: int = 4,
              batch_size: int = 6, labeled: int = 3, corruption_rate: float = 0.2, step: float = 1e-5,
              perturb: float = 0.0) -> tuple[float, str]:
    """Max relative error between backprop and central differences on a random small model."""
    rng = make_rng(seed, STREAM_SYNTH)
    params = init_params(ModelShape(input_dim, hidden, classes), seed)
    for a in params.arrays():
        a += rng.normal(0.0, 0.1, a.shape)
    x = rng.uniform(-1.0, 1.0, (batch_size, input_dim))
    y = np.full(batch_size, -1)
    y[:labeled] = rng.integers(0, classes, labeled)
    batch = Batch(x, y)
    _, grads = loss_and_gradients(params, batch, alpha, make_rng(seed, STREAM_CORRUPT), corruption_rate)
    if perturb:
        grads.W_E[0, 0] += perturb
    numeric = finite_difference_gradient(params, batch, alpha, step, seed, corruption_rate)
    return max_relative_error(grads, numeric)


def cmd_gradcheck(args) -> int:
    seed = int(settings(args).get("seed", 0))
    alphas = floats(args.alpha)
    status = EXIT_OK
    for a in alphas:
        err, where = gradcheck(a, seed=seed, perturb=args.perturb)
        ok = err < GRADCHECK_TOL
        print(f"alpha={a:g}: max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, worst {where})")
        if not ok:
            status = EXIT_NUMERIC
    return status


def build_spec(cfg: dict[str, str], seed: int) -> ExperimentSpec:
    cmap = D.load_collapse_map(cfg.get("collapse_map"))
    if cfg.get("synthetic", "false").lower() in ("1", "true", "yes"):
        base = D.SyntheticCorpus(
            num_classes=int(cfg.get("synth_classes", 10)),
            frame_dim=int(cfg.get("synth_frame_dim", 39)),
            num_frames=int(cfg.get("synth_frames", 20000)),
            num_speakers=int(cfg.get("synth_speakers", 20)),
            noise=float(cfg.get("synth_noise", 1.0)),
            seed=int(cfg.get("synth_seed", 0)),
        )
        sizes = {"valid": int(cfg.get("synth_valid_frames", 4000)),
                 "test": int(cfg.get("synth_test_frames", 4000))}
        sets = {"train": D.prepare(D.generate_synthetic_frames(base))}
        for split, n in sizes.items():
            corpus = replace(base, num_frames=n, seed=derive_seed(base.seed, "synth", split))
            sets[split] = D.prepare(D.generate_synthetic_frames(corpus, means_seed=base.seed, prefix=split[0]))
    else:
        missing = [k for k in ("train", "valid", "test") if k not in cfg]
        if missing:
            raise ConfigError(f"missing dataset paths: {', '.join(missing)} (or set synthetic = true)")
        sets = {k: D.load_dataset(cfg[k]) for k in ("train", "valid", "test")}

    fractions = floats(cfg["fractions"]) if "fractions" in cfg else None
    default_alphas = floats(cfg.get("alphas", "1"))
    per_fraction = {float(k.split("@", 1)[1]): floats(v) for k, v in cfg.items() if k.startswith("alphas@")}
    spec_kwargs = {}
    if fractions:
        spec_kwargs["fractions"] = fractions
    fr = fractions or ExperimentSpec.__dataclass_fields__["fractions"].default
    alphas = {f: per_fraction.get(f, default_alphas) for f in fr}
    base_cfg = {k[len("baseline_"):]: v for k, v in cfg.items() if k.startswith("baseline_")}
    base_cfg.setdefault("corruption_rate", "0")
    baseline_epochs = base_cfg.pop("epochs", "matched")
    return ExperimentSpec(
        train=sets["train"], valid=sets["valid"], test=sets["test"], cmap=cmap,
        alphas=alphas,
        config=_train_config(cfg),
        baseline_config=TrainConfig.from_mapping(base_cfg),
        baseline_epochs=None if baseline_epochs == "matched" else int(baseline_epochs),
        hidden_dim=int(cfg.get("hidden_dim", 10000)),
        baseline_hidden_dim=int(base_cfg.get("hidden_dim", 2000)),
        num_classes=int(cfg.get("num_classes", 48)),
        seed=seed,
        workers=int(cfg.get("workers", 1)),
        **spec_kwargs,
    )


def cmd_sweep(args) -> int:
    cfg = settings(args)
    seed = int(cfg.get("seed", 0))
    spec = build_spec(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_sweep(spec)
    header = header_lines(spec)
    write_table(result, out / "sweep_table.csv", header)
    write_curve(result, out / "sweep_curve.csv")
    write_runs(result, out / "sweep_runs.csv")
    for row in result.rows:
        print(f"{100 * row.fraction:g}% ({row.labeled_count} labeled): NN test {row.nn_test:.4f}, "
              f"SSSAE test {row.sssae_test:.4f} (alpha {row.best_alpha:g})")
    if result.failed:
        numeric = any("NumericalError" in r["status"] for r in result.runs)
        print("some sub-runs failed; see sweep_runs.csv", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_USER
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sssae", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="file of 'key = value' lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory (eval: report file)")

    p = sub.add_parser("prepare", help="frame tables -> normalized, stacked dataset caches")
    common(p)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--left", type=int, default=5)
    p.add_argument("--right", type=int, default=5)
    p.add_argument("--collapse-map")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write synthetic train/valid/test frame tables")
    common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--frame-dim", type=int, default=39)
    p.add_argument("--frames", type=int, default=20000)
    p.add_argument("--valid-frames", type=int, default=4000)
    p.add_argument("--test-frames", type=int, default=4000)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the joint model (or --baseline) on a prepared cache")
    common(p)
    p.add_argument("--train", required=True, help="training dataset cache")
    p.add_argument("--valid", required=True, help="validation dataset cache")
    p.add_argument("--alpha", type=float, help="classification weight (default 1.0)")
    p.add_argument("--hidden", type=int, default=10000)
    p.add_argument("--fraction", type=float, default=1.0, help="labeled fraction to keep")
    p.add_argument("--baseline", action="store_true", help="supervised classifier on labeled rows only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset cache")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--collapse-map")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    common(p, out_required=False)
    p.add_argument("--alpha", default="0,1,100", help="comma-separated alpha values")
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="labeled-fraction x alpha sweep with NN baseline")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2, which is reserved for numerical failures here
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ShapeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
