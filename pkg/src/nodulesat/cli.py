"""``nodulesat`` command line: synth, train, eval, gradcheck, verify, bench.

Exit codes: 0 success, 1 validation error, 2 metric-domain error, 3 numeric
failure (including a failed verify property).
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import SATConfig, SetAttentionTransformer, set_corrupt_shuffle
from .backbone import BackboneConfig
from .estimator import NoduleSATClassifier
from .exceptions import NoduleSATError, NumericDomainError, UndefinedMetricError
from .io import (
    bags_to_records,
    load_bags,
    read_candidates,
    read_config,
    read_manifest,
    read_predictions,
    write_config,
    write_manifest,
    write_predictions,
    write_truth,
    write_volume,
)
from .metrics import auc, format_report, froc, froc_report
from .nn.tensor import Tensor
from .preprocess import Volume
from .synth import SynthSpec, analytic_positive_rate, generate_bags
from .verify import GRADIENT_PROPERTIES, run_properties

EXIT_OK, EXIT_VALIDATION, EXIT_METRIC, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(NoduleSATError, ValueError):
    """Bad command-line input detected before any work starts."""


# -- helpers ----------------------------------------------------------------------


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset(directory) -> list:
    d = Path(directory)
    manifest = d / "manifest.csv"
    if not manifest.is_file():
        raise UsageError(f"{d} has no manifest.csv")
    feats = d / "features.npy"
    return load_bags(manifest, np.load(feats) if feats.is_file() else None)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


# config key -> (estimator parameter, parser)
_TRAIN_KEYS = {
    "model.sat.L": ("L", int),
    "model.sat.H": ("H", int),
    "model.sat.g": ("g", int),
    "model.sat.sigma": ("sigma", str),
    "train.epochs": ("epochs", int),
    "train.batch_bags": ("batch_bags", int),
    "train.lr": ("lr", float),
    "train.schedule": ("schedule", str),
    "train.period": ("period", int),
    "train.factor": ("factor", float),
    "train.milestones": ("milestones", _int_tuple),
    "train.ratio": ("ratio", float),
    "train.jitter": ("jitter", float),
    "train.voxel_augment": ("voxel_augment", lambda s: s.lower() in ("1", "true", "yes")),
    "train.mode": ("mode", str),
}
_BACKBONE_KEYS = {
    "model.backbone.growth": ("growth", int),
    "model.backbone.repeats": ("repeats", _int_tuple),
    "model.backbone.theta": ("theta", float),
    "model.backbone.bottleneck": ("bottleneck", int),
    "model.backbone.alpha": ("alpha", float),
    "model.backbone.edge": ("edge", int),
}
_PATH_KEYS = ("data.train", "data.test")
_KNOWN = set(_TRAIN_KEYS) | set(_BACKBONE_KEYS) | set(_PATH_KEYS) | {"seed", "task"}


def estimator_from_config(cfg: dict[str, str], seed: int) -> NoduleSATClassifier:
    unknown = sorted(set(cfg) - _KNOWN)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    params = {}
    for key, (name, parse) in _TRAIN_KEYS.items():
        if key in cfg:
            try:
                params[name] = parse(cfg[key])
            except ValueError:
                raise UsageError(f"config {key}={cfg[key]!r} is not valid") from None
    bb = {name: parse(cfg[key]) for key, (name, parse) in _BACKBONE_KEYS.items() if key in cfg}
    if bb:
        params["backbone"] = BackboneConfig(**bb)
    return NoduleSATClassifier(random_state=seed, **params)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_bags=args.bags, n_min=args.nmin, n_max=args.nmax, n_keys=args.keys, feature_dim=args.dim,
        noise=args.noise, mask_fraction=args.mask, payload=args.payload, edge=args.edge,
        seed=args.seed, embed_seed=args.embed_seed,
    )
    out = prepare_out(args.out, args.force)
    bags = generate_bags(spec)
    refs = []
    if spec.payload == "feature":
        rows = np.concatenate([np.stack(b.instances) for b in bags])
        np.save(out / "features.npy", rows)
        start = 0
        for b in bags:
            refs.append([str(start + i) for i in range(len(b))])
            start += len(b)
    else:
        (out / "volumes").mkdir()
        for b in bags:
            names = [f"volumes/{b.bag_id}_{i}.vox" for i in range(len(b))]
            for name, patch in zip(names, b.instances):
                write_volume(out / name, Volume(patch, (1.0, 1.0, 1.0)))
            refs.append(names)
    write_manifest(out / "manifest.csv", bags_to_records(bags, refs))
    write_truth(out / "truth.csv", bags)
    write_config(out / "spec.cfg", {f"synth.{k}": v for k, v in vars(spec).items()})
    print(f"bags={len(bags)}")
    print(f"instances={sum(len(b) for b in bags)}")
    print(f"analytic_positive_rate={analytic_positive_rate(spec):.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    if args.data:
        cfg["data.train"] = args.data
    if args.test:
        cfg["data.test"] = args.test
    for key, value in (("train.epochs", args.epochs), ("train.mode", args.mode)):
        if value is not None:
            cfg[key] = str(value)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("a seed is required (--seed or seed= in the config)")
    seed = int(seed)
    if "data.train" not in cfg:
        raise UsageError("no training data: pass --data or set data.train")
    for key in _PATH_KEYS:
        if key in cfg and not Path(cfg[key]).is_dir():
            raise UsageError(f"{key} path {cfg[key]} does not exist")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint {args.resume} does not exist")

    train = load_dataset(cfg["data.train"])
    out = Path(args.out)
    if not args.resume:
        out = prepare_out(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    log = open(out / "train_log.csv", "a" if args.resume else "w")

    def on_epoch(rec):
        line = f"{rec.epoch},{rec.lr:.6g},{rec.loss:.6f}"
        log.write(line + "\n")
        log.flush()
        if not args.quiet:
            print(line)

    est = estimator_from_config(cfg, seed)
    est.set_params(on_epoch=on_epoch)
    try:
        if args.resume:
            est.load(args.resume, train)
            est.partial_fit(train)
        else:
            est.fit(train)
    finally:
        log.close()
    est.save(out / "checkpoint.nsat")
    if "data.test" in cfg:
        test = load_dataset(cfg["data.test"])
        write_predictions(out / "predictions.csv", est.predict_bags(test))
    print(f"checkpoint={out / 'checkpoint.nsat'}")
    print(f"epochs={est.epoch_}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.metric == "cpm":
        cands = read_candidates(args.predictions)
        scans = args.scans or len({c.series_id for c in cands})
        report = froc_report(froc(cands, scans))
    else:
        if not args.truth:
            raise UsageError("auc needs --truth (a bag manifest)")
        preds = read_predictions(args.predictions)
        scores, labels = [], []
        counters: dict[str, int] = {}
        for rec in read_manifest(args.truth):
            idx = counters.get(rec.bag_id, 0)
            counters[rec.bag_id] = idx + 1
            if rec.label is None:
                continue
            if (rec.bag_id, idx) not in preds:
                raise UsageError(f"no prediction for {rec.bag_id} instance {idx}")
            scores.append(preds[(rec.bag_id, idx)])
            labels.append(rec.label)
        report = {"auc": auc(scores, labels), "n": float(len(labels))}
    sys.stdout.write(format_report(report))
    return EXIT_OK


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_verify(args) -> int:
    set_corrupt_shuffle(args.corrupt_shuffle)
    try:
        return _report(run_properties())
    finally:
        set_corrupt_shuffle(False)


def cmd_gradcheck(args) -> int:
    return _report(run_properties(GRADIENT_PROPERTIES))


def cmd_bench(args) -> int:
    """Forward+backward timing of the SAT at the default width."""
    rng = np.random.default_rng(args.seed or 0)
    sat = SetAttentionTransformer(SATConfig(L=3, H=args.width, g=8), rng)
    for n in (8, 32, 128):
        x = Tensor(rng.normal(size=(args.batch, n, args.width)), requires_grad=True)
        t = time.perf_counter()
        for _ in range(args.repeats):
            sat(x).sum().backward()
        ms = (time.perf_counter() - t) / args.repeats * 1e3
        print(f"sat_fwd_bwd_ms@B={args.batch},N={n},H={args.width}={ms:.3f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--config", help="key=value run configuration")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")

    p = argparse.ArgumentParser(prog="nodulesat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic relational bags")
    s.add_argument("--bags", type=int, default=100)
    s.add_argument("--keys", type=int, default=8)
    s.add_argument("--nmin", type=int, default=1)
    s.add_argument("--nmax", type=int, default=23)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--mask", type=float, default=0.46)
    s.add_argument("--payload", choices=("feature", "voxel"), default="feature")
    s.add_argument("--edge", type=int, default=8)
    s.add_argument("--embed-seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train NoduleSAT on a dataset directory")
    t.add_argument("--data", help="training dataset directory (overrides data.train)")
    t.add_argument("--test", help="dataset to predict after training (overrides data.test)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--mode", choices=("end-to-end", "frozen-backbone", "frozen-bn"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score predictions")
    e.add_argument("--predictions", required=True, help="candidate file (cpm) or prediction file (auc)")
    e.add_argument("--truth", help="bag manifest with labels (auc)")
    e.add_argument("--metric", choices=("cpm", "auc"), required=True)
    e.add_argument("--scans", type=int, help="scan count for cpm (default: distinct series ids)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run the property suite")
    v.add_argument("--corrupt-shuffle", action="store_true", help="negative control: break the channel shuffle")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", parents=[common], help="gradient properties only")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="time SAT forward and backward")
    b.add_argument("--width", type=int, default=256)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; map to validation
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except NumericDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NoduleSATError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
